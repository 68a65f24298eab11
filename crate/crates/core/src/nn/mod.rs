//! Dense f64 tensors, a reverse-mode gradient tape, layers, Adam and the
//! checkpoint container.

mod adam;
mod checkpoint;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CONTAINER_VERSION};
pub use graph::{Graph, Var};
pub use layers::{Conv1d, Embedding, LayerNorm, Linear};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
