//! Staged training, evaluation and style transfer.

pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod train;

pub use config::TrainConfig;
pub use data::{noisy_version, Dataset, PreparedUtterance};
pub use eval::{evaluate, nonparallel_transfer, EvalReport, SnrMetrics, TransferOutput};
pub use model::Model;
pub use train::{diffusion_loss_average, train, MetricsRecord, Trainer, TrainOutcome};
