//! Noise-robust speaking-style features.
//!
//! A clean-speech prosody teacher produces frame-level style targets; a
//! conditional denoising diffusion model learns to regenerate those targets
//! from the noisy mel-spectrogram alone. The generated features are vector
//! quantized, aligned to the text axis without parameters and fused into a
//! small non-autoregressive acoustic model.

pub mod align;
pub mod diffusion;
pub mod dsp;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod teacher;
pub mod tts;
pub mod vq;

pub use error::{Error, Result};
