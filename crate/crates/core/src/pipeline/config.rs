//! Training configuration, stored as TOML.

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserConfig, DEFAULT_OFFSET, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::teacher::{DEFAULT_GLOBAL_DIM, DEFAULT_PROJECTION_SEED, DEFAULT_STYLE_DIM};
use crate::tts::TtsConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mel: f64,
    pub duration: f64,
    /// Weight of the full VQ objective (codebook + 0.25 commitment).
    pub vq: f64,
    pub diffusion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mel: 1.0,
            duration: 1.0,
            vq: 1.0,
            diffusion: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train_utterances: usize,
    pub heldout_utterances: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_utterances: 200,
            heldout_utterances: 20,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub style_dim: usize,
    pub global_dim: usize,
    pub projection_seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            style_dim: DEFAULT_STYLE_DIM,
            global_dim: DEFAULT_GLOBAL_DIM,
            projection_seed: DEFAULT_PROJECTION_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub offset: f64,
    /// Sampler steps for the stage-2 style path during training.
    pub train_sample_steps: usize,
    /// Bound on the sampler's implied clean features; 0 disables clamping.
    pub clip_x0: f64,
    pub denoiser: DenoiserConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            offset: DEFAULT_OFFSET,
            train_sample_steps: 25,
            clip_x0: 8.0,
            denoiser: DenoiserConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub init_std: f64,
    /// Fuse the quantized style (`true`) or the pre-quantization features.
    pub fuse_quantized: bool,
    /// Also quantize the global embedding with its own codebook.
    pub quantize_global: bool,
    pub global_codebook_size: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            init_std: 0.5,
            fuse_quantized: true,
            quantize_global: false,
            global_codebook_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate the held-out set after the last step.
    pub final_eval: bool,
    pub snr_db: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            final_eval: true,
            snr_db: vec![5.0, 15.0, 25.0],
            seed: 99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_steps: usize,
    /// Steps during which the fusion path reads teacher features.
    pub stage1_steps: usize,
    /// Noise/step draws of the diffusion loss per training step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Training SNR range in dB, `[low, high]`.
    pub snr_db: [f64; 2],
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    pub corpus: CorpusConfig,
    pub teacher: TeacherConfig,
    pub diffusion: DiffusionConfig,
    pub vq: VqConfig,
    pub tts: TtsConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            total_steps: 6000,
            stage1_steps: 1500,
            batch_size: 4,
            learning_rate: 1e-3,
            snr_db: [5.0, 25.0],
            checkpoint_every: 1000,
            weights: LossWeights::default(),
            corpus: CorpusConfig::default(),
            teacher: TeacherConfig::default(),
            diffusion: DiffusionConfig::default(),
            vq: VqConfig::default(),
            tts: TtsConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stage1_steps > self.total_steps {
            return fail(format!(
                "stage1_steps {} exceeds total_steps {}",
                self.stage1_steps, self.total_steps
            ));
        }
        if !(self.snr_db[0] <= self.snr_db[1]) {
            return fail(format!("snr_db low {} above high {}", self.snr_db[0], self.snr_db[1]));
        }
        let w = &self.weights;
        if [w.mel, w.duration, w.vq, w.diffusion].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return fail("loss weights must be finite and non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive".into());
        }
        if self.corpus.train_utterances == 0 {
            return fail("corpus needs training utterances".into());
        }
        if self.diffusion.train_sample_steps == 0 || self.diffusion.train_sample_steps > self.diffusion.steps {
            return fail("train_sample_steps must be in 1..=steps".into());
        }
        if !(self.diffusion.clip_x0 >= 0.0) {
            return fail("clip_x0 must be non-negative".into());
        }
        if self.vq.codebook_size == 0 || (self.vq.quantize_global && self.vq.global_codebook_size == 0) {
            return fail("codebook sizes must be positive".into());
        }
        self.diffusion.denoiser.validate()?;
        self.tts.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = TrainConfig::default().to_toml();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), TrainConfig::default());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = TrainConfig::from_toml("total_steps = 10\nstage1_steps = 5\n[vq]\ncodebook_size = 8\n").unwrap();
        assert_eq!(cfg.total_steps, 10);
        assert_eq!(cfg.vq.codebook_size, 8);
        assert_eq!(cfg.vq.init_std, 0.5);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TrainConfig::from_toml("total_steps = 10\nstage1_steps = 11\n").is_err());
        assert!(TrainConfig::from_toml("snr_db = [20.0, 5.0]\n").is_err());
        assert!(TrainConfig::from_toml("[weights]\nmel = -1.0\n").is_err());
        assert!(TrainConfig::from_toml("unknown_key = 1\n").is_err());
    }
}
