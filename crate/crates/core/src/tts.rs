//! Minimal non-autoregressive acoustic head: phoneme encoder, duration
//! predictor, length regulator and a residual conv mel decoder.

use serde::{Deserialize, Serialize};

use crate::dsp::VOCAB;
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Embedding, Graph, LayerNorm, Linear, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
    /// Frames per phoneme, when known.
    pub durations: Option<Vec<usize>>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, durations: Option<Vec<usize>>) -> Result<Self> {
        let seq = Self { ids, durations };
        seq.validate(VOCAB)?;
        Ok(seq)
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::Contract("empty phoneme sequence".into()));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("phoneme id {bad} outside vocabulary of {vocab}")));
        }
        if let Some(d) = &self.durations {
            if d.len() != self.ids.len() {
                return Err(Error::Contract(format!(
                    "{} durations for {} phonemes",
                    d.len(),
                    self.ids.len()
                )));
            }
            if d.contains(&0) {
                return Err(Error::Contract("durations must be at least one frame".into()));
            }
        }
        Ok(())
    }

    /// Parses `ids:3,1,4` (the prefix is optional).
    pub fn parse(text: &str) -> Result<Self> {
        let body = text.trim();
        let body = body.strip_prefix("ids:").unwrap_or(body);
        let ids = body
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Parameter(format!("bad phoneme id {t:?} in {text:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, None)
    }

    pub fn total_frames(&self) -> Option<usize> {
        self.durations.as_ref().map(|d| d.iter().sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtsConfig {
    pub text_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_dilations: Vec<usize>,
    pub kernel: usize,
    pub duration_hidden: usize,
}

impl Default for TtsConfig {
    fn default() -> Self {
        Self {
            text_dim: 64,
            encoder_blocks: 2,
            decoder_dilations: vec![1, 2, 1, 2],
            kernel: 3,
            duration_hidden: 64,
        }
    }
}

impl TtsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_dim == 0 || self.duration_hidden == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config("tts needs positive widths and an odd kernel".into()));
        }
        if self.decoder_dilations.contains(&0) {
            return Err(Error::Config("decoder dilations must be positive".into()));
        }
        Ok(())
    }
}

/// Embedding followed by conv blocks, each `LayerNorm(x + relu(conv(x)))`.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: Embedding,
    blocks: Vec<(Conv1d, LayerNorm)>,
}

impl TextEncoder {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, name: &str, vocab: usize, cfg: &TtsConfig, rng: &mut R) -> Self {
        let d = cfg.text_dim;
        let blocks = (0..cfg.encoder_blocks)
            .map(|i| {
                (
                    Conv1d::new(store, &format!("{name}.conv{i}"), d, d, cfg.kernel, 1, rng),
                    LayerNorm::new(store, &format!("{name}.norm{i}"), d),
                )
            })
            .collect();
        Self {
            embedding: Embedding::new(store, &format!("{name}.embed"), vocab, d, rng),
            blocks,
        }
    }

    /// `[n_phonemes, D_t]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: &PhonemeSequence) -> Result<Var> {
        seq.validate(self.embedding.vocab)?;
        let mut x = self.embedding.forward(g, store, &seq.ids)?;
        for (conv, norm) in &self.blocks {
            let h = conv.forward(g, store, x)?;
            let h = g.relu(h);
            let s = g.add(x, h)?;
            x = norm.forward(g, store, s)?;
        }
        Ok(x)
    }
}

/// Two-layer MLP predicting `log(1 + d)` per phoneme.
#[derive(Debug, Clone)]
pub struct DurationPredictor {
    hidden: Linear,
    out: Linear,
}

impl DurationPredictor {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, name: &str, cfg: &TtsConfig, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), cfg.text_dim, cfg.duration_hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), cfg.duration_hidden, 1, rng),
        }
    }

    /// `[n_phonemes, 1]` log-domain predictions.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, enc: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, enc)?;
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}

pub fn log_durations(durations: &[usize]) -> Tensor {
    let v: Vec<f64> = durations.iter().map(|&d| (1.0 + d as f64).ln()).collect();
    Tensor::new(&[durations.len(), 1], v).expect("nonempty durations")
}

/// MSE between predictions and `log(1 + d)`.
pub fn duration_loss(g: &mut Graph, pred: Var, durations: &[usize]) -> Result<Var> {
    let target = g.constant(log_durations(durations));
    g.mse(pred, target)
}

/// Frames per phoneme from log-domain predictions; never below one.
pub fn durations_from_log(pred: &Tensor) -> Vec<usize> {
    pred.data()
        .iter()
        .map(|&p| {
            let d = (p.exp() - 1.0).round();
            if d.is_finite() && d >= 1.0 {
                d as usize
            } else {
                1
            }
        })
        .collect()
}

/// Repeats row `i` of `enc` `durations[i]` times.
pub fn length_regulate(g: &mut Graph, enc: Var, durations: &[usize]) -> Result<Var> {
    let n = g.value(enc).rows();
    if durations.len() != n {
        return Err(Error::Contract(format!("{} durations for {n} phonemes", durations.len())));
    }
    if durations.contains(&0) {
        return Err(Error::Contract("durations must be at least one frame".into()));
    }
    let ids: Vec<usize> = durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect();
    g.embedding(enc, &ids)
}

/// Residual dilated conv stack followed by a projection to mel bins.
#[derive(Debug, Clone)]
pub struct MelDecoder {
    blocks: Vec<(Conv1d, LayerNorm)>,
    out: Linear,
}

impl MelDecoder {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, name: &str, mel_bins: usize, cfg: &TtsConfig, rng: &mut R) -> Self {
        let d = cfg.text_dim;
        let blocks = cfg
            .decoder_dilations
            .iter()
            .enumerate()
            .map(|(i, &dil)| {
                (
                    Conv1d::new(store, &format!("{name}.conv{i}"), d, d, cfg.kernel, dil, rng),
                    LayerNorm::new(store, &format!("{name}.norm{i}"), d),
                )
            })
            .collect();
        Self {
            blocks,
            out: Linear::new(store, &format!("{name}.out"), d, mel_bins, rng),
        }
    }

    /// `[frames, D_t] -> [frames, mel_bins]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut x = x;
        for (conv, norm) in &self.blocks {
            let h = conv.forward(g, store, x)?;
            let h = g.relu(h);
            let s = g.add(x, h)?;
            x = norm.forward(g, store, s)?;
        }
        self.out.forward(g, store, x)
    }
}

/// L1 distance to the target mel.
pub fn mel_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let (p, t) = (g.value(pred).rows(), target.rows());
    if p != t {
        return Err(Error::Contract(format!("decoded {p} frames, target has {t}")));
    }
    let target = g.constant(target.clone());
    g.l1(pred, target)
}
