//! Training and held-out data with cached clean-side features.

use rand::Rng;

use super::config::TrainConfig;
use crate::dsp::corpus::{generate_noise_pool, Utterance, NOISE_POOL};
use crate::dsp::{generate_corpus, mix_at_snr, stft_mel, Waveform};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::teacher::{ProsodyTeacher, StyleTeacher};
use crate::tts::PhonemeSequence;

/// One utterance with everything that does not depend on the noise draw.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    pub id: String,
    pub clean: Waveform,
    pub clean_mel: Tensor,
    /// Teacher features of the clean waveform.
    pub teacher: Tensor,
    pub phonemes: PhonemeSequence,
}

impl PreparedUtterance {
    pub fn new(utt: &Utterance, teacher: &ProsodyTeacher) -> Result<Self> {
        let mel = stft_mel(&utt.clean)?;
        let style = teacher.extract_style(&utt.clean)?;
        let phonemes = PhonemeSequence::new(utt.spec.phoneme_ids.clone(), Some(utt.spec.durations.clone()))?;
        let total = phonemes.total_frames().unwrap_or(0);
        if total != mel.num_frames() || style.num_frames() != mel.num_frames() {
            return Err(Error::Alignment {
                left: total,
                right: mel.num_frames(),
            });
        }
        Ok(Self {
            id: utt.id.clone(),
            clean: utt.clean.clone(),
            clean_mel: mel.frames,
            teacher: style.frames,
            phonemes,
        })
    }

    pub fn frames(&self) -> usize {
        self.clean_mel.rows()
    }

    pub fn durations(&self) -> &[usize] {
        self.phonemes.durations.as_deref().expect("prepared utterances carry durations")
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<PreparedUtterance>,
    pub train_noise: Vec<Waveform>,
    pub heldout: Vec<PreparedUtterance>,
    /// Clips never mixed into training data.
    pub heldout_noise: Vec<Waveform>,
}

impl Dataset {
    /// Synthetic corpus as described by `cfg.corpus`.
    pub fn synthetic(cfg: &TrainConfig, teacher: &ProsodyTeacher) -> Result<Self> {
        let c = &cfg.corpus;
        let corpus = generate_corpus(c.train_utterances + c.heldout_utterances, c.seed)?;
        let prepared = corpus
            .utterances
            .iter()
            .map(|u| PreparedUtterance::new(u, teacher))
            .collect::<Result<Vec<_>>>()?;
        let mut train = prepared;
        let heldout = train.split_off(c.train_utterances);
        Ok(Self {
            train,
            train_noise: corpus.noise,
            heldout,
            heldout_noise: generate_noise_pool(NOISE_POOL, c.seed.wrapping_add(1)),
        })
    }
}

/// `clean` mixed at `snr` dB with `noise` rotated left by `offset` samples.
pub fn noisy_version(clean: &Waveform, noise: &Waveform, offset: usize, snr: f64) -> Result<Waveform> {
    let n = noise.len();
    if n == 0 {
        return Err(Error::Degenerate("noise clip is empty".into()));
    }
    let k = offset % n;
    let mut rotated = Vec::with_capacity(n);
    rotated.extend_from_slice(&noise.samples[k..]);
    rotated.extend_from_slice(&noise.samples[..k]);
    let rotated = Waveform::new(rotated, noise.sample_rate)?;
    Ok(mix_at_snr(clean, &rotated, snr)?.mixture)
}

/// Draws a clip index and offset from `pool`.
pub(crate) fn draw_noise<R: Rng>(pool: &[Waveform], rng: &mut R) -> Result<(usize, usize)> {
    if pool.is_empty() {
        return Err(Error::Contract("noise pool is empty".into()));
    }
    let idx = rng.random_range(0..pool.len());
    let offset = rng.random_range(0..pool[idx].len().max(1));
    Ok((idx, offset))
}
