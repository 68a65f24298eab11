//! Objective evaluation on held-out utterances and non-parallel transfer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{draw_noise, noisy_version, PreparedUtterance};
use super::model::Model;
use crate::align::{AlignMode, AlignmentPlan};
use crate::dsp::{stft_mel, Waveform};
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor};
use crate::teacher::{mean_frame_cosine, mel_prosody_channels, normalize_columns, StyleTeacher};
use crate::tts::{durations_from_log, PhonemeSequence};

/// Steps of the fast sampler compared against the full one.
pub const FAST_SAMPLER_STEPS: usize = 25;

/// Metrics at one SNR averaged over the held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrMetrics {
    /// `None` for clean references.
    pub snr_db: Option<f64>,
    /// Frame cosine between sampled style and teacher(clean).
    pub style_recovery: f64,
    /// Frame cosine between teacher(noisy) and teacher(clean).
    pub baseline: f64,
    /// L1 of the decoded mel with ground-truth durations.
    pub mel_l1: f64,
    /// Mean absolute error of normalized energy and centroid channels read
    /// off the decoded mel against those of the clean mel.
    pub prosody_error: f64,
    /// `1 - cosine` between fast and full sampler outputs.
    pub sampler_divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub sampler_steps: usize,
    pub per_snr: Vec<SnrMetrics>,
}

impl EvalReport {
    pub fn at(&self, snr: f64) -> Option<&SnrMetrics> {
        self.per_snr.iter().find(|m| m.snr_db == Some(snr))
    }
}

fn pair_seed(seed: u64, utt: usize, snr_idx: usize) -> u64 {
    seed ^ ((utt as u64) << 20) ^ ((snr_idx as u64) << 48) ^ 0x9e37_79b9_7f4a_7c15
}

/// Evaluates every held-out utterance at every SNR (`None` = clean).
pub fn evaluate(
    model: &Model,
    heldout: &[PreparedUtterance],
    noise: &[Waveform],
    snrs: &[Option<f64>],
    seed: u64,
) -> Result<EvalReport> {
    if heldout.is_empty() {
        return Err(Error::Contract("held-out set is empty".into()));
    }
    if snrs.is_empty() {
        return Err(Error::Contract("no evaluation SNRs given".into()));
    }
    let full_steps = model.schedule.steps;
    let mut per_snr = Vec::with_capacity(snrs.len());
    for (k, &snr) in snrs.iter().enumerate() {
        let mut acc = [0.0; 5];
        for (i, utt) in heldout.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, i, k));
            let noisy = match snr {
                Some(s) => {
                    let (clip, offset) = draw_noise(noise, &mut rng)?;
                    noisy_version(&utt.clean, &noise[clip], offset, s)?
                }
                None => utt.clean.clone(),
            };
            let noisy_mel = stft_mel(&noisy)?.frames;
            let sample_seed: u64 = rng.random();
            let full = model.sample_style(&noisy_mel, full_steps, sample_seed)?;
            let fast = model.sample_style(&noisy_mel, FAST_SAMPLER_STEPS.min(full_steps), sample_seed)?;
            let noisy_teacher = model.teacher.extract_style(&noisy)?.frames;
            let global = model.teacher.global_embedding(&noisy)?;

            let mut g = Graph::inference();
            let out = model.acoustic(&mut g, &utt.phonemes, utt.durations(), &full, &global)?;
            let mel = g.value(out.mel);
            let mel_l1 = mel
                .data()
                .iter()
                .zip(utt.clean_mel.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / mel.len() as f64;
            let pa = normalize_columns(&mel_prosody_channels(mel));
            let pb = normalize_columns(&mel_prosody_channels(&utt.clean_mel));
            let prosody = pa.data().iter().zip(pb.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pa.len() as f64;

            acc[0] += mean_frame_cosine(&full, &utt.teacher)?;
            acc[1] += mean_frame_cosine(&noisy_teacher, &utt.teacher)?;
            acc[2] += mel_l1;
            acc[3] += prosody;
            acc[4] += 1.0 - mean_frame_cosine(&fast, &full)?;
        }
        let n = heldout.len() as f64;
        per_snr.push(SnrMetrics {
            snr_db: snr,
            style_recovery: acc[0] / n,
            baseline: acc[1] / n,
            mel_l1: acc[2] / n,
            prosody_error: acc[3] / n,
            sampler_divergence: acc[4] / n,
        });
    }
    Ok(EvalReport {
        utterances: heldout.len(),
        sampler_steps: full_steps,
        per_snr,
    })
}

#[derive(Debug, Clone)]
pub struct TransferOutput {
    pub mel: Tensor,
    pub durations: Vec<usize>,
    pub t_style: usize,
    pub t_text: usize,
    pub mode: AlignMode,
    /// Codeword index of every reference style frame.
    pub codes: Vec<usize>,
}

/// Speaks `text` in the style of a (noisy) reference of unrelated content.
///
/// Durations come from `text` when present, otherwise from the duration
/// predictor.
pub fn nonparallel_transfer(
    model: &Model,
    reference: &Waveform,
    text: &PhonemeSequence,
    sampler_steps: usize,
    seed: u64,
) -> Result<TransferOutput> {
    let ref_mel = stft_mel(reference)?.frames;
    let style = model.sample_style(&ref_mel, sampler_steps, seed)?;
    let global = model.teacher.global_embedding(reference)?;
    let durations = match &text.durations {
        Some(d) => d.clone(),
        None => {
            let mut g = Graph::inference();
            let enc = model.encoder.forward(&mut g, &model.store, text)?;
            let pred = model.durations.forward(&mut g, &model.store, enc)?;
            durations_from_log(g.value(pred))
        }
    };
    let mut g = Graph::inference();
    let out = model.acoustic(&mut g, text, &durations, &style, &global)?;
    let t_text = out.frames;
    let plan = AlignmentPlan::new(style.rows(), t_text)?;
    Ok(TransferOutput {
        mel: g.value(out.mel).clone(),
        durations,
        t_style: style.rows(),
        t_text,
        mode: plan.mode,
        codes: out.style_vq.indices,
    })
}
