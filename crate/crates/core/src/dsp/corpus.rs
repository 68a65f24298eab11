//! Synthetic speech-like corpus: harmonic voiced segments shaped by
//! formant resonances, band-passed noise fricatives, pauses, and a pool of
//! colored background-noise clips.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mel::{samples_for_frames, HOP};
use super::wav::{rms, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Phoneme inventory size. Id 0 is a pause, 1-3 are fricatives, the rest voiced.
pub const VOCAB: usize = 16;

const FRICATIVES: [(f64, f64); 3] = [(5000.0, 3.0), (3000.0, 2.0), (6000.0, 1.0)];

/// (F1, F2, F3) in Hz for the twelve voiced phonemes.
const FORMANTS: [[f64; 3]; 12] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
    [490.0, 1350.0, 1690.0],
    [440.0, 1020.0, 2240.0],
    [640.0, 1190.0, 2390.0],
    [250.0, 1200.0, 2200.0],
    [360.0, 1300.0, 2700.0],
    [300.0, 610.0, 2200.0],
];

const CROSSFADE: usize = 96;
const PEAK: f64 = 0.6;
const NOISE_RMS: f64 = 0.1;
const NOISE_CLIP_SECS: f64 = 2.0;
pub const NOISE_POOL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhonemeKind {
    Pause,
    Fricative { center_hz: f64, q: f64 },
    Voiced { formants: [f64; 3] },
}

pub fn phoneme_kind(id: usize) -> PhonemeKind {
    match id {
        0 => PhonemeKind::Pause,
        1..=3 => {
            let (center_hz, q) = FRICATIVES[id - 1];
            PhonemeKind::Fricative { center_hz, q }
        }
        _ => PhonemeKind::Voiced {
            formants: FORMANTS[(id - 4) % FORMANTS.len()],
        },
    }
}

/// Everything needed to re-synthesize one utterance bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUtteranceSpec {
    pub phoneme_ids: Vec<usize>,
    /// Frames per phoneme.
    pub durations: Vec<usize>,
    pub f0_base_hz: f64,
    /// Linear F0 drift in Hz per second.
    pub f0_drift: f64,
    pub vibrato_rate_hz: f64,
    pub vibrato_depth_hz: f64,
    /// Per-phoneme amplitude of the energy envelope.
    pub phoneme_gains: Vec<f64>,
    pub seed: u64,
}

impl SyntheticUtteranceSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.phoneme_ids.len();
        if n == 0 {
            return Err(Error::Parameter("utterance has no phonemes".into()));
        }
        if self.durations.len() != n || self.phoneme_gains.len() != n {
            return Err(Error::Parameter(format!(
                "{n} phonemes but {} durations and {} gains",
                self.durations.len(),
                self.phoneme_gains.len()
            )));
        }
        if self.durations.contains(&0) {
            return Err(Error::Parameter("durations must be positive".into()));
        }
        if let Some(&bad) = self.phoneme_ids.iter().find(|&&i| i >= VOCAB) {
            return Err(Error::Parameter(format!("phoneme id {bad} outside vocabulary of {VOCAB}")));
        }
        if !(80.0..=400.0).contains(&self.f0_base_hz) {
            return Err(Error::Parameter(format!(
                "base F0 {} Hz outside [80, 400]",
                self.f0_base_hz
            )));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn num_samples(&self) -> usize {
        samples_for_frames(self.total_frames())
    }

    fn f0_at(&self, t: f64) -> f64 {
        let f = self.f0_base_hz
            + self.f0_drift * t
            + self.vibrato_depth_hz * (2.0 * PI * self.vibrato_rate_hz * t).sin();
        f.clamp(80.0, 400.0)
    }
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub spec: SyntheticUtteranceSpec,
    pub clean: Waveform,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub noise: Vec<Waveform>,
}

#[derive(Clone, Copy)]
struct Biquad {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Biquad {
    /// Band-pass with 0 dB peak gain.
    fn bandpass(center_hz: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * center_hz / SAMPLE_RATE as f64;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b2 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Spectral envelope of a voiced phoneme at frequency `f`.
fn formant_envelope(formants: &[f64; 3], f: f64) -> f64 {
    let gains = [1.0, 0.6, 0.3];
    let res: f64 = formants
        .iter()
        .zip(gains)
        .map(|(&fc, g)| {
            let bw = 60.0 + 0.06 * fc;
            g / (1.0 + ((f - fc) / bw).powi(2))
        })
        .sum();
    res + 0.02 / (1.0 + f / 1000.0)
}

/// Sample index where phoneme `i` starts. Boundaries sit between the
/// centers of the last frame of one phoneme and the first frame of the next.
fn boundaries(spec: &SyntheticUtteranceSpec) -> Vec<usize> {
    let n = spec.num_samples();
    let mut out = vec![0];
    let mut frame = 0;
    for &d in &spec.durations[..spec.durations.len() - 1] {
        frame += d;
        out.push(frame * HOP + 384);
    }
    out.push(n);
    out
}

/// Renders a spec to a waveform peak-normalized to 0.6.
pub fn synthesize(spec: &SyntheticUtteranceSpec) -> Result<Waveform> {
    spec.validate()?;
    let n = spec.num_samples();
    let bounds = boundaries(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_f00d);
    let mut fric_filters: Vec<Biquad> = FRICATIVES
        .iter()
        .map(|&(c, q)| Biquad::bandpass(c, q))
        .collect();
    let sr = SAMPLE_RATE as f64;
    let mut out = vec![0.0; n];
    let mut phase = 0.0f64;
    let mut seg = 0;
    let mut amps: Vec<f64> = Vec::new();
    const BLOCK: usize = 32;
    for (i, o) in out.iter_mut().enumerate() {
        while seg + 1 < spec.phoneme_ids.len() && i >= bounds[seg + 1] {
            seg += 1;
        }
        // Crossfade weights with the neighbouring phoneme near a boundary.
        let mut weights = [(seg, 1.0), (seg, 0.0)];
        if seg + 1 < spec.phoneme_ids.len() && i + CROSSFADE > bounds[seg + 1] {
            let x = (i + CROSSFADE - bounds[seg + 1]) as f64 / (2 * CROSSFADE) as f64;
            let w = 0.5 - 0.5 * (PI * x).cos();
            weights = [(seg, 1.0 - w), (seg + 1, w)];
        } else if seg > 0 && i < bounds[seg] + CROSSFADE {
            let x = (i + CROSSFADE - bounds[seg]) as f64 / (2 * CROSSFADE) as f64;
            let w = 0.5 - 0.5 * (PI * x).cos();
            weights = [(seg - 1, 1.0 - w), (seg, w)];
        }
        let t = i as f64 / sr;
        let f0 = spec.f0_at(t);
        phase += 2.0 * PI * f0 / sr;
        if phase > 2.0 * PI {
            phase -= 2.0 * PI;
        }
        let white: f64 = rng.random_range(-1.0..1.0);
        let fric_out: Vec<f64> = fric_filters.iter_mut().map(|f| f.process(white)).collect();

        if i % BLOCK == 0 || amps.is_empty() {
            let n_harm = ((7500.0 / f0).floor() as usize).max(1);
            amps = vec![0.0; n_harm];
            for &(p, w) in &weights {
                if w == 0.0 {
                    continue;
                }
                if let PhonemeKind::Voiced { formants } = phoneme_kind(spec.phoneme_ids[p]) {
                    let env: Vec<f64> = (1..=n_harm)
                        .map(|k| formant_envelope(&formants, k as f64 * f0))
                        .collect();
                    let power = (env.iter().map(|a| a * a).sum::<f64>() / 2.0).sqrt();
                    for (a, e) in amps.iter_mut().zip(env) {
                        *a += w * spec.phoneme_gains[p] * e / power;
                    }
                }
            }
        }
        let mut s: f64 = amps
            .iter()
            .enumerate()
            .map(|(k, a)| a * ((k + 1) as f64 * phase).sin())
            .sum();
        for &(p, w) in &weights {
            if let PhonemeKind::Fricative { .. } = phoneme_kind(spec.phoneme_ids[p]) {
                let which = spec.phoneme_ids[p] - 1;
                s += w * spec.phoneme_gains[p] * 2.5 * fric_out[which];
            }
        }
        *o = s;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    Waveform::new(out, SAMPLE_RATE)
}

/// Draws a random utterance spec from `seed`.
pub fn random_spec(seed: u64) -> SyntheticUtteranceSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(6..=10);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let edge = i == 0 || i + 1 == n;
        let prev_pause = ids.last() == Some(&0);
        let id = if edge && rng.random_bool(0.7) {
            0
        } else {
            let r: f64 = rng.random();
            if r < 0.08 && !prev_pause && !edge {
                0
            } else if r < 0.28 {
                rng.random_range(1..=3)
            } else {
                rng.random_range(4..VOCAB)
            }
        };
        ids.push(id);
    }
    let durations = ids
        .iter()
        .map(|&id| match phoneme_kind(id) {
            PhonemeKind::Pause | PhonemeKind::Fricative { .. } => rng.random_range(2..=5),
            PhonemeKind::Voiced { .. } => rng.random_range(3..=8),
        })
        .collect();
    let phoneme_gains = ids
        .iter()
        .map(|&id| match phoneme_kind(id) {
            PhonemeKind::Pause => 0.0,
            PhonemeKind::Fricative { .. } => rng.random_range(0.15..0.4),
            PhonemeKind::Voiced { .. } => rng.random_range(0.4..1.0),
        })
        .collect();
    SyntheticUtteranceSpec {
        phoneme_ids: ids,
        durations,
        f0_base_hz: rng.random_range(90.0..250.0),
        f0_drift: rng.random_range(-30.0..30.0),
        vibrato_rate_hz: rng.random_range(3.0..6.0),
        vibrato_depth_hz: rng.random_range(0.0..8.0),
        phoneme_gains,
        seed: rng.random(),
    }
}

/// One background clip: colored noise through a random band-pass with slow
/// amplitude modulation, scaled to RMS 0.1.
pub fn noise_clip(seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (NOISE_CLIP_SECS * SAMPLE_RATE as f64) as usize;
    let color: f64 = rng.random_range(0.0..0.95);
    let mut bp = Biquad::bandpass(rng.random_range(150.0..3500.0), rng.random_range(0.5..1.5));
    let band_mix: f64 = rng.random_range(0.3..0.8);
    let am_rate: f64 = rng.random_range(0.2..2.0);
    let am_depth: f64 = rng.random_range(0.0..0.5);
    let am_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let mut lp = 0.0;
    let mut out: Vec<f64> = (0..len)
        .map(|i| {
            let w: f64 = rng.random_range(-1.0..1.0);
            lp = color * lp + (1.0 - color) * w;
            let y = band_mix * 3.0 * bp.process(w) + (1.0 - band_mix) * lp;
            let t = i as f64 / SAMPLE_RATE as f64;
            y * (1.0 + am_depth * (2.0 * PI * am_rate * t + am_phase).sin())
        })
        .collect();
    let r = rms(&out);
    out.iter_mut().for_each(|v| *v *= NOISE_RMS / r);
    Waveform {
        samples: out,
        sample_rate: SAMPLE_RATE,
    }
}

pub fn generate_noise_pool(n: usize, seed: u64) -> Vec<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_ffee);
    (0..n).map(|_| noise_clip(rng.random())).collect()
}

/// `n` utterances plus a pool of background clips, fully determined by `seed`.
pub fn generate_corpus(n: usize, seed: u64) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::Parameter("corpus needs at least one utterance".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    let utterances = seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let spec = random_spec(s);
            let clean = synthesize(&spec)?;
            Ok(Utterance {
                id: format!("utt{i:05}"),
                spec,
                clean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        utterances,
        noise: generate_noise_pool(NOISE_POOL, seed),
    })
}
