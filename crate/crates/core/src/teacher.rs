//! Clean-speech style teacher.
//!
//! A transparent DSP oracle: per frame it measures log-F0, voicing, log
//! energy, spectral centroid and four low-order mel-cepstral coefficients,
//! normalizes each channel over the utterance and projects the result onto
//! `D_s` dimensions with a fixed orthonormal basis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::mel::{bin_hz, stft_magnitude, stft_mel, N_MELS};
use crate::dsp::{frame_count, MelSpectrogram, Waveform, HOP, SAMPLE_RATE, WIN};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const RAW_CHANNELS: usize = 8;
pub const CH_LOG_F0: usize = 0;
pub const CH_VOICING: usize = 1;
pub const CH_ENERGY: usize = 2;
pub const CH_CENTROID: usize = 3;
pub const CH_CEPSTRUM: usize = 4;

pub const F0_MIN: f64 = 80.0;
pub const F0_MAX: f64 = 400.0;
pub const VOICING_THRESHOLD: f64 = 0.3;
const ENERGY_FLOOR: f64 = 1e-5;

/// Per-frame pitch track. `f0[j] == 0` exactly when `voiced[j]` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
}

/// Autocorrelation pitch tracker on 1024-sample frames at hop 256.
///
/// For each lag in the 80-400 Hz band the frame is correlated with its
/// shifted copy and normalized by both segment energies. The first local
/// peak within 90% of the best one wins (avoids octave-down errors), then a
/// parabola through its neighbours refines the lag.
pub fn extract_f0(wave: &Waveform) -> Result<F0Track> {
    if wave.sample_rate != SAMPLE_RATE {
        return Err(Error::Parameter(format!(
            "F0 extraction expects {SAMPLE_RATE} Hz, got {}",
            wave.sample_rate
        )));
    }
    let frames = frame_count(wave.len()).ok_or(Error::Length {
        len: wave.len(),
        min: WIN,
    })?;
    let sr = SAMPLE_RATE as f64;
    let min_lag = (sr / F0_MAX).floor() as usize;
    let max_lag = (sr / F0_MIN).ceil() as usize;
    let mut f0 = Vec::with_capacity(frames);
    let mut voiced = Vec::with_capacity(frames);
    let mut ncc = vec![0.0; max_lag + 2];
    for j in 0..frames {
        let raw = &wave.samples[j * HOP..j * HOP + WIN];
        let mean = raw.iter().sum::<f64>() / WIN as f64;
        let x: Vec<f64> = raw.iter().map(|v| v - mean).collect();
        // Prefix sums of squares give both segment energies per lag in O(1).
        let mut cum = vec![0.0; WIN + 1];
        for (i, v) in x.iter().enumerate() {
            cum[i + 1] = cum[i] + v * v;
        }
        for lag in (min_lag - 1)..=(max_lag + 1) {
            let n = WIN - lag;
            let num: f64 = x[..n].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum();
            let e0 = cum[n];
            let e1 = cum[WIN] - cum[lag];
            ncc[lag] = if e0 > 0.0 && e1 > 0.0 {
                num / (e0 * e1).sqrt()
            } else {
                0.0
            };
        }
        let best = (min_lag..=max_lag).map(|l| ncc[l]).fold(f64::MIN, f64::max);
        if best < VOICING_THRESHOLD {
            f0.push(0.0);
            voiced.push(false);
            continue;
        }
        let lag = (min_lag..=max_lag)
            .find(|&l| ncc[l] >= 0.9 * best && ncc[l] >= ncc[l - 1] && ncc[l] >= ncc[l + 1])
            .unwrap_or_else(|| {
                (min_lag..=max_lag)
                    .max_by(|&a, &b| ncc[a].total_cmp(&ncc[b]))
                    .unwrap()
            });
        let (a, b, c) = (ncc[lag - 1], ncc[lag], ncc[lag + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 {
            (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        f0.push(sr / (lag as f64 + shift));
        voiced.push(true);
    }
    Ok(F0Track { f0, voiced })
}

/// Orthonormal DCT-II coefficients 1..=4 of a log-mel row.
fn low_cepstrum(log_mel: &[f64]) -> [f64; 4] {
    let n = log_mel.len() as f64;
    let mut out = [0.0; 4];
    for (k, o) in out.iter_mut().enumerate() {
        let q = (k + 1) as f64;
        let s: f64 = log_mel
            .iter()
            .enumerate()
            .map(|(i, v)| v * (std::f64::consts::PI * q * (i as f64 + 0.5) / n).cos())
            .sum();
        *o = s * (2.0 / n).sqrt();
    }
    out
}

/// Unnormalized prosody channels, `[frames, 8]`.
pub fn raw_channels(wave: &Waveform) -> Result<Tensor> {
    let mel = stft_mel(wave)?;
    raw_channels_with_mel(wave, &mel)
}

fn raw_channels_with_mel(wave: &Waveform, mel: &MelSpectrogram) -> Result<Tensor> {
    let track = extract_f0(wave)?;
    let mags = stft_magnitude(&wave.samples)?;
    let frames = mags.len();
    if frames != mel.num_frames() || frames != track.f0.len() {
        return Err(Error::Contract(format!(
            "teacher frame mismatch: spectrum {frames}, mel {}, F0 {}",
            mel.num_frames(),
            track.f0.len()
        )));
    }
    let mut data = Vec::with_capacity(frames * RAW_CHANNELS);
    for j in 0..frames {
        let seg = &wave.samples[j * HOP..j * HOP + WIN];
        let frame_rms = (seg.iter().map(|v| v * v).sum::<f64>() / WIN as f64).sqrt();
        let (mut num, mut den) = (0.0, 0.0);
        for (k, m) in mags[j].iter().enumerate() {
            let p = m * m;
            num += bin_hz(k) * p;
            den += p;
        }
        let centroid_khz = if den > 1e-20 { num / den / 1000.0 } else { 0.0 };
        let cep = low_cepstrum(mel.frames.row(j));
        data.push(if track.voiced[j] { track.f0[j].ln() } else { 0.0 });
        data.push(if track.voiced[j] { 1.0 } else { 0.0 });
        data.push(frame_rms.max(ENERGY_FLOOR).ln());
        data.push(centroid_khz);
        data.extend_from_slice(&cep);
    }
    Tensor::new(&[frames, RAW_CHANNELS], data)
}

/// Zero-mean, unit-variance per column; constant columns map to zero.
pub fn normalize_columns(raw: &Tensor) -> Tensor {
    let (rows, cols) = raw.dims2();
    let mut out = raw.clone();
    for c in 0..cols {
        let mean = (0..rows).map(|r| raw.get2(r, c)).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (raw.get2(r, c) - mean).powi(2)).sum::<f64>() / rows as f64;
        let std = var.sqrt();
        for r in 0..rows {
            out.row_mut(r)[c] = if std > 1e-8 {
                (raw.get2(r, c) - mean) / std
            } else {
                0.0
            };
        }
    }
    out
}

/// `rows x cols` matrix with orthonormal columns from Gram-Schmidt on a
/// seeded Gaussian draw. Requires `rows >= cols`.
pub fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Tensor {
    assert!(rows >= cols, "need rows >= cols for orthonormal columns");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = Tensor::standard_normal(&[rows], &mut rng).into_data();
        // Two passes of modified Gram-Schmidt keep orthogonality near machine precision.
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (c, b) in basis.iter().enumerate() {
        for r in 0..rows {
            data[r * cols + c] = b[r];
        }
    }
    Tensor::new(&[rows, cols], data).expect("shape")
}

/// Frame-level style features, `[frames, D_s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleFeatureSequence {
    pub frames: Tensor,
    /// Frames per second.
    pub frame_rate: f64,
}

impl StyleFeatureSequence {
    pub fn new(frames: Tensor) -> Self {
        Self {
            frames,
            frame_rate: SAMPLE_RATE as f64 / HOP as f64,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Unit-norm utterance-level embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding(pub Vec<f64>);

impl GlobalEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.0.len()], self.0.clone()).expect("nonempty")
    }
}

/// Anything that can serve as the distillation teacher.
pub trait StyleTeacher {
    fn name(&self) -> &str;
    fn style_dim(&self) -> usize;
    fn global_dim(&self) -> usize;
    fn extract_style(&self, clean: &Waveform) -> Result<StyleFeatureSequence>;
    fn global_embedding(&self, wave: &Waveform) -> Result<GlobalEmbedding>;
}

/// Reference center and scale per raw channel, used to standardize pooled
/// statistics before the global projection.
const POOL_CENTER: [f64; RAW_CHANNELS] = [3.0, 0.5, -4.0, 2.0, 0.0, 0.0, 0.0, 0.0];
const POOL_SCALE: [f64; RAW_CHANNELS] = [2.5, 0.5, 3.0, 1.5, 5.0, 3.0, 2.0, 2.0];

#[derive(Debug, Clone)]
pub struct ProsodyTeacher {
    style_dim: usize,
    global_dim: usize,
    projection_seed: u64,
    /// `[D_s, 8]`, orthonormal columns.
    projection: Tensor,
    /// `[D_g, 16]`.
    global_projection: Tensor,
}

pub const DEFAULT_STYLE_DIM: usize = 16;
pub const DEFAULT_GLOBAL_DIM: usize = 32;
pub const DEFAULT_PROJECTION_SEED: u64 = 0x0057_171e;

impl Default for ProsodyTeacher {
    fn default() -> Self {
        Self::new(DEFAULT_STYLE_DIM, DEFAULT_GLOBAL_DIM, DEFAULT_PROJECTION_SEED)
            .expect("default dims are valid")
    }
}

impl ProsodyTeacher {
    pub fn new(style_dim: usize, global_dim: usize, projection_seed: u64) -> Result<Self> {
        if !(RAW_CHANNELS..=256).contains(&style_dim) {
            return Err(Error::Parameter(format!(
                "style dimension {style_dim} outside [{RAW_CHANNELS}, 256]"
            )));
        }
        if global_dim == 0 {
            return Err(Error::Parameter("global dimension must be positive".into()));
        }
        let projection = orthonormal_columns(style_dim, RAW_CHANNELS, projection_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(projection_seed.wrapping_add(1));
        let global_projection = Tensor::standard_normal(&[global_dim, 2 * RAW_CHANNELS], &mut rng);
        Ok(Self {
            style_dim,
            global_dim,
            projection_seed,
            projection,
            global_projection,
        })
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn projection_seed(&self) -> u64 {
        self.projection_seed
    }

    /// Projects normalized raw channels `[frames, 8]` to `[frames, D_s]`.
    pub fn project(&self, normalized: &Tensor) -> Tensor {
        let (frames, _) = normalized.dims2();
        let mut out = vec![0.0; frames * self.style_dim];
        for r in 0..frames {
            let x = normalized.row(r);
            for d in 0..self.style_dim {
                let p = self.projection.row(d);
                out[r * self.style_dim + d] = x.iter().zip(p).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::new(&[frames, self.style_dim], out).expect("shape")
    }

    /// Style features checked against an externally computed mel.
    pub fn extract_style_checked(&self, clean: &Waveform, mel: &MelSpectrogram) -> Result<StyleFeatureSequence> {
        let raw = raw_channels_with_mel(clean, mel)?;
        Ok(StyleFeatureSequence::new(self.project(&normalize_columns(&raw))))
    }
}

impl StyleTeacher for ProsodyTeacher {
    fn name(&self) -> &str {
        "dsp-prosody"
    }

    fn style_dim(&self) -> usize {
        self.style_dim
    }

    fn global_dim(&self) -> usize {
        self.global_dim
    }

    fn extract_style(&self, clean: &Waveform) -> Result<StyleFeatureSequence> {
        let raw = raw_channels(clean)?;
        Ok(StyleFeatureSequence::new(self.project(&normalize_columns(&raw))))
    }

    fn global_embedding(&self, wave: &Waveform) -> Result<GlobalEmbedding> {
        let raw = raw_channels(wave)?;
        let (rows, cols) = raw.dims2();
        let mut pooled = Vec::with_capacity(2 * cols);
        let mut stds = Vec::with_capacity(cols);
        for c in 0..cols {
            let mean = (0..rows).map(|r| raw.get2(r, c)).sum::<f64>() / rows as f64;
            let var = (0..rows).map(|r| (raw.get2(r, c) - mean).powi(2)).sum::<f64>() / rows as f64;
            pooled.push((mean - POOL_CENTER[c]) / POOL_SCALE[c]);
            stds.push(var.sqrt() / POOL_SCALE[c]);
        }
        pooled.extend(stds);
        let mut e: Vec<f64> = (0..self.global_dim)
            .map(|d| {
                self.global_projection
                    .row(d)
                    .iter()
                    .zip(&pooled)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            e.iter_mut().for_each(|v| *v /= n);
        } else {
            e[0] = 1.0;
        }
        Ok(GlobalEmbedding(e))
    }
}

/// Per-frame cosine similarity averaged over frames. Zero-norm frames
/// contribute 0 unless both are zero (then 1).
pub fn mean_frame_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Alignment {
            left: a.rows(),
            right: b.rows(),
        });
    }
    let rows = a.rows();
    let mut total = 0.0;
    for r in 0..rows {
        let (x, y) = (a.row(r), b.row(r));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += if nx > 0.0 && ny > 0.0 {
            dot / (nx * ny)
        } else if nx == 0.0 && ny == 0.0 {
            1.0
        } else {
            0.0
        };
    }
    Ok(total / rows as f64)
}

/// Energy and spectral-centroid proxies computed from a log-mel matrix:
/// `[frames, 2]` holding log total mel energy and centroid in mel-band units.
pub fn mel_prosody_channels(mel: &Tensor) -> Tensor {
    let (frames, bins) = mel.dims2();
    debug_assert_eq!(bins, N_MELS);
    let mut out = Vec::with_capacity(frames * 2);
    for r in 0..frames {
        let lin: Vec<f64> = mel.row(r).iter().map(|v| v.exp()).collect();
        let total: f64 = lin.iter().sum();
        let centroid = lin.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>() / total;
        out.push(total.ln());
        out.push(centroid);
    }
    Tensor::new(&[frames, 2], out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::corpus::{generate_noise_pool, random_spec, synthesize, SyntheticUtteranceSpec};
    use crate::dsp::mix_at_snr;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn sine(freq: f64, n: usize) -> Waveform {
        Waveform::new(
            (0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin()).collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn pure_sine_pitch() {
        for f in [85.0, 200.0, 333.0, 395.0] {
            let track = extract_f0(&sine(f, 8000)).unwrap();
            assert!(track.voiced.iter().all(|&v| v));
            for est in &track.f0 {
                assert!((est - f).abs() <= 3.0, "{f} Hz estimated as {est}");
            }
        }
    }

    #[test]
    fn white_noise_mostly_unvoiced() {
        let mut unvoiced = 0;
        let mut total = 0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = (0..8000).map(|_| rng.random_range(-0.5..0.5)).collect();
            let t = extract_f0(&Waveform::new(s, SAMPLE_RATE).unwrap()).unwrap();
            unvoiced += t.voiced.iter().filter(|v| !**v).count();
            total += t.voiced.len();
        }
        assert!(unvoiced as f64 >= 0.9 * total as f64, "{unvoiced}/{total}");
    }

    #[test]
    fn silence_unvoiced() {
        let t = extract_f0(&Waveform::silence(4000, SAMPLE_RATE)).unwrap();
        assert!(t.voiced.iter().all(|v| !v));
        assert!(t.f0.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn synthetic_speaker_pitch() {
        let spec = SyntheticUtteranceSpec {
            phoneme_ids: vec![5, 9, 12],
            durations: vec![8, 10, 8],
            f0_base_hz: 200.0,
            f0_drift: 0.0,
            vibrato_rate_hz: 5.0,
            vibrato_depth_hz: 0.0,
            phoneme_gains: vec![0.9, 0.7, 0.8],
            seed: 3,
        };
        let t = extract_f0(&synthesize(&spec).unwrap()).unwrap();
        let voiced: Vec<f64> = t.f0.iter().copied().filter(|&f| f > 0.0).collect();
        assert!(voiced.len() >= 20);
        for f in voiced {
            assert!((f - 200.0).abs() <= 3.0, "{f}");
        }
    }

    #[test]
    fn projection_is_orthonormal() {
        for dim in [8, 16, 256] {
            let p = orthonormal_columns(dim, RAW_CHANNELS, 77);
            for a in 0..RAW_CHANNELS {
                for b in 0..RAW_CHANNELS {
                    let d: f64 = (0..dim).map(|r| p.get2(r, a) * p.get2(r, b)).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn style_frames_match_mel() {
        let teacher = ProsodyTeacher::default();
        for s in 0..5 {
            let w = synthesize(&random_spec(s)).unwrap();
            let feats = teacher.extract_style(&w).unwrap();
            assert_eq!(feats.num_frames(), stft_mel(&w).unwrap().num_frames());
            assert_eq!(feats.dim(), 16);
            assert!(feats.frames.is_finite());
            assert_eq!(feats, teacher.extract_style(&w).unwrap());
        }
    }

    #[test]
    fn doubling_amplitude_shifts_energy_only() {
        let spec = SyntheticUtteranceSpec {
            phoneme_ids: vec![5, 9],
            durations: vec![8, 8],
            f0_base_hz: 150.0,
            f0_drift: 10.0,
            vibrato_rate_hz: 5.0,
            vibrato_depth_hz: 3.0,
            phoneme_gains: vec![0.5, 0.4],
            seed: 3,
        };
        let w = synthesize(&spec).unwrap();
        let loud = Waveform::new(w.samples.iter().map(|v| 2.0 * v).collect(), SAMPLE_RATE).unwrap();
        let (a, b) = (raw_channels(&w).unwrap(), raw_channels(&loud).unwrap());
        for r in 0..a.rows() {
            assert_eq!(a.get2(r, CH_LOG_F0), b.get2(r, CH_LOG_F0));
            assert_eq!(a.get2(r, CH_VOICING), b.get2(r, CH_VOICING));
            assert!((b.get2(r, CH_ENERGY) - a.get2(r, CH_ENERGY) - 2f64.ln()).abs() < 1e-12);
            assert!((b.get2(r, CH_CENTROID) - a.get2(r, CH_CENTROID)).abs() < 1e-9);
            for c in CH_CEPSTRUM..RAW_CHANNELS {
                assert!((b.get2(r, c) - a.get2(r, c)).abs() < 1e-2, "cepstrum {c}");
            }
        }
    }

    #[test]
    fn noise_lowers_feature_similarity() {
        let teacher = ProsodyTeacher::default();
        let noise = generate_noise_pool(1, 9).remove(0);
        let w = synthesize(&random_spec(21)).unwrap();
        let noisy = mix_at_snr(&w, &noise, 5.0).unwrap().mixture;
        let clean_f = teacher.extract_style(&w).unwrap();
        let noisy_f = teacher.extract_style(&noisy).unwrap();
        let sim = mean_frame_cosine(&clean_f.frames, &noisy_f.frames).unwrap();
        assert!(sim < 1.0);
        assert_eq!(mean_frame_cosine(&clean_f.frames, &clean_f.frames).unwrap(), 1.0);
    }

    #[test]
    fn global_embedding_properties() {
        let teacher = ProsodyTeacher::default();
        let mut spec = random_spec(4);
        spec.f0_base_hz = 110.0;
        let low = synthesize(&spec).unwrap();
        spec.f0_base_hz = 240.0;
        let high = synthesize(&spec).unwrap();
        let e_low = teacher.global_embedding(&low).unwrap();
        let norm: f64 = e_low.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);

        let mut shifted = vec![0.0; HOP];
        shifted.extend_from_slice(&low.samples);
        let e_shift = teacher.global_embedding(&Waveform::new(shifted, SAMPLE_RATE).unwrap()).unwrap();
        let e_high = teacher.global_embedding(&high).unwrap();
        let cos = |a: &GlobalEmbedding, b: &GlobalEmbedding| a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum::<f64>();
        let same = cos(&e_low, &e_shift);
        assert!(same > 0.99, "{same}");
        assert!(cos(&e_low, &e_high) < same);
    }
}
