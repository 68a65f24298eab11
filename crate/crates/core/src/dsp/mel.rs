//! STFT and log-mel extraction: 1024-point FFT, 1024-sample Hann window,
//! hop 256, 80 HTK mel bands over 0-8 kHz, no center padding.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::wav::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Tensor};

pub const N_FFT: usize = 1024;
pub const WIN: usize = 1024;
pub const HOP: usize = 256;
pub const N_MELS: usize = 80;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const F_MAX: f64 = 8000.0;
pub const LOG_OFFSET: f64 = 1e-5;

/// `T_f x 80` log-mel matrix with its framing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
    pub hop: usize,
    pub win: usize,
    pub fft: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn from_frames(frames: Tensor) -> Result<Self> {
        if frames.rank() != 2 || frames.cols() != N_MELS {
            return Err(Error::dim("mel", format!("expected [T, {N_MELS}], got {:?}", frames.shape())));
        }
        Ok(Self {
            frames,
            hop: HOP,
            win: WIN,
            fft: N_FFT,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("mel", self.frames.clone());
        ck.insert_scalar("hop", self.hop as f64);
        ck.insert_scalar("win", self.win as f64);
        ck.insert_scalar("fft", self.fft as f64);
        ck.insert_scalar("sr", self.sample_rate as f64);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut m = Self::from_frames(ck.require("mel")?.clone())?;
        m.hop = ck.scalar("hop")? as usize;
        m.win = ck.scalar("win")? as usize;
        m.fft = ck.scalar("fft")? as usize;
        m.sample_rate = ck.scalar("sr")? as u32;
        Ok(m)
    }
}

/// `1 + floor((n - 1024) / 256)` for `n >= 1024`.
pub fn frame_count(n_samples: usize) -> Option<usize> {
    (n_samples >= WIN).then(|| 1 + (n_samples - WIN) / HOP)
}

/// Samples needed for exactly `frames` frames.
pub fn samples_for_frames(frames: usize) -> usize {
    (frames - 1) * HOP + WIN
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Edge frequencies (Hz) of the 80 triangles: filter `m` spans
/// `edges[m]..edges[m + 2]` and peaks at `edges[m + 1]`.
pub fn mel_edges() -> Vec<f64> {
    let top = hz_to_mel(F_MAX);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

pub fn bin_hz(k: usize) -> f64 {
    k as f64 * SAMPLE_RATE as f64 / N_FFT as f64
}

/// Triangular filterbank `[80][513]`, each row scaled so its largest weight is 1.
pub fn mel_filterbank() -> &'static [Vec<f64>] {
    static BANK: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    BANK.get_or_init(|| {
        let edges = mel_edges();
        (0..N_MELS)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut row: Vec<f64> = (0..N_BINS)
                    .map(|k| {
                        let f = bin_hz(k);
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect();
                let peak = row.iter().cloned().fold(0.0, f64::max);
                if peak > 0.0 {
                    row.iter_mut().for_each(|w| *w /= peak);
                }
                row
            })
            .collect()
    })
}

/// Periodic Hann window of length 1024.
pub fn hann_window() -> &'static [f64] {
    static WINDOW: OnceLock<Vec<f64>> = OnceLock::new();
    WINDOW.get_or_init(|| {
        (0..WIN)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WIN as f64).cos())
            .collect()
    })
}

fn fft_plan() -> Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    Arc::clone(PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(N_FFT)))
}

/// Magnitude spectrum (513 bins) of every Hann-windowed frame.
pub fn stft_magnitude(samples: &[f64]) -> Result<Vec<Vec<f64>>> {
    let frames = frame_count(samples.len()).ok_or(Error::Length {
        len: samples.len(),
        min: WIN,
    })?;
    let fft = fft_plan();
    let window = hann_window();
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(frames);
    for j in 0..frames {
        let frame = &samples[j * HOP..j * HOP + WIN];
        for (b, (s, w)) in buf.iter_mut().zip(frame.iter().zip(window)) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.push(buf[..N_BINS].iter().map(|c| c.norm()).collect());
    }
    Ok(out)
}

/// Log-mel spectrogram, `ln(mel + 1e-5)` of the magnitude spectrum.
pub fn stft_mel(wave: &Waveform) -> Result<MelSpectrogram> {
    if wave.sample_rate != SAMPLE_RATE {
        return Err(Error::Parameter(format!(
            "stft_mel expects {SAMPLE_RATE} Hz input, got {}",
            wave.sample_rate
        )));
    }
    let mags = stft_magnitude(&wave.samples)?;
    let bank = mel_filterbank();
    let mut data = Vec::with_capacity(mags.len() * N_MELS);
    for mag in &mags {
        for filt in bank {
            let e: f64 = filt.iter().zip(mag).map(|(w, m)| w * m).sum();
            data.push((e + LOG_OFFSET).ln());
        }
    }
    MelSpectrogram::from_frames(Tensor::new(&[mags.len(), N_MELS], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_gives_59_frames() {
        let m = stft_mel(&Waveform::silence(16000, SAMPLE_RATE)).unwrap();
        assert_eq!(m.num_frames(), 59);
        assert_eq!(m.frames.cols(), 80);
    }

    #[test]
    fn zero_signal_is_log_offset() {
        let m = stft_mel(&Waveform::silence(3000, SAMPLE_RATE)).unwrap();
        assert!(m.frames.data().iter().all(|&v| v == LOG_OFFSET.ln()));
    }

    #[test]
    fn short_signal_is_length_error() {
        let err = stft_mel(&Waveform::silence(1023, SAMPLE_RATE)).unwrap_err();
        assert!(matches!(err, Error::Length { len: 1023, min: 1024 }));
    }

    #[test]
    fn sine_peaks_in_the_band_containing_1khz() {
        let edges = mel_edges();
        // Filter whose peak is nearest to 1 kHz on the mel axis.
        let expected = (0..N_MELS)
            .min_by(|&a, &b| {
                let da = (hz_to_mel(edges[a + 1]) - hz_to_mel(1000.0)).abs();
                let db = (hz_to_mel(edges[b + 1]) - hz_to_mel(1000.0)).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        let m = stft_mel(&sine(1000.0, 8000)).unwrap();
        for r in 0..m.num_frames() {
            let row = m.frames.row(r);
            let arg = (0..N_MELS).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(arg, expected, "frame {r}");
        }
    }

    #[test]
    fn filterbank_shape_invariants() {
        let bank = mel_filterbank();
        let edges = mel_edges();
        assert_eq!(bank.len(), N_MELS);
        for (m, row) in bank.iter().enumerate() {
            assert!(row.iter().all(|&w| w >= 0.0));
            let peak = row.iter().cloned().fold(0.0, f64::max);
            assert!((peak - 1.0).abs() < 1e-12, "filter {m} peak {peak}");
            if m + 1 < N_MELS {
                // Adjacent supports overlap: next filter starts before this one ends.
                assert!(edges[m + 1] < edges[m + 2]);
            }
        }
        // Every bin up to 8 kHz lies inside some filter's support.
        for k in 0..N_BINS {
            let f = bin_hz(k);
            assert!((0..N_MELS).any(|m| edges[m] <= f && f <= edges[m + 2]), "bin {k}");
        }
    }

    proptest! {
        #[test]
        fn frame_count_matches_loop(n in 1024usize..40_000) {
            let mut count = 0;
            let mut start = 0;
            while start + WIN <= n {
                count += 1;
                start += HOP;
            }
            prop_assert_eq!(frame_count(n), Some(count));
        }

        #[test]
        fn outputs_finite(seed in 0u64..1000, amp in 0.0f64..1.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s = (0..2048).map(|_| amp * rng.random_range(-1.0..1.0)).collect();
            let m = stft_mel(&Waveform::new(s, SAMPLE_RATE).unwrap()).unwrap();
            prop_assert!(m.frames.is_finite());
        }
    }
}
