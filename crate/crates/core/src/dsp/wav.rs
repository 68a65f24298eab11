//! RIFF/WAVE PCM16 mono reader and writer.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Degenerate("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, target_rate: u32) -> Waveform {
        if target_rate == self.sample_rate {
            return self.clone();
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let out_len = ((self.samples.len() as f64) / ratio).round().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let lo = (pos.floor() as usize).min(last);
                let hi = (lo + 1).min(last);
                let frac = pos - lo as f64;
                self.samples[lo] * (1.0 - frac) + self.samples[hi] * frac
            })
            .collect();
        Waveform {
            samples,
            sample_rate: target_rate,
        }
    }
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn read_u16(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| format_err(at, "unexpected end of file"))
}

fn read_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| format_err(at, "unexpected end of file"))
}

/// Parses a PCM16 mono WAV image. The result keeps the file's sample rate.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.get(0..4) != Some(b"RIFF") {
        return Err(format_err(0, "missing RIFF tag"));
    }
    if bytes.get(8..12) != Some(b"WAVE") {
        return Err(format_err(8, "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4)? as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(format_err(pos + 4, format!("fmt chunk too small ({size} bytes)")));
                }
                let codec = read_u16(bytes, body)?;
                let channels = read_u16(bytes, body + 2)?;
                let rate = read_u32(bytes, body + 4)?;
                let bits = read_u16(bytes, body + 14)?;
                if codec != 1 {
                    return Err(format_err(body, format!("unsupported codec {codec}, only PCM (1)")));
                }
                if channels != 1 {
                    return Err(format_err(body + 2, format!("{channels} channels, only mono supported")));
                }
                if bits != 16 {
                    return Err(format_err(body + 14, format!("{bits}-bit samples, only 16-bit supported")));
                }
                if rate == 0 {
                    return Err(format_err(body + 4, "zero sample rate"));
                }
                fmt = Some((codec, channels, rate, bits));
            }
            b"data" => {
                let (_, _, rate, _) =
                    fmt.ok_or_else(|| format_err(pos, "data chunk before fmt chunk"))?;
                let end = body + size;
                let data = bytes
                    .get(body..end)
                    .ok_or_else(|| format_err(pos + 4, format!("data chunk of {size} bytes runs past end of file")))?;
                let samples: Vec<f64> = data
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                if samples.is_empty() {
                    return Err(format_err(pos, "empty data chunk"));
                }
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(format_err(pos, "no data chunk"))
}

pub fn encode_wav(wave: &Waveform) -> Vec<u8> {
    let n = wave.samples.len();
    let data_len = (2 * n) as u32;
    let mut out = Vec::with_capacity(44 + 2 * n);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &wave.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Reads a PCM16 mono WAV and resamples it to 16 kHz when needed.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let w = parse_wav(&fs::read(path)?)?;
    Ok(w.resample(SAMPLE_RATE))
}

pub fn write_wav(wave: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_wav(wave))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_second_of_silence() {
        let w = Waveform::silence(16000, SAMPLE_RATE);
        let back = parse_wav(&encode_wav(&w)).unwrap();
        assert_eq!(back.samples.len(), 16000);
        assert!(back.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn roundtrip_within_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<f64> = (0..5000).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let w = Waveform::new(samples, SAMPLE_RATE).unwrap();
        let back = parse_wav(&encode_wav(&w)).unwrap();
        let err = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 2f64.powi(-15), "{err}");
    }

    #[test]
    fn resample_8k_doubles_length_and_keeps_pitch() {
        let f = 440.0;
        let samples: Vec<f64> = (0..8000)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * f * n as f64 / 8000.0).sin())
            .collect();
        let w = Waveform::new(samples, 8000).unwrap();
        let up = w.resample(SAMPLE_RATE);
        assert_eq!(up.samples.len(), 16000);
        // Peak of a 0.1 Hz resolution DFT scan around the tone.
        let best = (4300..4500)
            .map(|k| k as f64 / 10.0)
            .map(|freq| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, s) in up.samples.iter().enumerate() {
                    let ph = 2.0 * std::f64::consts::PI * freq * n as f64 / 16000.0;
                    re += s * ph.cos();
                    im += s * ph.sin();
                }
                (freq, re * re + im * im)
            })
            .fold((0.0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        assert!((best.0 - f).abs() <= 1.0, "peak at {}", best.0);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        assert!(matches!(parse_wav(b"RIFX...."), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode_wav(&Waveform::silence(10, SAMPLE_RATE));
        bytes[20] = 3; // IEEE float codec
        match parse_wav(&bytes) {
            Err(Error::Format { offset, detail }) => {
                assert_eq!(offset, 20);
                assert!(detail.contains("codec"));
            }
            other => panic!("{other:?}"),
        }
        let mut bytes = encode_wav(&Waveform::silence(10, SAMPLE_RATE));
        bytes.truncate(50);
        assert!(matches!(parse_wav(&bytes), Err(Error::Format { offset: 40, .. })));
    }

    #[test]
    fn stereo_rejected() {
        let mut bytes = encode_wav(&Waveform::silence(10, SAMPLE_RATE));
        bytes[22] = 2;
        assert!(matches!(parse_wav(&bytes), Err(Error::Format { offset: 22, .. })));
    }
}
