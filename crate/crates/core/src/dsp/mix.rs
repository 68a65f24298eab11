use super::wav::{rms, Waveform};
use crate::error::{Error, Result};

/// Result of [`mix_at_snr`]. `mixture = speech_part + noise_part` sample by
/// sample; both parts carry the same peak-normalization `scale`.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub mixture: Waveform,
    pub speech_part: Vec<f64>,
    pub noise_part: Vec<f64>,
    /// Gain applied to the length-fitted noise before normalization.
    pub noise_gain: f64,
    /// Peak normalization factor; 1.0 when no sample exceeded 1.
    pub scale: f64,
}

impl Mixture {
    pub fn measured_snr_db(&self) -> f64 {
        snr_db(&self.speech_part, &self.noise_part)
    }
}

/// `20 log10(rms(signal) / rms(noise))`.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    20.0 * (rms(signal) / rms(noise)).log10()
}

/// Loops or truncates `noise` to `len` samples.
pub fn fit_length(noise: &[f64], len: usize) -> Vec<f64> {
    noise.iter().cycle().take(len).copied().collect()
}

/// `speech + g * noise` with `g = rms(speech) / (rms(noise) * 10^(snr/20))`.
pub fn mix_at_snr(speech: &Waveform, noise: &Waveform, snr: f64) -> Result<Mixture> {
    if speech.sample_rate != noise.sample_rate {
        return Err(Error::Parameter(format!(
            "sample rates differ: speech {} Hz, noise {} Hz",
            speech.sample_rate, noise.sample_rate
        )));
    }
    if snr.is_nan() {
        return Err(Error::Parameter("SNR is NaN".into()));
    }
    let fitted = fit_length(&noise.samples, speech.len());
    let rs = speech.rms();
    let rn = rms(&fitted);
    if rs == 0.0 {
        return Err(Error::Degenerate("speech is silent".into()));
    }
    if rn == 0.0 {
        return Err(Error::Degenerate("noise is silent".into()));
    }
    let g = rs / (rn * 10f64.powf(snr / 20.0));
    let mut noise_part: Vec<f64> = fitted.iter().map(|v| g * v).collect();
    let mut speech_part = speech.samples.clone();
    let mut mixed: Vec<f64> = speech_part
        .iter()
        .zip(&noise_part)
        .map(|(s, n)| s + n)
        .collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if scale != 1.0 {
        for v in mixed
            .iter_mut()
            .chain(speech_part.iter_mut())
            .chain(noise_part.iter_mut())
        {
            *v *= scale;
        }
    }
    Ok(Mixture {
        mixture: Waveform::new(mixed, speech.sample_rate)?,
        speech_part,
        noise_part,
        noise_gain: g,
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::wav::SAMPLE_RATE;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn noise(seed: u64, len: usize, amp: f64) -> Waveform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = (0..len).map(|_| amp * rng.random_range(-1.0..1.0)).collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    fn with_rms(w: Waveform, target: f64) -> Waveform {
        let k = target / w.rms();
        Waveform::new(w.samples.iter().map(|v| v * k).collect(), w.sample_rate).unwrap()
    }

    #[test]
    fn equal_rms_at_zero_db_has_unit_gain() {
        let s = with_rms(noise(1, 4000, 0.3), 0.1);
        let n = with_rms(noise(2, 4000, 0.3), 0.1);
        let m = mix_at_snr(&s, &n, 0.0).unwrap();
        assert!((m.noise_gain - 1.0).abs() < 1e-12);
    }

    #[test]
    fn twenty_db_gain() {
        let s = with_rms(noise(3, 4000, 0.3), 0.1);
        let n = with_rms(noise(4, 4000, 0.3), 0.1);
        let m = mix_at_snr(&s, &n, 20.0).unwrap();
        assert!((m.noise_gain - 0.1).abs() < 1e-12);
    }

    #[test]
    fn infinite_snr_returns_speech() {
        let s = noise(5, 3000, 0.5);
        let m = mix_at_snr(&s, &noise(6, 1000, 0.5), f64::INFINITY).unwrap();
        assert_eq!(m.mixture.samples, s.samples);
    }

    #[test]
    fn silent_inputs_are_degenerate() {
        let s = noise(7, 100, 0.5);
        let z = Waveform::silence(100, SAMPLE_RATE);
        assert!(matches!(mix_at_snr(&z, &s, 10.0), Err(Error::Degenerate(_))));
        assert!(matches!(mix_at_snr(&s, &z, 10.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn short_noise_is_looped() {
        let s = noise(8, 1000, 0.5);
        let n = noise(9, 300, 0.5);
        let m = mix_at_snr(&s, &n, 10.0).unwrap();
        assert_eq!(m.mixture.len(), 1000);
        assert!((m.noise_part[300] - m.noise_part[0]).abs() < 1e-15);
    }

    #[test]
    fn clipping_scales_both_parts() {
        let s = Waveform::new(vec![0.9, -0.9, 0.9, -0.9], SAMPLE_RATE).unwrap();
        let n = Waveform::new(vec![1.0, -1.0, 1.0, -1.0], SAMPLE_RATE).unwrap();
        let m = mix_at_snr(&s, &n, 0.0).unwrap();
        assert!(m.scale < 1.0);
        assert!(m.mixture.peak() <= 1.0 + 1e-12);
        assert!((m.measured_snr_db() - 0.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn snr_roundtrip(seed in 0u64..500, snr in -10.0f64..40.0) {
            let s = noise(seed, 2000, 0.4);
            let n = noise(seed + 10_000, 777, 0.2);
            let m = mix_at_snr(&s, &n, snr).unwrap();
            prop_assert!((m.measured_snr_db() - snr).abs() < 1e-9);
            prop_assert!(m.mixture.samples.iter().all(|v| v.is_finite()));
        }
    }
}
