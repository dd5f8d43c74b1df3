use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Waveform;
use crate::error::{Error, Result};

/// Mean square of a signal.
pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Result of mixing: the corrupted signal and the exact noise added to it.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub noisy: Waveform,
    pub noise: Waveform,
    pub noise_gain: f64,
}

/// Adds `noise` to `clean` scaled so the mixture has the requested SNR.
///
/// Noise shorter than the clean signal is tiled; longer noise is cropped at an
/// offset drawn from `seed`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Mixture> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::invalid(format!(
            "sample rates differ: {} vs {}",
            clean.sample_rate(),
            noise.sample_rate()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr must be finite"));
    }
    let p_clean = power(clean.samples());
    if clean.is_empty() || p_clean == 0.0 {
        return Err(Error::invalid("clean signal is silent"));
    }
    if noise.is_empty() {
        return Err(Error::invalid("noise signal is empty"));
    }
    let n = clean.len();
    let fitted: Vec<f64> = if noise.len() >= n {
        let slack = noise.len() - n;
        let offset = if slack == 0 { 0 } else { ChaCha8Rng::seed_from_u64(seed).gen_range(0..=slack) };
        noise.samples()[offset..offset + n].to_vec()
    } else {
        noise.samples().iter().copied().cycle().take(n).collect()
    };
    let p_noise = power(&fitted);
    if p_noise == 0.0 {
        return Err(Error::invalid("noise signal is silent"));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = fitted.iter().map(|v| v * gain).collect();
    let noisy: Vec<f64> = clean.samples().iter().zip(&scaled).map(|(c, v)| c + v).collect();
    Ok(Mixture {
        noisy: Waveform::new(noisy, clean.sample_rate())?,
        noise: Waveform::new(scaled, clean.sample_rate())?,
        noise_gain: gain,
    })
}
