//! Training objective (consistency-projected spectral L1 plus weighted frame
//! cross-entropy) and waveform metrics.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::classifier::{phoneme_loss, PhonemeFrameLabels, ProbMatrix, Reduction};
use crate::dsp::frames::FrameKernel;
use crate::dsp::{consistency_project, ComplexSpectrogram, Waveform};
use crate::nn::{Scalar, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    /// Project the estimate onto consistent spectrograms before comparing.
    pub consistency: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.0, consistency: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsnrConfig {
    pub segment_ms: f64,
    pub min_db: f64,
    pub max_db: f64,
    /// Segments whose reference power falls below this are skipped.
    pub silence_power: f64,
}

impl Default for SsnrConfig {
    fn default() -> Self {
        Self { segment_ms: 20.0, min_db: -10.0, max_db: 35.0, silence_power: 1e-8 }
    }
}

/// `Σ |Re(P(Ŝ) − S)| + |Im(P(Ŝ) − S)|`, with `P` the consistency projection
/// when enabled and the identity otherwise.
pub fn spectral_l1(s_hat: &ComplexSpectrogram, s: &ComplexSpectrogram, cfg: &LossConfig) -> Result<f64> {
    if s_hat.frames() != s.frames() || s_hat.bins() != s.bins() {
        return Err(Error::invalid(format!(
            "spectrogram shapes differ: {}x{} vs {}x{}",
            s_hat.frames(),
            s_hat.bins(),
            s.frames(),
            s.bins()
        )));
    }
    let projected;
    let est = if cfg.consistency {
        projected = consistency_project(s_hat)?;
        &projected
    } else {
        s_hat
    };
    Ok(est
        .values()
        .iter()
        .zip(s.values())
        .map(|(a, b)| (a.re - b.re).abs() + (a.im - b.im).abs())
        .sum())
}

/// Spectral term plus `λ` times the summed cross-entropy.
pub fn combined_loss(
    s_hat: &ComplexSpectrogram,
    s: &ComplexSpectrogram,
    probs: &ProbMatrix,
    labels: &PhonemeFrameLabels,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let spec = spectral_l1(s_hat, s, cfg)?;
    let ph = phoneme_loss(std::slice::from_ref(probs), std::slice::from_ref(labels), Reduction::Sum)?;
    Ok(spec + cfg.lambda * ph)
}

/// Records the spectral term for an estimate `[T, F, 2]` against a constant
/// target of the same shape; `len` is the waveform length for the projection.
pub fn spectral_l1_graph<T: Scalar>(
    tape: &mut Tape<T>,
    s_hat: Var,
    target: Var,
    kernel: &Arc<FrameKernel<T>>,
    len: usize,
    cfg: &LossConfig,
) -> Result<Var> {
    let est = if cfg.consistency {
        let w = tape.istft(s_hat, kernel, len)?;
        tape.stft(w, kernel)?
    } else {
        s_hat
    };
    tape.l1(est, target)
}

fn check_pair(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("waveform lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::invalid(format!("sample rates differ: {} vs {}", a.sample_rate(), b.sample_rate())));
    }
    Ok(())
}

/// Mean over non-silent segments of the clamped per-segment SNR. A trailing
/// partial segment is scored like a full one.
pub fn ssnr(reference: &Waveform, estimate: &Waveform, cfg: &SsnrConfig) -> Result<f64> {
    check_pair(reference, estimate)?;
    let seg = (cfg.segment_ms * reference.sample_rate() as f64 / 1000.0).round() as usize;
    if seg == 0 {
        return Err(Error::invalid("segment length rounds to zero samples"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, e) in reference.samples().chunks(seg).zip(estimate.samples().chunks(seg)) {
        let pr: f64 = r.iter().map(|v| v * v).sum();
        if pr / (r.len() as f64) < cfg.silence_power {
            continue;
        }
        let pd: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        let db = if pd == 0.0 { cfg.max_db } else { 10.0 * (pr / pd).log10() };
        total += db.clamp(cfg.min_db, cfg.max_db);
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("every reference segment is silent".into()));
    }
    Ok(total / count as f64)
}

/// `10·log10(P_ref / P_diff)` with `diff = ref − est`. Returns `+∞` when the
/// two signals are identical.
pub fn snr_db(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_pair(reference, estimate)?;
    let pr: f64 = reference.samples().iter().map(|v| v * v).sum();
    if pr == 0.0 {
        return Err(Error::UndefinedMetric("reference has zero power".into()));
    }
    let pd: f64 = reference.samples().iter().zip(estimate.samples()).map(|(a, b)| (a - b) * (a - b)).sum();
    if pd == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (pr / pd).log10())
}

/// SNR of a reference against an explicit noise signal.
pub fn snr_of_noise(reference: &Waveform, noise: &Waveform) -> Result<f64> {
    check_pair(reference, noise)?;
    let pr: f64 = reference.samples().iter().map(|v| v * v).sum();
    let pn: f64 = noise.samples().iter().map(|v| v * v).sum();
    if pr == 0.0 {
        return Err(Error::UndefinedMetric("reference has zero power".into()));
    }
    if pn == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (pr / pn).log10())
}
