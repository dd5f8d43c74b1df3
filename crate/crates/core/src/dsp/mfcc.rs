use serde::{Deserialize, Serialize};

use super::frames::FrameKernel;
use super::{ms_to_samples, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Floor applied to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub mel_fmin: f64,
    pub mel_fmax: f64,
    pub center_pad: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            window_ms: 40.0,
            hop_ms: 10.0,
            n_mels: 40,
            n_coeffs: 13,
            mel_fmin: 0.0,
            mel_fmax: 8000.0,
            center_pad: true,
        }
    }
}

impl MfccConfig {
    pub fn win_len(&self) -> usize {
        ms_to_samples(self.window_ms)
    }

    pub fn hop_len(&self) -> usize {
        ms_to_samples(self.hop_ms)
    }

    pub fn fft_size(&self) -> usize {
        self.win_len().next_power_of_two()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return Err(Error::invalid(format!(
                "n_coeffs {} must be in 1..={}",
                self.n_coeffs, self.n_mels
            )));
        }
        if !(self.mel_fmin >= 0.0
            && self.mel_fmin < self.mel_fmax
            && self.mel_fmax <= SAMPLE_RATE as f64 / 2.0)
        {
            return Err(Error::invalid("mel range must satisfy 0 <= fmin < fmax <= nyquist"));
        }
        Ok(())
    }

    pub fn kernel<T: Scalar>(&self) -> Result<FrameKernel<T>> {
        self.validate()?;
        FrameKernel::new(self.win_len(), self.hop_len(), self.fft_size(), self.center_pad)
    }
}

/// T×n_coeffs cepstral features.
#[derive(Clone, Debug, PartialEq)]
pub struct MfccFrames {
    values: Vec<f64>,
    frames: usize,
    n_coeffs: usize,
    frame_hop: usize,
}

impl MfccFrames {
    pub fn new(values: Vec<f64>, n_coeffs: usize, frame_hop: usize) -> Result<Self> {
        if n_coeffs == 0 || !values.len().is_multiple_of(n_coeffs) {
            return Err(Error::invalid("mfcc values do not form whole frames"));
        }
        Ok(Self { frames: values.len() / n_coeffs, values, n_coeffs, frame_hop })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    pub fn frame_hop(&self) -> usize {
        self.frame_hop
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_coeffs..(t + 1) * self.n_coeffs]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new([self.frames, self.n_coeffs], self.values.iter().map(|&v| T::of(v)).collect())
            .expect("shape is consistent")
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, laid out `bins × n_mels`.
pub fn mel_filterbank(cfg: &MfccConfig) -> Vec<f64> {
    let n_fft = cfg.fft_size();
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; bins * cfg.n_mels];
    for k in 0..bins {
        let f = k as f64 * SAMPLE_RATE as f64 / n_fft as f64;
        for m in 0..cfg.n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            fb[k * cfg.n_mels + m] = up.min(down).max(0.0);
        }
    }
    fb
}

/// Orthonormal DCT-II truncated to the first `n_coeffs` outputs, laid out
/// `n_in × n_coeffs`.
pub fn dct_matrix(n_in: usize, n_coeffs: usize) -> Vec<f64> {
    let mut d = vec![0.0; n_in * n_coeffs];
    for m in 0..n_in {
        for k in 0..n_coeffs {
            let scale = if k == 0 { (1.0 / n_in as f64).sqrt() } else { (2.0 / n_in as f64).sqrt() };
            let ang = std::f64::consts::PI * k as f64 * (2 * m + 1) as f64 / (2 * n_in) as f64;
            d[m * n_coeffs + k] = scale * ang.cos();
        }
    }
    d
}

pub fn mfcc(w: &Waveform, cfg: &MfccConfig) -> Result<MfccFrames> {
    if w.sample_rate() != SAMPLE_RATE {
        return Err(Error::invalid(format!("sample rate {} != {SAMPLE_RATE}", w.sample_rate())));
    }
    let kernel = cfg.kernel::<f64>()?;
    if w.len() < cfg.win_len() {
        return Err(Error::invalid(format!(
            "waveform of {} samples shorter than the {}-sample mfcc window",
            w.len(),
            cfg.win_len()
        )));
    }
    let (frames, spec) = kernel.analyze(w.samples())?;
    let bins = kernel.bins();
    let fb = mel_filterbank(cfg);
    let dct = dct_matrix(cfg.n_mels, cfg.n_coeffs);
    let mut out = Vec::with_capacity(frames * cfg.n_coeffs);
    let mut logmel = vec![0.0; cfg.n_mels];
    for t in 0..frames {
        logmel.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..bins {
            let p = spec[t * bins + k].norm_sqr();
            let row = &fb[k * cfg.n_mels..(k + 1) * cfg.n_mels];
            for (acc, &wgt) in logmel.iter_mut().zip(row) {
                *acc += p * wgt;
            }
        }
        logmel.iter_mut().for_each(|v| *v = v.max(LOG_FLOOR).ln());
        for k in 0..cfg.n_coeffs {
            out.push((0..cfg.n_mels).map(|m| logmel[m] * dct[m * cfg.n_coeffs + k]).sum());
        }
    }
    MfccFrames::new(out, cfg.n_coeffs, kernel.hop())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{StftConfig, SAMPLE_RATE};

    #[test]
    fn dct_of_constant_only_has_dc() {
        let d = dct_matrix(40, 13);
        for k in 1..13 {
            let s: f64 = (0..40).map(|m| 3.7 * d[m * 13 + k]).sum();
            assert!(s.abs() < 1e-12);
        }
        let dc: f64 = (0..40).map(|m| 3.7 * d[m * 13]).sum();
        assert!((dc - 3.7 * 40f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn silence_gives_constant_logmel_frames() {
        let w = Waveform::new(vec![0.0; 4000], SAMPLE_RATE).unwrap();
        let m = mfcc(&w, &MfccConfig::default()).unwrap();
        for t in 0..m.frames() {
            let f = m.frame(t);
            assert!((f[0] - LOG_FLOOR.ln() * 40f64.sqrt()).abs() < 1e-9);
            assert!(f[1..].iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn frame_counts_for_both_padding_modes() {
        let w = Waveform::new((0..16000).map(|i| (i as f64 * 0.01).sin()).collect(), SAMPLE_RATE)
            .unwrap();
        let centered = mfcc(&w, &MfccConfig::default()).unwrap();
        assert_eq!((centered.frames(), centered.n_coeffs()), (101, 13));
        assert_eq!(centered.frames(), StftConfig::default().frame_count(16000).unwrap());
        let plain = mfcc(&w, &MfccConfig { center_pad: false, ..MfccConfig::default() }).unwrap();
        // (16000 - 640) / 160 + 1
        assert_eq!(plain.frames(), 97);
    }

    #[test]
    fn too_short_input_fails() {
        let w = Waveform::new(vec![0.1; 300], SAMPLE_RATE).unwrap();
        assert!(matches!(mfcc(&w, &MfccConfig::default()), Err(Error::InvalidInput(_))));
        let bad = MfccConfig { n_coeffs: 41, ..MfccConfig::default() };
        assert!(bad.validate().is_err());
    }
}
