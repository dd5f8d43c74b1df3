//! Deterministic signal processing: STFT/ISTFT, consistency projection, MFCC
//! features, SNR-controlled mixing and WAV I/O.

pub mod frames;
mod mfcc;
mod mix;
mod stft;
mod wav;

pub use mfcc::{mel_filterbank, dct_matrix, mfcc, MfccConfig, MfccFrames, LOG_FLOOR};
pub use mix::{mix_at_snr, power, Mixture};
pub use stft::{consistency_project, istft, stft, ComplexSpectrogram, StftConfig, WindowType};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

/// All ms-based configuration converts to samples at this rate.
pub const SAMPLE_RATE: u32 = 16_000;

pub(crate) fn ms_to_samples(ms: f64) -> usize {
    (ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
}

/// Mono time-domain signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
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
}
