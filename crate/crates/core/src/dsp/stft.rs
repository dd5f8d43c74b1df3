use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::frames::FrameKernel;
use super::{ms_to_samples, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowType {
    Hamming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub window_type: WindowType,
    pub center_pad: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_ms: 20.0,
            hop_ms: 10.0,
            fft_size: 512,
            window_type: WindowType::Hamming,
            center_pad: true,
        }
    }
}

impl StftConfig {
    pub fn win_len(&self) -> usize {
        ms_to_samples(self.window_ms)
    }

    pub fn hop_len(&self) -> usize {
        ms_to_samples(self.hop_ms)
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_ms > self.window_ms {
            return Err(Error::invalid("hop_ms must not exceed window_ms"));
        }
        if self.fft_size < self.win_len() {
            return Err(Error::invalid(format!(
                "fft_size {} smaller than window of {} samples",
                self.fft_size,
                self.win_len()
            )));
        }
        Ok(())
    }

    pub fn kernel<T: Scalar>(&self) -> Result<FrameKernel<T>> {
        self.validate()?;
        FrameKernel::new(self.win_len(), self.hop_len(), self.fft_size, self.center_pad)
    }

    pub fn frame_count(&self, samples: usize) -> Result<usize> {
        self.kernel::<f64>()?.frame_count(samples)
    }
}

/// T×F complex matrix (frame-major) plus the framing that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    values: Vec<Complex64>,
    frames: usize,
    bins: usize,
    frame_hop: usize,
    signal_len: usize,
    config: StftConfig,
}

impl ComplexSpectrogram {
    /// `signal_len` is the waveform length the inverse transform should emit.
    pub fn new(
        values: Vec<Complex64>,
        frames: usize,
        config: StftConfig,
        signal_len: usize,
    ) -> Result<Self> {
        let bins = config.bins();
        if values.len() != frames * bins {
            return Err(Error::invalid(format!(
                "spectrogram holds {} values, expected {frames}x{bins}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invalid("non-finite spectrogram entry"));
        }
        Ok(Self { values, frames, bins, frame_hop: config.hop_len(), signal_len, config })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frame_hop(&self) -> usize {
        self.frame_hop
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn get(&self, t: usize, f: usize) -> Complex64 {
        self.values[t * self.bins + f]
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * a).collect(), ..self.clone() }
    }

    /// Real/imaginary parts as a `[T, F, 2]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.values.iter().flat_map(|v| [T::of(v.re), T::of(v.im)]).collect();
        Tensor::new([self.frames, self.bins, 2], data).expect("shape is consistent")
    }

    pub fn from_tensor<T: Scalar>(
        t: &Tensor<T>,
        config: StftConfig,
        signal_len: usize,
    ) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[1] != config.bins() || s[2] != 2 {
            return Err(Error::invalid(format!("expected [T, {}, 2] tensor, got {s:?}", config.bins())));
        }
        let values = t
            .data()
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0].as_f64(), c[1].as_f64()))
            .collect();
        Self::new(values, s[0], config, signal_len)
    }

    /// |X| as a `[T, F]` tensor.
    pub fn magnitude<T: Scalar>(&self) -> Tensor<T> {
        let data = self.values.iter().map(|v| T::of(v.norm())).collect();
        Tensor::new([self.frames, self.bins], data).expect("shape is consistent")
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    if w.is_empty() {
        return Err(Error::invalid("empty waveform"));
    }
    if w.sample_rate() != SAMPLE_RATE {
        return Err(Error::invalid(format!("sample rate {} != {SAMPLE_RATE}", w.sample_rate())));
    }
    let kernel = cfg.kernel::<f64>()?;
    let (frames, values) = kernel.analyze(w.samples())?;
    ComplexSpectrogram::new(values, frames, cfg.clone(), w.len())
}

pub fn istft(x: &ComplexSpectrogram, cfg: &StftConfig) -> Result<Waveform> {
    if x.config() != cfg || x.bins() != cfg.bins() {
        return Err(Error::invalid(format!(
            "spectrogram with {} bins does not match config expecting {}",
            x.bins(),
            cfg.bins()
        )));
    }
    let kernel = cfg.kernel::<f64>()?;
    Waveform::new(kernel.synthesize(x.values(), x.signal_len()), SAMPLE_RATE)
}

/// `stft(istft(X))`: the nearest spectrogram that some waveform actually produces.
pub fn consistency_project(x: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    let w = istft(x, x.config())?;
    stft(&w, x.config())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(seed: u64, n: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), SAMPLE_RATE).unwrap()
    }

    /// Counts frames by sliding an explicit window over the padded signal.
    fn framing_loop_count(len: usize, win: usize, hop: usize) -> usize {
        let padded = len + win; // win/2 on each side
        let mut count = 0;
        let mut start = 0;
        while start + win <= padded {
            count += 1;
            start += hop;
        }
        count
    }

    #[test]
    fn zeros_give_zero_spectrum_with_expected_shape() {
        let w = Waveform::new(vec![0.0; 16000], SAMPLE_RATE).unwrap();
        let x = stft(&w, &StftConfig::default()).unwrap();
        assert_eq!((x.frames(), x.bins()), (101, 257));
        assert_eq!(framing_loop_count(16000, 320, 160), 101);
        assert!(x.values().iter().all(|v| v.norm() == 0.0));
        let y = istft(&x, &StftConfig::default()).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_count_matches_framing_loop() {
        let cfg = StftConfig::default();
        for len in [161, 999, 16000, 16001, 16159, 24000] {
            assert_eq!(cfg.frame_count(len).unwrap(), framing_loop_count(len, 320, 160));
            assert_eq!(cfg.frame_count(len).unwrap(), len / 160 + 1);
        }
    }

    #[test]
    fn sinusoid_peaks_at_expected_bin() {
        let n = 16000;
        let samples: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16000.0).sin())
            .collect();
        let w = Waveform::new(samples.clone(), SAMPLE_RATE).unwrap();
        let x = stft(&w, &StftConfig::default()).unwrap();
        // direct DFT of one interior frame (frame 50 starts at sample 50*160 - 160)
        let win = super::super::frames::hamming::<f64>(320);
        let start = 50 * 160 - 160;
        let direct: Vec<f64> = (0..257)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for j in 0..320 {
                    let ang = -2.0 * std::f64::consts::PI * k as f64 * j as f64 / 512.0;
                    re += win[j] * samples[start + j] * ang.cos();
                    im += win[j] * samples[start + j] * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect();
        let argmax = |v: &[f64]| {
            v.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
        };
        assert_eq!(argmax(&direct), 32);
        for k in 0..257 {
            assert!((direct[k] - x.get(50, k).norm()).abs() < 1e-8);
        }
        // edge frames mix in reflected samples
        for t in 1..x.frames() - 1 {
            let mags: Vec<f64> = (0..257).map(|k| x.get(t, k).norm()).collect();
            assert_eq!(argmax(&mags), 32, "frame {t}");
        }
    }

    #[test]
    fn perfect_reconstruction_and_linearity() {
        let cfg = StftConfig::default();
        let w = random_wave(1, 16000);
        let x = stft(&w, &cfg).unwrap();
        let y = istft(&x, &cfg).unwrap();
        assert_eq!(y.len(), w.len());
        let err = w.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");

        let y3 = istft(&x.scaled(-2.5), &cfg).unwrap();
        for (a, b) in y.samples().iter().zip(y3.samples()) {
            assert!((a * -2.5 - b).abs() < 1e-9);
        }
    }

    #[test]
    fn reconstruction_without_center_padding_excludes_edges() {
        let cfg = StftConfig { center_pad: false, ..StftConfig::default() };
        let w = random_wave(2, 8000);
        let x = stft(&w, &cfg).unwrap();
        let y = istft(&x, &cfg).unwrap();
        for i in 160..(8000 - 320) {
            assert!((w.samples()[i] - y.samples()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_properties() {
        let cfg = StftConfig::default();
        let w = random_wave(5, 4000);
        let x = stft(&w, &cfg).unwrap();
        let p = consistency_project(&x).unwrap();
        assert!(p.max_abs_diff(&x) < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals = (0..x.values().len())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let r = ComplexSpectrogram::new(vals, x.frames(), cfg, 4000).unwrap();
        let p1 = consistency_project(&r).unwrap();
        let p2 = consistency_project(&p1).unwrap();
        assert!(p1.max_abs_diff(&r) > 1e-3);
        assert!(p2.max_abs_diff(&p1) < 1e-6);
    }

    #[test]
    fn errors() {
        let cfg = StftConfig::default();
        assert!(stft(&Waveform::new(vec![], SAMPLE_RATE).unwrap(), &cfg).is_err());
        assert!(stft(&Waveform::new(vec![0.1; 100], SAMPLE_RATE).unwrap(), &cfg).is_err());
        let x = stft(&random_wave(0, 1000), &cfg).unwrap();
        let other = StftConfig { fft_size: 1024, ..cfg };
        assert!(matches!(istft(&x, &other), Err(Error::InvalidInput(_))));
    }
}
