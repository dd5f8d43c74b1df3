//! Framed real-FFT analysis/synthesis shared by the STFT, the MFCC front end and
//! the differentiable spectral operators on the tape.
//!
//! Every transform here is linear in its input (power spectra aside), and each
//! has an explicit adjoint so gradients can flow through it.

use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Floor applied to the summed squared window during overlap-add.
pub const OLA_FLOOR: f64 = 1e-10;

/// Periodic Hamming window.
pub fn hamming<T: Scalar>(len: usize) -> Vec<T> {
    (0..len)
        .map(|n| {
            let phase = 2.0 * std::f64::consts::PI * n as f64 / len as f64;
            T::of(0.54 - 0.46 * phase.cos())
        })
        .collect()
}

pub struct FrameKernel<T: Scalar> {
    win_len: usize,
    hop: usize,
    n_fft: usize,
    center: bool,
    window: Vec<T>,
    r2c: Arc<dyn RealToComplex<T>>,
    c2r: Arc<dyn ComplexToReal<T>>,
}

impl<T: Scalar> std::fmt::Debug for FrameKernel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrameKernel")
            .field("win_len", &self.win_len)
            .field("hop", &self.hop)
            .field("n_fft", &self.n_fft)
            .field("center", &self.center)
            .finish()
    }
}

impl<T: Scalar> FrameKernel<T> {
    pub fn new(win_len: usize, hop: usize, n_fft: usize, center: bool) -> Result<Self> {
        if win_len == 0 || hop == 0 {
            return Err(Error::invalid("window and hop must be positive"));
        }
        if hop > win_len {
            return Err(Error::invalid(format!("hop {hop} exceeds window {win_len}")));
        }
        if n_fft < win_len || !n_fft.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "fft size {n_fft} must be even and at least the window length {win_len}"
            )));
        }
        let mut planner = RealFftPlanner::<T>::new();
        Ok(Self {
            win_len,
            hop,
            n_fft,
            center,
            window: hamming(win_len),
            r2c: planner.plan_fft_forward(n_fft),
            c2r: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    fn pad(&self) -> usize {
        if self.center {
            self.win_len / 2
        } else {
            0
        }
    }

    pub fn frame_count(&self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(Error::invalid("empty waveform"));
        }
        let pad = self.pad();
        if self.center && n <= pad {
            return Err(Error::invalid(format!(
                "signal of {n} samples too short for reflect padding of {pad}"
            )));
        }
        let padded = n + 2 * pad;
        if padded < self.win_len {
            return Err(Error::invalid(format!(
                "window of {} samples longer than padded signal of {padded}",
                self.win_len
            )));
        }
        Ok((padded - self.win_len) / self.hop + 1)
    }

    /// Source index in the unpadded signal for padded position `i`.
    fn source(&self, i: usize, n: usize) -> Option<usize> {
        let pad = self.pad();
        if i < pad {
            Some(pad - i)
        } else if i < pad + n {
            Some(i - pad)
        } else if i < n + 2 * pad {
            Some(2 * n + pad - 2 - i)
        } else {
            None
        }
    }

    /// Windowed one-sided spectra, frame-major (`frames × bins`).
    pub fn analyze(&self, x: &[T]) -> Result<(usize, Vec<Complex<T>>)> {
        let frames = self.frame_count(x.len())?;
        let bins = self.bins();
        let mut out = vec![Complex::new(T::zero(), T::zero()); frames * bins];
        let mut buf = self.r2c.make_input_vec();
        let mut scratch = self.r2c.make_scratch_vec();
        for t in 0..frames {
            buf.iter_mut().for_each(|v| *v = T::zero());
            for j in 0..self.win_len {
                if let Some(s) = self.source(t * self.hop + j, x.len()) {
                    buf[j] = self.window[j] * x[s];
                }
            }
            self.r2c
                .process_with_scratch(&mut buf, &mut out[t * bins..(t + 1) * bins], &mut scratch)
                .map_err(|e| Error::invalid(format!("fft: {e}")))?;
        }
        Ok((frames, out))
    }

    /// Adjoint of [`analyze`](Self::analyze): maps gradients on the real and
    /// imaginary parts (packed as complex numbers) back to the signal.
    pub fn analyze_adjoint(&self, grad: &[Complex<T>], n: usize) -> Vec<T> {
        let bins = self.bins();
        let frames = grad.len() / bins;
        let half = T::of(0.5);
        let mut gx = vec![T::zero(); n];
        let mut spec = self.c2r.make_input_vec();
        let mut buf = self.c2r.make_output_vec();
        let mut scratch = self.c2r.make_scratch_vec();
        for t in 0..frames {
            let g = &grad[t * bins..(t + 1) * bins];
            for k in 0..bins {
                spec[k] = if k == 0 || k == bins - 1 {
                    Complex::new(g[k].re, T::zero())
                } else {
                    g[k] * half
                };
            }
            // Imaginary parts of DC and Nyquist are zeroed above.
            let _ = self.c2r.process_with_scratch(&mut spec, &mut buf, &mut scratch);
            for j in 0..self.win_len {
                if let Some(s) = self.source(t * self.hop + j, n) {
                    gx[s] = gx[s] + self.window[j] * buf[j];
                }
            }
        }
        gx
    }

    fn ola_norm(&self, frames: usize) -> Vec<T> {
        let len = (frames - 1) * self.hop + self.win_len;
        let mut norm = vec![T::zero(); len];
        for t in 0..frames {
            for j in 0..self.win_len {
                norm[t * self.hop + j] = norm[t * self.hop + j] + self.window[j] * self.window[j];
            }
        }
        let floor = T::of(OLA_FLOOR);
        norm.iter_mut().for_each(|v| *v = v.max(floor));
        norm
    }

    /// Least-squares overlap-add inverse producing `len` samples.
    pub fn synthesize(&self, spec: &[Complex<T>], len: usize) -> Vec<T> {
        let bins = self.bins();
        let frames = spec.len() / bins;
        if frames == 0 {
            return vec![T::zero(); len];
        }
        let norm = self.ola_norm(frames);
        let mut ola = vec![T::zero(); norm.len()];
        let mut inbuf = self.c2r.make_input_vec();
        let mut buf = self.c2r.make_output_vec();
        let mut scratch = self.c2r.make_scratch_vec();
        let scale = T::one() / T::of(self.n_fft as f64);
        for t in 0..frames {
            inbuf.copy_from_slice(&spec[t * bins..(t + 1) * bins]);
            inbuf[0].im = T::zero();
            inbuf[bins - 1].im = T::zero();
            let _ = self.c2r.process_with_scratch(&mut inbuf, &mut buf, &mut scratch);
            for j in 0..self.win_len {
                let i = t * self.hop + j;
                ola[i] = ola[i] + self.window[j] * buf[j] * scale;
            }
        }
        let pad = self.pad();
        (0..len)
            .map(|i| {
                let p = i + pad;
                if p < ola.len() {
                    ola[p] / norm[p]
                } else {
                    T::zero()
                }
            })
            .collect()
    }

    /// Adjoint of [`synthesize`](Self::synthesize) with respect to the real and
    /// imaginary parts of the spectrum.
    pub fn synthesize_adjoint(&self, grad: &[T], frames: usize) -> Vec<Complex<T>> {
        let bins = self.bins();
        let mut out = vec![Complex::new(T::zero(), T::zero()); frames * bins];
        if frames == 0 {
            return out;
        }
        let norm = self.ola_norm(frames);
        let pad = self.pad();
        let mut g_ola = vec![T::zero(); norm.len()];
        for (i, &g) in grad.iter().enumerate() {
            let p = i + pad;
            if p < g_ola.len() {
                g_ola[p] = g / norm[p];
            }
        }
        let mut buf = self.r2c.make_input_vec();
        let mut scratch = self.r2c.make_scratch_vec();
        let inv_n = T::one() / T::of(self.n_fft as f64);
        let two = T::of(2.0);
        for t in 0..frames {
            buf.iter_mut().for_each(|v| *v = T::zero());
            for j in 0..self.win_len {
                buf[j] = self.window[j] * g_ola[t * self.hop + j];
            }
            let dst = &mut out[t * bins..(t + 1) * bins];
            let _ = self.r2c.process_with_scratch(&mut buf, dst, &mut scratch);
            for (k, v) in dst.iter_mut().enumerate() {
                if k == 0 || k == bins - 1 {
                    *v = Complex::new(v.re * inv_n, T::zero());
                } else {
                    *v = *v * (two * inv_n);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn cdot(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &center in &[true, false] {
            let k = FrameKernel::<f64>::new(32, 8, 64, center).unwrap();
            let n = 131;
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (frames, y) = k.analyze(&x).unwrap();
            let g: Vec<Complex<f64>> = (0..y.len())
                .map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let lhs = cdot(&y, &g);
            let rhs = dot(&x, &k.analyze_adjoint(&g, n));
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");

            let s: Vec<Complex<f64>> = (0..frames * k.bins())
                .map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let w = k.synthesize(&s, n);
            let gw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lhs = dot(&w, &gw);
            let adj = k.synthesize_adjoint(&gw, frames);
            // synthesis ignores the imaginary DC/Nyquist parts; the adjoint does too.
            let rhs = cdot(&s, &adj);
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn frame_count_errors() {
        let k = FrameKernel::<f64>::new(32, 8, 64, true).unwrap();
        assert!(k.frame_count(0).is_err());
        assert!(k.frame_count(16).is_err());
        assert_eq!(k.frame_count(17).unwrap(), 17 / 8 + 1);
        let k = FrameKernel::<f64>::new(32, 8, 64, false).unwrap();
        assert!(k.frame_count(31).is_err());
        assert_eq!(k.frame_count(32).unwrap(), 1);
    }
}
