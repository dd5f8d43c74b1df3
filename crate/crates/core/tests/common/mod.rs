//! Oracles and gradient-check batteries shared by several test targets.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::Arc;

use pbdrnet::dsp::frames::FrameKernel;
use pbdrnet::dsp::{MfccConfig, Waveform, SAMPLE_RATE};
use pbdrnet::nn::{grad_check, GradCheckReport, ParamStore, Tape, Tensor, Var};
use pbdrnet::pbdr::init_mapper;
use pbdrnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realfft::num_complex::Complex64;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn random_wave(seed: u64, n: usize, amp: f64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..n).map(|_| amp * rng.gen_range(-1.0..1.0)).collect(), SAMPLE_RATE).unwrap()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reflect-padded, periodic-Hamming-windowed frame `t`, zero-filled to `n_fft`.
pub fn oracle_frame(x: &[f64], t: usize, win: usize, hop: usize, n_fft: usize) -> Vec<f64> {
    let pad = win / 2;
    let n = x.len() as isize;
    let mut out = vec![0.0; n_fft];
    for (j, o) in out.iter_mut().enumerate().take(win) {
        let mut i = (t * hop + j) as isize - pad as isize;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        let w = 0.54 - 0.46 * (2.0 * PI * j as f64 / win as f64).cos();
        *o = w * x[i as usize];
    }
    out
}

pub fn oracle_dft(frame: &[f64]) -> Vec<Complex64> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            frame.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (j, &v)| {
                let a = -2.0 * PI * (k * j % n) as f64 / n as f64;
                acc + Complex64::new(v * a.cos(), v * a.sin())
            })
        })
        .collect()
}

/// Log-mel cepstrum of one frame, one formula at a time.
pub fn oracle_mfcc_frame(x: &[f64], t: usize, cfg: &MfccConfig) -> Vec<f64> {
    let win = (cfg.window_ms * 16.0).round() as usize;
    let hop = (cfg.hop_ms * 16.0).round() as usize;
    let n_fft = win.next_power_of_two();
    let spec = oracle_dft(&oracle_frame(x, t, win, hop, n_fft));
    let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel(cfg.mel_fmin), mel(cfg.mel_fmax));
    let edge = |i: usize| hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64);
    let logmel: Vec<f64> = (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edge(m), edge(m + 1), edge(m + 2));
            let e: f64 = spec
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let f = k as f64 * 16000.0 / n_fft as f64;
                    let tri = if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    };
                    tri * (s.re * s.re + s.im * s.im)
                })
                .sum();
            e.max(1e-10).ln()
        })
        .collect();
    let m = cfg.n_mels as f64;
    (0..cfg.n_coeffs)
        .map(|k| {
            let norm = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            norm * logmel
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / m).cos())
                .sum::<f64>()
        })
        .collect()
}

/// Segment SNR written as a plain index loop (20 ms segments, clamps -10/35 dB).
pub fn ssnr_loop(r: &[f64], e: &[f64]) -> f64 {
    let seg = 320;
    let mut vals = Vec::new();
    let mut start = 0;
    while start < r.len() {
        let end = (start + seg).min(r.len());
        let mut pr = 0.0;
        let mut pd = 0.0;
        for i in start..end {
            pr += r[i] * r[i];
            pd += (r[i] - e[i]) * (r[i] - e[i]);
        }
        if pr / (end - start) as f64 >= 1e-8 {
            let db = if pd == 0.0 { 35.0 } else { 10.0 * (pr / pd).log10() };
            vals.push(db.clamp(-10.0, 35.0));
        }
        start = end;
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

pub struct Check {
    pub name: String,
    pub report: GradCheckReport,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < TOL
    }
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
pub fn reduce(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shape = tape.shape(y).to_vec();
    let w = tape.input(rand_tensor(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(out: &mut Vec<Check>, name: &str, params: ParamStore<f64>, build: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>) {
    let report = grad_check(&params, EPS, build).unwrap();
    out.push(Check { name: name.to_string(), report });
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (k, v) in entries {
        s.insert(k, v);
    }
    s
}

/// Finite-difference checks of every tape operator over several random draws.
pub fn operator_checks() -> Vec<Check> {
    let mut out = Vec::new();
    grad_elementwise(&mut out);
    grad_dense_and_nll(&mut out);
    grad_convolutions(&mut out);
    grad_pooling_and_broadcasts(&mut out);
    grad_gru_both_directions(&mut out);
    grad_spectral_operators(&mut out);
    grad_highway_composition(&mut out);
    grad_mapper_modulation(&mut out);
    out
}

fn grad_elementwise(out: &mut Vec<Check>) {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [1 + seed as usize, 3];
        let p = store(vec![("a", rand_tensor(&mut rng, &shape)), ("b", rand_tensor(&mut rng, &shape))]);
        check(out, "add/sub/mul/affine", p.clone(), |t, s| {
            let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
            let x = t.add(a, b)?;
            let y = t.mul(x, b)?;
            let z = t.sub(y, a)?;
            let z = t.affine(z, -1.5, 0.3);
            reduce(t, z, seed)
        });
        check(out, "sigmoid/tanh", p.clone(), |t, s| {
            let a = t.param(s, "a")?;
            let x = t.sigmoid(a);
            let y = t.tanh(x);
            reduce(t, y, seed)
        });
        check(out, "relu", p.clone(), |t, s| {
            let a = t.param(s, "a")?;
            let x = t.relu(a);
            reduce(t, x, seed)
        });
        check(out, "log_floor", p.clone(), |t, s| {
            let a = t.param(s, "a")?;
            let sq = t.mul(a, a)?;
            let x = t.affine(sq, 1.0, 0.1);
            let y = t.log_floor(x, 1e-10);
            reduce(t, y, seed)
        });
        check(out, "l1", p.clone(), |t, s| {
            let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
            t.l1(a, b)
        });
        check(out, "softmax", p.clone(), |t, s| {
            let a = t.param(s, "a")?;
            let y = t.softmax(a);
            reduce(t, y, seed)
        });
        check(out, "concat/slice", p, |t, s| {
            let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
            let c = t.concat(&[a, b, a])?;
            let d = t.slice_last(c, 2, 3)?;
            reduce(t, d, seed)
        });
    }
}

fn grad_dense_and_nll(out: &mut Vec<Check>) {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let (n, din, dout) = (2 + seed as usize, 3, 4);
        let p = store(vec![
            ("x", rand_tensor(&mut rng, &[n, din])),
            ("w", rand_tensor(&mut rng, &[din, dout])),
            ("b", rand_tensor(&mut rng, &[dout])),
        ]);
        check(out, "dense", p.clone(), |t, s| {
            let p_x = t.param(s, "x")?;
            let p_w = t.param(s, "w")?;
            let p_b = t.param(s, "b")?;
            let y = t.dense(p_x, p_w, Some(p_b))?;
            reduce(t, y, seed)
        });
        let labels: Vec<usize> = (0..n).map(|i| (i * 3 + seed as usize) % dout).collect();
        check(out, "nll", p, |t, s| {
            let p_x = t.param(s, "x")?;
            let p_w = t.param(s, "w")?;
            let p_b = t.param(s, "b")?;
            let y = t.dense(p_x, p_w, Some(p_b))?;
            let pr = t.softmax(y);
            t.nll(pr, &labels, 1e-12)
        });
    }
}

fn grad_convolutions(out: &mut Vec<Check>) {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
        let (t_len, f, ci, co) = (3 + seed as usize % 3, 5 + seed as usize, 2, 3);
        let p = store(vec![
            ("x", rand_tensor(&mut rng, &[t_len, f, ci])),
            ("w", rand_tensor(&mut rng, &[3, 5, ci, co])),
            ("b", rand_tensor(&mut rng, &[co])),
        ]);
        check(out, "conv2d", p, |t, s| {
            let p_x = t.param(s, "x")?;
            let p_w = t.param(s, "w")?;
            let p_b = t.param(s, "b")?;
            let y = t.conv2d(p_x, p_w, p_b)?;
            reduce(t, y, seed)
        });

        let p = store(vec![
            ("x", rand_tensor(&mut rng, &[t_len, f, ci])),
            ("w", rand_tensor(&mut rng, &[ci, 3, 5, co])),
            ("b", rand_tensor(&mut rng, &[co])),
        ]);
        check(out, "conv_transpose_freq", p, |t, s| {
            let p_x = t.param(s, "x")?;
            let p_w = t.param(s, "w")?;
            let p_b = t.param(s, "b")?;
            let y = t.conv_transpose_freq(p_x, p_w, p_b)?;
            assert_eq!(t.shape(y), &[t_len, 2 * f - 1, co]);
            reduce(t, y, seed)
        });

        let k = 1 + seed as usize; // includes even widths
        let p = store(vec![
            ("x", rand_tensor(&mut rng, &[t_len + 2, ci])),
            ("w", rand_tensor(&mut rng, &[k, ci, co])),
            ("b", rand_tensor(&mut rng, &[co])),
        ]);
        check(out, "conv1d", p, |t, s| {
            let p_x = t.param(s, "x")?;
            let p_w = t.param(s, "w")?;
            let p_b = t.param(s, "b")?;
            let y = t.conv1d(p_x, p_w, p_b)?;
            reduce(t, y, seed)
        });
    }
}

fn grad_pooling_and_broadcasts(out: &mut Vec<Check>) {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(30 + seed);
        let (t_len, f, c) = (2 + seed as usize, 4 + seed as usize, 3);
        let p = store(vec![
            ("x", rand_tensor(&mut rng, &[t_len, f, c])),
            ("g", rand_tensor(&mut rng, &[t_len, f])),
            ("b", rand_tensor(&mut rng, &[t_len, f])),
            ("q", rand_tensor(&mut rng, &[t_len, c])),
        ]);
        check(out, "max_pool_freq", p.clone(), |t, s| {
            let p_x = t.param(s, "x")?;
            let y = t.max_pool_freq(p_x)?;
            assert_eq!(t.shape(y)[1], f.div_ceil(2));
            reduce(t, y, seed)
        });
        check(out, "max_pool_time", p.clone(), |t, s| {
            let p_q = t.param(s, "q")?;
            let y = t.max_pool_time(p_q)?;
            reduce(t, y, seed)
        });
        check(out, "modulate", p.clone(), |t, s| {
            let p_x = t.param(s, "x")?;
            let p_g = t.param(s, "g")?;
            let p_b = t.param(s, "b")?;
            let y = t.modulate(p_x, p_g, p_b)?;
            reduce(t, y, seed)
        });
        check(out, "tile_freq", p.clone(), |t, s| {
            let p_q = t.param(s, "q")?;
            let y = t.tile_freq(p_q, 4)?;
            reduce(t, y, seed)
        });
        check(out, "mul_broadcast", p.clone(), |t, s| {
            let p_g = t.param(s, "g")?;
            let p_x = t.param(s, "x")?;
            let y = t.mul_broadcast(p_g, p_x)?;
            reduce(t, y, seed)
        });
        check(out, "unit_pair", p, |t, s| {
            let x = t.param(s, "x")?;
            let pair = t.slice_last(x, 0, 2)?;
            let y = t.unit_pair(pair, 1e-8)?;
            reduce(t, y, seed)
        });
    }
}

fn grad_gru_both_directions(out: &mut Vec<Check>) {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let (t_len, d, h) = (5, 3, 2 + seed as usize % 2);
        let p = store(vec![
            ("x", rand_tensor(&mut rng, &[t_len, d])),
            ("wi", rand_tensor(&mut rng, &[d, 3 * h])),
            ("wh", rand_tensor(&mut rng, &[h, 3 * h])),
            ("bi", rand_tensor(&mut rng, &[3 * h])),
            ("bh", rand_tensor(&mut rng, &[3 * h])),
        ]);
        for reverse in [false, true] {
            check(out, "gru", p.clone(), |t, s| {
                let x = t.param(s, "x")?;
                let wi = t.param(s, "wi")?;
                let wh = t.param(s, "wh")?;
                let bi = t.param(s, "bi")?;
                let bh = t.param(s, "bh")?;
                let y = t.gru(x, wi, wh, bi, bh, reverse)?;
                reduce(t, y, seed)
            });
        }
    }
}

fn grad_spectral_operators(out: &mut Vec<Check>) {
    let kernel = Arc::new(FrameKernel::<f64>::new(16, 4, 16, true).unwrap());
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let n = 30 + 3 * seed as usize;
        let frames = kernel.frame_count(n).unwrap();
        let p = store(vec![
            ("sig", rand_tensor(&mut rng, &[n])),
            ("spec", rand_tensor(&mut rng, &[frames, kernel.bins(), 2])),
        ]);
        check(out, "stft", p.clone(), |t, s| {
            let p_sig = t.param(s, "sig")?;
            let y = t.stft(p_sig, &kernel)?;
            reduce(t, y, seed)
        });
        check(out, "istft", p.clone(), |t, s| {
            let p_spec = t.param(s, "spec")?;
            let y = t.istft(p_spec, &kernel, n)?;
            reduce(t, y, seed)
        });
        check(out, "power_spectrum", p, |t, s| {
            let p_sig = t.param(s, "sig")?;
            let y = t.power_spectrum(p_sig, &kernel)?;
            reduce(t, y, seed)
        });
    }
}

fn grad_highway_composition(out: &mut Vec<Check>) {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(60 + seed);
        let (n, d) = (3, 4);
        let p = store(vec![
            ("x", rand_tensor(&mut rng, &[n, d])),
            ("wh", rand_tensor(&mut rng, &[d, d])),
            ("bh", rand_tensor(&mut rng, &[d])),
            ("wt", rand_tensor(&mut rng, &[d, d])),
            ("bt", rand_tensor(&mut rng, &[d])),
        ]);
        check(out, "highway", p, |t, s| {
            let x = t.param(s, "x")?;
            let y = pbdrnet::classifier::highway(t, s, x, "")?;
            reduce(t, y, seed)
        });
    }
}

fn grad_mapper_modulation(out: &mut Vec<Check>) {
    for seed in 0..3 {
        let (t, l, h, f, c) = (4, 5, 6, 7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(80 + seed);
        let mut params = ParamStore::new();
        init_mapper(l, h, f, &mut params, &mut rng);
        let names: Vec<String> = params.names().cloned().collect();
        for n in names {
            for v in params.get_mut(&n).unwrap().data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        params.insert("logits", rand_tensor(&mut rng, &[t, l]));
        params.insert("features", rand_tensor(&mut rng, &[t, f, c]));
        check(out, "mapper+modulate", params, |tape, s| {
            let z = tape.param(s, "logits")?;
            let p = tape.softmax(z);
            let (g, b) = pbdrnet::pbdr::mapper_forward(tape, s, p)?;
            let x = tape.param(s, "features")?;
            let y = tape.modulate(x, g, b)?;
            reduce(tape, y, seed)
        });
    }
}
