//! Objective and metric values against closed forms and naive loops.

mod common;

use common::{random_wave, ssnr_loop};
use pbdrnet::classifier::{phoneme_loss, PhonemeFrameLabels, ProbMatrix, Reduction};
use pbdrnet::dsp::{stft, ComplexSpectrogram, StftConfig, Waveform, SAMPLE_RATE};
use pbdrnet::losses::{combined_loss, snr_db, spectral_l1, ssnr, LossConfig, SsnrConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_probs(seed: u64, frames: usize, classes: usize) -> ProbMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::with_capacity(frames * classes);
    for _ in 0..frames {
        let row: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        v.extend(row.iter().map(|x| x / s));
    }
    ProbMatrix::new(v, classes).unwrap()
}

fn random_labels(seed: u64, frames: usize, classes: usize) -> PhonemeFrameLabels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PhonemeFrameLabels::new("u", (0..frames).map(|_| rng.gen_range(0..classes)).collect(), classes).unwrap()
}

#[test]
fn uniform_posteriors_give_frames_times_ln_classes() {
    let (t, l) = (10, 72);
    let p = ProbMatrix::new(vec![1.0 / l as f64; t * l], l).unwrap();
    let y = random_labels(1, t, l);
    let sum = phoneme_loss(std::slice::from_ref(&p), std::slice::from_ref(&y), Reduction::Sum).unwrap();
    assert!((sum - 10.0 * 72f64.ln()).abs() < 1e-9);
    let mean = phoneme_loss(&[p], &[y], Reduction::MeanPerFrame).unwrap();
    assert!((sum - t as f64 * mean).abs() < 1e-9);
}

#[test]
fn batch_mean_divides_by_all_frames() {
    let probs = [random_probs(1, 7, 5), random_probs(2, 12, 5)];
    let labels = [random_labels(3, 7, 5), random_labels(4, 12, 5)];
    let sum = phoneme_loss(&probs, &labels, Reduction::Sum).unwrap();
    let mean = phoneme_loss(&probs, &labels, Reduction::MeanPerFrame).unwrap();
    assert!((sum - 19.0 * mean).abs() < 1e-9);
    let naive: f64 = probs
        .iter()
        .zip(&labels)
        .flat_map(|(p, y)| y.labels().iter().enumerate().map(move |(t, &c)| -p.row(t)[c].ln()))
        .sum();
    assert!((sum - naive).abs() < 1e-9);
}

#[test]
fn ssnr_clamps_at_both_ends() {
    let r = random_wave(1, 1600, 0.3);
    assert_eq!(ssnr(&r, &r, &SsnrConfig::default()).unwrap(), 35.0);
    let bad = Waveform::new(r.samples().iter().map(|v| -20.0 * v).collect(), SAMPLE_RATE).unwrap();
    assert_eq!(ssnr(&r, &bad, &SsnrConfig::default()).unwrap(), -10.0);
}

#[test]
fn spectral_l1_without_projection_is_plain_sum() {
    let cfg = StftConfig::default();
    let a = stft(&random_wave(1, 1000, 1.0), &cfg).unwrap();
    let b = stft(&random_wave(2, 1000, 1.0), &cfg).unwrap();
    let lc = LossConfig { consistency: false, ..Default::default() };
    let naive: f64 = (0..a.frames())
        .flat_map(|t| (0..a.bins()).map(move |k| (t, k)))
        .map(|(t, k)| {
            let d = a.get(t, k) - b.get(t, k);
            d.re.abs() + d.im.abs()
        })
        .sum();
    assert!((spectral_l1(&a, &b, &lc).unwrap() - naive).abs() < 1e-9 * naive);
    // consistent inputs are unchanged by the projection
    assert!((spectral_l1(&a, &b, &LossConfig::default()).unwrap() - naive).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssnr_matches_loop(seed in any::<u64>(), n in 200usize..3000, noise in 0.0f64..2.0) {
        let r = random_wave(seed, n, 0.5);
        let d = random_wave(seed ^ 9, n, noise);
        let e = Waveform::new(r.samples().iter().zip(d.samples()).map(|(a, b)| a + b).collect(), SAMPLE_RATE).unwrap();
        let got = ssnr(&r, &e, &SsnrConfig::default()).unwrap();
        prop_assert!((got - ssnr_loop(r.samples(), e.samples())).abs() < 1e-9);
        prop_assert!((-10.0..=35.0).contains(&got));
    }

    #[test]
    fn combined_loss_is_additive(seed in any::<u64>(), lambda in 0.0f64..3.0) {
        let cfg = StftConfig::default();
        let s = stft(&random_wave(seed, 1600, 0.3), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let v = s.values().iter().map(|x| x * rng.gen_range(0.0..1.5)).collect();
        let s_hat = ComplexSpectrogram::new(v, s.frames(), cfg, s.signal_len()).unwrap();
        let p = random_probs(seed ^ 4, s.frames(), 8);
        let y = random_labels(seed ^ 5, s.frames(), 8);
        for consistency in [true, false] {
            let lc = LossConfig { lambda, consistency };
            let spec = spectral_l1(&s_hat, &s, &lc).unwrap();
            let ph = phoneme_loss(std::slice::from_ref(&p), std::slice::from_ref(&y), Reduction::Sum).unwrap();
            let c = combined_loss(&s_hat, &s, &p, &y, &lc).unwrap();
            prop_assert!((c - (spec + lambda * ph)).abs() <= 1e-9 * c.abs().max(1.0));
            let zero = combined_loss(&s_hat, &s, &p, &y, &LossConfig { lambda: 0.0, consistency }).unwrap();
            prop_assert_eq!(zero, spec);
        }
    }

    #[test]
    fn snr_scales_with_error_power(seed in any::<u64>(), k in 0.01f64..10.0) {
        let r = random_wave(seed, 800, 1.0);
        let d = random_wave(seed ^ 2, 800, 0.1);
        let est = |a: f64| Waveform::new(r.samples().iter().zip(d.samples()).map(|(x, y)| x + a * y).collect(), SAMPLE_RATE).unwrap();
        let diff = snr_db(&r, &est(1.0)).unwrap() - snr_db(&r, &est(k)).unwrap();
        prop_assert!((diff - 20.0 * k.log10()).abs() < 1e-9);
    }
}
