//! Signal processing checked against direct, loop-based reference code.

mod common;

use common::{oracle_dft, oracle_frame, oracle_mfcc_frame, random_wave};
use pbdrnet::dsp::{
    consistency_project, istft, mfcc, mix_at_snr, read_wav, stft, write_wav, ComplexSpectrogram, MfccConfig,
    StftConfig, Waveform, SAMPLE_RATE,
};
use pbdrnet::losses::snr_of_noise;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realfft::num_complex::Complex64;

#[test]
fn stft_matches_direct_dft() {
    let cfg = StftConfig::default();
    let w = random_wave(1, 3000, 1.0);
    let x = stft(&w, &cfg).unwrap();
    for t in [0, 1, x.frames() / 2, x.frames() - 1] {
        let want = oracle_dft(&oracle_frame(w.samples(), t, 320, 160, 512));
        for (k, v) in want.iter().enumerate() {
            assert!((x.get(t, k) - v).norm() < 1e-9, "frame {t} bin {k}");
        }
    }
}

#[test]
fn mfcc_matches_step_by_step_oracle() {
    let cfg = MfccConfig::default();
    let w = random_wave(2, 4000, 1.0);
    let m = mfcc(&w, &cfg).unwrap();
    for t in [0, 3, m.frames() - 1] {
        let want = oracle_mfcc_frame(w.samples(), t, &cfg);
        for (a, b) in m.frame(t).iter().zip(&want) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "frame {t}: {a} vs {b}");
        }
    }
}

#[test]
fn consistency_projection_fixes_stft_images() {
    let cfg = StftConfig::default();
    let x = stft(&random_wave(3, 4000, 1.0), &cfg).unwrap();
    assert!(consistency_project(&x).unwrap().max_abs_diff(&x) < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = (0..x.values().len()).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let y = ComplexSpectrogram::new(v, x.frames(), cfg, x.signal_len()).unwrap();
    let p = consistency_project(&y).unwrap();
    assert!(p.max_abs_diff(&y) > 1e-2);
    assert!(consistency_project(&p).unwrap().max_abs_diff(&p) < 1e-9);
}

#[test]
fn wav_roundtrip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let w = Waveform::new(random_wave(5, 1000, 1.0).samples().iter().map(|v| 0.9 * v).collect(), SAMPLE_RATE).unwrap();
    let p = dir.path().join("x.wav");
    write_wav(&p, &w).unwrap();
    let r = read_wav(&p).unwrap();
    assert_eq!(r.len(), w.len());
    assert!(r.samples().iter().zip(w.samples()).all(|(a, b)| (a - b).abs() <= 1.0 / 32768.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn istft_inverts_stft(seed in any::<u64>(), n in 400usize..6000) {
        let cfg = StftConfig::default();
        let w = random_wave(seed, n, 1.0);
        let back = istft(&stft(&w, &cfg).unwrap(), &cfg).unwrap();
        prop_assert_eq!(back.len(), n);
        let err = back.samples().iter().zip(w.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-9, "max error {}", err);
    }

    #[test]
    fn stft_is_linear(seed in any::<u64>(), a in -3.0f64..3.0) {
        let cfg = StftConfig::default();
        let (x, y) = (random_wave(seed, 1200, 1.0), random_wave(seed ^ 1, 1200, 1.0));
        let sum = Waveform::new(x.samples().iter().zip(y.samples()).map(|(p, q)| a * p + q).collect(), SAMPLE_RATE).unwrap();
        let (sx, sy, ss) = (stft(&x, &cfg).unwrap(), stft(&y, &cfg).unwrap(), stft(&sum, &cfg).unwrap());
        for ((u, v), s) in sx.values().iter().zip(sy.values()).zip(ss.values()) {
            prop_assert!((u * a + v - s).norm() < 1e-9);
        }
    }

    #[test]
    fn mix_hits_requested_snr(seed in any::<u64>(), snr in -5.0f64..=25.0, n_noise in 500usize..4000) {
        let clean = random_wave(seed, 2000, 1.0);
        let noise = random_wave(seed ^ 7, n_noise, 1.0);
        let m = mix_at_snr(&clean, &noise, snr, seed).unwrap();
        let got = snr_of_noise(&clean, &m.noise).unwrap();
        prop_assert!((got - snr).abs() < 1e-9, "{} vs {}", got, snr);
        for ((c, v), y) in clean.samples().iter().zip(m.noise.samples()).zip(m.noisy.samples()) {
            prop_assert_eq!(c + v, *y);
        }
    }
}
