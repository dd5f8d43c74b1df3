//! Frame-wise modulation: identity start and the per-frame reference path.

use pbdrnet::classifier::ProbMatrix;
use pbdrnet::nn::{ParamStore, Tensor};
use pbdrnet::pbdr::{condition_stream, init_mapper, modulate, modulation_params, FeatureMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn perturbed_mapper(l: usize, h: usize, f: usize, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    init_mapper(l, h, f, &mut p, &mut rng);
    let names: Vec<String> = p.names().cloned().collect();
    for n in names {
        for v in p.get_mut(&n).unwrap().data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    p
}

fn random_probs(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> ProbMatrix {
    let mut v = Vec::new();
    for _ in 0..frames {
        let row: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        v.extend(row.iter().map(|x| x / s));
    }
    ProbMatrix::new(v, classes).unwrap()
}

#[test]
fn fresh_mapper_gives_unit_scale_and_zero_shift() {
    let mut p = ParamStore::<f64>::new();
    init_mapper(72, 128, 129, &mut p, &mut ChaCha8Rng::seed_from_u64(0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probs = random_probs(&mut rng, 1, 72);
    let m = modulation_params(probs.row(0), &p).unwrap();
    assert!(m.gamma.iter().all(|&g| g == 1.0));
    assert!(m.beta.iter().all(|&b| b == 0.0));
}

#[test]
fn stream_matches_frame_by_frame_modulation() {
    let (t, l, f, c) = (5, 4, 6, 3);
    let p = perturbed_mapper(l, 8, f, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let feats = rand_tensor(&mut rng, &[t, f, c]);
    let probs = random_probs(&mut rng, t, l);
    let out = condition_stream(&feats, &probs, &p).unwrap();
    for k in 0..t {
        let frame = FeatureMap::new(f, c, feats.data()[k * f * c..(k + 1) * f * c].to_vec()).unwrap();
        let want = modulate(&frame, &modulation_params(probs.row(k), &p).unwrap()).unwrap();
        for (a, b) in out.data()[k * f * c..(k + 1) * f * c].iter().zip(want.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn frame_count_mismatch_is_an_alignment_error() {
    let p = perturbed_mapper(4, 8, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let feats = rand_tensor(&mut rng, &[5, 6, 2]);
    let probs = random_probs(&mut rng, 4, 4);
    assert!(matches!(condition_stream(&feats, &probs, &p), Err(pbdrnet::Error::Alignment { .. })));
}

proptest! {
    #[test]
    fn modulate_is_affine_per_frequency(
        vals in proptest::collection::vec(-5.0f64..5.0, 12),
        gamma in proptest::collection::vec(-2.0f64..2.0, 4),
        beta in proptest::collection::vec(-2.0f64..2.0, 4),
    ) {
        let fm = FeatureMap::new(4, 3, vals.clone()).unwrap();
        let m = pbdrnet::pbdr::ModulationPair { gamma: gamma.clone(), beta: beta.clone() };
        let out = modulate(&fm, &m).unwrap();
        for f in 0..4 {
            for c in 0..3 {
                prop_assert_eq!(out.get(f, c), vals[f * 3 + c] * gamma[f] + beta[f]);
            }
        }
    }
}
