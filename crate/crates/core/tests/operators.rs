//! Forward examples and finite-difference checks for every tape operator.

mod common;

use common::rand_tensor;
use pbdrnet::nn::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn identity_graph_and_zero_weight_dense() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
    let y = tape.reshape(x, &[2, 3]).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let w = tape.input(Tensor::zeros([3, 2]));
    let b = tape.input(Tensor::from_f64([2], &[0.25, -4.0]).unwrap());
    let d = tape.dense(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(d).data(), &[0.25, -4.0, 0.25, -4.0]);
}

#[test]
fn dense_sigmoid_matches_hand_computation() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::from_f64([1, 2], &[0.5, -1.0]).unwrap());
    let w = tape.input(Tensor::from_f64([2, 2], &[0.1, 0.2, -0.3, 0.4]).unwrap());
    let b = tape.input(Tensor::from_f64([2], &[0.05, -0.05]).unwrap());
    let d = tape.dense(x, w, Some(b)).unwrap();
    let s = tape.sigmoid(d);
    // z0 = 0.05 + 0.5*0.1 + (-1)(-0.3) = 0.4 ; z1 = -0.05 + 0.5*0.2 + (-1)(0.4) = -0.35
    let expect = [1.0 / (1.0 + (-0.4f64).exp()), 1.0 / (1.0 + 0.35f64.exp())];
    for (a, e) in tape.value(s).data().iter().zip(expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64([2, 2], &[1., -2., 3., 0.5]).unwrap());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    // sum(x * gamma) with gamma broadcast over channels: grad of gamma is the channel sum.
    let mut tape = Tape::<f64>::new();
    let f = tape.input(Tensor::from_f64([1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
    let gamma = tape.leaf(Tensor::from_f64([1, 2], &[0.3, 0.7]).unwrap());
    let beta = tape.input(Tensor::zeros([1, 2]));
    let y = tape.modulate(f, gamma, beta).unwrap();
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(gamma).unwrap().data(), &[6.0, 15.0]);
}

#[test]
fn backward_errors() {
    let tape = Tape::<f64>::new();
    let mut other = Tape::<f64>::new();
    let v = other.input(Tensor::zeros([2]));
    assert!(matches!(tape.backward(v), Err(pbdrnet::Error::State(_))));
    assert!(matches!(other.backward(v), Err(pbdrnet::Error::InvalidInput(_))));
}

#[test]
fn shape_mismatch_names_operator() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::zeros([4, 5, 3]));
    let w = tape.input(Tensor::zeros([3, 3, 2, 4]));
    let b = tape.input(Tensor::zeros([4]));
    let err = tape.conv2d(x, w, b).unwrap_err().to_string();
    assert!(err.contains("conv2d"), "{err}");
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f32>::new();
        let x = tape.input(rand_tensor(&mut rng, &[6, 9, 2]).cast());
        let w = tape.input(rand_tensor(&mut rng, &[3, 5, 2, 4]).cast());
        let b = tape.input(rand_tensor(&mut rng, &[4]).cast());
        let y = tape.conv2d(x, w, b).unwrap();
        tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn every_operator_passes_grad_check() {
    let checks = common::operator_checks();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}: {:.3e} at {:?}", c.name, c.report.max_rel_error, c.report.worst))
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(checks.len() > 80);
}

#[test]
fn softmax_rows_and_pool_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut tape = Tape::<f64>::new();
    let x = tape.input(rand_tensor(&mut rng, &[7, 11]).cast());
    let x = tape.affine(x, 30.0, 0.0);
    let y = tape.softmax(x);
    for row in tape.value(y).data().chunks(11) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&v| v > 0.0));
    }
    let f = tape.input(rand_tensor(&mut rng, &[3, 7, 2]));
    let p = tape.max_pool_freq(f).unwrap();
    let (fv, pv) = (tape.value(f).data().to_vec(), tape.value(p).data().to_vec());
    for t in 0..3 {
        for j in 0..4 {
            for c in 0..2 {
                let a = fv[(t * 7 + 2 * j) * 2 + c];
                let b = if 2 * j + 1 < 7 { fv[(t * 7 + 2 * j + 1) * 2 + c] } else { f64::MIN };
                assert_eq!(pv[(t * 4 + j) * 2 + c], a.max(b));
            }
        }
    }
    let c = tape.concat(&[f, x]).err();
    assert!(c.is_some());
    let cat = tape.concat(&[f, f]).unwrap();
    let back = tape.slice_last(cat, 2, 2).unwrap();
    assert_eq!(tape.value(back), tape.value(f));
}
