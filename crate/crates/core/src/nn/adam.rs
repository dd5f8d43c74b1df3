use std::collections::BTreeMap;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Bias-corrected Adam moments and hyperparameters.
///
/// `lr` applies to every parameter unless a longer matching prefix in
/// `group_lr` overrides it.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub group_lr: Vec<(String, f64)>,
    pub step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            group_lr: Vec::new(),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_group(mut self, prefix: impl Into<String>, lr: f64) -> Self {
        self.group_lr.push((prefix.into(), lr));
        self
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        self.group_lr
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(self.lr, |(_, lr)| *lr)
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }
}

/// One Adam update of every parameter that has a gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Training(format!("gradient for unknown parameter '{name}'")))?;
        if p.shape() != g.shape() {
            return Err(Error::Training(format!(
                "gradient shape {:?} != parameter shape {:?} for '{name}'",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Training(format!("non-finite gradient for parameter '{name}'")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let lr = state.lr_for(name);
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = tb1 * *mv + ob1 * gv;
            *vv = tb2 * *vv + ob2 * gv * gv;
            let mhat = mv.as_f64() / c1;
            let vhat = vv.as_f64() / c2;
            *pv = T::of(pv.as_f64() - lr * mhat / (vhat.sqrt() + state.eps));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    fn grads(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(1.5);
        let mut st = AdamState::new(0.1);
        adam_step(&mut p, &grads(0.0), &mut st).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02, 250.0] {
            let mut p = store(0.0);
            let mut st = AdamState::new(0.01);
            adam_step(&mut p, &grads(g), &mut st).unwrap();
            let d = p.get("w").unwrap().data()[0];
            assert!((d + 0.01 * f64::signum(g)).abs() < 1e-8, "{d}");
        }
    }

    #[test]
    fn two_steps_on_quadratic_match_hand_stepping() {
        // f(w) = (w - 3)^2, w0 = 0, lr = 0.1
        let mut p = store(0.0);
        let mut st = AdamState::new(0.1);
        for _ in 0..2 {
            let w = p.get("w").unwrap().data()[0];
            adam_step(&mut p, &grads(2.0 * (w - 3.0)), &mut st).unwrap();
        }
        // hand stepping
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let g1 = -6.0;
        let (m1, v1) = ((1.0 - b1) * g1, (1.0 - b2) * g1 * g1);
        let w1 = 0.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let g2 = 2.0 * (w1 - 3.0);
        let (m2, v2) = (b1 * m1 + (1.0 - b1) * g2, b2 * v1 + (1.0 - b2) * g2 * g2);
        let w2 = w1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p.get("w").unwrap().data()[0] - w2).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(0.0);
        let mut st = AdamState::new(0.1);
        let err = adam_step(&mut p, &grads(f64::NAN), &mut st).unwrap_err();
        assert!(err.to_string().contains("'w'"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn group_learning_rates() {
        let st = AdamState::<f32>::new(1e-3).with_group("enh.", 2e-4).with_group("enh.map.", 5e-4);
        assert_eq!(st.lr_for("cls.w"), 1e-3);
        assert_eq!(st.lr_for("enh.conv"), 2e-4);
        assert_eq!(st.lr_for("enh.map.x"), 5e-4);
    }
}
