//! Phoneme-based distribution regularization: per-frame posteriors are mapped
//! to a scale/bias pair over frequency that modulates one encoder feature map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ProbMatrix;
use crate::dsp::StftConfig;
use crate::nn::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

pub const PREFIX: &str = "pbdr.";

/// Encoder layer (1-based) whose activated, pre-pooling output is modulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct PlacementConfig {
    layer_index: u8,
}

impl PlacementConfig {
    pub fn new(layer_index: u8) -> Result<Self> {
        match layer_index {
            1 | 2 => Ok(Self { layer_index }),
            other => Err(Error::config(format!("placement must be 1 or 2, got {other}"))),
        }
    }

    pub fn layer_index(&self) -> u8 {
        self.layer_index
    }

    /// Frequency size at the placement: the spectrum's bin count halved
    /// (ceil) once per preceding pooling stage.
    pub fn freq_size(&self, stft: &StftConfig) -> usize {
        let mut f = stft.bins();
        for _ in 1..self.layer_index {
            f = f.div_ceil(2);
        }
        f
    }
}

impl TryFrom<u8> for PlacementConfig {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PlacementConfig> for u8 {
    fn from(p: PlacementConfig) -> u8 {
        p.layer_index
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulationPair {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// One frame's `[freq, channels]` feature map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    freq: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(freq: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != freq * channels {
            return Err(Error::invalid(format!("{} values for a {freq}x{channels} map", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map has non-finite values"));
        }
        Ok(Self { freq, channels, values })
    }

    pub fn freq(&self) -> usize {
        self.freq
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, f: usize, c: usize) -> f64 {
        self.values[f * self.channels + c]
    }
}

/// Adds the two mapper networks `L → hidden → F_N`. Output layers start at
/// zero weights with bias 1 (scale) and 0 (shift), i.e. identity modulation.
pub fn init_mapper<T: Scalar>(
    n_classes: usize,
    hidden: usize,
    freq: usize,
    params: &mut ParamStore<T>,
    rng: &mut impl Rng,
) {
    for (net, out_bias) in [("gamma", 1.0), ("beta", 0.0)] {
        let pre = format!("{PREFIX}{net}.");
        params.init_uniform(&format!("{pre}hidden.w"), &[n_classes, hidden], n_classes, rng);
        params.init_const(&format!("{pre}hidden.b"), &[hidden], 0.0);
        params.init_const(&format!("{pre}out.w"), &[hidden, freq], 0.0);
        params.init_const(&format!("{pre}out.b"), &[freq], out_bias);
    }
}

/// Mapper output width stored in `params`.
pub fn mapper_freq<T: Scalar>(params: &ParamStore<T>) -> Result<usize> {
    Ok(params.require(&format!("{PREFIX}gamma.out.b"))?.len())
}

fn mlp<T: Scalar>(tape: &mut Tape<T>, params: &ParamStore<T>, p: Var, net: &str) -> Result<Var> {
    let pre = format!("{PREFIX}{net}.");
    let w1 = tape.param(params, &format!("{pre}hidden.w"))?;
    let b1 = tape.param(params, &format!("{pre}hidden.b"))?;
    let w2 = tape.param(params, &format!("{pre}out.w"))?;
    let b2 = tape.param(params, &format!("{pre}out.b"))?;
    let h = tape.dense(p, w1, Some(b1))?;
    let h = tape.relu(h);
    tape.dense(h, w2, Some(b2))
}

/// Records both mappers for posteriors `[T, L]`, giving `(gamma, beta)` as `[T, F_N]`.
pub fn mapper_forward<T: Scalar>(tape: &mut Tape<T>, params: &ParamStore<T>, probs: Var) -> Result<(Var, Var)> {
    let want = params.require(&format!("{PREFIX}gamma.hidden.w"))?.shape()[0];
    let ps = tape.shape(probs);
    if ps.len() != 2 || ps[1] != want {
        return Err(Error::invalid(format!("mapper expects [T, {want}] posteriors, got {ps:?}")));
    }
    Ok((mlp(tape, params, probs, "gamma")?, mlp(tape, params, probs, "beta")?))
}

/// Scale/bias pair for one posterior vector.
pub fn modulation_params<T: Scalar>(p: &[f64], params: &ParamStore<T>) -> Result<ModulationPair> {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_f64([1, p.len()], p)?);
    let (g, b) = mapper_forward(&mut tape, params, x)?;
    let to_vec = |v: Var| tape.value(v).data().iter().map(|x| x.as_f64()).collect();
    Ok(ModulationPair { gamma: to_vec(g), beta: to_vec(b) })
}

/// `out[f, c] = F[f, c]·γ[f] + β[f]`.
pub fn modulate(features: &FeatureMap, m: &ModulationPair) -> Result<FeatureMap> {
    if m.gamma.len() != features.freq || m.beta.len() != features.freq {
        return Err(Error::invalid(format!(
            "modulation of length {}/{} for a feature map with {} frequencies",
            m.gamma.len(),
            m.beta.len(),
            features.freq
        )));
    }
    let c = features.channels;
    let values = features
        .values
        .chunks_exact(c.max(1))
        .enumerate()
        .flat_map(|(f, row)| row.iter().map(move |&v| v * m.gamma[f] + m.beta[f]))
        .collect();
    FeatureMap::new(features.freq, c, values)
}

/// Modulates a `[T, F_N, C]` stack frame by frame from posteriors `[T, L]`.
pub fn condition_stream<T: Scalar>(
    features: &Tensor<T>,
    probs: &ProbMatrix,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let fs = features.shape();
    if fs.len() != 3 {
        return Err(Error::invalid(format!("feature stack must be [T, F, C], got {fs:?}")));
    }
    if fs[0] != probs.frames() {
        return Err(Error::Alignment {
            context: "condition_stream".into(),
            left_name: "features",
            left: fs[0],
            right_name: "posteriors",
            right: probs.frames(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.input(features.clone());
    let p = tape.input(probs.to_tensor());
    let (g, b) = mapper_forward(&mut tape, params, p)?;
    let y = tape.modulate(x, g, b)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn placement_freq_sizes() {
        let cfg = StftConfig::default();
        assert_eq!(PlacementConfig::new(1).unwrap().freq_size(&cfg), 257);
        assert_eq!(PlacementConfig::new(2).unwrap().freq_size(&cfg), 129);
        assert!(PlacementConfig::new(3).is_err());
    }

    #[test]
    fn fresh_mapper_is_identity() {
        let mut p = ParamStore::<f64>::new();
        init_mapper(72, 128, 129, &mut p, &mut ChaCha8Rng::seed_from_u64(3));
        let mut probs = vec![0.0; 72];
        probs[5] = 0.7;
        probs[60] = 0.3;
        let m = modulation_params(&probs, &p).unwrap();
        assert_eq!(m.gamma.len(), 129);
        assert!(m.gamma.iter().all(|&g| (g - 1.0).abs() < 1e-6));
        assert!(m.beta.iter().all(|&b| b.abs() < 1e-6));
        assert!(modulation_params(&[0.5, 0.5], &p).is_err());
    }

    #[test]
    fn modulate_length_mismatch() {
        let f = FeatureMap::new(2, 1, vec![1.0, 2.0]).unwrap();
        let m = ModulationPair { gamma: vec![1.0; 3], beta: vec![0.0; 3] };
        assert!(modulate(&f, &m).is_err());
    }
}
