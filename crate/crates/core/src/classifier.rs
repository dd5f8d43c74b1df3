//! Frame-wise phoneme classifier: CBHG-style front end (conv bank, time
//! max-pool, projections, highway stack, bidirectional GRU) and a softmax head.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::MfccFrames;
use crate::nn::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Parameter-name prefix for everything owned by the classifier.
pub const PREFIX: &str = "classifier.";
/// Floor applied to posteriors before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

const NORM_MEAN: &str = "classifier.norm.mean";
const NORM_INV_STD: &str = "classifier.norm.inv_std";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Width of the MFCC input.
    pub n_coeffs: usize,
    /// Conv bank holds widths `1..=bank_size`.
    pub bank_size: usize,
    pub bank_channels: usize,
    pub proj_channels: usize,
    pub highway_layers: usize,
    pub highway_width: usize,
    /// Hidden size per GRU direction.
    pub gru_hidden: usize,
    pub n_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            n_coeffs: 13,
            bank_size: 8,
            bank_channels: 32,
            proj_channels: 64,
            highway_layers: 2,
            highway_width: 64,
            gru_hidden: 64,
            n_classes: 72,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_coeffs", self.n_coeffs),
            ("bank_size", self.bank_size),
            ("bank_channels", self.bank_channels),
            ("proj_channels", self.proj_channels),
            ("highway_width", self.highway_width),
            ("gru_hidden", self.gru_hidden),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::config(format!("classifier {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Ground-truth class index for every frame of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeFrameLabels {
    utterance_id: String,
    labels: Vec<usize>,
}

impl PhonemeFrameLabels {
    pub fn new(utterance_id: impl Into<String>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid(format!(
                "utterance {utterance_id}: label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self { utterance_id, labels })
    }

    pub fn utterance_id(&self) -> &str {
        &self.utterance_id
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reads an alignment file: one integer class index per line.
pub fn read_alignment(path: &Path, utterance_id: &str, n_classes: usize) -> Result<PhonemeFrameLabels> {
    let text = fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let y = line
            .parse::<usize>()
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        labels.push(y);
    }
    PhonemeFrameLabels::new(utterance_id, labels, n_classes)
}

pub fn write_alignment(path: &Path, labels: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 3);
    for y in labels {
        s.push_str(&y.to_string());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Row-stochastic `[frames, classes]` posterior matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    values: Vec<f64>,
    frames: usize,
    classes: usize,
}

impl ProbMatrix {
    pub fn new(values: Vec<f64>, classes: usize) -> Result<Self> {
        if classes == 0 || !values.len().is_multiple_of(classes) {
            return Err(Error::invalid(format!("{} values do not form rows of {classes}", values.len())));
        }
        for (t, row) in values.chunks_exact(classes).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid(format!("row {t} is not a probability vector (sum {s})")));
            }
        }
        Ok(Self { frames: values.len() / classes, values, classes })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::invalid(format!("posteriors must be [T, L], got {:?}", t.shape())));
        }
        Self::new(t.data().iter().map(|v| v.as_f64()).collect(), t.shape()[1])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.classes..(t + 1) * self.classes]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64([self.frames, self.classes], &self.values).expect("consistent shape")
    }
}

/// Per-coefficient standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccNormalizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl MfccNormalizer {
    pub fn identity(n: usize) -> Self {
        Self { mean: vec![0.0; n], inv_std: vec![1.0; n] }
    }

    /// Pools every frame of every utterance.
    pub fn fit(frames: &[MfccFrames]) -> Result<Self> {
        let n = frames.first().ok_or_else(|| Error::invalid("no MFCC frames to fit"))?.n_coeffs();
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        let mut count = 0usize;
        for m in frames {
            if m.n_coeffs() != n {
                return Err(Error::invalid("inconsistent MFCC widths"));
            }
            for row in m.values().chunks_exact(n) {
                for (i, &v) in row.iter().enumerate() {
                    sum[i] += v;
                    sq[i] += v * v;
                }
            }
            count += m.frames();
        }
        if count == 0 {
            return Err(Error::invalid("no MFCC frames to fit"));
        }
        let c = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
        let inv_std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| 1.0 / (q / c - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Ok(Self { mean, inv_std })
    }

    pub fn apply(&self, m: &MfccFrames) -> Vec<f64> {
        let n = self.mean.len();
        let mut out = m.values().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[i]) * self.inv_std[i];
            }
        }
        out
    }

    pub fn store<T: Scalar>(&self, params: &mut ParamStore<T>) {
        let n = self.mean.len();
        params.insert(NORM_MEAN, Tensor::from_f64([n], &self.mean).expect("shape"));
        params.insert(NORM_INV_STD, Tensor::from_f64([n], &self.inv_std).expect("shape"));
    }

    pub fn load<T: Scalar>(params: &ParamStore<T>) -> Result<Self> {
        let get = |name| -> Result<Vec<f64>> {
            Ok(params.require(name)?.data().iter().map(|v| v.as_f64()).collect())
        };
        Ok(Self { mean: get(NORM_MEAN)?, inv_std: get(NORM_INV_STD)? })
    }

    /// Names of the statistics entries, which are never trained.
    pub fn param_names() -> [&'static str; 2] {
        [NORM_MEAN, NORM_INV_STD]
    }
}

fn dense_init<T: Scalar>(p: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) {
    p.init_uniform(&format!("{name}.w"), &[din, dout], din, rng);
    p.init_const(&format!("{name}.b"), &[dout], 0.0);
}

fn conv1d_init<T: Scalar>(p: &mut ParamStore<T>, name: &str, k: usize, ci: usize, co: usize, rng: &mut impl Rng) {
    p.init_uniform(&format!("{name}.w"), &[k, ci, co], k * ci, rng);
    p.init_const(&format!("{name}.b"), &[co], 0.0);
}

/// Adds freshly initialized classifier parameters (identity normalizer).
pub fn init_params<T: Scalar>(cfg: &ClassifierConfig, params: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let bank_out = cfg.bank_size * cfg.bank_channels;
    for k in 1..=cfg.bank_size {
        conv1d_init(params, &format!("{PREFIX}bank{k}"), k, cfg.n_coeffs, cfg.bank_channels, rng);
    }
    conv1d_init(params, &format!("{PREFIX}proj1"), 3, bank_out, cfg.proj_channels, rng);
    conv1d_init(params, &format!("{PREFIX}proj2"), 3, cfg.proj_channels, cfg.n_coeffs, rng);
    dense_init(params, &format!("{PREFIX}prenet"), cfg.n_coeffs, cfg.highway_width, rng);
    for i in 0..cfg.highway_layers {
        let pre = format!("{PREFIX}highway{i}.");
        let w = cfg.highway_width;
        params.init_uniform(&format!("{pre}wh"), &[w, w], w, rng);
        params.init_const(&format!("{pre}bh"), &[w], 0.0);
        params.init_uniform(&format!("{pre}wt"), &[w, w], w, rng);
        // negative gate bias starts each layer close to a pass-through
        params.init_const(&format!("{pre}bt"), &[w], -1.0);
    }
    let h = cfg.gru_hidden;
    for dir in ["fwd", "bwd"] {
        let pre = format!("{PREFIX}gru_{dir}.");
        params.init_uniform(&format!("{pre}w_ih"), &[cfg.highway_width, 3 * h], cfg.highway_width, rng);
        params.init_uniform(&format!("{pre}w_hh"), &[h, 3 * h], h, rng);
        params.init_const(&format!("{pre}b_ih"), &[3 * h], 0.0);
        params.init_const(&format!("{pre}b_hh"), &[3 * h], 0.0);
    }
    dense_init(params, &format!("{PREFIX}out"), 2 * h, cfg.n_classes, rng);
    MfccNormalizer::identity(cfg.n_coeffs).store(params);
    Ok(())
}

/// `H·T + x·(1 − T)` with `H = relu(x·wh + bh)`, `T = σ(x·wt + bt)`.
pub fn highway<T: Scalar>(tape: &mut Tape<T>, params: &ParamStore<T>, x: Var, prefix: &str) -> Result<Var> {
    let wh = tape.param(params, &format!("{prefix}wh"))?;
    let bh = tape.param(params, &format!("{prefix}bh"))?;
    let wt = tape.param(params, &format!("{prefix}wt"))?;
    let bt = tape.param(params, &format!("{prefix}bt"))?;
    let h = tape.dense(x, wh, Some(bh))?;
    let h = tape.relu(h);
    let g = tape.dense(x, wt, Some(bt))?;
    let g = tape.sigmoid(g);
    let d = tape.sub(h, x)?;
    let gd = tape.mul(g, d)?;
    tape.add(x, gd)
}

fn conv1d<T: Scalar>(tape: &mut Tape<T>, params: &ParamStore<T>, x: Var, name: &str) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    tape.conv1d(x, w, b)
}

fn dense<T: Scalar>(tape: &mut Tape<T>, params: &ParamStore<T>, x: Var, name: &str) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    tape.dense(x, w, Some(b))
}

/// Records the classifier on `tape` for standardized features `x: [T, n_coeffs]`,
/// returning posteriors `[T, n_classes]`.
pub fn forward<T: Scalar>(tape: &mut Tape<T>, params: &ParamStore<T>, cfg: &ClassifierConfig, x: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 || xs[1] != cfg.n_coeffs {
        return Err(Error::invalid(format!("classifier input must be [T, {}], got {xs:?}", cfg.n_coeffs)));
    }
    if xs[0] == 0 {
        return Err(Error::invalid("classifier input has no frames"));
    }
    let mut bank = Vec::with_capacity(cfg.bank_size);
    for k in 1..=cfg.bank_size {
        let y = conv1d(tape, params, x, &format!("{PREFIX}bank{k}"))?;
        bank.push(tape.relu(y));
    }
    let y = tape.concat(&bank)?;
    let y = tape.max_pool_time(y)?;
    let y = conv1d(tape, params, y, &format!("{PREFIX}proj1"))?;
    let y = tape.relu(y);
    let y = conv1d(tape, params, y, &format!("{PREFIX}proj2"))?;
    let y = tape.add(y, x)?;
    let mut y = dense(tape, params, y, &format!("{PREFIX}prenet"))?;
    for i in 0..cfg.highway_layers {
        y = highway(tape, params, y, &format!("{PREFIX}highway{i}."))?;
    }
    let mut dirs = Vec::with_capacity(2);
    for (dir, reverse) in [("fwd", false), ("bwd", true)] {
        let pre = format!("{PREFIX}gru_{dir}.");
        let w_ih = tape.param(params, &format!("{pre}w_ih"))?;
        let w_hh = tape.param(params, &format!("{pre}w_hh"))?;
        let b_ih = tape.param(params, &format!("{pre}b_ih"))?;
        let b_hh = tape.param(params, &format!("{pre}b_hh"))?;
        dirs.push(tape.gru(y, w_ih, w_hh, b_ih, b_hh, reverse)?);
    }
    let y = tape.concat(&dirs)?;
    let logits = dense(tape, params, y, &format!("{PREFIX}out"))?;
    let p = tape.softmax(logits);
    debug_assert_eq!(tape.shape(p)[0], xs[0]);
    Ok(p)
}

/// Standardizes `m` with the stored statistics and runs the classifier.
pub fn classify_frames<T: Scalar>(m: &MfccFrames, params: &ParamStore<T>, cfg: &ClassifierConfig) -> Result<ProbMatrix> {
    if m.frames() == 0 {
        return Err(Error::invalid("MFCC stream has no frames"));
    }
    if m.n_coeffs() != cfg.n_coeffs {
        return Err(Error::invalid(format!("expected {} coefficients, got {}", cfg.n_coeffs, m.n_coeffs())));
    }
    let norm = MfccNormalizer::load(params)?;
    let x = Tensor::from_f64([m.frames(), m.n_coeffs()], &norm.apply(m))?;
    let mut tape = Tape::new();
    let x = tape.input(x);
    let p = forward(&mut tape, params, cfg, x)?;
    ProbMatrix::from_tensor(tape.value(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// `−Σ_k Σ_t ln p`.
    Sum,
    /// The sum divided by the total frame count of the batch.
    MeanPerFrame,
}

/// Cross-entropy over a batch of utterances.
pub fn phoneme_loss(probs: &[ProbMatrix], labels: &[PhonemeFrameLabels], reduction: Reduction) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::invalid(format!("{} posterior matrices vs {} label streams", probs.len(), labels.len())));
    }
    let mut total = 0.0;
    let mut frames = 0usize;
    for (p, y) in probs.iter().zip(labels) {
        if p.frames() != y.len() {
            return Err(Error::Alignment {
                context: format!("utterance {}", y.utterance_id()),
                left_name: "posteriors",
                left: p.frames(),
                right_name: "labels",
                right: y.len(),
            });
        }
        for (t, &c) in y.labels().iter().enumerate() {
            if c >= p.classes() {
                return Err(Error::invalid(format!("label {c} out of range for {} classes", p.classes())));
            }
            total -= p.row(t)[c].max(PROB_FLOOR).ln();
        }
        frames += y.len();
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::MeanPerFrame if frames == 0 => 0.0,
        Reduction::MeanPerFrame => total / frames as f64,
    })
}

/// Fraction of frames whose label ranks among the `k` largest posteriors.
/// Equal posteriors rank the lower class index first.
pub fn topk_accuracy(p: &ProbMatrix, labels: &PhonemeFrameLabels, k: usize) -> Result<f64> {
    if k == 0 || k > p.classes() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", p.classes())));
    }
    if p.frames() != labels.len() {
        return Err(Error::Alignment {
            context: format!("utterance {}", labels.utterance_id()),
            left_name: "posteriors",
            left: p.frames(),
            right_name: "labels",
            right: labels.len(),
        });
    }
    if p.frames() == 0 {
        return Err(Error::invalid("no frames to score"));
    }
    let mut hits = 0usize;
    for (t, &y) in labels.labels().iter().enumerate() {
        let row = p.row(t);
        let py = row[y];
        // rank = classes that beat y under (value desc, index asc)
        let rank = row.iter().enumerate().filter(|&(c, &v)| v > py || (v == py && c < y)).count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / p.frames() as f64)
}
