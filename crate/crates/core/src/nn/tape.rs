//! Reverse-mode operator tape.
//!
//! A [`Tape`] records operators as they are applied; the recorded sequence is
//! the operator graph (acyclic by construction). [`Tape::backward`] walks it in
//! reverse to produce gradients for every leaf that requires them.

use std::collections::BTreeMap;
use std::sync::Arc;

use realfft::num_complex::Complex;

use super::tensor::compensated_sum;
use super::{ParamStore, Scalar, Tensor};
use crate::dsp::frames::FrameKernel;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct GruCache<T> {
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    hpn: Vec<T>,
    h_prev: Vec<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LogFloor { x: Var, floor: T },
    Sum(Var),
    L1 { a: Var, b: Var },
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Var },
    ConvTransposeFreq { x: Var, w: Var, b: Var },
    PoolFreq { x: Var, argmax: Vec<u32> },
    PoolTime { x: Var, argmax: Vec<u32> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Softmax(Var),
    Gru { x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, reverse: bool, cache: GruCache<T> },
    Nll { p: Var, labels: Vec<usize>, floor: T },
    Modulate { x: Var, gamma: Var, beta: Var },
    TileFreq { x: Var },
    UnitPair { x: Var, eps: T },
    MulBroadcast { a: Var, b: Var },
    Reshape(Var),
    Stft { x: Var, kernel: Arc<FrameKernel<T>> },
    Istft { x: Var, kernel: Arc<FrameKernel<T>> },
    Power { x: Var, kernel: Arc<FrameKernel<T>>, spec: Vec<Complex<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients indexed by tape node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

fn shape_err(op: &str, msg: String) -> Error {
    Error::InvalidInput(format!("{op}: {msg}"))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter as a differentiable leaf (once per tape).
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))?
            .clone();
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds a named parameter as a constant (no gradient).
    pub fn frozen(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))?
            .clone();
        Ok(self.input(t))
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, mk, ng))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, mk: Op<T>) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(out, mk, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale·x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::of(scale), T::of(shift));
        self.map(x, |v| s * v + c, Op::Affine { x, scale: s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v < T::zero() { T::zero() } else { v }, Op::Relu(x))
    }

    /// `ln(max(x, floor))`.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        let f = T::of(floor);
        self.map(x, |v| v.max(f).ln(), Op::LogFloor { x, floor: f })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `Σ |a − b|` over all elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs());
        let s = compensated_sum(s);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::L1 { a, b }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Affine map over the last axis: `[.., Din] · [Din, Dout] + [Dout]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(shape_err("dense", format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("dense", format!("bias {:?} != [{dout}]", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_exact_mut(dout) {
                r.copy_from_slice(bv);
            }
        }
        T::gemm(rows, din, dout, self.value(x).data(), din, 1, self.value(w).data(), dout, 1, T::one(), &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Dense { x, w, b }, ng))
    }

    /// Stride-1 "same" 2-D convolution on `[T, F, Cin]` with weight
    /// `[kt, kf, Cin, Cout]` and bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != xs[2] {
            return Err(shape_err("conv2d", format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        if self.shape(b) != [ws[3]] {
            return Err(shape_err("conv2d", format!("bias {:?} != [{}]", self.shape(b), ws[3])));
        }
        let geo = ConvGeom::new(&xs, &ws);
        let out = geo.forward(self.value(x).data(), self.value(w).data(), self.value(b).data());
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new([xs[0], xs[1], ws[3]], out)?, Op::Conv2d { x, w, b }, ng))
    }

    /// "Same" 1-D convolution over time on `[T, Cin]` with weight `[k, Cin, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 3 {
            return Err(shape_err("conv1d", format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        let x3 = self.reshape(x, &[xs[0], 1, xs[1]])?;
        let w4 = self.reshape(w, &[ws[0], 1, ws[1], ws[2]])?;
        let y = self.conv2d(x3, w4, b)?;
        self.reshape(y, &[xs[0], ws[2]])
    }

    /// Transposed convolution upsampling frequency by 2 (time stride 1) on
    /// `[T, F, Cin]` with weight `[Cin, kt, kf, Cout]`; output has
    /// `2(F−1) + kf − 2⌊(kf−1)/2⌋` bins.
    pub fn conv_transpose_freq(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[2] {
            return Err(shape_err("conv_transpose_freq", format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        if self.shape(b) != [ws[3]] {
            return Err(shape_err("conv_transpose_freq", format!("bias {:?} != [{}]", self.shape(b), ws[3])));
        }
        let geo = TConvGeom::new(&xs, &ws);
        let out = geo.forward(self.value(x).data(), self.value(w).data(), self.value(b).data());
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor::new([xs[0], geo.fo, ws[3]], out)?,
            Op::ConvTransposeFreq { x, w, b },
            ng,
        ))
    }

    /// Width-2, stride-2 max-pool over the frequency axis of `[T, F, C]` (ceil mode).
    pub fn max_pool_freq(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("max_pool_freq", format!("expected [T, F, C], got {xs:?}")));
        }
        let (t, f, c) = (xs[0], xs[1], xs[2]);
        let fo = f.div_ceil(2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(t * fo * c);
        let mut argmax = Vec::with_capacity(t * fo * c);
        for ti in 0..t {
            for j in 0..fo {
                for ci in 0..c {
                    let i0 = (ti * f + 2 * j) * c + ci;
                    let mut best = i0;
                    if 2 * j + 1 < f && xv[i0 + c] > xv[i0] {
                        best = i0 + c;
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new([t, fo, c], out)?, Op::PoolFreq { x, argmax }, ng))
    }

    /// Width-2, stride-1 max-pool over time of `[T, C]`, length preserving.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("max_pool_time", format!("expected [T, C], got {xs:?}")));
        }
        let (t, c) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(t * c);
        let mut argmax = Vec::with_capacity(t * c);
        for ti in 0..t {
            for ci in 0..c {
                let i0 = ti * c + ci;
                let best = if ti + 1 < t && xv[i0 + c] > xv[i0] { i0 + c } else { i0 };
                out.push(xv[best]);
                argmax.push(best as u32);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new([t, c], out)?, Op::PoolTime { x, argmax }, ng))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err("concat", format!("shape {s:?} incompatible with leading {lead:?}")));
            }
            total += s[lead.len()];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                let d = self.value(v).last_dim();
                out.extend_from_slice(&self.value(v).data()[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec()), ng))
    }

    /// Takes `len` entries of the last axis starting at `start`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if start + len > d || len == 0 {
            return Err(shape_err("slice_last", format!("range {start}..{} out of {d}", start + len)));
        }
        let rows = self.value(x).len() / d;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, start }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Single-direction GRU over `[T, D]` producing `[T, H]`, zero initial
    /// state, gate order (reset, update, new).
    #[allow(clippy::too_many_arguments)]
    pub fn gru(&mut self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let wi = self.shape(w_ih).to_vec();
        let wh = self.shape(w_hh).to_vec();
        if xs.len() != 2 || wi.len() != 2 || wh.len() != 2 || wi[0] != xs[1] || wh[1] != wi[1] || wh[1] != 3 * wh[0] {
            return Err(shape_err("gru", format!("input {xs:?}, w_ih {wi:?}, w_hh {wh:?} incompatible")));
        }
        let h = wh[0];
        if self.shape(b_ih) != [3 * h] || self.shape(b_hh) != [3 * h] {
            return Err(shape_err("gru", "bias shapes must be [3H]".into()));
        }
        let (t_len, d) = (xs[0], xs[1]);
        let mut xp = vec![T::zero(); t_len * 3 * h];
        for r in xp.chunks_exact_mut(3 * h) {
            r.copy_from_slice(self.value(b_ih).data());
        }
        T::gemm(t_len, d, 3 * h, self.value(x).data(), d, 1, self.value(w_ih).data(), 3 * h, 1, T::one(), &mut xp);
        let whh = self.value(w_hh).data();
        let bhh = self.value(b_hh).data();
        let mut cache = GruCache {
            r: vec![T::zero(); t_len * h],
            z: vec![T::zero(); t_len * h],
            n: vec![T::zero(); t_len * h],
            hpn: vec![T::zero(); t_len * h],
            h_prev: vec![T::zero(); t_len * h],
        };
        let mut out = vec![T::zero(); t_len * h];
        let mut hstate = vec![T::zero(); h];
        let mut hp = vec![T::zero(); 3 * h];
        for s in 0..t_len {
            let t = if reverse { t_len - 1 - s } else { s };
            hp.copy_from_slice(bhh);
            T::gemm(1, h, 3 * h, &hstate, h, 1, whh, 3 * h, 1, T::one(), &mut hp);
            let xr = &xp[t * 3 * h..(t + 1) * 3 * h];
            for j in 0..h {
                let r = sigmoid(xr[j] + hp[j]);
                let z = sigmoid(xr[h + j] + hp[h + j]);
                let n = (xr[2 * h + j] + r * hp[2 * h + j]).tanh();
                let i = t * h + j;
                cache.r[i] = r;
                cache.z[i] = z;
                cache.n[i] = n;
                cache.hpn[i] = hp[2 * h + j];
                cache.h_prev[i] = hstate[j];
                let hn = (T::one() - z) * n + z * hstate[j];
                out[i] = hn;
            }
            hstate.copy_from_slice(&out[t * h..(t + 1) * h]);
        }
        let ng = [x, w_ih, w_hh, b_ih, b_hh].iter().any(|&v| self.ng(v));
        Ok(self.push(
            Tensor::new([t_len, h], out)?,
            Op::Gru { x, w_ih, w_hh, b_ih, b_hh, reverse, cache },
            ng,
        ))
    }

    /// `−Σ_t ln max(p[t, labels[t]], floor)` over rows of `[T, L]`.
    pub fn nll(&mut self, p: Var, labels: &[usize], floor: f64) -> Result<Var> {
        let ps = self.shape(p).to_vec();
        if ps.len() != 2 || ps[0] != labels.len() {
            return Err(shape_err("nll", format!("probabilities {ps:?} vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= ps[1]) {
            return Err(shape_err("nll", format!("label {bad} out of range for {} classes", ps[1])));
        }
        let fl = T::of(floor);
        let pv = self.value(p).data();
        let s = compensated_sum(labels.iter().enumerate().map(|(t, &y)| -pv[t * ps[1] + y].max(fl).ln()));
        let ng = self.ng(p);
        Ok(self.push(Tensor::scalar(s), Op::Nll { p, labels: labels.to_vec(), floor: fl }, ng))
    }

    /// `out[t,f,c] = x[t,f,c]·gamma[t,f] + beta[t,f]`.
    pub fn modulate(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(gamma) != [xs[0], xs[1]] || self.shape(beta) != [xs[0], xs[1]] {
            return Err(shape_err(
                "modulate",
                format!("features {xs:?} vs gamma {:?} / beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let c = xs[2];
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(xv.len());
        for (i, row) in xv.chunks_exact(c).enumerate() {
            out.extend(row.iter().map(|&v| v * gv[i] + bv[i]));
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(Tensor::new(xs, out)?, Op::Modulate { x, gamma, beta }, ng))
    }

    /// Repeats `[T, D]` over a new frequency axis: `[T, F, D]`.
    pub fn tile_freq(&mut self, x: Var, f: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || f == 0 {
            return Err(shape_err("tile_freq", format!("expected [T, D], got {xs:?}")));
        }
        let (t, d) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(t * f * d);
        for ti in 0..t {
            for _ in 0..f {
                out.extend_from_slice(&xv[ti * d..(ti + 1) * d]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new([t, f, d], out)?, Op::TileFreq { x }, ng))
    }

    /// Normalizes trailing pairs to unit length: `v / max(|v|, eps)`.
    pub fn unit_pair(&mut self, x: Var, eps: f64) -> Result<Var> {
        if self.value(x).last_dim() != 2 {
            return Err(shape_err("unit_pair", format!("last axis must be 2, got {:?}", self.shape(x))));
        }
        let e = T::of(eps);
        let mut out = self.value(x).data().to_vec();
        for p in out.chunks_exact_mut(2) {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt().max(e);
            p[0] = p[0] / r;
            p[1] = p[1] / r;
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::UnitPair { x, eps: e }, ng))
    }

    /// `out[i, k] = a[i]·b[i, k]` where `b` has one extra trailing axis.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if bs.len() != as_.len() + 1 || bs[..as_.len()] != as_[..] {
            return Err(shape_err("mul_broadcast", format!("{as_:?} does not broadcast onto {bs:?}")));
        }
        let k = *bs.last().unwrap();
        let av = self.value(a).data();
        let out = self
            .value(b)
            .data()
            .chunks_exact(k)
            .zip(av)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(bs, out)?, Op::MulBroadcast { a, b }, ng))
    }

    /// Framed analysis of a 1-D signal into `[T, bins, 2]` (re, im).
    pub fn stft(&mut self, x: Var, kernel: &Arc<FrameKernel<T>>) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(shape_err("stft", format!("expected 1-D signal, got {:?}", self.shape(x))));
        }
        let (frames, spec) = kernel.analyze(self.value(x).data())?;
        let data = spec.iter().flat_map(|c| [c.re, c.im]).collect();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new([frames, kernel.bins(), 2], data)?,
            Op::Stft { x, kernel: kernel.clone() },
            ng,
        ))
    }

    /// Overlap-add synthesis of `[T, bins, 2]` into `len` samples.
    pub fn istft(&mut self, x: Var, kernel: &Arc<FrameKernel<T>>, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != kernel.bins() || xs[2] != 2 {
            return Err(shape_err("istft", format!("expected [T, {}, 2], got {xs:?}", kernel.bins())));
        }
        let spec: Vec<Complex<T>> =
            self.value(x).data().chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect();
        let out = kernel.synthesize(&spec, len);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new([len], out)?, Op::Istft { x, kernel: kernel.clone() }, ng))
    }

    /// Framed power spectrum `|X|²` of a 1-D signal: `[T, bins]`.
    pub fn power_spectrum(&mut self, x: Var, kernel: &Arc<FrameKernel<T>>) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(shape_err("power_spectrum", format!("expected 1-D signal, got {:?}", self.shape(x))));
        }
        let (frames, spec) = kernel.analyze(self.value(x).data())?;
        let data = spec.iter().map(|c| c.norm_sqr()).collect();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new([frames, kernel.bins()], data)?,
            Op::Power { x, kernel: kernel.clone(), spec },
            ng,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward operation".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(format!("node {} is not on this tape", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape matches")
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let neg = gd.iter().map(|&v| -v).collect();
                self.acc(grads, *b, self.like(*b, neg));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    self.acc(grads, *a, self.like(*a, gd.iter().zip(bv).map(|(&g, &v)| g * v).collect()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.like(*b, gd.iter().zip(av).map(|(&g, &v)| g * v).collect()));
                }
            }
            Op::Affine { x, scale } => {
                self.acc(grads, *x, self.like(*x, gd.iter().map(|&v| v * *scale).collect()));
            }
            Op::Sigmoid(x) => {
                let d = gd.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Tanh(x) => {
                let d = gd.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)).collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::LogFloor { x, floor } => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > *floor { g / v } else { T::zero() })
                    .collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Sum(x) => {
                self.acc(grads, *x, Tensor::full(self.shape(*x).to_vec(), gd[0]));
            }
            Op::L1 { a, b } => {
                let s: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            gd[0]
                        } else if d < T::zero() {
                            -gd[0]
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.ng(*b) {
                    self.acc(grads, *b, self.like(*b, s.iter().map(|&v| -v).collect()));
                }
                self.acc(grads, *a, self.like(*a, s));
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, self.like(*x, gd.to_vec()));
            }
            Op::Dense { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = gd.len() / dout;
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut gb = vec![T::zero(); dout];
                        for r in gd.chunks_exact(dout) {
                            for (acc, &v) in gb.iter_mut().zip(r) {
                                *acc = *acc + v;
                            }
                        }
                        self.acc(grads, *b, self.like(*b, gb));
                    }
                }
                if self.ng(*w) {
                    let mut gw = vec![T::zero(); din * dout];
                    T::gemm(din, rows, dout, self.value(*x).data(), 1, din, gd, dout, 1, T::zero(), &mut gw);
                    self.acc(grads, *w, self.like(*w, gw));
                }
                if self.ng(*x) {
                    let mut gx = vec![T::zero(); rows * din];
                    T::gemm(rows, dout, din, gd, dout, 1, self.value(*w).data(), 1, dout, T::zero(), &mut gx);
                    self.acc(grads, *x, self.like(*x, gx));
                }
            }
            Op::Conv2d { x, w, b } => {
                let geo = ConvGeom::new(self.shape(*x), self.shape(*w));
                let (gx, gw, gb) = geo.backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    self.ng(*x),
                    self.ng(*w),
                );
                if self.ng(*b) {
                    self.acc(grads, *b, self.like(*b, gb));
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, self.like(*w, gw));
                }
                if let Some(gx) = gx {
                    self.acc(grads, *x, self.like(*x, gx));
                }
            }
            Op::ConvTransposeFreq { x, w, b } => {
                let geo = TConvGeom::new(self.shape(*x), self.shape(*w));
                let (gx, gw, gb) = geo.backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    self.ng(*x),
                    self.ng(*w),
                );
                if self.ng(*b) {
                    self.acc(grads, *b, self.like(*b, gb));
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, self.like(*w, gw));
                }
                if let Some(gx) = gx {
                    self.acc(grads, *x, self.like(*x, gx));
                }
            }
            Op::PoolFreq { x, argmax } | Op::PoolTime { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    gx[src as usize] = gx[src as usize] + gv;
                }
                self.acc(grads, *x, self.like(*x, gx));
            }
            Op::Concat(xs) => {
                let total = g.last_dim();
                let rows = gd.len() / total;
                let mut off = 0;
                for &v in xs {
                    let d = self.value(v).last_dim();
                    if self.ng(v) {
                        let mut gv = Vec::with_capacity(rows * d);
                        for r in 0..rows {
                            gv.extend_from_slice(&gd[r * total + off..r * total + off + d]);
                        }
                        self.acc(grads, v, self.like(v, gv));
                    }
                    off += d;
                }
            }
            Op::Slice { x, start } => {
                let d = self.value(*x).last_dim();
                let len = g.last_dim();
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (r, row) in gd.chunks_exact(len).enumerate() {
                    gx[r * d + start..r * d + start + len].copy_from_slice(row);
                }
                self.acc(grads, *x, self.like(*x, gx));
            }
            Op::Softmax(x) => {
                let d = g.last_dim();
                let mut gx = Vec::with_capacity(gd.len());
                for (gr, yr) in gd.chunks_exact(d).zip(y.chunks_exact(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(&a, &b)| b * (a - dot)));
                }
                self.acc(grads, *x, self.like(*x, gx));
            }
            Op::Gru { x, w_ih, w_hh, b_ih, b_hh, reverse, cache } => {
                self.gru_backward(*x, *w_ih, *w_hh, *b_ih, *b_hh, *reverse, cache, gd, grads);
            }
            Op::Nll { p, labels, floor } => {
                let l = self.value(*p).last_dim();
                let pv = self.value(*p).data();
                let mut gp = vec![T::zero(); pv.len()];
                for (t, &yl) in labels.iter().enumerate() {
                    let v = pv[t * l + yl];
                    if v > *floor {
                        gp[t * l + yl] = -gd[0] / v;
                    }
                }
                self.acc(grads, *p, self.like(*p, gp));
            }
            Op::Modulate { x, gamma, beta } => {
                let c = self.value(*x).last_dim();
                let (xv, gv) = (self.value(*x).data(), self.value(*gamma).data());
                if self.ng(*x) {
                    let gx = gd
                        .chunks_exact(c)
                        .zip(gv)
                        .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
                        .collect();
                    self.acc(grads, *x, self.like(*x, gx));
                }
                if self.ng(*gamma) {
                    let gg = gd
                        .chunks_exact(c)
                        .zip(xv.chunks_exact(c))
                        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| p * q).sum())
                        .collect();
                    self.acc(grads, *gamma, self.like(*gamma, gg));
                }
                if self.ng(*beta) {
                    let gb = gd.chunks_exact(c).map(|row| row.iter().copied().sum()).collect();
                    self.acc(grads, *beta, self.like(*beta, gb));
                }
            }
            Op::TileFreq { x } => {
                let xs = self.shape(*x);
                let (t, d) = (xs[0], xs[1]);
                let f = gd.len() / (t * d);
                let mut gx = vec![T::zero(); t * d];
                for ti in 0..t {
                    for fi in 0..f {
                        let src = &gd[(ti * f + fi) * d..(ti * f + fi + 1) * d];
                        for (acc, &v) in gx[ti * d..(ti + 1) * d].iter_mut().zip(src) {
                            *acc = *acc + v;
                        }
                    }
                }
                self.acc(grads, *x, self.like(*x, gx));
            }
            Op::UnitPair { x, eps } => {
                let xv = self.value(*x).data();
                let mut gx = Vec::with_capacity(xv.len());
                for ((p, o), gp) in xv.chunks_exact(2).zip(y.chunks_exact(2)).zip(gd.chunks_exact(2)) {
                    let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                    if r > *eps {
                        let dot = o[0] * gp[0] + o[1] * gp[1];
                        gx.push((gp[0] - o[0] * dot) / r);
                        gx.push((gp[1] - o[1] * dot) / r);
                    } else {
                        gx.push(gp[0] / *eps);
                        gx.push(gp[1] / *eps);
                    }
                }
                self.acc(grads, *x, self.like(*x, gx));
            }
            Op::MulBroadcast { a, b } => {
                let k = g.last_dim();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let ga = gd
                        .chunks_exact(k)
                        .zip(bv.chunks_exact(k))
                        .map(|(p, q)| p.iter().zip(q).map(|(&u, &v)| u * v).sum())
                        .collect();
                    self.acc(grads, *a, self.like(*a, ga));
                }
                if self.ng(*b) {
                    let gb = gd
                        .chunks_exact(k)
                        .zip(av)
                        .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
                        .collect();
                    self.acc(grads, *b, self.like(*b, gb));
                }
            }
            Op::Stft { x, kernel } => {
                let gc: Vec<Complex<T>> = gd.chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect();
                let n = self.value(*x).len();
                self.acc(grads, *x, self.like(*x, kernel.analyze_adjoint(&gc, n)));
            }
            Op::Istft { x, kernel } => {
                let frames = self.shape(*x)[0];
                let gs = kernel.synthesize_adjoint(gd, frames);
                let flat = gs.iter().flat_map(|c| [c.re, c.im]).collect();
                self.acc(grads, *x, self.like(*x, flat));
            }
            Op::Power { x, kernel, spec } => {
                let two = T::of(2.0);
                let gc: Vec<Complex<T>> =
                    spec.iter().zip(gd).map(|(c, &gv)| Complex::new(two * c.re * gv, two * c.im * gv)).collect();
                let n = self.value(*x).len();
                self.acc(grads, *x, self.like(*x, kernel.analyze_adjoint(&gc, n)));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn gru_backward(
        &self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        reverse: bool,
        c: &GruCache<T>,
        gout: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (t_len, d) = (self.shape(x)[0], self.shape(x)[1]);
        let h = self.shape(w_hh)[0];
        let whh = self.value(w_hh).data();
        let one = T::one();
        let mut gxp = vec![T::zero(); t_len * 3 * h];
        let mut gwhh = vec![T::zero(); h * 3 * h];
        let mut gbhh = vec![T::zero(); 3 * h];
        let mut gh = vec![T::zero(); h];
        let mut dhp = vec![T::zero(); 3 * h];
        let mut dh_prev = vec![T::zero(); h];
        for s in (0..t_len).rev() {
            let t = if reverse { t_len - 1 - s } else { s };
            for j in 0..h {
                gh[j] = gh[j] + gout[t * h + j];
            }
            let base = t * h;
            for j in 0..h {
                let i = base + j;
                let (r, z, n, hpn, hp) = (c.r[i], c.z[i], c.n[i], c.hpn[i], c.h_prev[i]);
                let dn = gh[j] * (one - z);
                let dz = gh[j] * (hp - n);
                dh_prev[j] = gh[j] * z;
                let dan = dn * (one - n * n);
                let dr = dan * hpn;
                let daz = dz * z * (one - z);
                let dar = dr * r * (one - r);
                let gx_row = &mut gxp[t * 3 * h..(t + 1) * 3 * h];
                gx_row[j] = dar;
                gx_row[h + j] = daz;
                gx_row[2 * h + j] = dan;
                dhp[j] = dar;
                dhp[h + j] = daz;
                dhp[2 * h + j] = dan * r;
            }
            // gwhh += h_prev^T dhp ; gbhh += dhp
            let hprev = &c.h_prev[base..base + h];
            T::gemm(h, 1, 3 * h, hprev, 1, 1, &dhp, 3 * h, 1, T::one(), &mut gwhh);
            for (acc, &v) in gbhh.iter_mut().zip(&dhp) {
                *acc = *acc + v;
            }
            // gh = dh_prev + dhp · whh^T
            gh.copy_from_slice(&dh_prev);
            T::gemm(1, 3 * h, h, &dhp, 3 * h, 1, whh, 1, 3 * h, T::one(), &mut gh);
        }
        if self.ng(w_hh) {
            self.acc(grads, w_hh, self.like(w_hh, gwhh));
        }
        if self.ng(b_hh) {
            self.acc(grads, b_hh, self.like(b_hh, gbhh));
        }
        if self.ng(b_ih) {
            let mut gb = vec![T::zero(); 3 * h];
            for row in gxp.chunks_exact(3 * h) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            self.acc(grads, b_ih, self.like(b_ih, gb));
        }
        if self.ng(w_ih) {
            let mut gw = vec![T::zero(); d * 3 * h];
            T::gemm(d, t_len, 3 * h, self.value(x).data(), 1, d, &gxp, 3 * h, 1, T::zero(), &mut gw);
            self.acc(grads, w_ih, self.like(w_ih, gw));
        }
        if self.ng(x) {
            let mut gx = vec![T::zero(); t_len * d];
            T::gemm(t_len, 3 * h, d, &gxp, 3 * h, 1, self.value(w_ih).data(), 1, 3 * h, T::zero(), &mut gx);
            self.acc(grads, x, self.like(x, gx));
        }
    }
}

/// Frames processed per im2col block.
const CONV_BLOCK: usize = 8;

struct ConvGeom {
    t: usize,
    f: usize,
    ci: usize,
    kt: usize,
    kf: usize,
    co: usize,
    pt: usize,
    pf: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        Self {
            t: xs[0],
            f: xs[1],
            ci: xs[2],
            kt: ws[0],
            kf: ws[1],
            co: ws[3],
            pt: (ws[0] - 1) / 2,
            pf: (ws[1] - 1) / 2,
        }
    }

    fn k(&self) -> usize {
        self.kt * self.kf * self.ci
    }

    fn im2col<T: Scalar>(&self, x: &[T], t0: usize, t1: usize, cols: &mut [T]) {
        let k = self.k();
        cols.iter_mut().for_each(|v| *v = T::zero());
        for t in t0..t1 {
            for f in 0..self.f {
                let row = &mut cols[((t - t0) * self.f + f) * k..((t - t0) * self.f + f + 1) * k];
                for dt in 0..self.kt {
                    let ts = t + dt;
                    if ts < self.pt || ts - self.pt >= self.t {
                        continue;
                    }
                    let ts = ts - self.pt;
                    for df in 0..self.kf {
                        let fs = f + df;
                        if fs < self.pf || fs - self.pf >= self.f {
                            continue;
                        }
                        let fs = fs - self.pf;
                        let src = &x[(ts * self.f + fs) * self.ci..(ts * self.f + fs + 1) * self.ci];
                        let o = (dt * self.kf + df) * self.ci;
                        row[o..o + self.ci].copy_from_slice(src);
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], t0: usize, t1: usize, gx: &mut [T]) {
        let k = self.k();
        for t in t0..t1 {
            for f in 0..self.f {
                let row = &cols[((t - t0) * self.f + f) * k..((t - t0) * self.f + f + 1) * k];
                for dt in 0..self.kt {
                    let ts = t + dt;
                    if ts < self.pt || ts - self.pt >= self.t {
                        continue;
                    }
                    let ts = ts - self.pt;
                    for df in 0..self.kf {
                        let fs = f + df;
                        if fs < self.pf || fs - self.pf >= self.f {
                            continue;
                        }
                        let fs = fs - self.pf;
                        let dst = &mut gx[(ts * self.f + fs) * self.ci..(ts * self.f + fs + 1) * self.ci];
                        let o = (dt * self.kf + df) * self.ci;
                        for (a, &v) in dst.iter_mut().zip(&row[o..o + self.ci]) {
                            *a = *a + v;
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Scalar>(&self, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
        let k = self.k();
        let mut out = vec![T::zero(); self.t * self.f * self.co];
        for r in out.chunks_exact_mut(self.co) {
            r.copy_from_slice(b);
        }
        let mut cols = vec![T::zero(); CONV_BLOCK * self.f * k];
        let mut t0 = 0;
        while t0 < self.t {
            let t1 = (t0 + CONV_BLOCK).min(self.t);
            let rows = (t1 - t0) * self.f;
            self.im2col(x, t0, t1, &mut cols[..rows * k]);
            let dst = &mut out[t0 * self.f * self.co..t1 * self.f * self.co];
            T::gemm(rows, k, self.co, &cols[..rows * k], k, 1, w, self.co, 1, T::one(), dst);
            t0 = t1;
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn backward<T: Scalar>(
        &self,
        x: &[T],
        w: &[T],
        gy: &[T],
        need_x: bool,
        need_w: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
        let k = self.k();
        let mut gb = vec![T::zero(); self.co];
        for r in gy.chunks_exact(self.co) {
            for (a, &v) in gb.iter_mut().zip(r) {
                *a = *a + v;
            }
        }
        let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
        let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
        let mut cols = vec![T::zero(); CONV_BLOCK * self.f * k];
        let mut t0 = 0;
        while t0 < self.t {
            let t1 = (t0 + CONV_BLOCK).min(self.t);
            let rows = (t1 - t0) * self.f;
            let g = &gy[t0 * self.f * self.co..t1 * self.f * self.co];
            if let Some(gw) = gw.as_mut() {
                self.im2col(x, t0, t1, &mut cols[..rows * k]);
                T::gemm(k, rows, self.co, &cols[..rows * k], 1, k, g, self.co, 1, T::one(), gw);
            }
            if let Some(gx) = gx.as_mut() {
                T::gemm(rows, self.co, k, g, self.co, 1, w, 1, self.co, T::zero(), &mut cols[..rows * k]);
                self.col2im(&cols[..rows * k], t0, t1, gx);
            }
            t0 = t1;
        }
        (gx, gw, gb)
    }
}

struct TConvGeom {
    t: usize,
    fi: usize,
    fo: usize,
    ci: usize,
    kt: usize,
    kf: usize,
    co: usize,
    pt: usize,
    pf: usize,
}

impl TConvGeom {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        let (kt, kf) = (ws[1], ws[2]);
        let pf = (kf - 1) / 2;
        Self {
            t: xs[0],
            fi: xs[1],
            fo: 2 * (xs[1] - 1) + kf - 2 * pf,
            ci: xs[2],
            kt,
            kf,
            co: ws[3],
            pt: (kt - 1) / 2,
            pf,
        }
    }

    fn n(&self) -> usize {
        self.kt * self.kf * self.co
    }

    /// Output index for input (ti, fi) and kernel tap (dt, df), if in range.
    fn target(&self, ti: usize, fi: usize, dt: usize, df: usize) -> Option<usize> {
        let t = ti + dt;
        let f = 2 * fi + df;
        if t < self.pt || t - self.pt >= self.t || f < self.pf || f - self.pf >= self.fo {
            return None;
        }
        Some(((t - self.pt) * self.fo + (f - self.pf)) * self.co)
    }

    fn forward<T: Scalar>(&self, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
        let n = self.n();
        let mut out = vec![T::zero(); self.t * self.fo * self.co];
        for r in out.chunks_exact_mut(self.co) {
            r.copy_from_slice(b);
        }
        let mut z = vec![T::zero(); CONV_BLOCK * self.fi * n];
        let mut t0 = 0;
        while t0 < self.t {
            let t1 = (t0 + CONV_BLOCK).min(self.t);
            let rows = (t1 - t0) * self.fi;
            let xs = &x[t0 * self.fi * self.ci..t1 * self.fi * self.ci];
            T::gemm(rows, self.ci, n, xs, self.ci, 1, w, n, 1, T::zero(), &mut z[..rows * n]);
            for ti in t0..t1 {
                for fi in 0..self.fi {
                    let zr = &z[((ti - t0) * self.fi + fi) * n..((ti - t0) * self.fi + fi + 1) * n];
                    for dt in 0..self.kt {
                        for df in 0..self.kf {
                            if let Some(o) = self.target(ti, fi, dt, df) {
                                let src = &zr[(dt * self.kf + df) * self.co..(dt * self.kf + df + 1) * self.co];
                                for (a, &v) in out[o..o + self.co].iter_mut().zip(src) {
                                    *a = *a + v;
                                }
                            }
                        }
                    }
                }
            }
            t0 = t1;
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn backward<T: Scalar>(
        &self,
        x: &[T],
        w: &[T],
        gy: &[T],
        need_x: bool,
        need_w: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
        let n = self.n();
        let mut gb = vec![T::zero(); self.co];
        for r in gy.chunks_exact(self.co) {
            for (a, &v) in gb.iter_mut().zip(r) {
                *a = *a + v;
            }
        }
        let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
        let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
        let mut gz = vec![T::zero(); CONV_BLOCK * self.fi * n];
        let mut t0 = 0;
        while t0 < self.t {
            let t1 = (t0 + CONV_BLOCK).min(self.t);
            let rows = (t1 - t0) * self.fi;
            let gzb = &mut gz[..rows * n];
            gzb.iter_mut().for_each(|v| *v = T::zero());
            for ti in t0..t1 {
                for fi in 0..self.fi {
                    let zr = &mut gzb[((ti - t0) * self.fi + fi) * n..((ti - t0) * self.fi + fi + 1) * n];
                    for dt in 0..self.kt {
                        for df in 0..self.kf {
                            if let Some(o) = self.target(ti, fi, dt, df) {
                                let o2 = (dt * self.kf + df) * self.co;
                                zr[o2..o2 + self.co].copy_from_slice(&gy[o..o + self.co]);
                            }
                        }
                    }
                }
            }
            let xs = &x[t0 * self.fi * self.ci..t1 * self.fi * self.ci];
            if let Some(gw) = gw.as_mut() {
                T::gemm(self.ci, rows, n, xs, 1, self.ci, gzb, n, 1, T::one(), gw);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[t0 * self.fi * self.ci..t1 * self.fi * self.ci];
                T::gemm(rows, n, self.ci, gzb, n, 1, w, 1, n, T::zero(), dst);
            }
            t0 = t1;
        }
        (gx, gw, gb)
    }
}
