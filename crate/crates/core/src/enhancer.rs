//! Spectrogram encoder/decoder that predicts a bounded amplitude gain and a
//! unit phase per time-frequency bin.

use realfft::num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ProbMatrix;
use crate::dsp::ComplexSpectrogram;
use crate::nn::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::pbdr::{self, PlacementConfig};
use crate::{Error, Result};

pub const PREFIX: &str = "enhancer.";
/// Prefix of the posterior projection used by feature concatenation.
pub const CONCAT_PREFIX: &str = "concat.";
/// Floor on the phase-pair norm.
pub const PHASE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum Conditioning {
    #[default]
    None,
    /// Posterior-driven scale/bias on one encoder layer.
    Pbdr { placement: PlacementConfig, hidden: usize },
    /// Projected posteriors tiled over frequency and appended as channels.
    Concat { placement: PlacementConfig, channels: usize },
}


impl Conditioning {
    pub fn placement(&self) -> Option<PlacementConfig> {
        match *self {
            Conditioning::None => None,
            Conditioning::Pbdr { placement, .. } | Conditioning::Concat { placement, .. } => Some(placement),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhancerConfig {
    /// Output channels of the three encoder convolutions.
    pub channels: [usize; 3],
    pub res_blocks: usize,
    /// (time, frequency) kernel of encoder/decoder convolutions.
    pub kernel: [usize; 2],
    pub res_kernel: [usize; 2],
    /// Set from the experiment variant rather than read from config files.
    #[serde(skip)]
    pub conditioning: Conditioning,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            res_blocks: 4,
            kernel: [3, 5],
            res_kernel: [3, 3],
            conditioning: Conditioning::None,
        }
    }
}

impl EnhancerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::config("encoder channels must be positive"));
        }
        if self.kernel.iter().chain(&self.res_kernel).any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::config("kernel sizes must be odd"));
        }
        match self.conditioning {
            Conditioning::Pbdr { hidden: 0, .. } => Err(Error::config("mapper hidden width must be positive")),
            Conditioning::Concat { channels: 0, .. } => Err(Error::config("concat channels must be positive")),
            _ => Ok(()),
        }
    }

    fn concat_extra(&self, layer: u8) -> usize {
        match self.conditioning {
            Conditioning::Concat { placement, channels } if placement.layer_index() == layer => channels,
            _ => 0,
        }
    }
}

/// Frequency sizes after each pooling stage.
pub fn pooled_sizes(bins: usize) -> [usize; 4] {
    let f1 = bins.div_ceil(2);
    let f2 = f1.div_ceil(2);
    [bins, f1, f2, f2.div_ceil(2)]
}

fn conv_init<T: Scalar>(p: &mut ParamStore<T>, name: &str, k: [usize; 2], ci: usize, co: usize, rng: &mut impl Rng) {
    p.init_uniform(&format!("{name}.w"), &[k[0], k[1], ci, co], k[0] * k[1] * ci, rng);
    p.init_const(&format!("{name}.b"), &[co], 0.0);
}

fn tconv_init<T: Scalar>(p: &mut ParamStore<T>, name: &str, k: [usize; 2], ci: usize, co: usize, rng: &mut impl Rng) {
    p.init_uniform(&format!("{name}.w"), &[ci, k[0], k[1], co], k[0] * k[1] * ci, rng);
    p.init_const(&format!("{name}.b"), &[co], 0.0);
}

/// Adds encoder, residual and decoder parameters under `prefix`.
pub fn init_params<T: Scalar>(cfg: &EnhancerConfig, prefix: &str, params: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let [c1, c2, c3] = cfg.channels;
    let k = cfg.kernel;
    conv_init(params, &format!("{prefix}enc1"), k, 2, c1, rng);
    conv_init(params, &format!("{prefix}enc2"), k, c1 + cfg.concat_extra(1), c2, rng);
    conv_init(params, &format!("{prefix}enc3"), k, c2 + cfg.concat_extra(2), c3, rng);
    for i in 0..cfg.res_blocks {
        conv_init(params, &format!("{prefix}res{i}.a"), cfg.res_kernel, c3, c3, rng);
        conv_init(params, &format!("{prefix}res{i}.b"), cfg.res_kernel, c3, c3, rng);
    }
    tconv_init(params, &format!("{prefix}dec1"), k, c3, c3, rng);
    tconv_init(params, &format!("{prefix}dec2"), k, 2 * c3, c2, rng);
    tconv_init(params, &format!("{prefix}dec3"), k, 2 * c2, c1, rng);
    // the raw input joins the last skip so the phase head can see it directly
    conv_init(params, &format!("{prefix}out"), k, 2 * c1 + 2, 3, rng);
    copy_input_phase(params.get_mut(&format!("{prefix}out.w")).expect("just created"), k, 2 * c1);
    Ok(())
}

/// Phase channels start as a copy of the noisy input's phase: zero weights
/// except a unit centre tap from each raw input channel.
fn copy_input_phase<T: Scalar>(w: &mut Tensor<T>, k: [usize; 2], raw_offset: usize) {
    let (ci, co) = (raw_offset + 2, 3);
    let data = w.data_mut();
    for tap in 0..k[0] * k[1] {
        for i in 0..ci {
            data[(tap * ci + i) * co + 1] = T::zero();
            data[(tap * ci + i) * co + 2] = T::zero();
        }
    }
    let centre = (k[0] / 2) * k[1] + k[1] / 2;
    data[(centre * ci + raw_offset) * co + 1] = T::one();
    data[(centre * ci + raw_offset + 1) * co + 2] = T::one();
}

/// Adds the conditioning parameters (mapper or concat projection), if any.
pub fn init_conditioning<T: Scalar>(
    cfg: &EnhancerConfig,
    bins: usize,
    n_classes: usize,
    params: &mut ParamStore<T>,
    rng: &mut impl Rng,
) {
    let sizes = pooled_sizes(bins);
    match cfg.conditioning {
        Conditioning::None => {}
        Conditioning::Pbdr { placement, hidden } => {
            pbdr::init_mapper(n_classes, hidden, sizes[placement.layer_index() as usize - 1], params, rng)
        }
        Conditioning::Concat { channels, .. } => {
            params.init_uniform(&format!("{CONCAT_PREFIX}proj.w"), &[n_classes, channels], n_classes, rng);
            params.init_const(&format!("{CONCAT_PREFIX}proj.b"), &[channels], 0.0);
        }
    }
}

fn conv<T: Scalar>(tape: &mut Tape<T>, params: &ParamStore<T>, x: Var, name: &str) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    tape.conv2d(x, w, b)
}

fn tconv<T: Scalar>(tape: &mut Tape<T>, params: &ParamStore<T>, x: Var, name: &str) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    tape.conv_transpose_freq(x, w, b)
}

fn check_time<T: Scalar>(tape: &Tape<T>, v: Var, frames: usize, layer: &str) -> Result<()> {
    if tape.shape(v)[0] != frames {
        return Err(Error::State(format!("{layer} changed the time axis: {} != {frames}", tape.shape(v)[0])));
    }
    Ok(())
}

/// Encoder outputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    /// Activated (and, at the placement, conditioned) outputs of the three
    /// encoder convolutions before pooling.
    pub skips: [Var; 3],
    /// Pooled output of the last encoder layer.
    pub deepest: Var,
}

/// Records the encoder for input `[T, F, 2]` and optional posteriors `[T, L]`.
pub fn encode_graph<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    cfg: &EnhancerConfig,
    prefix: &str,
    input: Var,
    probs: Option<Var>,
) -> Result<EncoderVars> {
    let is = tape.shape(input).to_vec();
    if is.len() != 3 || is[2] != 2 {
        return Err(Error::invalid(format!("enhancer input must be [T, F, 2], got {is:?}")));
    }
    let frames = is[0];
    let needs_probs = cfg.conditioning != Conditioning::None;
    let probs = match (needs_probs, probs) {
        (true, Some(p)) => {
            if tape.shape(p)[0] != frames {
                return Err(Error::Alignment {
                    context: "encoder conditioning".into(),
                    left_name: "spectrogram",
                    left: frames,
                    right_name: "posteriors",
                    right: tape.shape(p)[0],
                });
            }
            Some(p)
        }
        (true, None) => return Err(Error::invalid("conditioned enhancer requires posteriors")),
        (false, _) => None,
    };
    let mut x = input;
    let mut skips = Vec::with_capacity(3);
    for layer in 1..=3u8 {
        let y = conv(tape, params, x, &format!("{prefix}enc{layer}"))?;
        let mut y = tape.relu(y);
        check_time(tape, y, frames, "encoder")?;
        let mut next = y;
        if let Some(p) = probs {
            match cfg.conditioning {
                Conditioning::Pbdr { placement, .. } if placement.layer_index() == layer => {
                    let (g, b) = pbdr::mapper_forward(tape, params, p)?;
                    y = tape.modulate(y, g, b)?;
                    next = y;
                }
                Conditioning::Concat { placement, .. } if placement.layer_index() == layer => {
                    let w = tape.param(params, &format!("{CONCAT_PREFIX}proj.w"))?;
                    let b = tape.param(params, &format!("{CONCAT_PREFIX}proj.b"))?;
                    let q = tape.dense(p, w, Some(b))?;
                    let f = tape.shape(y)[1];
                    let q = tape.tile_freq(q, f)?;
                    next = tape.concat(&[y, q])?;
                }
                _ => {}
            }
        }
        skips.push(y);
        x = tape.max_pool_freq(next)?;
    }
    Ok(EncoderVars { skips: [skips[0], skips[1], skips[2]], deepest: x })
}

/// Records residual blocks and decoder; returns `(gain [T, F], phase [T, F, 2])`.
pub fn decode_graph<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    cfg: &EnhancerConfig,
    prefix: &str,
    input: Var,
    enc: &EncoderVars,
) -> Result<(Var, Var)> {
    let frames = tape.shape(input)[0];
    let mut x = enc.deepest;
    for i in 0..cfg.res_blocks {
        let y = conv(tape, params, x, &format!("{prefix}res{i}.a"))?;
        let y = tape.relu(y);
        let y = conv(tape, params, y, &format!("{prefix}res{i}.b"))?;
        let y = tape.add(x, y)?;
        x = tape.relu(y);
    }
    for (i, skip) in [enc.skips[2], enc.skips[1], enc.skips[0]].into_iter().enumerate() {
        let y = tconv(tape, params, x, &format!("{prefix}dec{}", i + 1))?;
        let y = tape.relu(y);
        check_time(tape, y, frames, "decoder")?;
        if tape.shape(y)[1] != tape.shape(skip)[1] {
            return Err(Error::invalid(format!(
                "decoder frequency size {} does not match skip {}",
                tape.shape(y)[1],
                tape.shape(skip)[1]
            )));
        }
        x = tape.concat(&[y, skip])?;
    }
    let x = tape.concat(&[x, input])?;
    let raw = conv(tape, params, x, &format!("{prefix}out"))?;
    let (t, f) = (tape.shape(raw)[0], tape.shape(raw)[1]);
    let g = tape.slice_last(raw, 0, 1)?;
    let g = tape.reshape(g, &[t, f])?;
    let g = tape.sigmoid(g);
    let gain = tape.affine(g, 2.0, 0.0);
    let ab = tape.slice_last(raw, 1, 2)?;
    let phase = tape.unit_pair(ab, PHASE_EPS)?;
    Ok((gain, phase))
}

/// `Ŝ = gain · |C| · phase` on the tape; `magnitude` is `[T, F]`.
pub fn reconstruct_graph<T: Scalar>(tape: &mut Tape<T>, gain: Var, phase: Var, magnitude: Var) -> Result<Var> {
    let gm = tape.mul(gain, magnitude)?;
    tape.mul_broadcast(gm, phase)
}

/// Full enhancer on the tape: returns the estimated spectrum `[T, F, 2]`.
pub fn forward_graph<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    cfg: &EnhancerConfig,
    prefix: &str,
    input: Var,
    magnitude: Var,
    probs: Option<Var>,
) -> Result<Var> {
    let enc = encode_graph(tape, params, cfg, prefix, input, probs)?;
    let (gain, phase) = decode_graph(tape, params, cfg, prefix, input, &enc)?;
    reconstruct_graph(tape, gain, phase, magnitude)
}

/// Concrete encoder outputs.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T: Scalar> {
    pub input: Tensor<T>,
    pub skips: Vec<Tensor<T>>,
    pub deepest: Tensor<T>,
}

/// Runs the encoder on `c`; posteriors are required iff the config is conditioned.
pub fn encode<T: Scalar>(
    c: &ComplexSpectrogram,
    params: &ParamStore<T>,
    cfg: &EnhancerConfig,
    probs: Option<&ProbMatrix>,
) -> Result<EncoderOutput<T>> {
    let mut tape = Tape::new();
    let input = c.to_tensor::<T>();
    let x = tape.input(input.clone());
    let p = probs.map(|p| tape.input(p.to_tensor()));
    let enc = encode_graph(&mut tape, params, cfg, PREFIX, x, p)?;
    Ok(EncoderOutput {
        input,
        skips: enc.skips.iter().map(|&v| tape.value(v).clone()).collect(),
        deepest: tape.value(enc.deepest).clone(),
    })
}

/// Residual blocks and decoder applied to an encoder output.
pub fn decode<T: Scalar>(enc: &EncoderOutput<T>, params: &ParamStore<T>, cfg: &EnhancerConfig) -> Result<GainPhase> {
    if enc.skips.len() != 3 {
        return Err(Error::invalid(format!("expected 3 skips, got {}", enc.skips.len())));
    }
    let mut tape = Tape::new();
    let input = tape.input(enc.input.clone());
    let skips = [0, 1, 2].map(|i| tape.input(enc.skips[i].clone()));
    let deepest = tape.input(enc.deepest.clone());
    let vars = EncoderVars { skips, deepest };
    let (gain, phase) = decode_graph(&mut tape, params, cfg, PREFIX, input, &vars)?;
    let s = tape.shape(gain);
    Ok(GainPhase {
        frames: s[0],
        bins: s[1],
        gain: tape.value(gain).data().iter().map(|v| v.as_f64()).collect(),
        phase: tape.value(phase).data().iter().map(|v| v.as_f64()).collect(),
    })
}

/// Per-bin amplitude gain in (0, 2) and unit phase pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct GainPhase {
    frames: usize,
    bins: usize,
    gain: Vec<f64>,
    /// Interleaved (cos, sin).
    phase: Vec<f64>,
}

impl GainPhase {
    /// Builds from raw head outputs `[T, F, 3]`: gain logit then the phase pair.
    pub fn from_raw(frames: usize, bins: usize, raw: &[f64]) -> Result<Self> {
        if raw.len() != frames * bins * 3 {
            return Err(Error::invalid(format!("{} raw values for {frames}x{bins}x3", raw.len())));
        }
        let mut gain = Vec::with_capacity(frames * bins);
        let mut phase = Vec::with_capacity(2 * frames * bins);
        for r in raw.chunks_exact(3) {
            gain.push(2.0 / (1.0 + (-r[0]).exp()));
            let n = r[1].hypot(r[2]).max(PHASE_EPS);
            phase.extend([r[1] / n, r[2] / n]);
        }
        Ok(Self { frames, bins, gain, phase })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }

    pub fn phase(&self, t: usize, f: usize) -> (f64, f64) {
        let i = 2 * (t * self.bins + f);
        (self.phase[i], self.phase[i + 1])
    }
}

/// `Ŝ[t, f] = gain[t, f] · |C[t, f]| · phase[t, f]`.
pub fn reconstruct_spectrum(gp: &GainPhase, c: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    if gp.frames != c.frames() || gp.bins != c.bins() {
        return Err(Error::invalid(format!(
            "gain/phase {}x{} vs spectrogram {}x{}",
            gp.frames,
            gp.bins,
            c.frames(),
            c.bins()
        )));
    }
    let values = c
        .values()
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let a = gp.gain[i] * z.norm();
            Complex64::new(a * gp.phase[2 * i], a * gp.phase[2 * i + 1])
        })
        .collect();
    ComplexSpectrogram::new(values, c.frames(), c.config().clone(), c.signal_len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_sizes_default() {
        assert_eq!(pooled_sizes(257), [257, 129, 65, 33]);
    }

    #[test]
    fn raw_head_examples() {
        let gp = GainPhase::from_raw(1, 2, &[0.0, 1.0, 0.0, 0.0, 3.0, 4.0]).unwrap();
        assert_eq!(gp.gain(), &[1.0, 1.0]);
        assert_eq!(gp.phase(0, 0), (1.0, 0.0));
        let (c, s) = gp.phase(0, 1);
        assert!((c - 0.6).abs() < 1e-15 && (s - 0.8).abs() < 1e-15);
    }

    #[test]
    fn fresh_phase_head_copies_input_phase() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let cfg = EnhancerConfig { channels: [4, 4, 4], res_blocks: 1, ..Default::default() };
        let mut params = ParamStore::<f64>::new();
        init_params(&cfg, PREFIX, &mut params, &mut rng).unwrap();
        let x: Vec<f64> = (0..3200).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let c = crate::dsp::stft(&crate::dsp::Waveform::new(x, 16_000).unwrap(), &Default::default()).unwrap();
        let gp = decode(&encode(&c, &params, &cfg, None).unwrap(), &params, &cfg).unwrap();
        for t in 0..c.frames() {
            for f in 0..c.bins() {
                let z = c.get(t, f);
                if z.norm() > 1e-6 {
                    let (cos, sin) = gp.phase(t, f);
                    assert!((cos - z.re / z.norm()).abs() < 1e-6 && (sin - z.im / z.norm()).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let cfg = EnhancerConfig { kernel: [3, 4], ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
