//! Experiment variants assembled from the enhancer, classifier and
//! conditioning parts, plus the shared forward/loss graph.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClassifierConfig, MfccNormalizer, PhonemeFrameLabels, ProbMatrix};
use crate::dsp::frames::FrameKernel;
use crate::dsp::{dct_matrix, mel_filterbank, mfcc, ComplexSpectrogram, MfccConfig, MfccFrames, StftConfig, Waveform, LOG_FLOOR};
use crate::enhancer::{self, Conditioning, EnhancerConfig};
use crate::losses::{spectral_l1_graph, LossConfig};
use crate::nn::{load_checkpoint, save_checkpoint, ParamStore, Scalar, Tape, Tensor, Var};
use crate::pbdr::PlacementConfig;
use crate::{Error, Result};

/// Parameter prefix of the frozen first-stage enhancer in two-stage models.
pub const STAGE1_PREFIX: &str = "stage1.enhancer.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Enhancer only.
    Baseline,
    /// Posterior features appended as extra encoder channels.
    Concat,
    /// Enhancer followed by a pretrained classifier on its output.
    Cascade,
    /// Posterior-driven modulation of one encoder layer.
    Pbdr,
    /// Posteriors computed from a frozen first-stage enhancement drive the
    /// modulation of a second enhancer.
    EPbdr,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::Concat, Variant::Cascade, Variant::Pbdr, Variant::EPbdr];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Concat => "concat",
            Variant::Cascade => "cascade",
            Variant::Pbdr => "pbdr",
            Variant::EPbdr => "e_pbdr",
        }
    }

    pub fn has_classifier(&self) -> bool {
        *self != Variant::Baseline
    }

    pub fn needs_placement(&self) -> bool {
        matches!(self, Variant::Concat | Variant::Pbdr | Variant::EPbdr)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub placement: Option<u8>,
    pub enhancer: EnhancerConfig,
    pub classifier: ClassifierConfig,
    pub mapper_hidden: usize,
    pub concat_channels: usize,
    pub stft: StftConfig,
    pub mfcc: MfccConfig,
}

impl ModelConfig {
    pub fn new(variant: Variant, placement: Option<u8>) -> Self {
        Self {
            variant,
            placement,
            enhancer: EnhancerConfig::default(),
            classifier: ClassifierConfig::default(),
            mapper_hidden: 128,
            concat_channels: 8,
            stft: StftConfig::default(),
            mfcc: MfccConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.variant.needs_placement(), self.placement) {
            (true, None) => return Err(Error::config(format!("variant {} requires a placement", self.variant))),
            (false, Some(_)) => {
                return Err(Error::config(format!("variant {} does not take a placement", self.variant)))
            }
            (true, Some(p)) => {
                PlacementConfig::new(p)?;
            }
            (false, None) => {}
        }
        self.stft.validate()?;
        self.mfcc.validate()?;
        self.enhancer_config()?.validate()?;
        if self.variant.has_classifier() {
            self.classifier.validate()?;
            if self.classifier.n_coeffs != self.mfcc.n_coeffs {
                return Err(Error::config("classifier input width must equal the MFCC coefficient count"));
            }
            if self.mfcc.hop_len() != self.stft.hop_len() || self.mfcc.center_pad != self.stft.center_pad {
                return Err(Error::config("MFCC and STFT framing must share hop and padding"));
            }
        }
        Ok(())
    }

    /// Enhancer config with the variant's conditioning hook filled in.
    pub fn enhancer_config(&self) -> Result<EnhancerConfig> {
        let placement = self.placement.map(PlacementConfig::new).transpose()?;
        let conditioning = match (self.variant, placement) {
            (Variant::Pbdr | Variant::EPbdr, Some(placement)) => {
                Conditioning::Pbdr { placement, hidden: self.mapper_hidden }
            }
            (Variant::Concat, Some(placement)) => Conditioning::Concat { placement, channels: self.concat_channels },
            _ => Conditioning::None,
        };
        Ok(EnhancerConfig { conditioning, ..self.enhancer.clone() })
    }

    fn stage1_config(&self) -> EnhancerConfig {
        EnhancerConfig { conditioning: Conditioning::None, ..self.enhancer.clone() }
    }
}

/// Independent generator per component so variants that share a seed also
/// share the enhancer initialization.
pub fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_ENHANCER: u64 = 1;
const STREAM_CLASSIFIER: u64 = 2;
const STREAM_CONDITIONING: u64 = 3;

/// Configuration plus every parameter a variant needs.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    config: ModelConfig,
    params: ParamStore<f32>,
}

impl ModelBundle {
    /// Fresh parameters. Two-stage variants copy `stage1` (a baseline
    /// enhancer's parameters) under [`STAGE1_PREFIX`].
    pub fn build(config: ModelConfig, seed: u64, stage1: Option<&ParamStore<f32>>) -> Result<Self> {
        config.validate()?;
        let enh = config.enhancer_config()?;
        let mut params = ParamStore::new();
        enhancer::init_params(&enh, enhancer::PREFIX, &mut params, &mut component_rng(seed, STREAM_ENHANCER))?;
        if config.variant.has_classifier() {
            classifier::init_params(&config.classifier, &mut params, &mut component_rng(seed, STREAM_CLASSIFIER))?;
            enhancer::init_conditioning(
                &enh,
                config.stft.bins(),
                config.classifier.n_classes,
                &mut params,
                &mut component_rng(seed, STREAM_CONDITIONING),
            );
        }
        if config.variant == Variant::EPbdr {
            let stage1 = stage1.ok_or_else(|| Error::config("variant e_pbdr requires a stage-1 checkpoint"))?;
            let mut expected = ParamStore::<f32>::new();
            enhancer::init_params(&config.stage1_config(), enhancer::PREFIX, &mut expected, &mut component_rng(0, 0))?;
            for (name, t) in expected.iter() {
                let got = stage1
                    .get(name)
                    .ok_or_else(|| Error::config(format!("stage-1 parameters lack '{name}'")))?;
                if got.shape() != t.shape() {
                    return Err(Error::config(format!(
                        "stage-1 '{name}' has shape {:?}, expected {:?}",
                        got.shape(),
                        t.shape()
                    )));
                }
            }
            params.merge(stage1.extract_prefix(enhancer::PREFIX, STAGE1_PREFIX));
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    /// Writes a checkpoint whose metadata holds the model config under
    /// `"model"` merged with `extra`; returns the parameter blob hash.
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<String> {
        let mut meta = serde_json::Map::new();
        meta.insert("model".into(), serde_json::to_value(&self.config)?);
        if let serde_json::Value::Object(m) = extra {
            meta.extend(m);
        }
        save_checkpoint(dir, &self.params, serde_json::Value::Object(meta))
    }

    /// Loads a bundle and returns it with its metadata and blob hash.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value, String)> {
        let ck = load_checkpoint(dir)?;
        let model = ck.meta.get("model").cloned().ok_or_else(|| Error::Checkpoint {
            path: dir.to_path_buf(),
            msg: "metadata has no model config".into(),
        })?;
        let config: ModelConfig = serde_json::from_value(model)?;
        Ok((Self::from_parts(config, ck.params)?, ck.meta, ck.sha256))
    }
}

/// Full inference: STFT, optional classifier and conditioning, enhancer,
/// inverse STFT. The output has the input's length.
pub fn enhance_waveform(c: &Waveform, bundle: &ModelBundle) -> Result<Waveform> {
    let runner = Runner::<f32>::new(bundle.config())?;
    let ex = runner.prepare(bundle.params(), "input", c)?;
    Ok(runner.infer(bundle.params(), &ex)?.waveform)
}

/// Per-utterance inputs derived from the noisy waveform.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub noisy: Waveform,
    pub spec: ComplexSpectrogram,
    /// Unstandardized classifier features when computed outside the graph.
    pub features: Option<MfccFrames>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Estimated spectrum `[T, F, 2]`.
    pub spec: Var,
    /// Posteriors `[T, L]` where the variant has a classifier.
    pub probs: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub spectral: Var,
    pub phoneme: Option<Var>,
}

/// Multipliers applied to the summed loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub spectral: f64,
    pub phoneme: f64,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub spec: ComplexSpectrogram,
    pub waveform: Waveform,
    pub probs: Option<ProbMatrix>,
}

/// Graph builder for one model config at precision `T`.
pub struct Runner<T: Scalar> {
    cfg: ModelConfig,
    enh: EnhancerConfig,
    stft_kernel: Arc<FrameKernel<T>>,
    mfcc_kernel: Arc<FrameKernel<T>>,
    mel: Tensor<T>,
    dct: Vec<f64>,
}

impl<T: Scalar> Runner<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let bins = cfg.mfcc.fft_size() / 2 + 1;
        Ok(Self {
            enh: cfg.enhancer_config()?,
            stft_kernel: Arc::new(cfg.stft.kernel()?),
            mfcc_kernel: Arc::new(cfg.mfcc.kernel()?),
            mel: Tensor::from_f64([bins, cfg.mfcc.n_mels], &mel_filterbank(&cfg.mfcc))?,
            dct: dct_matrix(cfg.mfcc.n_mels, cfg.mfcc.n_coeffs),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn stft_kernel(&self) -> &Arc<FrameKernel<T>> {
        &self.stft_kernel
    }

    /// STFT of the noisy input plus whatever classifier features the variant
    /// computes outside the graph (running the frozen first stage if needed).
    pub fn prepare(&self, params: &ParamStore<T>, id: &str, noisy: &Waveform) -> Result<Prepared> {
        let spec = crate::dsp::stft(noisy, &self.cfg.stft)?;
        let features = match self.cfg.variant {
            Variant::Pbdr | Variant::Concat => Some(mfcc(noisy, &self.cfg.mfcc)?),
            Variant::EPbdr => Some(mfcc(&self.stage1_enhance(params, &spec)?, &self.cfg.mfcc)?),
            Variant::Baseline | Variant::Cascade => None,
        };
        if let Some(f) = &features {
            if f.frames() != spec.frames() {
                return Err(Error::Alignment {
                    context: format!("utterance {id}"),
                    left_name: "spectrogram",
                    left: spec.frames(),
                    right_name: "mfcc",
                    right: f.frames(),
                });
            }
        }
        Ok(Prepared { id: id.to_string(), noisy: noisy.clone(), spec, features })
    }

    /// The waveform whose MFCCs feed the classifier: the noisy input, the
    /// frozen first-stage estimate, or (cascade) the enhancer's own output.
    pub fn classifier_signal(&self, params: &ParamStore<T>, noisy: &Waveform) -> Result<Waveform> {
        match self.cfg.variant {
            Variant::EPbdr => self.stage1_enhance(params, &crate::dsp::stft(noisy, &self.cfg.stft)?),
            Variant::Cascade => Ok(self.infer(params, &self.prepare(params, "", noisy)?)?.waveform),
            _ => Ok(noisy.clone()),
        }
    }

    fn stage1_enhance(&self, params: &ParamStore<T>, spec: &ComplexSpectrogram) -> Result<Waveform> {
        let mut tape = Tape::new();
        let x = tape.input(spec.to_tensor());
        let mag = tape.input(spec.magnitude());
        let cfg = self.cfg.stage1_config();
        let s = enhancer::forward_graph(&mut tape, params, &cfg, STAGE1_PREFIX, x, mag, None)?;
        let est = ComplexSpectrogram::from_tensor(tape.value(s), self.cfg.stft.clone(), spec.signal_len())?;
        crate::dsp::istft(&est, &self.cfg.stft)
    }

    /// Standardized constant classifier input `[T, n_coeffs]`.
    fn classifier_input(&self, tape: &mut Tape<T>, params: &ParamStore<T>, feats: &MfccFrames) -> Result<Var> {
        let norm = MfccNormalizer::load(params)?;
        Ok(tape.input(Tensor::from_f64([feats.frames(), feats.n_coeffs()], &norm.apply(feats))?))
    }

    /// Differentiable standardized MFCC of a waveform on the tape.
    pub fn mfcc_graph(&self, tape: &mut Tape<T>, params: &ParamStore<T>, wave: Var) -> Result<Var> {
        let norm = MfccNormalizer::load(params)?;
        let (n_mels, n_c) = (self.cfg.mfcc.n_mels, self.cfg.mfcc.n_coeffs);
        let mut w = vec![0.0; n_mels * n_c];
        for m in 0..n_mels {
            for k in 0..n_c {
                w[m * n_c + k] = self.dct[m * n_c + k] * norm.inv_std[k];
            }
        }
        let b: Vec<f64> = (0..n_c).map(|k| -norm.mean[k] * norm.inv_std[k]).collect();
        let p = tape.power_spectrum(wave, &self.mfcc_kernel)?;
        let mel = tape.input(self.mel.clone());
        let m = tape.dense(p, mel, None)?;
        let lm = tape.log_floor(m, LOG_FLOOR);
        let w = tape.input(Tensor::from_f64([n_mels, n_c], &w)?);
        let b = tape.input(Tensor::from_f64([n_c], &b)?);
        tape.dense(lm, w, Some(b))
    }

    pub fn forward(&self, tape: &mut Tape<T>, params: &ParamStore<T>, ex: &Prepared) -> Result<ForwardVars> {
        let x = tape.input(ex.spec.to_tensor());
        let mag = tape.input(ex.spec.magnitude());
        let cls = &self.cfg.classifier;
        let mut probs = match (&ex.features, self.cfg.variant) {
            (Some(f), Variant::Pbdr | Variant::Concat | Variant::EPbdr) => {
                let xi = self.classifier_input(tape, params, f)?;
                Some(classifier::forward(tape, params, cls, xi)?)
            }
            (None, Variant::Pbdr | Variant::Concat | Variant::EPbdr) => {
                return Err(Error::invalid(format!("utterance {} was prepared without classifier features", ex.id)))
            }
            _ => None,
        };
        let spec = enhancer::forward_graph(tape, params, &self.enh, enhancer::PREFIX, x, mag, probs)?;
        if self.cfg.variant == Variant::Cascade {
            let wave = tape.istft(spec, &self.stft_kernel, ex.spec.signal_len())?;
            let xi = self.mfcc_graph(tape, params, wave)?;
            probs = Some(classifier::forward(tape, params, cls, xi)?);
        }
        Ok(ForwardVars { spec, probs })
    }

    /// Forward pass plus weighted loss against the clean spectrum (and labels
    /// where the variant classifies).
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        ex: &Prepared,
        clean: &ComplexSpectrogram,
        labels: Option<&PhonemeFrameLabels>,
        loss_cfg: &LossConfig,
        weights: LossWeights,
    ) -> Result<(ForwardVars, LossVars)> {
        let fw = self.forward(tape, params, ex)?;
        let target = tape.input(clean.to_tensor());
        let spectral =
            spectral_l1_graph(tape, fw.spec, target, &self.stft_kernel, ex.spec.signal_len(), loss_cfg)?;
        let mut total = tape.affine(spectral, weights.spectral, 0.0);
        let mut phoneme = None;
        if let (Some(p), Some(y)) = (fw.probs, labels) {
            if tape.shape(p)[0] != y.len() {
                return Err(Error::Alignment {
                    context: format!("utterance {}", ex.id),
                    left_name: "posteriors",
                    left: tape.shape(p)[0],
                    right_name: "labels",
                    right: y.len(),
                });
            }
            let nll = tape.nll(p, y.labels(), classifier::PROB_FLOOR)?;
            let scaled = tape.affine(nll, loss_cfg.lambda * weights.phoneme, 0.0);
            total = tape.add(total, scaled)?;
            phoneme = Some(nll);
        }
        Ok((fw, LossVars { total, spectral, phoneme }))
    }

    pub fn infer(&self, params: &ParamStore<T>, ex: &Prepared) -> Result<Inference> {
        let mut tape = Tape::new();
        let fw = self.forward(&mut tape, params, ex)?;
        let spec = ComplexSpectrogram::from_tensor(tape.value(fw.spec), self.cfg.stft.clone(), ex.spec.signal_len())?;
        let waveform = crate::dsp::istft(&spec, &self.cfg.stft)?;
        let probs = fw.probs.map(|p| ProbMatrix::from_tensor(tape.value(p))).transpose()?;
        Ok(Inference { spec, waveform, probs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_rules() {
        assert!(ModelConfig::new(Variant::Pbdr, None).validate().is_err());
        assert!(ModelConfig::new(Variant::Baseline, Some(1)).validate().is_err());
        assert!(ModelConfig::new(Variant::Pbdr, Some(3)).validate().is_err());
        assert!(ModelConfig::new(Variant::Concat, Some(1)).validate().is_ok());
    }

    #[test]
    fn e_pbdr_needs_stage1() {
        let err = ModelBundle::build(ModelConfig::new(Variant::EPbdr, Some(2)), 0, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
