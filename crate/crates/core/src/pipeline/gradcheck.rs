//! Finite-difference check of the full training loss on a micro model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{ClassifierConfig, MfccNormalizer, PhonemeFrameLabels};
use crate::dsp::{mfcc, stft, Waveform, SAMPLE_RATE};
use crate::enhancer::EnhancerConfig;
use crate::losses::LossConfig;
use crate::model::{LossWeights, ModelBundle, ModelConfig, Runner, Variant, STAGE1_PREFIX};
use crate::nn::{grad_check_sampled, GradCheckReport, ParamStore, Tape};
use crate::Result;

/// Tiny configuration: 2/3/3 channels, one residual block, three classes.
pub fn micro_config(variant: Variant, placement: Option<u8>) -> ModelConfig {
    let mut cfg = ModelConfig::new(variant, placement);
    cfg.enhancer = EnhancerConfig { channels: [2, 3, 3], res_blocks: 1, ..Default::default() };
    cfg.classifier = ClassifierConfig {
        n_coeffs: 13,
        bank_size: 2,
        bank_channels: 4,
        proj_channels: 4,
        highway_layers: 2,
        highway_width: 4,
        gru_hidden: 4,
        n_classes: 3,
    };
    cfg.mapper_hidden = 4;
    cfg.concat_channels = 2;
    cfg
}

fn uniform_noise(seed: u64, n: usize, amp: f64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..n).map(|_| amp * rng.gen_range(-1.0..1.0)).collect(), SAMPLE_RATE)
}

fn is_trainable(name: &str) -> bool {
    !name.starts_with(STAGE1_PREFIX) && !MfccNormalizer::param_names().contains(&name)
}

/// Moves every trainable parameter by up to ±0.3: zero biases and the
/// identity mapper leave some gradients below finite-difference resolution.
pub fn perturb(params: &mut ParamStore<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.names().filter(|n| is_trainable(n)).cloned().collect();
    for n in names {
        for v in params.get_mut(&n).expect("listed").data_mut() {
            *v += rng.gen_range(-0.3f32..0.3);
        }
    }
}

/// Checks `sample_per_param` entries of every trainable parameter of a micro
/// model (six frames of noise) at the point selected by `point`.
pub fn check_model_gradients(
    variant: Variant,
    placement: Option<u8>,
    point: u64,
    eps: f64,
    sample_per_param: usize,
) -> Result<GradCheckReport> {
    let cfg = micro_config(variant, placement);
    let stage1 = match variant {
        Variant::EPbdr => Some(ModelBundle::build(micro_config(Variant::Baseline, None), 3, None)?.params().clone()),
        _ => None,
    };
    let mut bundle = ModelBundle::build(cfg.clone(), 7, stage1.as_ref())?;
    perturb(bundle.params_mut(), point);
    // 5 hops -> 6 frames
    let clean = uniform_noise(1, 800, 0.3)?;
    let noisy = uniform_noise(2, 800, 0.3)?;
    let runner = Runner::<f64>::new(&cfg)?;
    if variant.has_classifier() {
        // statistics of whatever signal the classifier actually sees
        let heard = runner.classifier_signal(&bundle.params().cast(), &noisy)?;
        MfccNormalizer::fit(&[mfcc(&heard, &cfg.mfcc)?])?.store(bundle.params_mut());
    }
    let params: ParamStore<f64> = bundle.params().cast();
    let ex = runner.prepare(&params, "micro", &noisy)?;
    let target = stft(&clean, &cfg.stft)?;
    let frames = target.frames();
    let labels = PhonemeFrameLabels::new("micro", (0..frames).map(|t| [0, 1, 2, 2, 1, 0][t % 6]).collect(), 3)?;
    let weights = LossWeights { spectral: 1.0 / (frames * cfg.stft.bins() * 2) as f64, phoneme: 1.0 / frames as f64 };
    let mut trainable = ParamStore::new();
    for (k, v) in params.iter().filter(|(k, _)| is_trainable(k)) {
        trainable.insert(k.clone(), v.clone());
    }
    grad_check_sampled(&trainable, eps, sample_per_param, |tape: &mut Tape<f64>, p: &ParamStore<f64>| {
        let mut all = params.clone();
        for (k, v) in p.iter() {
            all.insert(k.clone(), v.clone());
        }
        let (_, l) = runner.loss(tape, &all, &ex, &target, Some(&labels), &LossConfig::default(), weights)?;
        Ok(l.total)
    })
}
