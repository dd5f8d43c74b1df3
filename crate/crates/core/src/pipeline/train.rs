//! Deterministic mini-batch training with Adam and periodic checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::classifier::{self, MfccNormalizer, PhonemeFrameLabels, PROB_FLOOR};
use crate::dsp::{mfcc, stft, ComplexSpectrogram, MfccFrames};
use crate::model::{component_rng, LossWeights, ModelBundle, Prepared, Runner, Variant};
use crate::nn::{adam_step, AdamState, Tape, Tensor};
use crate::pipeline::config::{build_variant, RunConfig};
use crate::pipeline::corpus::{Corpus, Split, Utterance};
use crate::{Error, Result};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOG_FILE: &str = "train_log.csv";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.csv";

const STREAM_PRETRAIN: u64 = 4;
const STREAM_SHUFFLE: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub spectral: f64,
    pub phoneme: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub checkpoint: PathBuf,
    pub sha256: String,
    pub steps: usize,
    pub history: Vec<StepRecord>,
}

/// Progress notifications; all no-ops by default.
pub trait TrainObserver {
    fn pretrain_done(&mut self, _steps: usize, _last_loss: f64) {}
    fn epoch_done(&mut self, _epoch: usize, _last: &StepRecord) {}
}

pub struct Quiet;

impl TrainObserver for Quiet {}

impl crate::pipeline::ablation::AblationObserver for Quiet {}

type GradMap = BTreeMap<String, Tensor<f32>>;

fn accumulate(acc: &mut GradMap, g: GradMap) {
    for (k, v) in g {
        match acc.get_mut(&k) {
            Some(a) => a.data_mut().iter_mut().zip(v.data()).for_each(|(x, y)| *x += *y),
            None => {
                acc.insert(k, v);
            }
        }
    }
}

fn batches(n: usize, batch: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn check_frames(id: &str, spec: &ComplexSpectrogram, labels: &PhonemeFrameLabels) -> Result<()> {
    if spec.frames() != labels.len() {
        return Err(Error::Alignment {
            context: format!("utterance {id}"),
            left_name: "spectrogram",
            left: spec.frames(),
            right_name: "labels",
            right: labels.len(),
        });
    }
    Ok(())
}

/// MFCCs of the signal the classifier is pretrained on: clean speech for the
/// cascade, otherwise the signal it hears at inference.
fn pretrain_features(runner: &Runner<f32>, bundle: &ModelBundle, utts: &[Utterance]) -> Result<Vec<MfccFrames>> {
    let cfg = bundle.config();
    utts.iter()
        .map(|u| {
            let heard = match cfg.variant {
                Variant::Cascade => u.clean.clone(),
                _ => runner.classifier_signal(bundle.params(), &u.noisy)?,
            };
            mfcc(&heard, &cfg.mfcc)
        })
        .collect()
}

fn pretrain_classifier(
    rc: &RunConfig,
    bundle: &mut ModelBundle,
    feats: &[MfccFrames],
    labels: &[&PhonemeFrameLabels],
    log: &Path,
) -> Result<Option<f64>> {
    if rc.pretrain_steps == 0 {
        return Ok(None);
    }
    let cls = bundle.config().classifier.clone();
    let norm = MfccNormalizer::load(bundle.params())?;
    let inputs: Vec<Tensor<f32>> = feats
        .iter()
        .map(|f| Tensor::from_f64([f.frames(), f.n_coeffs()], &norm.apply(f)))
        .collect::<Result<_>>()?;
    let mut adam = AdamState::<f32>::new(rc.lr_classifier);
    let mut rng = component_rng(rc.seed, STREAM_PRETRAIN);
    let mut wr = csv::Writer::from_path(log)?;
    wr.write_record(["step", "phoneme"])?;
    let mut step = 0;
    let last = 'outer: loop {
        for batch in batches(inputs.len(), rc.batch_size, &mut rng) {
            let frames: usize = batch.iter().map(|&i| labels[i].len()).sum();
            let mut acc = GradMap::new();
            let mut loss = 0.0;
            for &i in &batch {
                let mut tape = Tape::new();
                let x = tape.input(inputs[i].clone());
                let p = classifier::forward(&mut tape, bundle.params(), &cls, x)?;
                let nll = tape.nll(p, labels[i].labels(), PROB_FLOOR)?;
                let scaled = tape.affine(nll, 1.0 / frames as f64, 0.0);
                loss += tape.value(scaled).data()[0] as f64;
                accumulate(&mut acc, tape.param_grads(&tape.backward(scaled)?));
            }
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite classifier loss at pretraining step {step}")));
            }
            adam_step(bundle.params_mut(), &acc, &mut adam)?;
            wr.write_record([step.to_string(), loss.to_string()])?;
            step += 1;
            if step == rc.pretrain_steps {
                break 'outer loss;
            }
        }
    };
    wr.flush()?;
    Ok(Some(last))
}

fn write_log_header(path: &Path, rc: &RunConfig, bundle: &ModelBundle) -> Result<File> {
    let mut f = File::create(path)?;
    for (k, v) in rc.flat_fields()? {
        writeln!(f, "# {k}={v}")?;
    }
    writeln!(f, "# effective.classifier.n_classes={}", bundle.config().classifier.n_classes)?;
    Ok(f)
}

fn save(bundle: &ModelBundle, rc: &RunConfig, dir: &Path, step: usize, epoch: usize) -> Result<String> {
    let meta = serde_json::json!({ "run": rc, "seed": rc.seed, "step": step, "epoch": epoch });
    bundle.save(dir, meta)
}

/// Trains `bundle` on `utts`, writing logs and checkpoints under `out_dir`.
///
/// Each step minimizes the batch mean of the spectral L1 (per spectral
/// element) plus `λ` times the mean frame cross-entropy.
pub fn train_bundle(
    rc: &RunConfig,
    mut bundle: ModelBundle,
    utts: &[Utterance],
    out_dir: &Path,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    rc.validate()?;
    if utts.is_empty() {
        return Err(Error::invalid("no training utterances"));
    }
    fs::create_dir_all(out_dir)?;
    let cfg = bundle.config().clone();
    let runner = Runner::<f32>::new(&cfg)?;
    let has_cls = cfg.variant.has_classifier();
    let labels: Vec<&PhonemeFrameLabels> = utts.iter().map(|u| &u.labels).collect();
    if has_cls {
        let l = cfg.classifier.n_classes;
        if let Some(u) = utts.iter().find(|u| u.labels.labels().iter().any(|&y| y >= l)) {
            return Err(Error::config(format!("utterance {} has labels outside the model's {l} classes", u.id)));
        }
    }

    if has_cls {
        let feats = pretrain_features(&runner, &bundle, utts)?;
        MfccNormalizer::fit(&feats)?.store(bundle.params_mut());
        if let Some(loss) = pretrain_classifier(rc, &mut bundle, &feats, &labels, &out_dir.join(PRETRAIN_LOG_FILE))? {
            observer.pretrain_done(rc.pretrain_steps, loss);
        }
    }

    let mut prepared: Vec<Prepared> = Vec::with_capacity(utts.len());
    let mut targets: Vec<ComplexSpectrogram> = Vec::with_capacity(utts.len());
    for u in utts {
        let ex = runner.prepare(bundle.params(), &u.id, &u.noisy)?;
        check_frames(&u.id, &ex.spec, &u.labels)?;
        targets.push(stft(&u.clean, &cfg.stft)?);
        prepared.push(ex);
    }

    let loss_cfg = rc.loss_config();
    let mut adam = AdamState::<f32>::new(rc.lr_enhancer).with_group(classifier::PREFIX, rc.lr_classifier);
    let mut rng = component_rng(rc.seed, STREAM_SHUFFLE);
    let ckpt = out_dir.join(CHECKPOINT_DIR);
    let mut log = csv::Writer::from_writer(write_log_header(&out_dir.join(LOG_FILE), rc, &bundle)?);
    if has_cls {
        log.write_record(["step", "epoch", "total", "spectral", "phoneme"])?;
    } else {
        log.write_record(["step", "epoch", "total", "spectral"])?;
    }
    let bins = cfg.stft.bins();
    let mut history = Vec::new();
    let mut step = 0usize;
    let mut epoch_done = 0usize;
    'train: for epoch in 0..rc.epochs {
        for batch in batches(utts.len(), rc.batch_size, &mut rng) {
            let frames: usize = batch.iter().map(|&i| prepared[i].spec.frames()).sum();
            let weights = LossWeights { spectral: 1.0 / (frames * bins * 2) as f64, phoneme: 1.0 / frames as f64 };
            let mut acc = GradMap::new();
            let (mut total, mut spectral, mut phoneme) = (0.0, 0.0, 0.0);
            for &i in &batch {
                let mut tape = Tape::new();
                let (_, l) = runner.loss(
                    &mut tape,
                    bundle.params(),
                    &prepared[i],
                    &targets[i],
                    Some(labels[i]),
                    &loss_cfg,
                    weights,
                )?;
                total += tape.value(l.total).data()[0] as f64;
                spectral += tape.value(l.spectral).data()[0] as f64 * weights.spectral;
                if let Some(p) = l.phoneme {
                    phoneme += tape.value(p).data()[0] as f64 * weights.phoneme;
                }
                accumulate(&mut acc, tape.param_grads(&tape.backward(l.total)?));
            }
            if !total.is_finite() {
                let kept = if ckpt.exists() { format!("; last good checkpoint kept at {}", ckpt.display()) } else { String::new() };
                return Err(Error::Training(format!("non-finite loss at step {step}{kept}")));
            }
            adam_step(bundle.params_mut(), &acc, &mut adam)?;
            let rec = StepRecord { step, epoch, total, spectral, phoneme: has_cls.then_some(phoneme) };
            let mut row = vec![step.to_string(), epoch.to_string(), total.to_string(), spectral.to_string()];
            if has_cls {
                row.push(phoneme.to_string());
            }
            log.write_record(&row)?;
            history.push(rec);
            step += 1;
            if rc.max_steps.is_some_and(|m| step >= m) {
                epoch_done = epoch + 1;
                observer.epoch_done(epoch, &rec);
                break 'train;
            }
        }
        log.flush()?;
        epoch_done = epoch + 1;
        if let Some(last) = history.last() {
            observer.epoch_done(epoch, last);
        }
        if epoch_done.is_multiple_of(rc.checkpoint_every) && epoch_done < rc.epochs {
            save(&bundle, rc, &ckpt, step, epoch_done)?;
        }
    }
    log.flush()?;
    let sha256 = save(&bundle, rc, &ckpt, step, epoch_done)?;
    Ok(TrainOutcome { bundle, checkpoint: ckpt, sha256, steps: step, history })
}

/// Builds the variant, loads the training split and trains it.
pub fn train(rc: &RunConfig, corpus: &Corpus, out_dir: &Path, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    let bundle = build_variant(rc, Some(corpus.info.n_classes))?;
    let utts = corpus.load_split(Split::Train)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("run.toml"), rc.to_toml_string()?)?;
    train_bundle(rc, bundle, &utts, out_dir, observer)
}
