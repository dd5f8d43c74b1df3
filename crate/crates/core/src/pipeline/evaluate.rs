//! Per-utterance enhancement and classification metrics.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{topk_accuracy, ProbMatrix};
use crate::dsp::{istft, stft, ComplexSpectrogram};
use crate::losses::{snr_db, ssnr, LossConfig, SsnrConfig};
use crate::model::{LossWeights, ModelBundle, Runner};
use crate::nn::Tape;
use crate::pipeline::corpus::{Corpus, Split, Utterance};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub utterance_id: String,
    pub input_snr_db: f64,
    /// SSNR of the unprocessed noisy input.
    pub ssnr_noisy: f64,
    pub ssnr: f64,
    pub snr: f64,
    pub top1: Option<f64>,
    pub top3: Option<f64>,
    /// Spectral L1 per spectral element.
    pub spectral_loss: f64,
    /// Cross-entropy per frame.
    pub phoneme_loss: Option<f64>,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsMeans {
    pub ssnr_noisy: f64,
    pub ssnr: f64,
    pub snr: f64,
    pub top1: Option<f64>,
    pub top3: Option<f64>,
    pub spectral_loss: f64,
    pub phoneme_loss: Option<f64>,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub placement: Option<u8>,
    pub seed: Option<u64>,
    pub checkpoint_sha256: Option<String>,
    pub split: Split,
    pub utterances: usize,
    pub mean: MetricsMeans,
    #[serde(skip)]
    pub rows: Vec<UtteranceMetrics>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_opt<'a>(rows: &'a [UtteranceMetrics], f: impl Fn(&'a UtteranceMetrics) -> Option<f64>) -> Option<f64> {
    rows.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| mean(v.into_iter()))
}

impl MetricsMeans {
    pub fn of(rows: &[UtteranceMetrics]) -> Self {
        Self {
            ssnr_noisy: mean(rows.iter().map(|r| r.ssnr_noisy)),
            ssnr: mean(rows.iter().map(|r| r.ssnr)),
            snr: mean(rows.iter().map(|r| r.snr)),
            top1: mean_opt(rows, |r| r.top1),
            top3: mean_opt(rows, |r| r.top3),
            spectral_loss: mean(rows.iter().map(|r| r.spectral_loss)),
            phoneme_loss: mean_opt(rows, |r| r.phoneme_loss),
            total_loss: mean(rows.iter().map(|r| r.total_loss)),
        }
    }
}

impl MetricsReport {
    /// Writes `metrics.csv` (one row per utterance) and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut wr = csv::Writer::from_path(dir.join(METRICS_FILE))?;
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_rows(dir: &Path) -> Result<Vec<UtteranceMetrics>> {
        let mut rd = csv::Reader::from_path(dir.join(METRICS_FILE))?;
        Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
    }
}

/// Identification attached to a report.
#[derive(Debug, Clone, Default)]
pub struct ReportMeta {
    pub seed: Option<u64>,
    pub checkpoint_sha256: Option<String>,
}

fn evaluate_one(
    runner: &Runner<f32>,
    bundle: &ModelBundle,
    u: &Utterance,
    loss_cfg: &LossConfig,
    ssnr_cfg: &SsnrConfig,
) -> Result<UtteranceMetrics> {
    let cfg = bundle.config();
    let ex = runner.prepare(bundle.params(), &u.id, &u.noisy)?;
    if ex.spec.frames() != u.labels.len() {
        return Err(Error::Alignment {
            context: format!("utterance {}", u.id),
            left_name: "spectrogram",
            left: ex.spec.frames(),
            right_name: "labels",
            right: u.labels.len(),
        });
    }
    let target = stft(&u.clean, &cfg.stft)?;
    let frames = ex.spec.frames();
    let weights = LossWeights { spectral: 1.0 / (frames * cfg.stft.bins() * 2) as f64, phoneme: 1.0 / frames as f64 };
    let mut tape = Tape::new();
    let (fw, l) = runner.loss(&mut tape, bundle.params(), &ex, &target, Some(&u.labels), loss_cfg, weights)?;
    let spec = ComplexSpectrogram::from_tensor(tape.value(fw.spec), cfg.stft.clone(), u.noisy.len())?;
    let est = istft(&spec, &cfg.stft)?;
    let probs = fw.probs.map(|p| ProbMatrix::from_tensor(tape.value(p))).transpose()?;
    let (top1, top3) = match &probs {
        Some(p) => (
            Some(topk_accuracy(p, &u.labels, 1)?),
            if p.classes() >= 3 { Some(topk_accuracy(p, &u.labels, 3)?) } else { None },
        ),
        None => (None, None),
    };
    Ok(UtteranceMetrics {
        utterance_id: u.id.clone(),
        input_snr_db: u.snr_db,
        ssnr_noisy: ssnr(&u.clean, &u.noisy, ssnr_cfg)?,
        ssnr: ssnr(&u.clean, &est, ssnr_cfg)?,
        snr: snr_db(&u.clean, &est)?,
        top1,
        top3,
        spectral_loss: tape.value(l.spectral).data()[0] as f64 * weights.spectral,
        phoneme_loss: l.phoneme.map(|p| tape.value(p).data()[0] as f64 * weights.phoneme),
        total_loss: tape.value(l.total).data()[0] as f64,
    })
}

/// Scores `bundle` on the given utterances (rows in input order).
pub fn evaluate_utterances(
    bundle: &ModelBundle,
    utts: &[Utterance],
    split: Split,
    loss_cfg: &LossConfig,
    meta: ReportMeta,
) -> Result<MetricsReport> {
    if utts.is_empty() {
        return Err(Error::invalid(format!("split '{split}' is empty")));
    }
    let runner = Runner::<f32>::new(bundle.config())?;
    let ssnr_cfg = SsnrConfig::default();
    let rows = utts
        .par_iter()
        .map(|u| evaluate_one(&runner, bundle, u, loss_cfg, &ssnr_cfg))
        .collect::<Result<Vec<_>>>()?;
    let cfg = bundle.config();
    Ok(MetricsReport {
        variant: cfg.variant.to_string(),
        placement: cfg.placement,
        seed: meta.seed,
        checkpoint_sha256: meta.checkpoint_sha256,
        split,
        utterances: rows.len(),
        mean: MetricsMeans::of(&rows),
        rows,
    })
}

/// Loads a checkpoint and scores it on one split of a corpus. The loss
/// settings come from the run recorded in the checkpoint when present.
pub fn evaluate(checkpoint: &Path, corpus: &Corpus, split: Split) -> Result<MetricsReport> {
    let (bundle, meta, sha) = ModelBundle::load(checkpoint)?;
    let loss_cfg = meta
        .get("run")
        .map(|r| -> Result<LossConfig> {
            let rc: crate::pipeline::RunConfig = serde_json::from_value(r.clone())?;
            Ok(rc.loss_config())
        })
        .transpose()?
        .unwrap_or_default();
    let seed = meta.get("seed").and_then(|s| s.as_u64());
    let utts = corpus.load_split(split)?;
    evaluate_utterances(&bundle, &utts, split, &loss_cfg, ReportMeta { seed, checkpoint_sha256: Some(sha) })
}
