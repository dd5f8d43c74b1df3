//! Variant comparison across seeds on a shared corpus.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::Variant;
use crate::pipeline::config::RunConfig;
use crate::pipeline::corpus::{Corpus, Split};
use crate::pipeline::evaluate::{evaluate_utterances, MetricsReport, ReportMeta};
use crate::pipeline::train::{train_bundle, TrainObserver};
use crate::pipeline::build_variant;
use crate::{Error, Result};

pub const ROWS_FILE: &str = "ablation.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationEntry {
    pub variant: Variant,
    #[serde(default)]
    pub placement: Option<u8>,
}

impl AblationEntry {
    /// Row label such as `baseline` or `pbdr_2`.
    pub fn label(&self) -> String {
        match self.placement {
            Some(p) => format!("{}_{p}", self.variant),
            None => self.variant.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationEntry>,
    /// Shared settings; variant, placement, seed and stage-1 path are set per run.
    #[serde(default)]
    pub base: RunConfig,
}

impl AblationConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: AblationConfig = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.runs.is_empty() {
            return Err(Error::config("ablation needs at least one seed and one run"));
        }
        let labels: Vec<String> = self.runs.iter().map(|r| r.label()).collect();
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::config(format!("run '{l}' listed twice")));
            }
        }
        let has_baseline = self.runs.iter().any(|r| r.variant == Variant::Baseline);
        if self.runs.iter().any(|r| r.variant == Variant::EPbdr) && !has_baseline {
            return Err(Error::config("e_pbdr runs need a baseline run to serve as stage 1"));
        }
        for r in &self.runs {
            self.run_config(r, 0, None)?;
        }
        Ok(())
    }

    /// Configuration of one (entry, seed) cell; `stage1` is that seed's baseline checkpoint.
    pub fn run_config(&self, e: &AblationEntry, seed: u64, stage1: Option<PathBuf>) -> Result<RunConfig> {
        let rc = RunConfig {
            variant: e.variant,
            placement: e.placement,
            seed,
            stage1_checkpoint: if e.variant == Variant::EPbdr {
                Some(stage1.unwrap_or_else(|| PathBuf::from("stage1")))
            } else {
                None
            },
            ..self.base.clone()
        };
        rc.validate()?;
        Ok(rc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run: String,
    pub variant: String,
    pub placement: Option<u8>,
    pub seed: u64,
    pub ssnr: f64,
    pub snr: f64,
    pub top1: Option<f64>,
    pub top3: Option<f64>,
    pub spectral_loss: f64,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub run: String,
    pub seeds: usize,
    pub median_ssnr: f64,
    pub median_snr: f64,
    pub median_top1: Option<f64>,
    /// Median SSNR minus the baseline's median SSNR.
    pub delta_ssnr_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn summary_for(&self, run: &str) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.run == run)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize(rows: &[AblationRow], order: &[String]) -> Vec<AblationSummary> {
    let mut out: Vec<AblationSummary> = order
        .iter()
        .filter_map(|run| {
            let rs: Vec<&AblationRow> = rows.iter().filter(|r| &r.run == run).collect();
            if rs.is_empty() {
                return None;
            }
            let col = |f: &dyn Fn(&AblationRow) -> f64| median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let top1: Option<Vec<f64>> = rs.iter().map(|r| r.top1).collect();
            Some(AblationSummary {
                run: run.clone(),
                seeds: rs.len(),
                median_ssnr: col(&|r| r.ssnr),
                median_snr: col(&|r| r.snr),
                median_top1: top1.map(|v| median(&v)),
                delta_ssnr_vs_baseline: None,
            })
        })
        .collect();
    if let Some(base) = out.iter().find(|s| s.run == "baseline").map(|s| s.median_ssnr) {
        for s in &mut out {
            s.delta_ssnr_vs_baseline = Some(s.median_ssnr - base);
        }
    }
    out
}

/// Progress callbacks for long ablations.
pub trait AblationObserver: TrainObserver {
    fn run_started(&mut self, _run: &str, _seed: u64) {}
    fn run_finished(&mut self, _row: &AblationRow) {}
}

/// Trains and evaluates every (run, seed) pair, writing each run under
/// `out/<run>_s<seed>/` plus `ablation.csv` and `summary.csv` in `out`.
/// Baselines train first so e_pbdr can use the same seed's baseline as stage 1.
pub fn run_ablation(
    cfg: &AblationConfig,
    corpus: &Corpus,
    out: &Path,
    observer: &mut dyn AblationObserver,
) -> Result<AblationTable> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let train = corpus.load_split(Split::Train)?;
    let test = corpus.load_split(Split::Test)?;
    let mut order: Vec<&AblationEntry> = cfg.runs.iter().filter(|r| r.variant == Variant::Baseline).collect();
    order.extend(cfg.runs.iter().filter(|r| r.variant != Variant::Baseline));
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut baseline_ckpt: Option<PathBuf> = None;
        for e in &order {
            let label = e.label();
            observer.run_started(&label, seed);
            let rc = cfg.run_config(e, seed, baseline_ckpt.clone())?;
            let dir = out.join(format!("{label}_s{seed}"));
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("run.toml"), rc.to_toml_string()?)?;
            let bundle = build_variant(&rc, Some(corpus.info.n_classes))?;
            let trained = train_bundle(&rc, bundle, &train, &dir, &mut *observer)?;
            if e.variant == Variant::Baseline {
                baseline_ckpt = Some(trained.checkpoint.clone());
            }
            let report: MetricsReport = evaluate_utterances(
                &trained.bundle,
                &test,
                Split::Test,
                &rc.loss_config(),
                ReportMeta { seed: Some(seed), checkpoint_sha256: Some(trained.sha256.clone()) },
            )?;
            report.write(&dir.join("eval"))?;
            let row = AblationRow {
                run: label,
                variant: e.variant.to_string(),
                placement: e.placement,
                seed,
                ssnr: report.mean.ssnr,
                snr: report.mean.snr,
                top1: report.mean.top1,
                top3: report.mean.top3,
                spectral_loss: report.mean.spectral_loss,
                checkpoint_sha256: trained.sha256,
            };
            observer.run_finished(&row);
            rows.push(row);
        }
    }
    let labels: Vec<String> = cfg.runs.iter().map(|r| r.label()).collect();
    let summary = summarize(&rows, &labels);
    let mut wr = csv::Writer::from_path(out.join(ROWS_FILE))?;
    for r in &rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    let mut wr = csv::Writer::from_path(out.join(SUMMARY_FILE))?;
    for s in &summary {
        wr.serialize(s)?;
    }
    wr.flush()?;
    Ok(AblationTable { rows, summary })
}
