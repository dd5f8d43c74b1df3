use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pbdrnet::dsp::{read_wav, write_wav, StftConfig};
use pbdrnet::model::{enhance_waveform, ModelBundle, Variant};
use pbdrnet::pipeline::ablation::AblationObserver;
use pbdrnet::pipeline::gradcheck::check_model_gradients;
use pbdrnet::pipeline::train::StepRecord;
use pbdrnet::pipeline::{
    evaluate, run_ablation, synth_toy_corpus, train, AblationConfig, AblationRow, Corpus, NoiseKind, RunConfig,
    Split, ToyCorpusConfig, TrainObserver,
};

#[derive(Parser)]
#[command(name = "pbdrnet", version, about = "Phoneme-conditioned speech enhancement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a toy pseudo-phoneme corpus.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// TOML corpus config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_noise)]
        noise: Option<NoiseKind>,
    },
    /// Train one run.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance a single WAV file.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a checkpoint on one corpus split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full loss on a micro model.
    Gradcheck {
        #[arg(long, default_value = "pbdr")]
        variant: Variant,
        #[arg(long)]
        placement: Option<u8>,
        #[arg(long, default_value_t = 0)]
        point: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 12)]
        per_param: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train and evaluate several variants over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_noise(s: &str) -> std::result::Result<NoiseKind, String> {
    match s {
        "white" => Ok(NoiseKind::White),
        "pink" => Ok(NoiseKind::Pink),
        _ => Err(format!("unknown noise '{s}' (white or pink)")),
    }
}

struct Progress;

impl TrainObserver for Progress {
    fn pretrain_done(&mut self, steps: usize, last_loss: f64) {
        eprintln!("classifier pretraining: {steps} steps, final loss {last_loss:.4}");
    }

    fn epoch_done(&mut self, epoch: usize, last: &StepRecord) {
        match last.phoneme {
            Some(p) => eprintln!(
                "epoch {:>3} step {:>6}: total {:.5} spectral {:.5} phoneme {:.4}",
                epoch + 1,
                last.step + 1,
                last.total,
                last.spectral,
                p
            ),
            None => eprintln!("epoch {:>3} step {:>6}: total {:.5}", epoch + 1, last.step + 1, last.total),
        }
    }
}

impl AblationObserver for Progress {
    fn run_started(&mut self, run: &str, seed: u64) {
        eprintln!("== {run} seed {seed}");
    }

    fn run_finished(&mut self, row: &AblationRow) {
        eprintln!("== {} seed {}: test SSNR {:.3} dB, SNR {:.3} dB", row.run, row.seed, row.ssnr, row.snr);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::SynthData { out, config, n_train, n_test, seed, noise } => {
            let mut cfg = match config {
                Some(p) => toml::from_str(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => ToyCorpusConfig::default(),
            };
            cfg.n_train = n_train.unwrap_or(cfg.n_train);
            cfg.n_test = n_test.unwrap_or(cfg.n_test);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.noise = noise.unwrap_or(cfg.noise);
            let c = synth_toy_corpus(&cfg, &StftConfig::default(), &out)?;
            println!("wrote {} utterances to {}", c.rows.len(), out.display());
        }
        Cmd::Train { config, corpus, out } => {
            let rc = RunConfig::from_file(&config).with_context(|| format!("loading {}", config.display()))?;
            let corpus = Corpus::load(&corpus)?;
            let o = train(&rc, &corpus, &out, &mut Progress)?;
            println!("checkpoint {} ({} steps, sha256 {})", o.checkpoint.display(), o.steps, o.sha256);
        }
        Cmd::Enhance { checkpoint, input, output } => {
            let (bundle, _, _) = ModelBundle::load(&checkpoint)?;
            let x = read_wav(&input)?;
            write_wav(&output, &enhance_waveform(&x, &bundle)?)?;
        }
        Cmd::Evaluate { checkpoint, corpus, split, out } => {
            let report = evaluate(&checkpoint, &Corpus::load(&corpus)?, split)?;
            report.write(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Gradcheck { variant, placement, point, eps, per_param, tolerance } => {
            let placement = match (placement, variant) {
                (None, Variant::Pbdr | Variant::Concat | Variant::EPbdr) => Some(2),
                (p, _) => p,
            };
            let r = check_model_gradients(variant, placement, point, eps, per_param)?;
            println!("checked {} entries, max relative error {:.3e}", r.checked, r.max_rel_error);
            if let Some((name, i, a, n)) = &r.worst {
                println!("worst: {name}[{i}] analytic {a:.6e} numeric {n:.6e}");
            }
            if !(r.max_rel_error < tolerance) {
                bail!("max relative error {:.3e} exceeds {tolerance:.1e}", r.max_rel_error);
            }
        }
        Cmd::Ablate { config, corpus, out } => {
            let cfg = AblationConfig::from_file(&config).with_context(|| format!("loading {}", config.display()))?;
            let table = run_ablation(&cfg, &Corpus::load(&corpus)?, &out, &mut Progress)?;
            println!("{:<12} {:>5} {:>12} {:>12} {:>10} {:>14}", "run", "seeds", "median SSNR", "median SNR", "top-1", "dSSNR vs base");
            for s in &table.summary {
                let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
                println!(
                    "{:<12} {:>5} {:>12.3} {:>12.3} {:>10} {:>14}",
                    s.run,
                    s.seeds,
                    s.median_ssnr,
                    s.median_snr,
                    fmt(s.median_top1, 3),
                    fmt(s.delta_ssnr_vs_baseline, 3)
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
