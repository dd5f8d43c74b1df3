//! Synthetic pseudo-phoneme corpus: formant-sinusoid utterances with frame
//! labels, mixed with white or pink noise at seeded SNRs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{read_alignment, write_alignment, PhonemeFrameLabels};
use crate::dsp::{mix_at_snr, power, read_wav, write_wav, StftConfig, Waveform, SAMPLE_RATE};
use crate::model::component_rng;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CORPUS_FILE: &str = "corpus.json";

const RAMP_MS: f64 = 10.0;
const CLIP_PEAK: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split '{s}' (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub n_classes: usize,
    /// Probability that a class gets a third formant.
    pub third_formant_prob: f64,
    pub min_utterance_s: f64,
    pub max_utterance_s: f64,
    pub min_segment_ms: f64,
    pub max_segment_ms: f64,
    pub rms: f64,
    pub noise: NoiseKind,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            third_formant_prob: 0.5,
            min_utterance_s: 1.0,
            max_utterance_s: 2.0,
            min_segment_ms: 80.0,
            max_segment_ms: 300.0,
            rms: 0.05,
            noise: NoiseKind::White,
            snr_min_db: -5.0,
            snr_max_db: 25.0,
            n_train: 200,
            n_test: 50,
            seed: 0,
        }
    }
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.third_formant_prob) {
            return bad("third_formant_prob must lie in [0, 1]");
        }
        if !(self.min_utterance_s > 0.0 && self.min_utterance_s <= self.max_utterance_s) {
            return bad("utterance length range is empty or non-positive");
        }
        if !(self.min_segment_ms > 0.0 && self.min_segment_ms <= self.max_segment_ms) {
            return bad("segment length range is empty or non-positive");
        }
        if self.min_segment_ms < 2.0 * RAMP_MS {
            return bad("segments must be at least 20 ms long");
        }
        if !(self.rms > 0.0 && self.rms < 0.5) {
            return bad("rms must lie in (0, 0.5)");
        }
        if !(self.snr_min_db.is_finite() && self.snr_max_db.is_finite() && self.snr_min_db <= self.snr_max_db) {
            return bad("snr range is invalid");
        }
        if self.n_train + self.n_test == 0 {
            return bad("corpus would be empty");
        }
        Ok(())
    }
}

/// Formant frequencies (Hz) and their relative amplitudes for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFormants {
    pub freqs: Vec<f64>,
    pub amps: Vec<f64>,
}

/// Stratified formant table: every class owns a distinct first-formant slot
/// in 200-900 Hz and a distinct (shuffled) second-formant slot in 900-2500 Hz.
pub fn formant_table(cfg: &ToyCorpusConfig) -> Vec<ClassFormants> {
    let mut rng = component_rng(cfg.seed, 0);
    let l = cfg.n_classes;
    let mut f2_slots: Vec<usize> = (0..l).collect();
    f2_slots.shuffle(&mut rng);
    (0..l)
        .map(|c| {
            let f1 = 200.0 + (c as f64 + rng.gen_range(0.25..0.75)) * 700.0 / l as f64;
            let f2 = 900.0 + (f2_slots[c] as f64 + rng.gen_range(0.25..0.75)) * 1600.0 / l as f64;
            let mut freqs = vec![f1, f2];
            let mut amps = vec![1.0, 0.7];
            if rng.gen_bool(cfg.third_formant_prob) {
                freqs.push(rng.gen_range(2500.0..3500.0));
                amps.push(0.4);
            }
            ClassFormants { freqs, amps }
        })
        .collect()
}

/// One clean utterance with its per-sample segment classes.
#[derive(Debug, Clone)]
pub struct CleanUtterance {
    pub clean: Waveform,
    /// `(start_sample, class)` for each segment, in order.
    pub segments: Vec<(usize, usize)>,
}

impl CleanUtterance {
    fn class_at(&self, sample: usize) -> usize {
        let i = self.segments.partition_point(|&(s, _)| s <= sample);
        self.segments[i.saturating_sub(1)].1
    }

    /// Label of each analysis frame: the segment holding the frame centre.
    pub fn frame_labels(&self, stft: &StftConfig) -> Result<Vec<usize>> {
        let n = self.clean.len();
        let t = stft.frame_count(n)?;
        let hop = stft.hop_len();
        Ok((0..t).map(|i| self.class_at((i * hop).min(n - 1))).collect())
    }
}

pub fn synth_clean(cfg: &ToyCorpusConfig, table: &[ClassFormants], rng: &mut ChaCha8Rng) -> Result<CleanUtterance> {
    let sr = SAMPLE_RATE as f64;
    let n = (rng.gen_range(cfg.min_utterance_s..=cfg.max_utterance_s) * sr).round() as usize;
    let ramp = (RAMP_MS * sr / 1000.0).round() as usize;
    let mut x = vec![0.0; n];
    let mut segments = Vec::new();
    let mut start = 0;
    let mut prev = usize::MAX;
    while start < n {
        let len = (rng.gen_range(cfg.min_segment_ms..=cfg.max_segment_ms) * sr / 1000.0).round() as usize;
        let end = (start + len).min(n);
        let mut class = rng.gen_range(0..cfg.n_classes);
        if class == prev {
            class = (class + rng.gen_range(1..cfg.n_classes)) % cfg.n_classes;
        }
        let f = &table[class];
        let gain = rng.gen_range(0.7..1.3);
        let phases: Vec<f64> = f.freqs.iter().map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let seg_len = end - start;
        for (i, v) in x[start..end].iter_mut().enumerate() {
            let edge = i.min(seg_len - 1 - i);
            let env = if edge < ramp { 0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos() } else { 1.0 };
            let t = i as f64 / sr;
            let s: f64 = f
                .freqs
                .iter()
                .zip(&f.amps)
                .zip(&phases)
                .map(|((fr, a), ph)| a * (std::f64::consts::TAU * fr * t + ph).sin())
                .sum();
            *v = gain * env * s;
        }
        segments.push((start, class));
        prev = class;
        start = end;
    }
    let scale = cfg.rms / power(&x).sqrt();
    x.iter_mut().for_each(|v| *v *= scale);
    Ok(CleanUtterance { clean: Waveform::new(x, SAMPLE_RATE)?, segments })
}

/// Unit-variance white noise, or pink noise from a fixed three-pole filter
/// rescaled to unit variance.
pub fn synth_noise(kind: NoiseKind, n: usize, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let out = match kind {
        NoiseKind::White => white,
        NoiseKind::Pink => {
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            let mut y: Vec<f64> = white
                .iter()
                .map(|&w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect();
            let s = power(&y).sqrt();
            y.iter_mut().for_each(|v| *v /= s);
            y
        }
    };
    Waveform::new(out, SAMPLE_RATE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub utterance_id: String,
    pub clean_path: String,
    pub noise_path: String,
    pub noisy_path: String,
    pub alignment_path: String,
    pub snr_db: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub n_classes: usize,
    pub sample_rate: u32,
    pub frame_hop: usize,
    pub config: ToyCorpusConfig,
    pub formants: Vec<ClassFormants>,
}

/// A corpus on disk: its description and manifest rows (paths relative to `root`).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub info: CorpusInfo,
    pub rows: Vec<ManifestRow>,
}

/// Loaded audio and labels for one manifest row.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub clean: Waveform,
    pub noisy: Waveform,
    pub labels: PhonemeFrameLabels,
    pub snr_db: f64,
}

impl Corpus {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let info: CorpusInfo = serde_json::from_str(&fs::read_to_string(root.join(CORPUS_FILE))?)?;
        let mut rd = csv::Reader::from_path(root.join(MANIFEST_FILE))?;
        let rows = rd.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        Ok(Self { root, info, rows })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn load_row(&self, row: &ManifestRow) -> Result<Utterance> {
        let clean = read_wav(self.root.join(&row.clean_path))?;
        let noisy = read_wav(self.root.join(&row.noisy_path))?;
        if clean.len() != noisy.len() {
            return Err(Error::invalid(format!(
                "utterance {}: clean has {} samples, noisy {}",
                row.utterance_id,
                clean.len(),
                noisy.len()
            )));
        }
        let labels = read_alignment(&self.root.join(&row.alignment_path), &row.utterance_id, self.info.n_classes)?;
        Ok(Utterance { id: row.utterance_id.clone(), clean, noisy, labels, snr_db: row.snr_db })
    }

    /// Every utterance of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Utterance>> {
        let rows: Vec<&ManifestRow> = self.split(split).collect();
        if rows.is_empty() {
            return Err(Error::invalid(format!("split '{split}' is empty")));
        }
        rows.par_iter().map(|r| self.load_row(r)).collect()
    }
}

/// Builds the waveforms and labels of utterance `index` (independent stream per utterance).
pub fn synth_utterance(
    cfg: &ToyCorpusConfig,
    table: &[ClassFormants],
    stft: &StftConfig,
    index: usize,
) -> Result<(CleanUtterance, Waveform, Waveform, Vec<usize>, f64)> {
    let mut rng = component_rng(cfg.seed, 1 + index as u64);
    let mut utt = synth_clean(cfg, table, &mut rng)?;
    let noise = synth_noise(cfg.noise, utt.clean.len(), &mut rng)?;
    let snr = rng.gen_range(cfg.snr_min_db..=cfg.snr_max_db);
    let mix = mix_at_snr(&utt.clean, &noise, snr, rng.gen())?;
    let (mut noisy, mut noise) = (mix.noisy, mix.noise);
    let peak = noisy.samples().iter().chain(utt.clean.samples()).fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > CLIP_PEAK {
        // one common gain keeps the SNR
        let g = CLIP_PEAK / peak;
        let scale = |w: &Waveform| Waveform::new(w.samples().iter().map(|v| v * g).collect(), SAMPLE_RATE);
        utt.clean = scale(&utt.clean)?;
        noise = scale(&noise)?;
        noisy = scale(&noisy)?;
    }
    let labels = utt.frame_labels(stft)?;
    Ok((utt, noise, noisy, labels, snr))
}

/// Writes `clean/`, `noise/`, `noisy/`, `align/`, `manifest.csv` and
/// `corpus.json` under `out`. Deterministic given the config.
pub fn synth_toy_corpus(cfg: &ToyCorpusConfig, stft: &StftConfig, out: impl AsRef<Path>) -> Result<Corpus> {
    cfg.validate()?;
    stft.validate()?;
    let root = out.as_ref().to_path_buf();
    for d in ["clean", "noise", "noisy", "align"] {
        fs::create_dir_all(root.join(d))?;
    }
    let table = formant_table(cfg);
    let jobs: Vec<(usize, Split, String)> = (0..cfg.n_train)
        .map(|i| (i, Split::Train, format!("train_{i:04}")))
        .chain((0..cfg.n_test).map(|i| (cfg.n_train + i, Split::Test, format!("test_{i:04}"))))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|(index, split, id)| {
            let (utt, noise, noisy, labels, snr) = synth_utterance(cfg, &table, stft, *index)?;
            let row = ManifestRow {
                utterance_id: id.clone(),
                clean_path: format!("clean/{id}.wav"),
                noise_path: format!("noise/{id}.wav"),
                noisy_path: format!("noisy/{id}.wav"),
                alignment_path: format!("align/{id}.txt"),
                snr_db: snr,
                split: *split,
            };
            write_wav(root.join(&row.clean_path), &utt.clean)?;
            write_wav(root.join(&row.noise_path), &noise)?;
            write_wav(root.join(&row.noisy_path), &noisy)?;
            write_alignment(&root.join(&row.alignment_path), &labels)?;
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let info = CorpusInfo {
        n_classes: cfg.n_classes,
        sample_rate: SAMPLE_RATE,
        frame_hop: stft.hop_len(),
        config: cfg.clone(),
        formants: table,
    };
    fs::write(root.join(CORPUS_FILE), serde_json::to_string_pretty(&info)?)?;
    let mut wr = csv::Writer::from_path(root.join(MANIFEST_FILE))?;
    for r in &rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(Corpus { root, info, rows })
}
