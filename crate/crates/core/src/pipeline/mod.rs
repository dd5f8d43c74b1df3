//! Corpus synthesis, run configuration, training, evaluation and ablation.

pub mod ablation;
pub mod config;
pub mod corpus;
pub mod evaluate;
pub mod gradcheck;
pub mod train;

pub use ablation::{run_ablation, AblationConfig, AblationEntry, AblationObserver, AblationRow, AblationTable};
pub use config::{build_variant, RunConfig};
pub use corpus::{synth_toy_corpus, Corpus, ManifestRow, NoiseKind, Split, ToyCorpusConfig, Utterance};
pub use evaluate::{evaluate, evaluate_utterances, MetricsReport, ReportMeta, UtteranceMetrics};
pub use train::{train, train_bundle, Quiet, TrainObserver, TrainOutcome};
