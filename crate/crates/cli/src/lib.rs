//! Command implementations behind the `xdseg` binary: dataset synthesis,
//! training runs and sweeps, evaluation, activation analysis and
//! standalone metrics.

mod analyze;
mod config;
mod dataset;
mod error;
mod eval;
mod metrics;
mod synth;
mod train;

pub use analyze::{cmd_analyze, sample_kernels, AnalyzeSummary, KernelHistogram, KernelRef, SparsityRow};
pub use config::{
    AnalyzeSection, DiscriminatorSection, EvalSection, ExperimentConfig, Overrides, Sweep, SynthSection, UNetSection,
};
pub use dataset::{load_manifest, load_split, slice_samples, CaseVolume};
pub use error::{CliError, Result};
pub use eval::{cmd_eval, load_unet, EvalSummary, GroupSummary, Predictor, VolumeEvaluation};
pub use metrics::cmd_metrics;
pub use synth::cmd_synth;
pub use train::{cmd_train, initial_models};

