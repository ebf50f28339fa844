use std::path::Path;

use xdseg::data::load_volume;
use xdseg::metrics::{evaluate, MetricReport, ScoreScales};

use crate::error::{CliError, Result};

/// Metric report for `class` of a segmentation against a reference.
pub fn cmd_metrics(seg: &Path, reference: &Path, class: usize, scales: &ScoreScales, physical: bool) -> Result<MetricReport> {
    let s = load_volume(seg).map_err(|e| CliError::data(seg, e))?;
    let r = load_volume(reference).map_err(|e| CliError::data(reference, e))?;
    Ok(evaluate(&s, &r, class, scales, physical)?)
}
