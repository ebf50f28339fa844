use std::collections::BTreeSet;

use xdseg::data::{load_volume, rescale_contrast, stack_slices, Manifest, SliceSample, Split, Volume};
use xdseg::training::UNTAGGED;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// A manifest entry read from disk with its intensities rescaled.
#[derive(Debug, Clone)]
pub struct CaseVolume {
    /// File stem of the intensity volume.
    pub id: String,
    pub domain_tag: Option<String>,
    pub image: Volume,
    pub label: Volume,
}

impl CaseVolume {
    /// Reporting group: the domain tag, or `untagged`.
    pub fn group(&self) -> &str {
        self.domain_tag.as_deref().unwrap_or(UNTAGGED)
    }
}

pub fn load_manifest(config: &ExperimentConfig) -> Result<Manifest> {
    let path = config.manifest_path()?;
    Manifest::load(path).map_err(|e| CliError::data(path, e))
}

/// Loads every `split` entry of the manifest, in manifest order.
pub fn load_split(config: &ExperimentConfig, manifest: &Manifest, split: Split) -> Result<Vec<CaseVolume>> {
    let [lo, hi] = config.rescale_percentiles;
    let mut seen = BTreeSet::new();
    let mut cases = Vec::new();
    for entry in manifest.split(split) {
        let id = entry
            .intensity_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !seen.insert(id.clone()) {
            return Err(CliError::contract(format!("duplicate volume id {id:?} in manifest")));
        }
        let image = load_volume(&entry.intensity_path).map_err(|e| CliError::data(&entry.intensity_path, e))?;
        let label = load_volume(&entry.label_path).map_err(|e| CliError::data(&entry.label_path, e))?;
        if image.extents() != label.extents() {
            return Err(CliError::contract(format!(
                "{id}: intensity extents {:?} differ from label extents {:?}",
                image.extents(),
                label.extents()
            )));
        }
        label
            .check_labels(config.num_classes)
            .map_err(|e| CliError::contract(format!("{}: {e}", entry.label_path.display())))?;
        let image = rescale_contrast(&image, lo, hi).map_err(|e| CliError::contract(format!("{id}: {e}")))?;
        cases.push(CaseVolume {
            id,
            domain_tag: entry.domain_tag.clone(),
            image,
            label,
        });
    }
    Ok(cases)
}

/// One training sample per slice of every case.
pub fn slice_samples(config: &ExperimentConfig, cases: &[CaseVolume]) -> Result<Vec<SliceSample>> {
    let mut samples = Vec::new();
    for case in cases {
        let stacked = stack_slices(&case.image, &case.label, config.slice_context, config.num_classes)
            .map_err(|e| CliError::contract(format!("{}: {e}", case.id)))?;
        samples.extend(stacked.into_iter().map(|mut s| {
            s.domain_tag = case.domain_tag.clone();
            s.volume_id = case.id.clone();
            s
        }));
    }
    Ok(samples)
}
