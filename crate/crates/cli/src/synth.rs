use std::path::PathBuf;

use xdseg::data::{save_volume, synth_generate, Manifest, ManifestEntry, Split};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Writes `<id>.xdv`, `<id>_label.xdv` for every synthetic volume plus a
/// `manifest.json` into `config.out`; returns the manifest path.
pub fn cmd_synth(config: &ExperimentConfig) -> Result<PathBuf> {
    let synth = config
        .synth
        .as_ref()
        .ok_or_else(|| CliError::contract("config: no synth section with domain specs"))?;
    if let Some(spec) = synth.domains.iter().find(|s| s.num_classes() != config.num_classes) {
        return Err(CliError::contract(format!(
            "domain {:?} defines {} classes but num_classes is {}",
            spec.name,
            spec.num_classes(),
            config.num_classes
        )));
    }
    let volumes = synth_generate(&synth.domains, synth.volumes_per_domain, synth.extents, config.seed)?;

    let out = &config.out;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let first_test = synth.volumes_per_domain - synth.test_per_domain;
    let mut manifest = Manifest::default();
    for (i, v) in volumes.iter().enumerate() {
        let image = format!("{}.xdv", v.id);
        let label = format!("{}_label.xdv", v.id);
        save_volume(&v.intensity, out.join(&image)).map_err(|e| CliError::data(out.join(&image), e))?;
        save_volume(&v.label, out.join(&label)).map_err(|e| CliError::data(out.join(&label), e))?;
        manifest.entries.push(ManifestEntry {
            intensity_path: image.into(),
            label_path: label.into(),
            domain_tag: Some(v.domain.clone()),
            split: if i % synth.volumes_per_domain >= first_test {
                Split::Test
            } else {
                Split::Train
            },
        });
    }
    let path = out.join("manifest.json");
    manifest.save(&path).map_err(|e| CliError::data(&path, e))?;
    log::info!("wrote {} volumes and {}", volumes.len(), path.display());
    Ok(path)
}
