use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use xdseg::data::Split;
use xdseg::network::{derive_seed, Discriminator, UNet};
use xdseg::training::{train_loop, LossReport, TrainError};

use crate::config::ExperimentConfig;
use crate::dataset::{load_manifest, load_split, slice_samples};
use crate::error::{CliError, Result};

/// Seed indices for the two networks' initial weights.
const UNET_SEED: u64 = 1;
const DISC_SEED: u64 = 2;

/// Trains one run, or one run per sweep point; returns the run directories.
///
/// Each run directory holds the effective `config.json`, `losses.csv`,
/// `checkpoints/` and an empty `reports/`.
pub fn cmd_train(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let runs = config.expand_sweep();
    let manifest = load_manifest(config)?;
    let mut dirs = Vec::with_capacity(runs.len());
    for run in &runs {
        let cases = load_split(run, &manifest, Split::Train)?;
        if cases.is_empty() {
            return Err(CliError::contract("manifest has no train entries"));
        }
        let samples = slice_samples(run, &cases)?;
        train_run(run, &samples)?;
        dirs.push(run.out.clone());
    }
    Ok(dirs)
}

/// The untrained networks of a run.
pub fn initial_models(config: &ExperimentConfig) -> Result<(UNet<f32>, Discriminator<f32>)> {
    let unet = UNet::new(config.unet_config(), derive_seed(config.seed, UNET_SEED))?;
    let disc = Discriminator::new(config.discriminator_config(), derive_seed(config.seed, DISC_SEED))?;
    Ok((unet, disc))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn train_run(config: &ExperimentConfig, samples: &[xdseg::data::SliceSample]) -> Result<()> {
    let out = &config.out;
    let ckpt_dir = config.checkpoints_dir();
    create_dir(&ckpt_dir)?;
    create_dir(&config.reports_dir())?;
    let config_path = out.join("config.json");
    std::fs::write(&config_path, config.to_json()).map_err(|e| CliError::io(&config_path, e))?;

    let (mut unet, mut disc) = initial_models(config)?;
    let losses_path = out.join("losses.csv");
    let mut losses = BufWriter::new(File::create(&losses_path).map_err(|e| CliError::io(&losses_path, e))?);
    let every = config.train.checkpoint_every;
    log::info!(
        "training {} on {} slices for {} iterations",
        config.run_tag(),
        samples.len(),
        config.train.iterations
    );

    // Callback failures carry their exit class through the training error.
    let mut failure = None;
    let result = train_loop(&mut unet, &mut disc, samples, &config.train, |report, domains, unet, disc| {
        let mut step = || -> Result<()> {
            if report.iteration == 0 {
                writeln!(losses, "{}", LossReport::csv_header(domains)).map_err(|e| CliError::io(&losses_path, e))?;
            }
            writeln!(losses, "{}", report.csv_row(domains)).map_err(|e| CliError::io(&losses_path, e))?;
            let done = report.iteration + 1;
            if every > 0 && done % every == 0 {
                save_models(&ckpt_dir, &format!("-{done:06}"), unet, disc)?;
            }
            if done % 100 == 0 {
                log::info!("iteration {done}: L_cls {:.5} L_Disc {:.5}", report.l_cls, report.l_disc);
            }
            Ok(())
        };
        step().map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            TrainError::Callback(msg)
        })
    });
    let flushed = losses.flush().map_err(|e| CliError::io(&losses_path, e));
    match result {
        Err(TrainError::Callback(_)) => return Err(failure.expect("callback failure recorded")),
        Err(e) => return Err(e.into()),
        Ok(()) => flushed?,
    }
    save_models(&ckpt_dir, "", &unet, &disc)
}

fn save_models(dir: &Path, suffix: &str, unet: &UNet<f32>, disc: &Discriminator<f32>) -> Result<()> {
    let u = dir.join(format!("unet{suffix}.ckpt"));
    unet.to_checkpoint().save(&u).map_err(|e| CliError::checkpoint(&u, e))?;
    let d = dir.join(format!("discriminator{suffix}.ckpt"));
    disc.to_checkpoint().save(&d).map_err(|e| CliError::checkpoint(&d, e))
}
