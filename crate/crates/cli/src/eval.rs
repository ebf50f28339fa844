use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use xdseg::data::{connected_component_filter, save_volume, stack_images, Split, Volume};
use xdseg::metrics::{evaluate, MetricReport, MetricScores};
use xdseg::network::{Checkpoint, UNet};
use xdseg::tensor::Tensor;

use crate::config::ExperimentConfig;
use crate::dataset::{load_manifest, load_split, CaseVolume};
use crate::error::{CliError, Result};

/// Source of the label volumes being scored.
pub enum Predictor {
    Model(Box<UNet<f32>>),
    /// The reference labels themselves.
    Reference,
    /// Every voxel background.
    Background,
}

impl Predictor {
    pub fn from_checkpoint(config: &ExperimentConfig, path: &Path) -> Result<Self> {
        Ok(Predictor::Model(Box::new(load_unet(config, path)?)))
    }

    /// Slice-wise inference reassembled into a label volume.
    pub fn predict(&self, config: &ExperimentConfig, case: &CaseVolume) -> Result<Volume> {
        let labels = match self {
            Predictor::Reference => return Ok(case.label.clone()),
            Predictor::Background => vec![0.0; case.label.len()],
            Predictor::Model(unet) => {
                let slices = stack_images(&case.image, config.slice_context);
                let mut labels = Vec::with_capacity(case.label.len());
                for chunk in slices.chunks(config.eval.batch_size) {
                    let batch = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
                    let logits = unet.predict(&batch).map_err(|e| CliError::contract(format!("{}: {e}", case.id)))?;
                    argmax_channels(&logits, &mut labels)?;
                }
                labels
            }
        };
        Ok(case.label.labels_like(labels)?)
    }
}

/// Loads a segmenter checkpoint and checks it against `config`.
pub fn load_unet(config: &ExperimentConfig, path: &Path) -> Result<UNet<f32>> {
    let ckpt = Checkpoint::load(path).map_err(|e| CliError::checkpoint(path, e))?;
    let unet = UNet::from_checkpoint(&ckpt).map_err(|e| CliError::checkpoint(path, e))?;
    let c = unet.config();
    if c.in_channels != config.slices() || c.num_classes != config.num_classes {
        return Err(CliError::contract(format!(
            "{}: checkpoint takes {} channels and predicts {} classes; config needs {} and {}",
            path.display(),
            c.in_channels,
            c.num_classes,
            config.slices(),
            config.num_classes
        )));
    }
    Ok(unet)
}

/// Appends the per-pixel arg max of `[B, C, H, W]` logits, sample by
/// sample; ties go to the lower class.
fn argmax_channels(logits: &Tensor<f32>, out: &mut Vec<f32>) -> Result<()> {
    let [b, c, h, w] = logits.dims4("argmax")?;
    let plane = h * w;
    let data = logits.data();
    for s in 0..b {
        let base = s * c * plane;
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if data[base + k * plane + p] > data[base + best * plane + p] {
                    best = k;
                }
            }
            out.push(best as f32);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeEvaluation {
    pub volume: String,
    pub domain: String,
    /// One report per foreground class.
    pub reports: Vec<MetricReport>,
    /// Class-averaged scores.
    pub scores: MetricScores,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub volumes: usize,
    pub scores: MetricScores,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub volumes: Vec<VolumeEvaluation>,
    /// Mean of the per-volume scores of every domain.
    pub domains: BTreeMap<String, GroupSummary>,
    /// Mean of the per-domain averages.
    pub average: MetricScores,
    pub overall: f64,
}

fn mean_scores<'a>(items: impl IntoIterator<Item = &'a MetricScores>) -> MetricScores {
    let mut acc = [0.0; 5];
    let mut n = 0usize;
    for s in items {
        for (a, v) in acc.iter_mut().zip([s.vo, s.rvd, s.assd, s.rmsd, s.mssd]) {
            *a += v;
        }
        n += 1;
    }
    let [vo, rvd, assd, rmsd, mssd] = acc.map(|a| a / n.max(1) as f64);
    MetricScores {
        vo,
        rvd,
        assd,
        rmsd,
        mssd,
    }
}

fn score_row(s: &MetricScores, overall: f64) -> String {
    format!("{},{},{},{},{},{}", s.vo, s.rvd, s.assd, s.rmsd, s.mssd, overall)
}

impl EvalSummary {
    /// Per-domain rows followed by an `average` row.
    pub fn table_csv(&self) -> String {
        let mut out = format!("domain,{}\n", MetricReport::CSV_HEADER);
        for (d, g) in &self.domains {
            writeln!(out, "{d},{}", score_row(&g.scores, g.overall)).unwrap();
        }
        writeln!(out, "average,{}", score_row(&self.average, self.overall)).unwrap();
        out
    }

    /// One row per volume and foreground class.
    pub fn volumes_csv(&self) -> String {
        let mut out = format!("volume,domain,class,{}\n", MetricReport::CSV_HEADER);
        for v in &self.volumes {
            for r in &v.reports {
                writeln!(out, "{},{},{},{}", v.volume, v.domain, r.class, r.csv_row()).unwrap();
            }
        }
        out
    }
}

/// Scores `predictor` on the test split. Predictions are written to
/// `reports/predictions/<volume>.xdv`, tables to `reports/`.
pub fn cmd_eval(config: &ExperimentConfig, predictor: &Predictor) -> Result<EvalSummary> {
    let manifest = load_manifest(config)?;
    let cases = load_split(config, &manifest, Split::Test)?;
    if cases.is_empty() {
        return Err(CliError::contract("manifest has no test entries"));
    }
    let reports_dir = config.reports_dir();
    let pred_dir = reports_dir.join("predictions");
    std::fs::create_dir_all(&pred_dir).map_err(|e| CliError::io(&pred_dir, e))?;

    let mut volumes = Vec::with_capacity(cases.len());
    for case in &cases {
        let mut pred = predictor.predict(config, case)?;
        if config.post_filter {
            for class in 1..config.num_classes {
                pred = connected_component_filter(&pred, class)?;
            }
        }
        let path = pred_dir.join(format!("{}.xdv", case.id));
        save_volume(&pred, &path).map_err(|e| CliError::data(&path, e))?;
        let reports = (1..config.num_classes)
            .map(|class| evaluate(&pred, &case.label, class, &config.eval.scales, config.eval.physical_units))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let scores = mean_scores(reports.iter().map(|r| &r.scores));
        log::info!("{}: overall {:.2}", case.id, scores.overall());
        volumes.push(VolumeEvaluation {
            volume: case.id.clone(),
            domain: case.group().to_string(),
            reports,
            overall: scores.overall(),
            scores,
        });
    }

    let mut groups: BTreeMap<String, Vec<&VolumeEvaluation>> = BTreeMap::new();
    for v in &volumes {
        groups.entry(v.domain.clone()).or_default().push(v);
    }
    let domains: BTreeMap<String, GroupSummary> = groups
        .into_iter()
        .map(|(d, vs)| {
            let scores = mean_scores(vs.iter().map(|v| &v.scores));
            let summary = GroupSummary {
                volumes: vs.len(),
                overall: scores.overall(),
                scores,
            };
            (d, summary)
        })
        .collect();
    let average = mean_scores(domains.values().map(|g| &g.scores));
    let summary = EvalSummary {
        volumes,
        domains,
        overall: average.overall(),
        average,
    };
    write_report(&reports_dir.join("eval.csv"), &summary.table_csv())?;
    write_report(&reports_dir.join("eval_volumes.csv"), &summary.volumes_csv())?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_report(&reports_dir.join("eval.json"), &json)?;
    Ok(summary)
}

pub(crate) fn write_report(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
