use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use xdseg::data::stack_images;
use xdseg::network::{derive_seed, response_histogram, Histogram, Mode, UNet};
use xdseg::tensor::{Tape, Tensor};

use crate::config::ExperimentConfig;
use crate::dataset::{load_manifest, load_split};
use crate::error::{CliError, Result};
use crate::eval::write_report;

const KERNEL_SEED: u64 = 0xA7A1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityRow {
    pub layer: String,
    pub domain: String,
    /// Fraction of post-activation responses above zero.
    pub sparsity: f64,
    pub responses: u64,
}

/// A channel of one conv block.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct KernelRef {
    pub block: usize,
    pub layer: String,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelHistogram {
    pub kernel: KernelRef,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeSummary {
    /// Slices fed through the network per domain.
    pub slices: BTreeMap<String, usize>,
    pub sparsity: Vec<SparsityRow>,
    pub kernels: Vec<KernelRef>,
    /// One histogram per sampled kernel and domain, with bin edges shared
    /// across the domains of a kernel.
    pub histograms: Vec<KernelHistogram>,
}

impl AnalyzeSummary {
    pub fn sparsity_csv(&self) -> String {
        let mut out = String::from("layer,domain,sparsity,responses\n");
        for r in &self.sparsity {
            writeln!(out, "{},{},{},{}", r.layer, r.domain, r.sparsity, r.responses).unwrap();
        }
        out
    }

    pub fn histograms_csv(&self) -> String {
        let mut out = format!("layer,{}\n", Histogram::CSV_HEADER);
        for h in &self.histograms {
            for row in h.histogram.csv_rows().lines() {
                writeln!(out, "{},{row}", h.kernel.layer).unwrap();
            }
        }
        out
    }

    pub fn means_csv(&self) -> String {
        let mut out = String::from("layer,kernel,domain,mean,count\n");
        for h in &self.histograms {
            let g = &h.histogram;
            writeln!(out, "{},{},{},{},{}", h.kernel.layer, g.kernel, g.domain, g.mean, g.total()).unwrap();
        }
        out
    }
}

/// `k` distinct (block, channel) pairs drawn with `seed`, sorted.
pub fn sample_kernels(unet: &UNet<f32>, k: usize, seed: u64) -> Vec<KernelRef> {
    let all: Vec<KernelRef> = unet
        .blocks()
        .iter()
        .enumerate()
        .flat_map(|(block, b)| {
            (0..b.out_channels()).map(move |channel| KernelRef {
                block,
                layer: b.name().to_string(),
                channel,
            })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, KERNEL_SEED));
    let mut picked: Vec<KernelRef> = rand::seq::index::sample(&mut rng, all.len(), k.min(all.len()))
        .into_iter()
        .map(|i| all[i].clone())
        .collect();
    picked.sort();
    picked
}

/// Per-layer, per-domain sparsity and per-domain response histograms of
/// randomly sampled kernels, written to `reports/`.
pub fn cmd_analyze(config: &ExperimentConfig, unet: &UNet<f32>) -> Result<AnalyzeSummary> {
    let manifest = load_manifest(config)?;
    let cases = load_split(config, &manifest, config.analyze.split)?;
    if cases.is_empty() {
        return Err(CliError::contract("no volumes in the analyzed split"));
    }
    let mut by_domain: BTreeMap<String, Vec<Tensor<f32>>> = BTreeMap::new();
    for case in &cases {
        by_domain
            .entry(case.group().to_string())
            .or_default()
            .extend(stack_images(&case.image, config.slice_context));
    }
    let kernels = sample_kernels(unet, config.analyze.kernels, config.seed);
    let blocks = unet.blocks();

    let mut slices = BTreeMap::new();
    let mut sparsity = Vec::new();
    // values[kernel][domain]
    let mut values: Vec<BTreeMap<String, Vec<f32>>> = vec![BTreeMap::new(); kernels.len()];
    for (domain, all) in &by_domain {
        let picked = spread(all.len(), config.analyze.max_slices_per_domain);
        slices.insert(domain.clone(), picked.len());
        let mut active = vec![0u64; blocks.len()];
        let mut total = vec![0u64; blocks.len()];
        for chunk in picked.chunks(config.eval.batch_size) {
            let batch = Tensor::stack(&chunk.iter().map(|&i| &all[i]).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let x = tape.constant(batch);
            let fwd = unet.forward(&mut tape, x, Mode::Eval, false, true)?;
            let acts = fwd.trace.activations.expect("activations recorded");
            for (b, (_, var)) in acts.iter().enumerate() {
                let data = tape.value(*var).data();
                active[b] += data.iter().filter(|&&v| v > 0.0).count() as u64;
                total[b] += data.len() as u64;
            }
            for (k, kernel) in kernels.iter().enumerate() {
                let t = tape.value(acts[kernel.block].1);
                let [n, c, h, w] = t.dims4("analyze")?;
                let plane = h * w;
                let dst = values[k].entry(domain.clone()).or_default();
                for s in 0..n {
                    dst.extend_from_slice(&t.data()[(s * c + kernel.channel) * plane..][..plane]);
                }
            }
        }
        for (b, block) in blocks.iter().enumerate() {
            sparsity.push(SparsityRow {
                layer: block.name().to_string(),
                domain: domain.clone(),
                sparsity: active[b] as f64 / total[b] as f64,
                responses: total[b],
            });
        }
    }

    let mut histograms = Vec::new();
    for (kernel, per_domain) in kernels.iter().zip(values) {
        let range = per_domain
            .values()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v as f64), hi.max(v as f64))
            });
        for (domain, v) in per_domain {
            let n = v.len();
            let t = Tensor::new(vec![1, 1, 1, n], v)?;
            let mut histogram = response_histogram(&t, &domain, 0, config.analyze.bins, Some(range))?;
            histogram.kernel = kernel.channel;
            histograms.push(KernelHistogram {
                kernel: kernel.clone(),
                histogram,
            });
        }
    }

    let summary = AnalyzeSummary {
        slices,
        sparsity,
        kernels,
        histograms,
    };
    let dir = config.reports_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_report(&dir.join("sparsity.csv"), &summary.sparsity_csv())?;
    write_report(&dir.join("histograms.csv"), &summary.histograms_csv())?;
    write_report(&dir.join("kernel_means.csv"), &summary.means_csv())?;
    Ok(summary)
}

/// Up to `max` indices spread evenly over `0..n`.
fn spread(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}
