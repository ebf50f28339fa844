use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use xdseg::data::{Split, SyntheticDomainSpec};
use xdseg::metrics::ScoreScales;
use xdseg::network::{DiscriminatorConfig, NormKind, NormOrder, NormSpec, UNetConfig};
use xdseg::training::TrainConfig;

use crate::error::{CliError, Result};

/// Everything one command needs, read from a single JSON document.
///
/// Relative paths in a config file resolve against the file's directory;
/// paths given as flags resolve against the working directory. The
/// top-level `seed` drives data synthesis, weight initialization, batch
/// sampling and kernel selection; `train.seed` is overwritten with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Run directory (train, eval, analyze) or dataset directory (synth).
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    /// T: neighbouring slices stacked on each side, `S = 2T + 1`.
    pub slice_context: usize,
    pub num_classes: usize,
    pub rescale_percentiles: [f64; 2],
    /// Keep only the largest connected component of every foreground class.
    pub post_filter: bool,
    pub unet: UNetSection,
    pub norm: NormSpec,
    pub discriminator: DiscriminatorSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub analyze: AnalyzeSection,
    pub synth: Option<SynthSection>,
    pub sweep: Option<Sweep>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            manifest: None,
            slice_context: 1,
            num_classes: 2,
            rescale_percentiles: [1.0, 99.0],
            post_filter: true,
            unet: UNetSection::default(),
            norm: NormSpec::default(),
            discriminator: DiscriminatorSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            analyze: AnalyzeSection::default(),
            synth: None,
            sweep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetSection {
    pub levels: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
}

impl Default for UNetSection {
    fn default() -> Self {
        let c = UNetConfig::new(1, 2, NormSpec::default());
        Self {
            levels: c.levels,
            base_channels: c.base_channels,
            kernel_size: c.kernel_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSection {
    pub widths: Vec<usize>,
    pub norm: NormSpec,
}

impl Default for DiscriminatorSection {
    fn default() -> Self {
        let c = DiscriminatorConfig::for_inputs(1, 2);
        Self {
            widths: c.widths,
            norm: c.norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Slices per inference batch.
    pub batch_size: usize,
    /// Surface distances in millimetres rather than voxels.
    pub physical_units: bool,
    pub scales: ScoreScales,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            batch_size: 8,
            physical_units: true,
            scales: ScoreScales::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub split: Split,
    /// Number of randomly chosen kernels to histogram.
    pub kernels: usize,
    pub bins: usize,
    pub max_slices_per_domain: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            kernels: 8,
            bins: 32,
            max_slices_per_domain: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub domains: Vec<SyntheticDomainSpec>,
    #[serde(default = "default_volumes")]
    pub volumes_per_domain: usize,
    /// The last this many volumes of every domain form the test split.
    #[serde(default = "default_test")]
    pub test_per_domain: usize,
    #[serde(default = "default_extents")]
    pub extents: [usize; 3],
}

fn default_volumes() -> usize {
    8
}

fn default_test() -> usize {
    2
}

fn default_extents() -> [usize; 3] {
    [64, 64, 16]
}

impl SynthSection {
    /// The built-in CT-like and MR-like pair.
    pub fn two_domain(num_classes: usize) -> Self {
        Self {
            domains: vec![
                SyntheticDomainSpec::ct_like(num_classes),
                SyntheticDomainSpec::mr_like(num_classes),
            ],
            volumes_per_domain: default_volumes(),
            test_per_domain: default_test(),
            extents: default_extents(),
        }
    }
}

/// Lists to take the cartesian product over; an absent list keeps the
/// base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub slice_context: Option<Vec<usize>>,
    pub norm_kind: Option<Vec<NormKind>>,
    pub norm_order: Option<Vec<NormOrder>>,
    pub adv_weight: Option<Vec<f64>>,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// `dotted.key=value` assignments; values parse as JSON and fall back
    /// to plain strings.
    pub set: Vec<String>,
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `overrides`, resolves
    /// paths and validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let (value, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let value: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::contract(format!("{}: {e}", p.display())))?;
                (value, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Value::Object(Default::default()), PathBuf::new()),
        };
        Self::from_value(value, &base, overrides)
    }

    /// As [`load`](Self::load) for an in-memory document whose relative
    /// paths resolve against `base`.
    pub fn from_value(value: Value, base: &Path, overrides: &Overrides) -> Result<Self> {
        let mut value = {
            let mut defaults = serde_json::to_value(Self::default()).expect("config serializes");
            merge(&mut defaults, value);
            defaults
        };
        for assignment in &overrides.set {
            apply_assignment(&mut value, assignment)?;
        }
        let mut config: Self = serde_json::from_value(value).map_err(|e| CliError::contract(format!("config: {e}")))?;
        let cwd = std::env::current_dir().map_err(|e| CliError::io(".", e))?;
        let base = cwd.join(base);
        config.out = base.join(&config.out);
        config.manifest = config.manifest.map(|m| base.join(m));
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(out) = &overrides.out {
            config.out = cwd.join(out);
        }
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::contract(format!("config: {msg}")));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        let [lo, hi] = self.rescale_percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return bad(format!("rescale_percentiles must satisfy 0 <= lo < hi <= 100, got [{lo}, {hi}]"));
        }
        self.unet_config().validate()?;
        self.discriminator_config().validate()?;
        self.train.validate()?;
        self.eval.scales.validate()?;
        if self.eval.batch_size == 0 {
            return bad("eval.batch_size must be positive".into());
        }
        if self.analyze.kernels == 0 || self.analyze.bins < 2 || self.analyze.max_slices_per_domain == 0 {
            return bad("analyze needs at least one kernel, two bins and one slice".into());
        }
        if let Some(sweep) = &self.sweep {
            let lens = [
                sweep.slice_context.as_ref().map(Vec::len),
                sweep.norm_kind.as_ref().map(Vec::len),
                sweep.norm_order.as_ref().map(Vec::len),
                sweep.adv_weight.as_ref().map(Vec::len),
            ];
            if lens.iter().all(Option::is_none) {
                return bad("sweep requested without any list".into());
            }
            if lens.contains(&Some(0)) {
                return bad("sweep lists must be non-empty".into());
            }
        }
        if let Some(synth) = &self.synth {
            if synth.test_per_domain > synth.volumes_per_domain {
                return bad("synth.test_per_domain exceeds volumes_per_domain".into());
            }
        }
        Ok(())
    }

    /// Image channels per sample.
    pub fn slices(&self) -> usize {
        2 * self.slice_context + 1
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            levels: self.unet.levels,
            base_channels: self.unet.base_channels,
            in_channels: self.slices(),
            num_classes: self.num_classes,
            norm: self.norm,
            kernel_size: self.unet.kernel_size,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            widths: self.discriminator.widths.clone(),
            norm: self.discriminator.norm,
            ..DiscriminatorConfig::for_inputs(self.slices(), self.num_classes)
        }
    }

    /// The manifest path, which must name an existing file.
    pub fn manifest_path(&self) -> Result<&Path> {
        let path = self
            .manifest
            .as_deref()
            .ok_or_else(|| CliError::contract("config: no manifest given"))?;
        if !path.is_file() {
            return Err(CliError::io(path, "manifest not found"));
        }
        Ok(path)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    /// Final segmenter checkpoint of the run in `out`.
    pub fn default_checkpoint(&self) -> PathBuf {
        self.checkpoints_dir().join("unet.ckpt")
    }

    /// Short run label such as `t1-pre-bn-can0.001`.
    pub fn run_tag(&self) -> String {
        let adv = if self.train.adv_weight > 0.0 {
            format!("can{}", self.train.adv_weight)
        } else {
            "nocan".to_string()
        };
        format!("t{}-{}-{adv}", self.slice_context, self.norm.tag())
    }

    /// One config per sweep point, each writing to `out/<run tag>`; the
    /// config itself when no sweep is given.
    pub fn expand_sweep(&self) -> Vec<ExperimentConfig> {
        let Some(sweep) = &self.sweep else {
            return vec![self.clone()];
        };
        let ts = sweep.slice_context.clone().unwrap_or_else(|| vec![self.slice_context]);
        let kinds = sweep.norm_kind.clone().unwrap_or_else(|| vec![self.norm.kind]);
        let orders = sweep.norm_order.clone().unwrap_or_else(|| vec![self.norm.order]);
        let advs = sweep.adv_weight.clone().unwrap_or_else(|| vec![self.train.adv_weight]);
        let mut runs = Vec::new();
        for &t in &ts {
            for &order in &orders {
                for &kind in &kinds {
                    for &adv in &advs {
                        let mut c = self.clone();
                        c.sweep = None;
                        c.slice_context = t;
                        c.norm.kind = kind;
                        c.norm.order = order;
                        c.train.adv_weight = adv;
                        c.out = self.out.join(c.run_tag());
                        runs.push(c);
                    }
                }
            }
        }
        runs
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Overlays `patch` onto `base`, recursing into objects present in both.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, patch) => *slot = patch,
    }
}

fn apply_assignment(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::contract(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::contract(format!("override key {key:?} has an empty component")));
        }
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(CliError::contract(format!("override {key:?}: {part:?} is not inside an object")));
            }
        }
        let map = node.as_object_mut().expect("object checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}
