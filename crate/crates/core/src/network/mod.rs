//! Convolution blocks with selectable normalization placement, the shared
//! U-Net segmenter, the conditional discriminator, and activation
//! diagnostics.

mod block;
mod checkpoint;
mod diagnostics;
mod discriminator;
mod unet;

pub use block::ConvBlock;
pub use checkpoint::{Checkpoint, CheckpointTensor, CHECKPOINT_MAGIC};
pub use diagnostics::{response_histogram, sparsity_fraction, Histogram};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use unet::{UNet, UNetConfig, UNetForward};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("block {block}: eval mode with batch normalization before any train-mode update")]
    NoRunningStats { block: String },
    #[error("spatial extent {extent} is not divisible by {divisor} (2^levels)")]
    Indivisible { extent: usize, divisor: usize },
    #[error("{what}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Instance,
}

/// Whether normalization runs before the convolution (on its input) or
/// after it (on its output).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormOrder {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseEnumError {
    pub what: &'static str,
    pub allowed: &'static str,
}

impl fmt::Display for ParseEnumError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid {}; expected one of: {}", self.what, self.allowed)
    }
}

impl std::error::Error for ParseEnumError {}

impl FromStr for NormKind {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "batch" | "bn" => Ok(NormKind::Batch),
            "instance" | "in" => Ok(NormKind::Instance),
            _ => Err(ParseEnumError {
                what: "norm kind",
                allowed: "batch, instance",
            }),
        }
    }
}

impl FromStr for NormOrder {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pre" => Ok(NormOrder::Pre),
            "post" => Ok(NormOrder::Post),
            _ => Err(ParseEnumError {
                what: "norm ordering",
                allowed: "pre, post",
            }),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Batch => "batch",
            NormKind::Instance => "instance",
        })
    }
}

impl fmt::Display for NormOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormOrder::Pre => "pre",
            NormOrder::Post => "post",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    pub order: NormOrder,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-5
}

impl NormSpec {
    pub fn new(kind: NormKind, order: NormOrder) -> Self {
        Self {
            kind,
            order,
            epsilon: default_epsilon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(NetworkError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Short tag such as `pre-bn`.
    pub fn tag(&self) -> String {
        let kind = match self.kind {
            NormKind::Batch => "bn",
            NormKind::Instance => "in",
        };
        format!("{}-{kind}", self.order)
    }
}

impl Default for NormSpec {
    fn default() -> Self {
        Self::new(NormKind::Batch, NormOrder::Pre)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named trainable tensors of one network, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub(crate) fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Puts every parameter on the tape. `trainable = false` registers them
    /// as constants so no gradient is computed for them.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Tape handles for a bound [`ParamSet`], aligned with its order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order, zeros where none reached a parameter.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); tape.value(v).numel()])
            })
            .collect()
    }
}

/// Side outputs collected during a forward pass.
#[derive(Debug)]
pub struct Trace<T: Real> {
    /// `(block index, mean, variance)` of every batch-statistics
    /// normalization computed in train mode.
    pub batch_stats: Vec<(usize, Vec<T>, Vec<T>)>,
    /// `(block name, post-activation var)` when recording is enabled.
    pub activations: Option<Vec<(String, Var)>>,
}

impl<T: Real> Trace<T> {
    pub fn new(record_activations: bool) -> Self {
        Self {
            batch_stats: Vec::new(),
            activations: record_activations.then(Vec::new),
        }
    }
}

pub(crate) fn he_init<T: Real>(shape: [usize; 4], seed: u64) -> Tensor<T> {
    let fan_in = shape[1] * shape[2] * shape[3];
    Tensor::randn(shape.to_vec(), (2.0 / fan_in as f64).sqrt(), seed)
}

/// Independent child seed for stream `index` of `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 step over (seed, index)
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
