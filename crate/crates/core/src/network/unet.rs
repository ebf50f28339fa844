use serde::{Deserialize, Serialize};

use super::block::commit_stats;
use super::checkpoint::Checkpoint;
use super::{derive_seed, he_init, Bound, ConvBlock, Mode, NetworkError, NormSpec, ParamId, ParamSet, Result, Trace};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    /// Stacked slices per sample, `2T + 1`.
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub norm: NormSpec,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
}

fn default_levels() -> usize {
    4
}
fn default_base() -> usize {
    16
}
fn default_kernel() -> usize {
    3
}

impl UNetConfig {
    pub fn new(in_channels: usize, num_classes: usize, norm: NormSpec) -> Self {
        Self {
            levels: default_levels(),
            base_channels: default_base(),
            in_channels,
            num_classes,
            norm,
            kernel_size: default_kernel(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.norm.validate()?;
        if self.levels < 1 {
            return Err(NetworkError::Config("levels must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(NetworkError::Config("num_classes must be at least 2".into()));
        }
        if self.in_channels % 2 == 0 {
            return Err(NetworkError::Config(format!(
                "in_channels must be odd (2T+1), got {}",
                self.in_channels
            )));
        }
        if self.base_channels == 0 || self.kernel_size % 2 == 0 {
            return Err(NetworkError::Config("base_channels must be positive and kernel_size odd".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// U-Net with element-wise summed skip connections.
///
/// Encoder level `i` runs two blocks at width `base·2^i` and then 2×2 max
/// pooling. The bottleneck runs two blocks at `base·2^levels`. Each decoder
/// level upsamples ×2, matches channels with a 1×1 block, adds the encoder
/// skip, and runs two blocks. A final 1×1 convolution produces class
/// logits. The forward pass has no domain input.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T: Real = f32> {
    config: UNetConfig,
    params: ParamSet<T>,
    blocks: Vec<ConvBlock<T>>,
    head_weight: ParamId,
    head_bias: ParamId,
}

/// Output of [`UNet::forward`].
#[derive(Debug)]
pub struct UNetForward<T: Real> {
    pub logits: Var,
    pub bound: Bound,
    pub trace: Trace<T>,
}

impl<T: Real> UNet<T> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut blocks = Vec::new();
        let k = config.kernel_size;
        let norm = config.norm;
        let mut counter = 0u64;
        let mut block = |params: &mut ParamSet<T>, name: String, cin, cout, kernel| {
            counter += 1;
            ConvBlock::new(params, name, cin, cout, kernel, norm, derive_seed(seed, counter))
        };
        let mut cin = config.in_channels;
        for level in 0..config.levels {
            let w = config.width(level);
            blocks.push(block(&mut params, format!("enc{level}.0"), cin, w, k));
            blocks.push(block(&mut params, format!("enc{level}.1"), w, w, k));
            cin = w;
        }
        let wb = config.width(config.levels);
        blocks.push(block(&mut params, "bottleneck.0".into(), cin, wb, k));
        blocks.push(block(&mut params, "bottleneck.1".into(), wb, wb, k));
        cin = wb;
        for level in (0..config.levels).rev() {
            let w = config.width(level);
            blocks.push(block(&mut params, format!("dec{level}.match"), cin, w, 1));
            blocks.push(block(&mut params, format!("dec{level}.0"), w, w, k));
            blocks.push(block(&mut params, format!("dec{level}.1"), w, w, k));
            cin = w;
        }
        let head_weight = params.add(
            "head.weight",
            he_init([config.num_classes, cin, 1, 1], derive_seed(seed, counter + 1)),
        );
        let head_bias = params.add("head.bias", Tensor::zeros(vec![config.num_classes]));
        Ok(Self {
            config,
            params,
            blocks,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn blocks(&self) -> &[ConvBlock<T>] {
        &self.blocks
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.config.levels
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape[..] else {
            return Err(NetworkError::Config(format!("expected [B, S, H, W] input, got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(NetworkError::ChannelMismatch {
                what: "unet input",
                expected: self.config.in_channels,
                got: c,
            });
        }
        let d = self.divisor();
        for e in [h, w] {
            if e % d != 0 {
                return Err(NetworkError::Indivisible { extent: e, divisor: d });
            }
        }
        Ok(())
    }

    /// Runs the network on `x` (`[B, S, H, W]`), returning `[B, C, H, W]`
    /// logits. Parameters are bound as trainable when `trainable`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        trainable: bool,
        record_activations: bool,
    ) -> Result<UNetForward<T>> {
        self.forward_with_skips(tape, x, mode, trainable, record_activations, &[])
    }

    /// As [`forward`](Self::forward), but the skip connections of the
    /// listed encoder levels are replaced with zeros.
    pub fn forward_with_skips(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        trainable: bool,
        record_activations: bool,
        dropped_skips: &[usize],
    ) -> Result<UNetForward<T>> {
        self.check_input(tape.shape(x))?;
        let bound = self.params.bind(tape, trainable);
        let mut trace = Trace::new(record_activations);
        let mut idx = 0usize;
        let mut next = |tape: &mut Tape<T>, z: Var, trace: &mut Trace<T>| -> Result<Var> {
            let out = self.blocks[idx].forward(idx, tape, &bound, z, mode, trace)?;
            idx += 1;
            Ok(out)
        };
        let mut h = x;
        let mut skips = Vec::with_capacity(self.config.levels);
        for _ in 0..self.config.levels {
            h = next(tape, h, &mut trace)?;
            h = next(tape, h, &mut trace)?;
            skips.push(h);
            h = tape.downsample2(h)?;
        }
        h = next(tape, h, &mut trace)?;
        h = next(tape, h, &mut trace)?;
        for level in (0..self.config.levels).rev() {
            h = tape.upsample2(h)?;
            h = next(tape, h, &mut trace)?;
            if !dropped_skips.contains(&level) {
                h = tape.add(h, skips[level])?;
            }
            h = next(tape, h, &mut trace)?;
            h = next(tape, h, &mut trace)?;
        }
        let logits = tape.conv2d(h, bound.var(self.head_weight), Some(bound.var(self.head_bias)), 1, 0)?;
        Ok(UNetForward { logits, bound, trace })
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// averages.
    pub fn commit(&mut self, trace: &Trace<T>) {
        commit_stats(&mut self.blocks, trace);
    }

    /// Eval-mode logits for a batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, Mode::Eval, false, false)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            "unet",
            serde_json::to_value(&self.config).expect("config serializes"),
            &self.params,
            &self.blocks,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_model("unet")?;
        let config: UNetConfig =
            serde_json::from_value(ckpt.config.clone()).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        let mut net = Self::new(config, 0)?;
        ckpt.restore(&mut net.params, &mut net.blocks)?;
        Ok(net)
    }
}
