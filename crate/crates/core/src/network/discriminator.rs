use serde::{Deserialize, Serialize};

use super::block::commit_stats;
use super::checkpoint::Checkpoint;
use super::{
    derive_seed, he_init, Bound, ConvBlock, Mode, NetworkError, NormKind, NormOrder, NormSpec, ParamId, ParamSet,
    Result, Trace,
};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Image channels plus class channels of the conditioned input.
    pub in_channels: usize,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_norm")]
    pub norm: NormSpec,
}

fn default_widths() -> Vec<usize> {
    vec![16, 32, 64]
}

fn default_norm() -> NormSpec {
    NormSpec::new(NormKind::Instance, NormOrder::Post)
}

impl DiscriminatorConfig {
    /// Config for images with `image_channels` slices and `num_classes`
    /// label channels.
    pub fn for_inputs(image_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels: image_channels + num_classes,
            widths: default_widths(),
            norm: default_norm(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.norm.validate()?;
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(NetworkError::Config("discriminator widths must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Scores a channel-wise concatenation of an image with a label map.
///
/// Each stage is a 3×3 conv block followed by 2×2 max pooling; a 1×1
/// convolution to one channel, a spatial mean and a sigmoid give one score
/// in `(0, 1)` per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T: Real = f32> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
    blocks: Vec<ConvBlock<T>>,
    head_weight: ParamId,
    head_bias: ParamId,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut blocks = Vec::new();
        let mut cin = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            blocks.push(ConvBlock::new(
                &mut params,
                format!("stage{i}"),
                cin,
                w,
                3,
                config.norm,
                derive_seed(seed, i as u64 + 1),
            ));
            cin = w;
        }
        let head_weight = params.add(
            "head.weight",
            he_init([1, cin, 1, 1], derive_seed(seed, config.widths.len() as u64 + 1)),
        );
        let head_bias = params.add("head.bias", Tensor::zeros(vec![1]));
        Ok(Self {
            config,
            params,
            blocks,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Binds the parameters once so several forward passes on the same tape
    /// share them.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// `[B, 1]` realness scores for `(x, y)` pairs.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        y: Var,
        mode: Mode,
        trace: &mut Trace<T>,
    ) -> Result<Var> {
        let u = tape.concat_channels(x, y)?;
        let shape = tape.shape(u).to_vec();
        if shape[1] != self.config.in_channels {
            return Err(NetworkError::ChannelMismatch {
                what: "discriminator input",
                expected: self.config.in_channels,
                got: shape[1],
            });
        }
        let d = 1 << self.config.widths.len();
        for &e in &shape[2..] {
            if e % d != 0 {
                return Err(NetworkError::Indivisible { extent: e, divisor: d });
            }
        }
        let mut h = u;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(i, tape, bound, h, mode, trace)?;
            h = tape.downsample2(h)?;
        }
        let h = tape.conv2d(h, bound.var(self.head_weight), Some(bound.var(self.head_bias)), 1, 0)?;
        let pooled = tape.global_avg_pool(h)?;
        Ok(tape.sigmoid(pooled)?)
    }

    pub fn commit(&mut self, trace: &Trace<T>) {
        commit_stats(&mut self.blocks, trace);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            "discriminator",
            serde_json::to_value(&self.config).expect("config serializes"),
            &self.params,
            &self.blocks,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_model("discriminator")?;
        let config: DiscriminatorConfig =
            serde_json::from_value(ckpt.config.clone()).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        let mut net = Self::new(config, 0)?;
        ckpt.restore(&mut net.params, &mut net.blocks)?;
        Ok(net)
    }
}
