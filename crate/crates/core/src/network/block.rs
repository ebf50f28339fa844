use super::{derive_seed, he_init, Bound, Mode, NetworkError, NormKind, NormOrder, NormSpec, ParamId, ParamSet, Result, Trace};
use crate::tensor::{NormGroups, Real, Tape, Tensor, Var};

pub const PRELU_INIT: f64 = 0.25;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Convolution, normalization and PReLU in one of two orders:
///
/// * `Post`: `prelu(norm(conv(z)))`, statistics of the conv output.
/// * `Pre`:  `prelu(conv(norm(z)))`, statistics of the block input, so the
///   convolution sees `(z − μ(z)) / sqrt(σ²(z) + ε)` and the statistics do
///   not depend on the kernel weights.
///
/// There is no separate scale/shift after normalization; the conv bias and
/// the per-channel PReLU slope are the only other parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T: Real> {
    pub(crate) name: String,
    pub(crate) cin: usize,
    pub(crate) cout: usize,
    pub(crate) kernel: usize,
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
    pub(crate) slope: ParamId,
    pub(crate) norm: NormSpec,
    pub(crate) momentum: f64,
    pub(crate) running_mean: Vec<T>,
    pub(crate) running_var: Vec<T>,
    pub(crate) stats_ready: bool,
}

impl<T: Real> ConvBlock<T> {
    pub(crate) fn new(
        params: &mut ParamSet<T>,
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: usize,
        norm: NormSpec,
        seed: u64,
    ) -> Self {
        let name = name.into();
        let weight = params.add(format!("{name}.weight"), he_init([cout, cin, kernel, kernel], seed));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        let slope = params.add(format!("{name}.prelu"), Tensor::full(vec![cout], T::lit(PRELU_INIT)));
        let norm_channels = match norm.order {
            NormOrder::Pre => cin,
            NormOrder::Post => cout,
        };
        Self {
            name,
            cin,
            cout,
            kernel,
            weight,
            bias,
            slope,
            norm,
            momentum: DEFAULT_MOMENTUM,
            running_mean: vec![T::zero(); norm_channels],
            running_var: vec![T::one(); norm_channels],
            stats_ready: false,
        }
    }

    /// Standalone block with its own parameter set, for tests and probes.
    pub fn standalone(cin: usize, cout: usize, kernel: usize, norm: NormSpec, seed: u64) -> (Self, ParamSet<T>) {
        let mut params = ParamSet::default();
        let block = Self::new(&mut params, "block", cin, cout, kernel, norm, derive_seed(seed, 0));
        (block, params)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn norm(&self) -> NormSpec {
        self.norm
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn slope_id(&self) -> ParamId {
        self.slope
    }

    pub fn running_stats(&self) -> (&[T], &[T]) {
        (&self.running_mean, &self.running_var)
    }

    pub fn stats_ready(&self) -> bool {
        self.stats_ready
    }

    /// Applies the block. `index` identifies it in `trace.batch_stats`.
    pub fn forward(
        &self,
        index: usize,
        tape: &mut Tape<T>,
        bound: &Bound,
        z: Var,
        mode: Mode,
        trace: &mut Trace<T>,
    ) -> Result<Var> {
        let channels = tape.shape(z).get(1).copied().unwrap_or(0);
        if channels != self.cin {
            return Err(NetworkError::ChannelMismatch {
                what: "conv block input",
                expected: self.cin,
                got: channels,
            });
        }
        let (w, b, a) = (bound.var(self.weight), bound.var(self.bias), bound.var(self.slope));
        let pad = self.kernel / 2;
        let pre = match self.norm.order {
            NormOrder::Pre => {
                let n = self.normalize(index, tape, z, mode, trace)?;
                tape.conv2d(n, w, Some(b), 1, pad)?
            }
            NormOrder::Post => {
                let c = tape.conv2d(z, w, Some(b), 1, pad)?;
                self.normalize(index, tape, c, mode, trace)?
            }
        };
        let out = tape.prelu(pre, a)?;
        if let Some(acts) = trace.activations.as_mut() {
            acts.push((self.name.clone(), out));
        }
        Ok(out)
    }

    fn normalize(&self, index: usize, tape: &mut Tape<T>, x: Var, mode: Mode, trace: &mut Trace<T>) -> Result<Var> {
        let eps = T::lit(self.norm.epsilon);
        match (self.norm.kind, mode) {
            (NormKind::Instance, _) => Ok(tape.normalize(x, NormGroups::PerSampleChannel, eps, None)?.0),
            (NormKind::Batch, Mode::Train) => {
                let (y, stats) = tape.normalize(x, NormGroups::PerChannel, eps, None)?;
                if let Some((m, v)) = stats {
                    trace.batch_stats.push((index, m, v));
                }
                Ok(y)
            }
            (NormKind::Batch, Mode::Eval) => {
                if !self.stats_ready {
                    return Err(NetworkError::NoRunningStats {
                        block: self.name.clone(),
                    });
                }
                let fixed = Some((self.running_mean.as_slice(), self.running_var.as_slice()));
                Ok(tape.normalize(x, NormGroups::PerChannel, eps, fixed)?.0)
            }
        }
    }

    /// Exponential moving average update of the running statistics.
    pub(crate) fn update_running(&mut self, mean: &[T], var: &[T]) {
        let m = T::lit(self.momentum);
        let one_m = T::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = m * *r + one_m * b;
        }
        self.stats_ready = true;
    }
}

/// Applies the batch statistics a train-mode forward pass collected.
pub(crate) fn commit_stats<T: Real>(blocks: &mut [ConvBlock<T>], trace: &Trace<T>) {
    for (idx, mean, var) in &trace.batch_stats {
        blocks[*idx].update_running(mean, var);
    }
}
