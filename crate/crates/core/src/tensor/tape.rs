//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records each operation as a node holding its output value and
//! whatever the backward pass needs. Nodes are appended in execution order,
//! so the node list is already topologically sorted and [`Tape::backward`]
//! is a single reverse sweep.
//!
//! Gradient policy: `backward` clears every gradient on the tape and then
//! fills them, so calling it twice yields the same gradients rather than
//! doubling them. Losses that combine several terms are summed on the tape
//! before a single `backward` call.

use super::kernels::{self, ConvGeom};
use super::{Real, ReducePlan, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    /// Identical shapes.
    Same,
    /// Single-element right operand.
    Scalar,
    /// Right operand of shape `[C]` against `[B, C, ...]`.
    Channel,
    /// Right operand of shape `[B, C]` against `[B, C, ...]`.
    SampleChannel,
}

/// Which elements share normalization statistics in a `[B, C, H, W]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormGroups {
    /// One group per channel, spanning batch and space (batch norm).
    PerChannel,
    /// One group per sample and channel, spanning space (instance norm).
    PerSampleChannel,
}

impl NormGroups {
    pub fn count(self, batch: usize, channels: usize) -> usize {
        match self {
            NormGroups::PerChannel => channels,
            NormGroups::PerSampleChannel => batch * channels,
        }
    }

    #[inline]
    fn of_chunk(self, chunk: usize, channels: usize) -> usize {
        match self {
            NormGroups::PerChannel => chunk % channels,
            NormGroups::PerSampleChannel => chunk,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    Binary {
        a: Var,
        b: Var,
        op: BinOp,
        bcast: Broadcast,
    },
    AddScalar {
        a: Var,
    },
    MulScalar {
        a: Var,
        c: T,
    },
    Sqrt {
        a: Var,
    },
    ReduceMean {
        input: Var,
        plan: ReducePlan,
    },
    ReduceVar {
        input: Var,
        plan: ReducePlan,
        mean: Vec<T>,
    },
    Normalize {
        input: Var,
        groups: NormGroups,
        channels: usize,
        plane: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    PRelu {
        input: Var,
        slope: Var,
        channels: usize,
        plane: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    Softmax {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<T>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Sigmoid {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Floor applied to probabilities before the logarithm in cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

/// Operation record for one forward pass.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    checks: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// New tape. Non-finite outputs and exact-zero divisors are rejected
    /// when debug assertions are enabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checks: cfg!(debug_assertions),
        }
    }

    pub fn with_checks(mut self, checks: bool) -> Self {
        self.checks = checks;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Its gradient is populated by `backward` only if
    /// the tensor has `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// Copies a node's value into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.checks && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        self.value(v).dims4(op)
    }

    /// Cross-correlation of `[B,Cin,H,W]` with `[Cout,Cin,k,k]` plus a
    /// per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [batch, cin, h, w] = self.dims4(input, OP)?;
        let [cout, wcin, k, k2] = self.dims4(weight, OP)?;
        if wcin != cin || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                expected: format!("weight [Cout, {cin}, k, k]"),
                got: self.shape(weight).to_vec(),
            });
        }
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel { op: OP, kernel: k });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    expected: format!("bias [{cout}]"),
                    got: self.shape(b).to_vec(),
                });
            }
        }
        if stride == 0 {
            return Err(TensorError::Invalid("conv2d: stride must be positive".into()));
        }
        let extent = |e: usize| -> Result<usize> {
            let span = e + 2 * padding;
            if span < k || (span - k) % stride != 0 {
                return Err(TensorError::NonIntegralExtent {
                    op: OP,
                    extent: e,
                    padding,
                    kernel: k,
                    stride,
                });
            }
            Ok((span - k) / stride + 1)
        };
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad: padding,
            ho: extent(h)?,
            wo: extent(w)?,
        };
        let cols = kernels::im2col(&geom, self.value(input).data());
        let out = kernels::conv_forward(
            &geom,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &cols,
        );
        let value = Tensor::new(vec![batch, cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            OP,
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            &inputs,
        )
    }

    /// 2×2 max pooling with stride 2.
    pub fn downsample2(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "downsample2";
        let [b, c, h, w] = self.dims4(input, OP)?;
        for e in [h, w] {
            if e % 2 != 0 {
                return Err(TensorError::OddExtent { op: OP, extent: e });
            }
        }
        let (out, argmax) = kernels::max_pool2(self.value(input).data(), b * c, h, w);
        let value = Tensor::new(vec![b, c, h / 2, w / 2], out)?;
        self.push(OP, value, Op::MaxPool2 { input, argmax }, &[input])
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "upsample2";
        let [b, c, h, w] = self.dims4(input, OP)?;
        let out = kernels::upsample2(self.value(input).data(), b * c, h, w);
        let value = Tensor::new(vec![b, c, 2 * h, 2 * w], out)?;
        self.push(
            OP,
            value,
            Op::Upsample2 {
                input,
                planes: b * c,
                h,
                w,
            },
            &[input],
        )
    }

    fn broadcast_kind(&self, a: Var, b: Var, op: &'static str) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.iter().product::<usize>() == 1 {
            Ok(Broadcast::Scalar)
        } else if sa.len() >= 2 && sb == [sa[1]] {
            Ok(Broadcast::Channel)
        } else if sa.len() >= 2 && sb == [sa[0], sa[1]] {
            Ok(Broadcast::SampleChannel)
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                expected: format!("{sa:?}, a scalar, [C] or [B, C]"),
                got: sb.to_vec(),
            })
        }
    }

    /// Maps each element of the left operand to its right-operand index.
    fn bcast_index(&self, a: Var, bcast: Broadcast) -> impl Fn(usize) -> usize + use<T> {
        let shape = self.shape(a).to_vec();
        let inner: usize = shape.iter().skip(2).product();
        let channels = shape.get(1).copied().unwrap_or(1);
        move |i| match bcast {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Channel => (i / inner) % channels,
            Broadcast::SampleChannel => i / inner,
        }
    }

    fn binary(&mut self, a: Var, b: Var, op: BinOp) -> Result<Var> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let bcast = self.broadcast_kind(a, b, name)?;
        let bi = self.bcast_index(a, bcast);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if self.checks && matches!(op, BinOp::Div) && bv.iter().any(|v| v.is_zero()) {
            return Err(TensorError::DivisionByZero { op: name });
        }
        let out: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[bi(i)];
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(name, value, Op::Binary { a, b, op, bcast }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Div)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.map_value(a, |x| x + c);
        self.push("add_scalar", value, Op::AddScalar { a }, &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.map_value(a, |x| x * c);
        self.push("mul_scalar", value, Op::MulScalar { a, c }, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let value = self.map_value(a, |x| x.sqrt());
        self.push("sqrt", value, Op::Sqrt { a }, &[a])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = self.map_value(input, |x| T::one() / (T::one() + (-x).exp()));
        self.push("sigmoid", value, Op::Sigmoid { input }, &[input])
    }

    fn map_value(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        Tensor::new(src.shape().to_vec(), data).expect("shape preserved")
    }

    /// Differentiable mean and population variance over `axes`.
    pub fn reduce_stats(&mut self, input: Var, axes: &[usize]) -> Result<(Var, Var)> {
        let plan = ReducePlan::new(self.shape(input), axes)?;
        let (mean, var) = plan.stats(self.value(input).data());
        let mean_t = Tensor::new(plan.out_shape.clone(), mean.clone())?;
        let var_t = Tensor::new(plan.out_shape.clone(), var)?;
        let m = self.push(
            "reduce_mean",
            mean_t,
            Op::ReduceMean {
                input,
                plan: plan.clone(),
            },
            &[input],
        )?;
        let v = self.push("reduce_var", var_t, Op::ReduceVar { input, plan, mean }, &[input])?;
        Ok((m, v))
    }

    /// Fused `(x − μ) / sqrt(σ² + eps)` on a `[B, C, H, W]` tensor.
    ///
    /// With `fixed = None` the statistics come from `input` itself and are
    /// returned (per group, population variance) so callers can track
    /// running averages. With `fixed = Some((mean, var))` the given
    /// per-group statistics are treated as constants.
    #[allow(clippy::type_complexity)]
    pub fn normalize(
        &mut self,
        input: Var,
        groups: NormGroups,
        eps: T,
        fixed: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        const OP: &str = "normalize";
        let [b, c, h, w] = self.dims4(input, OP)?;
        let plane = h * w;
        let ngroups = groups.count(b, c);
        let x = self.value(input).data();
        let (mean, var, batch_stats) = match fixed {
            Some((m, v)) => {
                if m.len() != ngroups || v.len() != ngroups {
                    return Err(TensorError::ShapeMismatch {
                        op: OP,
                        expected: format!("{ngroups} fixed statistics"),
                        got: vec![m.len(), v.len()],
                    });
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let n = T::lit((b * c * plane / ngroups) as f64);
                let mut mean = vec![T::zero(); ngroups];
                for (chunk, xs) in x.chunks_exact(plane).enumerate() {
                    mean[groups.of_chunk(chunk, c)] += xs.iter().copied().sum::<T>();
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); ngroups];
                for (chunk, xs) in x.chunks_exact(plane).enumerate() {
                    let g = groups.of_chunk(chunk, c);
                    var[g] += xs.iter().map(|&v| (v - mean[g]) * (v - mean[g])).sum::<T>();
                }
                var.iter_mut().for_each(|v| *v = *v / n);
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(x.len());
        for (chunk, xs) in x.chunks_exact(plane).enumerate() {
            let g = groups.of_chunk(chunk, c);
            xhat.extend(xs.iter().map(|&v| (v - mean[g]) * inv_std[g]));
        }
        let value = Tensor::new(vec![b, c, h, w], xhat.clone())?;
        let out = self.push(
            OP,
            value,
            Op::Normalize {
                input,
                groups,
                channels: c,
                plane,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input],
        )?;
        Ok((out, batch_stats.then_some((mean, var))))
    }

    /// `x` where positive, `slope[c]·x` elsewhere.
    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        const OP: &str = "prelu";
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || self.shape(slope) != [shape[1]] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                expected: "input [B, C, ...] with slope [C]".into(),
                got: self.shape(slope).to_vec(),
            });
        }
        let channels = shape[1];
        let plane: usize = shape.iter().skip(2).product();
        let a = self.value(slope).data();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(x.len());
        for (chunk, xs) in x.chunks_exact(plane.max(1)).enumerate() {
            let k = a[chunk % channels];
            out.extend(xs.iter().map(|&v| if v > T::zero() { v } else { k * v }));
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            OP,
            value,
            Op::PRelu {
                input,
                slope,
                channels,
                plane,
            },
            &[input, slope],
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let [ba, ca, ha, wa] = self.dims4(a, OP)?;
        let [bb, cb, hb, wb] = self.dims4(b, OP)?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                expected: format!("[{ba}, _, {ha}, {wa}]"),
                got: self.shape(b).to_vec(),
            });
        }
        let plane = ha * wa;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for s in 0..ba {
            out.extend_from_slice(&av[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&bv[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        self.push(OP, value, Op::Concat { a, b }, &[a, b])
    }

    /// Channels `[start, start + len)` of a `[B, C, H, W]` tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "slice_channels";
        let [b, c, h, w] = self.dims4(input, OP)?;
        if len == 0 || start + len > c {
            return Err(TensorError::Invalid(format!(
                "{OP}: range {start}..{} outside {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * len * plane);
        for s in 0..b {
            out.extend_from_slice(&x[(s * c + start) * plane..(s * c + start + len) * plane]);
        }
        let value = Tensor::new(vec![b, len, h, w], out)?;
        self.push(OP, value, Op::SliceChannels { input, start }, &[input])
    }

    /// Softmax across channels at every pixel, max-subtracted.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "softmax_channels";
        let [b, c, h, w] = self.dims4(input, OP)?;
        if c < 2 {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                expected: "at least 2 channels".into(),
                got: self.shape(input).to_vec(),
            });
        }
        let out = kernels::softmax_channels(self.value(input).data(), b, c, h * w);
        let value = Tensor::new(vec![b, c, h, w], out)?;
        self.push(OP, value, Op::Softmax { input }, &[input])
    }

    /// Weighted softmax cross-entropy against one-hot `labels`.
    ///
    /// Returns `Σ_b w_b · ℓ_b / B`, where `ℓ_b` is the per-pixel mean of
    /// `−Σ_c y_c · ln max(p_c, 1e-12)` for sample `b`. `weights = None`
    /// means every `w_b = 1`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor<T>, weights: Option<&[T]>) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let [b, c, h, w] = self.dims4(logits, OP)?;
        if labels.shape() != self.shape(logits) {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                expected: format!("labels {:?}", self.shape(logits)),
                got: labels.shape().to_vec(),
            });
        }
        if c < 2 {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                expected: "at least 2 classes".into(),
                got: labels.shape().to_vec(),
            });
        }
        let plane = h * w;
        let y = labels.data();
        for s in 0..b {
            for p in 0..plane {
                let mut sum = T::zero();
                for ci in 0..c {
                    let v = y[(s * c + ci) * plane + p];
                    if v != T::zero() && v != T::one() {
                        return Err(TensorError::Invalid(format!("{OP}: labels are not one-hot")));
                    }
                    sum += v;
                }
                if sum != T::one() {
                    return Err(TensorError::Invalid(format!("{OP}: labels are not one-hot (row sum {sum})")));
                }
            }
        }
        let weights = match weights {
            Some(ws) if ws.len() != b => {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    expected: format!("{b} sample weights"),
                    got: vec![ws.len()],
                })
            }
            Some(ws) => ws.to_vec(),
            None => vec![T::one(); b],
        };
        let probs = kernels::softmax_channels(self.value(logits).data(), b, c, plane);
        let floor = T::lit(LOG_CLAMP);
        let mut total = T::zero();
        for s in 0..b {
            let mut ls = T::zero();
            for i in (s * c * plane)..((s + 1) * c * plane) {
                if y[i] != T::zero() {
                    ls -= y[i] * probs[i].max(floor).ln();
                }
            }
            total += weights[s] * ls / T::lit(plane as f64);
        }
        let value = Tensor::scalar(total / T::lit(b as f64));
        self.push(
            OP,
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: y.to_vec(),
                weights,
                probs,
            },
            &[logits],
        )
    }

    /// Spatial mean: `[B, C, H, W]` → `[B, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "global_avg_pool";
        let [b, c, h, w] = self.dims4(input, OP)?;
        let n = T::lit((h * w) as f64);
        let out = self
            .value(input)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        let value = Tensor::new(vec![b, c], out)?;
        self.push(OP, value, Op::GlobalAvgPool { input }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input).data();
        let s = x.iter().copied().sum::<T>() / T::lit(x.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean { input }, &[input])
    }

    /// Fills the gradient of every node that depends on a `requires_grad`
    /// leaf with `d loss / d node`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            self.nodes[i].value.set_grad(Some(g));
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl IntoIterator<Item = T>) {
        if let Some(slot) = self.slot(grads, v) {
            for (s, c) in slot.iter_mut().zip(contrib) {
                *s += c;
            }
        }
    }

    /// Like [`Self::accumulate`] but adopts `contrib` when it is the first
    /// contribution.
    fn accumulate_vec(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(slot) => slot.iter_mut().zip(contrib).for_each(|(s, c)| *s += c),
            empty => *empty = Some(contrib),
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let need_input = self.nodes[input.0].needs_grad;
                let (dx, dw, db) = kernels::conv_backward(geom, self.value(*weight).data(), cols, g, need_input);
                if let Some(dx) = dx {
                    self.accumulate_vec(grads, *input, dx);
                }
                self.accumulate_vec(grads, *weight, dw);
                if let Some(b) = bias {
                    self.accumulate_vec(grads, *b, db);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(slot) = self.slot(grads, *input) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        slot[src] += gv;
                    }
                }
            }
            Op::Upsample2 { input, planes, h, w } => {
                let dx = kernels::upsample2_backward(g, *planes, *h, *w);
                self.accumulate(grads, *input, dx);
            }
            Op::Binary { a, b, op, bcast } => {
                let bi = self.bcast_index(*a, *bcast);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(slot) = self.slot(grads, *a) {
                    for (idx, s) in slot.iter_mut().enumerate() {
                        *s += match op {
                            BinOp::Add | BinOp::Sub => g[idx],
                            BinOp::Mul => g[idx] * bv[bi(idx)],
                            BinOp::Div => g[idx] / bv[bi(idx)],
                        };
                    }
                }
                if let Some(slot) = self.slot(grads, *b) {
                    for idx in 0..av.len() {
                        let j = bi(idx);
                        slot[j] += match op {
                            BinOp::Add => g[idx],
                            BinOp::Sub => -g[idx],
                            BinOp::Mul => g[idx] * av[idx],
                            BinOp::Div => -g[idx] * av[idx] / (bv[j] * bv[j]),
                        };
                    }
                }
            }
            Op::AddScalar { a } => self.accumulate(grads, *a, g.iter().copied()),
            Op::MulScalar { a, c } => self.accumulate(grads, *a, g.iter().map(|&v| v * *c)),
            Op::Sqrt { a } => {
                let half = T::lit(0.5);
                self.accumulate(grads, *a, g.iter().zip(out).map(|(&gv, &y)| gv * half / y));
            }
            Op::Sigmoid { input } => {
                self.accumulate(grads, *input, g.iter().zip(out).map(|(&gv, &y)| gv * y * (T::one() - y)));
            }
            Op::ReduceMean { input, plan } => {
                let n = T::lit(plan.group_size as f64);
                self.accumulate(grads, *input, plan.out_index.iter().map(|&o| g[o] / n));
            }
            Op::ReduceVar { input, plan, mean } => {
                let scale = T::lit(2.0 / plan.group_size as f64);
                let x = self.value(*input).data();
                self.accumulate(
                    grads,
                    *input,
                    plan.out_index
                        .iter()
                        .zip(x)
                        .map(|(&o, &xv)| g[o] * scale * (xv - mean[o])),
                );
            }
            Op::Normalize {
                input,
                groups,
                channels,
                plane,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let Some(slot) = self.slot(grads, *input) else {
                    return;
                };
                if !*batch_stats {
                    for (chunk, (s, gv)) in slot.chunks_exact_mut(*plane).zip(g.chunks_exact(*plane)).enumerate() {
                        let k = inv_std[groups.of_chunk(chunk, *channels)];
                        s.iter_mut().zip(gv).for_each(|(s, &gv)| *s += gv * k);
                    }
                    return;
                }
                let ngroups = inv_std.len();
                let mut sum_g = vec![T::zero(); ngroups];
                let mut sum_gx = vec![T::zero(); ngroups];
                for (chunk, (gv, xh)) in g.chunks_exact(*plane).zip(xhat.chunks_exact(*plane)).enumerate() {
                    let grp = groups.of_chunk(chunk, *channels);
                    for (&a, &b) in gv.iter().zip(xh) {
                        sum_g[grp] += a;
                        sum_gx[grp] += a * b;
                    }
                }
                let n = T::lit((g.len() / ngroups) as f64);
                for (chunk, ((s, gv), xh)) in slot
                    .chunks_exact_mut(*plane)
                    .zip(g.chunks_exact(*plane))
                    .zip(xhat.chunks_exact(*plane))
                    .enumerate()
                {
                    let grp = groups.of_chunk(chunk, *channels);
                    let k = inv_std[grp] / n;
                    for ((s, &gv), &xh) in s.iter_mut().zip(gv).zip(xh) {
                        *s += k * (n * gv - sum_g[grp] - xh * sum_gx[grp]);
                    }
                }
            }
            Op::PRelu {
                input,
                slope,
                channels,
                plane,
            } => {
                let x = self.value(*input).data();
                let a = self.value(*slope).data();
                let zero = T::zero();
                let plane = (*plane).max(1);
                if let Some(slot) = self.slot(grads, *input) {
                    for (chunk, ((s, xs), gs)) in slot
                        .chunks_exact_mut(plane)
                        .zip(x.chunks_exact(plane))
                        .zip(g.chunks_exact(plane))
                        .enumerate()
                    {
                        let k = a[chunk % channels];
                        for ((s, &xv), &gv) in s.iter_mut().zip(xs).zip(gs) {
                            *s += if xv > zero { gv } else { gv * k };
                        }
                    }
                }
                if let Some(slot) = self.slot(grads, *slope) {
                    for (chunk, (xs, gs)) in x.chunks_exact(plane).zip(g.chunks_exact(plane)).enumerate() {
                        let acc: T = xs.iter().zip(gs).filter(|(&xv, _)| xv <= zero).map(|(&xv, &gv)| gv * xv).sum();
                        slot[chunk % channels] += acc;
                    }
                }
            }
            Op::Concat { a, b } => {
                let [batch, ca, h, w] = self.value(*a).dims4("concat_channels").expect("rank 4");
                let cb = self.shape(*b)[1];
                let plane = h * w;
                for s in 0..batch {
                    let base = s * (ca + cb) * plane;
                    if let Some(slot) = self.slot(grads, *a) {
                        for (d, &gv) in slot[s * ca * plane..(s + 1) * ca * plane]
                            .iter_mut()
                            .zip(&g[base..base + ca * plane])
                        {
                            *d += gv;
                        }
                    }
                    if let Some(slot) = self.slot(grads, *b) {
                        for (d, &gv) in slot[s * cb * plane..(s + 1) * cb * plane]
                            .iter_mut()
                            .zip(&g[base + ca * plane..base + (ca + cb) * plane])
                        {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SliceChannels { input, start } => {
                let [batch, c, h, w] = self.value(*input).dims4("slice_channels").expect("rank 4");
                let len = node.value.shape()[1];
                let plane = h * w;
                if let Some(slot) = self.slot(grads, *input) {
                    for s in 0..batch {
                        let dst = &mut slot[(s * c + start) * plane..(s * c + start + len) * plane];
                        for (d, &gv) in dst.iter_mut().zip(&g[s * len * plane..(s + 1) * len * plane]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { input } => {
                let [b, c, h, w] = node.value.dims4("softmax_channels").expect("rank 4");
                let plane = h * w;
                if let Some(slot) = self.slot(grads, *input) {
                    for s in 0..b {
                        for p in 0..plane {
                            let idx = |ci: usize| (s * c + ci) * plane + p;
                            let dot: T = (0..c).map(|ci| g[idx(ci)] * out[idx(ci)]).sum();
                            for ci in 0..c {
                                slot[idx(ci)] += out[idx(ci)] * (g[idx(ci)] - dot);
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let [b, c, h, w] = self.value(*logits).dims4("softmax_cross_entropy").expect("rank 4");
                let plane = h * w;
                let floor = T::lit(LOG_CLAMP);
                let scale = g[0] / T::lit((b * plane) as f64);
                if let Some(slot) = self.slot(grads, *logits) {
                    for s in 0..b {
                        let k = scale * weights[s];
                        for p in 0..plane {
                            let idx = |ci: usize| (s * c + ci) * plane + p;
                            // Only classes whose probability cleared the
                            // clamp contribute to the derivative.
                            let live = |ci: usize| if probs[idx(ci)] >= floor { labels[idx(ci)] } else { T::zero() };
                            let mass: T = (0..c).map(live).sum();
                            for ci in 0..c {
                                slot[idx(ci)] += k * (probs[idx(ci)] * mass - live(ci));
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                let [_, _, h, w] = self.value(*input).dims4("global_avg_pool").expect("rank 4");
                let n = T::lit((h * w) as f64);
                let plane = h * w;
                self.accumulate(grads, *input, (0..g.len() * plane).map(|idx| g[idx / plane] / n));
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                self.accumulate(grads, *input, std::iter::repeat_n(g[0], n));
            }
            Op::Mean { input } => {
                let n = self.value(*input).numel();
                let gv = g[0] / T::lit(n as f64);
                self.accumulate(grads, *input, std::iter::repeat_n(gv, n));
            }
        }
    }
}
