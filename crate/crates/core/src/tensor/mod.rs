//! Dense row-major tensors and a reverse-mode tape.
//!
//! Every 4-D tensor uses `B, C, H, W` axis order. Values are generic over
//! [`Real`] so the same kernels run in `f32` for training and in `f64` for
//! finite-difference gradient checks.

mod kernels;
mod real;
mod tape;

pub use real::Real;
pub use tape::{Broadcast, NormGroups, Tape, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected} but got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("{op}: output extent ({extent} + 2*{padding} - {kernel}) / {stride} is not integral")]
    NonIntegralExtent {
        op: &'static str,
        extent: usize,
        padding: usize,
        kernel: usize,
        stride: usize,
    },
    #[error("{op}: spatial extent {extent} must be even")]
    OddExtent { op: &'static str, extent: usize },
    #[error("{op}: kernel size {kernel} must be odd")]
    EvenKernel { op: &'static str, kernel: usize },
    #[error("reduction over zero elements")]
    EmptyReduction,
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: division by exact zero")]
    DivisionByZero { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// N-dimensional dense array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                expected: format!("{} elements of positive extents", data.len()),
                got: shape,
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(vec![1], value)
    }

    /// Standard normal samples scaled by `std`.
    ///
    /// The stream is ChaCha8 seeded from `seed` (`SeedableRng::seed_from_u64`)
    /// pushed through the ziggurat transform of `rand_distr::StandardNormal`,
    /// drawn in `f64` and rounded to `T`, so `f32` and `f64` tensors from the
    /// same seed agree up to rounding.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = T::lit(z * std);
        }
        t
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = T::lit(rng.random_range(lo..hi));
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<T>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.data.len()));
        self.grad = grad;
    }

    /// Same data viewed under a different shape with equal element count.
    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: format!("{} elements", self.data.len()),
                got: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// `[B, C, H, W]` extents, or a shape error naming `op`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(TensorError::ShapeMismatch {
                op,
                expected: "rank 4 [B, C, H, W]".into(),
                got: self.shape.clone(),
            }),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| TensorError::Invalid("stack of nothing".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    expected: format!("{:?}", first.shape),
                    got: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }
}

impl<T: Real> Tensor<T> {
    /// Mean and population variance over `axes`, which are removed from the
    /// output shape (a full reduction yields shape `[1]`).
    pub fn reduce_stats(&self, axes: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let plan = ReducePlan::new(&self.shape, axes)?;
        let (mean, var) = plan.stats(&self.data);
        Ok((
            Tensor::new(plan.out_shape.clone(), mean)?,
            Tensor::new(plan.out_shape, var)?,
        ))
    }
}

/// Maps each element of an input to its slot in a reduced output.
#[derive(Debug, Clone)]
pub(crate) struct ReducePlan {
    pub(crate) out_shape: Vec<usize>,
    pub(crate) out_index: Vec<usize>,
    pub(crate) group_size: usize,
}

impl ReducePlan {
    pub(crate) fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(TensorError::InvalidAxis { axis: a, rank });
            }
            reduced[a] = true;
        }
        let group_size: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        let numel: usize = shape.iter().product();
        if axes.is_empty() || group_size == 0 || numel == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let kept: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).collect();
        let mut out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out_index = Vec::with_capacity(numel);
        let mut idx = vec![0usize; rank];
        for _ in 0..numel {
            let mut o = 0;
            for &a in &kept {
                o = o * shape[a] + idx[a];
            }
            out_index.push(o);
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(Self {
            out_shape,
            out_index,
            group_size,
        })
    }

    pub(crate) fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub(crate) fn stats<T: Real>(&self, data: &[T]) -> (Vec<T>, Vec<T>) {
        let n = T::lit(self.group_size as f64);
        let mut mean = vec![T::zero(); self.out_len()];
        for (&o, &v) in self.out_index.iter().zip(data) {
            mean[o] += v;
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); self.out_len()];
        for (&o, &v) in self.out_index.iter().zip(data) {
            let d = v - mean[o];
            var[o] += d * d;
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        (mean, var)
    }
}
