//! Activation statistics: how many responses pass a PReLU, and the
//! distribution of a single kernel's responses per input domain.

use std::fmt::Write as _;

use serde::Serialize;

use super::{NetworkError, Result};
use crate::tensor::{Real, Tensor};

/// Fraction of responses strictly greater than zero.
pub fn sparsity_fraction<T: Real>(activations: &[T]) -> Result<f64> {
    if activations.is_empty() {
        return Err(NetworkError::Config("sparsity of an empty activation set".into()));
    }
    let active = activations.iter().filter(|&&v| v > T::zero()).count();
    Ok(active as f64 / activations.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub domain: String,
    pub kernel: usize,
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `domain,kernel,bin_lo,bin_hi,count` rows without a header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                self.domain,
                self.kernel,
                self.edges[i],
                self.edges[i + 1],
                c
            )
            .unwrap();
        }
        out
    }

    pub const CSV_HEADER: &'static str = "domain,kernel,bin_lo,bin_hi,count";
}

/// Histogram of channel `kernel` of `[B, C, H, W]` activations.
///
/// `range` fixes the bin edges so histograms of several domains share
/// them; `None` spans the observed minimum and maximum. A degenerate range
/// is widened to `value ± 0.5`.
pub fn response_histogram<T: Real>(
    activations: &Tensor<T>,
    domain: &str,
    kernel: usize,
    bins: usize,
    range: Option<(f64, f64)>,
) -> Result<Histogram> {
    if bins < 2 {
        return Err(NetworkError::Config(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let [b, c, h, w] = activations.dims4("response_histogram")?;
    if kernel >= c {
        return Err(NetworkError::Config(format!("kernel index {kernel} out of range for {c} channels")));
    }
    let plane = h * w;
    let values: Vec<f64> = (0..b)
        .flat_map(|s| activations.data()[(s * c + kernel) * plane..][..plane].iter().map(|v| v.as_f64()))
        .collect();
    let (mut lo, mut hi) = range.unwrap_or_else(|| {
        values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    });
    if hi <= lo {
        let mid = lo;
        lo = mid - 0.5;
        hi = mid + 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for &v in &values {
        let idx = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(Histogram {
        domain: domain.to_string(),
        kernel,
        edges,
        counts,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_hand_counts() {
        assert_eq!(sparsity_fraction(&[1.0f32, 0.0, -1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(sparsity_fraction(&[0.1f32, 3.0]).unwrap(), 1.0);
        assert_eq!(sparsity_fraction(&[0.0f64; 5]).unwrap(), 0.0);
        assert!(sparsity_fraction::<f32>(&[]).is_err());
    }

    #[test]
    fn constant_responses_fill_one_bin() {
        let t = Tensor::<f32>::full(vec![2, 3, 4, 4], 1.5);
        let h = response_histogram(&t, "a", 1, 10, None).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.total(), 32);
        assert_eq!(h.mean, 1.5);
    }

    #[test]
    fn counts_conserve_channel_elements() {
        let t = Tensor::<f32>::randn(vec![3, 4, 5, 5], 1.0, 1);
        for k in 0..4 {
            let h = response_histogram(&t, "a", k, 7, None).unwrap();
            assert_eq!(h.total(), 3 * 25);
            assert_eq!(h.edges.len(), 8);
        }
    }

    #[test]
    fn shared_edges_separate_disjoint_domains() {
        let a = Tensor::<f64>::uniform(vec![2, 1, 4, 4], 0.0, 1.0, 2);
        let b = Tensor::<f64>::uniform(vec![2, 1, 4, 4], 2.0, 3.0, 3);
        let range = Some((0.0, 3.0));
        let ha = response_histogram(&a, "ct", 0, 6, range).unwrap();
        let hb = response_histogram(&b, "mr", 0, 6, range).unwrap();
        assert_eq!(ha.edges, hb.edges);
        for (ca, cb) in ha.counts.iter().zip(&hb.counts) {
            assert!(*ca == 0 || *cb == 0);
        }
        assert_eq!(ha.total(), 32);
        assert_eq!(hb.total(), 32);
        assert!(ha.csv_rows().lines().all(|l| l.starts_with("ct,0,")));
    }

    #[test]
    fn invalid_arguments() {
        let t = Tensor::<f32>::zeros(vec![1, 2, 2, 2]);
        assert!(response_histogram(&t, "a", 0, 1, None).is_err());
        assert!(response_histogram(&t, "a", 2, 4, None).is_err());
    }
}
