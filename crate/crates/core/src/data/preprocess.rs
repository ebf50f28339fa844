use super::{DataError, Result, Volume, VolumeKind};
use crate::tensor::Tensor;

/// One 2-D training sample: `S = 2T + 1` stacked slices and the one-hot
/// label map of the centre slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    /// `[S, H, W]`
    pub image: Tensor<f32>,
    /// `[C, H, W]`, one-hot per pixel.
    pub label: Tensor<f32>,
    /// Used for reporting and loss weighting only, never as a model input.
    pub domain_tag: Option<String>,
    pub volume_id: String,
    pub slice: usize,
}

/// Linear-interpolation percentile of ascending `sorted`, `p` in `[0, 100]`.
pub fn percentile(sorted: &[f32], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let (a, b) = (sorted[lo] as f64, sorted[hi] as f64);
    a + (b - a) * (rank - lo as f64)
}

/// Clips intensities at the `lo_pct` / `hi_pct` percentiles and maps the
/// clipped range affinely onto `[0, 1]`. A degenerate range maps every
/// voxel to 0.5.
pub fn rescale_contrast(volume: &Volume, lo_pct: f64, hi_pct: f64) -> Result<Volume> {
    if volume.kind() != VolumeKind::Intensity {
        return Err(DataError::InvalidArgument("contrast rescaling needs an intensity volume".into()));
    }
    if !(0.0..100.0).contains(&lo_pct) || !(lo_pct < hi_pct && hi_pct <= 100.0) {
        return Err(DataError::InvalidArgument(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct} and {hi_pct}"
        )));
    }
    if volume.is_empty() {
        return Err(DataError::InvalidArgument("empty volume".into()));
    }
    let mut sorted = volume.voxels().to_vec();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(DataError::InvalidVolume("non-finite intensity".into()));
    }
    sorted.sort_by(f32::total_cmp);
    let lo = percentile(&sorted, lo_pct);
    let hi = percentile(&sorted, hi_pct);
    let voxels = if hi > lo {
        volume
            .voxels()
            .iter()
            .map(|&v| ((v as f64).clamp(lo, hi) - lo) / (hi - lo))
            .map(|v| v as f32)
            .collect()
    } else {
        vec![0.5; volume.len()]
    };
    Volume::new(volume.extents(), volume.spacing(), VolumeKind::Intensity, voxels)
}

/// One sample per slice. Image channels are slices `z-T ..= z+T` with
/// out-of-range indices replaced by the nearest boundary slice.
pub fn stack_slices(volume: &Volume, labels: &Volume, t: usize, num_classes: usize) -> Result<Vec<SliceSample>> {
    if volume.kind() != VolumeKind::Intensity {
        return Err(DataError::InvalidArgument("slice stacking needs an intensity volume".into()));
    }
    if volume.extents() != labels.extents() {
        return Err(DataError::InvalidArgument(format!(
            "intensity extents {:?} differ from label extents {:?}",
            volume.extents(),
            labels.extents()
        )));
    }
    if num_classes < 2 {
        return Err(DataError::InvalidArgument("at least two classes are required".into()));
    }
    labels.check_labels(num_classes)?;
    let [nx, ny, nz] = volume.extents();
    let plane = nx * ny;
    let images = stack_images(volume, t);
    Ok(images
        .into_iter()
        .enumerate()
        .map(|(z, image)| {
            let mut onehot = vec![0.0f32; num_classes * plane];
            for (p, &c) in labels.slice(z).iter().enumerate() {
                onehot[c as usize * plane + p] = 1.0;
            }
            SliceSample {
                image,
                label: Tensor::new(vec![num_classes, ny, nx], onehot).expect("sized above"),
                domain_tag: None,
                volume_id: String::new(),
                slice: z,
            }
        })
        .take(nz)
        .collect())
}

/// The `[S, Y, X]` image stacks of [`stack_slices`] without labels.
pub fn stack_images(volume: &Volume, t: usize) -> Vec<Tensor<f32>> {
    let [nx, ny, nz] = volume.extents();
    let s = 2 * t + 1;
    (0..nz)
        .map(|z| {
            let mut data = Vec::with_capacity(s * nx * ny);
            for off in 0..s {
                let src = (z + off).saturating_sub(t).min(nz - 1);
                data.extend_from_slice(volume.slice(src));
            }
            Tensor::new(vec![s, ny, nx], data).expect("sized above")
        })
        .collect()
}
