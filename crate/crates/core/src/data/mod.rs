//! Volumes, their on-disk format, preprocessing, connected-component
//! post-filtering, and a synthetic multi-domain generator.

mod components;
mod io;
mod manifest;
mod preprocess;
mod synth;

pub use components::connected_component_filter;
pub use io::{load_volume, read_volume, save_volume, write_volume, VOLUME_MAGIC};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use preprocess::{percentile, rescale_contrast, stack_images, stack_slices, SliceSample};
pub use synth::{synth_generate, SynthVolume, SyntheticDomainSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a volume file (bad magic)")]
    BadMagic,
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("payload holds {found} voxels but the header declares {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("bad header: {0}")]
    Header(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    Label,
}

/// 3-D scalar field stored x-fastest: `index = x + X·(y + Y·z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f64; 3],
    kind: VolumeKind,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], kind: VolumeKind, voxels: Vec<f32>) -> Result<Self> {
        if extents.contains(&0) {
            return Err(DataError::InvalidVolume(format!("zero extent in {extents:?}")));
        }
        if !spacing.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(DataError::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
        }
        let n = extents.iter().product();
        if voxels.len() != n {
            return Err(DataError::SizeMismatch {
                expected: n,
                found: voxels.len(),
            });
        }
        if kind == VolumeKind::Label && voxels.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(DataError::InvalidVolume("label volume holds non-integer or negative values".into()));
        }
        Ok(Self {
            extents,
            spacing,
            kind,
            voxels,
        })
    }

    pub fn filled(extents: [usize; 3], spacing: [f64; 3], kind: VolumeKind, value: f32) -> Result<Self> {
        Self::new(extents, spacing, kind, vec![value; extents.iter().product()])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if !spacing.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(DataError::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.extents[0] * (y + self.extents[1] * z)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.extents;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Slice `z` as a row-major `Y × X` plane.
    pub fn slice(&self, z: usize) -> &[f32] {
        let plane = self.extents[0] * self.extents[1];
        &self.voxels[z * plane..(z + 1) * plane]
    }

    /// Checks that every label lies in `[0, num_classes)`.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        if self.kind != VolumeKind::Label {
            return Err(DataError::InvalidVolume("expected a label volume".into()));
        }
        if let Some(v) = self.voxels.iter().find(|v| **v as usize >= num_classes) {
            return Err(DataError::InvalidVolume(format!("label {v} outside [0, {num_classes})")));
        }
        Ok(())
    }

    /// Voxels equal to `class`.
    pub fn mask(&self, class: usize) -> Vec<bool> {
        self.voxels.iter().map(|&v| v == class as f32).collect()
    }

    /// Label volume built from per-voxel classes with this volume's
    /// geometry.
    pub fn labels_like(&self, labels: Vec<f32>) -> Result<Self> {
        Self::new(self.extents, self.spacing, VolumeKind::Label, labels)
    }
}
