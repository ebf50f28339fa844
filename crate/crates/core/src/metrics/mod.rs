//! Volumetric segmentation metrics: overlap, relative volume difference,
//! surface distances, precision/IoU and their conversion to 0–100 scores.

mod surface;

pub use surface::{
    assd, extract_surface, mssd, point_to_set_distance, rmsd, surface_distances, SurfaceDistances, SurfaceVoxelSet,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Volume;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("extent mismatch: segmentation {seg:?}, reference {reference:?}")]
    ExtentMismatch { seg: [usize; 3], reference: [usize; 3] },
    #[error("relative volume difference is undefined for an empty reference")]
    EmptyReference,
    #[error("undefined distance: a surface is empty")]
    UndefinedDistance,
    #[error("missing metric {0}")]
    MissingMetric(&'static str),
    #[error("score scale {name} must be positive, got {value}")]
    InvalidScale { name: &'static str, value: f64 },
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

pub(crate) fn check_extents(seg: &Volume, reference: &Volume) -> Result<()> {
    if seg.extents() != reference.extents() {
        return Err(MetricError::ExtentMismatch {
            seg: seg.extents(),
            reference: reference.extents(),
        });
    }
    Ok(())
}

/// `(|seg ∩ ref|, |seg|, |ref|)` for one class.
fn counts(seg: &Volume, reference: &Volume, class: usize) -> Result<(usize, usize, usize)> {
    check_extents(seg, reference)?;
    let c = class as f32;
    let mut both = 0;
    let mut s = 0;
    let mut r = 0;
    for (&a, &b) in seg.voxels().iter().zip(reference.voxels()) {
        let (ia, ib) = (a == c, b == c);
        s += ia as usize;
        r += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok((both, s, r))
}

/// `100 · |seg ∩ ref| / |seg ∪ ref|`; two empty masks agree perfectly (100).
pub fn volumetric_overlap(seg: &Volume, reference: &Volume, class: usize) -> Result<f64> {
    let (both, s, r) = counts(seg, reference, class)?;
    let union = s + r - both;
    Ok(if union == 0 { 100.0 } else { 100.0 * both as f64 / union as f64 })
}

/// `100 · ||seg| − |ref|| / |ref|`.
pub fn relative_volume_difference(seg: &Volume, reference: &Volume, class: usize) -> Result<f64> {
    let (_, s, r) = counts(seg, reference, class)?;
    if r == 0 {
        return Err(MetricError::EmptyReference);
    }
    Ok(100.0 * s.abs_diff(r) as f64 / r as f64)
}

/// `(precision, IoU)` in percent. Precision with no positive predictions is
/// 100 when the reference is empty too and 0 otherwise.
pub fn precision_iou(seg: &Volume, reference: &Volume, class: usize) -> Result<(f64, f64)> {
    let (tp, s, r) = counts(seg, reference, class)?;
    let pr = match (s, r) {
        (0, 0) => 100.0,
        (0, _) => 0.0,
        _ => 100.0 * tp as f64 / s as f64,
    };
    Ok((pr, volumetric_overlap(seg, reference, class)?))
}

/// Error magnitudes that map to a score of 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreScales {
    /// percent
    pub rvd: f64,
    /// mm
    pub assd: f64,
    /// mm
    pub rmsd: f64,
    /// mm
    pub mssd: f64,
}

impl Default for ScoreScales {
    fn default() -> Self {
        Self {
            rvd: 100.0,
            assd: 15.0,
            rmsd: 30.0,
            mssd: 60.0,
        }
    }
}

impl ScoreScales {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("rvd", self.rvd), ("assd", self.assd), ("rmsd", self.rmsd), ("mssd", self.mssd)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(MetricError::InvalidScale { name, value });
            }
        }
        Ok(())
    }
}

/// `max(0, 100 · (1 − value / scale))`.
pub fn error_score(value: f64, scale: f64) -> f64 {
    (100.0 * (1.0 - value / scale)).max(0.0)
}

/// Raw metric values; `None` marks a metric that is undefined for the
/// input (empty reference for RVD, empty surface for distances).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub vo: f64,
    pub rvd: Option<f64>,
    pub assd_mm: Option<f64>,
    pub rmsd_mm: Option<f64>,
    pub mssd_mm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub vo: f64,
    pub rvd: f64,
    pub assd: f64,
    pub rmsd: f64,
    pub mssd: f64,
}

impl MetricScores {
    pub fn overall(&self) -> f64 {
        (self.vo + self.rvd + self.assd + self.rmsd + self.mssd) / 5.0
    }

    fn from_values(values: &MetricValues, scales: &ScoreScales) -> Self {
        let score = |v: Option<f64>, s: f64| v.map_or(0.0, |v| error_score(v, s));
        Self {
            vo: values.vo,
            rvd: score(values.rvd, scales.rvd),
            assd: score(values.assd_mm, scales.assd),
            rmsd: score(values.rmsd_mm, scales.rmsd),
            mssd: score(values.mssd_mm, scales.mssd),
        }
    }
}

/// Mean of the five per-metric scores. Every metric must be defined.
pub fn score_aggregate(values: &MetricValues, scales: &ScoreScales) -> Result<f64> {
    scales.validate()?;
    for (name, v) in [
        ("rvd", values.rvd),
        ("assd", values.assd_mm),
        ("rmsd", values.rmsd_mm),
        ("mssd", values.mssd_mm),
    ] {
        if v.is_none() {
            return Err(MetricError::MissingMetric(name));
        }
    }
    Ok(MetricScores::from_values(values, scales).overall())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub class: usize,
    #[serde(flatten)]
    pub values: MetricValues,
    pub scores: MetricScores,
    /// Mean of `scores`; undefined metrics score 0.
    pub overall: f64,
    pub pr: f64,
    pub iou: f64,
}

impl MetricReport {
    /// Column order of the score table.
    pub const CSV_HEADER: &'static str = "VO,RVD,ASSD,RMSD,MSSD,overall";

    pub fn csv_row(&self) -> String {
        let s = &self.scores;
        let mut out = String::new();
        write!(out, "{},{},{},{},{},{}", s.vo, s.rvd, s.assd, s.rmsd, s.mssd, self.overall).unwrap();
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Full report for one class. Distances are in millimetres when `physical`
/// and in voxels otherwise.
pub fn evaluate(
    seg: &Volume,
    reference: &Volume,
    class: usize,
    scales: &ScoreScales,
    physical: bool,
) -> Result<MetricReport> {
    scales.validate()?;
    let vo = volumetric_overlap(seg, reference, class)?;
    let rvd = match relative_volume_difference(seg, reference, class) {
        Err(MetricError::EmptyReference) => None,
        other => Some(other?),
    };
    let d = match surface_distances(seg, reference, class, physical) {
        Err(MetricError::UndefinedDistance) => None,
        other => Some(other?),
    };
    let values = MetricValues {
        vo,
        rvd,
        assd_mm: d.map(|d| d.assd),
        rmsd_mm: d.map(|d| d.rmsd),
        mssd_mm: d.map(|d| d.mssd),
    };
    let scores = MetricScores::from_values(&values, scales);
    let (pr, iou) = precision_iou(seg, reference, class)?;
    Ok(MetricReport {
        class,
        values,
        overall: scores.overall(),
        scores,
        pr,
        iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VolumeKind;

    fn mask(ext: [usize; 3], on: impl Fn(usize, usize, usize) -> bool) -> Volume {
        let mut v = Vec::new();
        for z in 0..ext[2] {
            for y in 0..ext[1] {
                for x in 0..ext[0] {
                    v.push(on(x, y, z) as u8 as f32);
                }
            }
        }
        Volume::new(ext, [1.0; 3], VolumeKind::Label, v).unwrap()
    }

    fn count_mask(n: usize, len: usize) -> Volume {
        Volume::new([len, 1, 1], [1.0; 3], VolumeKind::Label, (0..len).map(|i| (i < n) as u8 as f32).collect())
            .unwrap()
    }

    #[test]
    fn overlap_examples() {
        let a = mask([4, 3, 3], |x, y, z| x < 2 && y < 2 && z < 2);
        let b = mask([4, 3, 3], |x, y, z| (1..3).contains(&x) && y < 2 && z < 2);
        assert_eq!(volumetric_overlap(&a, &a, 1).unwrap(), 100.0);
        assert_eq!(volumetric_overlap(&a, &b, 1).unwrap(), 100.0 * 4.0 / 12.0);
        let far = mask([4, 3, 3], |x, _, z| x == 3 && z == 2);
        assert_eq!(volumetric_overlap(&a, &far, 1).unwrap(), 0.0);
        let empty = mask([4, 3, 3], |_, _, _| false);
        assert_eq!(volumetric_overlap(&empty, &empty, 1).unwrap(), 100.0);
        let other = mask([3, 3, 3], |_, _, _| true);
        assert!(matches!(
            volumetric_overlap(&a, &other, 1),
            Err(MetricError::ExtentMismatch { .. })
        ));
    }

    #[test]
    fn rvd_examples() {
        let r = count_mask(100, 200);
        assert_eq!(relative_volume_difference(&count_mask(100, 200), &r, 1).unwrap(), 0.0);
        assert_eq!(relative_volume_difference(&count_mask(150, 200), &r, 1).unwrap(), 50.0);
        assert_eq!(relative_volume_difference(&count_mask(50, 200), &r, 1).unwrap(), 50.0);
        assert_eq!(
            relative_volume_difference(&r, &count_mask(0, 200), 1),
            Err(MetricError::EmptyReference)
        );
    }

    #[test]
    fn precision_examples() {
        let r = mask([4, 2, 2], |x, _, _| x < 2);
        assert_eq!(precision_iou(&r, &r, 1).unwrap(), (100.0, 100.0));
        let doubled = mask([4, 2, 2], |_, _, _| true);
        assert_eq!(precision_iou(&doubled, &r, 1).unwrap().0, 50.0);
        let empty = mask([4, 2, 2], |_, _, _| false);
        assert_eq!(precision_iou(&empty, &r, 1).unwrap(), (0.0, 0.0));
        assert_eq!(precision_iou(&empty, &empty, 1).unwrap().0, 100.0);
    }

    #[test]
    fn scores() {
        let perfect = MetricValues {
            vo: 100.0,
            rvd: Some(0.0),
            assd_mm: Some(0.0),
            rmsd_mm: Some(0.0),
            mssd_mm: Some(0.0),
        };
        let scales = ScoreScales::default();
        assert_eq!(score_aggregate(&perfect, &scales).unwrap(), 100.0);
        let half = MetricValues {
            vo: 50.0,
            rvd: Some(50.0),
            assd_mm: Some(7.5),
            rmsd_mm: Some(15.0),
            mssd_mm: Some(30.0),
        };
        assert_eq!(score_aggregate(&half, &scales).unwrap(), 50.0);
        assert_eq!(error_score(15.0, scales.assd), 0.0);
        assert_eq!(error_score(40.0, scales.assd), 0.0);
        let missing = MetricValues { assd_mm: None, ..perfect };
        assert_eq!(score_aggregate(&missing, &scales), Err(MetricError::MissingMetric("assd")));
        let bad = ScoreScales { rmsd: 0.0, ..scales };
        assert!(score_aggregate(&perfect, &bad).is_err());
    }

    #[test]
    fn report_of_identical_masks() {
        let a = mask([5, 5, 5], |x, y, z| (1..4).contains(&x) && (1..4).contains(&y) && z < 3);
        let r = evaluate(&a, &a, 1, &ScoreScales::default(), true).unwrap();
        assert_eq!(r.overall, 100.0);
        assert_eq!(r.values.mssd_mm, Some(0.0));
        assert_eq!(r.csv_row(), "100,100,100,100,100,100");
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["vo"], 100.0);
        assert_eq!(v["scores"]["assd"], 100.0);
    }

    #[test]
    fn undefined_distances_score_zero() {
        let a = mask([4, 4, 4], |x, _, _| x == 0);
        let empty = mask([4, 4, 4], |_, _, _| false);
        let r = evaluate(&empty, &a, 1, &ScoreScales::default(), true).unwrap();
        assert_eq!(r.values.assd_mm, None);
        assert_eq!(r.scores.assd, 0.0);
        assert_eq!(r.values.rvd, Some(100.0));
        assert_eq!(r.overall, 0.0);
    }
}
