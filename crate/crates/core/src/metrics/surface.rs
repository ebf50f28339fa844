use super::{check_extents, MetricError, Result};
use crate::data::Volume;

/// Boundary voxels of one class, as coordinates in voxel units or in
/// millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceVoxelSet {
    pub points: Vec<[f64; 3]>,
    /// Per-axis scale applied to the integer coordinates.
    pub spacing: [f64; 3],
}

impl SurfaceVoxelSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Foreground voxels of `class` with at least one 6-neighbour outside the
/// class. Neighbours beyond the volume edge count as background.
pub fn extract_surface(volume: &Volume, class: usize, physical: bool) -> SurfaceVoxelSet {
    let [nx, ny, nz] = volume.extents();
    let spacing = if physical { volume.spacing() } else { [1.0; 3] };
    let target = class as f32;
    let v = volume.voxels();
    let fg = |x: usize, y: usize, z: usize| v[x + nx * (y + ny * z)] == target;
    let mut points = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !fg(x, y, z) {
                    continue;
                }
                let interior = x > 0
                    && x + 1 < nx
                    && y > 0
                    && y + 1 < ny
                    && z > 0
                    && z + 1 < nz
                    && fg(x - 1, y, z)
                    && fg(x + 1, y, z)
                    && fg(x, y - 1, z)
                    && fg(x, y + 1, z)
                    && fg(x, y, z - 1)
                    && fg(x, y, z + 1);
                if !interior {
                    points.push([x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]]);
                }
            }
        }
    }
    SurfaceVoxelSet { points, spacing }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Euclidean distance from `x` to the nearest point of `set`.
pub fn point_to_set_distance(x: [f64; 3], set: &SurfaceVoxelSet) -> Result<f64> {
    set.points
        .iter()
        .map(|p| dist2(&x, p))
        .min_by(f64::total_cmp)
        .map(f64::sqrt)
        .ok_or(MetricError::UndefinedDistance)
}

/// Static 3-d tree for exact nearest-neighbour queries.
struct KdTree<'a> {
    points: &'a [[f64; 3]],
    /// Point indices in tree order: each subrange's median splits it.
    order: Vec<usize>,
}

impl<'a> KdTree<'a> {
    fn new(points: &'a [[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::build(points, &mut order, 0);
        Self { points, order }
    }

    fn build(points: &[[f64; 3]], idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let (left, right) = idx.split_at_mut(mid);
        Self::build(points, left, depth + 1);
        Self::build(points, &mut right[1..], depth + 1);
    }

    /// Squared distance from `q` to its nearest point.
    fn nearest2(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.order.len(), 0, &mut best);
        best
    }

    fn search(&self, q: &[f64; 3], lo: usize, hi: usize, depth: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[self.order[mid]];
        *best = best.min(dist2(q, p));
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, depth + 1, best);
        if diff * diff <= *best {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

/// Nearest distance from every point of `from` to the set `to`.
fn directed(from: &SurfaceVoxelSet, to: &SurfaceVoxelSet) -> Vec<f64> {
    let tree = KdTree::new(&to.points);
    from.points.iter().map(|p| tree.nearest2(p).sqrt()).collect()
}

/// ASSD, RMSD and MSSD of two surfaces, computed from one pass of nearest
/// distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    pub assd: f64,
    pub rmsd: f64,
    pub mssd: f64,
}

impl SurfaceDistances {
    pub fn between(seg: &SurfaceVoxelSet, reference: &SurfaceVoxelSet) -> Result<Self> {
        if seg.is_empty() || reference.is_empty() {
            return Err(MetricError::UndefinedDistance);
        }
        let mut d = directed(seg, reference);
        d.extend(directed(reference, seg));
        let n = d.len() as f64;
        Ok(Self {
            assd: d.iter().sum::<f64>() / n,
            rmsd: (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
            mssd: d.iter().copied().fold(0.0, f64::max),
        })
    }
}

pub fn assd(seg: &SurfaceVoxelSet, reference: &SurfaceVoxelSet) -> Result<f64> {
    SurfaceDistances::between(seg, reference).map(|d| d.assd)
}

pub fn rmsd(seg: &SurfaceVoxelSet, reference: &SurfaceVoxelSet) -> Result<f64> {
    SurfaceDistances::between(seg, reference).map(|d| d.rmsd)
}

/// Symmetric Hausdorff distance between the surfaces.
pub fn mssd(seg: &SurfaceVoxelSet, reference: &SurfaceVoxelSet) -> Result<f64> {
    SurfaceDistances::between(seg, reference).map(|d| d.mssd)
}

/// Surface distances between the `class` regions of two label volumes.
pub fn surface_distances(seg: &Volume, reference: &Volume, class: usize, physical: bool) -> Result<SurfaceDistances> {
    check_extents(seg, reference)?;
    SurfaceDistances::between(
        &extract_surface(seg, class, physical),
        &extract_surface(reference, class, physical),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VolumeKind;

    fn set(points: &[[f64; 3]]) -> SurfaceVoxelSet {
        SurfaceVoxelSet {
            points: points.to_vec(),
            spacing: [1.0; 3],
        }
    }

    fn cube(n: usize, at: [usize; 3], size: usize) -> Volume {
        let mut v = vec![0.0; n * n * n];
        for z in at[2]..at[2] + size {
            for y in at[1]..at[1] + size {
                for x in at[0]..at[0] + size {
                    v[x + n * (y + n * z)] = 1.0;
                }
            }
        }
        Volume::new([n; 3], [1.0; 3], VolumeKind::Label, v).unwrap()
    }

    #[test]
    fn solid_cube_surface() {
        let s = extract_surface(&cube(5, [1, 1, 1], 3), 1, false);
        assert_eq!(s.len(), 26);
        assert!(!s.points.contains(&[2.0, 2.0, 2.0]));
        let single = extract_surface(&cube(4, [2, 1, 3], 1), 1, false);
        assert_eq!(single.points, vec![[2.0, 1.0, 3.0]]);
        assert!(extract_surface(&cube(4, [0, 0, 0], 0), 1, false).is_empty());
    }

    #[test]
    fn volume_edge_counts_as_boundary() {
        let full = Volume::filled([3, 3, 3], [1.0; 3], VolumeKind::Label, 1.0).unwrap();
        assert_eq!(extract_surface(&full, 1, false).len(), 26);
    }

    #[test]
    fn physical_units_scale_coordinates() {
        let v = cube(4, [1, 2, 3], 1).with_spacing([0.5, 2.0, 3.0]).unwrap();
        assert_eq!(extract_surface(&v, 1, true).points, vec![[0.5, 4.0, 9.0]]);
    }

    #[test]
    fn point_distances() {
        assert_eq!(point_to_set_distance([0.0; 3], &set(&[[3.0, 4.0, 0.0]])).unwrap(), 5.0);
        assert_eq!(
            point_to_set_distance([0.0; 3], &set(&[[1.0, 0.0, 0.0], [10.0, 0.0, 0.0]])).unwrap(),
            1.0
        );
        assert_eq!(point_to_set_distance([1.0, 0.0, 0.0], &set(&[[1.0, 0.0, 0.0]])).unwrap(), 0.0);
        assert!(point_to_set_distance([0.0; 3], &set(&[])).is_err());
    }

    #[test]
    fn singletons_three_apart() {
        let (a, b) = (set(&[[0.0; 3]]), set(&[[0.0, 3.0, 0.0]]));
        assert_eq!(assd(&a, &b).unwrap(), 3.0);
        assert_eq!(rmsd(&a, &b).unwrap(), 3.0);
        assert_eq!(mssd(&a, &b).unwrap(), 3.0);
        assert_eq!(assd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hausdorff_is_symmetric() {
        // seg = ref plus a far point: only the seg→ref direction sees it.
        let r = set(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let s = set(&[[0.0; 3], [1.0, 0.0, 0.0], [1.0, 7.0, 0.0]]);
        assert_eq!(mssd(&s, &r).unwrap(), 7.0);
        assert_eq!(mssd(&r, &s).unwrap(), 7.0);
    }

    #[test]
    fn empty_surfaces_are_undefined() {
        assert!(matches!(assd(&set(&[]), &set(&[[0.0; 3]])), Err(MetricError::UndefinedDistance)));
        assert!(mssd(&set(&[[0.0; 3]]), &set(&[])).is_err());
    }

    #[test]
    fn kd_tree_matches_linear_scan() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 40) % 50) as f64 * 0.37
        };
        let pts: Vec<[f64; 3]> = (0..300).map(|_| [next(), next(), next()]).collect();
        let tree = KdTree::new(&pts);
        for _ in 0..200 {
            let q = [next(), next(), next()];
            let brute = pts.iter().map(|p| dist2(&q, p)).fold(f64::INFINITY, f64::min);
            assert_eq!(tree.nearest2(&q), brute);
        }
    }
}
