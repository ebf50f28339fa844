use std::collections::VecDeque;

use super::{DataError, Result, Volume, VolumeKind};

/// Keeps only the largest 6-connected component of `class`; voxels of the
/// other components of that class become background (0). Equal-sized
/// components are resolved in favour of the one whose first voxel comes
/// first in storage order.
pub fn connected_component_filter(labels: &Volume, class: usize) -> Result<Volume> {
    if labels.kind() != VolumeKind::Label {
        return Err(DataError::InvalidArgument("component filtering needs a label volume".into()));
    }
    let [nx, ny, nz] = labels.extents();
    let target = class as f32;
    let voxels = labels.voxels();
    let mut component = vec![u32::MAX; voxels.len()];
    let mut sizes: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..voxels.len() {
        if voxels[start] != target || component[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        component[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let [x, y, z] = labels.coords(i);
            let mut visit = |j: usize| {
                if voxels[j] == target && component[j] == u32::MAX {
                    component[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
        sizes.push(size);
    }
    let Some(keep) = sizes
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, usize)>, (id, &s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((id, s)),
        })
        .map(|(id, _)| id as u32)
    else {
        return Ok(labels.clone());
    };
    let filtered = voxels
        .iter()
        .zip(&component)
        .map(|(&v, &c)| if v == target && c != keep { 0.0 } else { v })
        .collect();
    labels.labels_like(filtered)
}
