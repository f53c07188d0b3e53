//! 3D connected component labeling over binary masks.

use crate::volume::BinaryMask;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Face, edge, and corner neighbors.
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        match self {
            Connectivity::Six => vec![
                [-1, 0, 0],
                [1, 0, 0],
                [0, -1, 0],
                [0, 1, 0],
                [0, 0, -1],
                [0, 0, 1],
            ],
            Connectivity::TwentySix => {
                let mut v = Vec::with_capacity(26);
                for dx in -1..=1isize {
                    for dy in -1..=1isize {
                        for dz in -1..=1isize {
                            if (dx, dy, dz) != (0, 0, 0) {
                                v.push([dx, dy, dz]);
                            }
                        }
                    }
                }
                v
            }
        }
    }
}

/// Component labels per voxel (0 = background), with per-component sizes.
/// Labels are assigned in ascending order of each component's first voxel's
/// linear index, so the labeling is deterministic.
#[derive(Debug, Clone)]
pub struct ComponentLabeling {
    pub labels: Vec<u32>,
    pub count: usize,
    pub sizes: Vec<usize>,
    pub extents: [usize; 3],
}

impl ComponentLabeling {
    /// Voxel linear indices of component `label` (1-based).
    pub fn component_voxels(&self, label: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Label maximal connected components of `mask` under the given adjacency.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentLabeling {
    let [nx, ny, nz] = mask.geom.extents;
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; mask.data.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();

    for start in 0..mask.data.len() {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0usize;
        labels[start] = label;
        stack.push(start);
        while let Some(lin) = stack.pop() {
            size += 1;
            let [x, y, z] = mask.geom.coords(lin);
            for off in &offsets {
                let px = x as isize + off[0];
                let py = y as isize + off[1];
                let pz = z as isize + off[2];
                if px < 0 || py < 0 || pz < 0 {
                    continue;
                }
                let (px, py, pz) = (px as usize, py as usize, pz as usize);
                if px >= nx || py >= ny || pz >= nz {
                    continue;
                }
                let nlin = mask.geom.index(px, py, pz);
                if mask.data[nlin] && labels[nlin] == 0 {
                    labels[nlin] = label;
                    stack.push(nlin);
                }
            }
        }
        sizes.push(size);
    }

    ComponentLabeling { labels, count: sizes.len(), sizes, extents: mask.geom.extents }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn mask_from(extents: [usize; 3], voxels: &[[usize; 3]]) -> BinaryMask {
        let mut m = BinaryMask::empty(Geometry::isotropic(extents));
        for &[x, y, z] in voxels {
            let idx = m.geom.index(x, y, z);
            m.data[idx] = true;
        }
        m
    }

    #[test]
    fn test_empty_mask_has_no_components() {
        let m = BinaryMask::empty(Geometry::isotropic([4, 4, 4]));
        let c = connected_components(&m, Connectivity::TwentySix);
        assert_eq!(c.count, 0);
        assert!(c.sizes.is_empty());
    }

    #[test]
    fn test_two_cubes_with_gap() {
        // two 2x2x2 cubes separated by a 3-voxel gap along x
        let mut voxels = Vec::new();
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    voxels.push([x, y, z]);
                    voxels.push([x + 5, y, z]);
                }
            }
        }
        let m = mask_from([8, 4, 4], &voxels);
        let c = connected_components(&m, Connectivity::TwentySix);
        assert_eq!(c.count, 2);
        assert_eq!(c.sizes, vec![8, 8]);
    }

    #[test]
    fn test_corner_touch_depends_on_connectivity() {
        let m = mask_from([4, 4, 4], &[[1, 1, 1], [2, 2, 2]]);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).count, 1);
        assert_eq!(connected_components(&m, Connectivity::Six).count, 2);
    }

    #[test]
    fn test_sizes_sum_to_foreground() {
        let m = mask_from([4, 4, 4], &[[0, 0, 0], [0, 0, 1], [3, 3, 3], [2, 0, 2]]);
        let c = connected_components(&m, Connectivity::Six);
        assert_eq!(c.sizes.iter().sum::<usize>(), m.count());
    }

    #[test]
    fn test_labels_ascend_by_first_voxel() {
        let m = mask_from([6, 1, 1], &[[4, 0, 0], [0, 0, 0], [2, 0, 0]]);
        let c = connected_components(&m, Connectivity::Six);
        assert_eq!(c.count, 3);
        assert_eq!(c.labels[m.geom.index(0, 0, 0)], 1);
        assert_eq!(c.labels[m.geom.index(2, 0, 0)], 2);
        assert_eq!(c.labels[m.geom.index(4, 0, 0)], 3);
    }
}
