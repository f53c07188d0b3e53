//! Binary morphology with the 26-neighborhood structuring element, iterated
//! `radius` times. Dilation treats out-of-bounds as background; erosion only
//! examines in-bounds neighbors, so closing never loses voxels at the volume
//! border.

use crate::components::{connected_components, Connectivity};
use crate::volume::BinaryMask;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MorphOp {
    Dilate,
    Erode,
    Close,
    FillHoles,
}

fn step(mask: &BinaryMask, dilate: bool) -> BinaryMask {
    let [nx, ny, nz] = mask.geom.extents;
    let mut out = BinaryMask::empty(mask.geom.clone());
    for z in 0..nz {
        let z0 = z.saturating_sub(1);
        let z1 = (z + 1).min(nz - 1);
        for y in 0..ny {
            let y0 = y.saturating_sub(1);
            let y1 = (y + 1).min(ny - 1);
            for x in 0..nx {
                let x0 = x.saturating_sub(1);
                let x1 = (x + 1).min(nx - 1);
                let mut acc = !dilate;
                'scan: for zz in z0..=z1 {
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            let v = mask.data[mask.geom.index(xx, yy, zz)];
                            if dilate && v {
                                acc = true;
                                break 'scan;
                            }
                            if !dilate && !v {
                                acc = false;
                                break 'scan;
                            }
                        }
                    }
                }
                let idx = mask.geom.index(x, y, z);
                out.data[idx] = acc;
            }
        }
    }
    out
}

pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let mut m = mask.clone();
    for _ in 0..radius {
        m = step(&m, true);
    }
    m
}

pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let mut m = mask.clone();
    for _ in 0..radius {
        m = step(&m, false);
    }
    m
}

/// Flip background components that do not touch the volume boundary.
/// Background connectivity is 6 (the dual of 26-connected foreground).
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let inverted = BinaryMask::new(
        mask.geom.clone(),
        mask.data.iter().map(|&b| !b).collect(),
    );
    let comps = connected_components(&inverted, Connectivity::Six);
    let [nx, ny, nz] = mask.geom.extents;
    let mut touches = vec![false; comps.count + 1];
    for lin in 0..mask.data.len() {
        let l = comps.labels[lin];
        if l == 0 {
            continue;
        }
        let [x, y, z] = mask.geom.coords(lin);
        if x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1 {
            touches[l as usize] = true;
        }
    }
    let data = mask
        .data
        .iter()
        .zip(comps.labels.iter())
        .map(|(&fg, &l)| fg || (l != 0 && !touches[l as usize]))
        .collect();
    BinaryMask::new(mask.geom.clone(), data)
}

pub fn morphology(mask: &BinaryMask, op: MorphOp, radius_voxels: usize) -> BinaryMask {
    match op {
        MorphOp::Dilate => dilate(mask, radius_voxels),
        MorphOp::Erode => erode(mask, radius_voxels),
        MorphOp::Close => erode(&dilate(mask, radius_voxels), radius_voxels),
        MorphOp::FillHoles => fill_holes(mask),
    }
}
