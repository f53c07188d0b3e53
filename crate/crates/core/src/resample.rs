//! Resolution reduction that preserves the physical field of view: images by
//! trilinear interpolation, labels by nearest neighbor. Voxels are treated
//! as cell-centered, so source coordinate u = (i + 0.5) * s'/s - 0.5.

use crate::labels::LabelVolume;
use crate::volume::{Geometry, Volume3D};

fn target_extents(extents: [usize; 3], factor: f64) -> [usize; 3] {
    extents.map(|e| ((e as f64 / factor).round() as usize).max(1))
}

fn target_geometry(geom: &Geometry, new_extents: [usize; 3]) -> Geometry {
    let ratio: [f32; 3] =
        std::array::from_fn(|a| geom.extents[a] as f32 / new_extents[a] as f32);
    let mut spacing = geom.spacing;
    for a in 0..3 {
        spacing[a] = geom.spacing[a] * ratio[a];
    }
    // direction columns scale with the spacing; the origin moves to the new
    // voxel-0 center, which sits at 0.5*(ratio - 1) in old index space
    let mut affine = geom.affine;
    for row in affine.iter_mut().take(3) {
        let shift: f32 = (0..3).map(|c| row[c] * 0.5 * (ratio[c] - 1.0)).sum();
        row[3] += shift;
        for (c, v) in row.iter_mut().take(3).enumerate() {
            *v *= ratio[c];
        }
    }
    Geometry { extents: new_extents, spacing, affine }
}

/// Source-space continuous coordinate of target voxel `i` along one axis.
#[inline]
fn source_coord(i: usize, n_src: usize, n_dst: usize) -> f64 {
    let ratio = n_src as f64 / n_dst as f64;
    let u = (i as f64 + 0.5) * ratio - 0.5;
    u.clamp(0.0, (n_src - 1) as f64)
}

/// Trilinear resample of a scalar volume onto `new_extents`.
pub fn resample_to_extents(vol: &Volume3D, new_extents: [usize; 3]) -> Volume3D {
    let src = &vol.geom;
    let geom = target_geometry(src, new_extents);
    if new_extents == src.extents {
        return Volume3D { geom, data: vol.data.clone() };
    }
    let [nx, ny, nz] = new_extents;
    let mut data = vec![0.0f32; nx * ny * nz];
    for z in 0..nz {
        let uz = source_coord(z, src.extents[2], nz);
        let z0 = uz.floor() as usize;
        let z1 = (z0 + 1).min(src.extents[2] - 1);
        let fz = uz - z0 as f64;
        for y in 0..ny {
            let uy = source_coord(y, src.extents[1], ny);
            let y0 = uy.floor() as usize;
            let y1 = (y0 + 1).min(src.extents[1] - 1);
            let fy = uy - y0 as f64;
            for x in 0..nx {
                let ux = source_coord(x, src.extents[0], nx);
                let x0 = ux.floor() as usize;
                let x1 = (x0 + 1).min(src.extents[0] - 1);
                let fx = ux - x0 as f64;
                let s = |xi: usize, yi: usize, zi: usize| vol.data[src.index(xi, yi, zi)] as f64;
                let c00 = s(x0, y0, z0) * (1.0 - fx) + s(x1, y0, z0) * fx;
                let c10 = s(x0, y1, z0) * (1.0 - fx) + s(x1, y1, z0) * fx;
                let c01 = s(x0, y0, z1) * (1.0 - fx) + s(x1, y0, z1) * fx;
                let c11 = s(x0, y1, z1) * (1.0 - fx) + s(x1, y1, z1) * fx;
                let c0 = c00 * (1.0 - fy) + c10 * fy;
                let c1 = c01 * (1.0 - fy) + c11 * fy;
                data[geom.index(x, y, z)] = (c0 * (1.0 - fz) + c1 * fz) as f32;
            }
        }
    }
    Volume3D { geom, data }
}

/// Reduce resolution by `factor` (>= 1) while preserving the physical field
/// of view: extents' = round(extents / factor), spacing scaled to match.
pub fn resample(vol: &Volume3D, factor: f64) -> Volume3D {
    resample_to_extents(vol, target_extents(vol.geom.extents, factor))
}

/// Nearest-neighbor variant for label volumes; codes stay in the code set.
pub fn resample_labels_to_extents(lv: &LabelVolume, new_extents: [usize; 3]) -> LabelVolume {
    let src = &lv.geom;
    let geom = target_geometry(src, new_extents);
    if new_extents == src.extents {
        return LabelVolume { geom, codes: lv.codes.clone() };
    }
    let [nx, ny, nz] = new_extents;
    let mut codes = vec![0u8; nx * ny * nz];
    for z in 0..nz {
        let zi = source_coord(z, src.extents[2], nz).round() as usize;
        for y in 0..ny {
            let yi = source_coord(y, src.extents[1], ny).round() as usize;
            for x in 0..nx {
                let xi = source_coord(x, src.extents[0], nx).round() as usize;
                codes[geom.index(x, y, z)] = lv.codes[src.index(xi, yi, zi)];
            }
        }
    }
    LabelVolume { geom, codes }
}

pub fn resample_labels(lv: &LabelVolume, factor: f64) -> LabelVolume {
    resample_labels_to_extents(lv, target_extents(lv.geom.extents, factor))
}
