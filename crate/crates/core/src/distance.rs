//! Exact Euclidean distance transform with anisotropic spacing.
//!
//! Per-axis lower-envelope method on squared distances (Felzenszwalb &
//! Huttenlocher), which is exact rather than a chamfer approximation. The
//! engine works in `f64`; the `Volume3D` surface casts down to `f32`.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Volume3D};

const INF: f64 = f64::INFINITY;

/// 1D squared-distance transform along one line: given `f[i]` (squared
/// distance attained at site i, `INF` if unreachable), computes
/// `min_j (spacing^2 (i-j)^2 + f[j])`.
fn envelope_1d(f: &[f64], spacing: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let s2 = spacing * spacing;
    let Some(first) = (0..n).find(|&i| f[i] != INF) else {
        out[..n].fill(INF);
        return;
    };
    let mut k = 0usize;
    v[0] = first;
    z[0] = -INF;
    z[1] = INF;
    for q in first + 1..n {
        if f[q] == INF {
            continue;
        }
        loop {
            let p = v[k];
            // intersection of the parabolas rooted at p and q; finite f
            // guarantees s > -INF, so k never underflows
            let s = ((f[q] - f[p]) / s2 + (q * q - p * p) as f64) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = (q as f64 - p as f64) * spacing;
        out[q] = d * d + f[p];
    }
}

/// Squared Euclidean distances (mm^2) to the nearest foreground voxel
/// center; `INF` on lines with no reachable foreground is resolved by the
/// cross-axis passes. Returns all-zero iff mask is all foreground.
pub fn squared_distance_map(mask: &BinaryMask) -> Result<Vec<f64>> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let [nx, ny, nz] = mask.geom.extents;
    let [sx, sy, sz] = mask.geom.spacing;
    let geom = &mask.geom;
    let mut d: Vec<f64> =
        mask.data.iter().map(|&fg| if fg { 0.0 } else { INF }).collect();

    let nmax = nx.max(ny).max(nz);
    let mut line = vec![0.0f64; nmax];
    let mut out = vec![0.0f64; nmax];
    let mut v = vec![0usize; nmax];
    let mut z = vec![0.0f64; nmax + 1];

    // pass along x
    for zz in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                line[x] = d[geom.index(x, y, zz)];
            }
            envelope_1d(&line[..nx], sx as f64, &mut out[..nx], &mut v, &mut z);
            for x in 0..nx {
                d[geom.index(x, y, zz)] = out[x];
            }
        }
    }
    // pass along y
    for zz in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                line[y] = d[geom.index(x, y, zz)];
            }
            envelope_1d(&line[..ny], sy as f64, &mut out[..ny], &mut v, &mut z);
            for y in 0..ny {
                d[geom.index(x, y, zz)] = out[y];
            }
        }
    }
    // pass along z
    for y in 0..ny {
        for x in 0..nx {
            for zz in 0..nz {
                line[zz] = d[geom.index(x, y, zz)];
            }
            envelope_1d(&line[..nz], sz as f64, &mut out[..nz], &mut v, &mut z);
            for zz in 0..nz {
                d[geom.index(x, y, zz)] = out[zz];
            }
        }
    }
    Ok(d)
}

/// Per-voxel Euclidean distance in mm to the nearest foreground voxel
/// center (0 on foreground).
pub fn distance_transform(mask: &BinaryMask) -> Result<Volume3D> {
    let sq = squared_distance_map(mask)?;
    let data: Vec<f32> = sq.iter().map(|&s| s.sqrt() as f32).collect();
    Ok(Volume3D { geom: mask.geom.clone(), data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn single_voxel(extents: [usize; 3], spacing: [f32; 3], at: [usize; 3]) -> BinaryMask {
        let mut m = BinaryMask::empty(Geometry::axis_aligned(extents, spacing));
        let idx = m.geom.index(at[0], at[1], at[2]);
        m.data[idx] = true;
        m
    }

    /// Brute-force oracle: min over foreground voxels of the spacing-weighted
    /// Euclidean distance.
    fn brute_force(mask: &BinaryMask) -> Vec<f64> {
        let fg: Vec<[usize; 3]> = (0..mask.data.len())
            .filter(|&i| mask.data[i])
            .map(|i| mask.geom.coords(i))
            .collect();
        let [sx, sy, sz] = mask.geom.spacing.map(|s| s as f64);
        (0..mask.data.len())
            .map(|i| {
                let [x, y, z] = mask.geom.coords(i);
                fg.iter()
                    .map(|&[fx, fy, fz]| {
                        let dx = (x as f64 - fx as f64) * sx;
                        let dy = (y as f64 - fy as f64) * sy;
                        let dz = (z as f64 - fz as f64) * sz;
                        (dx * dx + dy * dy + dz * dz).sqrt()
                    })
                    .fold(INF, f64::min)
            })
            .collect()
    }

    #[test]
    fn test_zero_on_foreground() {
        let m = single_voxel([5, 5, 5], [1.0, 1.0, 1.0], [2, 2, 2]);
        let d = distance_transform(&m).unwrap();
        assert_eq!(d.at(2, 2, 2), 0.0);
    }

    #[test]
    fn test_face_and_corner_neighbors_isotropic() {
        let m = single_voxel([5, 5, 5], [1.0, 1.0, 1.0], [2, 2, 2]);
        let d = distance_transform(&m).unwrap();
        assert_eq!(d.at(3, 2, 2), 1.0);
        assert!((d.at(3, 3, 3) - 3f32.sqrt()).abs() < 1e-6);
        assert!((d.at(3, 3, 3) - 1.732_050_8).abs() < 1e-6);
    }

    #[test]
    fn test_anisotropic_z_neighbor() {
        let m = single_voxel([5, 5, 5], [1.0, 1.0, 2.5], [2, 2, 2]);
        let d = distance_transform(&m).unwrap();
        assert_eq!(d.at(2, 2, 3), 2.5);
    }

    #[test]
    fn test_empty_mask_errors() {
        let m = BinaryMask::empty(Geometry::isotropic([3, 3, 3]));
        assert!(matches!(distance_transform(&m), Err(Error::EmptyMask)));
    }

    #[test]
    fn test_matches_brute_force_exhaustively() {
        // randomized masks up to 12^3, anisotropic spacing
        use rand::Rng;
        let mut rng = crate::rng::rng_for(42, 0xD157);
        for trial in 0..40 {
            let extents = [
                rng.random_range(1..=12usize),
                rng.random_range(1..=12usize),
                rng.random_range(1..=12usize),
            ];
            let spacing = if trial % 2 == 0 { [1.0, 1.0, 1.0] } else { [0.5, 1.0, 2.5] };
            let mut m = BinaryMask::empty(Geometry::axis_aligned(extents, spacing));
            let density = rng.random_range(0.02..0.5);
            for v in m.data.iter_mut() {
                *v = rng.random::<f64>() < density;
            }
            if m.is_empty() {
                let mid = m.geom.index(extents[0] / 2, extents[1] / 2, extents[2] / 2);
                m.data[mid] = true;
            }
            let got = squared_distance_map(&m).unwrap();
            let want = brute_force(&m);
            for (i, (g, w)) in got.iter().zip(want.iter()).enumerate() {
                assert!(
                    (g.sqrt() - w).abs() < 1e-9,
                    "trial {trial} voxel {i}: got {} want {w}",
                    g.sqrt()
                );
            }
        }
    }
}
