//! Core image carriers: scalar volumes, binary masks, and the four-modality
//! study bundle. Voxel data is stored x-fastest (the NIfTI convention):
//! linear index = x + nx * (y + ny * z).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Grid geometry shared by all per-case images: extents in voxels, spacing
/// in mm, and the voxel-to-world affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    pub affine: [[f32; 4]; 4],
}

impl Geometry {
    /// Axis-aligned geometry: affine = diag(spacing) with zero origin.
    pub fn axis_aligned(extents: [usize; 3], spacing: [f32; 3]) -> Self {
        let mut affine = [[0.0f32; 4]; 4];
        for a in 0..3 {
            affine[a][a] = spacing[a];
        }
        affine[3][3] = 1.0;
        Geometry { extents, spacing, affine }
    }

    pub fn isotropic(extents: [usize; 3]) -> Self {
        Self::axis_aligned(extents, [1.0, 1.0, 1.0])
    }

    pub fn num_voxels(&self) -> usize {
        self.extents[0] * self.extents[1] * self.extents[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.extents[0] * (y + self.extents[1] * z)
    }

    /// Inverse of [`Geometry::index`].
    pub fn coords(&self, linear: usize) -> [usize; 3] {
        let nx = self.extents[0];
        let ny = self.extents[1];
        [linear % nx, (linear / nx) % ny, linear / (nx * ny)]
    }

    pub fn same_grid(&self, other: &Geometry) -> bool {
        self.extents == other.extents && self.spacing == other.spacing
    }

    pub fn check_same_grid(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.extents, self.spacing, other.extents, other.spacing
            )))
        }
    }
}

/// A 3D scalar grid; the universal image carrier. Values are finite f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub geom: Geometry,
    pub data: Vec<f32>,
}

impl Volume3D {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geom.num_voxels() {
            return Err(Error::GeometryMismatch(format!(
                "data length {} != {} voxels",
                data.len(),
                geom.num_voxels()
            )));
        }
        if geom.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::GeometryMismatch(format!(
                "non-positive spacing {:?}",
                geom.spacing
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteVoxel(i));
        }
        Ok(Volume3D { geom, data })
    }

    pub fn filled(geom: Geometry, value: f32) -> Self {
        let n = geom.num_voxels();
        Volume3D { geom, data: vec![value; n] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geom.index(x, y, z)]
    }
}

/// Per-voxel booleans sharing a volume's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub geom: Geometry,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(geom: Geometry, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), geom.num_voxels(), "mask data length");
        BinaryMask { geom, data }
    }

    pub fn empty(geom: Geometry) -> Self {
        let n = geom.num_voxels();
        BinaryMask { geom, data: vec![false; n] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geom.index(x, y, z)]
    }
}

/// The four co-registered MRI modalities of one case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1w,
    T1wCE,
    T2w,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1w, Modality::T1wCE, Modality::T2w, Modality::Flair];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1w => "t1w",
            Modality::T1wCE => "t1wce",
            Modality::T2w => "t2w",
            Modality::Flair => "flair",
        }
    }
}

/// One case's four co-registered modality volumes on a single grid.
#[derive(Debug, Clone)]
pub struct MultiModalStudy {
    pub case_id: String,
    volumes: [Volume3D; 4],
}

impl MultiModalStudy {
    pub fn new(case_id: impl Into<String>, volumes: [(Modality, Volume3D); 4]) -> Result<Self> {
        let mut slots: [Option<Volume3D>; 4] = [None, None, None, None];
        for (m, v) in volumes {
            let slot = &mut slots[Self::slot(m)];
            if slot.is_some() {
                return Err(Error::GeometryMismatch(format!("duplicate modality {m:?}")));
            }
            *slot = Some(v);
        }
        let volumes = slots.map(|s| s.expect("all four modalities present"));
        let geom = volumes[0].geom.clone();
        for (m, v) in Modality::ALL.iter().zip(volumes.iter()) {
            geom.check_same_grid(&v.geom, m.name())?;
            if v.geom.affine != geom.affine {
                return Err(Error::GeometryMismatch(format!("{}: affine differs", m.name())));
            }
        }
        Ok(MultiModalStudy { case_id: case_id.into(), volumes })
    }

    fn slot(m: Modality) -> usize {
        match m {
            Modality::T1w => 0,
            Modality::T1wCE => 1,
            Modality::T2w => 2,
            Modality::Flair => 3,
        }
    }

    pub fn geom(&self) -> &Geometry {
        &self.volumes[0].geom
    }

    pub fn volume(&self, m: Modality) -> &Volume3D {
        &self.volumes[Self::slot(m)]
    }

    pub fn volume_mut(&mut self, m: Modality) -> &mut Volume3D {
        &mut self.volumes[Self::slot(m)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_index_coords_roundtrip() {
        let g = Geometry::isotropic([3, 4, 5]);
        for lin in 0..g.num_voxels() {
            let [x, y, z] = g.coords(lin);
            assert_eq!(g.index(x, y, z), lin);
        }
    }

    #[test]
    fn test_volume_rejects_wrong_length() {
        let g = Geometry::isotropic([2, 2, 2]);
        assert!(Volume3D::new(g, vec![0.0; 7]).is_err());
    }

    #[test]
    fn test_volume_rejects_nan() {
        let g = Geometry::isotropic([2, 2, 2]);
        let mut d = vec![0.0f32; 8];
        d[3] = f32::NAN;
        match Volume3D::new(g, d) {
            Err(Error::NonFiniteVoxel(3)) => {}
            other => panic!("expected NonFiniteVoxel(3), got {other:?}"),
        }
    }

    #[test]
    fn test_study_requires_matching_grids() {
        let g = Geometry::isotropic([2, 2, 2]);
        let g_bad = Geometry::isotropic([2, 2, 3]);
        let v = |g: &Geometry| Volume3D::filled(g.clone(), 1.0);
        let res = MultiModalStudy::new(
            "c0",
            [
                (Modality::T1w, v(&g)),
                (Modality::T1wCE, v(&g)),
                (Modality::T2w, v(&g_bad)),
                (Modality::Flair, v(&g)),
            ],
        );
        assert!(matches!(res, Err(Error::GeometryMismatch(_))));
    }
}
