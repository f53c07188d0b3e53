//! Tumor subregion label codes, derived-region set algebra, one-hot channel
//! encoding for cascade priors, and the stage-2b-overwrites-2a merge.
//!
//! Canonical voxel codes: 0 BG, 1 ET, 2 NET, 3 CC, 4 ED. Foreign code
//! schemes are remapped to this convention at I/O boundaries.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Geometry, Volume3D};
use serde::{Deserialize, Serialize};

pub mod code {
    pub const BG: u8 = 0;
    pub const ET: u8 = 1;
    pub const NET: u8 = 2;
    pub const CC: u8 = 3;
    pub const ED: u8 = 4;
    pub const MAX: u8 = 4;
}

/// Integer-coded segmentation sharing a study's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub geom: Geometry,
    pub codes: Vec<u8>,
}

impl LabelVolume {
    pub fn new(geom: Geometry, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != geom.num_voxels() {
            return Err(Error::GeometryMismatch(format!(
                "label count {} != {} voxels",
                codes.len(),
                geom.num_voxels()
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c > code::MAX) {
            return Err(Error::CodeOutOfRange { stage: "label volume".into(), code: bad });
        }
        Ok(LabelVolume { geom, codes })
    }

    pub fn background(geom: Geometry) -> Self {
        let n = geom.num_voxels();
        LabelVolume { geom, codes: vec![code::BG; n] }
    }

    /// Voxel count per canonical code.
    pub fn code_counts(&self) -> [usize; 5] {
        let mut counts = [0usize; 5];
        for &c in &self.codes {
            counts[c as usize] += 1;
        }
        counts
    }

    /// Decode a scalar volume into labels, optionally remapping foreign
    /// codes. Values must be non-negative integers within 1e-3.
    pub fn from_volume(vol: &Volume3D, remap: Option<&[(u8, u8)]>) -> Result<Self> {
        let mut codes = Vec::with_capacity(vol.data.len());
        for &v in &vol.data {
            let r = v.round();
            if (v - r).abs() > 1e-3 || !(0.0..=255.0).contains(&r) {
                return Err(Error::CodeOutOfRange {
                    stage: "label load".into(),
                    code: u8::MAX,
                });
            }
            let mut c = r as u8;
            if let Some(table) = remap {
                if let Some(&(_, to)) = table.iter().find(|&&(from, _)| from == c) {
                    c = to;
                }
            }
            if c > code::MAX {
                return Err(Error::CodeOutOfRange { stage: "label load".into(), code: c });
            }
            codes.push(c);
        }
        Ok(LabelVolume { geom: vol.geom.clone(), codes })
    }

    /// Encode as a scalar volume for NIfTI output.
    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            geom: self.geom.clone(),
            data: self.codes.iter().map(|&c| c as f32).collect(),
        }
    }
}

/// A subregion or derived region of the label taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionId {
    BG,
    ET,
    NET,
    CC,
    ED,
    /// Tumor core: ET + NET + CC.
    TC,
    /// Whole tumor: ET + NET + CC + ED.
    WT,
    /// Solid tumor: ET + NET, the intermediate stage-2b prior.
    ST,
}

impl RegionId {
    /// Canonical codes belonging to the region.
    pub fn member_codes(self) -> &'static [u8] {
        match self {
            RegionId::BG => &[code::BG],
            RegionId::ET => &[code::ET],
            RegionId::NET => &[code::NET],
            RegionId::CC => &[code::CC],
            RegionId::ED => &[code::ED],
            RegionId::TC => &[code::ET, code::NET, code::CC],
            RegionId::WT => &[code::ET, code::NET, code::CC, code::ED],
            RegionId::ST => &[code::ET, code::NET],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionId::BG => "BG",
            RegionId::ET => "ET",
            RegionId::NET => "NET",
            RegionId::CC => "CC",
            RegionId::ED => "ED",
            RegionId::TC => "TC",
            RegionId::WT => "WT",
            RegionId::ST => "ST",
        }
    }
}

/// Ordered per-voxel channels sharing one grid; binary prior channels or
/// class probabilities.
#[derive(Debug, Clone)]
pub struct ChannelStack {
    pub geom: Geometry,
    pub names: Vec<String>,
    pub channels: Vec<Vec<f32>>,
}

impl ChannelStack {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Max deviation of per-voxel channel sums from 1.
    pub fn max_sum_error(&self) -> f32 {
        let n = self.geom.num_voxels();
        let mut worst = 0.0f32;
        for v in 0..n {
            let s: f32 = self.channels.iter().map(|c| c[v]).sum();
            worst = worst.max((s - 1.0).abs());
        }
        worst
    }
}

/// Mask of voxels whose code belongs to `region`.
pub fn derive_region(lv: &LabelVolume, region: RegionId) -> BinaryMask {
    let members = region.member_codes();
    BinaryMask::new(
        lv.geom.clone(),
        lv.codes.iter().map(|c| members.contains(c)).collect(),
    )
}

/// One binary channel per requested label, in the requested order.
pub fn to_channels(lv: &LabelVolume, label_set: &[RegionId]) -> ChannelStack {
    let mut names = Vec::with_capacity(label_set.len());
    let mut channels = Vec::with_capacity(label_set.len());
    for &region in label_set {
        let members = region.member_codes();
        names.push(region.name().to_string());
        channels.push(
            lv.codes
                .iter()
                .map(|c| if members.contains(c) { 1.0 } else { 0.0 })
                .collect(),
        );
    }
    ChannelStack { geom: lv.geom.clone(), names, channels }
}

/// Discrete prediction: per voxel, the code of the maximal channel, ties
/// broken toward the lowest channel index (BG first by convention).
pub fn argmax_labels(probs: &ChannelStack, code_map: &[u8]) -> Result<LabelVolume> {
    if code_map.len() != probs.channels.len() {
        return Err(Error::GeometryMismatch(format!(
            "code map has {} entries for {} channels",
            code_map.len(),
            probs.channels.len()
        )));
    }
    let n = probs.geom.num_voxels();
    for (i, c) in probs.channels.iter().enumerate() {
        if c.len() != n {
            return Err(Error::GeometryMismatch(format!("channel {i} length {}", c.len())));
        }
    }
    let mut codes = vec![0u8; n];
    for v in 0..n {
        let mut best = 0usize;
        let mut best_p = probs.channels[0][v];
        for (i, ch) in probs.channels.iter().enumerate().skip(1) {
            if ch[v] > best_p {
                best_p = ch[v];
                best = i;
            }
        }
        codes[v] = code_map[best];
    }
    LabelVolume::new(probs.geom.clone(), codes)
}

/// Stage-2b outputs overwrite stage-2a outputs wherever 2b is foreground.
pub fn merge_stage_outputs(out_2a: &LabelVolume, out_2b: &LabelVolume) -> Result<LabelVolume> {
    out_2a.geom.check_same_grid(&out_2b.geom, "stage merge")?;
    for &c in &out_2a.codes {
        if !matches!(c, code::BG | code::ET | code::NET) {
            return Err(Error::CodeOutOfRange { stage: "stage2a".into(), code: c });
        }
    }
    for &c in &out_2b.codes {
        if !matches!(c, code::BG | code::CC | code::ED) {
            return Err(Error::CodeOutOfRange { stage: "stage2b".into(), code: c });
        }
    }
    let codes = out_2a
        .codes
        .iter()
        .zip(out_2b.codes.iter())
        .map(|(&a, &b)| if b != code::BG { b } else { a })
        .collect();
    Ok(LabelVolume { geom: out_2a.geom.clone(), codes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(codes: Vec<u8>) -> LabelVolume {
        let n = codes.len();
        LabelVolume::new(Geometry::isotropic([n, 1, 1]), codes).unwrap()
    }

    #[test]
    fn test_tc_combines_et_net_cc() {
        let v = lv(vec![code::ET, code::NET, code::CC, code::BG, code::BG]);
        assert_eq!(derive_region(&v, RegionId::TC).count(), 3);
    }

    #[test]
    fn test_wt_adds_edema() {
        let v = lv(vec![code::ET, code::NET, code::CC, code::ED, code::BG]);
        assert_eq!(derive_region(&v, RegionId::WT).count(), 4);
    }

    #[test]
    fn test_st_excludes_cc_and_ed() {
        let v = lv(vec![code::CC, code::ED, code::CC, code::BG]);
        assert!(derive_region(&v, RegionId::ST).is_empty());
    }

    #[test]
    fn test_to_channels_counts_and_order() {
        let mut codes = vec![code::BG; 20];
        for c in codes.iter_mut().take(5) {
            *c = code::ET;
        }
        for c in codes.iter_mut().skip(5).take(7) {
            *c = code::NET;
        }
        let stack = to_channels(&lv(codes), &[RegionId::ET, RegionId::NET]);
        assert_eq!(stack.names, vec!["ET", "NET"]);
        assert_eq!(stack.channels[0].iter().sum::<f32>(), 5.0);
        assert_eq!(stack.channels[1].iter().sum::<f32>(), 7.0);
    }

    #[test]
    fn test_st_channel_is_et_union_net() {
        let v = lv(vec![code::ET, code::NET, code::CC, code::ED, code::BG]);
        let stack = to_channels(&v, &[RegionId::ST, RegionId::CC, RegionId::ED]);
        assert_eq!(stack.channels[0], vec![1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn test_all_background_gives_zero_channels() {
        let v = lv(vec![code::BG; 6]);
        let stack = to_channels(&v, &[RegionId::ET, RegionId::CC]);
        assert!(stack.channels.iter().all(|c| c.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn test_argmax_strict_winner() {
        let stack = ChannelStack {
            geom: Geometry::isotropic([1, 1, 1]),
            names: vec!["BG".into(), "ET".into(), "NET".into()],
            channels: vec![vec![0.1], vec![0.7], vec![0.2]],
        };
        let out = argmax_labels(&stack, &[code::BG, code::ET, code::NET]).unwrap();
        assert_eq!(out.codes, vec![code::ET]);
    }

    #[test]
    fn test_argmax_tie_goes_to_lowest_channel() {
        let stack = ChannelStack {
            geom: Geometry::isotropic([1, 1, 1]),
            names: vec!["BG".into(), "ET".into()],
            channels: vec![vec![0.5], vec![0.5]],
        };
        let out = argmax_labels(&stack, &[code::BG, code::ET]).unwrap();
        assert_eq!(out.codes, vec![code::BG]);
    }

    #[test]
    fn test_argmax_uniform_is_all_background() {
        let n = 8;
        let stack = ChannelStack {
            geom: Geometry::isotropic([2, 2, 2]),
            names: vec!["BG".into(), "ET".into(), "NET".into()],
            channels: vec![vec![1.0 / 3.0; n]; 3],
        };
        let out = argmax_labels(&stack, &[code::BG, code::ET, code::NET]).unwrap();
        assert!(out.codes.iter().all(|&c| c == code::BG));
    }

    #[test]
    fn test_merge_overwrite_and_passthrough() {
        let a = lv(vec![code::ET, code::NET, code::BG]);
        let b = lv(vec![code::CC, code::BG, code::BG]);
        let m = merge_stage_outputs(&a, &b).unwrap();
        assert_eq!(m.codes, vec![code::CC, code::NET, code::BG]);
    }

    #[test]
    fn test_merge_rejects_out_of_range_codes() {
        let a = lv(vec![code::CC]); // CC is not a stage-2a code
        let b = lv(vec![code::BG]);
        assert!(matches!(
            merge_stage_outputs(&a, &b),
            Err(Error::CodeOutOfRange { .. })
        ));
    }

    #[test]
    fn test_merge_is_idempotent() {
        let a = lv(vec![code::ET, code::NET, code::BG, code::ET]);
        let b = lv(vec![code::CC, code::BG, code::ED, code::BG]);
        let once = merge_stage_outputs(&a, &b).unwrap();
        // merging the merged ET/NET part with the same 2b output is a fixed point
        let a2 = LabelVolume::new(
            once.geom.clone(),
            once.codes.iter().map(|&c| if c == code::CC || c == code::ED { 0 } else { c }).collect(),
        )
        .unwrap();
        let twice = merge_stage_outputs(&a2, &b).unwrap();
        assert_eq!(once.codes, twice.codes);
    }

    #[test]
    fn test_region_cardinality_identities() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(3, 0x1AB);
        for _ in 0..20 {
            let codes: Vec<u8> = (0..60).map(|_| rng.random_range(0..=4u8)).collect();
            let v = lv(codes);
            let n = |r| derive_region(&v, r).count();
            assert_eq!(n(RegionId::TC), n(RegionId::ET) + n(RegionId::NET) + n(RegionId::CC));
            assert_eq!(n(RegionId::WT), n(RegionId::TC) + n(RegionId::ED));
            assert_eq!(n(RegionId::ST), n(RegionId::ET) + n(RegionId::NET));
        }
    }

    #[test]
    fn test_channels_argmax_reconstructs_labels() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(4, 0x1AC);
        let codes: Vec<u8> = (0..40).map(|_| rng.random_range(0..=4u8)).collect();
        let v = lv(codes.clone());
        let regions = [RegionId::BG, RegionId::ET, RegionId::NET, RegionId::CC, RegionId::ED];
        let stack = to_channels(&v, &regions);
        let back = argmax_labels(&stack, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(back.codes, codes);
    }

    #[test]
    fn test_from_volume_with_remap() {
        let vol = Volume3D::new(
            Geometry::isotropic([4, 1, 1]),
            vec![0.0, 1.0, 4.0, 2.0],
        )
        .unwrap();
        // foreign scheme: 4 means CC, 2 means ED
        let lvv = LabelVolume::from_volume(&vol, Some(&[(4, 3), (2, 4)])).unwrap();
        assert_eq!(lvv.codes, vec![0, 1, 3, 4]);
    }

    #[test]
    fn test_from_volume_rejects_fractional() {
        let vol = Volume3D::new(Geometry::isotropic([1, 1, 1]), vec![1.5]).unwrap();
        assert!(LabelVolume::from_volume(&vol, None).is_err());
    }
}
