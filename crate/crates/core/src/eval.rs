//! Challenge-convention metrics: Dice with empty-mask rules, lesion-wise
//! Dice, and HD95, plus per-case reports and cohort aggregation.
//!
//! Empty-mask conventions: both masks empty scores Dice 1.0 and HD95 0.0;
//! exactly one empty scores Dice 0.0 and an undefined HD95, which is
//! reported as a sentinel (`None`) and excluded from cohort means.

use crate::components::{connected_components, Connectivity};
use crate::distance::squared_distance_map;
use crate::error::{Error, Result};
use crate::labels::{derive_region, LabelVolume, RegionId};
use crate::morphology::dilate;
use crate::volume::BinaryMask;
use serde::{Deserialize, Serialize};

/// Lesion matching knobs. Defaults follow the public BraTS convention:
/// 26-connectivity and a 3-voxel ground-truth dilation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LesionMatchParams {
    pub connectivity: Connectivity,
    pub gt_dilation_voxels: usize,
}

impl Default for LesionMatchParams {
    fn default() -> Self {
        LesionMatchParams { connectivity: Connectivity::TwentySix, gt_dilation_voxels: 3 }
    }
}

/// Regions evaluated per case, in reporting order.
pub const REPORT_REGIONS: [RegionId; 6] = [
    RegionId::ET,
    RegionId::TC,
    RegionId::WT,
    RegionId::NET,
    RegionId::CC,
    RegionId::ED,
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub dice: f64,
    pub lesionwise_dice: f64,
    /// None is the sentinel for "exactly one mask empty".
    pub hd95_mm: Option<f64>,
    pub pred_empty: bool,
    pub truth_empty: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub case_id: String,
    pub regions: Vec<(RegionId, RegionMetrics)>,
}

impl EvalReport {
    pub fn region(&self, r: RegionId) -> &RegionMetrics {
        &self.regions.iter().find(|(id, _)| *id == r).expect("region present").1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSummary {
    pub mean_dice: f64,
    pub mean_lesionwise_dice: f64,
    /// Mean over cases with a defined HD95 only.
    pub mean_hd95_mm: Option<f64>,
    pub hd95_defined: usize,
    pub pred_empty_count: usize,
    pub truth_empty_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n_cases: usize,
    pub regions: Vec<(RegionId, RegionSummary)>,
}

impl CohortSummary {
    pub fn region(&self, r: RegionId) -> &RegionSummary {
        &self.regions.iter().find(|(id, _)| *id == r).expect("region present").1
    }
}

/// 2|P∩T| / (|P|+|T|), with the empty-mask conventions.
pub fn dice(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    pred.geom.check_same_grid(&truth.geom, "dice")?;
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for (&a, &b) in pred.data.iter().zip(truth.data.iter()) {
        p += a as usize;
        t += b as usize;
        inter += (a && b) as usize;
    }
    Ok(match (p, t) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * inter as f64 / (p + t) as f64,
    })
}

/// Foreground voxels with at least one six-connected background neighbor
/// (out-of-bounds counts as background).
pub fn surface(mask: &BinaryMask) -> BinaryMask {
    let [nx, ny, nz] = mask.geom.extents;
    let mut out = BinaryMask::empty(mask.geom.clone());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.get(x, y, z) {
                    continue;
                }
                let exposed = x == 0
                    || y == 0
                    || z == 0
                    || x == nx - 1
                    || y == ny - 1
                    || z == nz - 1
                    || !mask.get(x - 1, y, z)
                    || !mask.get(x + 1, y, z)
                    || !mask.get(x, y - 1, z)
                    || !mask.get(x, y + 1, z)
                    || !mask.get(x, y, z - 1)
                    || !mask.get(x, y, z + 1);
                if exposed {
                    let idx = mask.geom.index(x, y, z);
                    out.data[idx] = true;
                }
            }
        }
    }
    out
}

/// p-th quantile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95th percentile of the symmetric surface-to-surface distance set, in mm.
/// Both masks empty gives Some(0.0); exactly one empty gives None.
pub fn hd95(pred: &BinaryMask, truth: &BinaryMask) -> Result<Option<f64>> {
    pred.geom.check_same_grid(&truth.geom, "hd95")?;
    match (pred.is_empty(), truth.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let pred_surface = surface(pred);
    let truth_surface = surface(truth);
    let d_to_truth = squared_distance_map(&truth_surface)?;
    let d_to_pred = squared_distance_map(&pred_surface)?;
    let mut distances = Vec::new();
    for idx in 0..pred_surface.data.len() {
        if pred_surface.data[idx] {
            distances.push(d_to_truth[idx].sqrt());
        }
    }
    for idx in 0..truth_surface.data.len() {
        if truth_surface.data[idx] {
            distances.push(d_to_pred[idx].sqrt());
        }
    }
    distances.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    Ok(Some(percentile(&distances, 0.95)))
}

/// Lesion-wise Dice: truth components are matched to predicted components
/// through a dilated extent; each truth lesion scores Dice against the
/// union of its matched predicted components, unmatched predicted
/// components score 0 as false positives, and the result is the mean over
/// all entries. Both masks empty scores 1.0.
pub fn lesionwise_dice(
    pred: &BinaryMask,
    truth: &BinaryMask,
    params: &LesionMatchParams,
) -> Result<f64> {
    pred.geom.check_same_grid(&truth.geom, "lesionwise dice")?;
    if pred.is_empty() && truth.is_empty() {
        return Ok(1.0);
    }
    let truth_comps = connected_components(truth, params.connectivity);
    let pred_comps = connected_components(pred, params.connectivity);
    let mut pred_matched = vec![false; pred_comps.count + 1];
    let mut entries: Vec<f64> = Vec::with_capacity(truth_comps.count + pred_comps.count);

    for lesion in 1..=truth_comps.count as u32 {
        let lesion_mask = BinaryMask::new(
            truth.geom.clone(),
            truth_comps.labels.iter().map(|&l| l == lesion).collect(),
        );
        let reach = dilate(&lesion_mask, params.gt_dilation_voxels);
        // predicted components overlapping the dilated lesion extent
        let mut matched = vec![false; pred_comps.count + 1];
        for idx in 0..reach.data.len() {
            if reach.data[idx] && pred_comps.labels[idx] != 0 {
                matched[pred_comps.labels[idx] as usize] = true;
            }
        }
        let mut inter = 0usize;
        let mut p = 0usize;
        let t = lesion_mask.count();
        for idx in 0..pred.data.len() {
            let pl = pred_comps.labels[idx] as usize;
            if pl != 0 && matched[pl] {
                p += 1;
                inter += lesion_mask.data[idx] as usize;
            }
        }
        for (slot, m) in matched.iter().enumerate() {
            if *m {
                pred_matched[slot] = true;
            }
        }
        entries.push(if p + t == 0 { 1.0 } else { 2.0 * inter as f64 / (p + t) as f64 });
    }
    for slot in 1..=pred_comps.count {
        if !pred_matched[slot] {
            entries.push(0.0); // false-positive component
        }
    }
    // ascending order fixes the summation sequence
    entries.sort_by(|a, b| a.partial_cmp(b).expect("finite dice"));
    Ok(entries.iter().sum::<f64>() / entries.len() as f64)
}

/// All three metrics for every reported region of a label-volume pair.
pub fn evaluate_case(
    case_id: &str,
    pred: &LabelVolume,
    truth: &LabelVolume,
    params: &LesionMatchParams,
) -> Result<EvalReport> {
    pred.geom.check_same_grid(&truth.geom, "evaluate_case")?;
    let mut regions = Vec::with_capacity(REPORT_REGIONS.len());
    for r in REPORT_REGIONS {
        let p = derive_region(pred, r);
        let t = derive_region(truth, r);
        regions.push((
            r,
            RegionMetrics {
                dice: dice(&p, &t)?,
                lesionwise_dice: lesionwise_dice(&p, &t, params)?,
                hd95_mm: hd95(&p, &t)?,
                pred_empty: p.is_empty(),
                truth_empty: t.is_empty(),
            },
        ));
    }
    Ok(EvalReport { case_id: case_id.to_string(), regions })
}

/// Cohort means and empty-mask counts. HD95 means skip sentinel entries.
pub fn aggregate(reports: &[EvalReport]) -> Result<CohortSummary> {
    if reports.is_empty() {
        return Err(Error::Config("no reports to aggregate".into()));
    }
    let n = reports.len();
    let mut regions = Vec::with_capacity(REPORT_REGIONS.len());
    for r in REPORT_REGIONS {
        let mut dice_sum = 0.0;
        let mut lw_sum = 0.0;
        let mut hd_sum = 0.0;
        let mut hd_n = 0usize;
        let mut pred_empty = 0usize;
        let mut truth_empty = 0usize;
        for report in reports {
            let m = report.region(r);
            dice_sum += m.dice;
            lw_sum += m.lesionwise_dice;
            if let Some(h) = m.hd95_mm {
                hd_sum += h;
                hd_n += 1;
            }
            pred_empty += m.pred_empty as usize;
            truth_empty += m.truth_empty as usize;
        }
        regions.push((
            r,
            RegionSummary {
                mean_dice: dice_sum / n as f64,
                mean_lesionwise_dice: lw_sum / n as f64,
                mean_hd95_mm: (hd_n > 0).then(|| hd_sum / hd_n as f64),
                hd95_defined: hd_n,
                pred_empty_count: pred_empty,
                truth_empty_count: truth_empty,
            },
        ));
    }
    Ok(CohortSummary { n_cases: n, regions })
}
