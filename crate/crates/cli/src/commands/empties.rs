//! `report-empties`: per-region counts of empty predicted and truth masks
//! over a prediction set, in "k/n" rows.

use crate::config::RunConfig;
use crate::manifest::PredictionManifest;
use rayon::prelude::*;
use segcascade_core::error::Result;
use segcascade_core::eval::REPORT_REGIONS;
use segcascade_core::labels::{derive_region, LabelVolume};
use segcascade_core::nifti::read_nifti_file;
use serde::Serialize;
use std::path::PathBuf;

use super::region_display;

#[derive(Debug, Clone, Serialize)]
pub struct EmptyCount {
    pub region: String,
    pub count: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EmptiesReport {
    pub architecture: String,
    pub n_cases: usize,
    pub predicted_empty: Vec<EmptyCount>,
    pub truth_empty: Vec<EmptyCount>,
}

impl EmptiesReport {
    /// Rows like "CC 156/261", one per region, predictions first.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("predicted empty masks:\n");
        for c in &self.predicted_empty {
            out.push_str(&format!("{} {}/{}\n", c.region, c.count, c.total));
        }
        out.push_str("truth empty masks:\n");
        for c in &self.truth_empty {
            out.push_str(&format!("{} {}/{}\n", c.region, c.count, c.total));
        }
        out
    }
}

pub fn compute(cfg: &RunConfig, label_map: Option<&[(u8, u8)]>) -> Result<EmptiesReport> {
    let pm = PredictionManifest::load(cfg.predictions_dir().join("manifest.json"))?;
    let flags: Vec<(Vec<bool>, Vec<bool>)> = pm
        .cases
        .par_iter()
        .map(|entry| -> Result<(Vec<bool>, Vec<bool>)> {
            let (_, pred_vol) = read_nifti_file(&entry.pred)?;
            let (_, truth_vol) = read_nifti_file(&entry.truth)?;
            let pred = LabelVolume::from_volume(&pred_vol, label_map)?;
            let truth = LabelVolume::from_volume(&truth_vol, label_map)?;
            let empty_of = |lv: &LabelVolume| {
                REPORT_REGIONS.iter().map(|&r| derive_region(lv, r).is_empty()).collect()
            };
            Ok((empty_of(&pred), empty_of(&truth)))
        })
        .collect::<Result<_>>()?;

    let n = flags.len();
    let count_where = |pick: fn(&(Vec<bool>, Vec<bool>)) -> &Vec<bool>| -> Vec<EmptyCount> {
        REPORT_REGIONS
            .iter()
            .enumerate()
            .map(|(i, &r)| EmptyCount {
                region: region_display(r).to_string(),
                count: flags.iter().filter(|f| pick(f)[i]).count(),
                total: n,
            })
            .collect()
    };
    Ok(EmptiesReport {
        architecture: pm.architecture,
        n_cases: n,
        predicted_empty: count_where(|f| &f.0),
        truth_empty: count_where(|f| &f.1),
    })
}

pub fn run(cfg: &RunConfig, label_map: Option<&[(u8, u8)]>) -> Result<(EmptiesReport, PathBuf)> {
    let report = compute(cfg, label_map)?;
    let out_dir = cfg.reports_dir();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("empties.txt"), report.to_table())?;
    let json_path = out_dir.join("empties.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    Ok((report, json_path))
}
