//! `evaluate`: per-case metrics over prediction/truth pairs, written as a
//! per-region CSV and a cohort JSON summary with Table-style columns
//! (ET, TC, WT, NETC, CC, ED).

use crate::config::RunConfig;
use crate::manifest::PredictionManifest;
use rayon::prelude::*;
use segcascade_core::error::Result;
use segcascade_core::eval::{aggregate, evaluate_case, EvalReport, RegionSummary, REPORT_REGIONS};
use segcascade_core::labels::{LabelVolume, RegionId};
use segcascade_core::nifti::read_nifti_file;
use serde::Serialize;
use std::io::Write;
use std::path::PathBuf;

use super::region_display;

pub fn load_reports(
    cfg: &RunConfig,
    label_map: Option<&[(u8, u8)]>,
) -> Result<Vec<EvalReport>> {
    let pm = PredictionManifest::load(cfg.predictions_dir().join("manifest.json"))?;
    pm.cases
        .par_iter()
        .map(|entry| -> Result<EvalReport> {
            let (_, pred_vol) = read_nifti_file(&entry.pred)?;
            let (_, truth_vol) = read_nifti_file(&entry.truth)?;
            let pred = LabelVolume::from_volume(&pred_vol, label_map)?;
            let truth = LabelVolume::from_volume(&truth_vol, label_map)?;
            evaluate_case(&entry.case_id, &pred, &truth, &cfg.eval)
        })
        .collect()
}

#[derive(Serialize)]
#[allow(clippy::upper_case_acronyms)]
struct RegionsJson {
    #[serde(rename = "ET")]
    et: RegionSummary,
    #[serde(rename = "TC")]
    tc: RegionSummary,
    #[serde(rename = "WT")]
    wt: RegionSummary,
    #[serde(rename = "NETC")]
    netc: RegionSummary,
    #[serde(rename = "CC")]
    cc: RegionSummary,
    #[serde(rename = "ED")]
    ed: RegionSummary,
}

#[derive(Serialize)]
struct SummaryJson {
    architecture: String,
    n_cases: usize,
    regions: RegionsJson,
}

pub fn run(cfg: &RunConfig, label_map: Option<&[(u8, u8)]>) -> Result<(PathBuf, PathBuf)> {
    let reports = load_reports(cfg, label_map)?;
    let out_dir = cfg.reports_dir();
    std::fs::create_dir_all(&out_dir)?;

    let csv_path = out_dir.join("per_case.csv");
    let mut csv = std::fs::File::create(&csv_path)?;
    writeln!(csv, "case_id,region,dice,lesionwise_dice,hd95_mm,pred_empty,truth_empty")?;
    for report in &reports {
        for r in REPORT_REGIONS {
            let m = report.region(r);
            let hd = m.hd95_mm.map_or(String::new(), |h| format!("{h}"));
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                report.case_id,
                region_display(r),
                m.dice,
                m.lesionwise_dice,
                hd,
                m.pred_empty,
                m.truth_empty
            )?;
        }
    }

    let summary = aggregate(&reports)?;
    let pick = |r: RegionId| summary.region(r).clone();
    let json = SummaryJson {
        architecture: cfg.architecture.as_str().to_string(),
        n_cases: summary.n_cases,
        regions: RegionsJson {
            et: pick(RegionId::ET),
            tc: pick(RegionId::TC),
            wt: pick(RegionId::WT),
            netc: pick(RegionId::NET),
            cc: pick(RegionId::CC),
            ed: pick(RegionId::ED),
        },
    };
    let json_path = out_dir.join("summary.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&json)?)?;
    Ok((csv_path, json_path))
}
