//! `normalize`: per-case, per-modality Gaussian-peak normalization.
//! Writes normalized copies, a JSONL record stream, and a manifest pointing
//! at the normalized volumes.

use crate::config::RunConfig;
use crate::manifest::CohortManifest;
use rayon::prelude::*;
use segcascade_core::error::Result;
use segcascade_core::nifti::write_nifti_file;
use segcascade_core::normalize::{normalize_study, NormalizationRecord};
use segcascade_core::volume::Modality;
use serde::Serialize;
use std::io::Write;
use std::path::PathBuf;

#[derive(Serialize)]
struct RecordLine<'a> {
    case_id: &'a str,
    #[serde(flatten)]
    record: &'a NormalizationRecord,
}

pub fn run(cfg: &RunConfig) -> Result<PathBuf> {
    let manifest = CohortManifest::load(cfg.paths.data_dir.join("manifest.json"))?;
    let out_dir = cfg.normalized_dir();
    std::fs::create_dir_all(&out_dir)?;

    let results: Vec<(crate::manifest::CaseEntry, Vec<NormalizationRecord>)> = manifest
        .cases
        .par_iter()
        .map(|entry| -> Result<_> {
            let study = entry.load_study()?;
            let (normalized, records) = normalize_study(&study, cfg.histogram_bins)?;
            let mut new_entry = entry.clone();
            for m in Modality::ALL {
                let path = out_dir.join(format!("{}_{}.nii", entry.case_id, m.name()));
                write_nifti_file(&path, normalized.volume(m), None)?;
                new_entry.volumes.insert(m.name().to_string(), path);
            }
            Ok((new_entry, records))
        })
        .collect::<Result<_>>()?;

    let mut records_file = std::fs::File::create(out_dir.join("records.jsonl"))?;
    let mut cases = Vec::with_capacity(results.len());
    for (entry, records) in results {
        for record in &records {
            let line = RecordLine { case_id: &entry.case_id, record };
            writeln!(records_file, "{}", serde_json::to_string(&line)?)?;
        }
        cases.push(entry);
    }

    let normalized = CohortManifest { seed: manifest.seed, cases };
    let path = out_dir.join("manifest.json");
    normalized.save(&path)?;
    Ok(path)
}
