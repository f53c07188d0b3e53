//! `generate`: write the phantom cohort as per-case NIfTI files plus the
//! cohort manifest.

use crate::config::RunConfig;
use crate::manifest::{CaseEntry, CohortManifest, Split};
use rayon::prelude::*;
use segcascade_core::error::Result;
use segcascade_core::nifti::write_nifti_file;
use segcascade_core::phantom::generate_cohort;
use segcascade_core::volume::Modality;
use std::collections::BTreeMap;
use std::path::PathBuf;

pub fn run(cfg: &RunConfig) -> Result<PathBuf> {
    let cases_dir = cfg.paths.data_dir.join("cases");
    std::fs::create_dir_all(&cases_dir)?;
    let sizes = cfg.phantom.cohort;
    let total = sizes.n_train + sizes.n_val;
    let cohort = generate_cohort(&cfg.phantom.spec, total, cfg.seed)?;

    let entries: Vec<CaseEntry> = cohort
        .par_iter()
        .enumerate()
        .map(|(i, case)| -> Result<CaseEntry> {
            let id = &case.study.case_id;
            let mut volumes = BTreeMap::new();
            for m in Modality::ALL {
                let path = cases_dir.join(format!("{id}_{}.nii", m.name()));
                write_nifti_file(&path, case.study.volume(m), None)?;
                volumes.insert(m.name().to_string(), path);
            }
            let truth_path = cases_dir.join(format!("{id}_truth.nii"));
            write_nifti_file(&truth_path, &case.truth.to_volume(), None)?;
            Ok(CaseEntry {
                case_id: id.clone(),
                seed: case.seed,
                split: if i < sizes.n_train { Split::Train } else { Split::Val },
                has_cc: case.has_cc,
                has_ed: case.has_ed,
                volumes,
                truth: truth_path,
            })
        })
        .collect::<Result<_>>()?;

    let manifest = CohortManifest { seed: cfg.seed, cases: entries };
    let manifest_path = cfg.paths.data_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}
