//! `predict`: fold-ensembled inference for the selected architecture over
//! the configured split, writing label NIfTIs, a predictions manifest, and
//! (for the cascade) per-case provenance records.

use crate::config::{Architecture, PredictSplit, RunConfig};
use crate::manifest::{CaseEntry, CohortManifest, PredictionEntry, PredictionManifest, Split};
use rayon::prelude::*;
use segcascade_core::cascade::{
    run_baseline, run_cascade, BaselineArch, BaselineNets, CascadeProvenance, FoldEnsemble,
};
use segcascade_core::error::Result;
use segcascade_core::labels::LabelVolume;
use segcascade_core::nifti::write_nifti_file;
use std::io::Write;
use std::path::PathBuf;

use super::load_fold_nets;

fn selected<'a>(manifest: &'a CohortManifest, split: PredictSplit) -> Vec<&'a CaseEntry> {
    match split {
        PredictSplit::Train => manifest.split_cases(Split::Train),
        PredictSplit::Val => manifest.split_cases(Split::Val),
        PredictSplit::All => manifest.cases.iter().collect(),
    }
}

pub fn run(cfg: &RunConfig) -> Result<PathBuf> {
    let manifest = CohortManifest::load(cfg.normalized_dir().join("manifest.json"))?;
    let entries = selected(&manifest, cfg.predict_split);
    let out_dir = cfg.predictions_dir();
    std::fs::create_dir_all(&out_dir)?;

    let predictions: Vec<(PredictionEntry, Option<CascadeProvenance>)> = match cfg.architecture
    {
        Architecture::Cascade => {
            let plan = &cfg.cascade;
            let s1 = FoldEnsemble { nets: load_fold_nets(cfg, "resenc", &plan.stage1.net_config)? };
            let s2a =
                FoldEnsemble { nets: load_fold_nets(cfg, "stage2a", &plan.stage2a.net_config)? };
            let s2b =
                FoldEnsemble { nets: load_fold_nets(cfg, "stage2b", &plan.stage2b.net_config)? };
            entries
                .par_iter()
                .map(|entry| -> Result<_> {
                    let study = entry.load_study()?;
                    let (labels, prov) = run_cascade(plan, &s1, &s2a, &s2b, &study)?;
                    let path = write_prediction(&out_dir, entry, &labels)?;
                    Ok((
                        PredictionEntry {
                            case_id: entry.case_id.clone(),
                            pred: path,
                            truth: entry.truth.clone(),
                        },
                        Some(prov),
                    ))
                })
                .collect::<Result<_>>()?
        }
        baseline => {
            let arch = match baseline {
                Architecture::Resenc => BaselineArch::Resenc,
                Architecture::Default => BaselineArch::Default,
                Architecture::Lowres => BaselineArch::Lowres,
                Architecture::MultiEnsemble => BaselineArch::MultiEnsemble,
                Architecture::Cascade => unreachable!(),
            };
            let resenc_cfg = cfg.cascade.stage1.net_config.clone();
            let plain_cfg = segcascade_core::cascade::baseline_spec(false).net_config;
            let want_resenc =
                matches!(arch, BaselineArch::Resenc | BaselineArch::MultiEnsemble);
            let want_plain =
                matches!(arch, BaselineArch::Default | BaselineArch::MultiEnsemble);
            let want_lowres =
                matches!(arch, BaselineArch::Lowres | BaselineArch::MultiEnsemble);
            let nets = BaselineNets {
                resenc: if want_resenc {
                    load_fold_nets(cfg, "resenc", &resenc_cfg)?
                } else {
                    vec![]
                },
                plain: if want_plain { load_fold_nets(cfg, "default", &plain_cfg)? } else { vec![] },
                lowres: if want_lowres {
                    load_fold_nets(cfg, "lowres", &plain_cfg)?
                } else {
                    vec![]
                },
                lowres_factor: cfg.lowres_factor,
            };
            entries
                .par_iter()
                .map(|entry| -> Result<_> {
                    let study = entry.load_study()?;
                    let (_, labels) = run_baseline(arch, &nets, &study)?;
                    let path = write_prediction(&out_dir, entry, &labels)?;
                    Ok((
                        PredictionEntry {
                            case_id: entry.case_id.clone(),
                            pred: path,
                            truth: entry.truth.clone(),
                        },
                        None,
                    ))
                })
                .collect::<Result<_>>()?
        }
    };

    let mut provenance_file = std::fs::File::create(out_dir.join("provenance.jsonl"))?;
    let mut cases = Vec::with_capacity(predictions.len());
    for (entry, prov) in predictions {
        if let Some(p) = prov {
            writeln!(provenance_file, "{}", serde_json::to_string(&p)?)?;
        }
        cases.push(entry);
    }
    let pm = PredictionManifest { architecture: cfg.architecture.as_str().to_string(), cases };
    let path = out_dir.join("manifest.json");
    pm.save(&path)?;
    Ok(path)
}

fn write_prediction(
    out_dir: &std::path::Path,
    entry: &CaseEntry,
    labels: &LabelVolume,
) -> Result<PathBuf> {
    let path = out_dir.join(format!("{}_pred.nii", entry.case_id));
    write_nifti_file(&path, &labels.to_volume(), None)?;
    Ok(path)
}
