//! `train`: per-fold optimization for the selected architecture. The
//! cascade trains stage 1 (the residual-encoder baseline), generates
//! cross-validated stage-1 priors for every training case (each case is
//! predicted by the fold model that held it out), then trains stages 2a
//! and 2b on those priors.

use crate::config::{Architecture, RunConfig};
use crate::manifest::{CohortManifest, Split};
use rayon::prelude::*;
use segcascade_core::cascade::{baseline_spec, build_stage_inputs, forward_padded, StageSpec};
use segcascade_core::checkpoint;
use segcascade_core::error::{Error, Result};
use segcascade_core::labels::{argmax_labels, ChannelStack, LabelVolume};
use segcascade_core::resample::{resample, resample_labels};
use segcascade_core::train::{kfold_split, train, EpochRecord, FoldSplit, TrainCase};
use segcascade_core::unet::build_network;
use segcascade_core::volume::{Modality, MultiModalStudy};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::{ckpt_path, fold_seed, history_path, pad_train_case, stage_train_case};

struct LoadedCase {
    id: String,
    study: MultiModalStudy,
    truth: LabelVolume,
}

fn load_train_cases(
    manifest: &CohortManifest,
    label_map: Option<&[(u8, u8)]>,
) -> Result<Vec<LoadedCase>> {
    manifest
        .split_cases(Split::Train)
        .par_iter()
        .map(|entry| -> Result<LoadedCase> {
            let study = entry.load_study()?;
            let (_, truth_vol) = segcascade_core::nifti::read_nifti_file(&entry.truth)?;
            let truth = LabelVolume::from_volume(&truth_vol, label_map)?;
            study.geom().check_same_grid(&truth.geom, &entry.case_id)?;
            Ok(LoadedCase { id: entry.case_id.clone(), study, truth })
        })
        .collect()
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,lr,loss")?;
    for r in history {
        writeln!(f, "{},{},{}", r.epoch, r.lr, r.loss)?;
    }
    Ok(())
}

/// Train every fold of one configuration; `dataset_for` builds the fold's
/// training cases from the held-in case list.
fn train_config<F>(cfg: &RunConfig, name: &str, split: &FoldSplit, dataset_for: F) -> Result<()>
where
    F: Fn(&[String]) -> Result<Vec<TrainCase>> + Sync,
{
    let spec_config = match name {
        // stage 1 IS the resenc model; overrides flow through the plan
        "resenc" => cfg.cascade.stage1.net_config.clone(),
        "default" | "lowres" => baseline_spec(false).net_config,
        "stage2a" => cfg.cascade.stage2a.net_config.clone(),
        "stage2b" => cfg.cascade.stage2b.net_config.clone(),
        other => return Err(Error::Config(format!("unknown configuration {other}"))),
    };
    (0..cfg.folds)
        .into_par_iter()
        .map(|fold| -> Result<()> {
            let ids = split.training(fold);
            let dataset = dataset_for(&ids)?;
            let seed = fold_seed(cfg.seed, name, fold);
            let net = build_network(&spec_config, seed)?;
            let tc = cfg.train.to_train_config(seed);
            match train(net, &dataset, &tc) {
                Ok(out) => {
                    checkpoint::save(
                        ckpt_path(cfg, name, fold, "final"),
                        &out.final_net,
                        seed,
                        tc.epochs as u32,
                    )?;
                    checkpoint::save(
                        ckpt_path(cfg, name, fold, "best"),
                        &out.best_net,
                        seed,
                        out.best_epoch as u32,
                    )?;
                    write_history(&history_path(cfg, name, fold), &out.history)
                }
                Err(abort) => {
                    write_history(&history_path(cfg, name, fold), &abort.partial_history)?;
                    Err(abort.error)
                }
            }
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(())
}

fn fullres_dataset(
    spec: &StageSpec,
    cases: &[LoadedCase],
    ids: &[String],
    priors: Option<&BTreeMap<String, LabelVolume>>,
) -> Result<Vec<TrainCase>> {
    ids.iter()
        .map(|id| {
            let case = cases
                .iter()
                .find(|c| c.id == *id)
                .ok_or_else(|| Error::MissingArtifact(format!("train case {id}")))?;
            let prior = match priors {
                None => None,
                Some(map) => Some(map.get(id).ok_or_else(|| {
                    Error::MissingArtifact(format!("stage-1 prior for {id}"))
                })?),
            };
            stage_train_case(spec, id, &case.study, &case.truth, prior)
        })
        .collect()
}

fn lowres_dataset(
    spec: &StageSpec,
    cases: &[LoadedCase],
    ids: &[String],
    factor: f64,
) -> Result<Vec<TrainCase>> {
    let mult = spec.net_config.stride_multiple();
    ids.iter()
        .map(|id| {
            let case = cases
                .iter()
                .find(|c| c.id == *id)
                .ok_or_else(|| Error::MissingArtifact(format!("train case {id}")))?;
            let mut down = case.study.clone();
            for m in Modality::ALL {
                *down.volume_mut(m) = resample(case.study.volume(m), factor);
            }
            let truth = resample_labels(&case.truth, factor);
            let tc = stage_train_case(spec, id, &down, &truth, None)?;
            Ok(pad_train_case(&tc, mult))
        })
        .collect()
}

/// Stage-1 predictions for every training case from the fold model that
/// held it out, preventing oracle priors from leaking into stage-2
/// training.
fn crossval_priors(
    cfg: &RunConfig,
    cases: &[LoadedCase],
    split: &FoldSplit,
) -> Result<BTreeMap<String, LabelVolume>> {
    let spec = &cfg.cascade.stage1;
    let nets = super::load_fold_nets(cfg, "resenc", &spec.net_config)?;
    let priors: Vec<(String, LabelVolume)> = cases
        .par_iter()
        .map(|case| -> Result<(String, LabelVolume)> {
            let fold = *split.assignments.get(&case.id).ok_or_else(|| {
                Error::MissingArtifact(format!("{} missing from fold split", case.id))
            })?;
            let inputs = build_stage_inputs(spec, &case.study, None)?;
            let probs = forward_padded(&nets[fold], &inputs)?;
            let m: usize = probs.shape[1..].iter().product();
            let stack = ChannelStack {
                geom: case.study.geom().clone(),
                names: spec.channel_names(),
                channels: (0..probs.shape[0])
                    .map(|c| probs.data[c * m..(c + 1) * m].to_vec())
                    .collect(),
            };
            let labels = argmax_labels(&stack, &spec.code_map())?;
            Ok((case.id.clone(), labels))
        })
        .collect::<Result<_>>()?;
    Ok(priors.into_iter().collect())
}

pub fn run(cfg: &RunConfig, label_map: Option<&[(u8, u8)]>) -> Result<()> {
    let manifest_path = cfg.normalized_dir().join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} (run `normalize` first)",
            manifest_path.display()
        )));
    }
    let manifest = CohortManifest::load(&manifest_path)?;
    let cases = load_train_cases(&manifest, label_map)?;
    if cases.is_empty() {
        return Err(Error::Config("no training cases in the manifest".into()));
    }
    std::fs::create_dir_all(cfg.checkpoints_dir())?;

    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let split = kfold_split(&ids, cfg.folds, cfg.seed)?;
    std::fs::write(
        cfg.checkpoints_dir().join("folds.json"),
        serde_json::to_string_pretty(&split)?,
    )?;

    let resenc = cfg.cascade.stage1.clone();
    let plain = baseline_spec(false);
    match cfg.architecture {
        Architecture::Resenc => {
            train_config(cfg, "resenc", &split, |ids| {
                fullres_dataset(&resenc, &cases, ids, None)
            })?;
        }
        Architecture::Default => {
            train_config(cfg, "default", &split, |ids| {
                fullres_dataset(&plain, &cases, ids, None)
            })?;
        }
        Architecture::Lowres => {
            train_config(cfg, "lowres", &split, |ids| {
                lowres_dataset(&plain, &cases, ids, cfg.lowres_factor)
            })?;
        }
        Architecture::MultiEnsemble => {
            train_config(cfg, "resenc", &split, |ids| {
                fullres_dataset(&resenc, &cases, ids, None)
            })?;
            train_config(cfg, "default", &split, |ids| {
                fullres_dataset(&plain, &cases, ids, None)
            })?;
            train_config(cfg, "lowres", &split, |ids| {
                lowres_dataset(&plain, &cases, ids, cfg.lowres_factor)
            })?;
        }
        Architecture::Cascade => {
            train_config(cfg, "resenc", &split, |ids| {
                fullres_dataset(&cfg.cascade.stage1, &cases, ids, None)
            })?;
            let priors = crossval_priors(cfg, &cases, &split)?;
            train_config(cfg, "stage2a", &split, |ids| {
                fullres_dataset(&cfg.cascade.stage2a, &cases, ids, Some(&priors))
            })?;
            train_config(cfg, "stage2b", &split, |ids| {
                fullres_dataset(&cfg.cascade.stage2b, &cases, ids, Some(&priors))
            })?;
        }
    }
    Ok(())
}
