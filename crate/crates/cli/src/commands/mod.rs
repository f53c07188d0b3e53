//! Pipeline commands. Each one reads artifacts produced by its
//! predecessors through manifests, never by directory scanning, and writes
//! byte-deterministic outputs for a fixed config and seed.

pub mod empties;
pub mod evaluate;
pub mod generate;
pub mod normalize;
pub mod predict;
pub mod train;

use crate::config::RunConfig;
use segcascade_core::cascade::{build_stage_inputs, StageSpec};
use segcascade_core::checkpoint;
use segcascade_core::error::{Error, Result};
use segcascade_core::labels::{LabelVolume, RegionId};
use segcascade_core::rng::derive_seed;
use segcascade_core::tensor::Tensor;
use segcascade_core::train::TrainCase;
use segcascade_core::unet::{Network, NetworkConfig};
use segcascade_core::volume::MultiModalStudy;
use std::path::PathBuf;

/// Stream tags separating the per-configuration training seeds.
pub mod arch_stream {
    pub const RESENC: u64 = 0x11;
    pub const DEFAULT: u64 = 0x12;
    pub const LOWRES: u64 = 0x13;
    pub const STAGE2A: u64 = 0x21;
    pub const STAGE2B: u64 = 0x22;

    pub fn for_name(name: &str) -> u64 {
        match name {
            "resenc" => RESENC,
            "default" => DEFAULT,
            "lowres" => LOWRES,
            "stage2a" => STAGE2A,
            "stage2b" => STAGE2B,
            other => unreachable!("unknown config name {other}"),
        }
    }
}

/// Per-fold training seed, derived from the run seed, the configuration
/// name, and the fold index.
pub fn fold_seed(run_seed: u64, name: &str, fold: usize) -> u64 {
    derive_seed(derive_seed(run_seed, arch_stream::for_name(name)), fold as u64)
}

pub fn ckpt_path(cfg: &RunConfig, name: &str, fold: usize, which: &str) -> PathBuf {
    cfg.checkpoints_dir().join(format!("{name}_fold{fold}_{which}.ckpt"))
}

pub fn history_path(cfg: &RunConfig, name: &str, fold: usize) -> PathBuf {
    cfg.checkpoints_dir().join(format!("{name}_fold{fold}_history.csv"))
}

/// Load the final checkpoints of every fold of one configuration, failing
/// closed when a checkpoint's network config disagrees with `expected`.
pub fn load_fold_nets(
    cfg: &RunConfig,
    name: &str,
    expected: &NetworkConfig,
) -> Result<Vec<Network<f32>>> {
    let mut nets = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let path = ckpt_path(cfg, name, fold, "final");
        let ck = checkpoint::load(&path)?;
        if ck.config != *expected {
            return Err(Error::Config(format!(
                "{}: checkpoint config {:?} disagrees with run config {:?}",
                path.display(),
                ck.config,
                expected
            )));
        }
        nets.push(ck.net);
    }
    Ok(nets)
}

/// Regions whose codes appear in the ground truth, for presence filtering.
pub fn regions_present(truth: &LabelVolume) -> Vec<RegionId> {
    let counts = truth.code_counts();
    [RegionId::ET, RegionId::NET, RegionId::CC, RegionId::ED]
        .into_iter()
        .filter(|r| counts[r.member_codes()[0] as usize] > 0)
        .collect()
}

/// Build one training case for a stage: stacked input channels and targets
/// remapped onto the stage's class indices.
pub fn stage_train_case(
    spec: &StageSpec,
    id: &str,
    study: &MultiModalStudy,
    truth: &LabelVolume,
    prior: Option<&LabelVolume>,
) -> Result<TrainCase> {
    let inputs = build_stage_inputs(spec, study, prior)?;
    let target: Vec<u8> = truth.codes.iter().map(|&c| spec.class_index(c)).collect();
    Ok(TrainCase {
        id: id.to_string(),
        inputs,
        target,
        regions_present: regions_present(truth),
    })
}

/// Zero-pad a case's spatial extents up to a multiple of `mult`; padded
/// target voxels are background.
pub fn pad_train_case(case: &TrainCase, mult: usize) -> TrainCase {
    let c = case.inputs.shape[0];
    let dims = [case.inputs.shape[1], case.inputs.shape[2], case.inputs.shape[3]];
    let padded: [usize; 3] = dims.map(|d| d.div_ceil(mult) * mult);
    if padded == dims {
        return case.clone();
    }
    let mut shape = vec![c];
    shape.extend_from_slice(&padded);
    let mut inputs = Tensor::zeros(&shape);
    let mut target = vec![0u8; padded[0] * padded[1] * padded[2]];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let src_row = (z * dims[1] + y) * dims[2];
            let dst_row = (z * padded[1] + y) * padded[2];
            for cc in 0..c {
                let src = cc * dims[0] * dims[1] * dims[2] + src_row;
                let dst = cc * padded[0] * padded[1] * padded[2] + dst_row;
                inputs.data[dst..dst + dims[2]]
                    .copy_from_slice(&case.inputs.data[src..src + dims[2]]);
            }
            target[dst_row..dst_row + dims[2]]
                .copy_from_slice(&case.target[src_row..src_row + dims[2]]);
        }
    }
    TrainCase {
        id: case.id.clone(),
        inputs,
        target,
        regions_present: case.regions_present.clone(),
    }
}

/// Table-1 column name for a region (NET is reported as NETC).
pub fn region_display(r: RegionId) -> &'static str {
    match r {
        RegionId::NET => "NETC",
        other => other.name(),
    }
}
