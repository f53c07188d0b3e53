//! Optimization loop (SGD + Nesterov, polynomial decay), minimal
//! augmentation, k-fold splitting, and probability ensembling.

use crate::error::{Error, Result};
use crate::labels::{ChannelStack, RegionId};
use crate::optim::{poly_lr, sgd_nesterov_step, OptimizerState};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tensor::Tensor;
use crate::unet::{gradients, Batch, Network};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const NOISE_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    /// Seeded per-sample axis flips (p = 0.5 each) applied jointly to image
    /// and target, plus additive Gaussian intensity noise on images only.
    Minimal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub poly_exponent: f64,
    pub seed: u64,
    pub augmentation: Augmentation,
    /// Keep only cases containing at least one of these regions.
    pub presence_filter: Option<Vec<RegionId>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            batch_size: 2,
            lr0: 0.01,
            momentum: 0.99,
            poly_exponent: 0.9,
            seed: 0,
            augmentation: Augmentation::Minimal,
            presence_filter: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 {} must be > 0", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Case-to-fold assignment; folds partition the case set with sizes
/// differing by at most one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Cases held out in `fold`.
    pub fn held_out(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Training cases for `fold` (everything not held out).
    pub fn training(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Seeded shuffle then round-robin assignment.
pub fn kfold_split(case_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if case_ids.len() < k || k == 0 {
        return Err(Error::TooFewCases { n: case_ids.len(), k });
    }
    let mut order: Vec<usize> = (0..case_ids.len()).collect();
    order.shuffle(&mut rng_for(seed, stream::FOLDS));
    let mut assignments = BTreeMap::new();
    for (pos, &idx) in order.iter().enumerate() {
        assignments.insert(case_ids[idx].clone(), pos % k);
    }
    Ok(FoldSplit { k, assignments })
}

/// One training case: input channels, target class codes, and which regions
/// the ground truth contains (for presence filtering).
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub id: String,
    /// (channels, d0, d1, d2)
    pub inputs: Tensor<f32>,
    pub target: Vec<u8>,
    pub regions_present: Vec<RegionId>,
}

fn flip_axis_in_place(data: &mut [f32], dims: [usize; 3], channels: usize, axis: usize) {
    let m = dims[0] * dims[1] * dims[2];
    for c in 0..channels {
        let ch = &mut data[c * m..(c + 1) * m];
        flip_axis_codes(ch, dims, axis);
    }
}

fn flip_axis_codes<T: Copy>(data: &mut [T], dims: [usize; 3], axis: usize) {
    let [d0, d1, d2] = dims;
    let idx = |a: usize, b: usize, c: usize| (a * d1 + b) * d2 + c;
    match axis {
        0 => {
            for a in 0..d0 / 2 {
                for b in 0..d1 {
                    for c in 0..d2 {
                        data.swap(idx(a, b, c), idx(d0 - 1 - a, b, c));
                    }
                }
            }
        }
        1 => {
            for a in 0..d0 {
                for b in 0..d1 / 2 {
                    for c in 0..d2 {
                        data.swap(idx(a, b, c), idx(a, d1 - 1 - b, c));
                    }
                }
            }
        }
        _ => {
            for a in 0..d0 {
                for b in 0..d1 {
                    for c in 0..d2 / 2 {
                        data.swap(idx(a, b, c), idx(a, b, d2 - 1 - c));
                    }
                }
            }
        }
    }
}

/// Minimal augmentation; `none` returns the batch unchanged.
pub fn augment_batch(batch: &Batch<f32>, mode: Augmentation, seed: u64) -> Batch<f32> {
    if mode == Augmentation::None {
        return batch.clone();
    }
    let mut out = batch.clone();
    let n = out.inputs.shape[0];
    let channels = out.inputs.shape[1];
    let dims = [out.inputs.shape[2], out.inputs.shape[3], out.inputs.shape[4]];
    let m = dims[0] * dims[1] * dims[2];
    let mut rng = rng_for(seed, stream::AUGMENT);
    let noise = Normal::new(0.0f64, NOISE_SIGMA).expect("valid sigma");
    for ni in 0..n {
        let img = &mut out.inputs.data[ni * channels * m..(ni + 1) * channels * m];
        let tgt = &mut out.targets[ni * m..(ni + 1) * m];
        for axis in 0..3 {
            if rng.random::<f64>() < 0.5 {
                flip_axis_in_place(img, dims, channels, axis);
                flip_axis_codes(tgt, dims, axis);
            }
        }
        for v in img.iter_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_net: Network<f32>,
    pub best_net: Network<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Training failure carrying the history gathered before the abort.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub partial_history: Vec<EpochRecord>,
}

impl From<TrainAbort> for Error {
    fn from(a: TrainAbort) -> Error {
        a.error
    }
}

fn assemble_batch(cases: &[&TrainCase]) -> Batch<f32> {
    let c = cases[0].inputs.shape[0];
    let dims = &cases[0].inputs.shape[1..];
    let mut shape = vec![cases.len(), c];
    shape.extend_from_slice(dims);
    let mut inputs = Vec::with_capacity(shape.iter().product());
    let mut targets = Vec::new();
    for case in cases {
        inputs.extend_from_slice(&case.inputs.data);
        targets.extend_from_slice(&case.target);
    }
    Batch { inputs: Tensor::from_vec(&shape, inputs), targets }
}

/// Full optimization run: epochs x ceil(n/batch) seeded steps. Returns the
/// best-loss and final parameters plus the per-epoch history.
pub fn train(
    net: Network<f32>,
    dataset: &[TrainCase],
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let abort = |error: Error, history: &[EpochRecord]| TrainAbort {
        error,
        partial_history: history.to_vec(),
    };
    if let Err(e) = cfg.validate() {
        return Err(abort(e, &[]));
    }
    let working: Vec<&TrainCase> = match &cfg.presence_filter {
        None => dataset.iter().collect(),
        Some(regions) => dataset
            .iter()
            .filter(|case| regions.iter().any(|r| case.regions_present.contains(r)))
            .collect(),
    };
    if working.is_empty() {
        return Err(abort(
            Error::Config("training set empty after presence filter".into()),
            &[],
        ));
    }

    let mut net = net;
    let mut state = OptimizerState::new(&net);
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Network<f32>, usize)> = None;
    let weights = (1.0f32, 1.0f32);

    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, cfg.epochs, cfg.lr0, cfg.poly_exponent);
        let mut order: Vec<usize> = (0..working.len()).collect();
        order.shuffle(&mut rng_for(derive_seed(cfg.seed, epoch as u64), stream::BATCH_ORDER));

        let mut epoch_loss = 0.0f64;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let cases: Vec<&TrainCase> = chunk.iter().map(|&i| working[i]).collect();
            let batch = assemble_batch(&cases);
            let batch = augment_batch(
                &batch,
                cfg.augmentation,
                derive_seed(cfg.seed, (epoch * 1_000_003 + step) as u64),
            );
            let (loss, grads) = match gradients(&net, &batch, weights) {
                Ok(r) => r,
                Err(Error::NonFiniteLoss { .. }) => {
                    return Err(abort(Error::NonFiniteLoss { epoch }, &history));
                }
                Err(e) => return Err(abort(e, &history)),
            };
            if let Err(e) = sgd_nesterov_step(
                &mut net,
                &grads,
                &mut state,
                lr as f32,
                cfg.momentum as f32,
            ) {
                return Err(abort(e, &history));
            }
            epoch_loss += loss as f64;
            steps += 1;
        }
        state.epoch = epoch + 1;
        let mean_loss = epoch_loss / steps as f64;
        history.push(EpochRecord { epoch, lr, loss: mean_loss });
        if best.as_ref().is_none_or(|(b, _, _)| mean_loss < *b) {
            best = Some((mean_loss, net.clone(), epoch));
        }
    }

    let (_, best_net, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { final_net: net, best_net, best_epoch, history })
}

/// Voxelwise arithmetic mean of probability stacks.
pub fn ensemble_probs(stacks: &[ChannelStack]) -> Result<ChannelStack> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::GeometryMismatch("no stacks to ensemble".into()))?;
    for s in &stacks[1..] {
        first.geom.check_same_grid(&s.geom, "ensemble")?;
        if s.names != first.names {
            return Err(Error::GeometryMismatch(format!(
                "channel order {:?} vs {:?}",
                s.names, first.names
            )));
        }
    }
    let scale = 1.0 / stacks.len() as f64;
    let mut channels = Vec::with_capacity(first.channels.len());
    for c in 0..first.channels.len() {
        let mut acc = vec![0.0f64; first.channels[c].len()];
        for s in stacks {
            for (a, &v) in acc.iter_mut().zip(s.channels[c].iter()) {
                *a += v as f64;
            }
        }
        channels.push(acc.into_iter().map(|v| (v * scale) as f32).collect());
    }
    Ok(ChannelStack { geom: first.geom.clone(), names: first.names.clone(), channels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    #[test]
    fn test_kfold_261_by_5() {
        let ids: Vec<String> = (0..261).map(|i| format!("case_{i:03}")).collect();
        let split = kfold_split(&ids, 5, 9).unwrap();
        let mut sizes = split.fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![52, 52, 52, 52, 53]);
    }

    #[test]
    fn test_kfold_leave_one_out() {
        let ids: Vec<String> = (0..7).map(|i| format!("c{i}")).collect();
        let split = kfold_split(&ids, 7, 1).unwrap();
        assert_eq!(split.fold_sizes(), vec![1; 7]);
    }

    #[test]
    fn test_kfold_partition_property() {
        use rand::Rng;
        let mut rng = rng_for(5, 0xF01D);
        for _ in 0..200 {
            let n = rng.random_range(2..200usize);
            let k = rng.random_range(2..=n.min(17));
            let seed = rng.random::<u64>();
            let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
            let split = kfold_split(&ids, k, seed).unwrap();
            assert_eq!(split.assignments.len(), n, "partition covers all cases");
            let sizes = split.fold_sizes();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1, "n={n} k={k}: sizes {sizes:?}");
            assert_eq!(sizes.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn test_kfold_too_few_cases() {
        let ids: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        assert!(matches!(kfold_split(&ids, 5, 0), Err(Error::TooFewCases { n: 3, k: 5 })));
    }

    fn demo_batch() -> Batch<f32> {
        let m = 4 * 4 * 4;
        Batch {
            inputs: Tensor::from_vec(
                &[2, 2, 4, 4, 4],
                (0..2 * 2 * m).map(|i| ((i * 23 + 7) % 31) as f32 * 0.1).collect(),
            ),
            targets: (0..2 * m).map(|v| ((v * 13 + 1) % 3) as u8).collect(),
        }
    }

    #[test]
    fn test_augment_none_is_identity() {
        let b = demo_batch();
        let out = augment_batch(&b, Augmentation::None, 3);
        assert_eq!(out.inputs.data, b.inputs.data);
        assert_eq!(out.targets, b.targets);
    }

    #[test]
    fn test_augment_preserves_class_counts() {
        let b = demo_batch();
        let out = augment_batch(&b, Augmentation::Minimal, 3);
        let count = |ts: &[u8]| {
            let mut c = [0usize; 3];
            for &t in ts {
                c[t as usize] += 1;
            }
            c
        };
        assert_eq!(count(&out.targets), count(&b.targets));
    }

    #[test]
    fn test_augment_is_deterministic() {
        let b = demo_batch();
        let a1 = augment_batch(&b, Augmentation::Minimal, 7);
        let a2 = augment_batch(&b, Augmentation::Minimal, 7);
        assert_eq!(a1.inputs.data, a2.inputs.data);
        assert_eq!(a1.targets, a2.targets);
    }

    fn tiny_dataset(n: usize) -> Vec<TrainCase> {
        (0..n)
            .map(|i| {
                let m = 4 * 4 * 4;
                TrainCase {
                    id: format!("c{i}"),
                    inputs: Tensor::from_vec(
                        &[2, 4, 4, 4],
                        (0..2 * m).map(|j| ((i * 7 + j * 3) % 11) as f32 * 0.1).collect(),
                    ),
                    target: (0..m).map(|v| ((v + i) % 3) as u8).collect(),
                    regions_present: if i % 2 == 0 {
                        vec![RegionId::ET, RegionId::CC]
                    } else {
                        vec![RegionId::ET]
                    },
                }
            })
            .collect()
    }

    fn tiny_net() -> Network<f32> {
        let cfg = crate::unet::NetworkConfig {
            in_channels: 2,
            out_classes: 3,
            depth: 2,
            base_width: 4,
            residual_encoder: false,
        };
        crate::unet::build_network(&cfg, 3).unwrap()
    }

    #[test]
    fn test_single_epoch_two_cases_one_step() {
        let cfg = TrainConfig { epochs: 1, seed: 4, augmentation: Augmentation::None, ..Default::default() };
        let out = train(tiny_net(), &tiny_dataset(2), &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn test_presence_filter_selects_cases() {
        let data = tiny_dataset(10);
        let with_cc =
            data.iter().filter(|c| c.regions_present.contains(&RegionId::CC)).count();
        assert_eq!(with_cc, 5);
        let cfg = TrainConfig {
            epochs: 1,
            presence_filter: Some(vec![RegionId::CC]),
            augmentation: Augmentation::None,
            seed: 1,
            ..Default::default()
        };
        // 5 cases at batch 2 -> 3 steps; verify by running and checking history exists
        let out = train(tiny_net(), &data, &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        let cfg_none = TrainConfig {
            presence_filter: Some(vec![RegionId::ED]),
            ..cfg
        };
        assert!(train(tiny_net(), &data, &cfg_none).is_err());
    }

    #[test]
    fn test_training_is_bit_reproducible() {
        let cfg = TrainConfig { epochs: 3, seed: 11, ..Default::default() };
        let a = train(tiny_net(), &tiny_dataset(4), &cfg).unwrap();
        let b = train(tiny_net(), &tiny_dataset(4), &cfg).unwrap();
        assert_eq!(a.final_net, b.final_net);
        for (x, y) in a.history.iter().zip(b.history.iter()) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
    }

    #[test]
    fn test_loss_decreases_on_tiny_problem() {
        let cfg = TrainConfig { epochs: 20, seed: 2, augmentation: Augmentation::None, ..Default::default() };
        let out = train(tiny_net(), &tiny_dataset(2), &cfg).unwrap();
        let first = out.history.first().unwrap().loss;
        let last = out.history.last().unwrap().loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    fn uniform_stack(geom: &Geometry, names: &[&str], values: &[f32]) -> ChannelStack {
        ChannelStack {
            geom: geom.clone(),
            names: names.iter().map(|s| s.to_string()).collect(),
            channels: values.iter().map(|&v| vec![v; geom.num_voxels()]).collect(),
        }
    }

    #[test]
    fn test_ensemble_single_stack_is_identity() {
        let g = Geometry::isotropic([2, 2, 2]);
        let s = uniform_stack(&g, &["BG", "ET"], &[0.25, 0.75]);
        let out = ensemble_probs(std::slice::from_ref(&s)).unwrap();
        assert_eq!(out.channels, s.channels);
    }

    #[test]
    fn test_ensemble_means_probabilities() {
        let g = Geometry::isotropic([2, 2, 2]);
        let a = uniform_stack(&g, &["BG", "ET"], &[0.8, 0.2]);
        let b = uniform_stack(&g, &["BG", "ET"], &[0.6, 0.4]);
        let out = ensemble_probs(&[a, b]).unwrap();
        assert!((out.channels[1][0] - 0.3).abs() < 1e-7);
        assert!(out.max_sum_error() < 1e-5);
    }

    #[test]
    fn test_ensemble_rejects_mismatched_channels() {
        let g = Geometry::isotropic([2, 2, 2]);
        let a = uniform_stack(&g, &["BG", "ET"], &[0.8, 0.2]);
        let b = uniform_stack(&g, &["BG", "NET"], &[0.6, 0.4]);
        assert!(ensemble_probs(&[a, b]).is_err());
    }
}
