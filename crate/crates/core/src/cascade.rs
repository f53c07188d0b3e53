//! The two-stage cascade and the baseline architectures.
//!
//! Stage 1 segments all four subregions from all four modalities. Stage 2a
//! refines ET vs NET from T1w + T1w-CE plus the stage-1 ET/NET channels;
//! stage 2b refines CC vs ED from T2w + FLAIR plus the stage-1 ST/CC/ED
//! channels. Priors enter as input channels, never as spatial masks, and
//! stage-2b output overwrites stage-2a wherever both are foreground.

use crate::error::{Error, Result};
use crate::labels::{argmax_labels, code, to_channels, ChannelStack, LabelVolume, RegionId};
use crate::resample::{resample, resample_to_extents};
use crate::tensor::Tensor;
use crate::train::ensemble_probs;
use crate::unet::{forward, Network, NetworkConfig};
use crate::volume::{Geometry, Modality, MultiModalStudy, Volume3D};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Stage1,
    Stage2a,
    Stage2b,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Stage1 => "stage1",
            StageName::Stage2a => "stage2a",
            StageName::Stage2b => "stage2b",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: StageName,
    pub modalities: Vec<Modality>,
    /// Label channels fed from the previous stage's prediction.
    pub prior_channels: Vec<RegionId>,
    /// Primitive labels this stage emits (BG is implicit).
    pub out_labels: Vec<RegionId>,
    pub net_config: NetworkConfig,
}

impl StageSpec {
    /// Stage 1: the residual-encoder baseline over all four modalities.
    pub fn stage1() -> StageSpec {
        StageSpec {
            name: StageName::Stage1,
            modalities: Modality::ALL.to_vec(),
            prior_channels: vec![],
            out_labels: vec![RegionId::ET, RegionId::NET, RegionId::CC, RegionId::ED],
            net_config: NetworkConfig::new(4, 5, true),
        }
    }

    /// Stage 2a: ET vs NET from T1w + T1w-CE plus stage-1 ET/NET priors.
    /// Uses the plain (non-residual) configuration.
    pub fn stage2a() -> StageSpec {
        StageSpec {
            name: StageName::Stage2a,
            modalities: vec![Modality::T1w, Modality::T1wCE],
            prior_channels: vec![RegionId::ET, RegionId::NET],
            out_labels: vec![RegionId::ET, RegionId::NET],
            net_config: NetworkConfig::new(4, 3, false),
        }
    }

    /// Stage 2b: CC vs ED from T2w + FLAIR plus stage-1 ST/CC/ED priors.
    pub fn stage2b() -> StageSpec {
        StageSpec {
            name: StageName::Stage2b,
            modalities: vec![Modality::T2w, Modality::Flair],
            prior_channels: vec![RegionId::ST, RegionId::CC, RegionId::ED],
            out_labels: vec![RegionId::CC, RegionId::ED],
            net_config: NetworkConfig::new(5, 3, false),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net_config.validate()?;
        if self.net_config.in_channels != self.modalities.len() + self.prior_channels.len() {
            return Err(Error::Config(format!(
                "{}: {} input channels for {} modalities + {} priors",
                self.name.as_str(),
                self.net_config.in_channels,
                self.modalities.len(),
                self.prior_channels.len()
            )));
        }
        if self.net_config.out_classes != self.out_labels.len() + 1 {
            return Err(Error::Config(format!(
                "{}: {} classes for {} labels + BG",
                self.name.as_str(),
                self.net_config.out_classes,
                self.out_labels.len()
            )));
        }
        Ok(())
    }

    /// Channel names of the probability stack: BG then the stage labels.
    pub fn channel_names(&self) -> Vec<String> {
        std::iter::once("BG".to_string())
            .chain(self.out_labels.iter().map(|r| r.name().to_string()))
            .collect()
    }

    /// Canonical code per probability channel.
    pub fn code_map(&self) -> Vec<u8> {
        std::iter::once(code::BG)
            .chain(self.out_labels.iter().map(|r| r.member_codes()[0]))
            .collect()
    }

    /// Map a canonical code onto this stage's class index (BG if foreign).
    pub fn class_index(&self, canonical: u8) -> u8 {
        self.out_labels
            .iter()
            .position(|r| r.member_codes() == [canonical])
            .map(|i| i as u8 + 1)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    Overwrite2bOver2a,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadePlan {
    #[serde(default = "StageSpec::stage1")]
    pub stage1: StageSpec,
    #[serde(default = "StageSpec::stage2a")]
    pub stage2a: StageSpec,
    #[serde(default = "StageSpec::stage2b")]
    pub stage2b: StageSpec,
    #[serde(default = "default_merge_policy")]
    pub merge_policy: MergePolicy,
}

fn default_merge_policy() -> MergePolicy {
    MergePolicy::Overwrite2bOver2a
}

impl Default for CascadePlan {
    fn default() -> Self {
        CascadePlan {
            stage1: StageSpec::stage1(),
            stage2a: StageSpec::stage2a(),
            stage2b: StageSpec::stage2b(),
            merge_policy: MergePolicy::Overwrite2bOver2a,
        }
    }
}

impl CascadePlan {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2a.validate()?;
        self.stage2b.validate()?;
        let fixed = [
            (self.stage1.name, StageName::Stage1),
            (self.stage2a.name, StageName::Stage2a),
            (self.stage2b.name, StageName::Stage2b),
        ];
        for (got, want) in fixed {
            if got != want {
                return Err(Error::Config(format!(
                    "cascade plan slot {} holds {}",
                    want.as_str(),
                    got.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// Stack the stage's input channels: normalized modality intensities in
/// spec order, then binary prior channels.
pub fn build_stage_inputs(
    spec: &StageSpec,
    study: &MultiModalStudy,
    prior: Option<&LabelVolume>,
) -> Result<Tensor<f32>> {
    match (&prior, spec.prior_channels.is_empty()) {
        (None, false) => return Err(Error::MissingPrior),
        (Some(p), _) => study.geom().check_same_grid(&p.geom, "prior")?,
        _ => {}
    }
    let geom = study.geom();
    let m = geom.num_voxels();
    let channels = spec.modalities.len() + spec.prior_channels.len();
    let mut data = Vec::with_capacity(channels * m);
    for &modality in &spec.modalities {
        data.extend_from_slice(&study.volume(modality).data);
    }
    if let Some(prior) = prior {
        let stack = to_channels(prior, &spec.prior_channels);
        for ch in stack.channels {
            data.extend_from_slice(&ch);
        }
    }
    // tensor spatial order (d0, d1, d2) = (z, y, x): channel blocks are the
    // volumes' x-fastest buffers copied verbatim
    let [nx, ny, nz] = geom.extents;
    Ok(Tensor::from_vec(&[channels, nz, ny, nx], data))
}

/// Anything that turns stage inputs into class probabilities: fold-ensembled
/// networks in production, oracles in tests.
pub trait StagePredictor {
    fn predict(
        &self,
        spec: &StageSpec,
        inputs: &Tensor<f32>,
        geom: &Geometry,
    ) -> Result<ChannelStack>;
}

/// Pad spatial extents up to a multiple of the network's stride multiple,
/// run the forward pass, and crop back.
pub fn forward_padded(net: &Network<f32>, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
    let c = inputs.shape[0];
    let dims = [inputs.shape[1], inputs.shape[2], inputs.shape[3]];
    let mult = net.config.stride_multiple();
    let padded: [usize; 3] = dims.map(|d| d.div_ceil(mult) * mult);
    let mut shape = vec![1usize, c];
    shape.extend_from_slice(&padded);
    let mut buf = Tensor::zeros(&shape);
    for cc in 0..c {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let src = ((cc * dims[0] + z) * dims[1] + y) * dims[2];
                let dst = (((cc * padded[0] + z) * padded[1]) + y) * padded[2];
                buf.data[dst..dst + dims[2]]
                    .copy_from_slice(&inputs.data[src..src + dims[2]]);
            }
        }
    }
    let probs = forward(net, &buf)?;
    let classes = probs.shape[1];
    if padded == dims {
        let mut shape = vec![classes];
        shape.extend_from_slice(&dims);
        return Ok(Tensor::from_vec(&shape, probs.data));
    }
    let mut shape = vec![classes];
    shape.extend_from_slice(&dims);
    let mut out = Tensor::zeros(&shape);
    for cc in 0..classes {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let src = (((cc * padded[0] + z) * padded[1]) + y) * padded[2];
                let dst = ((cc * dims[0] + z) * dims[1] + y) * dims[2];
                out.data[dst..dst + dims[2]].copy_from_slice(&probs.data[src..src + dims[2]]);
            }
        }
    }
    Ok(out)
}

fn probs_to_stack(
    probs: &Tensor<f32>,
    names: &[String],
    geom: &Geometry,
) -> ChannelStack {
    let classes = probs.shape[0];
    let m: usize = probs.shape[1..].iter().product();
    debug_assert_eq!(classes, names.len());
    let channels: Vec<Vec<f32>> =
        (0..classes).map(|c| probs.data[c * m..(c + 1) * m].to_vec()).collect();
    ChannelStack { geom: geom.clone(), names: names.to_vec(), channels }
}

/// Fold models of one stage, ensembled by probability averaging.
pub struct FoldEnsemble {
    pub nets: Vec<Network<f32>>,
}

impl StagePredictor for FoldEnsemble {
    fn predict(
        &self,
        spec: &StageSpec,
        inputs: &Tensor<f32>,
        geom: &Geometry,
    ) -> Result<ChannelStack> {
        if self.nets.is_empty() {
            return Err(Error::Config(format!("{}: no fold models", spec.name.as_str())));
        }
        for net in &self.nets {
            if net.config != spec.net_config {
                return Err(Error::Config(format!(
                    "{}: checkpoint config {:?} disagrees with stage config {:?}",
                    spec.name.as_str(),
                    net.config,
                    spec.net_config
                )));
            }
        }
        let names = spec.channel_names();
        let stacks: Vec<ChannelStack> = self
            .nets
            .iter()
            .map(|net| {
                let probs = forward_padded(net, inputs)?;
                Ok(probs_to_stack(&probs, &names, geom))
            })
            .collect::<Result<_>>()?;
        ensemble_probs(&stacks)
    }
}

/// Per-stage voxel counts for the provenance record.
pub type CodeCounts = Vec<(String, usize)>;

fn counts_of(lv: &LabelVolume) -> CodeCounts {
    let counts = lv.code_counts();
    [
        ("BG", counts[0]),
        ("ET", counts[1]),
        ("NET", counts[2]),
        ("CC", counts[3]),
        ("ED", counts[4]),
    ]
    .iter()
    .map(|(n, c)| (n.to_string(), *c))
    .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeProvenance {
    pub case_id: String,
    pub stage1: CodeCounts,
    pub stage2a: CodeCounts,
    pub stage2b: CodeCounts,
    pub merged: CodeCounts,
    /// How stage-2 priors were produced at inference time.
    pub prior_source: String,
}

/// One stage: build inputs, predict fold-ensembled probabilities, argmax
/// restricted to the stage's labels.
pub fn run_stage(
    spec: &StageSpec,
    predictor: &dyn StagePredictor,
    study: &MultiModalStudy,
    prior: Option<&LabelVolume>,
) -> Result<(ChannelStack, LabelVolume)> {
    spec.validate()?;
    let inputs = build_stage_inputs(spec, study, prior)?;
    let probs = predictor.predict(spec, &inputs, study.geom())?;
    let labels = argmax_labels(&probs, &spec.code_map())?;
    Ok((probs, labels))
}

/// Full cascade: stage 1, both stage-2 refiners with stage-1 priors, and
/// the overwrite merge.
pub fn run_cascade(
    plan: &CascadePlan,
    stage1: &dyn StagePredictor,
    stage2a: &dyn StagePredictor,
    stage2b: &dyn StagePredictor,
    study: &MultiModalStudy,
) -> Result<(LabelVolume, CascadeProvenance)> {
    plan.validate()?;
    let (_, labels1) = run_stage(&plan.stage1, stage1, study, None)?;
    let (_, labels2a) = run_stage(&plan.stage2a, stage2a, study, Some(&labels1))?;
    let (_, labels2b) = run_stage(&plan.stage2b, stage2b, study, Some(&labels1))?;
    let MergePolicy::Overwrite2bOver2a = plan.merge_policy;
    let merged = crate::labels::merge_stage_outputs(&labels2a, &labels2b)?;
    assert!(
        merged.codes.iter().all(|&c| c <= code::MAX),
        "merged cascade output leaked an out-of-range code"
    );
    Ok((
        merged.clone(),
        CascadeProvenance {
            case_id: study.case_id.clone(),
            stage1: counts_of(&labels1),
            stage2a: counts_of(&labels2a),
            stage2b: counts_of(&labels2b),
            merged: counts_of(&merged),
            prior_source: "stage1_fold_ensemble".into(),
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineArch {
    Resenc,
    Default,
    Lowres,
    MultiEnsemble,
}

/// Fold models per single-stage configuration.
pub struct BaselineNets {
    pub resenc: Vec<Network<f32>>,
    pub plain: Vec<Network<f32>>,
    pub lowres: Vec<Network<f32>>,
    pub lowres_factor: f64,
}

/// Stage-1-shaped spec for a single-configuration baseline.
pub fn baseline_spec(residual: bool) -> StageSpec {
    let mut spec = StageSpec::stage1();
    spec.net_config.residual_encoder = residual;
    spec
}

fn baseline_stack(
    nets: &[Network<f32>],
    residual: bool,
    study: &MultiModalStudy,
) -> Result<ChannelStack> {
    let spec = baseline_spec(residual);
    let ens = FoldEnsemble { nets: nets.to_vec() };
    let inputs = build_stage_inputs(&spec, study, None)?;
    ens.predict(&spec, &inputs, study.geom())
}

/// Low-resolution path: downsample the study, predict, and trilinearly
/// upsample the probabilities back onto the full grid.
fn lowres_stack(
    nets: &[Network<f32>],
    factor: f64,
    study: &MultiModalStudy,
) -> Result<ChannelStack> {
    let mut down = study.clone();
    for m in Modality::ALL {
        *down.volume_mut(m) = resample(study.volume(m), factor);
    }
    let stack = baseline_stack(nets, false, &down)?;
    let full = study.geom();
    let channels: Vec<Vec<f32>> = stack
        .channels
        .iter()
        .map(|ch| {
            let vol = Volume3D { geom: down.geom().clone(), data: ch.clone() };
            resample_to_extents(&vol, full.extents).data
        })
        .collect();
    Ok(ChannelStack { geom: full.clone(), names: stack.names, channels })
}

/// Single-configuration or multi-configuration fold-ensembled prediction
/// over the four subregion labels.
pub fn run_baseline(
    arch: BaselineArch,
    nets: &BaselineNets,
    study: &MultiModalStudy,
) -> Result<(ChannelStack, LabelVolume)> {
    let stack = match arch {
        BaselineArch::Resenc => baseline_stack(&nets.resenc, true, study)?,
        BaselineArch::Default => baseline_stack(&nets.plain, false, study)?,
        BaselineArch::Lowres => lowres_stack(&nets.lowres, nets.lowres_factor, study)?,
        BaselineArch::MultiEnsemble => {
            let stacks = vec![
                baseline_stack(&nets.plain, false, study)?,
                baseline_stack(&nets.resenc, true, study)?,
                lowres_stack(&nets.lowres, nets.lowres_factor, study)?,
            ];
            ensemble_probs(&stacks)?
        }
    };
    let labels = argmax_labels(&stack, &StageSpec::stage1().code_map())?;
    Ok((stack, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use crate::unet::build_network;

    /// Emits the ground truth restricted to the stage's labels, one-hot.
    struct TruthOracle<'a> {
        truth: &'a LabelVolume,
    }

    impl StagePredictor for TruthOracle<'_> {
        fn predict(
            &self,
            spec: &StageSpec,
            _inputs: &Tensor<f32>,
            geom: &Geometry,
        ) -> Result<ChannelStack> {
            let names = spec.channel_names();
            let m = geom.num_voxels();
            let mut channels = vec![vec![0.0f32; m]; names.len()];
            for (idx, &c) in self.truth.codes.iter().enumerate() {
                channels[spec.class_index(c) as usize][idx] = 1.0;
            }
            Ok(ChannelStack { geom: geom.clone(), names, channels })
        }
    }

    /// Predicts exactly the prior label channels it receives as input.
    struct PriorIdentityOracle;

    impl StagePredictor for PriorIdentityOracle {
        fn predict(
            &self,
            spec: &StageSpec,
            inputs: &Tensor<f32>,
            geom: &Geometry,
        ) -> Result<ChannelStack> {
            let m = geom.num_voxels();
            let names = spec.channel_names();
            let mut channels = vec![vec![0.0f32; m]; names.len()];
            for v in 0..m {
                let mut class = 0usize;
                for (slot, region) in spec.prior_channels.iter().enumerate() {
                    let ch = spec.modalities.len() + slot;
                    if inputs.data[ch * m + v] > 0.5 {
                        if let Some(pos) = spec.out_labels.iter().position(|r| r == region) {
                            class = pos + 1;
                        }
                    }
                }
                channels[class][v] = 1.0;
            }
            Ok(ChannelStack { geom: geom.clone(), names, channels })
        }
    }

    fn demo_case() -> crate::phantom::PhantomCase {
        let spec = PhantomSpec { p_cc: 1.0, p_ed: 1.0, ..Default::default() };
        generate_phantom(&spec, 99).unwrap()
    }

    #[test]
    fn test_stage_input_channel_counts() {
        let case = demo_case();
        let s1 = build_stage_inputs(&StageSpec::stage1(), &case.study, None).unwrap();
        assert_eq!(s1.shape[0], 4);
        let s2a =
            build_stage_inputs(&StageSpec::stage2a(), &case.study, Some(&case.truth)).unwrap();
        assert_eq!(s2a.shape[0], 4);
        let s2b =
            build_stage_inputs(&StageSpec::stage2b(), &case.study, Some(&case.truth)).unwrap();
        assert_eq!(s2b.shape[0], 5);
    }

    #[test]
    fn test_stage2a_missing_prior_rejected() {
        let case = demo_case();
        assert!(matches!(
            build_stage_inputs(&StageSpec::stage2a(), &case.study, None),
            Err(Error::MissingPrior)
        ));
    }

    #[test]
    fn test_prior_channels_match_label_algebra() {
        let case = demo_case();
        let spec = StageSpec::stage2b();
        let inputs = build_stage_inputs(&spec, &case.study, Some(&case.truth)).unwrap();
        let m = case.study.geom().num_voxels();
        let stack =
            to_channels(&case.truth, &[RegionId::ST, RegionId::CC, RegionId::ED]);
        for (slot, ch) in stack.channels.iter().enumerate() {
            let offset = (spec.modalities.len() + slot) * m;
            assert_eq!(&inputs.data[offset..offset + m], ch.as_slice(), "prior slot {slot}");
        }
    }

    #[test]
    fn test_zero_net_predicts_background() {
        let case = demo_case();
        let spec = StageSpec::stage1();
        let net = build_network::<f32>(&spec.net_config, 1).unwrap().zeros_like();
        let ens = FoldEnsemble { nets: vec![net] };
        let (probs, labels) = run_stage(&spec, &ens, &case.study, None).unwrap();
        assert!(probs.max_sum_error() < 1e-5);
        assert!(labels.codes.iter().all(|&c| c == code::BG));
    }

    #[test]
    fn test_identical_fold_nets_equal_single_net() {
        let case = demo_case();
        let spec = StageSpec::stage1();
        let net = build_network::<f32>(&spec.net_config, 5).unwrap();
        let one = FoldEnsemble { nets: vec![net.clone()] };
        let five = FoldEnsemble { nets: vec![net; 5] };
        let (p1, l1) = run_stage(&spec, &one, &case.study, None).unwrap();
        let (p5, l5) = run_stage(&spec, &five, &case.study, None).unwrap();
        assert_eq!(l1.codes, l5.codes);
        for (a, b) in p1.channels.iter().zip(p5.channels.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn test_config_mismatch_fails_closed() {
        let case = demo_case();
        let spec = StageSpec::stage1();
        let wrong = build_network::<f32>(&StageSpec::stage2a().net_config, 1).unwrap();
        let ens = FoldEnsemble { nets: vec![wrong] };
        assert!(matches!(
            run_stage(&spec, &ens, &case.study, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn test_stage2b_emits_only_its_codes() {
        let case = demo_case();
        let spec = StageSpec::stage2b();
        let net = build_network::<f32>(&spec.net_config, 8).unwrap();
        let ens = FoldEnsemble { nets: vec![net] };
        let (_, labels) = run_stage(&spec, &ens, &case.study, Some(&case.truth)).unwrap();
        assert!(labels
            .codes
            .iter()
            .all(|&c| matches!(c, code::BG | code::CC | code::ED)));
    }

    #[test]
    fn test_cascade_with_truth_oracles_reproduces_truth() {
        let case = demo_case();
        let plan = CascadePlan::default();
        let oracle = TruthOracle { truth: &case.truth };
        let (out, prov) =
            run_cascade(&plan, &oracle, &oracle, &oracle, &case.study).unwrap();
        assert_eq!(out.codes, case.truth.codes);
        let counts = case.truth.code_counts();
        assert_eq!(prov.merged[1].1, counts[1]);
        assert_eq!(prov.prior_source, "stage1_fold_ensemble");
    }

    #[test]
    fn test_identity_stage2_degenerates_to_stage1() {
        let case = demo_case();
        let plan = CascadePlan::default();
        let stage1 = TruthOracle { truth: &case.truth };
        let (out, _) = run_cascade(
            &plan,
            &stage1,
            &PriorIdentityOracle,
            &PriorIdentityOracle,
            &case.study,
        )
        .unwrap();
        assert_eq!(out.codes, case.truth.codes);
    }

    #[test]
    fn test_overwrite_merge_voxel_semantics() {
        let case = demo_case();
        let geom = case.study.geom().clone();
        let n = geom.num_voxels();
        let l2a = LabelVolume::new(geom.clone(), vec![code::ET; n]).unwrap();
        let mut ed_codes = vec![code::BG; n];
        ed_codes[5] = code::ED;
        let l2b = LabelVolume::new(geom, ed_codes).unwrap();
        let merged = crate::labels::merge_stage_outputs(&l2a, &l2b).unwrap();
        assert_eq!(merged.codes[5], code::ED);
        assert_eq!(merged.codes[6], code::ET);
    }

    #[test]
    fn test_stage2b_runs_with_empty_cc_ed_prior() {
        // stage 1 predicting only solid tumor still feeds stage 2b a
        // nonzero ST channel alongside all-zero CC/ED channels
        let spec = PhantomSpec { p_cc: 0.0, p_ed: 0.0, ..Default::default() };
        let case = generate_phantom(&spec, 3).unwrap();
        let inputs =
            build_stage_inputs(&StageSpec::stage2b(), &case.study, Some(&case.truth)).unwrap();
        let m = case.study.geom().num_voxels();
        let st_sum: f32 = inputs.data[2 * m..3 * m].iter().sum();
        let cc_sum: f32 = inputs.data[3 * m..4 * m].iter().sum();
        let ed_sum: f32 = inputs.data[4 * m..5 * m].iter().sum();
        assert!(st_sum > 0.0);
        assert_eq!(cc_sum, 0.0);
        assert_eq!(ed_sum, 0.0);
        let net = build_network::<f32>(&StageSpec::stage2b().net_config, 2).unwrap();
        let ens = FoldEnsemble { nets: vec![net] };
        let result = run_stage(&StageSpec::stage2b(), &ens, &case.study, Some(&case.truth));
        assert!(result.is_ok());
    }

    #[test]
    fn test_cascade_is_deterministic() {
        let case = demo_case();
        let plan = CascadePlan::default();
        let mk = |seed| FoldEnsemble {
            nets: vec![build_network::<f32>(&plan.stage1.net_config, seed).unwrap()],
        };
        let s2a = FoldEnsemble {
            nets: vec![build_network::<f32>(&plan.stage2a.net_config, 4).unwrap()],
        };
        let s2b = FoldEnsemble {
            nets: vec![build_network::<f32>(&plan.stage2b.net_config, 5).unwrap()],
        };
        let (a, _) = run_cascade(&plan, &mk(3), &s2a, &s2b, &case.study).unwrap();
        let (b, _) = run_cascade(&plan, &mk(3), &s2a, &s2b, &case.study).unwrap();
        assert_eq!(a.codes, b.codes);
    }

    #[test]
    fn test_multi_ensemble_of_identical_stacks() {
        // a multi-configuration ensemble whose members agree equals any
        // single member's labels
        let case = demo_case();
        let spec = StageSpec::stage1();
        let resenc = build_network::<f32>(&spec.net_config, 7).unwrap();
        let stack = baseline_stack(std::slice::from_ref(&resenc), true, &case.study).unwrap();
        let mean = ensemble_probs(&[stack.clone(), stack.clone(), stack.clone()]).unwrap();
        let l_single = argmax_labels(&stack, &spec.code_map()).unwrap();
        let l_mean = argmax_labels(&mean, &spec.code_map()).unwrap();
        assert_eq!(l_single.codes, l_mean.codes);
    }

    #[test]
    fn test_lowres_prediction_lands_on_full_grid() {
        let case = demo_case();
        let cfg = NetworkConfig::new(4, 5, false);
        let nets = BaselineNets {
            resenc: vec![],
            plain: vec![],
            lowres: vec![build_network::<f32>(&cfg, 11).unwrap()],
            lowres_factor: 1.5,
        };
        let (stack, labels) = run_baseline(BaselineArch::Lowres, &nets, &case.study).unwrap();
        assert_eq!(stack.geom.extents, case.study.geom().extents);
        assert_eq!(labels.geom.extents, case.study.geom().extents);
        assert!(stack.max_sum_error() < 1e-4);
    }

    #[test]
    fn test_resenc_baseline_equals_stage1_shaped_run() {
        let case = demo_case();
        let spec = StageSpec::stage1();
        let net = build_network::<f32>(&spec.net_config, 13).unwrap();
        let nets = BaselineNets {
            resenc: vec![net.clone()],
            plain: vec![],
            lowres: vec![],
            lowres_factor: 1.5,
        };
        let (_, via_baseline) = run_baseline(BaselineArch::Resenc, &nets, &case.study).unwrap();
        let ens = FoldEnsemble { nets: vec![net] };
        let (_, via_stage) = run_stage(&spec, &ens, &case.study, None).unwrap();
        assert_eq!(via_baseline.codes, via_stage.codes);
    }
}
