//! Deterministic synthetic cohort generator: ellipsoidal "brain" volumes
//! with nested tumor subregions whose modality contrasts follow the
//! radiological conventions the cascade exploits (ET bright on T1w-CE, CC
//! dark on T1w and bright on T2w, ED bright on T2w/FLAIR).

use crate::error::{Error, Result};
use crate::labels::{code, LabelVolume};
use crate::rng::{derive_seed, rng_for, stream};
use crate::volume::{Geometry, Modality, MultiModalStudy, Volume3D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Mean intensities per region and modality, ordered
/// (T1w, T1w-CE, T2w, FLAIR).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastTable {
    pub brain: [f32; 4],
    pub et: [f32; 4],
    pub net: [f32; 4],
    pub cc: [f32; 4],
    pub ed: [f32; 4],
}

impl Default for ContrastTable {
    fn default() -> Self {
        ContrastTable {
            brain: [100.0, 100.0, 100.0, 100.0],
            et: [90.0, 180.0, 110.0, 110.0],
            net: [80.0, 95.0, 125.0, 120.0],
            cc: [40.0, 45.0, 200.0, 70.0],
            ed: [95.0, 100.0, 160.0, 180.0],
        }
    }
}

impl ContrastTable {
    fn mean_for(&self, c: u8, modality_slot: usize) -> f32 {
        match c {
            code::ET => self.et[modality_slot],
            code::NET => self.net[modality_slot],
            code::CC => self.cc[modality_slot],
            code::ED => self.ed[modality_slot],
            _ => self.brain[modality_slot],
        }
    }
}

/// Nested tumor geometry, in voxel units relative to the brain center:
/// an ED shell around the TC blob; inside TC an ET rim, a NET core, and an
/// optional CC pocket.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TumorSpec {
    pub center_offset: [f64; 3],
    pub tc_radius: f64,
    pub net_radius: f64,
    pub cc_radius: f64,
    pub ed_thickness: f64,
}

impl Default for TumorSpec {
    fn default() -> Self {
        TumorSpec {
            center_offset: [0.0, 0.0, 0.0],
            tc_radius: 7.0,
            net_radius: 3.5,
            cc_radius: 2.2,
            ed_thickness: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    /// Brain ellipsoid semi-axes in voxels.
    pub brain_radii: [f64; 3],
    /// None generates a tumor-free (unimodal-intensity) phantom.
    pub tumor: Option<TumorSpec>,
    pub contrast: ContrastTable,
    pub noise_sigma: f64,
    /// Presence probability of the cystic pocket.
    pub p_cc: f64,
    /// Presence probability of the edema shell.
    pub p_ed: f64,
    /// Seeded jitter amplitude for centers and radii (voxels).
    pub jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extents: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            brain_radii: [13.0, 13.0, 13.0],
            tumor: Some(TumorSpec::default()),
            contrast: ContrastTable::default(),
            noise_sigma: 4.0,
            p_cc: 0.4,
            p_ed: 0.8,
            jitter: 1.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub study: MultiModalStudy,
    pub truth: LabelVolume,
    pub has_cc: bool,
    pub has_ed: bool,
    pub seed: u64,
}

fn inside_ellipsoid(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> bool {
    let mut s = 0.0;
    for a in 0..3 {
        let d = (p[a] - center[a]) / radii[a];
        s += d * d;
    }
    s <= 1.0
}

/// Rasterize one case from seeded draws; identical (spec, seed) pairs are
/// bit-identical.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<PhantomCase> {
    let geom = Geometry::axis_aligned(spec.extents, spec.spacing);
    let mut rng = rng_for(seed, stream::PHANTOM);
    let [nx, ny, nz] = spec.extents;

    // fixed draw order: presence first, then geometry jitter, then noise
    let ed_drawn = rng.random::<f64>() < spec.p_ed;
    let cc_drawn = rng.random::<f64>() < spec.p_cc;

    let mut jit = |scale: f64| rng.random_range(-1.0..1.0) * spec.jitter * scale;
    let brain_center = [
        nx as f64 / 2.0 + jit(0.5),
        ny as f64 / 2.0 + jit(0.5),
        nz as f64 / 2.0 + jit(0.5),
    ];
    let brain_radii = [
        spec.brain_radii[0] * (1.0 + jit(0.03)),
        spec.brain_radii[1] * (1.0 + jit(0.03)),
        spec.brain_radii[2] * (1.0 + jit(0.03)),
    ];

    let tumor = spec.tumor.as_ref().map(|t| {
        let center = [
            brain_center[0] + t.center_offset[0] + jit(1.0),
            brain_center[1] + t.center_offset[1] + jit(1.0),
            brain_center[2] + t.center_offset[2] + jit(1.0),
        ];
        let tc_r = t.tc_radius * (1.0 + jit(0.08));
        let net_r = t.net_radius * (1.0 + jit(0.08));
        let cc_r = t.cc_radius * (1.0 + jit(0.08));
        let ed_t = t.ed_thickness * (1.0 + jit(0.08));
        // cystic pocket center stays inside the core blob
        let max_off = (tc_r - cc_r - 0.5).max(0.0);
        let pocket = [
            center[0] + jit(1.0).clamp(-max_off / 2.0, max_off / 2.0),
            center[1] + jit(1.0).clamp(-max_off / 2.0, max_off / 2.0),
            center[2] + jit(1.0).clamp(-max_off / 2.0, max_off / 2.0),
        ];
        (center, tc_r, net_r, cc_r, ed_t, pocket)
    });

    let mut codes = vec![code::BG; geom.num_voxels()];
    let mut brain = vec![false; geom.num_voxels()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let idx = geom.index(x, y, z);
                let in_brain = inside_ellipsoid(p, brain_center, brain_radii);
                brain[idx] = in_brain;
                let Some((center, tc_r, net_r, cc_r, ed_t, pocket)) = tumor else {
                    continue;
                };
                let iso = |r: f64| [r, r, r];
                let c = if cc_drawn && inside_ellipsoid(p, pocket, iso(cc_r)) {
                    code::CC
                } else if inside_ellipsoid(p, center, iso(net_r)) {
                    code::NET
                } else if inside_ellipsoid(p, center, iso(tc_r)) {
                    code::ET
                } else if ed_drawn && inside_ellipsoid(p, center, iso(tc_r + ed_t)) {
                    code::ED
                } else {
                    code::BG
                };
                if c != code::BG {
                    if !in_brain {
                        return Err(Error::SpecGeometry(format!(
                            "tumor voxel ({x},{y},{z}) outside the brain ellipsoid"
                        )));
                    }
                    codes[idx] = c;
                }
            }
        }
    }
    let truth = LabelVolume::new(geom.clone(), codes)?;
    let counts = truth.code_counts();
    let has_cc = counts[code::CC as usize] > 0;
    let has_ed = counts[code::ED as usize] > 0;

    let noise = Normal::new(0.0f64, spec.noise_sigma).map_err(|e| {
        Error::SpecGeometry(format!("invalid noise sigma {}: {e}", spec.noise_sigma))
    })?;
    let mut volumes = Vec::with_capacity(4);
    for (slot, modality) in Modality::ALL.into_iter().enumerate() {
        let mut data = vec![0.0f32; geom.num_voxels()];
        for idx in 0..data.len() {
            if brain[idx] {
                let mean = spec.contrast.mean_for(truth.codes[idx], slot) as f64;
                data[idx] = (mean + noise.sample(&mut rng)).max(0.1) as f32;
            }
        }
        volumes.push((modality, Volume3D::new(geom.clone(), data)?));
    }
    let study = MultiModalStudy::new(
        format!("phantom_{seed:016x}"),
        [
            volumes[0].clone(),
            volumes[1].clone(),
            volumes[2].clone(),
            volumes[3].clone(),
        ],
    )?;
    Ok(PhantomCase { study, truth, has_cc, has_ed, seed })
}

/// n cases from per-case derived seeds, named case_000, case_001, ...
pub fn generate_cohort(spec: &PhantomSpec, n: usize, seed: u64) -> Result<Vec<PhantomCase>> {
    (0..n)
        .map(|i| {
            let mut case = generate_phantom(spec, derive_seed(seed, i as u64))?;
            case.study.case_id = format!("case_{i:03}");
            Ok(case)
        })
        .collect()
}
