//! Manifest-driven I/O: JSON files listing case ids and their volume paths.
//! Commands never scan directories, so runs are explicit and rerunnable.

use segcascade_core::error::{Error, Result};
use segcascade_core::nifti::read_nifti_file;
use segcascade_core::volume::{Modality, MultiModalStudy};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    pub seed: u64,
    pub split: Split,
    pub has_cc: bool,
    pub has_ed: bool,
    /// Modality name -> NIfTI path.
    pub volumes: BTreeMap<String, PathBuf>,
    pub truth: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub cases: Vec<CaseEntry>,
}

impl CohortManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<CohortManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingArtifact(format!("manifest {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn split_cases(&self, split: Split) -> Vec<&CaseEntry> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }
}

impl CaseEntry {
    pub fn load_study(&self) -> Result<MultiModalStudy> {
        let mut volumes = Vec::with_capacity(4);
        for m in Modality::ALL {
            let path = self.volumes.get(m.name()).ok_or_else(|| {
                Error::MissingArtifact(format!("{}: no {} volume", self.case_id, m.name()))
            })?;
            let (_, vol) = read_nifti_file(path)?;
            volumes.push((m, vol));
        }
        MultiModalStudy::new(
            self.case_id.clone(),
            [
                volumes[0].clone(),
                volumes[1].clone(),
                volumes[2].clone(),
                volumes[3].clone(),
            ],
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub case_id: String,
    pub pred: PathBuf,
    pub truth: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub architecture: String,
    pub cases: Vec<PredictionEntry>,
}

impl PredictionManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<PredictionManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingArtifact(format!("prediction manifest {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Optional remap table for foreign label code schemes, parsed from a JSON
/// object of `"<from>": <to>` pairs.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<Vec<(u8, u8)>> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
        Error::Config(format!("label map {}: {e}", path.as_ref().display()))
    })?;
    let raw: BTreeMap<String, u8> = serde_json::from_str(&text)?;
    raw.into_iter()
        .map(|(from, to)| {
            let from: u8 = from
                .parse()
                .map_err(|_| Error::Config(format!("label map key {from:?} is not a code")))?;
            Ok((from, to))
        })
        .collect()
}
