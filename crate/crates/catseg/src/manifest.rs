//! Dataset manifest: patient ids, file paths, spacing, and split assignment.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, split_dataset, PhantomSpec, Volume};
use crate::tensor::LabelVolume;
use crate::volfile;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::usage(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub id: usize,
    pub volume: String,
    pub labels: String,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub spacing: [f64; 3],
    pub phantom: Option<PhantomSpec>,
    pub patients: Vec<ManifestPatient>,
}

impl Manifest {
    pub fn parse(json: &str) -> Result<Manifest> {
        let manifest: Manifest =
            serde_json::from_str(json).map_err(|e| Error::json("manifest", e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patients.is_empty() {
            return Err(Error::data("manifest lists no patients"));
        }
        let mut ids: Vec<usize> = self.patients.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.patients.len() {
            return Err(Error::data("duplicate patient ids in manifest"));
        }
        if self.spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::data(format!("invalid spacing {:?}", self.spacing)));
        }
        Ok(())
    }

    /// Loads `path` and returns the manifest plus its directory, against
    /// which the per-patient paths resolve.
    pub fn load(path: &Path) -> Result<(Manifest, PathBuf)> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest = Manifest::parse(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok((manifest, base))
    }

    pub fn patients_in(&self, split: Split) -> Vec<&ManifestPatient> {
        self.patients.iter().filter(|p| p.split == split).collect()
    }

    pub fn load_patient(&self, base: &Path, patient: &ManifestPatient) -> Result<(Volume, LabelVolume)> {
        let intensities = volfile::load_image(&base.join(&patient.volume))?;
        let labels = volfile::load_labels(&base.join(&patient.labels))?;
        let vs = intensities.shape();
        let ls = labels.shape();
        if vs[0] != ls[0] || vs[1] != ls[1] || vs[2] != ls[2] {
            return Err(Error::data(format!(
                "patient {}: volume {:?} does not match labels {:?}",
                patient.id, vs, ls
            )));
        }
        Ok((
            Volume {
                intensities,
                spacing: self.spacing,
            },
            labels,
        ))
    }
}

/// Generates a phantom dataset under `out_dir`: volume and label files plus
/// `manifest.json`. Byte-identical for identical `(spec, ratios)`.
pub fn generate_dataset(
    spec: &PhantomSpec,
    ratios: (f64, f64, f64),
    out_dir: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    let (train, val, test) = split_dataset(spec.patients, ratios, spec.seed)?;
    let vol_dir = out_dir.join("volumes");
    let lab_dir = out_dir.join("labels");
    for dir in [&vol_dir, &lab_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    let split_of = |id: usize| {
        if train.contains(&id) {
            Split::Train
        } else if val.contains(&id) {
            Split::Val
        } else {
            let _ = &test;
            Split::Test
        }
    };

    let mut patients = Vec::with_capacity(spec.patients);
    for id in 0..spec.patients {
        let (volume, labels) = generate_phantom(spec, id)?;
        let vol_rel = format!("volumes/patient_{id:03}.catv");
        let lab_rel = format!("labels/patient_{id:03}.catm");
        volfile::save_image(&out_dir.join(&vol_rel), &volume.intensities)?;
        volfile::save_labels(&out_dir.join(&lab_rel), &labels)?;
        patients.push(ManifestPatient {
            id,
            volume: vol_rel,
            labels: lab_rel,
            split: split_of(id),
        });
    }

    let manifest = Manifest {
        version: 1,
        seed: spec.seed,
        spacing: spec.spacing,
        phantom: Some(spec.clone()),
        patients,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json("manifest serialization", e))?;
    let path = out_dir.join("manifest.json");
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(manifest)
}
