use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::volume::{load_mask, load_volume, MaskVolume, Modality, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One patient-modality pair as listed in a manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub patient_id: String,
    pub modality: Modality,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub split: Split,
}

impl CaseEntry {
    pub fn annotated(&self) -> bool {
        self.mask.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cases: Vec<CaseEntry>,
    /// Directory that relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

/// A loaded case: image plus its mask, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub volume: Volume,
    pub mask: Option<MaskVolume>,
    pub split: Split,
}

impl Case {
    pub fn patient_id(&self) -> &str {
        &self.volume.patient_id
    }

    pub fn modality(&self) -> Modality {
        self.volume.modality
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut splits: BTreeMap<&str, Split> = BTreeMap::new();
        for c in &self.cases {
            match splits.insert(&c.patient_id, c.split) {
                Some(prev) if prev != c.split => {
                    return Err(Error::Data(format!(
                        "patient {} appears in both {prev:?} and {:?} splits",
                        c.patient_id, c.split
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_case(&self, entry: &CaseEntry) -> Result<Case> {
        let volume = load_volume(self.resolve(&entry.image))?;
        let mask = entry
            .mask
            .as_ref()
            .map(|m| load_mask(self.resolve(m)))
            .transpose()?;
        if let Some(m) = &mask {
            if m.extents != volume.extents {
                return Err(Error::Data(format!(
                    "{} {}: mask extents {:?} differ from image {:?}",
                    entry.patient_id, entry.modality, m.extents, volume.extents
                )));
            }
        }
        Ok(Case {
            volume,
            mask,
            split: entry.split,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Case>> {
        self.cases.iter().map(|e| self.load_case(e)).collect()
    }
}
