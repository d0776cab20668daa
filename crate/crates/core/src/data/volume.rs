//! Volumes, label masks and their raw-plus-sidecar file format.
//!
//! `<name>.vol` holds little-endian f32 voxels, `<name>.msk` holds u8 labels, both
//! slice-major (slice, row, column). Metadata lives in `<name>.json` next to the data file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Supervision;

/// Label provenance of a mask volume.
pub type Provenance = Supervision;

pub const NUM_CLASSES: usize = 4;
pub const LABEL_NAMES: [&str; NUM_CLASSES] = ["background", "LV", "myo", "RV"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "bSSFP")]
    Bssfp,
    T2,
    #[serde(rename = "LGE")]
    Lge,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Bssfp, Modality::T2, Modality::Lge];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Bssfp => "bSSFP",
            Modality::T2 => "T2",
            Modality::Lge => "LGE",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bssfp" | "c0" => Ok(Modality::Bssfp),
            "t2" => Ok(Modality::T2),
            "lge" | "de" => Ok(Modality::Lge),
            _ => Err(Error::InvalidArgument(format!("unknown modality {s:?}"))),
        }
    }
}

/// (slices, height, width).
pub type Extents = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub extents: Extents,
    /// Millimetres per voxel along (slice, row, column).
    pub spacing_mm: [f64; 3],
    pub modality: Modality,
    pub patient_id: String,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(
        extents: Extents,
        spacing_mm: [f64; 3],
        modality: Modality,
        patient_id: impl Into<String>,
        data: Vec<f32>,
    ) -> Result<Self> {
        check_extents(extents, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "volume value {} at index {i} is not finite",
                data[i]
            )));
        }
        Ok(Self {
            extents,
            spacing_mm,
            modality,
            patient_id: patient_id.into(),
            data,
        })
    }

    pub fn slices(&self) -> usize {
        self.extents[0]
    }

    pub fn plane(&self) -> (usize, usize) {
        (self.extents[1], self.extents[2])
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        let n = self.extents[1] * self.extents[2];
        &self.data[i * n..(i + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    pub extents: Extents,
    pub spacing_mm: [f64; 3],
    pub modality: Modality,
    pub patient_id: String,
    pub provenance: Provenance,
    pub labels: Vec<u8>,
    /// For pseudo masks: the source modality and which target slices carry transferred labels.
    pub pseudo: Option<PseudoInfo>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoInfo {
    pub source_modality: Modality,
    pub slices: Vec<usize>,
}

impl MaskVolume {
    pub fn new(
        extents: Extents,
        spacing_mm: [f64; 3],
        modality: Modality,
        patient_id: impl Into<String>,
        provenance: Provenance,
        labels: Vec<u8>,
    ) -> Result<Self> {
        check_extents(extents, labels.len())?;
        check_labels(&labels)?;
        Ok(Self {
            extents,
            spacing_mm,
            modality,
            patient_id: patient_id.into(),
            provenance,
            labels,
            pseudo: None,
        })
    }

    pub fn slices(&self) -> usize {
        self.extents[0]
    }

    pub fn plane(&self) -> (usize, usize) {
        (self.extents[1], self.extents[2])
    }

    pub fn slice(&self, i: usize) -> &[u8] {
        let n = self.extents[1] * self.extents[2];
        &self.labels[i * n..(i + 1) * n]
    }

    /// Whether slice `i` carries usable labels: any foreground for expert masks,
    /// membership in the transferred slice list for pseudo masks.
    pub fn slice_is_annotated(&self, i: usize) -> bool {
        match &self.pseudo {
            Some(info) => info.slices.contains(&i),
            None => self.slice(i).iter().any(|&l| l != 0),
        }
    }
}

fn check_extents(extents: Extents, len: usize) -> Result<()> {
    if extents.contains(&0) {
        return Err(Error::Data(format!("extents {extents:?} must be positive")));
    }
    let n = extents.iter().product::<usize>();
    if n != len {
        return Err(Error::Data(format!(
            "extents {extents:?} need {n} voxels, got {len}"
        )));
    }
    Ok(())
}

pub(crate) fn check_labels(labels: &[u8]) -> Result<()> {
    if let Some(i) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Data(format!(
            "label {} at voxel {i} is outside 0..=3",
            labels[i]
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    extents: Extents,
    spacing_mm: [f64; 3],
    modality: Modality,
    patient_id: String,
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudo: Option<PseudoInfo>,
}

pub fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("json")
}

fn write_sidecar(data_path: &Path, meta: &Sidecar) -> Result<()> {
    let path = sidecar_path(data_path);
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn read_sidecar(data_path: &Path) -> Result<Sidecar> {
    let path = sidecar_path(data_path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })
}

fn read_payload(path: &Path, meta: &Sidecar, bytes_per_voxel: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = meta.extents.iter().product::<usize>() * bytes_per_voxel;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "extents {:?} need {expected} bytes, file has {}",
                meta.extents,
                bytes.len()
            ),
        ));
    }
    Ok(bytes)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        path,
        &Sidecar {
            extents: v.extents,
            spacing_mm: v.spacing_mm,
            modality: v.modality,
            patient_id: v.patient_id.clone(),
            dtype: "f32".into(),
            provenance: None,
            label_names: None,
            pseudo: None,
        },
    )
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let meta = read_sidecar(path)?;
    if meta.dtype != "f32" {
        return Err(Error::format(
            path,
            format!("volume dtype {:?}, expected \"f32\"", meta.dtype),
        ));
    }
    let bytes = read_payload(path, &meta, 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Volume::new(
        meta.extents,
        meta.spacing_mm,
        meta.modality,
        meta.patient_id,
        data,
    )
}

pub fn save_mask(m: &MaskVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, &m.labels).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        path,
        &Sidecar {
            extents: m.extents,
            spacing_mm: m.spacing_mm,
            modality: m.modality,
            patient_id: m.patient_id.clone(),
            dtype: "u8".into(),
            provenance: Some(m.provenance),
            label_names: Some(LABEL_NAMES.iter().map(|s| s.to_string()).collect()),
            pseudo: m.pseudo.clone(),
        },
    )
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    let path = path.as_ref();
    let meta = read_sidecar(path)?;
    if meta.dtype != "u8" {
        return Err(Error::format(
            path,
            format!("mask dtype {:?}, expected \"u8\"", meta.dtype),
        ));
    }
    let labels = read_payload(path, &meta, 1)?;
    let mut m = MaskVolume::new(
        meta.extents,
        meta.spacing_mm,
        meta.modality,
        meta.patient_id,
        meta.provenance.unwrap_or(Provenance::Expert),
        labels,
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    m.pseudo = meta.pseudo;
    Ok(m)
}
