//! Minimal reader for uncompressed single-file NIfTI-1 (`.nii`) volumes.
//!
//! Only what conversion needs: dimensions, voxel spacing, data type, scaling and the
//! voxel payload. No orientation handling, no `.hdr/.img` pairs, no gzip.

use std::collections::BTreeMap;
use std::path::Path;

use super::volume::{check_labels, MaskVolume, Modality, Provenance, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    /// (x, y, z) extents.
    pub dims: [usize; 3],
    /// (x, y, z) spacing in mm.
    pub pixdim: [f64; 3],
    pub datatype: i16,
    pub vox_offset: usize,
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub little_endian: bool,
}

struct Reader<'a> {
    b: &'a [u8],
    le: bool,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let a = [self.b[at], self.b[at + 1]];
        if self.le {
            i16::from_le_bytes(a)
        } else {
            i16::from_be_bytes(a)
        }
    }
    fn i32(&self, at: usize) -> i32 {
        let a = self.b[at..at + 4].try_into().expect("4 bytes");
        if self.le {
            i32::from_le_bytes(a)
        } else {
            i32::from_be_bytes(a)
        }
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_bits(self.i32(at) as u32)
    }
}

pub fn parse_header(bytes: &[u8], origin: &Path) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(
            origin,
            format!("{} bytes is shorter than a NIfTI-1 header", bytes.len()),
        ));
    }
    let le = match (
        i32::from_le_bytes(bytes[..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[..4].try_into().unwrap()),
    ) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(Error::format(origin, "sizeof_hdr is not 348")),
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::format(
            origin,
            "not a single-file NIfTI-1 volume (magic is not n+1)",
        ));
    }
    let r = Reader { b: bytes, le };
    let ndim = r.i16(40);
    if !(2..=4).contains(&ndim) {
        return Err(Error::format(
            origin,
            format!("unsupported dimensionality {ndim}"),
        ));
    }
    let dim = |k: usize| -> Result<usize> {
        if k as i16 > ndim {
            return Ok(1);
        }
        let d = r.i16(40 + 2 * k);
        usize::try_from(d)
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::format(origin, format!("dim[{k}] = {d}")))
    };
    if ndim == 4 && dim(4)? != 1 {
        return Err(Error::format(
            origin,
            "time series volumes are not supported",
        ));
    }
    let pix = |k: usize| {
        let v = r.f32(76 + 4 * k).abs() as f64;
        if v > 0.0 {
            v
        } else {
            1.0
        }
    };
    let slope = r.f32(112) as f64;
    Ok(NiftiHeader {
        dims: [dim(1)?, dim(2)?, dim(3)?],
        pixdim: [pix(1), pix(2), pix(3)],
        datatype: r.i16(70),
        vox_offset: r.f32(108).max(HEADER_SIZE as f32) as usize,
        scl_slope: if slope == 0.0 { 1.0 } else { slope },
        scl_inter: r.f32(116) as f64,
        little_endian: le,
    })
}

fn voxels(bytes: &[u8], h: &NiftiHeader, origin: &Path) -> Result<Vec<f64>> {
    let n: usize = h.dims.iter().product();
    let width = match h.datatype {
        2 => 1,
        4 | 512 => 2,
        8 | 16 => 4,
        64 => 8,
        t => {
            return Err(Error::format(
                origin,
                format!("unsupported NIfTI datatype {t}"),
            ))
        }
    };
    let need = h.vox_offset + n * width;
    if bytes.len() < need {
        return Err(Error::format(
            origin,
            format!("expected at least {need} bytes, found {}", bytes.len()),
        ));
    }
    let data = &bytes[h.vox_offset..need];
    let le = h.little_endian;
    let raw: Vec<f64> = data
        .chunks_exact(width)
        .map(|c| match (h.datatype, le) {
            (2, _) => c[0] as f64,
            (4, true) => i16::from_le_bytes([c[0], c[1]]) as f64,
            (4, false) => i16::from_be_bytes([c[0], c[1]]) as f64,
            (512, true) => u16::from_le_bytes([c[0], c[1]]) as f64,
            (512, false) => u16::from_be_bytes([c[0], c[1]]) as f64,
            (8, true) => i32::from_le_bytes(c.try_into().unwrap()) as f64,
            (8, false) => i32::from_be_bytes(c.try_into().unwrap()) as f64,
            (16, true) => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            (16, false) => f32::from_be_bytes(c.try_into().unwrap()) as f64,
            (64, true) => f64::from_le_bytes(c.try_into().unwrap()),
            (64, false) => f64::from_be_bytes(c.try_into().unwrap()),
            _ => unreachable!("datatype checked above"),
        })
        .collect();
    Ok(raw)
}

/// Reorders x-fastest NIfTI voxels into (slice, row, column) = (z, y, x), which is the same order.
fn extents(h: &NiftiHeader) -> [usize; 3] {
    [h.dims[2], h.dims[1], h.dims[0]]
}

fn spacing(h: &NiftiHeader) -> [f64; 3] {
    [h.pixdim[2], h.pixdim[1], h.pixdim[0]]
}

pub fn read_nifti_volume(
    path: impl AsRef<Path>,
    modality: Modality,
    patient_id: &str,
) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&bytes, path)?;
    let data = voxels(&bytes, &h, path)?
        .into_iter()
        .map(|v| (v * h.scl_slope + h.scl_inter) as f32)
        .collect();
    Volume::new(extents(&h), spacing(&h), modality, patient_id, data)
}

/// Challenge-style label values → internal {0,1,2,3}.
pub fn default_label_table() -> BTreeMap<i64, u8> {
    BTreeMap::from([(0, 0), (500, 1), (200, 2), (600, 3)])
}

pub fn read_nifti_mask(
    path: impl AsRef<Path>,
    modality: Modality,
    patient_id: &str,
    table: &BTreeMap<i64, u8>,
) -> Result<MaskVolume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&bytes, path)?;
    let labels = voxels(&bytes, &h, path)?
        .into_iter()
        .map(|v| {
            table.get(&(v.round() as i64)).copied().ok_or_else(|| {
                Error::format(
                    path,
                    format!("label value {v} has no entry in the label table"),
                )
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    check_labels(&labels)?;
    MaskVolume::new(
        extents(&h),
        spacing(&h),
        modality,
        patient_id,
        Provenance::Expert,
        labels,
    )
}

/// Builds a little-endian NIfTI-1 file; used by tests and for exporting fixtures.
pub fn encode_nifti_f32(extents: [usize; 3], spacing_mm: [f64; 3], data: &[f32]) -> Vec<u8> {
    let mut b = vec![0u8; 352];
    b[..4].copy_from_slice(&348i32.to_le_bytes());
    let dims = [
        3i16,
        extents[2] as i16,
        extents[1] as i16,
        extents[0] as i16,
        1,
        1,
        1,
        1,
    ];
    for (k, d) in dims.iter().enumerate() {
        b[40 + 2 * k..42 + 2 * k].copy_from_slice(&d.to_le_bytes());
    }
    b[70..72].copy_from_slice(&16i16.to_le_bytes());
    b[72..74].copy_from_slice(&32i16.to_le_bytes());
    let pix = [
        1.0f32,
        spacing_mm[2] as f32,
        spacing_mm[1] as f32,
        spacing_mm[0] as f32,
    ];
    for (k, p) in pix.iter().enumerate() {
        b[76 + 4 * k..80 + 4 * k].copy_from_slice(&p.to_le_bytes());
    }
    b[108..112].copy_from_slice(&352f32.to_le_bytes());
    b[344..348].copy_from_slice(b"n+1\0");
    for v in data {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}
