//! Slice-index correspondence and pseudo-mask transfer between sequences.
//!
//! Source slice `i` of `m` maps to target slice `j = ⌊i·n/m⌋` of `n` (0-based).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Case, MaskVolume, Modality, Plane, Provenance, Volume};
use crate::error::{Error, Result};

pub fn map_slice_index(i: usize, m: usize, n: usize) -> Result<usize> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "slice counts must be positive (m={m}, n={n})"
        )));
    }
    if i >= m {
        return Err(Error::InvalidArgument(format!(
            "source slice {i} out of range for m={m}"
        )));
    }
    Ok((i as u128 * n as u128 / m as u128) as usize)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceMapping {
    pub source: Modality,
    pub target: Modality,
    pub m: usize,
    pub n: usize,
    /// `table[i]` is the target slice of source slice `i`.
    pub table: Vec<usize>,
}

impl SliceMapping {
    pub fn new(source: Modality, target: Modality, m: usize, n: usize) -> Result<Self> {
        let table = (0..m)
            .map(|i| map_slice_index(i, m, n))
            .collect::<Result<_>>()?;
        Ok(Self {
            source,
            target,
            m,
            n,
            table,
        })
    }
}

/// Which source slice wins when several map to the same target slice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionPolicy {
    /// The largest source index.
    #[default]
    LastWriter,
    /// The smallest source index.
    FirstWriter,
}

/// A target-sequence slice labeled with a mask copied from another sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoCase {
    pub patient_id: String,
    pub image: Plane<f32>,
    pub mask: Plane<u8>,
    pub source_modality: Modality,
    pub target_modality: Modality,
    pub source_slice: usize,
    pub target_slice: usize,
    pub spacing_mm: [f64; 3],
}

impl PseudoCase {
    pub fn provenance(&self) -> Provenance {
        Provenance::Pseudo
    }
}

/// Nearest-neighbour resampling of a label plane to new extents.
pub fn resample_nearest(labels: &[u8], h: usize, w: usize, th: usize, tw: usize) -> Vec<u8> {
    if (h, w) == (th, tw) {
        return labels.to_vec();
    }
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = ((2 * y + 1) * h / (2 * th)).min(h - 1);
        for x in 0..tw {
            let sx = ((2 * x + 1) * w / (2 * tw)).min(w - 1);
            out.push(labels[sy * w + sx]);
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferStats {
    /// Annotated source slices considered.
    pub source_slices: usize,
    /// Distinct target slices that received a mask.
    pub target_slices: usize,
    /// Source slices discarded because another slice claimed the same target.
    pub collisions: usize,
}

/// One pseudo case per target slice reached by an annotated source slice.
pub fn build_pseudo_cases(
    source: &Case,
    target: &Volume,
    policy: CollisionPolicy,
) -> Result<Vec<PseudoCase>> {
    Ok(build_pseudo_cases_with_stats(source, target, policy)?.0)
}

pub fn build_pseudo_cases_with_stats(
    source: &Case,
    target: &Volume,
    policy: CollisionPolicy,
) -> Result<(Vec<PseudoCase>, TransferStats)> {
    if source.patient_id() != target.patient_id {
        return Err(Error::Data(format!(
            "cannot transfer masks from patient {} to patient {}",
            source.patient_id(),
            target.patient_id
        )));
    }
    let mask = source.mask.as_ref().ok_or_else(|| {
        Error::Data(format!(
            "{} {} has no mask to transfer",
            source.patient_id(),
            source.modality()
        ))
    })?;
    let (m, n) = (mask.slices(), target.slices());
    let (sh, sw) = mask.plane();
    let (th, tw) = target.plane();

    let mut chosen: BTreeMap<usize, usize> = BTreeMap::new();
    let mut stats = TransferStats::default();
    for i in (0..m).filter(|&i| mask.slice_is_annotated(i)) {
        stats.source_slices += 1;
        let j = map_slice_index(i, m, n)?;
        match (chosen.get(&j), policy) {
            (None, _) | (Some(_), CollisionPolicy::LastWriter) => {
                if chosen.insert(j, i).is_some() {
                    stats.collisions += 1;
                }
            }
            (Some(_), CollisionPolicy::FirstWriter) => stats.collisions += 1,
        }
    }
    stats.target_slices = chosen.len();

    let cases = chosen
        .into_iter()
        .map(|(j, i)| PseudoCase {
            patient_id: target.patient_id.clone(),
            image: Plane {
                height: th,
                width: tw,
                data: target.slice(j).to_vec(),
            },
            mask: Plane {
                height: th,
                width: tw,
                data: resample_nearest(mask.slice(i), sh, sw, th, tw),
            },
            source_modality: source.modality(),
            target_modality: target.modality,
            source_slice: i,
            target_slice: j,
            spacing_mm: target.spacing_mm,
        })
        .collect();
    Ok((cases, stats))
}

/// Per-patient summary of one source→target transfer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub patient_id: String,
    pub source: Modality,
    pub target: Modality,
    pub stats: TransferStats,
}

/// The transfer set T: for every patient whose LGE volume lacks an expert mask, pseudo
/// cases from each annotated bSSFP and T2 volume of the same patient.
pub fn assemble_transfer_set(
    cases: &[&Case],
    policy: CollisionPolicy,
) -> Result<(Vec<PseudoCase>, Vec<TransferSummary>)> {
    let mut out = Vec::new();
    let mut summary = Vec::new();
    for target in cases.iter().filter(|c| c.modality() == Modality::Lge) {
        if target
            .mask
            .as_ref()
            .is_some_and(|m| m.provenance == Provenance::Expert)
        {
            continue;
        }
        for source in cases.iter().filter(|c| {
            c.patient_id() == target.patient_id()
                && c.modality() != Modality::Lge
                && c.mask
                    .as_ref()
                    .is_some_and(|m| m.provenance == Provenance::Expert)
        }) {
            let (pc, stats) = build_pseudo_cases_with_stats(source, &target.volume, policy)?;
            out.extend(pc);
            summary.push(TransferSummary {
                patient_id: target.patient_id().to_string(),
                source: source.modality(),
                target: Modality::Lge,
                stats,
            });
        }
    }
    Ok((out, summary))
}

/// Collects pseudo cases of one source into a target-shaped mask volume; slices without
/// a transferred mask stay background and are not listed in the pseudo metadata.
pub fn pseudo_mask_volume(target: &Volume, cases: &[PseudoCase]) -> Result<MaskVolume> {
    let [n, h, w] = target.extents;
    let mut labels = vec![0u8; n * h * w];
    let mut slices = Vec::new();
    let mut source = None;
    for c in cases {
        if c.patient_id != target.patient_id || c.target_slice >= n {
            return Err(Error::Data(format!(
                "pseudo case for {} slice {} does not fit target {}",
                c.patient_id, c.target_slice, target.patient_id
            )));
        }
        labels[c.target_slice * h * w..(c.target_slice + 1) * h * w].copy_from_slice(&c.mask.data);
        slices.push(c.target_slice);
        source = Some(c.source_modality);
    }
    let mut m = MaskVolume::new(
        target.extents,
        target.spacing_mm,
        target.modality,
        &target.patient_id,
        Provenance::Pseudo,
        labels,
    )?;
    slices.sort_unstable();
    m.pseudo = Some(crate::data::volume::PseudoInfo {
        source_modality: source.unwrap_or(Modality::Bssfp),
        slices,
    });
    Ok(m)
}
