//! Assembles cropped training samples and turns batches into tensors.

use crate::data::{augment, crop_rois, zscore_normalize, Batch, Case, Plane, Split};
use crate::error::{Error, Result};
use crate::losses::{one_hot, Supervision};
use crate::tensor::Tensor;
use crate::transfer::{assemble_transfer_set, TransferSummary};

use super::config::TrainConfig;

/// One cropped (image, mask) window, not yet augmented or normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Plane<f32>,
    pub mask: Plane<u8>,
}

/// The expert set S and the pseudo-labeled transfer set T.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub s: Vec<Sample>,
    pub t: Vec<Sample>,
    pub transfer: Vec<TransferSummary>,
}

fn crops(
    image: &Plane<f32>,
    mask: &Plane<u8>,
    cfg: &TrainConfig,
    out: &mut Vec<Sample>,
) -> Result<()> {
    for c in crop_rois(image, mask, cfg.crop_size, cfg.crop_shift)? {
        out.push(Sample {
            image: c.image,
            mask: c.mask,
        });
    }
    Ok(())
}

impl TrainingData {
    /// S: five ROI crops of every annotated slice of every expert-labeled training case.
    /// T (only when `λ < 1`): five crops of every pseudo-labeled LGE slice.
    pub fn from_cases(cases: &[Case], cfg: &TrainConfig) -> Result<Self> {
        let train: Vec<&Case> = cases.iter().filter(|c| c.split == Split::Train).collect();
        let mut data = TrainingData::default();
        for c in &train {
            let Some(mask) = c
                .mask
                .as_ref()
                .filter(|m| m.provenance == Supervision::Expert)
            else {
                continue;
            };
            let (h, w) = c.volume.plane();
            for i in (0..mask.slices()).filter(|&i| mask.slice_is_annotated(i)) {
                let image = Plane::new(h, w, c.volume.slice(i).to_vec())?;
                let m = Plane::new(h, w, mask.slice(i).to_vec())?;
                crops(&image, &m, cfg, &mut data.s)?;
            }
        }
        if cfg.uses_transfer() {
            let (pseudo, summary) = assemble_transfer_set(&train, cfg.collision_policy)?;
            for p in &pseudo {
                crops(&p.image, &p.mask, cfg, &mut data.t)?;
            }
            data.transfer = summary;
        }
        if data.s.is_empty() {
            return Err(Error::Data("no expert-annotated training slices".into()));
        }
        Ok(data)
    }

    pub fn from_samples(s: Vec<Sample>, t: Vec<Sample>) -> Self {
        Self {
            s,
            t,
            transfer: Vec::new(),
        }
    }
}

/// Batch tensors ready for the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    /// `[B, 1, H, W]`, z-scored per sample.
    pub images: Tensor,
    /// `[B, 4, H, W]` one-hot.
    pub targets: Tensor,
    pub tags: Vec<Supervision>,
}

impl PreparedBatch {
    pub fn rows(&self, tag: Supervision) -> Vec<usize> {
        (0..self.tags.len())
            .filter(|&i| self.tags[i] == tag)
            .collect()
    }
}

/// SplitMix64 finalizer; derives independent seeds from structured inputs.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Crop → augment (seeded by run seed, iteration and batch position) → z-score.
pub fn prepare_batch(
    data: &TrainingData,
    batch: &Batch,
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<PreparedBatch> {
    let size = cfg.crop_size;
    let b = batch.items.len();
    let mut images = Vec::with_capacity(b * size * size);
    let mut labels = Vec::with_capacity(b * size * size);
    let mut tags = Vec::with_capacity(b);
    for (pos, &(tag, idx)) in batch.items.iter().enumerate() {
        let sample = match tag {
            Supervision::Expert => &data.s[idx],
            Supervision::Pseudo => &data.t[idx],
        };
        let (img, msk) = if cfg.augment {
            let seed = mix_seed(&[cfg.seed, iteration, pos as u64]);
            augment(&sample.image, &sample.mask, &cfg.augment_ranges(), seed)?
        } else {
            (sample.image.clone(), sample.mask.clone())
        };
        let (z, _) = zscore_normalize(&img.data);
        images.extend(z);
        labels.extend(msk.data);
        tags.push(tag);
    }
    Ok(PreparedBatch {
        images: Tensor::new([b, 1, size, size], images)?,
        targets: one_hot(&labels, b, 4, size, size)?,
        tags,
    })
}
