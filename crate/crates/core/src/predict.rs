//! Slice-wise inference with a trained generator.

use std::path::Path;

use crate::data::{
    zscore_normalize, CenterWindow, MaskVolume, Plane, Provenance, Volume, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::nn::{generator_forward, Architecture, GeneratorConfig, ModelParams};
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_PREDICT_CROP: usize = 224;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictOptions {
    /// Side of the center window each slice is cropped or padded to.
    pub crop_size: usize,
    /// Slices per forward pass.
    pub batch: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            crop_size: DEFAULT_PREDICT_CROP,
            batch: 4,
        }
    }
}

/// Loads a generator checkpoint, rejecting one written for a different architecture.
pub fn load_generator(path: impl AsRef<Path>, config: &GeneratorConfig) -> Result<ModelParams> {
    ModelParams::load(path, &Architecture::Generator(config.clone()))
}

/// Per-pixel argmax over `[B, C, H, W]` scores; ties go to the lowest class index.
pub fn argmax_channels(scores: &Tensor) -> Result<Vec<u8>> {
    let [b, c, h, w] = scores.dims4()?;
    let hw = h * w;
    let d = scores.data();
    let mut out = vec![0u8; b * hw];
    for n in 0..b {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = d[n * c * hw + p];
            for k in 1..c {
                let v = d[(n * c + k) * hw + p];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            out[n * hw + p] = best as u8;
        }
    }
    Ok(out)
}

/// Labels for already-windowed `size×size` image slices (z-scored here).
pub fn predict_windows(g: &ModelParams, windows: &[Plane<f32>]) -> Result<Vec<Plane<u8>>> {
    let Some(first) = windows.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(windows.len() * h * w);
    for p in windows {
        if (p.height, p.width) != (h, w) {
            return Err(Error::InvalidArgument(
                "predict_windows: windows differ in size".into(),
            ));
        }
        data.extend(zscore_normalize(&p.data).0);
    }
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape, false);
    let x = tape.constant(Tensor::new([windows.len(), 1, h, w], data)?);
    let logits = generator_forward(&mut tape, &bound, x)?;
    let v = tape.value(logits);
    if v.shape()[1] != NUM_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "generator emits {} classes, expected {NUM_CLASSES}",
            v.shape()[1]
        )));
    }
    let labels = argmax_channels(v)?;
    labels
        .chunks(h * w)
        .map(|c| Plane::new(h, w, c.to_vec()))
        .collect()
}

/// Segments every slice of `volume`: center crop/pad, z-score, forward, argmax,
/// then un-crop with background outside the window.
pub fn predict_volume(
    g: &ModelParams,
    volume: &Volume,
    opts: PredictOptions,
) -> Result<MaskVolume> {
    if opts.batch == 0 {
        return Err(Error::InvalidArgument(
            "prediction batch must be positive".into(),
        ));
    }
    if let Architecture::Generator(cfg) = g.arch() {
        let m = cfg.spatial_multiple();
        if opts.crop_size == 0 || opts.crop_size % m != 0 {
            return Err(Error::InvalidArgument(format!(
                "prediction crop {} must be a positive multiple of {m}",
                opts.crop_size
            )));
        }
    }
    let (h, w) = volume.plane();
    let win = CenterWindow::new(h, w, opts.crop_size);
    let mut labels = Vec::with_capacity(volume.data.len());
    let slices: Vec<usize> = (0..volume.slices()).collect();
    for chunk in slices.chunks(opts.batch) {
        let windows = chunk
            .iter()
            .map(|&i| Ok(win.extract(&Plane::new(h, w, volume.slice(i).to_vec())?, 0.0)))
            .collect::<Result<Vec<_>>>()?;
        for p in predict_windows(g, &windows)? {
            labels.extend(win.restore(&p, 0).data);
        }
    }
    MaskVolume::new(
        volume.extents,
        volume.spacing_mm,
        volume.modality,
        volume.patient_id.clone(),
        Provenance::Pseudo,
        labels,
    )
}
