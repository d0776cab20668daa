//! PNG output: mask overlays and loss curves.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use crate::data::{MaskVolume, Volume};
use crate::error::{Error, Result};

/// Blend weight of the class color over the grayscale base.
pub const OVERLAY_ALPHA: f64 = 0.4;
/// Colors for labels 1 (LV), 2 (myo), 3 (RV).
pub const PALETTE: [[u8; 3]; 3] = [[255, 0, 0], [0, 255, 0], [0, 0, 255]];

/// An RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Rgb {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Rgb(self.pixels[y as usize * self.width + x as usize])
        })
    }

    pub fn from_image(img: &RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.pixels().map(|p| p.0).collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self::from_image(&img.into_rgb8()))
    }

    /// Writes a PNG.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_image()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

/// Grayscale rendering of one slice with intensities min-max scaled over the whole volume.
pub fn grayscale(volume: &Volume, slice: usize) -> Rgb {
    let (h, w) = volume.plane();
    let (lo, hi) = volume
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut img = Rgb::new(w, h, [0; 3]);
    for (p, &v) in img.pixels.iter_mut().zip(volume.slice(slice)) {
        let g = (((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8;
        *p = [g; 3];
    }
    img
}

/// `base` with labelled pixels blended toward their class color.
pub fn overlay(base: &Rgb, labels: &[u8]) -> Result<Rgb> {
    if labels.len() != base.pixels.len() {
        return Err(Error::InvalidArgument(format!(
            "overlay: {} labels for {} pixels",
            labels.len(),
            base.pixels.len()
        )));
    }
    let mut out = base.clone();
    for (p, &l) in out.pixels.iter_mut().zip(labels) {
        if l == 0 {
            continue;
        }
        let color = PALETTE
            .get(l as usize - 1)
            .ok_or_else(|| Error::InvalidArgument(format!("overlay: label {l} has no color")))?;
        for ch in 0..3 {
            let v = (1.0 - OVERLAY_ALPHA) * p[ch] as f64 + OVERLAY_ALPHA * color[ch] as f64;
            p[ch] = v.round() as u8;
        }
    }
    Ok(out)
}

/// Writes `<patient>_<modality>_sNNN.png` for every slice; returns the paths in slice order.
pub fn export_overlays(
    volume: &Volume,
    mask: &MaskVolume,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    if volume.extents != mask.extents {
        return Err(Error::InvalidArgument(format!(
            "volume extents {:?} differ from mask extents {:?}",
            volume.extents, mask.extents
        )));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(volume.slices());
    for i in 0..volume.slices() {
        let img = overlay(&grayscale(volume, i), mask.slice(i))?;
        let path = dir.join(format!(
            "{}_{}_s{i:03}.png",
            volume.patient_id, volume.modality
        ));
        img.write(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

const PLOT_W: usize = 480;
const PLOT_H: usize = 240;
const MARGIN: usize = 12;

/// Line plot of `values` against their index; non-finite values break the line.
pub fn plot_series(values: &[f64]) -> Rgb {
    let mut img = Rgb::new(PLOT_W, PLOT_H, [255; 3]);
    let (x0, y0, x1, y1) = (
        MARGIN as i64,
        MARGIN as i64,
        (PLOT_W - MARGIN) as i64,
        (PLOT_H - MARGIN) as i64,
    );
    let axis = [96; 3];
    img.line((x0, y1), (x1, y1), axis);
    img.line((x0, y0), (x0, y1), axis);
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return img;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = values.len().max(2) - 1;
    let to_px = |i: usize, v: f64| {
        let x = x0 + ((x1 - x0) as f64 * i as f64 / n as f64).round() as i64;
        let y = y1 - ((y1 - y0) as f64 * (v - lo) / span).round() as i64;
        (x, y)
    };
    let mut prev = None;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            prev = None;
            continue;
        }
        let p = to_px(i, v);
        img.line(prev.unwrap_or(p), p, [200, 30, 30]);
        prev = Some(p);
    }
    img
}

/// Reads a training log CSV and writes one `<column>.png` curve per loss column.
pub fn plot_loss_log(
    csv_path: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let path = csv_path.as_ref();
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.first().map(String::as_str) != Some("iteration") {
        return Err(Error::format(path, "first column must be `iteration`"));
    }
    let mut columns = vec![Vec::new(); headers.len() - 1];
    for row in reader.records() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        for (col, field) in columns.iter_mut().zip(row.iter().skip(1)) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::format(path, format!("non-numeric value {field:?}")))?;
            col.push(v);
        }
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for (name, values) in headers.iter().skip(1).zip(&columns) {
        let p = dir.join(format!("{name}.png"));
        plot_series(values).write(&p)?;
        out.push(p);
    }
    Ok(out)
}
