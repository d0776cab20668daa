//! Per-slice intensity normalization and ROI cropping.

use crate::error::{Error, Result};

/// A 2D row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Plane<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Data(format!(
                "plane {height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Copies the `h×w` window whose top-left corner is `(oy, ox)`; must lie inside.
    pub fn window(&self, oy: usize, ox: usize, h: usize, w: usize) -> Self {
        debug_assert!(oy + h <= self.height && ox + w <= self.width);
        let mut data = Vec::with_capacity(h * w);
        for y in oy..oy + h {
            data.extend_from_slice(&self.data[y * self.width + ox..y * self.width + ox + w]);
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    /// Pads symmetrically with `fill` so both extents are at least `min`.
    /// Returns the padded plane and the (row, column) offset of the original inside it.
    pub fn pad_to(&self, min: usize, fill: T) -> (Self, (usize, usize)) {
        let (h, w) = (self.height.max(min), self.width.max(min));
        let (py, px) = ((h - self.height) / 2, (w - self.width) / 2);
        if (py, px) == (0, 0) && (h, w) == (self.height, self.width) {
            return (self.clone(), (0, 0));
        }
        let mut out = Self::filled(h, w, fill);
        for y in 0..self.height {
            let dst = (y + py) * w + px;
            out.data[dst..dst + self.width]
                .copy_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        (out, (py, px))
    }
}

/// Z-score normalization: zero mean, unit population standard deviation.
///
/// A constant input maps to all zeros and the returned flag is set.
pub fn zscore_normalize(values: &[f32]) -> (Vec<f32>, bool) {
    if values.is_empty() {
        return (Vec::new(), true);
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std <= f64::EPSILON * mean.abs().max(1.0) {
        return (vec![0.0; values.len()], true);
    }
    (
        values
            .iter()
            .map(|&v| ((v as f64 - mean) / std) as f32)
            .collect(),
        false,
    )
}

/// Inclusive bounding box `(y0, x0, y1, x1)` of nonzero labels.
pub fn bounding_box(mask: &Plane<u8>) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.at(y, x) != 0 {
                bb = Some(match bb {
                    None => (y, x, y, x),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                });
            }
        }
    }
    bb
}

/// One cropped training window.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiCrop {
    /// Top-left corner in the (padded) slice.
    pub offset: (usize, usize),
    pub image: Plane<f32>,
    pub mask: Plane<u8>,
}

/// Default shift between the centered crop and the four displaced ones.
pub const DEFAULT_CROP_SHIFT: usize = 16;

/// Five `crop×crop` windows that each enclose every annotated pixel: centered on the
/// annotation box, then shifted by `(−Δ,0), (+Δ,0), (0,−Δ), (0,+Δ)` and clamped so the
/// window stays in bounds and keeps the box inside. Slices smaller than the crop are
/// zero/background padded first.
pub fn crop_rois(
    image: &Plane<f32>,
    mask: &Plane<u8>,
    crop: usize,
    shift: usize,
) -> Result<Vec<RoiCrop>> {
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(Error::Data(format!(
            "image {}x{} and mask {}x{} differ",
            image.height, image.width, mask.height, mask.width
        )));
    }
    if crop == 0 {
        return Err(Error::InvalidArgument("crop size must be positive".into()));
    }
    let (image, _) = image.pad_to(crop, 0.0);
    let (mask, _) = mask.pad_to(crop, 0);
    let (h, w) = (image.height, image.width);
    let (y0, x0, y1, x1) = bounding_box(&mask).unwrap_or((0, 0, h - 1, w - 1));
    let (bh, bw) = (y1 - y0 + 1, x1 - x0 + 1);
    let has_roi = bounding_box(&mask).is_some();
    if has_roi && (bh > crop || bw > crop) {
        return Err(Error::Data(format!(
            "annotation box {bh}x{bw} does not fit in a {crop}x{crop} crop"
        )));
    }

    // Admissible top-left range per axis.
    let range = |lo_box: usize, hi_box: usize, extent: usize| -> (i64, i64) {
        if has_roi {
            (
                (hi_box + 1).saturating_sub(crop) as i64,
                lo_box.min(extent - crop) as i64,
            )
        } else {
            (0, (extent - crop) as i64)
        }
    };
    let (ylo, yhi) = range(y0, y1, h);
    let (xlo, xhi) = range(x0, x1, w);
    let center = |lo_box: usize, hi_box: usize, lo: i64, hi: i64| -> i64 {
        let c2 = (lo_box + hi_box + 1) as i64; // twice the box center
        ((c2 - crop as i64) / 2).clamp(lo, hi)
    };
    let cy = center(y0, y1, ylo, yhi);
    let cx = center(x0, x1, xlo, xhi);
    let d = shift as i64;
    let offsets = [(0, 0), (-d, 0), (d, 0), (0, -d), (0, d)];
    Ok(offsets
        .iter()
        .map(|&(dy, dx)| {
            let oy = (cy + dy).clamp(ylo, yhi) as usize;
            let ox = (cx + dx).clamp(xlo, xhi) as usize;
            RoiCrop {
                offset: (oy, ox),
                image: image.window(oy, ox, crop, crop),
                mask: mask.window(oy, ox, crop, crop),
            }
        })
        .collect())
}

/// Placement of a fixed-size window relative to a native slice, per axis:
/// `(source start, destination start, length)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CenterWindow {
    pub rows: (usize, usize, usize),
    pub cols: (usize, usize, usize),
    pub size: usize,
    pub native: (usize, usize),
}

impl CenterWindow {
    pub fn new(height: usize, width: usize, size: usize) -> Self {
        let axis = |n: usize| {
            if n >= size {
                ((n - size) / 2, 0, size)
            } else {
                (0, (size - n) / 2, n)
            }
        };
        Self {
            rows: axis(height),
            cols: axis(width),
            size,
            native: (height, width),
        }
    }

    /// Native slice → `size×size` window (center crop or pad with `fill`).
    pub fn extract<T: Copy + Default>(&self, plane: &Plane<T>, fill: T) -> Plane<T> {
        let mut out = Plane::filled(self.size, self.size, fill);
        let (sr, dr, nr) = self.rows;
        let (sc, dc, nc) = self.cols;
        for r in 0..nr {
            let src = (sr + r) * plane.width + sc;
            let dst = (dr + r) * self.size + dc;
            out.data[dst..dst + nc].copy_from_slice(&plane.data[src..src + nc]);
        }
        out
    }

    /// Window → native extents; pixels outside the window get `fill`.
    pub fn restore<T: Copy + Default>(&self, window: &Plane<T>, fill: T) -> Plane<T> {
        let (h, w) = self.native;
        let mut out = Plane::filled(h, w, fill);
        let (sr, dr, nr) = self.rows;
        let (sc, dc, nc) = self.cols;
        for r in 0..nr {
            let dst = (sr + r) * w + sc;
            let src = (dr + r) * self.size + dc;
            out.data[dst..dst + nc].copy_from_slice(&window.data[src..src + nc]);
        }
        out
    }
}
