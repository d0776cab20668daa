//! Random rotation, shear and zoom applied congruently to an image and its mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::Plane;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub max_shear: f64,
    pub zoom: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            max_shear: 0.1,
            zoom: (0.9, 1.1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub shear: f64,
    pub zoom: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        shear: 0.0,
        zoom: 1.0,
    };

    pub fn sample(ranges: &AugmentRanges, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let rotation_deg = sym(&mut rng, ranges.max_rotation_deg);
        let shear = sym(&mut rng, ranges.max_shear);
        let (lo, hi) = ranges.zoom;
        let zoom = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        Self {
            rotation_deg,
            shear,
            zoom,
        }
    }

    /// Forward map `A = R·S·Z` acting on (x, y) about the slice center.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let z = self.zoom;
        let k = self.shear;
        // R·[[1,k],[0,1]]·zI
        [[c * z, (c * k - s) * z], [s * z, (s * k + c) * z]]
    }
}

/// Samples parameters from `seed` and applies them.
pub fn augment(
    image: &Plane<f32>,
    mask: &Plane<u8>,
    ranges: &AugmentRanges,
    seed: u64,
) -> Result<(Plane<f32>, Plane<u8>)> {
    apply(image, mask, &AugmentParams::sample(ranges, seed))
}

/// Inverse-maps every output pixel: bilinear for the image, nearest neighbour for the
/// mask. Pixels that land outside the source become 0 / background.
pub fn apply(
    image: &Plane<f32>,
    mask: &Plane<u8>,
    p: &AugmentParams,
) -> Result<(Plane<f32>, Plane<u8>)> {
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(Error::Data("augment: image and mask extents differ".into()));
    }
    if !(p.zoom > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "augment: zoom {} must be positive",
            p.zoom
        )));
    }
    let (h, w) = (image.height, image.width);
    let a = p.matrix();
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);

    let mut out_img = Plane::filled(h, w, 0.0f32);
    let mut out_msk = Plane::filled(h, w, 0u8);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            let i = y * w + x;
            out_img.data[i] = bilinear(image, sy, sx);
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                out_msk.data[i] = mask.at(ny as usize, nx as usize);
            }
        }
    }
    Ok((out_img, out_msk))
}

fn bilinear(p: &Plane<f32>, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let sample = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= p.height as f64 || xx >= p.width as f64 {
            0.0
        } else {
            p.at(yy as usize, xx as usize) as f64
        }
    };
    // Skip zero-weight taps so integer coordinates reproduce the source value exactly.
    let mut acc = 0.0;
    for (wy, yy) in [(1.0 - fy, y0), (fy, y0 + 1.0)] {
        if wy == 0.0 {
            continue;
        }
        for (wx, xx) in [(1.0 - fx, x0), (fx, x0 + 1.0)] {
            if wx != 0.0 {
                acc += wy * wx * sample(yy, xx);
            }
        }
    }
    acc as f32
}
