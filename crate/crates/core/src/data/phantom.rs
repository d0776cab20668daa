//! Synthetic multi-sequence cardiac phantoms.
//!
//! Every patient has one latent anatomy (LV blood pool disk, myocardial annulus, RV
//! crescent) that tapers from base to apex. Each sequence samples it at its own slice
//! count, with a small in-plane misregistration, and renders it with its own contrast:
//!
//! | tissue     | bSSFP | T2   | LGE                     |
//! |------------|-------|------|-------------------------|
//! | LV / RV    | bright| dark | mid                     |
//! | myocardium | dark  | mid+ | nulled, bright scar arcs|
//! | body       | mid   | mid  | bright rim fat, mid     |

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Case, CaseEntry, DatasetManifest, Split};
use super::volume::{save_mask, save_volume, MaskVolume, Modality, Provenance, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub seed: u64,
    pub patients: usize,
    /// Slice counts for (bSSFP, T2, LGE).
    pub slices: [usize; 3],
    /// The first this-many patients get expert LGE masks and go to the validation split.
    pub lge_labeled: usize,
    pub height: usize,
    pub width: usize,
    pub spacing_mm: [f64; 3],
    /// Standard deviation of additive Gaussian noise, relative to the blood signal.
    pub noise: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            patients: 15,
            slices: [10, 5, 12],
            lge_labeled: 3,
            height: 144,
            width: 144,
            spacing_mm: [10.0, 1.0, 1.0],
            noise: 0.05,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 {
            return Err(Error::Config("phantom: need at least one patient".into()));
        }
        if self.slices.contains(&0) || self.height < 16 || self.width < 16 {
            return Err(Error::Config(
                "phantom: slice counts must be positive and slices at least 16x16".into(),
            ));
        }
        if self.lge_labeled > self.patients {
            return Err(Error::Config(format!(
                "phantom: {} LGE-labeled patients out of {}",
                self.lge_labeled, self.patients
            )));
        }
        Ok(())
    }

    pub fn slice_count(&self, m: Modality) -> usize {
        match m {
            Modality::Bssfp => self.slices[0],
            Modality::T2 => self.slices[1],
            Modality::Lge => self.slices[2],
        }
    }
}

/// Latent per-patient geometry, in pixels.
#[derive(Clone, Debug)]
struct Anatomy {
    cy: f64,
    cx: f64,
    lv_radius: f64,
    myo_thickness: f64,
    /// Direction from LV to RV center, radians.
    rv_angle: f64,
    rv_scale: f64,
    /// LGE scar arcs: (start angle, width) per slice position band.
    scar: Vec<(f64, f64)>,
}

impl Anatomy {
    fn sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let size = h.min(w) as f64;
        let scar = (0..4)
            .map(|_| {
                (
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.6..1.6),
                )
            })
            .collect();
        Self {
            cy: h as f64 / 2.0 + rng.gen_range(-0.05..0.05) * size,
            cx: w as f64 / 2.0 + rng.gen_range(-0.03..0.07) * size,
            lv_radius: size * rng.gen_range(0.085..0.11),
            myo_thickness: size * rng.gen_range(0.035..0.05),
            rv_angle: std::f64::consts::PI + rng.gen_range(-0.35..0.35),
            rv_scale: rng.gen_range(1.0..1.2),
            scar,
        }
    }
}

/// Per-sequence view of the anatomy at one slice.
struct SliceGeometry {
    cy: f64,
    cx: f64,
    lv: f64,
    epi: f64,
    rv_cy: f64,
    rv_cx: f64,
    rv: f64,
    scar: Option<(f64, f64)>,
}

impl SliceGeometry {
    /// `z` runs from base (0) to apex (1).
    fn new(a: &Anatomy, z: f64, shift: (f64, f64), radial: f64) -> Self {
        let taper = (1.0 - 0.5 * z * z).max(0.3) * radial;
        let lv = a.lv_radius * taper;
        let epi = lv + a.myo_thickness * (0.8 + 0.2 * taper);
        let rv_taper = (1.0 - 0.9 * z * z).max(0.0);
        let rv = epi * a.rv_scale * rv_taper;
        let (cy, cx) = (a.cy + shift.0, a.cx + shift.1);
        let off = epi * 0.95;
        let band = ((z * a.scar.len() as f64) as usize).min(a.scar.len() - 1);
        Self {
            cy,
            cx,
            lv,
            epi,
            rv_cy: cy + off * a.rv_angle.sin(),
            rv_cx: cx + off * a.rv_angle.cos(),
            rv,
            scar: (band % 2 == 0).then(|| a.scar[band]),
        }
    }

    fn label(&self, y: f64, x: f64) -> u8 {
        let r = ((y - self.cy).powi(2) + (x - self.cx).powi(2)).sqrt();
        if r < self.lv {
            return 1;
        }
        if r < self.epi {
            return 2;
        }
        let rr = ((y - self.rv_cy).powi(2) + (x - self.rv_cx).powi(2)).sqrt();
        if rr < self.rv && r > self.epi + 1.0 {
            return 3;
        }
        0
    }

    fn in_scar(&self, y: f64, x: f64) -> bool {
        let Some((start, width)) = self.scar else {
            return false;
        };
        let ang = (y - self.cy)
            .atan2(x - self.cx)
            .rem_euclid(std::f64::consts::TAU);
        let rel = (ang - start).rem_euclid(std::f64::consts::TAU);
        rel < width
    }
}

struct Contrast {
    air: f64,
    body: f64,
    fat: f64,
    blood_lv: f64,
    blood_rv: f64,
    myo: f64,
    scar: f64,
}

fn contrast(m: Modality) -> Contrast {
    match m {
        Modality::Bssfp => Contrast {
            air: 0.02,
            body: 0.35,
            fat: 0.45,
            blood_lv: 0.95,
            blood_rv: 0.9,
            myo: 0.2,
            scar: 0.2,
        },
        Modality::T2 => Contrast {
            air: 0.02,
            body: 0.45,
            fat: 0.5,
            blood_lv: 0.25,
            blood_rv: 0.3,
            myo: 0.65,
            scar: 0.75,
        },
        Modality::Lge => Contrast {
            air: 0.02,
            body: 0.3,
            fat: 0.8,
            blood_lv: 0.55,
            blood_rv: 0.5,
            myo: 0.1,
            scar: 0.95,
        },
    }
}

fn render(
    geom: &SliceGeometry,
    c: &Contrast,
    h: usize,
    w: usize,
    noise: &Normal<f64>,
    gain: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Vec<u8>) {
    let (by, bx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (ry, rx) = (0.46 * h as f64, 0.46 * w as f64);
    let intensity = |y: f64, x: f64| -> f64 {
        let body = ((y - by) / ry).powi(2) + ((x - bx) / rx).powi(2);
        if body > 1.0 {
            return c.air;
        }
        match geom.label(y, x) {
            1 => c.blood_lv,
            2 if geom.in_scar(y, x) => c.scar,
            2 => c.myo,
            3 => c.blood_rv,
            _ => {
                let r = ((y - geom.cy).powi(2) + (x - geom.cx).powi(2)).sqrt();
                if r < geom.epi + 2.5 || body > 0.85 {
                    c.fat
                } else {
                    c.body
                }
            }
        }
    };
    let mut img = Vec::with_capacity(h * w);
    let mut lab = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            // 2×2 supersampling softens edges like partial-volume blur.
            let v = [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)]
                .iter()
                .map(|&(dy, dx)| intensity(yc + dy, xc + dx))
                .sum::<f64>()
                / 4.0;
            let bias = 1.0 + 0.15 * (x as f64 / w as f64 - 0.5);
            img.push((gain * (v * bias + noise.sample(rng))) as f32);
            lab.push(geom.label(yc, xc));
        }
    }
    (img, lab)
}

/// Generates every patient's three sequences in memory.
///
/// bSSFP and T2 always carry expert masks; LGE does for the first `lge_labeled` patients.
pub fn synth_phantom(cfg: &PhantomConfig) -> Result<Vec<Case>> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let noise =
        Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(format!("phantom noise: {e}")))?;
    let mut cases = Vec::new();
    for p in 0..cfg.patients {
        let patient_id = format!("P{:03}", p + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (p as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let anatomy = Anatomy::sample(&mut rng, h, w);
        let lge_labeled = p < cfg.lge_labeled;
        let split = if lge_labeled {
            Split::Val
        } else {
            Split::Train
        };
        for modality in Modality::ALL {
            let n = cfg.slice_count(modality);
            let shift = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let radial = rng.gen_range(0.97..1.03);
            let gain = rng.gen_range(0.8..1.25);
            let c = contrast(modality);
            let mut data = Vec::with_capacity(n * h * w);
            let mut labels = Vec::with_capacity(n * h * w);
            for k in 0..n {
                let z = (k as f64 + 0.5) / n as f64;
                let geom = SliceGeometry::new(&anatomy, z, shift, radial);
                let (img, lab) = render(&geom, &c, h, w, &noise, gain, &mut rng);
                data.extend(img);
                labels.extend(lab);
            }
            let extents = [n, h, w];
            let volume = Volume::new(extents, cfg.spacing_mm, modality, &patient_id, data)?;
            let annotated = modality != Modality::Lge || lge_labeled;
            let mask = annotated
                .then(|| {
                    MaskVolume::new(
                        extents,
                        cfg.spacing_mm,
                        modality,
                        &patient_id,
                        Provenance::Expert,
                        labels,
                    )
                })
                .transpose()?;
            cases.push(Case {
                volume,
                mask,
                split,
            });
        }
    }
    Ok(cases)
}

/// Writes cases as `.vol`/`.msk` files plus `manifest.json` into `dir`.
pub fn write_dataset(cases: &[Case], dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = DatasetManifest {
        cases: Vec::new(),
        root: dir.to_path_buf(),
    };
    for c in cases {
        let stem = format!("{}_{}", c.patient_id(), c.modality());
        let image = format!("{stem}.vol");
        save_volume(&c.volume, dir.join(&image))?;
        let mask = match &c.mask {
            Some(m) => {
                let name = format!("{stem}_gt.msk");
                save_mask(m, dir.join(&name))?;
                Some(name.into())
            }
            None => None,
        };
        manifest.cases.push(CaseEntry {
            patient_id: c.patient_id().to_string(),
            modality: c.modality(),
            image: image.into(),
            mask,
            split: c.split,
        });
    }
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}
