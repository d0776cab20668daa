//! Overlap and surface-distance metrics per structure.
//!
//! Surfaces are taken slice by slice: a class pixel is on the boundary when one of its
//! four face neighbours is outside the class or outside the image. Distances are
//! Euclidean in millimetres using the in-plane spacing, and only compare points lying on
//! the same slice. Hausdorff is the maximum over all points of both sets; the average
//! surface distance pools every point of both sets. A point whose slice holds no point of
//! the other set is charged the in-plane image diagonal, and the result is flagged.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::volume::Extents;
use crate::data::MaskVolume;
use crate::error::{Error, Result};

/// Foreground classes reported.
pub const CLASSES: [u8; 3] = [1, 2, 3];
pub const CLASS_NAMES: [&str; 4] = ["background", "LV", "myo", "RV"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub empty_pred: bool,
    pub empty_ref: bool,
    /// Some boundary point had no same-slice counterpart and was charged the sentinel.
    pub sentinel: bool,
}

impl Flags {
    pub fn any(&self) -> bool {
        self.empty_pred || self.empty_ref || self.sentinel
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.empty_pred {
            parts.push("empty_pred");
        }
        if self.empty_ref {
            parts.push("empty_ref");
        }
        if self.sentinel {
            parts.push("sentinel");
        }
        f.write_str(&parts.join("|"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SetCounts {
    pub pred: usize,
    pub reference: usize,
    pub intersection: usize,
}

impl SetCounts {
    pub fn of(pred: &[u8], reference: &[u8], class: u8) -> Result<Self> {
        if pred.len() != reference.len() {
            return Err(Error::Shape(format!(
                "prediction has {} voxels, reference {}",
                pred.len(),
                reference.len()
            )));
        }
        let mut c = SetCounts::default();
        for (&p, &r) in pred.iter().zip(reference) {
            let (p, r) = (p == class, r == class);
            c.pred += p as usize;
            c.reference += r as usize;
            c.intersection += (p && r) as usize;
        }
        Ok(c)
    }

    pub fn both_empty(&self) -> bool {
        self.pred == 0 && self.reference == 0
    }

    /// `2|P∩R| / (|P|+|R|)`; 1.0 when both are empty.
    pub fn dice(&self) -> f64 {
        if self.both_empty() {
            1.0
        } else {
            2.0 * self.intersection as f64 / (self.pred + self.reference) as f64
        }
    }

    /// `|P∩R| / |P∪R|`; 1.0 when both are empty.
    pub fn jaccard(&self) -> f64 {
        if self.both_empty() {
            1.0
        } else {
            self.intersection as f64 / (self.pred + self.reference - self.intersection) as f64
        }
    }
}

fn check_congruent(pred: &MaskVolume, reference: &MaskVolume) -> Result<()> {
    if pred.extents != reference.extents {
        return Err(Error::Shape(format!(
            "prediction extents {:?} differ from reference {:?}",
            pred.extents, reference.extents
        )));
    }
    Ok(())
}

/// Returns the score and whether both sets were empty.
pub fn dice_score(pred: &MaskVolume, reference: &MaskVolume, class: u8) -> Result<(f64, bool)> {
    check_congruent(pred, reference)?;
    let c = SetCounts::of(&pred.labels, &reference.labels, class)?;
    Ok((c.dice(), c.both_empty()))
}

/// Mean Dice over LV, myo and RV for flat label arrays.
pub fn label_foreground_dice(pred: &[u8], reference: &[u8]) -> Result<f64> {
    let mut sum = 0.0;
    for &c in &CLASSES {
        sum += SetCounts::of(pred, reference, c)?.dice();
    }
    Ok(sum / CLASSES.len() as f64)
}

pub fn jaccard(pred: &MaskVolume, reference: &MaskVolume, class: u8) -> Result<(f64, bool)> {
    check_congruent(pred, reference)?;
    let c = SetCounts::of(&pred.labels, &reference.labels, class)?;
    Ok((c.jaccard(), c.both_empty()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceSource {
    Prediction,
    Reference,
}

/// A boundary pixel: slice, row, column.
pub type SurfacePoint = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePointSet {
    pub class: u8,
    pub source: SurfaceSource,
    pub extents: Extents,
    /// (row, column) spacing in mm.
    pub spacing_mm: [f64; 2],
    /// Row-major order within each slice, slices ascending.
    pub points: Vec<SurfacePoint>,
}

impl SurfacePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn position_mm(&self, p: SurfacePoint) -> [f64; 2] {
        [
            p.1 as f64 * self.spacing_mm[0],
            p.2 as f64 * self.spacing_mm[1],
        ]
    }

    /// Length of the in-plane image diagonal in mm.
    pub fn diagonal_mm(&self) -> f64 {
        let [_, h, w] = self.extents;
        ((h as f64 * self.spacing_mm[0]).powi(2) + (w as f64 * self.spacing_mm[1]).powi(2)).sqrt()
    }
}

pub fn extract_surface_labels(
    labels: &[u8],
    extents: Extents,
    spacing_mm: [f64; 2],
    class: u8,
    source: SurfaceSource,
) -> SurfacePointSet {
    let [n, h, w] = extents;
    let mut points = Vec::new();
    for s in 0..n {
        let sl = &labels[s * h * w..(s + 1) * h * w];
        let inside = |y: isize, x: isize| -> bool {
            y >= 0
                && x >= 0
                && (y as usize) < h
                && (x as usize) < w
                && sl[y as usize * w + x as usize] == class
        };
        for y in 0..h {
            for x in 0..w {
                if sl[y * w + x] != class {
                    continue;
                }
                let (yi, xi) = (y as isize, x as isize);
                if !(inside(yi - 1, xi)
                    && inside(yi + 1, xi)
                    && inside(yi, xi - 1)
                    && inside(yi, xi + 1))
                {
                    points.push((s, y, x));
                }
            }
        }
    }
    SurfacePointSet {
        class,
        source,
        extents,
        spacing_mm,
        points,
    }
}

pub fn extract_surface(mask: &MaskVolume, class: u8, source: SurfaceSource) -> SurfacePointSet {
    extract_surface_labels(
        &mask.labels,
        mask.extents,
        [mask.spacing_mm[1], mask.spacing_mm[2]],
        class,
        source,
    )
}

/// Nearest-point queries against one point set, bucketed by slice and row.
struct RowIndex<'a> {
    set: &'a SurfacePointSet,
    /// `rows[slice][row]` = sorted columns.
    rows: Vec<Vec<Vec<usize>>>,
    nonempty_slices: Vec<bool>,
}

impl<'a> RowIndex<'a> {
    fn new(set: &'a SurfacePointSet) -> Self {
        let [n, h, _] = set.extents;
        let mut rows = vec![vec![Vec::new(); h]; n];
        let mut nonempty = vec![false; n];
        for &(s, y, x) in &set.points {
            rows[s][y].push(x);
            nonempty[s] = true;
        }
        Self {
            set,
            rows,
            nonempty_slices: nonempty,
        }
    }

    /// Distance in mm from `p` to the closest point on the same slice, if any.
    fn nearest(&self, p: SurfacePoint) -> Option<f64> {
        let (s, py, px) = p;
        if !self.nonempty_slices.get(s).copied().unwrap_or(false) {
            return None;
        }
        let [sy, sx] = self.set.spacing_mm;
        let h = self.rows[s].len() as isize;
        let mut best = f64::INFINITY;
        let scan_row = |y: usize, best: &mut f64| {
            let cols = &self.rows[s][y];
            if cols.is_empty() {
                return;
            }
            let dy = (y as f64 - py as f64) * sy;
            let k = cols.partition_point(|&c| c < px);
            for &c in [k.checked_sub(1), Some(k)]
                .into_iter()
                .flatten()
                .filter_map(|i| cols.get(i))
            {
                let dx = (c as f64 - px as f64) * sx;
                let d2 = dy * dy + dx * dx;
                if d2 < *best {
                    *best = d2;
                }
            }
        };
        for off in 0..h {
            let dy = off as f64 * sy;
            if dy * dy > best {
                break;
            }
            let up = py as isize - off;
            let down = py as isize + off;
            if up >= 0 {
                scan_row(up as usize, &mut best);
            }
            if off > 0 && down < h {
                scan_row(down as usize, &mut best);
            }
        }
        Some(best.sqrt())
    }
}

/// Per-point distances from `a` to `b` (same-slice nearest, sentinel where none).
fn directed(a: &SurfacePointSet, b: &SurfacePointSet, sentinel: f64) -> (Vec<f64>, bool) {
    let index = RowIndex::new(b);
    let mut used = false;
    let d = a
        .points
        .iter()
        .map(|&p| {
            index.nearest(p).unwrap_or_else(|| {
                used = true;
                sentinel
            })
        })
        .collect();
    (d, used)
}

fn check_sets(a: &SurfacePointSet, b: &SurfacePointSet) {
    assert_eq!(
        a.extents, b.extents,
        "surface sets from differently sized volumes"
    );
}

/// Distance and whether the empty-side sentinel was used.
pub fn hausdorff(a: &SurfacePointSet, b: &SurfacePointSet) -> (f64, bool) {
    check_sets(a, b);
    if a.is_empty() && b.is_empty() {
        return (0.0, false);
    }
    let sentinel = a.diagonal_mm();
    let (da, ua) = directed(a, b, sentinel);
    let (db, ub) = directed(b, a, sentinel);
    let m = da.iter().chain(&db).fold(0.0f64, |m, &d| m.max(d));
    (m, ua || ub)
}

/// Symmetric average surface distance and whether the sentinel was used.
pub fn avg_surface_distance(a: &SurfacePointSet, b: &SurfacePointSet) -> (f64, bool) {
    check_sets(a, b);
    if a.is_empty() && b.is_empty() {
        return (0.0, false);
    }
    let sentinel = a.diagonal_mm();
    let (da, ua) = directed(a, b, sentinel);
    let (db, ub) = directed(b, a, sentinel);
    let total: f64 = da.iter().sum::<f64>() + db.iter().sum::<f64>();
    // Summation can round a mean of equal distances one ulp above them; a mean
    // never exceeds the largest term.
    let largest = da.iter().chain(&db).fold(0.0f64, |m, &d| m.max(d));
    (
        (total / (da.len() + db.len()) as f64).min(largest),
        ua || ub,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Patient id, or `mean` / `median` for aggregate rows.
    pub patient: String,
    pub class: String,
    pub dice: f64,
    pub jaccard: f64,
    pub asd_mm: f64,
    pub hd_mm: f64,
    pub flags: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// In-plane (row, column) spacing of each evaluated case, keyed by patient.
    pub spacing_mm: BTreeMap<String, [f64; 2]>,
    pub cases: Vec<MetricsRow>,
    pub mean: Vec<MetricsRow>,
    pub median: Vec<MetricsRow>,
}

/// Evaluates one prediction against its reference for every foreground class.
pub fn evaluate_case(pred: &MaskVolume, reference: &MaskVolume) -> Result<Vec<MetricsRow>> {
    check_congruent(pred, reference)?;
    CLASSES
        .iter()
        .map(|&class| {
            let counts = SetCounts::of(&pred.labels, &reference.labels, class)?;
            let sp = extract_surface(pred, class, SurfaceSource::Prediction);
            let sr = extract_surface(reference, class, SurfaceSource::Reference);
            let (hd, s1) = hausdorff(&sp, &sr);
            let (asd, s2) = avg_surface_distance(&sp, &sr);
            let flags = Flags {
                empty_pred: counts.pred == 0,
                empty_ref: counts.reference == 0,
                sentinel: s1 || s2,
            };
            Ok(MetricsRow {
                patient: reference.patient_id.clone(),
                class: CLASS_NAMES[class as usize].to_string(),
                dice: counts.dice(),
                jaccard: counts.jaccard(),
                asd_mm: asd,
                hd_mm: hd,
                flags: flags.to_string(),
            })
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn aggregate(rows: &[MetricsRow], label: &str, f: fn(&[f64]) -> f64) -> Vec<MetricsRow> {
    CLASSES
        .iter()
        .map(|&c| {
            let name = CLASS_NAMES[c as usize];
            let sel: Vec<&MetricsRow> = rows.iter().filter(|r| r.class == name).collect();
            let col = |g: fn(&MetricsRow) -> f64| f(&sel.iter().map(|r| g(r)).collect::<Vec<_>>());
            MetricsRow {
                patient: label.to_string(),
                class: name.to_string(),
                dice: col(|r| r.dice),
                jaccard: col(|r| r.jaccard),
                asd_mm: col(|r| r.asd_mm),
                hd_mm: col(|r| r.hd_mm),
                flags: String::new(),
            }
        })
        .collect()
}

/// Pairs predictions with references by (patient, sequence) and evaluates every pair.
pub fn evaluate(preds: &[MaskVolume], refs: &[MaskVolume]) -> Result<MetricsReport> {
    let key = |m: &MaskVolume| (m.patient_id.clone(), m.modality);
    let pred_map: BTreeMap<_, _> = preds.iter().map(|m| (key(m), m)).collect();
    let ref_keys: Vec<_> = refs.iter().map(key).collect();
    let missing_pred: Vec<String> = ref_keys
        .iter()
        .filter(|k| !pred_map.contains_key(*k))
        .map(|(p, m)| format!("{p}/{m}"))
        .collect();
    let missing_ref: Vec<String> = pred_map
        .keys()
        .filter(|k| !ref_keys.contains(k))
        .map(|(p, m)| format!("{p}/{m}"))
        .collect();
    if !missing_pred.is_empty() || !missing_ref.is_empty() || preds.len() != refs.len() {
        return Err(Error::Data(format!(
            "unmatched cases: no prediction for [{}], no reference for [{}]",
            missing_pred.join(", "),
            missing_ref.join(", ")
        )));
    }
    if refs.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut cases = Vec::new();
    let mut spacing_mm = BTreeMap::new();
    for r in refs {
        let p = pred_map[&key(r)];
        cases.extend(evaluate_case(p, r)?);
        spacing_mm.insert(r.patient_id.clone(), [r.spacing_mm[1], r.spacing_mm[2]]);
    }
    Ok(MetricsReport {
        spacing_mm,
        mean: aggregate(&cases, "mean", mean),
        median: aggregate(&cases, "median", median),
        cases,
    })
}

impl MetricsReport {
    pub fn all_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.cases.iter().chain(&self.mean).chain(&self.median)
    }

    /// Mean Dice over foreground classes of the `mean` rows.
    pub fn mean_foreground_dice(&self) -> f64 {
        mean(&self.mean.iter().map(|r| r.dice).collect::<Vec<_>>())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let spacing = self
            .spacing_mm
            .iter()
            .map(|(p, s)| format!("{p}={}x{}", s[0], s[1]))
            .collect::<Vec<_>>()
            .join(" ");
        for r in self.all_rows() {
            w.serialize(r)
                .map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
        let body = String::from_utf8(
            w.into_inner()
                .map_err(|e| Error::Data(format!("csv: {e}")))?,
        )
        .expect("csv output is utf-8");
        Ok(format!("# spacing_mm {spacing}\n{body}"))
    }

    pub fn write(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let csv_path = csv_path.as_ref();
        std::fs::write(csv_path, self.to_csv()?).map_err(|e| Error::io(csv_path, e))?;
        let json_path = csv_path.with_extension("json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: json_path.clone(),
            source: e,
        })?;
        std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))
    }
}
