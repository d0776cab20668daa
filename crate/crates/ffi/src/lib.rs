//! C ABI over the aseg toolkit.
//!
//! Every function returns an [`AsegStatus`]; on failure a message is available from
//! [`aseg_last_error`] on the same thread. Generators are opaque handles owned by the
//! caller and released with [`aseg_generator_free`]. No function unwinds across the
//! boundary: panics are caught and reported as `ASEG_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use aseg::data::{zscore_normalize, MaskVolume, Modality, Provenance, Volume};
use aseg::metrics::{
    avg_surface_distance, extract_surface_labels, hausdorff, SetCounts, SurfaceSource,
};
use aseg::nn::{build_generator, ModelParams};
use aseg::predict::{load_generator, predict_volume, PredictOptions};
use aseg::train::TrainConfig;
use aseg::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numerical = 5,
    Io = 6,
    Panic = 7,
}

impl From<&Error> for AsegStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Shape(_) => AsegStatus::InvalidArgument,
            Error::Config(_) => AsegStatus::Config,
            Error::Data(_) | Error::Format { .. } | Error::Json { .. } => AsegStatus::Data,
            Error::Numerical(_) => AsegStatus::Numerical,
            Error::Io { .. } => AsegStatus::Io,
        }
    }
}

/// A segmentation network ready for inference.
pub struct AsegGenerator {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let mut s = msg.into();
    s.retain(|c| c != '\0');
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(s).expect("nul bytes removed")));
}

struct Failure(AsegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(AsegStatus::from(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(AsegStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(AsegStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic for [`aseg_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AsegStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AsegStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AsegStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn config_arg(p: *const c_char) -> Result<TrainConfig, Failure> {
    if p.is_null() {
        Ok(TrainConfig::default())
    } else {
        Ok(TrainConfig::load(path_arg(p, "config path")?)?)
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the most recent failure on this thread, or null. The pointer stays valid
/// until the next `aseg_*` call on this thread.
#[no_mangle]
pub extern "C" fn aseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a generator checkpoint. `config_path` names the training config that describes
/// the architecture; pass null for the defaults.
///
/// # Safety
/// Path arguments must be NUL-terminated strings (or null where allowed); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aseg_generator_load(
    checkpoint_path: *const c_char,
    config_path: *const c_char,
    out: *mut *mut AsegGenerator,
) -> AsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(checkpoint_path, "checkpoint path")?;
        let cfg = config_arg(config_path)?;
        let params = load_generator(path, &cfg.generator_config())?;
        *out = Box::into_raw(Box::new(AsegGenerator { params }));
        Ok(())
    })
}

/// A freshly initialized generator (untrained), deterministic in `seed`.
///
/// # Safety
/// `config_path` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aseg_generator_new(
    config_path: *const c_char,
    seed: u64,
    out: *mut *mut AsegGenerator,
) -> AsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = config_arg(config_path)?;
        let params = build_generator(&cfg.generator_config(), seed)?;
        *out = Box::into_raw(Box::new(AsegGenerator { params }));
        Ok(())
    })
}

/// Releases a generator. Null is ignored.
///
/// # Safety
/// `g` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aseg_generator_free(g: *mut AsegGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// # Safety
/// `g` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aseg_generator_param_count(
    g: *const AsegGenerator,
    out: *mut usize,
) -> AsegStatus {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| null("generator"))?;
        *out_arg(out, "out")? = g.params.count_parameters();
        Ok(())
    })
}

/// Segments one `height`×`width` slice (row-major) into `labels_out` (same size,
/// values 0..=3). The slice is center-cropped or padded to `crop` before inference and
/// pixels outside that window are background.
///
/// # Safety
/// `image` must hold `height*width` floats and `labels_out` room for as many bytes.
#[no_mangle]
pub unsafe extern "C" fn aseg_generator_predict_slice(
    g: *const AsegGenerator,
    image: *const f32,
    height: usize,
    width: usize,
    crop: usize,
    labels_out: *mut u8,
) -> AsegStatus {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| null("generator"))?;
        let n = height
            .checked_mul(width)
            .ok_or_else(|| invalid("slice size overflows"))?;
        let pixels = slice_arg(image, n, "image")?;
        if labels_out.is_null() {
            return Err(null("labels_out"));
        }
        let v = Volume::new(
            [1, height, width],
            [1.0; 3],
            Modality::Lge,
            "ffi",
            pixels.to_vec(),
        )?;
        let m = predict_volume(
            &g.params,
            &v,
            PredictOptions {
                crop_size: crop,
                batch: 1,
            },
        )?;
        std::slice::from_raw_parts_mut(labels_out, n).copy_from_slice(&m.labels);
        Ok(())
    })
}

/// Target slice index for source slice `i` of `m` when the target has `n` slices.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aseg_map_slice_index(
    i: usize,
    m: usize,
    n: usize,
    out: *mut usize,
) -> AsegStatus {
    guard(|| {
        *out_arg(out, "out")? = aseg::transfer::map_slice_index(i, m, n)?;
        Ok(())
    })
}

unsafe fn counts(
    pred: *const u8,
    reference: *const u8,
    len: usize,
    class: u8,
) -> Result<SetCounts, Failure> {
    let p = slice_arg(pred, len, "pred")?;
    let r = slice_arg(reference, len, "reference")?;
    Ok(SetCounts::of(p, r, class)?)
}

/// Dice of `class` between two label maps of `len` bytes. Both empty gives 1.
///
/// # Safety
/// `pred` and `reference` must hold `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aseg_dice(
    pred: *const u8,
    reference: *const u8,
    len: usize,
    class: u8,
    out: *mut f64,
) -> AsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = counts(pred, reference, len, class)?.dice();
        Ok(())
    })
}

/// Jaccard index of `class`; both empty gives 1.
///
/// # Safety
/// As for [`aseg_dice`].
#[no_mangle]
pub unsafe extern "C" fn aseg_jaccard(
    pred: *const u8,
    reference: *const u8,
    len: usize,
    class: u8,
    out: *mut f64,
) -> AsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = counts(pred, reference, len, class)?.jaccard();
        Ok(())
    })
}

/// Hausdorff and average surface distance (mm) of `class` over a stack of `slices`
/// label planes. `sentinel_used` is set to 1 when one side has no boundary and the
/// image diagonal stands in for the distance.
///
/// # Safety
/// Label buffers must hold `slices*height*width` bytes; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn aseg_surface_distances(
    pred: *const u8,
    reference: *const u8,
    slices: usize,
    height: usize,
    width: usize,
    spacing_row_mm: f64,
    spacing_col_mm: f64,
    class: u8,
    hausdorff_out: *mut f64,
    asd_out: *mut f64,
    sentinel_used: *mut i32,
) -> AsegStatus {
    guard(|| {
        let (hd_out, asd_out, flag_out) = (
            out_arg(hausdorff_out, "hausdorff_out")?,
            out_arg(asd_out, "asd_out")?,
            out_arg(sentinel_used, "sentinel_used")?,
        );
        let n = slices
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| invalid("volume size overflows"))?;
        if !(spacing_row_mm > 0.0 && spacing_col_mm > 0.0) {
            return Err(invalid("spacing must be positive"));
        }
        let p = slice_arg(pred, n, "pred")?;
        let r = slice_arg(reference, n, "reference")?;
        // Validates labels and extents the same way as volume evaluation.
        let spacing = [1.0, spacing_row_mm, spacing_col_mm];
        let extents = [slices, height, width];
        MaskVolume::new(
            extents,
            spacing,
            Modality::Lge,
            "ffi",
            Provenance::Pseudo,
            p.to_vec(),
        )?;
        MaskVolume::new(
            extents,
            spacing,
            Modality::Lge,
            "ffi",
            Provenance::Expert,
            r.to_vec(),
        )?;
        let sp = [spacing_row_mm, spacing_col_mm];
        let a = extract_surface_labels(p, extents, sp, class, SurfaceSource::Prediction);
        let b = extract_surface_labels(r, extents, sp, class, SurfaceSource::Reference);
        let (hd, f1) = hausdorff(&a, &b);
        let (asd, f2) = avg_surface_distance(&a, &b);
        *hd_out = hd;
        *asd_out = asd;
        *flag_out = (f1 || f2) as i32;
        Ok(())
    })
}

/// Z-score normalizes `len` floats in place. `constant_out` (optional) is set to 1 when
/// the input had no spread and was mapped to zeros.
///
/// # Safety
/// `data` must hold `len` writable floats; `constant_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn aseg_zscore(
    data: *mut f32,
    len: usize,
    constant_out: *mut i32,
) -> AsegStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let values = std::slice::from_raw_parts_mut(data, len);
        let (z, constant) = zscore_normalize(values);
        values.copy_from_slice(&z);
        if let Some(c) = constant_out.as_mut() {
            *c = constant as i32;
        }
        Ok(())
    })
}
