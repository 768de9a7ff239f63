//! C ABI for the daedalus lab.
//!
//! Conventions:
//! * every function returns a [`DaedalusStatus`]; outputs go through
//!   out-pointers;
//! * models are opaque handles created and released by this library;
//! * images cross the boundary as interleaved 8-bit RGB buffers;
//! * on failure, a thread-local message is retrievable with
//!   [`daedalus_last_error_message`];
//! * panics never unwind across the boundary (they become
//!   `DAEDALUS_STATUS_PANIC`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use daedalus::attack::{l0_attack, l2_attack, AttackConfig, Norm};
use daedalus::detector::{
    build_micro, detect, load_model, save_model, train_micro, DetectOptions, DetectorModel,
    NmsKind, TrainConfig, Variant,
};
use daedalus::img::Image;
use daedalus::losses::{LossKind, TargetSet};
use daedalus::Error;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DaedalusStatus {
    Ok = 0,
    InvalidArgument = 1,
    IoError = 2,
    NumericError = 3,
    NullPointer = 4,
    Panic = 5,
}

fn status_of(err: &Error) -> DaedalusStatus {
    match err {
        Error::InvalidArgument(_) => DaedalusStatus::InvalidArgument,
        Error::Io { .. } | Error::Image { .. } | Error::Format { .. } => DaedalusStatus::IoError,
        Error::Tape(_) | Error::Numeric(_) | Error::TrainDiverged { .. } => {
            DaedalusStatus::NumericError
        }
    }
}

fn run(body: impl FnOnce() -> Result<(), (DaedalusStatus, String)>) -> DaedalusStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => DaedalusStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            DaedalusStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (DaedalusStatus, String) {
    (status_of(&e), e.to_string())
}

fn null_err(what: &str) -> (DaedalusStatus, String) {
    (DaedalusStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (DaedalusStatus, String) {
    (DaedalusStatus::InvalidArgument, msg.into())
}

unsafe fn cstr<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, (DaedalusStatus, String)> {
    if ptr.is_null() {
        return Err(null_err(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

/// Opaque detector-model handle.
pub struct DaedalusModel {
    inner: DetectorModel,
}

/// One detection box.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DaedalusDetection {
    pub class_id: u32,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// NMS variant selector.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DaedalusNms {
    Hard = 0,
    SoftLinear = 1,
    SoftGaussian = 2,
}

/// Detection-pipeline options. `daedalus_detect_options_default` fills the
/// recommended values.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DaedalusDetectOptions {
    pub objectness_threshold: f64,
    pub nt: f64,
    pub nms: DaedalusNms,
    pub soft_sigma: f64,
    pub soft_score_floor: f64,
    pub defence_min_area: f64,
}

/// Attack norm selector.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DaedalusNorm {
    L2 = 0,
    L0 = 1,
}

/// Adversarial loss selector.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DaedalusLoss {
    F1 = 0,
    F2 = 1,
    F3 = 2,
}

/// Attack configuration. `daedalus_attack_options_default` fills the
/// published defaults. A null/empty `target_classes` attacks every category.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DaedalusAttackOptions {
    pub gamma: f64,
    pub norm: DaedalusNorm,
    pub loss: DaedalusLoss,
    pub eta: f64,
    pub max_iteration: u32,
    pub binary_steps: u32,
    pub l0_top_fraction: f64,
    pub seed: u64,
    pub target_classes: *const u32,
    pub n_target_classes: usize,
}

/// Attack outcome summary.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DaedalusAttackStats {
    pub success: bool,
    pub l2_distortion: f64,
    pub l0_distortion: u64,
    pub best_c: f64,
    pub loss_init: f64,
    pub final_loss: f64,
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn daedalus_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to at least `len` writable bytes (or be null).
#[no_mangle]
pub unsafe extern "C" fn daedalus_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Build a seeded micro detector. `variant` is 'A', 'B' or 'C'.
///
/// # Safety
/// `out` must be a valid pointer; the returned handle must be released with
/// `daedalus_model_free`.
#[no_mangle]
pub unsafe extern "C" fn daedalus_model_build(
    seed: u64,
    variant: c_char,
    num_classes: u32,
    input_side: u32,
    out: *mut *mut DaedalusModel,
) -> DaedalusStatus {
    run(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        let variant = match variant as u8 {
            b'A' | b'a' => Variant::A,
            b'B' | b'b' => Variant::B,
            b'C' | b'c' => Variant::C,
            other => return Err(invalid(format!("unknown variant byte {other}"))),
        };
        let model = build_micro(seed, variant, num_classes as usize, input_side as usize)
            .map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DaedalusModel { inner: model }));
        Ok(())
    })
}

/// Load a model from a binary model file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn daedalus_model_load(
    path: *const c_char,
    out: *mut *mut DaedalusModel,
) -> DaedalusStatus {
    run(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        let path = cstr(path, "path")?;
        let model = load_model(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DaedalusModel { inner: model }));
        Ok(())
    })
}

/// Save a model to a binary model file (bit-exact round trip).
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn daedalus_model_save(
    model: *const DaedalusModel,
    path: *const c_char,
) -> DaedalusStatus {
    run(|| {
        if model.is_null() {
            return Err(null_err("model"));
        }
        let path = cstr(path, "path")?;
        save_model(&(*model).inner, Path::new(path)).map_err(lib_err)
    })
}

/// Train a copy of `model` on a scene directory (see `daedalus gen-scenes`),
/// returning a new handle.
///
/// # Safety
/// `model` must be live; `scenes_dir` NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn daedalus_model_train(
    model: *const DaedalusModel,
    scenes_dir: *const c_char,
    epochs: u32,
    learning_rate: f64,
    seed: u64,
    out: *mut *mut DaedalusModel,
) -> DaedalusStatus {
    run(|| {
        if model.is_null() {
            return Err(null_err("model"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        let dir = cstr(scenes_dir, "scenes_dir")?;
        let scenes = daedalus::scenes::load_scenes(Path::new(dir)).map_err(lib_err)?;
        let cfg = TrainConfig { epochs: epochs as usize, learning_rate, seed };
        let (trained, _) = train_micro(&(*model).inner, &scenes, &cfg).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DaedalusModel { inner: trained }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle (null is ignored).
#[no_mangle]
pub unsafe extern "C" fn daedalus_model_free(model: *mut DaedalusModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input side length the model expects, in pixels.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn daedalus_model_input_side(model: *const DaedalusModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).inner.input_side() as u32
}

/// Constant raw box count of the model head.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn daedalus_model_num_boxes(model: *const DaedalusModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).inner.num_boxes() as u32
}

/// Generate a synthetic scene corpus into a directory (PNG + JSON pairs).
///
/// # Safety
/// `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn daedalus_scenes_generate(
    seed: u64,
    count: u32,
    size: u32,
    max_objects: u32,
    out_dir: *const c_char,
) -> DaedalusStatus {
    run(|| {
        if count == 0 {
            return Err(invalid("count must be at least 1"));
        }
        let dir = cstr(out_dir, "out_dir")?;
        std::fs::create_dir_all(dir)
            .map_err(|e| (DaedalusStatus::IoError, format!("{dir}: {e}")))?;
        let scenes =
            daedalus::scenes::generate(seed, count as usize, size as usize, max_objects as usize);
        for (i, s) in scenes.iter().enumerate() {
            daedalus::scenes::save_scene(dir, i, s).map_err(lib_err)?;
        }
        Ok(())
    })
}

/// Recommended detection options.
#[no_mangle]
pub extern "C" fn daedalus_detect_options_default() -> DaedalusDetectOptions {
    DaedalusDetectOptions {
        objectness_threshold: 0.5,
        nt: 0.5,
        nms: DaedalusNms::Hard,
        soft_sigma: 0.5,
        soft_score_floor: 0.001,
        defence_min_area: 0.0,
    }
}

/// Published attack defaults (attacks every category).
#[no_mangle]
pub extern "C" fn daedalus_attack_options_default() -> DaedalusAttackOptions {
    DaedalusAttackOptions {
        gamma: 0.3,
        norm: DaedalusNorm::L2,
        loss: DaedalusLoss::F3,
        eta: 1e-2,
        max_iteration: 500,
        binary_steps: 5,
        l0_top_fraction: 0.1,
        seed: 0,
        target_classes: ptr::null(),
        n_target_classes: 0,
    }
}

unsafe fn image_from_rgb(
    rgb: *const u8,
    width: u32,
    height: u32,
) -> Result<Image, (DaedalusStatus, String)> {
    if rgb.is_null() {
        return Err(null_err("rgb"));
    }
    if width == 0 || height == 0 {
        return Err(invalid("degenerate image dimensions"));
    }
    let len = (width as usize) * (height as usize) * 3;
    let bytes = std::slice::from_raw_parts(rgb, len);
    Ok(Image::from_rgb8(bytes, height as usize, width as usize))
}

/// Run the detection pipeline on an interleaved RGB8 buffer. On success the
/// detections are allocated into `*out_boxes` / `*out_len`; release them with
/// `daedalus_detections_free`. `opts` may be null for defaults.
///
/// # Safety
/// `model` must be live; `rgb` must hold `width*height*3` bytes; out pointers
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn daedalus_detect(
    model: *const DaedalusModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    opts: *const DaedalusDetectOptions,
    out_boxes: *mut *mut DaedalusDetection,
    out_len: *mut usize,
) -> DaedalusStatus {
    run(|| {
        if model.is_null() {
            return Err(null_err("model"));
        }
        if out_boxes.is_null() || out_len.is_null() {
            return Err(null_err("out"));
        }
        let image = image_from_rgb(rgb, width, height)?;
        let o = if opts.is_null() { daedalus_detect_options_default() } else { *opts };
        let detect_opts = DetectOptions {
            objectness_threshold: o.objectness_threshold,
            nt: o.nt,
            nms_kind: match o.nms {
                DaedalusNms::Hard => NmsKind::Hard,
                DaedalusNms::SoftLinear => NmsKind::SoftLinear,
                DaedalusNms::SoftGaussian => NmsKind::SoftGaussian,
            },
            soft_sigma: o.soft_sigma,
            soft_score_floor: o.soft_score_floor,
            defence_min_area: o.defence_min_area,
        };
        let dets = detect(&image, &(*model).inner, &detect_opts).map_err(lib_err)?;
        let mut boxes: Vec<DaedalusDetection> = dets
            .boxes
            .iter()
            .map(|b| DaedalusDetection {
                class_id: b.class_id as u32,
                score: b.score,
                cx: b.cx,
                cy: b.cy,
                w: b.w,
                h: b.h,
            })
            .collect();
        boxes.shrink_to_fit();
        *out_len = boxes.len();
        *out_boxes = if boxes.is_empty() {
            ptr::null_mut()
        } else {
            let mut slice = boxes.into_boxed_slice();
            let p = slice.as_mut_ptr();
            std::mem::forget(slice);
            p
        };
        Ok(())
    })
}

/// Release a detection array from `daedalus_detect`.
///
/// # Safety
/// `boxes`/`len` must come from `daedalus_detect`, unmodified.
#[no_mangle]
pub unsafe extern "C" fn daedalus_detections_free(boxes: *mut DaedalusDetection, len: usize) {
    if !boxes.is_null() && len > 0 {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(boxes, len)));
    }
}

/// Run the L2 or L0 attack against one or more models (an ensemble) on an
/// interleaved RGB8 image. The adversarial image is written into `out_rgb`
/// (same layout and size as the input, 8-bit quantized); `out_stats` may be
/// null.
///
/// # Safety
/// `models` must point to `n_models` live handles; `rgb` and `out_rgb` must
/// hold `width*height*3` bytes each.
#[no_mangle]
pub unsafe extern "C" fn daedalus_attack(
    models: *const *const DaedalusModel,
    n_models: usize,
    rgb: *const u8,
    width: u32,
    height: u32,
    opts: *const DaedalusAttackOptions,
    out_rgb: *mut u8,
    out_stats: *mut DaedalusAttackStats,
) -> DaedalusStatus {
    run(|| {
        if models.is_null() || n_models == 0 {
            return Err(null_err("models"));
        }
        if out_rgb.is_null() {
            return Err(null_err("out_rgb"));
        }
        let handles = std::slice::from_raw_parts(models, n_models);
        let mut refs: Vec<&DetectorModel> = Vec::with_capacity(n_models);
        for &h in handles {
            if h.is_null() {
                return Err(null_err("models[i]"));
            }
            refs.push(&(*h).inner);
        }
        let image = image_from_rgb(rgb, width, height)?;
        let o = if opts.is_null() { daedalus_attack_options_default() } else { *opts };

        let num_classes = refs[0].num_classes;
        let targets = if o.target_classes.is_null() || o.n_target_classes == 0 {
            TargetSet::all(num_classes)
        } else {
            let ids = std::slice::from_raw_parts(o.target_classes, o.n_target_classes);
            TargetSet::new(ids.iter().map(|&c| c as usize).collect(), num_classes)
                .map_err(lib_err)?
        };
        let norm = match o.norm {
            DaedalusNorm::L2 => Norm::L2,
            DaedalusNorm::L0 => Norm::L0,
        };
        let mut cfg = AttackConfig::new(o.gamma, targets, norm);
        cfg.loss_kind = match o.loss {
            DaedalusLoss::F1 => LossKind::F1,
            DaedalusLoss::F2 => LossKind::F2,
            DaedalusLoss::F3 => LossKind::F3,
        };
        cfg.eta = o.eta;
        cfg.max_iteration = o.max_iteration as usize;
        cfg.binary_steps = o.binary_steps as usize;
        cfg.l0_top_fraction = o.l0_top_fraction;
        cfg.seed = o.seed;

        let result = match norm {
            Norm::L2 => l2_attack(&image, &refs, &cfg).map_err(lib_err)?,
            Norm::L0 => l0_attack(&image, &refs, &cfg).map_err(lib_err)?,
        };
        let bytes = result.adversarial.to_rgb8();
        ptr::copy_nonoverlapping(bytes.as_ptr(), out_rgb, bytes.len());
        if !out_stats.is_null() {
            *out_stats = DaedalusAttackStats {
                success: result.success,
                l2_distortion: result.l2_distortion,
                l0_distortion: result.l0_distortion as u64,
                best_c: result.best_c,
                loss_init: result.loss_init,
                final_loss: result.final_loss,
            };
        }
        Ok(())
    })
}
