//! C interface to trained vrel models.
//!
//! Handles are opaque and owned by the caller; every `*_load` has a
//! matching `*_free`. Functions return a [`VrelStatus`]; on failure the
//! message is available from [`vrel_last_error`] on the same thread.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use vrel_core::backbone::ImageCanvas;
use vrel_core::data::{load_dataset, rasterize, render_dataset, Dataset, Mode, Split};
use vrel_core::eval::{evaluate_binary, evaluate_vrd};
use vrel_core::model::{Model, Query, Scene};
use vrel_core::train::load_model;
use vrel_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VrelStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Dataset = 5,
    Shape = 6,
    Numeric = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Doublet models score predicate classes; binary models score
/// `[false, true]` for a given predicate.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VrelMode {
    Doublet = 0,
    Binary = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VrelModelInfo {
    pub mode: VrelMode,
    pub num_classes: usize,
    pub total_params: usize,
    pub trainable_params: usize,
    /// Mask grid width and height; 0 when mask attention is off.
    pub mask_width: usize,
    pub mask_height: usize,
}

/// Opaque trained model.
pub struct VrelModel {
    model: Model<f32>,
}

/// Opaque dataset with its rendered images.
pub struct VrelDataset {
    dataset: Dataset,
    canvases: HashMap<u64, ImageCanvas>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(VrelStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::Json { .. } => VrelStatus::Io,
            Error::Checkpoint(_) => VrelStatus::Checkpoint,
            Error::Dataset(_) => VrelStatus::Dataset,
            Error::Shape { .. } => VrelStatus::Shape,
            Error::NonFinite(_) | Error::NanGradient(_) => VrelStatus::Numeric,
            _ => VrelStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VrelStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            VrelStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VrelStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(VrelStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    Ok(PathBuf::from(str_arg(p, what)?))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(VrelStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn vrel_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vrel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vrel_model_load(path: *const c_char, out: *mut *mut VrelModel) -> VrelStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let (model, _) = load_model(&path)?;
        *out = Box::into_raw(Box::new(VrelModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`vrel_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vrel_model_free(model: *mut VrelModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vrel_model_info(model: *const VrelModel, info: *mut VrelModelInfo) -> VrelStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let info = info.as_mut().ok_or_else(|| null("info"))?;
        let masks = m.arch.variant.mask_attention;
        *info = VrelModelInfo {
            mode: match m.mode() {
                Mode::DoubletVrd => VrelMode::Doublet,
                Mode::TripletBinary => VrelMode::Binary,
            },
            num_classes: m.arch.num_classes,
            total_params: m.store.total_count(),
            trainable_params: m.store.trainable_count(),
            mask_width: if masks { m.arch.dims.d_w } else { 0 },
            mask_height: if masks { m.arch.dims.d_h } else { 0 },
        };
        Ok(())
    })
}

/// Loads a dataset directory and renders its images.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vrel_dataset_load(dir: *const c_char, out: *mut *mut VrelDataset) -> VrelStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = path_arg(dir, "dir")?;
        let dataset = load_dataset(&dir, None)?;
        let canvases = render_dataset(&dataset)?;
        *out = Box::into_raw(Box::new(VrelDataset { dataset, canvases }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`vrel_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vrel_dataset_free(dataset: *mut VrelDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of images in the dataset; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vrel_dataset_len(dataset: *const VrelDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.dataset.records.len())
}

/// Class logits for one ordered object pair of an image. `predicate` is
/// required for binary models and must be null for doublet models.
/// `logits` receives `num_classes` values; `capacity` is its length.
///
/// # Safety
/// Handles must be live; `logits` must point to `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vrel_predict(
    model: *const VrelModel,
    dataset: *const VrelDataset,
    image_id: u64,
    subject: usize,
    object: usize,
    predicate: *const c_char,
    logits: *mut f64,
    capacity: usize,
) -> VrelStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let d = &dataset.as_ref().ok_or_else(|| null("dataset"))?.dataset;
        if logits.is_null() {
            return Err(null("logits"));
        }
        if capacity < m.arch.num_classes {
            return Err(Failure(
                VrelStatus::BufferTooSmall,
                format!("need {} logits, buffer holds {capacity}", m.arch.num_classes),
            ));
        }
        let predicate = if predicate.is_null() {
            None
        } else {
            Some(str_arg(predicate, "predicate")?)
        };
        let record = d
            .record(image_id)
            .ok_or_else(|| Failure(VrelStatus::InvalidArgument, format!("no image {image_id}")))?;
        let canvas = rasterize(record, &d.manifest.classes, d.manifest.seed.unwrap_or(0))?;
        let scenes = [Scene {
            record,
            canvas: &canvas,
        }];
        let query = Query {
            scene: 0,
            subject,
            object,
            predicate,
        };
        let values = m.predict(&scenes, &[query])?;
        std::slice::from_raw_parts_mut(logits, m.arch.num_classes).copy_from_slice(&values[0]);
        Ok(())
    })
}

/// Scores a split: Recall@`k` for doublet models, overall accuracy for
/// binary models (`k` is ignored). `split` is 0 for train, 1 for test.
///
/// # Safety
/// Handles must be live and `score` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vrel_evaluate(
    model: *const VrelModel,
    dataset: *const VrelDataset,
    split: u32,
    k: usize,
    score: *mut f64,
) -> VrelStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let score = score.as_mut().ok_or_else(|| null("score"))?;
        let split = match split {
            0 => Split::Train,
            1 => Split::Test,
            s => return Err(Failure(VrelStatus::InvalidArgument, format!("unknown split {s}"))),
        };
        *score = match m.mode() {
            Mode::DoubletVrd => evaluate_vrd(m, &d.dataset, &d.canvases, split, &[k])?.0[0].recall,
            Mode::TripletBinary => evaluate_binary(m, &d.dataset, &d.canvases, split)?.0.overall,
        };
        Ok(())
    })
}
