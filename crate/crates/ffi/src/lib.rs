//! C ABI over the `ctxpaste` pipeline.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns a
//! [`CpStatus`]; on failure [`cp_last_error`] describes the cause until the
//! next call on the same thread. Configuration travels as JSON text using
//! the same field names as the TOML config file.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ctxpaste::augment::{augment_sample, AugmentConfig};
use ctxpaste::experiment::{run_experiment, ExperimentConfig};
use ctxpaste::harvest::{harvest, HarvestCriteria, InstanceBank};
use ctxpaste::metrics::miou;
use ctxpaste::synth::{gen_corpus, SynthConfig};
use ctxpaste::{io, CategoryMask, Error, Raster, RngStream, Sample};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    EmptyBank = 5,
    Resample = 6,
    Placement = 7,
    TrainingFailed = 8,
    Io = 9,
    Format = 10,
    Panic = 99,
}

impl CpStatus {
    fn of(e: &Error) -> CpStatus {
        match e.root() {
            Error::Config(_) => CpStatus::Config,
            Error::Shape(_) | Error::Bounds { .. } | Error::EmptyObject { .. } | Error::TooSmall { .. } => {
                CpStatus::Shape
            }
            Error::EmptyBank(_) => CpStatus::EmptyBank,
            Error::NoDisjointCategory { .. } | Error::ResampleExhausted { .. } => CpStatus::Resample,
            Error::Placement { .. } => CpStatus::Placement,
            Error::TrainingFailed { .. } => CpStatus::TrainingFailed,
            Error::Io { .. } => CpStatus::Io,
            _ => CpStatus::Format,
        }
    }
}

/// A list of samples with its category name table.
pub struct CpCorpus {
    names: Vec<String>,
    samples: Vec<Sample>,
}

/// A harvested instance bank.
pub struct CpBank {
    bank: InstanceBank,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes replaced"));
}

struct Fail(CpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(CpStatus::of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CpStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CpStatus::NullArgument, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Parses optional JSON; null means the type's default.
unsafe fn json_or_default<T: serde::de::DeserializeOwned + Default>(p: *const c_char, what: &str) -> Result<T, Fail> {
    if p.is_null() {
        return Ok(T::default());
    }
    let s = text(p, what)?;
    serde_json::from_str(s).map_err(|e| Fail(CpStatus::Config, format!("{what}: {e}")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates `count` synthetic scenes. `synth_json` may be null for the
/// defaults.
///
/// # Safety
/// `synth_json` must be null or a NUL-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cp_corpus_synth(
    synth_json: *const c_char,
    count: usize,
    seed: u64,
    out: *mut *mut CpCorpus,
) -> CpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg: SynthConfig = json_or_default(synth_json, "synth_json")?;
        let samples = gen_corpus(&cfg, count, seed)?;
        *out = Box::into_raw(Box::new(CpCorpus {
            names: cfg.category_names(),
            samples,
        }));
        Ok(())
    })
}

/// Loads a corpus from a manifest file.
///
/// # Safety
/// `manifest_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cp_corpus_load(manifest_path: *const c_char, out: *mut *mut CpCorpus) -> CpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = PathBuf::from(text(manifest_path, "manifest_path")?);
        let corpus = io::load_corpus(&path)?;
        *out = Box::into_raw(Box::new(CpCorpus {
            names: corpus.manifest.categories,
            samples: corpus.samples,
        }));
        Ok(())
    })
}

/// Writes images, masks and `manifest.json` under `dir`.
///
/// # Safety
/// `corpus` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cp_corpus_save(corpus: *const CpCorpus, dir: *const c_char) -> CpStatus {
    guard(|| {
        let corpus = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        let dir = PathBuf::from(text(dir, "dir")?);
        io::save_corpus(&dir, &corpus.names, &corpus.samples)?;
        Ok(())
    })
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cp_corpus_len(corpus: *const CpCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.samples.len())
}

/// Copies sample `index`'s label categories into `labels` (capacity
/// `cap`) and stores the label count in `len`.
///
/// # Safety
/// `corpus` must be a live handle, `labels` valid for `cap` bytes and `len`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cp_corpus_labels(
    corpus: *const CpCorpus,
    index: usize,
    labels: *mut u8,
    cap: usize,
    len: *mut usize,
) -> CpStatus {
    guard(|| {
        let corpus = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        let len = out_ptr(len, "len")?;
        let s = corpus.samples.get(index).ok_or_else(|| {
            Fail(
                CpStatus::InvalidArgument,
                format!("index {index} out of range for {} samples", corpus.samples.len()),
            )
        })?;
        *len = s.labels.len();
        if s.labels.len() > cap {
            return Err(Fail(
                CpStatus::InvalidArgument,
                format!("{} labels do not fit in {cap}", s.labels.len()),
            ));
        }
        if !s.labels.is_empty() && labels.is_null() {
            return Err(null("labels"));
        }
        for (i, c) in s.labels.iter().enumerate() {
            *labels.add(i) = c;
        }
        Ok(())
    })
}

/// # Safety
/// `corpus` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cp_corpus_free(corpus: *mut CpCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Harvests a bank using each sample's ground-truth mask as its prediction.
///
/// # Safety
/// `corpus` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_bank_harvest_gt(
    corpus: *const CpCorpus,
    eps1: f64,
    eps2: f64,
    require_single_class: bool,
    out: *mut *mut CpBank,
) -> CpStatus {
    guard(|| {
        let corpus = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        let out = out_ptr(out, "out")?;
        let crit = HarvestCriteria {
            eps1,
            eps2,
            require_single_class,
        };
        crit.validate()?;
        let masks: Vec<&CategoryMask> = corpus
            .samples
            .iter()
            .map(|s| {
                s.gt_mask
                    .as_ref()
                    .ok_or_else(|| Fail(CpStatus::InvalidArgument, format!("{} has no ground-truth mask", s.id)))
            })
            .collect::<Result<_, _>>()?;
        let pairs: Vec<(&Sample, &CategoryMask)> = corpus.samples.iter().zip(masks).collect();
        let bank = harvest(&pairs, &crit, "ground-truth")?;
        *out = Box::into_raw(Box::new(CpBank { bank }));
        Ok(())
    })
}

/// # Safety
/// `dir` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_bank_load(dir: *const c_char, out: *mut *mut CpBank) -> CpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let bank = io::load_bank(&PathBuf::from(text(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(CpBank { bank }));
        Ok(())
    })
}

/// # Safety
/// `bank` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cp_bank_save(bank: *const CpBank, dir: *const c_char) -> CpStatus {
    guard(|| {
        let bank = bank.as_ref().ok_or_else(|| null("bank"))?;
        io::save_bank(&PathBuf::from(text(dir, "dir")?), &bank.bank)?;
        Ok(())
    })
}

/// Number of instances; 0 for a null handle.
///
/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cp_bank_len(bank: *const CpBank) -> usize {
    bank.as_ref().map_or(0, |b| b.bank.len())
}

/// # Safety
/// `bank` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cp_bank_free(bank: *mut CpBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Pastes bank instances into every sample of `corpus`, producing a new
/// corpus of augmented samples in the same order. `augment_json` may be
/// null for the defaults.
///
/// # Safety
/// Handles must be live; `augment_json` null or NUL-terminated; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cp_augment(
    corpus: *const CpCorpus,
    bank: *const CpBank,
    augment_json: *const c_char,
    seed: u64,
    out: *mut *mut CpCorpus,
) -> CpStatus {
    guard(|| {
        let corpus = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        let bank = bank.as_ref().ok_or_else(|| null("bank"))?;
        let out = out_ptr(out, "out")?;
        let cfg: AugmentConfig = json_or_default(augment_json, "augment_json")?;
        cfg.validate()?;
        let root = RngStream::root(seed).child("augment");
        let samples = corpus
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| augment_sample(s, &bank.bank, &cfg, &root.child_index(i as u64)).map(|a| a.sample))
            .collect::<Result<Vec<_>, Error>>()?;
        *out = Box::into_raw(Box::new(CpCorpus {
            names: corpus.names.clone(),
            samples,
        }));
        Ok(())
    })
}

/// Mean IoU of two `width * height` category masks over categories
/// `1..=categories` and background.
///
/// # Safety
/// `pred` and `gt` must be valid for `width * height` bytes; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_miou(
    pred: *const u8,
    gt: *const u8,
    width: usize,
    height: usize,
    categories: u8,
    out: *mut f64,
) -> CpStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() {
            return Err(null("mask"));
        }
        let out = out_ptr(out, "out")?;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| Fail(CpStatus::InvalidArgument, "mask size overflows".into()))?;
        let p: Raster<u8> = Raster::from_vec(width, height, 1, std::slice::from_raw_parts(pred, n).to_vec())?;
        let g: Raster<u8> = Raster::from_vec(width, height, 1, std::slice::from_raw_parts(gt, n).to_vec())?;
        *out = miou(&p, &g, 1..=categories)?.miou;
        Ok(())
    })
}

/// Runs the two-arm experiment and returns the report as JSON in
/// `report_json`, to be released with [`cp_string_free`]. `config_json`
/// may be null for the defaults.
///
/// # Safety
/// `config_json` must be null or NUL-terminated; `report_json` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_experiment_run(config_json: *const c_char, report_json: *mut *mut c_char) -> CpStatus {
    guard(|| {
        let slot = out_ptr(report_json, "report_json")?;
        *slot = ptr::null_mut();
        let cfg: ExperimentConfig = json_or_default(config_json, "config_json")?;
        let output = run_experiment(&cfg)?;
        let json = serde_json::to_string(&output.report).map_err(|e| Fail(CpStatus::Format, e.to_string()))?;
        *slot = CString::new(json).expect("json has no nul").into_raw();
        Ok(())
    })
}
