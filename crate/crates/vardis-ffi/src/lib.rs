//! C ABI over the vardis pipeline.
//!
//! Conventions: handles are opaque pointers created and freed by this
//! library; every fallible call returns a `VardisStatus`; the most recent
//! error message is available per thread via `vardis_last_error`. Paths and
//! other strings are NUL-terminated UTF-8. Functions never unwind across the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use vardis::cli::FileConfig;
use vardis::data::{load_corpus, save_corpus, split_by_stem, Corpus, SplitSpec};
use vardis::metrics::{evaluate_corpus, load_generations, Similarity};
use vardis::synth::{generate_corpus, FamilyId, SynthConfig};
use vardis::trainer::{
    load_checkpoint, save_checkpoint, sft_initialize, variational_train, ModelTriple,
};
use vardis::Error;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VardisStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    NotFound = 3,
    ParseError = 4,
    ValidationError = 5,
    ConfigError = 6,
    NumericError = 7,
    RuntimeError = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap());
}

fn status_of(err: &Error) -> VardisStatus {
    match err {
        Error::MissingArtifact(_) | Error::Io(_) => VardisStatus::NotFound,
        Error::Parse { .. } | Error::Json(_) => VardisStatus::ParseError,
        Error::Validation(_) | Error::Vocab(_) | Error::Shape(_) => VardisStatus::ValidationError,
        Error::Config(_) | Error::Argument(_) => VardisStatus::ConfigError,
        Error::Numeric(_) => VardisStatus::NumericError,
        _ => VardisStatus::RuntimeError,
    }
}

fn fail(err: Error) -> VardisStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

fn guard(body: impl FnOnce() -> VardisStatus) -> VardisStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            VardisStatus::RuntimeError
        }
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string or null.
unsafe fn opt_str<'a>(ptr: *const c_char) -> Result<Option<&'a str>, VardisStatus> {
    if ptr.is_null() {
        return Ok(None);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Some(s)),
        Err(_) => {
            set_error("argument is not valid UTF-8");
            Err(VardisStatus::InvalidUtf8)
        }
    }
}

unsafe fn req_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, VardisStatus> {
    match opt_str(ptr)? {
        Some(s) => Ok(s),
        None => {
            set_error(&format!("{name} must not be null"));
            Err(VardisStatus::NullArgument)
        }
    }
}

fn parse_config(json: Option<&str>) -> Result<FileConfig, VardisStatus> {
    match json {
        None => Ok(FileConfig::default()),
        Some(text) => serde_json::from_str(text).map_err(|e| {
            set_error(&format!("configuration error: {e}"));
            VardisStatus::ConfigError
        }),
    }
}

/// Opaque corpus handle.
pub struct VardisCorpus(Corpus);

/// Opaque handle over the four model checkpoints.
pub struct VardisModels(ModelTriple);

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vardis_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent error on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vardis_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a JSON Lines corpus; returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vardis_corpus_load(path: *const c_char) -> *mut VardisCorpus {
    let mut out: *mut VardisCorpus = std::ptr::null_mut();
    guard(|| {
        let path = match req_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_corpus(path) {
            Ok(c) => {
                out = Box::into_raw(Box::new(VardisCorpus(c)));
                VardisStatus::Ok
            }
            Err(e) => fail(e),
        }
    });
    out
}

/// Generates a synthetic corpus; `families` is a comma-separated list
/// (fraction-division,squaring,lcm). Returns null on failure.
///
/// # Safety
/// `families` must be a valid NUL-terminated string or null for all families.
#[no_mangle]
pub unsafe extern "C" fn vardis_corpus_generate(
    families: *const c_char,
    n: usize,
    rules_per_item: usize,
    label_drop: f64,
    seed: u64,
) -> *mut VardisCorpus {
    let mut out: *mut VardisCorpus = std::ptr::null_mut();
    guard(|| {
        let fams = match opt_str(families) {
            Ok(None) => FamilyId::all().to_vec(),
            Ok(Some(list)) => {
                let parsed: Result<Vec<_>, _> =
                    list.split(',').map(str::trim).map(FamilyId::parse).collect();
                match parsed {
                    Ok(f) => f,
                    Err(e) => return fail(e),
                }
            }
            Err(s) => return s,
        };
        let cfg = SynthConfig { families: fams, n, rules_per_item, label_drop, seed };
        match generate_corpus(&cfg) {
            Ok(c) => {
                out = Box::into_raw(Box::new(VardisCorpus(c)));
                VardisStatus::Ok
            }
            Err(e) => fail(e),
        }
    });
    out
}

/// Number of MCQs in the corpus; 0 for a null handle.
///
/// # Safety
/// `corpus` must be a handle returned by this library or null.
#[no_mangle]
pub unsafe extern "C" fn vardis_corpus_len(corpus: *const VardisCorpus) -> usize {
    if corpus.is_null() {
        return 0;
    }
    (*corpus).0.len()
}

/// Number of question-distractor pairs carrying an error label.
///
/// # Safety
/// `corpus` must be a handle returned by this library or null.
#[no_mangle]
pub unsafe extern "C" fn vardis_corpus_labeled_pairs(corpus: *const VardisCorpus) -> usize {
    if corpus.is_null() {
        return 0;
    }
    (*corpus).0.labeled_pairs().len()
}

/// Writes the corpus in the JSON Lines wire format.
///
/// # Safety
/// `corpus` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vardis_corpus_save(
    corpus: *const VardisCorpus,
    path: *const c_char,
) -> VardisStatus {
    guard(|| {
        if corpus.is_null() {
            set_error("corpus must not be null");
            return VardisStatus::NullArgument;
        }
        let path = match req_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match save_corpus(&(*corpus).0, path) {
            Ok(()) => VardisStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Splits a corpus by stem into three new handles.
///
/// # Safety
/// All pointers must be valid; out-params must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn vardis_corpus_split(
    corpus: *const VardisCorpus,
    ratio_train: f64,
    ratio_val: f64,
    ratio_test: f64,
    seed: u64,
    out_train: *mut *mut VardisCorpus,
    out_val: *mut *mut VardisCorpus,
    out_test: *mut *mut VardisCorpus,
) -> VardisStatus {
    guard(|| {
        if corpus.is_null() || out_train.is_null() || out_val.is_null() || out_test.is_null() {
            set_error("corpus and out-params must not be null");
            return VardisStatus::NullArgument;
        }
        let spec = SplitSpec { ratios: [ratio_train, ratio_val, ratio_test], seed };
        match split_by_stem(&(*corpus).0, &spec) {
            Ok((tr, va, te)) => {
                *out_train = Box::into_raw(Box::new(VardisCorpus(tr)));
                *out_val = Box::into_raw(Box::new(VardisCorpus(va)));
                *out_test = Box::into_raw(Box::new(VardisCorpus(te)));
                VardisStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Frees a corpus handle (null is a no-op).
///
/// # Safety
/// `corpus` must be a handle returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn vardis_corpus_free(corpus: *mut VardisCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Supervised fine-tuning over a labeled corpus. `config_json` mirrors the
/// CLI config file (null for defaults); the checkpoint directory is created.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings (val/config may be
/// null).
#[no_mangle]
pub unsafe extern "C" fn vardis_sft(
    corpus_path: *const c_char,
    val_path: *const c_char,
    config_json: *const c_char,
    out_ckpt: *const c_char,
) -> VardisStatus {
    guard(|| {
        let corpus_path = match req_str(corpus_path, "corpus_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let out_ckpt = match req_str(out_ckpt, "out_ckpt") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let val = match opt_str(val_path) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let cfg = match opt_str(config_json).and_then(parse_config) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let run = || -> vardis::Result<()> {
            let corpus = load_corpus(corpus_path)?;
            let val = val.map(load_corpus).transpose()?;
            let (triple, _) = sft_initialize(&cfg.arch, &corpus, val.as_ref(), &cfg.train)?;
            save_checkpoint(&triple, out_ckpt)
        };
        match run() {
            Ok(()) => VardisStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Variational training starting from an SFT checkpoint; writes the updated
/// checkpoint and the per-step training log CSV.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings (config may be
/// null).
#[no_mangle]
pub unsafe extern "C" fn vardis_train(
    ckpt: *const c_char,
    corpus_path: *const c_char,
    config_json: *const c_char,
    out_ckpt: *const c_char,
) -> VardisStatus {
    guard(|| {
        let ckpt = match req_str(ckpt, "ckpt") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let corpus_path = match req_str(corpus_path, "corpus_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let out_ckpt = match req_str(out_ckpt, "out_ckpt") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let mut cfg = match opt_str(config_json).and_then(parse_config) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let mut run = || -> vardis::Result<()> {
            let corpus = load_corpus(corpus_path)?;
            let steps = corpus.pairs().len().div_ceil(cfg.train.variational.pairs_per_batch)
                as u64
                * cfg.train.variational.epochs as u64;
            cfg.train.schedule.total_steps = steps.max(1);
            let mut triple = load_checkpoint(ckpt)?;
            let log = variational_train(&mut triple, &corpus, &cfg.train)?;
            save_checkpoint(&triple, out_ckpt)?;
            log.write_csv(Path::new(out_ckpt).join("train_log.csv"))
        };
        match run() {
            Ok(()) => VardisStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Loads a model checkpoint directory; returns null on failure.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vardis_models_load(dir: *const c_char) -> *mut VardisModels {
    let mut out: *mut VardisModels = std::ptr::null_mut();
    guard(|| {
        let dir = match req_str(dir, "dir") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(dir) {
            Ok(t) => {
                out = Box::into_raw(Box::new(VardisModels(t)));
                VardisStatus::Ok
            }
            Err(e) => fail(e),
        }
    });
    out
}

/// Frees a models handle (null is a no-op).
///
/// # Safety
/// `models` must be a handle returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn vardis_models_free(models: *mut VardisModels) {
    if !models.is_null() {
        drop(Box::from_raw(models));
    }
}

/// Overgenerate-and-rank for every MCQ in the corpus; writes JSON Lines
/// generation records to `out_path`. `config_json` mirrors the CLI config
/// (its "decode" section applies; null for defaults).
///
/// # Safety
/// Handles must be live; strings valid NUL-terminated (config may be null).
#[no_mangle]
pub unsafe extern "C" fn vardis_generate(
    models: *const VardisModels,
    corpus: *const VardisCorpus,
    config_json: *const c_char,
    out_path: *const c_char,
) -> VardisStatus {
    guard(|| {
        if models.is_null() || corpus.is_null() {
            set_error("models and corpus must not be null");
            return VardisStatus::NullArgument;
        }
        let out_path = match req_str(out_path, "out_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let cfg = match opt_str(config_json).and_then(parse_config) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let run = || -> vardis::Result<()> {
            let records =
                vardis::cli::generate_for_corpus(&(*models).0, &(*corpus).0, &cfg.decode)?;
            vardis::metrics::save_generations(&records, out_path)
        };
        match run() {
            Ok(()) => VardisStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Evaluates generations against a corpus at one K and returns the
/// proportional-match percentage through `out_prop_percent`. When
/// `report_json_path` is non-null the full report is written there (plus a
/// `.summary.csv` sibling).
///
/// # Safety
/// Pointers must be valid; `out_prop_percent` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn vardis_evaluate(
    corpus: *const VardisCorpus,
    generations_path: *const c_char,
    k: usize,
    similarity: *const c_char,
    report_json_path: *const c_char,
    out_prop_percent: *mut f64,
) -> VardisStatus {
    guard(|| {
        if corpus.is_null() || out_prop_percent.is_null() {
            set_error("corpus and out_prop_percent must not be null");
            return VardisStatus::NullArgument;
        }
        let generations_path = match req_str(generations_path, "generations_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let sim = match opt_str(similarity) {
            Ok(None) => Similarity::ExactNorm,
            Ok(Some(name)) => match Similarity::parse(name) {
                Ok(s) => s,
                Err(e) => return fail(e),
            },
            Err(s) => return s,
        };
        let report_path = match opt_str(report_json_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let run = || -> vardis::Result<f64> {
            let generations = load_generations(generations_path)?;
            let report = evaluate_corpus(&(*corpus).0, &generations, &[k], sim)?;
            if let Some(p) = report_path {
                report.write_json(p)?;
                report.write_summary_csv(format!("{p}.summary.csv"))?;
            }
            report
                .summary_value("prop", Some(k))
                .ok_or_else(|| Error::Report("missing prop summary row".into()))
        };
        match run() {
            Ok(v) => {
                *out_prop_percent = v;
                VardisStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
