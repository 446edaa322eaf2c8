//! C ABI over the gcfuse library: opaque handles, integer status codes, and
//! a thread-local last-error message. Every entry point catches panics and
//! never unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gcfuse::config::RunConfig;
use gcfuse::data::{generate_synthetic, load_corpus, DocumentGraph, SyntheticConfig};
use gcfuse::error::GcError;
use gcfuse::fusion::ArchitectureSpec;
use gcfuse::train::{predict, prepare_corpus, train_model, TrainedModel};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcfStatus {
    GcfOk = 0,
    GcfErrShape = 1,
    GcfErrContract = 2,
    GcfErrNumeric = 3,
    GcfErrParse = 4,
    GcfErrIntegrity = 5,
    GcfErrConfig = 6,
    GcfErrIo = 7,
    GcfErrNullPointer = 8,
    GcfErrInvalidUtf8 = 9,
    GcfErrPanic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &GcError) -> GcfStatus {
    match err {
        GcError::Shape(_) => GcfStatus::GcfErrShape,
        GcError::Contract(_) => GcfStatus::GcfErrContract,
        GcError::Numeric(_) => GcfStatus::GcfErrNumeric,
        GcError::Parse { .. } => GcfStatus::GcfErrParse,
        GcError::Integrity(_) => GcfStatus::GcfErrIntegrity,
        GcError::Config(_) => GcfStatus::GcfErrConfig,
        GcError::Io { .. } => GcfStatus::GcfErrIo,
    }
}

fn fail(err: GcError) -> GcfStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

/// Runs `f` with panics converted to a status code, so no unwind crosses
/// the C boundary.
fn guarded(f: impl FnOnce() -> GcfStatus) -> GcfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            GcfStatus::GcfErrPanic
        }
    }
}

unsafe fn read_utf8<'a>(ptr: *const c_char) -> Result<&'a str, GcfStatus> {
    if ptr.is_null() {
        set_error("null string pointer");
        return Err(GcfStatus::GcfErrNullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string is not valid UTF-8");
        GcfStatus::GcfErrInvalidUtf8
    })
}

/// Opaque handle to a loaded or generated document graph.
pub struct GcfCorpus {
    graph: DocumentGraph,
}

/// Opaque handle to one trained model together with its run metrics.
pub struct GcfModel {
    trained: TrainedModel,
    test_predictions: Vec<usize>,
    test_indices: Vec<usize>,
}

/// Copies the message of the most recent error on this thread into `buf`
/// (NUL-terminated, truncated to `len` bytes). Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn gcf_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a corpus from a tab-separated file. On success writes a handle the
/// caller must release with `gcf_corpus_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gcf_corpus_load(
    path: *const c_char,
    out: *mut *mut GcfCorpus,
) -> GcfStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return GcfStatus::GcfErrNullPointer;
        }
        let path = match read_utf8(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match load_corpus(Path::new(path)) {
            Ok(graph) => {
                *out = Box::into_raw(Box::new(GcfCorpus { graph }));
                GcfStatus::GcfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Generates a synthetic citation corpus. Zero/negative signal arguments are
/// valid; values outside [0, 1] are rejected.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gcf_corpus_generate(
    n: usize,
    num_classes: usize,
    homophily: f64,
    text_signal: f64,
    graph_signal: f64,
    seed: u64,
    out: *mut *mut GcfCorpus,
) -> GcfStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return GcfStatus::GcfErrNullPointer;
        }
        let config =
            SyntheticConfig { n, num_classes, homophily, text_signal, graph_signal, seed };
        match generate_synthetic(&config) {
            Ok(graph) => {
                *out = Box::into_raw(Box::new(GcfCorpus { graph }));
                GcfStatus::GcfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of documents in the corpus. Null handle yields 0.
///
/// # Safety
/// `corpus` must be a live handle from this library, or null.
#[no_mangle]
pub unsafe extern "C" fn gcf_corpus_len(corpus: *const GcfCorpus) -> usize {
    corpus.as_ref().map(|c| c.graph.len()).unwrap_or(0)
}

/// Number of distinct labels in the corpus. Null handle yields 0.
///
/// # Safety
/// `corpus` must be a live handle from this library, or null.
#[no_mangle]
pub unsafe extern "C" fn gcf_corpus_num_classes(corpus: *const GcfCorpus) -> usize {
    corpus.as_ref().map(|c| c.graph.num_classes).unwrap_or(0)
}

/// Number of citation edges. Null handle yields 0.
///
/// # Safety
/// `corpus` must be a live handle from this library, or null.
#[no_mangle]
pub unsafe extern "C" fn gcf_corpus_num_edges(corpus: *const GcfCorpus) -> usize {
    corpus.as_ref().map(|c| c.graph.edges.len()).unwrap_or(0)
}

/// Releases a corpus handle. Null is a no-op.
///
/// # Safety
/// `corpus` must be a handle from this library not yet freed, or null.
#[no_mangle]
pub unsafe extern "C" fn gcf_corpus_free(corpus: *mut GcfCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Trains one architecture variant on the corpus with the given seed and
/// epoch budget. `max_epochs` of 0 means the library default. On success
/// writes a model handle the caller must release with `gcf_model_free`.
///
/// # Safety
/// `corpus` must be a live handle; `variant` a NUL-terminated string; `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gcf_train(
    corpus: *const GcfCorpus,
    variant: *const c_char,
    seed: u64,
    max_epochs: usize,
    out: *mut *mut GcfModel,
) -> GcfStatus {
    guarded(|| {
        let Some(corpus) = corpus.as_ref() else {
            set_error("null corpus handle");
            return GcfStatus::GcfErrNullPointer;
        };
        if out.is_null() {
            set_error("null output pointer");
            return GcfStatus::GcfErrNullPointer;
        }
        let variant = match read_utf8(variant) {
            Ok(v) => v,
            Err(code) => return code,
        };
        let arch = match ArchitectureSpec::parse(variant) {
            Ok(a) => a,
            Err(e) => return fail(e),
        };
        let mut run_config = RunConfig::default();
        run_config.seeds = vec![seed];
        if max_epochs > 0 {
            run_config.max_epochs = max_epochs;
        }
        let result = prepare_corpus(&run_config, &corpus.graph, seed).and_then(
            |(prepared, split, lm_config)| {
                let trained = train_model(
                    &prepared,
                    &split,
                    arch,
                    lm_config,
                    &run_config.train_config(seed),
                )?;
                let preds = predict(
                    &trained.model,
                    &trained.store,
                    &prepared,
                    &trained.banks,
                    &split.test,
                    run_config.batch_size,
                )?;
                Ok(GcfModel { trained, test_predictions: preds, test_indices: split.test })
            },
        );
        match result {
            Ok(model) => {
                *out = Box::into_raw(Box::new(model));
                GcfStatus::GcfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Test-set balanced error of the trained model, in percent.
///
/// # Safety
/// `model` must be a live handle from this library, or null (yields NaN).
#[no_mangle]
pub unsafe extern "C" fn gcf_model_balanced_error(model: *const GcfModel) -> f64 {
    model.as_ref().map(|m| m.trained.result.balanced_error).unwrap_or(f64::NAN)
}

/// Test-set macro-averaged F1 of the trained model, in percent.
///
/// # Safety
/// `model` must be a live handle from this library, or null (yields NaN).
#[no_mangle]
pub unsafe extern "C" fn gcf_model_macro_f1(model: *const GcfModel) -> f64 {
    model.as_ref().map(|m| m.trained.result.macro_f1).unwrap_or(f64::NAN)
}

/// Epoch whose validation error selected the reported model state.
///
/// # Safety
/// `model` must be a live handle from this library, or null (yields 0).
#[no_mangle]
pub unsafe extern "C" fn gcf_model_best_epoch(model: *const GcfModel) -> usize {
    model.as_ref().map(|m| m.trained.result.best_epoch).unwrap_or(0)
}

/// Predicted class for document `doc` of the training corpus, computed on
/// the held-out test pass. Documents outside the test split yield a
/// contract error.
///
/// # Safety
/// `model` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gcf_model_test_prediction(
    model: *const GcfModel,
    doc: usize,
    out: *mut usize,
) -> GcfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            set_error("null model handle");
            return GcfStatus::GcfErrNullPointer;
        };
        if out.is_null() {
            set_error("null output pointer");
            return GcfStatus::GcfErrNullPointer;
        }
        match model.test_indices.iter().position(|&i| i == doc) {
            Some(k) => {
                *out = model.test_predictions[k];
                GcfStatus::GcfOk
            }
            None => {
                set_error(&format!("document {doc} is not in the test split"));
                GcfStatus::GcfErrContract
            }
        }
    })
}

/// Writes the document id of the `i`-th test-split entry (0-based) into
/// `out`, for enumerating the test set before calling
/// `gcf_model_test_prediction`. Out-of-range `i` is a contract error.
///
/// # Safety
/// `model` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gcf_model_test_doc(
    model: *const GcfModel,
    i: usize,
    out: *mut usize,
) -> GcfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            set_error("null model handle");
            return GcfStatus::GcfErrNullPointer;
        };
        if out.is_null() {
            set_error("null output pointer");
            return GcfStatus::GcfErrNullPointer;
        }
        match model.test_indices.get(i) {
            Some(&doc) => {
                *out = doc;
                GcfStatus::GcfOk
            }
            None => {
                set_error(&format!(
                    "test index {i} out of range ({} test documents)",
                    model.test_indices.len()
                ));
                GcfStatus::GcfErrContract
            }
        }
    })
}

/// Number of test-split documents scored by this model.
///
/// # Safety
/// `model` must be a live handle from this library, or null (yields 0).
#[no_mangle]
pub unsafe extern "C" fn gcf_model_test_len(model: *const GcfModel) -> usize {
    model.as_ref().map(|m| m.test_indices.len()).unwrap_or(0)
}

/// Releases a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be a handle from this library not yet freed, or null.
#[no_mangle]
pub unsafe extern "C" fn gcf_model_free(model: *mut GcfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
