//! C ABI over the proagym core.
//!
//! Every fallible function returns a [`ProagymStatus`]; on failure a
//! description is kept per thread and can be read with
//! [`proagym_last_error`]. Strings handed out by this library are owned by
//! the caller and must be released with [`proagym_string_free`]. Panics never
//! cross the boundary: they are caught and reported as
//! [`ProagymStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use proagym::gateway::EmbeddingVector;
use proagym::ingest::{merge_segments, parse_raw_trace, MergeConfig};
use proagym::judge::{select_label_targets, AnnotationVote, MixedNeedPolicy};
use proagym::metrics::{self, ConfusionCell, ConfusionCounts, ScenarioCategory};
use proagym::service::{AnnotationStore, ServiceError};
use proagym::trace::{Decision, Event, NeedFlag, TaskCandidate};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProagymStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Contract = 4,
    Io = 5,
    NotFound = 6,
    Conflict = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProagymCell {
    Tp = 0,
    Fp = 1,
    Tn = 2,
    Fn = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProagymCategory {
    Mn = 0,
    Nr = 1,
    Cd = 2,
    Fd = 3,
    Wd = 4,
}

/// Judge decision passed to [`proagym_classify`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProagymDecision {
    None = 0,
    Accepted = 1,
    Rejected = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProagymCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// Ratios in [0, 1]. A `has_*` flag of false means the ratio is undefined
/// (zero denominator) and the value field is 0.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProagymMetrics {
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub false_alarm: f64,
    pub f1: f64,
    pub has_recall: bool,
    pub has_precision: bool,
    pub has_accuracy: bool,
    pub has_false_alarm: bool,
}

/// Opaque handle to an annotation store.
pub struct ProagymStore {
    inner: AnnotationStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ProagymStatus, String);

impl Failure {
    fn new(status: ProagymStatus, msg: impl Into<String>) -> Self {
        Failure(status, msg.into())
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::UnknownItem(_) => ProagymStatus::NotFound,
            ServiceError::Conflict(_) => ProagymStatus::Conflict,
            ServiceError::BadVote(_) | ServiceError::Split(_) => ProagymStatus::InvalidInput,
            ServiceError::Config { .. } | ServiceError::Store { .. } | ServiceError::Io(_) => {
                ProagymStatus::Io
            }
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ProagymStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            ProagymStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            ProagymStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(ProagymStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(ProagymStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `out` must be null or valid for a pointer write.
unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(ProagymStatus::NullArgument, "output pointer is null"));
    }
    let c = CString::new(s).map_err(|_| Failure::new(ProagymStatus::InvalidInput, "interior NUL in output"))?;
    *out = c.into_raw();
    Ok(())
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::new(ProagymStatus::InvalidInput, e.to_string())
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn proagym_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn proagym_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Harmonic mean of recall and precision, 0 when both are 0.
#[no_mangle]
pub extern "C" fn proagym_f1(recall: f64, precision: f64) -> f64 {
    metrics::f1_from_pr(recall, precision)
}

/// Compute the proactiveness metrics for a confusion matrix.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn proagym_compute_metrics(counts: ProagymCounts, out: *mut ProagymMetrics) -> ProagymStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::new(ProagymStatus::NullArgument, "out is null"));
        }
        let r = metrics::compute_metrics(ConfusionCounts::new(counts.tp, counts.fp, counts.tn, counts.fn_));
        *out = ProagymMetrics {
            recall: r.recall.unwrap_or(0.0),
            precision: r.precision.unwrap_or(0.0),
            accuracy: r.accuracy.unwrap_or(0.0),
            false_alarm: r.false_alarm.unwrap_or(0.0),
            f1: r.f1,
            has_recall: r.recall.is_some(),
            has_precision: r.precision.is_some(),
            has_accuracy: r.accuracy.is_some(),
            has_false_alarm: r.false_alarm.is_some(),
        };
        Ok(())
    })
}

/// Classify one step. A prediction needs a decision and a silent step must
/// not have one; violating that returns `Contract`.
///
/// # Safety
/// `out_cell` and `out_category` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn proagym_classify(
    predicted: bool,
    decision: ProagymDecision,
    need: bool,
    out_cell: *mut ProagymCell,
    out_category: *mut ProagymCategory,
) -> ProagymStatus {
    guard(|| {
        if out_cell.is_null() || out_category.is_null() {
            return Err(Failure::new(ProagymStatus::NullArgument, "output pointer is null"));
        }
        let decision = match decision {
            ProagymDecision::None => None,
            ProagymDecision::Accepted => Some(Decision::Accepted),
            ProagymDecision::Rejected => Some(Decision::Rejected),
        };
        let need = if need { NeedFlag::Needed } else { NeedFlag::NotNeeded };
        let (cell, category) = metrics::classify(predicted, decision, need)
            .map_err(|e| Failure::new(ProagymStatus::Contract, e.to_string()))?;
        *out_cell = match cell {
            ConfusionCell::TP => ProagymCell::Tp,
            ConfusionCell::FP => ProagymCell::Fp,
            ConfusionCell::TN => ProagymCell::Tn,
            ConfusionCell::FN => ProagymCell::Fn,
        };
        *out_category = match category {
            ScenarioCategory::MN => ProagymCategory::Mn,
            ScenarioCategory::NR => ProagymCategory::Nr,
            ScenarioCategory::CD => ProagymCategory::Cd,
            ScenarioCategory::FD => ProagymCategory::Fd,
            ScenarioCategory::WD => ProagymCategory::Wd,
        };
        Ok(())
    })
}

/// Pick the `min(k, n)` embeddings with the smallest total pairwise cosine
/// distance. `embeddings` is row-major, `n * dim` values. The chosen
/// indices are written ascending to `out_indices`, which must hold
/// `out_capacity` entries; `out_len` receives the count.
///
/// # Safety
/// `embeddings` must point to `n * dim` readable doubles and `out_indices`
/// to `out_capacity` writable slots.
#[no_mangle]
pub unsafe extern "C" fn proagym_select_label_targets(
    embeddings: *const f64,
    n: usize,
    dim: usize,
    k: usize,
    out_indices: *mut usize,
    out_capacity: usize,
    out_len: *mut usize,
) -> ProagymStatus {
    guard(|| {
        if embeddings.is_null() || out_indices.is_null() || out_len.is_null() {
            return Err(Failure::new(ProagymStatus::NullArgument, "pointer argument is null"));
        }
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let len = n.checked_mul(dim).ok_or_else(|| invalid("n * dim overflows"))?;
        let flat = std::slice::from_raw_parts(embeddings, len);
        let vectors = flat
            .chunks(dim)
            .map(|row| EmbeddingVector::normalized(row.to_vec()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(invalid)?;
        let candidates = (0..n)
            .map(|i| TaskCandidate::new(format!("candidate {i}")))
            .collect::<Result<Vec<_>, _>>()
            .map_err(invalid)?;
        let chosen = select_label_targets(&candidates, &vectors, k).map_err(invalid)?;
        if chosen.len() > out_capacity {
            return Err(Failure::new(
                ProagymStatus::BufferTooSmall,
                format!("need room for {} indices", chosen.len()),
            ));
        }
        let out = std::slice::from_raw_parts_mut(out_indices, chosen.len());
        out.copy_from_slice(&chosen);
        *out_len = chosen.len();
        Ok(())
    })
}

/// Parse one event line and re-emit it in canonical form.
///
/// # Safety
/// `line` must be a NUL-terminated string and `out_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn proagym_event_normalize(line: *const c_char, out_json: *mut *mut c_char) -> ProagymStatus {
    guard(|| {
        let line = read_str(line, "line")?;
        let event: Event = serde_json::from_str(line.trim()).map_err(invalid)?;
        write_string(out_json, serde_json::to_string(&event).map_err(invalid)?)
    })
}

/// Parse a raw activity-monitor export (JSON array or JSONL) and merge it into
/// segments, returned as a JSON array.
///
/// # Safety
/// `raw_json` must be a NUL-terminated string and `out_json` valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn proagym_ingest_merge(
    raw_json: *const c_char,
    gap_threshold_secs: f64,
    max_span_secs: f64,
    out_json: *mut *mut c_char,
) -> ProagymStatus {
    guard(|| {
        let raw = read_str(raw_json, "raw_json")?;
        if !(gap_threshold_secs >= 0.0 && max_span_secs >= 0.0) {
            return Err(invalid("thresholds must be non-negative"));
        }
        let records = parse_raw_trace(raw.as_bytes()).map_err(invalid)?;
        let segments = merge_segments(
            &records,
            MergeConfig {
                gap_threshold_secs,
                max_span_secs,
            },
        );
        write_string(out_json, serde_json::to_string(&segments).map_err(invalid)?)
    })
}

/// Open an annotation store directory created by `proagym annotate init`.
/// Mixed need votes resolve to "needed".
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn proagym_store_open(dir: *const c_char, out: *mut *mut ProagymStore) -> ProagymStatus {
    guard(|| {
        let dir = read_str(dir, "dir")?;
        if out.is_null() {
            return Err(Failure::new(ProagymStatus::NullArgument, "out is null"));
        }
        let inner = AnnotationStore::open(Path::new(dir), MixedNeedPolicy::default())?;
        *out = Box::into_raw(Box::new(ProagymStore { inner }));
        Ok(())
    })
}

/// Record one vote, given in the HTTP wire format.
///
/// # Safety
/// `store` must come from [`proagym_store_open`]; the strings must be
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn proagym_store_vote(
    store: *const ProagymStore,
    item_id: *const c_char,
    vote_json: *const c_char,
) -> ProagymStatus {
    guard(|| {
        let store = store
            .as_ref()
            .ok_or_else(|| Failure::new(ProagymStatus::NullArgument, "store is null"))?;
        let item_id = read_str(item_id, "item_id")?;
        let vote: AnnotationVote = serde_json::from_str(read_str(vote_json, "vote_json")?).map_err(invalid)?;
        store.inner.vote(item_id, vote)?;
        Ok(())
    })
}

/// Store statistics as a JSON object.
///
/// # Safety
/// `store` must come from [`proagym_store_open`] and `out_json` be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn proagym_store_stats_json(store: *const ProagymStore, out_json: *mut *mut c_char) -> ProagymStatus {
    guard(|| {
        let store = store
            .as_ref()
            .ok_or_else(|| Failure::new(ProagymStatus::NullArgument, "store is null"))?;
        let stats = store.inner.snapshot().stats();
        write_string(out_json, serde_json::to_string(&stats).map_err(invalid)?)
    })
}

/// Training rows for every resolved item, one JSON object per line.
///
/// # Safety
/// `store` must come from [`proagym_store_open`] and `out_jsonl` be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn proagym_store_export_jsonl(store: *const ProagymStore, out_jsonl: *mut *mut c_char) -> ProagymStatus {
    guard(|| {
        let store = store
            .as_ref()
            .ok_or_else(|| Failure::new(ProagymStatus::NullArgument, "store is null"))?;
        let mut text = String::new();
        for row in store.inner.export() {
            text.push_str(&serde_json::to_string(&row).map_err(invalid)?);
            text.push('\n');
        }
        write_string(out_jsonl, text)
    })
}

/// Close a store handle. Null is ignored.
///
/// # Safety
/// `store` must be null or a handle from [`proagym_store_open`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn proagym_store_free(store: *mut ProagymStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}
