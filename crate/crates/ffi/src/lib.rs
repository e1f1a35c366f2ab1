//! C ABI for graphmt.
//!
//! Every fallible function returns a [`GraphmtStatus`]; on failure a message
//! is available from [`graphmt_last_error`] on the same thread. Handles are
//! opaque and must be released with their matching `_free` function. Strings
//! returned through out-parameters are owned by the caller and released with
//! [`graphmt_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use graphmt::bleu::corpus_bleu;
use graphmt::checkpoint;
use graphmt::dataset::{parse_records, DatasetOptions};
use graphmt::decode::{beam_decode, default_max_len, greedy_decode};
use graphmt::graph::{EdgeMode, MultiModalGraph};
use graphmt::model::Model;
use graphmt::{Error, Vocabulary};

/// Bumped whenever a signature or struct layout changes.
pub const GRAPHMT_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphmtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Config = 5,
    Checkpoint = 6,
    CheckpointMismatch = 7,
    Numeric = 8,
    Panic = 9,
}

impl From<&Error> for GraphmtStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => GraphmtStatus::Io,
            Error::Data(_) | Error::Parse { .. } | Error::Shape { .. } => GraphmtStatus::Data,
            Error::Config(_) => GraphmtStatus::Config,
            Error::Usage(_) => GraphmtStatus::InvalidArgument,
            Error::Numeric(_) => GraphmtStatus::Numeric,
            Error::Checkpoint(_) => GraphmtStatus::Checkpoint,
            Error::CheckpointMismatch { .. } => GraphmtStatus::CheckpointMismatch,
        }
    }
}

/// A trained model with its vocabularies.
pub struct GraphmtModel {
    model: Model,
    src: Vocabulary,
    tgt: Vocabulary,
}

/// A multi-modal graph built against a model's source vocabulary.
pub struct GraphmtGraph {
    graph: MultiModalGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

struct Fail(GraphmtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(GraphmtStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GraphmtStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GraphmtStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GraphmtStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(GraphmtStatus::NullArgument, format!("`{what}` is null"))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(GraphmtStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

fn to_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(GraphmtStatus::Data, "output contains a NUL byte".into()))
}

/// ABI version of this library.
#[no_mangle]
pub extern "C" fn graphmt_abi_version() -> u32 {
    GRAPHMT_ABI_VERSION
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next graphmt call on the same thread.
#[no_mangle]
pub extern "C" fn graphmt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint and its source/target vocabulary files.
///
/// # Safety
/// Path arguments must be valid NUL-terminated strings; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn graphmt_model_load(
    checkpoint_path: *const c_char,
    src_vocab_path: *const c_char,
    tgt_vocab_path: *const c_char,
    out: *mut *mut GraphmtModel,
) -> GraphmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = c_str(checkpoint_path, "checkpoint_path")?;
        let sv = c_str(src_vocab_path, "src_vocab_path")?;
        let tv = c_str(tgt_vocab_path, "tgt_vocab_path")?;
        let (model, _) = checkpoint::load(Path::new(ck))?;
        let src = Vocabulary::load(Path::new(sv))?;
        let tgt = Vocabulary::load(Path::new(tv))?;
        if src.len() != model.config.src_vocab || tgt.len() != model.config.tgt_vocab {
            return Err(Fail(
                GraphmtStatus::CheckpointMismatch,
                format!(
                    "vocabulary sizes {}/{} do not match checkpoint {}/{}",
                    src.len(),
                    tgt.len(),
                    model.config.src_vocab,
                    model.config.tgt_vocab
                ),
            ));
        }
        *out = Box::into_raw(Box::new(GraphmtModel { model, src, tgt }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`graphmt_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn graphmt_model_free(model: *mut GraphmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars in the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn graphmt_model_num_params(model: *const GraphmtModel, out: *mut u64) -> GraphmtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.store.num_elements() as u64;
        Ok(())
    })
}

/// Builds a graph from one dataset line in the JSONL format. Sidecar feature
/// references resolve relative to the current directory.
///
/// # Safety
/// `model` must be a live handle, `json_line` a valid string and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn graphmt_graph_from_json(
    model: *const GraphmtModel,
    json_line: *const c_char,
    fully_connected: bool,
    out: *mut *mut GraphmtGraph,
) -> GraphmtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let line = c_str(json_line, "json_line")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let opts = DatasetOptions {
            feature_dim: m.model.config.encoder.visual_feat_dim,
            edge_mode: if fully_connected {
                EdgeMode::FullyConnected
            } else {
                EdgeMode::Grounded
            },
            zero_object: false,
        };
        let recs = parse_records(line, Path::new("."), opts.feature_dim)?;
        let rec = match recs.as_slice() {
            [r] => r,
            _ => {
                return Err(Fail(
                    GraphmtStatus::InvalidArgument,
                    format!("expected one record, got {}", recs.len()),
                ))
            }
        };
        let ex = rec.to_example(&m.src, &m.tgt, &opts)?;
        *out = Box::into_raw(Box::new(GraphmtGraph { graph: ex.graph }));
        Ok(())
    })
}

/// Releases a graph. Null is ignored.
///
/// # Safety
/// `graph` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn graphmt_graph_free(graph: *mut GraphmtGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Node and inter-modal edge counts.
///
/// # Safety
/// `graph` must be a live handle; each out pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn graphmt_graph_counts(
    graph: *const GraphmtGraph,
    textual: *mut usize,
    visual: *mut usize,
    edges: *mut usize,
) -> GraphmtStatus {
    guard(|| {
        let g = &graph.as_ref().ok_or_else(|| null("graph"))?.graph;
        if let Some(p) = textual.as_mut() {
            *p = g.num_textual();
        }
        if let Some(p) = visual.as_mut() {
            *p = g.num_visual();
        }
        if let Some(p) = edges.as_mut() {
            *p = g.edges().len();
        }
        Ok(())
    })
}

/// The `index`-th inter-modal edge as (textual, visual) node indices.
///
/// # Safety
/// `graph` must be a live handle; `textual` and `visual` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn graphmt_graph_edge(
    graph: *const GraphmtGraph,
    index: usize,
    textual: *mut usize,
    visual: *mut usize,
) -> GraphmtStatus {
    guard(|| {
        let g = &graph.as_ref().ok_or_else(|| null("graph"))?.graph;
        if textual.is_null() || visual.is_null() {
            return Err(null("textual/visual"));
        }
        let &(t, o) = g.edges().get(index).ok_or_else(|| {
            Fail(
                GraphmtStatus::InvalidArgument,
                format!("edge {index} out of range ({} edges)", g.edges().len()),
            )
        })?;
        *textual = t;
        *visual = o;
        Ok(())
    })
}

/// Translates a graph. `beam_size` 0 or 1 means greedy; `max_len` 0 uses the
/// default limit. The space-joined output is written to `out`.
///
/// # Safety
/// Handles must be live; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn graphmt_translate(
    model: *const GraphmtModel,
    graph: *const GraphmtGraph,
    beam_size: usize,
    max_len: usize,
    out: *mut *mut c_char,
) -> GraphmtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let g = &graph.as_ref().ok_or_else(|| null("graph"))?.graph;
        if out.is_null() {
            return Err(null("out"));
        }
        let max_len = if max_len == 0 {
            default_max_len(g.num_textual())
        } else {
            max_len
        };
        let ids = if beam_size > 1 {
            beam_decode(&m.model, g, beam_size, max_len)?
        } else {
            greedy_decode(&m.model, g, max_len)?
        };
        *out = to_c_string(m.tgt.decode(&ids))?;
        Ok(())
    })
}

/// Corpus BLEU (percentage) of two line-aligned text files.
///
/// # Safety
/// Paths must be valid strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn graphmt_bleu_files(
    hypotheses_path: *const c_char,
    references_path: *const c_char,
    out: *mut f64,
) -> GraphmtStatus {
    guard(|| {
        let hp = c_str(hypotheses_path, "hypotheses_path")?;
        let rp = c_str(references_path, "references_path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let read = |p: &str| {
            std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.into(),
                source: e,
            })
        };
        let (h, r) = (read(hp)?, read(rp)?);
        let h: Vec<&str> = h.lines().collect();
        let r: Vec<&str> = r.lines().collect();
        *out = corpus_bleu(&h, &r)?;
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned through an out-parameter of this
/// library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn graphmt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
