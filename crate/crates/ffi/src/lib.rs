//! C ABI over the fedtox pipeline.
//!
//! Conventions: every fallible call returns an [`FtxStatus`]; on anything
//! but `Ok` a description is available through [`ftx_last_error`] until the
//! next call on the same thread. Strings returned through out-parameters
//! are owned by the caller and must be released with [`ftx_string_free`];
//! corpus handles with [`ftx_corpus_free`]. All functions catch panics at
//! the boundary, so no Rust unwind ever crosses into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fedtox::config::load_config;
use fedtox::convgraph::{build_graph, extract_backbone, nc_scores, retention, GraphError};
use fedtox::corpus::{parse_corpus, InstanceCorpus};
use fedtox::labeling::{label_corpus, ModerationPolicy};
use fedtox::pipeline::{self, PipelineError, Workspace};
use fedtox::synth::{generate, write_corpus_jsonl, SynthConfig, SynthError};

/// Result of every fallible call in this API.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FtxStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid configuration or parameters.
    Config = 3,
    /// Malformed or insufficient data.
    Data = 4,
    /// A network endpoint was unreachable or misbehaved.
    Endpoint = 5,
    /// An internal invariant failed; the library state is still sound.
    Panic = 6,
}

/// Opaque multi-instance corpus handle.
pub struct FtxCorpus {
    corpora: Vec<InstanceCorpus>,
}

/// Corpus-wide counts, filled in by `ftx_corpus_stats`.
#[repr(C)]
#[derive(Clone, Copy, Default)]
pub struct FtxCorpusStats {
    /// Number of instances (federation clients).
    pub instances: u64,
    /// Conversations across all instances.
    pub conversations: u64,
    /// Posts across all conversations.
    pub toots: u64,
    /// Distinct authors across all instances.
    pub users: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = Some(CString::new(message).expect("NULs stripped"));
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().take());
}

/// Runs a body behind the unwind barrier; a panic becomes `FtxStatus::Panic`.
fn guarded<F: FnOnce() -> FtxStatus>(body: F) -> FtxStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let detail = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_owned())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_owned());
            set_error(format!("internal error: {detail}"));
            FtxStatus::Panic
        }
    }
}

fn pipeline_status(error: &PipelineError) -> FtxStatus {
    match error {
        PipelineError::Config(_) => FtxStatus::Config,
        PipelineError::Data(_) => FtxStatus::Data,
        PipelineError::Endpoint(_) => FtxStatus::Endpoint,
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, FtxStatus> {
    if ptr.is_null() {
        set_error(format!("{what} is null"));
        return Err(FtxStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        FtxStatus::InvalidUtf8
    })
}

fn write_out_string(text: String, out: *mut *mut c_char) -> FtxStatus {
    match CString::new(text) {
        Ok(owned) => {
            unsafe { *out = owned.into_raw() };
            FtxStatus::Ok
        }
        Err(_) => {
            set_error("output contained an interior NUL byte");
            FtxStatus::Data
        }
    }
}

fn corpus_handle(corpora: Vec<InstanceCorpus>, out: *mut *mut FtxCorpus) -> FtxStatus {
    if corpora.is_empty() {
        set_error("corpus contains no conversations");
        return FtxStatus::Data;
    }
    unsafe { *out = Box::into_raw(Box::new(FtxCorpus { corpora })) };
    FtxStatus::Ok
}

/// Library version as a static NUL-terminated string; never freed.
#[no_mangle]
pub extern "C" fn ftx_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Description of the most recent failure on this thread, or null if the
/// last call succeeded. The pointer stays valid until the next ftx_ call
/// on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn ftx_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |s| s.as_ptr())
    })
}

/// Releases a string returned through an out-parameter. Null is a no-op.
///
/// # Safety
/// `s` must be a pointer previously returned by this library, or null.
#[no_mangle]
pub unsafe extern "C" fn ftx_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Releases a corpus handle. Null is a no-op.
///
/// # Safety
/// `corpus` must come from `ftx_corpus_parse_file` or `ftx_corpus_synth`
/// and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ftx_corpus_free(corpus: *mut FtxCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Parses a JSONL corpus file (one post per line) into a corpus handle,
/// grouped by instance. Malformed lines are skipped, as in the ingest
/// stage; a file that yields no conversations at all is an error.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn ftx_corpus_parse_file(
    path: *const c_char,
    out: *mut *mut FtxCorpus,
) -> FtxStatus {
    guarded(|| {
        clear_error();
        if out.is_null() {
            set_error("out is null");
            return FtxStatus::NullArgument;
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let file = match std::fs::File::open(path) {
            Ok(f) => f,
            Err(e) => {
                set_error(format!("cannot open {path}: {e}"));
                return FtxStatus::Data;
            }
        };
        match parse_corpus(BufReader::new(file)) {
            Ok(outcome) => corpus_handle(outcome.corpora, out),
            Err(e) => {
                set_error(format!("parse {path}: {e}"));
                FtxStatus::Data
            }
        }
    })
}

/// Generates a synthetic corpus from a JSON configuration object; `"{}"`
/// selects the documented defaults.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn ftx_corpus_synth(
    config_json: *const c_char,
    out: *mut *mut FtxCorpus,
) -> FtxStatus {
    guarded(|| {
        clear_error();
        if out.is_null() {
            set_error("out is null");
            return FtxStatus::NullArgument;
        }
        let raw = match str_arg(config_json, "config_json") {
            Ok(r) => r,
            Err(status) => return status,
        };
        let config: SynthConfig = match serde_json::from_str(raw) {
            Ok(c) => c,
            Err(e) => {
                set_error(format!("config_json: {e}"));
                return FtxStatus::Config;
            }
        };
        let synthetic = match generate(&config) {
            Ok(s) => s,
            Err(e @ SynthError::ConfigError(_)) => {
                set_error(e.to_string());
                return FtxStatus::Config;
            }
            Err(e) => {
                set_error(e.to_string());
                return FtxStatus::Data;
            }
        };
        // Group toots into per-instance conversation trees through the same
        // serializer and parser the file path uses.
        let mut buffer = Vec::new();
        if let Err(e) = write_corpus_jsonl(&synthetic.toots, &mut buffer) {
            set_error(format!("serialize corpus: {e}"));
            return FtxStatus::Data;
        }
        match parse_corpus(buffer.as_slice()) {
            Ok(outcome) if outcome.rejected_lines.is_empty() => corpus_handle(outcome.corpora, out),
            Ok(_) => {
                set_error("generated corpus did not round-trip");
                FtxStatus::Data
            }
            Err(e) => {
                set_error(format!("regroup corpus: {e}"));
                FtxStatus::Data
            }
        }
    })
}

/// Fills `out` with corpus-wide counts.
///
/// # Safety
/// `corpus` must be a live corpus handle and `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn ftx_corpus_stats(
    corpus: *const FtxCorpus,
    out: *mut FtxCorpusStats,
) -> FtxStatus {
    guarded(|| {
        clear_error();
        if corpus.is_null() || out.is_null() {
            set_error("corpus and out must not be null");
            return FtxStatus::NullArgument;
        }
        let corpora = &(*corpus).corpora;
        let mut stats = FtxCorpusStats {
            instances: corpora.len() as u64,
            ..FtxCorpusStats::default()
        };
        let mut users = std::collections::BTreeSet::new();
        for instance in corpora {
            stats.conversations += instance.trees.len() as u64;
            stats.toots += instance
                .trees
                .iter()
                .map(|t| t.toots.len() as u64)
                .sum::<u64>();
            users.extend(instance.user_index.keys().cloned());
        }
        stats.users = users.len() as u64;
        *out = stats;
        FtxStatus::Ok
    })
}

/// Labels every conversation under the given threshold policy and returns
/// CSV with columns `instance,conversation_id,label,reason`.
///
/// # Safety
/// `corpus` must be a live corpus handle and `out_csv` a valid location.
#[no_mangle]
pub unsafe extern "C" fn ftx_corpus_label_csv(
    corpus: *const FtxCorpus,
    thr_root: f64,
    thr_number: u32,
    thr_fraction: f64,
    out_csv: *mut *mut c_char,
) -> FtxStatus {
    guarded(|| {
        clear_error();
        if corpus.is_null() || out_csv.is_null() {
            set_error("corpus and out_csv must not be null");
            return FtxStatus::NullArgument;
        }
        let policy = ModerationPolicy {
            thr_root,
            thr_number,
            thr_fraction,
        };
        if let Err(reason) = policy.validate() {
            set_error(reason);
            return FtxStatus::Config;
        }
        let mut writer = csv::Writer::from_writer(Vec::new());
        let row = |w: &mut csv::Writer<Vec<u8>>, fields: [&str; 4]| w.write_record(fields);
        if let Err(e) = row(
            &mut writer,
            ["instance", "conversation_id", "label", "reason"],
        ) {
            set_error(e.to_string());
            return FtxStatus::Data;
        }
        for instance in &(*corpus).corpora {
            for labeled in label_corpus(instance, &policy) {
                let written = row(
                    &mut writer,
                    [
                        instance.instance.as_str(),
                        labeled.conversation_id.as_str(),
                        &labeled.label.to_string(),
                        &labeled.reason.to_string(),
                    ],
                );
                if let Err(e) = written {
                    set_error(e.to_string());
                    return FtxStatus::Data;
                }
            }
        }
        let bytes = writer.into_inner().expect("vec writer");
        write_out_string(String::from_utf8(bytes).expect("csv is utf-8"), out_csv)
    })
}

/// Builds each instance's participant-sharing graph, extracts the noise-
/// corrected backbone at significance `delta`, and returns per-instance
/// retention CSV. Instances whose graphs are too small to score pass
/// through unfiltered, as in the backbone stage.
///
/// # Safety
/// `corpus` must be a live corpus handle and `out_csv` a valid location.
#[no_mangle]
pub unsafe extern "C" fn ftx_corpus_retention_csv(
    corpus: *const FtxCorpus,
    delta: f64,
    out_csv: *mut *mut c_char,
) -> FtxStatus {
    guarded(|| {
        clear_error();
        if corpus.is_null() || out_csv.is_null() {
            set_error("corpus and out_csv must not be null");
            return FtxStatus::NullArgument;
        }
        if !delta.is_finite() || delta < 0.0 {
            set_error(format!("delta must be finite and nonnegative, got {delta}"));
            return FtxStatus::Config;
        }
        let mut writer = csv::Writer::from_writer(Vec::new());
        let header = [
            "instance",
            "nodes",
            "edges_before",
            "edges_after",
            "node_retention",
            "edge_retention",
            "density_before",
            "density_after",
        ];
        if let Err(e) = writer.write_record(header) {
            set_error(e.to_string());
            return FtxStatus::Data;
        }
        for instance in &(*corpus).corpora {
            let graph = build_graph(instance);
            let backbone = match nc_scores(&graph) {
                Ok(scores) => extract_backbone(&graph, &scores, delta),
                Err(GraphError::DegenerateGraph(_)) => graph.clone(),
                Err(e) => {
                    set_error(format!("{}: {e}", instance.instance));
                    return FtxStatus::Data;
                }
            };
            let stats = retention(&graph, &backbone);
            let written = writer.write_record([
                instance.instance.as_str(),
                &graph.nodes.len().to_string(),
                &graph.edges.len().to_string(),
                &backbone.edges.len().to_string(),
                &stats.node_retention.to_string(),
                &stats.edge_retention.to_string(),
                &stats.density_before.to_string(),
                &stats.density_after.to_string(),
            ]);
            if let Err(e) = written {
                set_error(e.to_string());
                return FtxStatus::Data;
            }
        }
        let bytes = writer.into_inner().expect("vec writer");
        write_out_string(String::from_utf8(bytes).expect("csv is utf-8"), out_csv)
    })
}

fn workspace_from(config_path: &str) -> Result<Workspace, FtxStatus> {
    let config = load_config(Some(Path::new(config_path))).map_err(|e| {
        set_error(e.to_string());
        FtxStatus::Config
    })?;
    Workspace::new(config).map_err(|e| {
        set_error(e.to_string());
        pipeline_status(&e)
    })
}

fn stage_result(result: Result<(), PipelineError>) -> FtxStatus {
    match result {
        Ok(()) => FtxStatus::Ok,
        Err(e) => {
            set_error(e.to_string());
            pipeline_status(&e)
        }
    }
}

/// Runs one pipeline stage against the TOML config at `config_path`.
/// Recognized stages: synth, ingest, label, graph, backbone, features,
/// train, llm-eval, report. Grid sweeps take an axis; use `ftx_run_grid`.
///
/// # Safety
/// `config_path` and `stage` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ftx_run_stage(
    config_path: *const c_char,
    stage: *const c_char,
) -> FtxStatus {
    guarded(|| {
        clear_error();
        let config_path = match str_arg(config_path, "config_path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let stage = match str_arg(stage, "stage") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let ws = match workspace_from(config_path) {
            Ok(ws) => ws,
            Err(status) => return status,
        };
        let result = match stage {
            "synth" => pipeline::stage_synth(&ws),
            "ingest" => pipeline::stage_ingest(&ws),
            "label" => pipeline::stage_label(&ws),
            "graph" => pipeline::stage_graph(&ws),
            "backbone" => pipeline::stage_backbone(&ws),
            "features" => pipeline::stage_features(&ws),
            "train" => pipeline::stage_train(&ws),
            "llm-eval" => pipeline::stage_llm_eval(&ws),
            "report" => pipeline::stage_report(&ws),
            "grid" => {
                set_error("grid needs an axis; call ftx_run_grid");
                return FtxStatus::Config;
            }
            other => {
                set_error(format!("unknown stage `{other}`"));
                return FtxStatus::Config;
            }
        };
        stage_result(result)
    })
}

/// Runs a grid sweep along one axis. `values` is a comma-separated list,
/// or null for the axis defaults.
///
/// # Safety
/// `config_path` and `axis` must be NUL-terminated strings; `values` may
/// be null.
#[no_mangle]
pub unsafe extern "C" fn ftx_run_grid(
    config_path: *const c_char,
    axis: *const c_char,
    values: *const c_char,
) -> FtxStatus {
    guarded(|| {
        clear_error();
        let config_path = match str_arg(config_path, "config_path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let axis = match str_arg(axis, "axis") {
            Ok(a) => a,
            Err(status) => return status,
        };
        let values = if values.is_null() {
            None
        } else {
            match str_arg(values, "values") {
                Ok(v) => Some(v),
                Err(status) => return status,
            }
        };
        let ws = match workspace_from(config_path) {
            Ok(ws) => ws,
            Err(status) => return status,
        };
        stage_result(pipeline::stage_grid(&ws, axis, values).map(|_| ()))
    })
}
