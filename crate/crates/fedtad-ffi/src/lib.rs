//! C ABI for the fedtad simulator.
//!
//! Handles are opaque pointers; every fallible call returns a `FedtadStatus`
//! and the last error message is retrievable per thread via
//! `fedtad_last_error`. The matching declarations live in
//! `include/fedtad.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use fedtad::config::load_config;
use fedtad::dataset::{load_dataset, DatasetBundle};
use fedtad::federation::run_federation;
use fedtad::partition::{assign_communities, induce_shards, louvain, ClientShard};
use fedtad::reliability::knowledge_reliability;
use fedtad::FedTadError;

/// Status codes mirrored in the C header. 0 is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedtadStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Graph = 6,
    Numeric = 7,
    Internal = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &FedTadError) -> FedtadStatus {
    match err {
        FedTadError::Io { .. } => FedtadStatus::Io,
        FedTadError::Parse { .. } => FedtadStatus::Parse,
        FedTadError::Config(_) => FedtadStatus::Config,
        FedTadError::Graph(_) | FedTadError::Partition(_) => FedtadStatus::Graph,
        FedTadError::NonFinite { .. } | FedTadError::ShapeMismatch { .. } => FedtadStatus::Numeric,
        _ => FedtadStatus::Internal,
    }
}

fn fail(err: FedTadError) -> FedtadStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, FedtadStatus> {
    if ptr.is_null() {
        set_error("null path argument");
        return Err(FedtadStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(FedtadStatus::InvalidUtf8)
        }
    }
}

/// Last error message for this thread; valid until the next failing call.
#[no_mangle]
pub extern "C" fn fedtad_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opaque dataset handle.
pub struct FedtadDataset {
    bundle: DatasetBundle,
}

/// Opaque partition handle: the client shards induced from a dataset.
pub struct FedtadPartition {
    shards: Vec<ClientShard>,
}

/// Load a dataset JSON file. On success writes a handle to `out`; free it
/// with `fedtad_dataset_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedtad_dataset_load(
    path: *const c_char,
    out: *mut *mut FedtadDataset,
) -> FedtadStatus {
    if out.is_null() {
        set_error("null output pointer");
        return FedtadStatus::NullArgument;
    }
    *out = ptr::null_mut();
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_dataset(&path) {
        Ok(bundle) => {
            *out = Box::into_raw(Box::new(FedtadDataset { bundle }));
            FedtadStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `ds` must come from `fedtad_dataset_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fedtad_dataset_free(ds: *mut FedtadDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fedtad_dataset_num_nodes(ds: *const FedtadDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.bundle.graph.num_nodes)
}

/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fedtad_dataset_num_edges(ds: *const FedtadDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.bundle.graph.num_edges())
}

/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fedtad_dataset_num_classes(ds: *const FedtadDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.bundle.graph.num_classes)
}

/// Louvain-partition a dataset into `clients` shards.
///
/// # Safety
/// `ds` must be a live dataset handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedtad_partition_create(
    ds: *const FedtadDataset,
    clients: usize,
    seed: u64,
    out: *mut *mut FedtadPartition,
) -> FedtadStatus {
    if ds.is_null() || out.is_null() {
        set_error("null argument");
        return FedtadStatus::NullArgument;
    }
    *out = ptr::null_mut();
    let g = &(*ds).bundle.graph;
    let result = louvain(g, seed)
        .and_then(|communities| assign_communities(&communities, clients, seed))
        .and_then(|p| induce_shards(g, &p, (0.2, 0.4, 0.4), seed));
    match result {
        Ok(shards) => {
            *out = Box::into_raw(Box::new(FedtadPartition { shards }));
            FedtadStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `p` must come from `fedtad_partition_create` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fedtad_partition_free(p: *mut FedtadPartition) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// `p` must be a live partition handle.
#[no_mangle]
pub unsafe extern "C" fn fedtad_partition_num_clients(p: *const FedtadPartition) -> usize {
    p.as_ref().map_or(0, |p| p.shards.len())
}

/// Node count of one shard, or 0 if the index is out of range.
///
/// # Safety
/// `p` must be a live partition handle.
#[no_mangle]
pub unsafe extern "C" fn fedtad_partition_shard_nodes(
    p: *const FedtadPartition,
    client: usize,
) -> usize {
    p.as_ref()
        .and_then(|p| p.shards.get(client))
        .map_or(0, |s| s.graph.num_nodes)
}

/// Write one client's class-wise reliability into `phi_out` (length
/// `phi_len`, must be >= the class count).
///
/// # Safety
/// `p` must be a live partition handle; `phi_out` must point to at least
/// `phi_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fedtad_partition_reliability(
    p: *const FedtadPartition,
    client: usize,
    walk_length: usize,
    phi_out: *mut f64,
    phi_len: usize,
) -> FedtadStatus {
    let part = match p.as_ref() {
        Some(p) => p,
        None => {
            set_error("null partition handle");
            return FedtadStatus::NullArgument;
        }
    };
    let shard = match part.shards.get(client) {
        Some(s) => s,
        None => {
            set_error("client index out of range");
            return FedtadStatus::Config;
        }
    };
    if phi_out.is_null() || phi_len < shard.graph.num_classes {
        set_error("phi buffer too small or null");
        return FedtadStatus::NullArgument;
    }
    let phi = knowledge_reliability(shard, walk_length);
    for (i, &v) in phi.phi.iter().enumerate() {
        *phi_out.add(i) = v;
    }
    FedtadStatus::Ok
}

/// Run a full experiment from a config file, writing artifacts under
/// `out_dir`. On success `final_acc_out` (if non-null) receives the final
/// global test accuracy.
///
/// # Safety
/// `config_path` and `out_dir` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fedtad_run_experiment(
    config_path: *const c_char,
    out_dir: *const c_char,
    final_acc_out: *mut f64,
) -> FedtadStatus {
    let config_path = match path_arg(config_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let out_dir = match path_arg(out_dir) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match run_to_dir(&config_path, &out_dir) {
        Ok(acc) => {
            if !final_acc_out.is_null() {
                *final_acc_out = acc;
            }
            FedtadStatus::Ok
        }
        Err(e) => fail(e),
    }
}

fn run_to_dir(config_path: &Path, out_dir: &Path) -> fedtad::Result<f64> {
    let cfg = load_config(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let bundle = cfg.dataset.resolve(base)?;
    let communities = louvain(&bundle.graph, cfg.federation.seed)?;
    let partition = assign_communities(&communities, cfg.federation.num_clients, cfg.federation.seed)?;
    let mut shards = induce_shards(
        &bundle.graph,
        &partition,
        cfg.federation.split_ratios,
        cfg.federation.seed,
    )?;
    let output = run_federation(&mut shards, &cfg.federation)?;
    std::fs::create_dir_all(out_dir).map_err(|e| FedTadError::io(out_dir, e))?;
    let mut csv = String::from("round,global_test_acc,mean_local_val_acc,seconds\n");
    for r in &output.records {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.3}\n",
            r.round, r.global_test_acc, r.mean_local_val_acc, r.seconds
        ));
    }
    let csv_path = out_dir.join("metrics.csv");
    std::fs::write(&csv_path, csv).map_err(|e| FedTadError::io(&csv_path, e))?;
    Ok(output.records.last().map_or(0.0, |r| r.global_test_acc))
}
