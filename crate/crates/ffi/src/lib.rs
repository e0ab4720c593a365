//! C ABI for the simulator, the circuit wire format and the co-manager
//! state machine.
//!
//! Every fallible function returns a [`DqlStatus`]; on failure a message is
//! kept per thread and can be read with [`dql_last_error`]. Objects are
//! opaque handles created by `*_new`/`*_build`/`*_deserialize` and released
//! with the matching `*_free`. Times are milliseconds on the caller's
//! clock.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::time::Duration;

use dqulearn::circuit::{assemble_swap_circuit, build_layers, encode_features, LayerSpec, LogicalCircuit};
use dqulearn::comanager::{AssignOutcome, CoManager, CompleteOutcome, HeartbeatOutcome, ManagerConfig, ManagerError};
use dqulearn::statevector::{swap_test_fidelity, Gate, GateKind, StateError, StateVector};
use num_complex::Complex64;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DqlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Input bytes are not a valid encoding.
    Malformed = 3,
    /// Request exceeds a qubit limit.
    Capacity = 4,
    /// Output buffer too small; the required size was written.
    BufferTooSmall = 5,
    /// Worker id already registered.
    Conflict = 6,
    /// Unknown worker or circuit.
    NotFound = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DqlGateKind {
    H = 0,
    Rx = 1,
    Ry = 2,
    Rz = 3,
    Ryy = 4,
    Rzz = 5,
    Cry = 6,
    Crz = 7,
    Cswap = 8,
}

impl From<DqlGateKind> for GateKind {
    fn from(k: DqlGateKind) -> Self {
        match k {
            DqlGateKind::H => GateKind::H,
            DqlGateKind::Rx => GateKind::Rx,
            DqlGateKind::Ry => GateKind::Ry,
            DqlGateKind::Rz => GateKind::Rz,
            DqlGateKind::Ryy => GateKind::Ryy,
            DqlGateKind::Rzz => GateKind::Rzz,
            DqlGateKind::Cry => GateKind::Cry,
            DqlGateKind::Crz => GateKind::Crz,
            DqlGateKind::Cswap => GateKind::Cswap,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DqlAssign {
    Assigned = 0,
    Queued = 1,
    /// A result is already stored for this id.
    Cached = 2,
    /// The id is queued or executing.
    DuplicateInFlight = 3,
}

pub struct DqlStateVector {
    inner: StateVector,
}

pub struct DqlCircuit {
    inner: LogicalCircuit,
}

pub struct DqlCoManager {
    inner: CoManager,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(DqlStatus, String);

type FfiResult = Result<(), Failure>;

fn fail(status: DqlStatus, message: impl Into<String>) -> Failure {
    Failure(status, message.into())
}

impl From<StateError> for Failure {
    fn from(e: StateError) -> Self {
        let status = match e {
            StateError::Capacity { .. } => DqlStatus::Capacity,
            _ => DqlStatus::InvalidArgument,
        };
        fail(status, e.to_string())
    }
}

impl From<ManagerError> for Failure {
    fn from(e: ManagerError) -> Self {
        let status = match e {
            ManagerError::Conflict(_) => DqlStatus::Conflict,
            _ => DqlStatus::InvalidArgument,
        };
        fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> FfiResult) -> DqlStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err(fail(DqlStatus::Internal, "panic")));
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            DqlStatus::Ok
        }
        Err(Failure(status, message)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = message);
            status
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(DqlStatus::NullPointer, format!("{what} is null")))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(DqlStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(DqlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(DqlStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DqlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> FfiResult {
    if out.is_null() {
        return Err(fail(DqlStatus::NullPointer, format!("{what} is null")));
    }
    out.write(value);
    Ok(())
}

/// Copies `bytes` plus a NUL into `buf`; `needed` receives the full size.
unsafe fn copy_out(bytes: &[u8], nul: bool, buf: *mut u8, cap: usize, needed: *mut usize) -> FfiResult {
    let total = bytes.len() + usize::from(nul);
    if !needed.is_null() {
        needed.write(total);
    }
    if total > cap || (total > 0 && buf.is_null()) {
        return Err(fail(
            DqlStatus::BufferTooSmall,
            format!("need {total} bytes, buffer holds {cap}"),
        ));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
    if nul {
        buf.add(bytes.len()).write(0);
    }
    Ok(())
}

fn millis(ms: u64) -> Duration {
    Duration::from_millis(ms)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dql_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message (NUL-terminated) into
/// `buf`. Returns the buffer size the full message needs, including the
/// NUL; the copy is truncated when `cap` is smaller.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn dql_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            buf.add(n).write(0);
        }
        bytes.len() + 1
    })
}

// ------------------------------------------------------------ state vectors

/// Allocates `|0…0⟩` on `n_qubits` qubits.
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn dql_state_new(n_qubits: usize, out: *mut *mut DqlStateVector) -> DqlStatus {
    guard(|| {
        let inner = dqulearn::statevector::new_state(n_qubits)?;
        put(out, Box::into_raw(Box::new(DqlStateVector { inner })), "out")
    })
}

/// Builds a state from `n_amplitudes` interleaved `(re, im)` pairs. The
/// count must be a power of two and the vector normalized.
///
/// # Safety
/// `re_im` must hold `2 * n_amplitudes` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dql_state_from_amplitudes(
    re_im: *const f64,
    n_amplitudes: usize,
    out: *mut *mut DqlStateVector,
) -> DqlStatus {
    guard(|| {
        let raw = slice(re_im, 2 * n_amplitudes, "re_im")?;
        let amps = raw.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
        let inner = StateVector::from_amplitudes(amps)?;
        put(out, Box::into_raw(Box::new(DqlStateVector { inner })), "out")
    })
}

/// # Safety
/// `state` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dql_state_free(state: *mut DqlStateVector) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// # Safety
/// `state` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dql_state_n_qubits(state: *const DqlStateVector) -> usize {
    state.as_ref().map_or(0, |s| s.inner.n_qubits())
}

/// Applies one gate. `angle` is ignored for H and CSWAP.
///
/// # Safety
/// `state` must be a live handle; `targets` must hold `n_targets` values.
#[no_mangle]
pub unsafe extern "C" fn dql_state_apply(
    state: *mut DqlStateVector,
    kind: DqlGateKind,
    targets: *const usize,
    n_targets: usize,
    angle: f64,
) -> DqlStatus {
    guard(|| {
        let s = get_mut(state, "state")?;
        let kind = GateKind::from(kind);
        let targets = slice(targets, n_targets, "targets")?.to_vec();
        let angle = kind.is_parametric().then_some(angle);
        let gate = Gate::new(kind, targets, angle).map_err(|e| fail(DqlStatus::InvalidArgument, e))?;
        s.inner.apply(&gate)?;
        Ok(())
    })
}

/// # Safety
/// `state` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dql_state_prob_zero(state: *const DqlStateVector, qubit: usize, out: *mut f64) -> DqlStatus {
    guard(|| {
        let p = get(state, "state")?.inner.prob_zero(qubit)?;
        put(out, p, "out")
    })
}

/// Writes the amplitudes as interleaved `(re, im)` pairs. `cap` counts
/// doubles; `needed` (optional) receives `2 * 2^n`.
///
/// # Safety
/// `state` must be a live handle; `buf` must be valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn dql_state_amplitudes(
    state: *const DqlStateVector,
    buf: *mut f64,
    cap: usize,
    needed: *mut usize,
) -> DqlStatus {
    guard(|| {
        let amps = get(state, "state")?.inner.amplitudes();
        let total = 2 * amps.len();
        if !needed.is_null() {
            needed.write(total);
        }
        if total > cap || buf.is_null() {
            return Err(fail(
                DqlStatus::BufferTooSmall,
                format!("need {total} doubles, buffer holds {cap}"),
            ));
        }
        for (i, a) in amps.iter().enumerate() {
            buf.add(2 * i).write(a.re);
            buf.add(2 * i + 1).write(a.im);
        }
        Ok(())
    })
}

/// Exact SWAP-test probability `½ + ½|⟨ψ|φ⟩|²`.
///
/// # Safety
/// `psi` and `phi` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dql_swap_test(
    psi: *const DqlStateVector,
    phi: *const DqlStateVector,
    out: *mut f64,
) -> DqlStatus {
    guard(|| {
        let f = swap_test_fidelity(&get(psi, "psi")?.inner, &get(phi, "phi")?.inner, None, None)?;
        put(out, f, "out")
    })
}

// ------------------------------------------------------------ circuits

/// Assembles the SWAP-test classifier circuit for `qubit_count` qubits and
/// `n_layers` variational layers from encoding angles and layer parameters.
///
/// # Safety
/// `circuit_id` must be a NUL-terminated string; `angles` and `params` must
/// hold the given counts; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dql_circuit_build(
    circuit_id: *const c_char,
    qubit_count: usize,
    n_layers: usize,
    angles: *const f64,
    n_angles: usize,
    params: *const f64,
    n_params: usize,
    out: *mut *mut DqlCircuit,
) -> DqlStatus {
    guard(|| {
        let invalid = |e: dqulearn::circuit::CircuitError| fail(DqlStatus::InvalidArgument, e.to_string());
        let id = text(circuit_id, "circuit_id")?;
        let spec = LayerSpec::new(qubit_count, n_layers).map_err(invalid)?;
        let enc = encode_features(slice(angles, n_angles, "angles")?, &spec.data_register()).map_err(invalid)?;
        let layers = build_layers(&spec, slice(params, n_params, "params")?).map_err(invalid)?;
        let inner = assemble_swap_circuit(id, &enc, &layers, &spec).map_err(invalid)?;
        put(out, Box::into_raw(Box::new(DqlCircuit { inner })), "out")
    })
}

/// Decodes the circuit wire format.
///
/// # Safety
/// `bytes` must hold `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dql_circuit_deserialize(bytes: *const u8, len: usize, out: *mut *mut DqlCircuit) -> DqlStatus {
    guard(|| {
        let inner = LogicalCircuit::deserialize(slice(bytes, len, "bytes")?)
            .map_err(|e| fail(DqlStatus::Malformed, e.to_string()))?;
        put(out, Box::into_raw(Box::new(DqlCircuit { inner })), "out")
    })
}

/// Writes the canonical encoding. `needed` (optional) receives its length.
///
/// # Safety
/// `circuit` must be a live handle; `buf` must be valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn dql_circuit_serialize(
    circuit: *const DqlCircuit,
    buf: *mut u8,
    cap: usize,
    needed: *mut usize,
) -> DqlStatus {
    guard(|| copy_out(&get(circuit, "circuit")?.inner.serialize(), false, buf, cap, needed))
}

/// Copies the circuit id (NUL-terminated) into `buf`.
///
/// # Safety
/// `circuit` must be a live handle; `buf` must be valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn dql_circuit_id(
    circuit: *const DqlCircuit,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> DqlStatus {
    guard(|| {
        let id = get(circuit, "circuit")?.inner.circuit_id();
        copy_out(id.as_bytes(), true, buf.cast(), cap, needed)
    })
}

/// # Safety
/// `circuit` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dql_circuit_qubit_demand(circuit: *const DqlCircuit) -> usize {
    circuit.as_ref().map_or(0, |c| c.inner.qubit_demand())
}

/// Runs the circuit and writes `P(ancilla = 0)`.
///
/// # Safety
/// `circuit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dql_circuit_execute(circuit: *const DqlCircuit, out: *mut f64) -> DqlStatus {
    guard(|| {
        let f = get(circuit, "circuit")?.inner.execute()?;
        put(out, f, "out")
    })
}

/// # Safety
/// `circuit` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dql_circuit_free(circuit: *mut DqlCircuit) {
    if !circuit.is_null() {
        drop(Box::from_raw(circuit));
    }
}

// ------------------------------------------------------------ co-manager

/// Empty co-manager. `allow_exact_fit` relaxes placement from `AR > D` to
/// `AR >= D`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dql_comanager_new(
    heartbeat_period_ms: u64,
    allow_exact_fit: bool,
    out: *mut *mut DqlCoManager,
) -> DqlStatus {
    guard(|| {
        if heartbeat_period_ms == 0 {
            return Err(fail(DqlStatus::InvalidArgument, "heartbeat period must be positive"));
        }
        let inner = CoManager::new(ManagerConfig {
            heartbeat_period: millis(heartbeat_period_ms),
            allow_exact_fit,
        });
        put(out, Box::into_raw(Box::new(DqlCoManager { inner })), "out")
    })
}

/// # Safety
/// `manager` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dql_comanager_free(manager: *mut DqlCoManager) {
    if !manager.is_null() {
        drop(Box::from_raw(manager));
    }
}

/// # Safety
/// `manager` must be a live handle; `worker_id` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dql_comanager_register(
    manager: *mut DqlCoManager,
    worker_id: *const c_char,
    max_qubits: usize,
    cru: f64,
    now_ms: u64,
) -> DqlStatus {
    guard(|| {
        let m = get_mut(manager, "manager")?;
        m.inner
            .register_worker(text(worker_id, "worker_id")?, max_qubits, cru, millis(now_ms))?;
        Ok(())
    })
}

/// Applies a heartbeat listing `n_active` circuits (`circuit_ids[i]` with
/// `demands[i]` qubits). `quarantined` (optional) is set when the report
/// did not fit the worker's capacity.
///
/// # Safety
/// `manager` must be a live handle; the arrays must hold `n_active`
/// entries of NUL-terminated strings and sizes.
#[no_mangle]
pub unsafe extern "C" fn dql_comanager_heartbeat(
    manager: *mut DqlCoManager,
    worker_id: *const c_char,
    circuit_ids: *const *const c_char,
    demands: *const usize,
    n_active: usize,
    cru: f64,
    now_ms: u64,
    quarantined: *mut bool,
) -> DqlStatus {
    guard(|| {
        let m = get_mut(manager, "manager")?;
        let id = text(worker_id, "worker_id")?;
        let ids = slice(circuit_ids, n_active, "circuit_ids")?;
        let demands = slice(demands, n_active, "demands")?;
        let active = ids
            .iter()
            .zip(demands)
            .map(|(&c, &d)| Ok((text(c, "circuit id")?.to_owned(), d)))
            .collect::<Result<Vec<_>, Failure>>()?;
        let q = match m.inner.on_heartbeat(id, &active, cru, millis(now_ms)) {
            HeartbeatOutcome::UnknownWorker => return Err(fail(DqlStatus::NotFound, format!("unknown worker {id}"))),
            HeartbeatOutcome::Quarantined => true,
            HeartbeatOutcome::Updated => false,
        };
        if !quarantined.is_null() {
            quarantined.write(q);
        }
        Ok(())
    })
}

/// Places or queues a circuit. On `Assigned` the chosen worker id is copied
/// (NUL-terminated) into `worker_buf`; on `Cached` the stored fidelity is
/// written to `cached` (optional).
///
/// # Safety
/// `manager` must be a live handle; strings NUL-terminated; `outcome`
/// writable; `worker_buf` valid for `worker_cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn dql_comanager_assign(
    manager: *mut DqlCoManager,
    circuit_id: *const c_char,
    demand: usize,
    client_id: *const c_char,
    now_ms: u64,
    outcome: *mut DqlAssign,
    worker_buf: *mut c_char,
    worker_cap: usize,
    cached: *mut f64,
) -> DqlStatus {
    guard(|| {
        let m = get_mut(manager, "manager")?;
        let circuit = text(circuit_id, "circuit_id")?;
        let client = text(client_id, "client_id")?;
        match m.inner.assign(circuit, demand, client, millis(now_ms))? {
            AssignOutcome::Assigned(w) => {
                put(outcome, DqlAssign::Assigned, "outcome")?;
                copy_out(w.as_bytes(), true, worker_buf.cast(), worker_cap, ptr::null_mut())
            }
            AssignOutcome::Queued => put(outcome, DqlAssign::Queued, "outcome"),
            AssignOutcome::Cached(f) => {
                if !cached.is_null() {
                    cached.write(f);
                }
                put(outcome, DqlAssign::Cached, "outcome")
            }
            AssignOutcome::DuplicateInFlight => put(outcome, DqlAssign::DuplicateInFlight, "outcome"),
        }
    })
}

/// Records a worker's result. `delivered` is set when this was the first
/// result for the circuit and it should be forwarded to its client.
///
/// # Safety
/// `manager` must be a live handle; strings NUL-terminated; `delivered`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dql_comanager_complete(
    manager: *mut DqlCoManager,
    circuit_id: *const c_char,
    worker_id: *const c_char,
    fidelity: f64,
    now_ms: u64,
    delivered: *mut bool,
) -> DqlStatus {
    guard(|| {
        let m = get_mut(manager, "manager")?;
        let outcome = m.inner.complete(
            text(circuit_id, "circuit_id")?,
            text(worker_id, "worker_id")?,
            fidelity,
            millis(now_ms),
        );
        put(
            delivered,
            matches!(outcome, CompleteOutcome::Delivered { .. }),
            "delivered",
        )
    })
}

/// Evicts workers silent for more than three heartbeat periods and
/// re-queues their circuits. `evicted` receives the number removed.
///
/// # Safety
/// `manager` must be a live handle; `evicted` writable.
#[no_mangle]
pub unsafe extern "C" fn dql_comanager_detect_failures(
    manager: *mut DqlCoManager,
    now_ms: u64,
    evicted: *mut usize,
) -> DqlStatus {
    guard(|| {
        let m = get_mut(manager, "manager")?;
        let gone = m.inner.detect_failures(millis(now_ms));
        m.inner.rescan(millis(now_ms));
        put(evicted, gone.len(), "evicted")
    })
}

/// Free qubits (`AR = MR − OR`) of a worker.
///
/// # Safety
/// `manager` must be a live handle; `worker_id` NUL-terminated; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dql_comanager_available(
    manager: *const DqlCoManager,
    worker_id: *const c_char,
    out: *mut usize,
) -> DqlStatus {
    guard(|| {
        let m = get(manager, "manager")?;
        let id = text(worker_id, "worker_id")?;
        let rec = m
            .inner
            .worker(id)
            .ok_or_else(|| fail(DqlStatus::NotFound, format!("unknown worker {id}")))?;
        put(out, rec.available(), "out")
    })
}

/// Number of circuits waiting for a worker.
///
/// # Safety
/// `manager` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dql_comanager_queue_len(manager: *const DqlCoManager) -> usize {
    manager.as_ref().map_or(0, |m| m.inner.queue().len())
}
