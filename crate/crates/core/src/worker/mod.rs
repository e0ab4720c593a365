//! Quantum worker daemon: registration, heartbeats and circuit execution on
//! the embedded statevector simulator.
//!
//! Logical qubit `k` runs on simulator qubit `k`; every circuit gets its own
//! fresh statevector, so co-resident circuits never interact.

pub mod cru;

use std::collections::BTreeMap;
use std::io;
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

pub use cru::{CruMeter, CruMode, CruTrace, TraceError};

use crate::circuit::LogicalCircuit;
use crate::protocol::{read_message, write_message, ActiveCircuit, ErrorCode, Message, WireError};

pub const BACKOFF_BASE: Duration = Duration::from_secs(1);
pub const BACKOFF_CAP: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("manager rejected registration of {worker_id}: {detail}")]
    Rejected { worker_id: String, detail: String },
    #[error("connection to manager lost: {0}")]
    ConnectionLost(String),
    #[error("invalid worker config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerConfig {
    pub worker_id: String,
    pub max_qubits: usize,
    pub manager: String,
    pub heartbeat_period: Duration,
    pub cru_mode: CruMode,
    /// Circuits executing at once (each still subject to the qubit guard).
    pub parallelism: usize,
    /// Extra latency added to every circuit.
    pub synthetic_delay: Duration,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
}

impl WorkerConfig {
    pub fn new(worker_id: impl Into<String>, max_qubits: usize, manager: impl Into<String>) -> Self {
        WorkerConfig {
            worker_id: worker_id.into(),
            max_qubits,
            manager: manager.into(),
            heartbeat_period: crate::comanager::DEFAULT_HEARTBEAT_PERIOD,
            cru_mode: CruMode::Measured,
            parallelism: 1,
            synthetic_delay: Duration::ZERO,
            backoff_base: BACKOFF_BASE,
            backoff_cap: BACKOFF_CAP,
        }
    }

    pub fn validate(&self) -> Result<(), WorkerError> {
        if self.worker_id.is_empty() {
            return Err(WorkerError::Config("empty worker id".into()));
        }
        if self.max_qubits == 0 {
            return Err(WorkerError::Config("max qubits must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(WorkerError::Config("parallelism must be at least 1".into()));
        }
        if self.heartbeat_period.is_zero() {
            return Err(WorkerError::Config("heartbeat period must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("malformed circuit: {0}")]
    Malformed(String),
    #[error("circuit needs {demand} qubits, worker has {max}")]
    Capacity { demand: usize, max: usize },
    #[error("simulation failed: {0}")]
    Simulation(String),
}

impl ExecError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ExecError::Malformed(_) => ErrorCode::Malformed,
            ExecError::Capacity { .. } => ErrorCode::Capacity,
            ExecError::Simulation(_) => ErrorCode::ExecutionFailed,
        }
    }
}

/// Decodes a circuit and checks it against the worker's capacity.
pub fn load_circuit(bytes: &[u8], max_qubits: usize) -> Result<LogicalCircuit, ExecError> {
    let c = LogicalCircuit::deserialize(bytes).map_err(|e| ExecError::Malformed(e.to_string()))?;
    if c.qubit_demand() > max_qubits {
        return Err(ExecError::Capacity {
            demand: c.qubit_demand(),
            max: max_qubits,
        });
    }
    Ok(c)
}

/// Loads, runs and measures one assignment.
pub fn execute_assignment(bytes: &[u8], max_qubits: usize) -> Result<(String, f64), ExecError> {
    let c = load_circuit(bytes, max_qubits)?;
    let f = c.execute().map_err(|e| ExecError::Simulation(e.to_string()))?;
    Ok((c.circuit_id().to_owned(), f))
}

/// Circuits currently holding qubits on this worker.
#[derive(Debug, Default)]
pub struct ActiveSet {
    inner: Mutex<BTreeMap<String, usize>>,
    freed: Condvar,
}

impl ActiveSet {
    /// Blocks until `demand` more qubits fit under `max`, then claims them.
    fn acquire(&self, id: &str, demand: usize, max: usize, abort: &AtomicBool) -> bool {
        let mut g = self.inner.lock().expect("active set poisoned");
        loop {
            if abort.load(Ordering::SeqCst) {
                return false;
            }
            if g.values().sum::<usize>() + demand <= max {
                g.insert(id.to_owned(), demand);
                return true;
            }
            g = self
                .freed
                .wait_timeout(g, Duration::from_millis(50))
                .expect("active set poisoned")
                .0;
        }
    }

    fn release(&self, id: &str) {
        self.inner.lock().expect("active set poisoned").remove(id);
        self.freed.notify_all();
    }

    pub fn snapshot(&self) -> Vec<ActiveCircuit> {
        self.inner
            .lock()
            .expect("active set poisoned")
            .iter()
            .map(|(id, &demand)| ActiveCircuit {
                circuit_id: id.clone(),
                demand,
            })
            .collect()
    }
}

/// Shared run-time flags for one worker.
#[derive(Debug, Default)]
pub struct Control {
    stop: AtomicBool,
    killed: AtomicBool,
    registered: AtomicBool,
    stream: Mutex<Option<TcpStream>>,
}

impl Control {
    pub fn is_registered(&self) -> bool {
        self.registered.load(Ordering::SeqCst)
    }

    fn halted(&self) -> bool {
        self.stop.load(Ordering::SeqCst) || self.killed.load(Ordering::SeqCst)
    }

    fn close_socket(&self) {
        if let Some(s) = self.stream.lock().expect("control poisoned").as_ref() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    /// Graceful stop: in-flight circuits finish, then the connection closes.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
        self.close_socket();
    }

    /// Crash simulation: heartbeats and results stop immediately.
    pub fn kill(&self) {
        self.killed.store(true, Ordering::SeqCst);
        self.close_socket();
    }
}

fn sleep_unless(control: &Control, d: Duration) {
    let end = Instant::now() + d;
    while !control.halted() {
        let left = end.saturating_duration_since(Instant::now());
        if left.is_zero() {
            break;
        }
        thread::sleep(left.min(Duration::from_millis(20)));
    }
}

struct Session {
    stream: TcpStream,
    writer: Arc<Mutex<TcpStream>>,
}

fn send(writer: &Mutex<TcpStream>, msg: &Message) -> io::Result<()> {
    write_message(&mut *writer.lock().expect("writer poisoned"), msg)
}

/// Connects and registers, retrying with exponential backoff until the
/// manager acknowledges. A rejection is fatal.
fn register(config: &WorkerConfig, control: &Control, cru: f64) -> Result<Option<Session>, WorkerError> {
    let mut delay = config.backoff_base;
    loop {
        if control.halted() {
            return Ok(None);
        }
        match try_register(config, cru) {
            Ok(session) => return Ok(Some(session)),
            Err(AttemptError::Rejected(detail)) => {
                return Err(WorkerError::Rejected {
                    worker_id: config.worker_id.clone(),
                    detail,
                })
            }
            Err(AttemptError::Retry(why)) => {
                log::info!(
                    "registration of {} failed ({why}); retrying in {delay:?}",
                    config.worker_id
                );
                sleep_unless(control, delay);
                delay = (delay * 2).min(config.backoff_cap);
            }
        }
    }
}

enum AttemptError {
    Retry(String),
    Rejected(String),
}

fn try_register(config: &WorkerConfig, cru: f64) -> Result<Session, AttemptError> {
    let retry = |e: &dyn std::fmt::Display| AttemptError::Retry(e.to_string());
    let mut stream = TcpStream::connect(&config.manager).map_err(|e| retry(&e))?;
    let _ = stream.set_nodelay(true);
    write_message(
        &mut stream,
        &Message::Register {
            corr: 1,
            worker_id: config.worker_id.clone(),
            max_qubits: config.max_qubits,
            cru,
        },
    )
    .map_err(|e| retry(&e))?;
    match read_message(&mut stream) {
        Ok(Some(Message::RegisterAck { .. })) => {
            let writer = stream.try_clone().map_err(|e| retry(&e))?;
            Ok(Session {
                stream,
                writer: Arc::new(Mutex::new(writer)),
            })
        }
        Ok(Some(Message::Error {
            code: ErrorCode::Conflict,
            detail,
            ..
        })) => Err(AttemptError::Rejected(detail)),
        Ok(Some(Message::Error { detail, .. })) => Err(AttemptError::Rejected(detail)),
        Ok(Some(other)) => Err(AttemptError::Retry(format!("unexpected {}", other.type_name()))),
        Ok(None) => Err(AttemptError::Retry("connection closed".into())),
        Err(e) => Err(retry(&e)),
    }
}

/// Runs the worker until it is stopped, killed or loses its manager.
pub fn run_worker(config: WorkerConfig, control: Arc<Control>) -> Result<(), WorkerError> {
    config.validate()?;
    let mut meter = CruMeter::new(config.cru_mode.clone(), config.heartbeat_period);
    let Some(session) = register(&config, &control, meter.sample())? else {
        return Ok(());
    };
    *control.stream.lock().expect("control poisoned") = session.stream.try_clone().ok();
    control.registered.store(true, Ordering::SeqCst);
    log::info!("worker {} registered ({} qubits)", config.worker_id, config.max_qubits);

    let active = Arc::new(ActiveSet::default());
    let corr = Arc::new(AtomicU64::new(2));
    let mut threads: Vec<JoinHandle<()>> = Vec::new();

    {
        let (active, writer, control, corr) = (active.clone(), session.writer.clone(), control.clone(), corr.clone());
        let (id, period) = (config.worker_id.clone(), config.heartbeat_period);
        threads.push(thread::spawn(move || loop {
            sleep_unless(&control, period);
            if control.halted() {
                break;
            }
            let msg = Message::Heartbeat {
                corr: corr.fetch_add(1, Ordering::SeqCst),
                worker_id: id.clone(),
                active: active.snapshot(),
                cru: meter.sample(),
            };
            if let Err(e) = send(&writer, &msg) {
                log::warn!("heartbeat from {id} not sent: {e}");
            }
        }));
    }

    let (jobs_tx, jobs_rx) = mpsc::channel::<(u64, Vec<u8>)>();
    let jobs_rx = Arc::new(Mutex::new(jobs_rx));
    for _ in 0..config.parallelism {
        let (active, writer, control, jobs) =
            (active.clone(), session.writer.clone(), control.clone(), jobs_rx.clone());
        let (max, delay) = (config.max_qubits, config.synthetic_delay);
        threads.push(thread::spawn(move || {
            executor(jobs, active, writer, control, max, delay)
        }));
    }

    let mut reader = session.stream;
    let outcome = loop {
        match read_message(&mut reader) {
            Ok(Some(Message::Assign { corr, circuit })) => {
                let _ = jobs_tx.send((corr, circuit));
            }
            Ok(Some(Message::Error { code, detail, .. })) => {
                log::warn!("manager error {}: {detail}", code.as_str());
            }
            Ok(Some(other)) => log::warn!("ignoring unexpected {}", other.type_name()),
            Ok(None) => break Err("manager closed the connection".to_string()),
            Err(WireError::Io(e)) => break Err(e.to_string()),
            Err(WireError::Frame(e)) => break Err(e.to_string()),
        }
    };
    drop(jobs_tx);
    let halted = control.halted();
    control.stop.store(true, Ordering::SeqCst);
    for t in threads {
        let _ = t.join();
    }
    match outcome {
        Err(_) if halted => Ok(()),
        Err(why) => Err(WorkerError::ConnectionLost(why)),
        Ok(()) => Ok(()),
    }
}

/// Assignments waiting for an executor: correlation id and circuit bytes.
type JobQueue = Arc<Mutex<Receiver<(u64, Vec<u8>)>>>;

fn executor(
    jobs: JobQueue,
    active: Arc<ActiveSet>,
    writer: Arc<Mutex<TcpStream>>,
    control: Arc<Control>,
    max_qubits: usize,
    delay: Duration,
) {
    loop {
        let next = jobs.lock().expect("job queue poisoned").recv();
        let Ok((corr, bytes)) = next else { break };
        let reply = match load_circuit(&bytes, max_qubits) {
            Err(e) => {
                log::error!("rejecting assignment {corr}: {e}");
                Message::Error {
                    corr,
                    code: e.code(),
                    detail: e.to_string(),
                }
            }
            Ok(circuit) => {
                let id = circuit.circuit_id().to_owned();
                if !active.acquire(&id, circuit.qubit_demand(), max_qubits, &control.killed) {
                    break;
                }
                let result = circuit.execute();
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
                active.release(&id);
                match result {
                    Ok(fidelity) => Message::Result {
                        corr,
                        circuit_id: id,
                        fidelity,
                    },
                    Err(e) => Message::Error {
                        corr,
                        code: ErrorCode::ExecutionFailed,
                        detail: e.to_string(),
                    },
                }
            }
        };
        if control.killed.load(Ordering::SeqCst) {
            break;
        }
        if let Err(e) = send(&writer, &reply) {
            log::warn!("reply for assignment {corr} not sent: {e}");
        }
    }
}

/// A worker running on a background thread.
pub struct WorkerHandle {
    control: Arc<Control>,
    thread: Option<JoinHandle<Result<(), WorkerError>>>,
}

impl WorkerHandle {
    pub fn spawn(config: WorkerConfig) -> WorkerHandle {
        let control = Arc::new(Control::default());
        let c = control.clone();
        WorkerHandle {
            control,
            thread: Some(thread::spawn(move || run_worker(config, c))),
        }
    }

    pub fn control(&self) -> &Arc<Control> {
        &self.control
    }

    /// Waits up to `timeout` for the manager's acknowledgement.
    pub fn wait_registered(&self, timeout: Duration) -> bool {
        let end = Instant::now() + timeout;
        while Instant::now() < end {
            if self.control.is_registered() {
                return true;
            }
            if self.thread.as_ref().is_some_and(|t| t.is_finished()) {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
        self.control.is_registered()
    }

    pub fn kill(&self) {
        self.control.kill();
    }

    pub fn stop(&self) {
        self.control.stop();
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    /// Stops the worker (if still running) and returns its exit status.
    pub fn join(mut self) -> Result<(), WorkerError> {
        self.control.stop();
        self.thread.take().map_or(Ok(()), |t| {
            t.join()
                .unwrap_or_else(|_| Err(WorkerError::ConnectionLost("worker panicked".into())))
        })
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        if let Some(t) = self.thread.take() {
            self.control.stop();
            let _ = t.join();
        }
    }
}
