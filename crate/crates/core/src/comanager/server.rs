//! TCP front end of the co-manager.
//!
//! One actor thread owns the [`CoManager`] and every routing table; socket
//! readers, the accept loop and the failure-detection ticker only send it
//! commands. Each connection has its own writer thread fed by a channel, so
//! the actor never blocks on a slow peer.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::fleet::FleetConfig;
use super::state::{AssignOutcome, CoManager, CompleteOutcome, ManagerConfig, ManagerError, WorkerRecord};
use crate::circuit::LogicalCircuit;
use crate::protocol::{ErrorCode, FrameDecoder, Message, SubmitStatus};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    /// Wall-clock time since start-up.
    Real,
    /// Logical time that advances by one tick interval per ticker tick and
    /// stands still in between, so every event handled between two ticks
    /// carries the same timestamp.
    Virtual,
}

pub struct ServerConfig {
    pub listen: String,
    pub manager: ManagerConfig,
    pub fleet: FleetConfig,
    pub clock: ClockMode,
    /// Event log sink, one line per state transition.
    pub event_log: Option<Box<dyn Write + Send>>,
}

impl ServerConfig {
    pub fn new(listen: impl Into<String>, manager: ManagerConfig) -> Self {
        ServerConfig {
            listen: listen.into(),
            manager,
            fleet: FleetConfig::default(),
            clock: ClockMode::Real,
            event_log: None,
        }
    }
}

/// Failure detection runs four times per heartbeat period.
fn tick_interval(period: Duration) -> Duration {
    (period / 4).max(Duration::from_millis(5))
}

type ConnId = u64;

enum Command {
    Accepted(ConnId, TcpStream),
    Inbound(ConnId, Message),
    Garbled(ConnId, String),
    Closed(ConnId),
    Tick,
    Snapshot(Sender<Vec<WorkerRecord>>),
    Shutdown,
}

struct Conn {
    out: Sender<Vec<u8>>,
    stream: TcpStream,
    worker: Option<String>,
    next_corr: u64,
}

struct Route {
    conn: ConnId,
    corr: u64,
    circuit: Vec<u8>,
}

struct Actor {
    state: CoManager,
    clock: ClockMode,
    started: Instant,
    virtual_now: Duration,
    tick: Duration,
    conns: HashMap<ConnId, Conn>,
    worker_conns: BTreeMap<String, ConnId>,
    /// Submitted circuits still in flight, by id.
    routes: HashMap<String, Route>,
    /// Outstanding ASSIGN messages per (worker connection, corr).
    assigns: HashMap<(ConnId, u64), String>,
    /// Placements on workers that have no live connection yet.
    outbox: BTreeMap<String, Vec<String>>,
    event_log: Option<Box<dyn Write + Send>>,
}

impl Actor {
    fn now(&self) -> Duration {
        match self.clock {
            ClockMode::Real => self.started.elapsed(),
            ClockMode::Virtual => self.virtual_now,
        }
    }

    fn send(&self, conn: ConnId, msg: &Message) {
        if let Some(c) = self.conns.get(&conn) {
            let _ = c.out.send(msg.encode());
        }
    }

    fn error(&self, conn: ConnId, corr: u64, code: ErrorCode, detail: impl Into<String>) {
        self.send(
            conn,
            &Message::Error {
                corr,
                code,
                detail: detail.into(),
            },
        );
    }

    fn run(mut self, rx: Receiver<Command>) {
        while let Ok(cmd) = rx.recv() {
            match cmd {
                Command::Accepted(id, stream) => self.accept(id, stream),
                Command::Inbound(id, msg) => self.inbound(id, msg),
                Command::Garbled(id, why) => {
                    log::warn!("connection {id}: {why}; closing");
                    self.error(id, 0, ErrorCode::Malformed, why);
                    self.close(id);
                }
                Command::Closed(id) => self.close(id),
                Command::Tick => {
                    self.virtual_now += self.tick;
                    let now = self.now();
                    for w in self.state.detect_failures(now) {
                        log::warn!("worker {w} missed three heartbeat periods; evicted");
                        self.outbox.remove(&w);
                        // a worker that is still connected learns of its
                        // eviction when the connection drops
                        if let Some(conn) = self.worker_conns.remove(&w) {
                            if let Some(c) = self.conns.get_mut(&conn) {
                                c.worker = None;
                            }
                            self.close(conn);
                        }
                    }
                }
                Command::Snapshot(reply) => {
                    let _ = reply.send(self.state.workers().cloned().collect());
                }
                Command::Shutdown => break,
            }
            self.flush();
        }
        for c in self.conns.values() {
            let _ = c.stream.shutdown(Shutdown::Both);
        }
        if let Some(log) = self.event_log.as_mut() {
            let _ = log.flush();
        }
    }

    fn accept(&mut self, id: ConnId, stream: TcpStream) {
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        let Ok(mut writer) = stream.try_clone() else {
            return;
        };
        thread::spawn(move || {
            for frame in rx {
                if writer.write_all(&frame).is_err() {
                    break;
                }
            }
        });
        self.conns.insert(
            id,
            Conn {
                out: tx,
                stream,
                worker: None,
                next_corr: 1,
            },
        );
    }

    fn close(&mut self, id: ConnId) {
        if let Some(c) = self.conns.remove(&id) {
            let _ = c.stream.shutdown(Shutdown::Both);
            if let Some(w) = c.worker {
                // the record stays until the heartbeat rule evicts it
                log::info!("worker {w} disconnected");
                self.worker_conns.remove(&w);
            }
        }
        self.assigns.retain(|(conn, _), _| *conn != id);
    }

    fn inbound(&mut self, conn: ConnId, msg: Message) {
        let now = self.now();
        match msg {
            Message::Register {
                corr,
                worker_id,
                max_qubits,
                cru,
            } => {
                if self.conns.get(&conn).is_some_and(|c| c.worker.is_some()) {
                    return self.error(conn, corr, ErrorCode::Malformed, "connection already registered");
                }
                match self.state.register_worker(&worker_id, max_qubits, cru, now) {
                    Ok(()) => {
                        log::info!("worker {worker_id} registered with {max_qubits} qubits");
                        if let Some(c) = self.conns.get_mut(&conn) {
                            c.worker = Some(worker_id.clone());
                        }
                        self.worker_conns.insert(worker_id.clone(), conn);
                        self.send(
                            conn,
                            &Message::RegisterAck {
                                corr,
                                worker_id: worker_id.clone(),
                            },
                        );
                        for cid in self.outbox.remove(&worker_id).unwrap_or_default() {
                            if self.state.assignee(&cid) == Some(worker_id.as_str()) {
                                self.send_assign(&worker_id, &cid);
                            }
                        }
                    }
                    Err(ManagerError::Conflict(w)) => {
                        self.error(conn, corr, ErrorCode::Conflict, format!("worker {w} is already active"))
                    }
                    Err(e) => self.error(conn, corr, ErrorCode::Malformed, e.to_string()),
                }
            }
            Message::Heartbeat {
                worker_id, active, cru, ..
            } => {
                if self.conns.get(&conn).and_then(|c| c.worker.as_deref()) != Some(worker_id.as_str()) {
                    log::warn!("heartbeat for {worker_id} on a connection not registered to it; ignored");
                    return;
                }
                let report: Vec<(String, usize)> = active.into_iter().map(|a| (a.circuit_id, a.demand)).collect();
                self.state.on_heartbeat(&worker_id, &report, cru, now);
            }
            Message::Result {
                corr,
                circuit_id,
                fidelity,
            } => {
                let Some(worker) = self.conns.get(&conn).and_then(|c| c.worker.clone()) else {
                    log::warn!("RESULT for {circuit_id} from an unregistered connection; dropped");
                    return;
                };
                self.assigns.remove(&(conn, corr));
                if let CompleteOutcome::Delivered { .. } = self.state.complete(&circuit_id, &worker, fidelity, now) {
                    if let Some(r) = self.routes.remove(&circuit_id) {
                        self.send(
                            r.conn,
                            &Message::JobResult {
                                corr: r.corr,
                                circuit_id,
                                fidelity,
                            },
                        );
                    }
                }
            }
            Message::Error { corr, code, detail } => {
                let worker = self.conns.get(&conn).and_then(|c| c.worker.clone());
                let (Some(worker), Some(circuit_id)) = (worker, self.assigns.remove(&(conn, corr))) else {
                    log::warn!("unsolicited ERROR {} from connection {conn}: {detail}", code.as_str());
                    return;
                };
                if self.state.fail(&circuit_id, &worker, now).is_some() {
                    if let Some(r) = self.routes.remove(&circuit_id) {
                        let code = if code == ErrorCode::Capacity {
                            code
                        } else {
                            ErrorCode::ExecutionFailed
                        };
                        self.error(r.conn, r.corr, code, format!("{circuit_id} on {worker}: {detail}"));
                    }
                }
            }
            Message::Submit {
                corr,
                client_id,
                circuit,
            } => {
                let parsed = match LogicalCircuit::deserialize(&circuit) {
                    Ok(c) => c,
                    Err(e) => return self.error(conn, corr, ErrorCode::Malformed, e.to_string()),
                };
                let id = parsed.circuit_id().to_owned();
                match self.state.assign(&id, parsed.qubit_demand(), &client_id, now) {
                    Ok(AssignOutcome::Cached(fidelity)) => {
                        self.send(
                            conn,
                            &Message::SubmitAck {
                                corr,
                                circuit_id: id.clone(),
                                status: SubmitStatus::Cached,
                            },
                        );
                        self.send(
                            conn,
                            &Message::JobResult {
                                corr,
                                circuit_id: id,
                                fidelity,
                            },
                        );
                    }
                    Ok(AssignOutcome::DuplicateInFlight) => self.error(
                        conn,
                        corr,
                        ErrorCode::DuplicateInFlight,
                        format!("{id} is already in flight"),
                    ),
                    Ok(outcome) => {
                        let status = if matches!(outcome, AssignOutcome::Queued) {
                            SubmitStatus::Queued
                        } else {
                            SubmitStatus::Assigned
                        };
                        self.routes.insert(id.clone(), Route { conn, corr, circuit });
                        self.send(
                            conn,
                            &Message::SubmitAck {
                                corr,
                                circuit_id: id,
                                status,
                            },
                        );
                    }
                    Err(e) => self.error(conn, corr, ErrorCode::Malformed, e.to_string()),
                }
            }
            other => self.error(
                conn,
                other.corr(),
                ErrorCode::Malformed,
                format!("{} is not a request the manager accepts", other.type_name()),
            ),
        }
    }

    fn send_assign(&mut self, worker: &str, circuit_id: &str) {
        let Some(&conn) = self.worker_conns.get(worker) else {
            self.outbox
                .entry(worker.to_owned())
                .or_default()
                .push(circuit_id.to_owned());
            return;
        };
        let Some(route) = self.routes.get(circuit_id) else {
            return;
        };
        let c = self.conns.get_mut(&conn).expect("bound connection exists");
        let corr = c.next_corr;
        c.next_corr += 1;
        let _ = c.out.send(
            Message::Assign {
                corr,
                circuit: route.circuit.clone(),
            }
            .encode(),
        );
        self.assigns.insert((conn, corr), circuit_id.to_owned());
    }

    /// Sends ASSIGN for new placements and writes pending events.
    fn flush(&mut self) {
        for p in self.state.take_placements() {
            self.send_assign(&p.worker_id, &p.circuit_id);
        }
        let events = self.state.take_events();
        if let Some(log) = self.event_log.as_mut() {
            for e in events {
                let _ = writeln!(log, "{e}");
            }
            let _ = log.flush();
        }
    }
}

/// A running manager. Dropping it shuts the server down.
pub struct ManagerHandle {
    addr: SocketAddr,
    tx: Sender<Command>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ManagerHandle {
    pub fn start(mut config: ServerConfig) -> Result<ManagerHandle, ServerError> {
        if let Some(p) = config.fleet.heartbeat_period {
            if p > 0.0 && p.is_finite() {
                config.manager.heartbeat_period = Duration::from_secs_f64(p);
            }
        }
        let state = CoManager::init(&config.fleet, config.manager, Duration::ZERO)?;
        let listener = TcpListener::bind(&config.listen).map_err(|source| ServerError::Bind {
            addr: config.listen.clone(),
            source,
        })?;
        let addr = listener.local_addr()?;
        let tick = tick_interval(config.manager.heartbeat_period);
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let actor = Actor {
            state,
            clock: config.clock,
            started: Instant::now(),
            virtual_now: Duration::ZERO,
            tick,
            conns: HashMap::new(),
            worker_conns: BTreeMap::new(),
            routes: HashMap::new(),
            assigns: HashMap::new(),
            outbox: BTreeMap::new(),
            event_log: config.event_log,
        };
        let mut threads = vec![thread::spawn(move || actor.run(rx))];

        let (atx, astop) = (tx.clone(), stop.clone());
        threads.push(thread::spawn(move || {
            let mut next_id: ConnId = 0;
            for stream in listener.incoming() {
                if astop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                next_id += 1;
                let id = next_id;
                let Ok(reader) = stream.try_clone() else { continue };
                if atx.send(Command::Accepted(id, stream)).is_err() {
                    break;
                }
                let rtx = atx.clone();
                thread::spawn(move || read_loop(id, reader, rtx));
            }
        }));

        let (ttx, tstop) = (tx.clone(), stop.clone());
        threads.push(thread::spawn(move || {
            while !tstop.load(Ordering::SeqCst) {
                thread::sleep(tick);
                if ttx.send(Command::Tick).is_err() {
                    break;
                }
            }
        }));

        Ok(ManagerHandle {
            addr,
            tx,
            stop,
            threads,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Snapshot of the registry.
    pub fn registry(&self) -> Vec<WorkerRecord> {
        let (tx, rx) = mpsc::channel();
        if self.tx.send(Command::Snapshot(tx)).is_err() {
            return Vec::new();
        }
        rx.recv().unwrap_or_default()
    }

    /// Stops the server and closes every connection. Idempotent.
    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = self.tx.send(Command::Shutdown);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ManagerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn read_loop(id: ConnId, mut stream: TcpStream, tx: Sender<Command>) {
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = match stream.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        decoder.push(&buf[..n]);
        loop {
            match decoder.next_message() {
                Ok(Some(msg)) => {
                    if tx.send(Command::Inbound(id, msg)).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    let _ = tx.send(Command::Garbled(id, e.to_string()));
                    return;
                }
            }
        }
    }
    let _ = tx.send(Command::Closed(id));
}
