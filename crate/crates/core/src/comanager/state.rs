//! The co-manager's registry, resource ledger and placement logic.
//!
//! Everything here is a synchronous state machine: every operation takes
//! the current time explicitly and returns what changed. The network server
//! and the discrete-event simulator both drive this same type.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::time::Duration;

use thiserror::Error;

use super::fleet::FleetConfig;

pub const DEFAULT_HEARTBEAT_PERIOD: Duration = Duration::from_secs(5);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ManagerError {
    #[error("worker {0} is already registered and active")]
    Conflict(String),
    #[error("duplicate worker id {0} in fleet config")]
    DuplicateConfigId(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManagerConfig {
    pub heartbeat_period: Duration,
    /// Accept `AR >= D` instead of the strict `AR > D`.
    pub allow_exact_fit: bool,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            heartbeat_period: DEFAULT_HEARTBEAT_PERIOD,
            allow_exact_fit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerRecord {
    pub worker_id: String,
    pub max_qubits: usize,
    /// Ledger of circuits believed to occupy the worker, id → demand.
    pub active: BTreeMap<String, usize>,
    pub cru: f64,
    pub cru_at: Duration,
    pub last_heartbeat: Duration,
    /// Excluded from placement until a consistent heartbeat arrives.
    pub quarantined: bool,
    /// False for records loaded from the fleet config that no worker has
    /// claimed yet.
    pub registered: bool,
}

impl WorkerRecord {
    pub fn occupied(&self) -> usize {
        self.active.values().sum()
    }

    pub fn available(&self) -> usize {
        self.max_qubits - self.occupied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingCircuit {
    pub circuit_id: String,
    pub demand: usize,
    pub client_id: String,
    pub enqueued_at: Duration,
    /// Submission order, kept across re-enqueues.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum JobState {
    Queued,
    Assigned(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Job {
    demand: usize,
    client_id: String,
    seq: u64,
    state: JobState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub circuit_id: String,
    pub worker_id: String,
    pub client_id: String,
    pub demand: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AssignOutcome {
    Assigned(String),
    Queued,
    /// The id already has a stored result.
    Cached(f64),
    /// The id is queued or executing.
    DuplicateInFlight,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeartbeatOutcome {
    Updated,
    Quarantined,
    UnknownWorker,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompleteOutcome {
    /// First result for the circuit; forward it to `client_id`.
    Delivered { client_id: String },
    /// The circuit already has a result; nothing changed.
    AlreadyComplete,
    /// The circuit is unknown or assigned elsewhere; dropped.
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Register,
    Heartbeat,
    Quarantine,
    Assign,
    Queue,
    Complete,
    Fail,
    Evict,
    Requeue,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Register => "register",
            EventKind::Heartbeat => "heartbeat",
            EventKind::Quarantine => "quarantine",
            EventKind::Assign => "assign",
            EventKind::Queue => "queue",
            EventKind::Complete => "complete",
            EventKind::Fail => "fail",
            EventKind::Evict => "evict",
            EventKind::Requeue => "requeue",
        }
    }
}

/// One state transition, with the affected worker's ledger afterwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub at: Duration,
    pub kind: EventKind,
    pub worker_id: Option<String>,
    pub circuit_id: Option<String>,
    pub occupied: Option<usize>,
    pub available: Option<usize>,
}

impl fmt::Display for Event {
    /// `<micros> <kind> worker=<id|-> circuit=<id|-> or=<n|-> ar=<n|->`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn opt<T: fmt::Display>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "-".to_string(), |x| x.to_string())
        }
        write!(
            f,
            "{} {} worker={} circuit={} or={} ar={}",
            self.at.as_micros(),
            self.kind.as_str(),
            opt(&self.worker_id),
            opt(&self.circuit_id),
            opt(&self.occupied),
            opt(&self.available)
        )
    }
}

#[derive(Debug, Clone)]
pub struct CoManager {
    config: ManagerConfig,
    workers: BTreeMap<String, WorkerRecord>,
    queue: VecDeque<PendingCircuit>,
    jobs: BTreeMap<String, Job>,
    results: BTreeMap<String, f64>,
    next_seq: u64,
    events: Vec<Event>,
    placements: Vec<Placement>,
}

impl CoManager {
    pub fn new(config: ManagerConfig) -> Self {
        CoManager {
            config,
            workers: BTreeMap::new(),
            queue: VecDeque::new(),
            jobs: BTreeMap::new(),
            results: BTreeMap::new(),
            next_seq: 0,
            events: Vec::new(),
            placements: Vec::new(),
        }
    }

    /// Registry pre-populated from a fleet config. Static records start
    /// with `OR = 0` and `last_heartbeat = now`.
    pub fn init(fleet: &FleetConfig, config: ManagerConfig, now: Duration) -> Result<Self, ManagerError> {
        let mut m = CoManager::new(config);
        for w in &fleet.workers {
            if w.max_qubits == 0 {
                return Err(ManagerError::Argument(format!("worker {} has zero qubits", w.id)));
            }
            if m.workers.contains_key(&w.id) {
                return Err(ManagerError::DuplicateConfigId(w.id.clone()));
            }
            m.workers.insert(
                w.id.clone(),
                WorkerRecord {
                    worker_id: w.id.clone(),
                    max_qubits: w.max_qubits,
                    active: BTreeMap::new(),
                    cru: 0.0,
                    cru_at: now,
                    last_heartbeat: now,
                    quarantined: false,
                    registered: false,
                },
            );
        }
        Ok(m)
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    pub fn heartbeat_period(&self) -> Duration {
        self.config.heartbeat_period
    }

    pub fn worker(&self, id: &str) -> Option<&WorkerRecord> {
        self.workers.get(id)
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerRecord> {
        self.workers.values()
    }

    pub fn queue(&self) -> &VecDeque<PendingCircuit> {
        &self.queue
    }

    pub fn result(&self, circuit_id: &str) -> Option<f64> {
        self.results.get(circuit_id).copied()
    }

    /// Worker currently holding `circuit_id`, if it is assigned.
    pub fn assignee(&self, circuit_id: &str) -> Option<&str> {
        match &self.jobs.get(circuit_id)?.state {
            JobState::Assigned(w) => Some(w),
            JobState::Queued => None,
        }
    }

    pub fn in_flight(&self) -> usize {
        self.jobs.len()
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn take_placements(&mut self) -> Vec<Placement> {
        std::mem::take(&mut self.placements)
    }

    fn log(&mut self, at: Duration, kind: EventKind, worker: Option<&str>, circuit: Option<&str>) {
        let rec = worker.and_then(|w| self.workers.get(w));
        self.events.push(Event {
            at,
            kind,
            worker_id: worker.map(str::to_owned),
            circuit_id: circuit.map(str::to_owned),
            occupied: rec.map(WorkerRecord::occupied),
            available: rec.map(WorkerRecord::available),
        });
    }

    pub fn register_worker(
        &mut self,
        worker_id: &str,
        max_qubits: usize,
        cru: f64,
        now: Duration,
    ) -> Result<(), ManagerError> {
        if max_qubits == 0 || worker_id.is_empty() {
            return Err(ManagerError::Argument(
                "worker needs an id and at least one qubit".into(),
            ));
        }
        match self.workers.get_mut(worker_id) {
            Some(rec) if rec.registered => return Err(ManagerError::Conflict(worker_id.to_owned())),
            Some(rec) => {
                // claim a static record; its ledger (if any) carries over
                rec.registered = true;
                rec.max_qubits = max_qubits;
                rec.cru = cru;
                rec.cru_at = now;
                rec.last_heartbeat = now;
                rec.quarantined = rec.occupied() > max_qubits;
            }
            None => {
                self.workers.insert(
                    worker_id.to_owned(),
                    WorkerRecord {
                        worker_id: worker_id.to_owned(),
                        max_qubits,
                        active: BTreeMap::new(),
                        cru,
                        cru_at: now,
                        last_heartbeat: now,
                        quarantined: false,
                        registered: true,
                    },
                );
            }
        }
        self.log(now, EventKind::Register, Some(worker_id), None);
        self.rescan(now);
        Ok(())
    }

    /// Rebuilds the worker's ledger from its report. Assignments the report
    /// does not show yet (still in transit to the worker) stay in the
    /// ledger. A report that cannot fit in `MR` leaves the previous ledger
    /// in place and quarantines the worker.
    pub fn on_heartbeat(
        &mut self,
        worker_id: &str,
        active: &[(String, usize)],
        cru: f64,
        now: Duration,
    ) -> HeartbeatOutcome {
        let Some(rec) = self.workers.get(worker_id) else {
            log::warn!("heartbeat from unknown worker {worker_id} ignored");
            return HeartbeatOutcome::UnknownWorker;
        };
        let mut ledger: BTreeMap<String, usize> = active.iter().cloned().collect();
        for (id, job) in &self.jobs {
            if job.state == JobState::Assigned(worker_id.to_owned()) {
                ledger.entry(id.clone()).or_insert(job.demand);
            }
        }
        let reported: usize = active.iter().map(|(_, d)| d).sum();
        let total: usize = ledger.values().sum();
        let consistent = reported <= rec.max_qubits && total <= rec.max_qubits;
        let rec = self.workers.get_mut(worker_id).expect("checked above");
        rec.cru = cru;
        rec.cru_at = now;
        rec.last_heartbeat = now;
        rec.registered = true;
        let outcome = if consistent {
            rec.active = ledger;
            rec.quarantined = false;
            self.log(now, EventKind::Heartbeat, Some(worker_id), None);
            HeartbeatOutcome::Updated
        } else {
            log::error!(
                "worker {worker_id} reported {reported} (ledger {total}) busy qubits on MR {}; quarantined",
                rec.max_qubits
            );
            rec.quarantined = true;
            self.log(now, EventKind::Quarantine, Some(worker_id), None);
            HeartbeatOutcome::Quarantined
        };
        self.rescan(now);
        outcome
    }

    fn fits(&self, rec: &WorkerRecord, demand: usize) -> bool {
        let ar = rec.available();
        if self.config.allow_exact_fit {
            ar >= demand
        } else {
            ar > demand
        }
    }

    /// Candidate workers for `demand` in selection order: fresh CRU before
    /// stale (older than 2·P), then ascending CRU, then worker id.
    pub fn candidates(&self, demand: usize, now: Duration) -> Vec<&WorkerRecord> {
        let stale_after = self.config.heartbeat_period * 2;
        let mut c: Vec<&WorkerRecord> = self
            .workers
            .values()
            .filter(|w| !w.quarantined && self.fits(w, demand))
            .collect();
        c.sort_by(|a, b| {
            let sa = now.saturating_sub(a.cru_at) > stale_after;
            let sb = now.saturating_sub(b.cru_at) > stale_after;
            sa.cmp(&sb)
                .then(a.cru.total_cmp(&b.cru))
                .then_with(|| a.worker_id.cmp(&b.worker_id))
        });
        c
    }

    fn place(&mut self, circuit_id: &str, now: Duration) -> Option<String> {
        let job = self.jobs.get(circuit_id)?;
        let demand = job.demand;
        let worker = self.candidates(demand, now).first()?.worker_id.clone();
        let client_id = job.client_id.clone();
        self.workers
            .get_mut(&worker)
            .expect("candidate exists")
            .active
            .insert(circuit_id.to_owned(), demand);
        self.jobs.get_mut(circuit_id).expect("job exists").state = JobState::Assigned(worker.clone());
        self.placements.push(Placement {
            circuit_id: circuit_id.to_owned(),
            worker_id: worker.clone(),
            client_id,
            demand,
        });
        self.log(now, EventKind::Assign, Some(&worker), Some(circuit_id));
        Some(worker)
    }

    /// Places a new circuit or queues it.
    pub fn assign(
        &mut self,
        circuit_id: &str,
        demand: usize,
        client_id: &str,
        now: Duration,
    ) -> Result<AssignOutcome, ManagerError> {
        if demand == 0 || circuit_id.is_empty() {
            return Err(ManagerError::Argument(
                "circuit needs an id and a positive demand".into(),
            ));
        }
        if let Some(f) = self.results.get(circuit_id) {
            return Ok(AssignOutcome::Cached(*f));
        }
        if self.jobs.contains_key(circuit_id) {
            return Ok(AssignOutcome::DuplicateInFlight);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.jobs.insert(
            circuit_id.to_owned(),
            Job {
                demand,
                client_id: client_id.to_owned(),
                seq,
                state: JobState::Queued,
            },
        );
        // Earlier queued circuits keep priority only through rescans; a new
        // arrival that fits right now is placed immediately.
        if let Some(w) = self.place(circuit_id, now) {
            return Ok(AssignOutcome::Assigned(w));
        }
        self.queue.push_back(PendingCircuit {
            circuit_id: circuit_id.to_owned(),
            demand,
            client_id: client_id.to_owned(),
            enqueued_at: now,
            seq,
        });
        self.log(now, EventKind::Queue, None, Some(circuit_id));
        Ok(AssignOutcome::Queued)
    }

    fn release(&mut self, circuit_id: &str, worker_id: &str) {
        if let Some(rec) = self.workers.get_mut(worker_id) {
            rec.active.remove(circuit_id);
        }
    }

    pub fn complete(&mut self, circuit_id: &str, worker_id: &str, fidelity: f64, now: Duration) -> CompleteOutcome {
        if self.results.contains_key(circuit_id) {
            return CompleteOutcome::AlreadyComplete;
        }
        let assigned_here = matches!(
            self.jobs.get(circuit_id),
            Some(Job { state: JobState::Assigned(w), .. }) if w == worker_id
        );
        if !assigned_here {
            log::warn!("result for {circuit_id} from {worker_id} does not match an assignment; dropped");
            return CompleteOutcome::Dropped;
        }
        let job = self.jobs.remove(circuit_id).expect("checked above");
        self.results.insert(circuit_id.to_owned(), fidelity);
        self.release(circuit_id, worker_id);
        self.log(now, EventKind::Complete, Some(worker_id), Some(circuit_id));
        self.rescan(now);
        CompleteOutcome::Delivered {
            client_id: job.client_id,
        }
    }

    /// The assignee could not execute the circuit. The circuit leaves the
    /// manager; the owning client decides whether to resubmit.
    pub fn fail(&mut self, circuit_id: &str, worker_id: &str, now: Duration) -> Option<String> {
        let assigned_here = matches!(
            self.jobs.get(circuit_id),
            Some(Job { state: JobState::Assigned(w), .. }) if w == worker_id
        );
        if !assigned_here {
            return None;
        }
        let job = self.jobs.remove(circuit_id).expect("checked above");
        self.release(circuit_id, worker_id);
        self.log(now, EventKind::Fail, Some(worker_id), Some(circuit_id));
        self.rescan(now);
        Some(job.client_id)
    }

    /// Evicts every worker silent for more than `3·P` and puts its
    /// circuits back at the head of the queue in submission order.
    pub fn detect_failures(&mut self, now: Duration) -> Vec<String> {
        let limit = self.config.heartbeat_period * 3;
        let dead: Vec<String> = self
            .workers
            .values()
            .filter(|w| now.saturating_sub(w.last_heartbeat) > limit)
            .map(|w| w.worker_id.clone())
            .collect();
        if dead.is_empty() {
            return dead;
        }
        let mut orphans = Vec::new();
        for id in &dead {
            self.log(now, EventKind::Evict, Some(id), None);
            self.workers.remove(id);
            for (cid, job) in self.jobs.iter_mut() {
                if job.state == JobState::Assigned(id.clone()) {
                    job.state = JobState::Queued;
                    orphans.push(PendingCircuit {
                        circuit_id: cid.clone(),
                        demand: job.demand,
                        client_id: job.client_id.clone(),
                        enqueued_at: now,
                        seq: job.seq,
                    });
                }
            }
        }
        orphans.sort_by_key(|p| p.seq);
        for p in &orphans {
            self.log(now, EventKind::Requeue, None, Some(&p.circuit_id));
        }
        for p in orphans.into_iter().rev() {
            self.queue.push_front(p);
        }
        self.rescan(now);
        dead
    }

    /// Walks the queue front to back, placing every circuit that fits.
    pub fn rescan(&mut self, now: Duration) {
        let mut i = 0;
        while i < self.queue.len() {
            let id = self.queue[i].circuit_id.clone();
            if self.place(&id, now).is_some() {
                self.queue.remove(i);
            } else {
                i += 1;
            }
        }
    }

    /// Checks every ledger invariant; used by tests after each transition.
    pub fn audit(&self) -> Result<(), String> {
        for w in self.workers.values() {
            let or = w.occupied();
            if or > w.max_qubits {
                return Err(format!("{}: OR {or} > MR {}", w.worker_id, w.max_qubits));
            }
            if w.available() + or != w.max_qubits {
                return Err(format!("{}: AR != MR - OR", w.worker_id));
            }
        }
        let mut queued = BTreeSet::new();
        for p in &self.queue {
            if !queued.insert(p.circuit_id.as_str()) {
                return Err(format!("{} queued twice", p.circuit_id));
            }
            match self.jobs.get(&p.circuit_id) {
                Some(Job {
                    state: JobState::Queued,
                    ..
                }) => {}
                _ => return Err(format!("{} queued but not tracked as queued", p.circuit_id)),
            }
        }
        for (id, job) in &self.jobs {
            match &job.state {
                JobState::Queued if !queued.contains(id.as_str()) => {
                    return Err(format!("{id} tracked as queued but missing from the queue"))
                }
                JobState::Assigned(w) => {
                    let rec = self
                        .workers
                        .get(w)
                        .ok_or_else(|| format!("{id} assigned to missing worker {w}"))?;
                    if rec.active.get(id) != Some(&job.demand) {
                        return Err(format!("{id} missing from {w}'s ledger"));
                    }
                }
                _ => {}
            }
            if self.results.contains_key(id) {
                return Err(format!("{id} both in flight and completed"));
            }
        }
        Ok(())
    }
}
