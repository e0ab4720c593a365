//! Discrete-event simulation of a co-manager and a simulated fleet on a
//! virtual clock.
//!
//! Workers follow scripted CRU traces, may crash, skip heartbeats or send
//! inconsistent reports, and execute circuits for fixed service times.
//! After every manager transition the simulation audits the ledger and
//! re-derives placement, selection and eviction decisions independently of
//! the manager; any disagreement is recorded in [`SimReport::violations`].

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::state::{AssignOutcome, CoManager, CompleteOutcome, ManagerConfig, WorkerRecord};
use crate::worker::CruTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct SimWorker {
    pub worker_id: String,
    pub max_qubits: usize,
    pub join_at: Duration,
    pub cru: CruTrace,
    pub crash_at: Option<Duration>,
    /// Delay before a crashed or evicted worker registers again.
    pub rejoin_after: Option<Duration>,
    /// Heartbeat sequence numbers (from 1) that are never sent.
    pub skipped_heartbeats: Vec<u64>,
    /// Heartbeat sequence numbers that report a phantom circuit too large
    /// for the worker.
    pub misreports: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimCircuit {
    pub circuit_id: String,
    pub demand: usize,
    pub client_id: String,
    pub submit_at: Duration,
    pub service: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub period: Duration,
    pub allow_exact_fit: bool,
    /// Time for an assignment to reach the worker.
    pub latency: Duration,
    pub workers: Vec<SimWorker>,
    pub circuits: Vec<SimCircuit>,
    /// Extra submissions of already submitted ids, at the given times.
    pub resubmits: Vec<(usize, Duration)>,
    /// Simulation stops here even if circuits remain.
    pub horizon: Duration,
}

fn ms(v: u64) -> Duration {
    Duration::from_millis(v)
}

impl Scenario {
    /// Random scenario. Worker `w0` never fails and has room for every
    /// circuit, so every circuit must eventually complete.
    pub fn random(seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let period = ms([200, 500, 1000, 5000][rng.gen_range(0..4)]);
        let p = period.as_millis() as u64;
        let allow_exact_fit = rng.gen_bool(0.2);
        let n_workers = rng.gen_range(1..=5);
        let cru_levels = [0.0, 0.1, 0.1, 0.2, 0.5, 0.9];
        let mut workers = Vec::new();
        for i in 0..n_workers {
            let immortal = i == 0;
            let max_qubits = if immortal { 20 } else { rng.gen_range(3..=20) };
            let mut points = vec![(0.0, cru_levels[rng.gen_range(0..cru_levels.len())])];
            for _ in 0..rng.gen_range(0..4) {
                let t = rng.gen_range(0..20 * p) as f64 / 1000.0;
                points.push((t, cru_levels[rng.gen_range(0..cru_levels.len())]));
            }
            let crash_at = (!immortal && rng.gen_bool(0.35)).then(|| ms(rng.gen_range(0..15 * p)));
            let rejoin_after = (!immortal && rng.gen_bool(0.5)).then(|| ms(rng.gen_range(p / 2..6 * p)));
            let mut skipped = Vec::new();
            let mut misreports = Vec::new();
            if !immortal {
                for k in 1..=30u64 {
                    if rng.gen_bool(0.08) {
                        skipped.push(k);
                    } else if rng.gen_bool(0.03) {
                        misreports.push(k);
                    }
                }
                if rng.gen_bool(0.15) {
                    // a long silence that must end in eviction
                    let start = rng.gen_range(1..20);
                    skipped.extend(start..start + 4);
                }
            }
            workers.push(SimWorker {
                worker_id: format!("w{i}"),
                max_qubits,
                join_at: if immortal && rng.gen_bool(0.5) {
                    Duration::ZERO
                } else {
                    ms(rng.gen_range(0..3 * p))
                },
                cru: CruTrace::new(points).expect("levels are fractions"),
                crash_at,
                rejoin_after,
                skipped_heartbeats: skipped,
                misreports,
            });
        }
        let n_circuits = rng.gen_range(1..=60);
        let circuits: Vec<SimCircuit> = (0..n_circuits)
            .map(|i| SimCircuit {
                circuit_id: format!("c{i:03}"),
                demand: rng.gen_range(1..=12),
                client_id: format!("client{}", rng.gen_range(0..3)),
                submit_at: ms(rng.gen_range(0..8 * p)),
                service: ms(rng.gen_range(p / 10..2 * p)),
            })
            .collect();
        let resubmits = (0..rng.gen_range(0..5))
            .map(|_| (rng.gen_range(0..n_circuits), ms(rng.gen_range(0..20 * p))))
            .collect();
        Scenario {
            period,
            allow_exact_fit,
            latency: ms(rng.gen_range(0..=p / 20)),
            workers,
            circuits,
            resubmits,
            horizon: period * 400,
        }
    }

    /// Same scenario with every CRU value multiplied by `k` (`0 < k ≤ 1`).
    pub fn scale_cru(&self, k: f64) -> Scenario {
        let mut s = self.clone();
        for w in &mut s.workers {
            let pts = w.cru.points().iter().map(|&(t, v)| (t, v * k)).collect();
            w.cru = CruTrace::new(pts).expect("scaled values stay fractions");
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimReport {
    /// Manager event log, one line per transition record.
    pub log: Vec<String>,
    /// `(time, circuit, worker)` in decision order.
    pub assignments: Vec<(Duration, String, String)>,
    /// Results delivered to clients per circuit (must be exactly one).
    pub deliveries: BTreeMap<String, usize>,
    pub evictions: Vec<(Duration, String)>,
    pub quarantines: usize,
    pub transitions: usize,
    pub violations: Vec<String>,
    pub finished_at: Duration,
    pub unfinished: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Ev {
    Join(usize),
    Heartbeat { w: usize, life: u64, seq: u64 },
    Submit(usize),
    Deliver { w: usize, life: u64, circuit: usize },
    Finish { w: usize, life: u64, circuit: usize },
    Crash(usize),
    Tick,
    Probe,
}

#[derive(Debug, PartialEq, Eq)]
struct Scheduled {
    at: Duration,
    seq: u64,
    ev: Ev,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        // min-heap on (time, insertion order)
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
struct Node {
    life: u64,
    alive: bool,
    crashed: bool,
    running: BTreeMap<usize, usize>,
    waiting: VecDeque<usize>,
}

struct Sim<'a> {
    sc: &'a Scenario,
    mgr: CoManager,
    now: Duration,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    nodes: Vec<Node>,
    index: BTreeMap<String, usize>,
    circuit_index: BTreeMap<String, usize>,
    /// Manager-side time of the last accepted registration or heartbeat.
    last_seen: BTreeMap<String, Duration>,
    report: SimReport,
}

fn fidelity_for(id: &str) -> f64 {
    0.5 + (crate::trainer::fnv1a(id.as_bytes()) % 1000) as f64 / 2000.0
}

impl<'a> Sim<'a> {
    fn push(&mut self, at: Duration, ev: Ev) {
        self.seq += 1;
        self.heap.push(Scheduled { at, seq: self.seq, ev });
    }

    fn violation(&mut self, msg: String) {
        if self.report.violations.len() < 50 {
            self.report.violations.push(format!("t={:?}: {msg}", self.now));
        }
    }

    fn fits(&self, rec: &WorkerRecord, occupied: usize, demand: usize) -> bool {
        let ar = rec.max_qubits as i64 - occupied as i64;
        if self.sc.allow_exact_fit {
            ar >= demand as i64
        } else {
            ar > demand as i64
        }
    }

    /// Audits the manager after a transition and replays its placements
    /// against an independently derived selection.
    fn after_transition(&mut self) {
        self.report.transitions += 1;
        if let Err(e) = self.mgr.audit() {
            self.violation(format!("audit: {e}"));
        }
        let placements = self.mgr.take_placements();
        let stale_after = self.sc.period * 2;
        let mut occupied: BTreeMap<String, usize> = self
            .mgr
            .workers()
            .map(|w| (w.worker_id.clone(), w.occupied()))
            .collect();
        for p in &placements {
            *occupied.get_mut(&p.worker_id).expect("placed on a known worker") -= p.demand;
        }
        for p in &placements {
            let key = |w: &WorkerRecord| {
                (
                    self.now.saturating_sub(w.cru_at) > stale_after,
                    w.cru,
                    w.worker_id.clone(),
                )
            };
            let best = self
                .mgr
                .workers()
                .filter(|w| !w.quarantined && self.fits(w, occupied[&w.worker_id], p.demand))
                .min_by(|a, b| {
                    let (ka, kb) = (key(a), key(b));
                    ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.cmp(&kb.2))
                })
                .map(|w| w.worker_id.clone());
            match best {
                Some(b) if b == p.worker_id => {}
                other => self.violation(format!(
                    "{} (demand {}) placed on {} but selection rule gives {other:?}",
                    p.circuit_id, p.demand, p.worker_id
                )),
            }
            *occupied.get_mut(&p.worker_id).expect("known worker") += p.demand;
            self.report
                .assignments
                .push((self.now, p.circuit_id.clone(), p.worker_id.clone()));
            let w = self.index[&p.worker_id];
            let (life, circuit) = (self.nodes[w].life, self.circuit_index[&p.circuit_id]);
            self.push(self.now + self.sc.latency, Ev::Deliver { w, life, circuit });
        }
        let stranded = self.mgr.queue().iter().find_map(|q| {
            self.mgr
                .workers()
                .find(|w| !w.quarantined && self.fits(w, w.occupied(), q.demand))
                .map(|w| format!("{} left queued although {} fits it", q.circuit_id, w.worker_id))
        });
        if let Some(msg) = stranded {
            self.violation(msg);
        }
        for e in self.mgr.take_events() {
            self.report.log.push(e.to_string());
        }
    }

    fn detect(&mut self) {
        let limit = self.sc.period * 3;
        let mut expected: Vec<String> = self
            .last_seen
            .iter()
            .filter(|(_, &t)| self.now.saturating_sub(t) > limit)
            .map(|(w, _)| w.clone())
            .collect();
        let mut evicted = self.mgr.detect_failures(self.now);
        expected.sort();
        evicted.sort();
        if evicted != expected {
            self.violation(format!("evicted {evicted:?}, silence rule gives {expected:?}"));
        }
        for id in &evicted {
            self.last_seen.remove(id);
            self.report.evictions.push((self.now, id.clone()));
            let w = self.index[id];
            if self.nodes[w].alive {
                // the worker sees its connection drop and restarts
                self.stop_node(w);
                let rejoin = self.sc.workers[w].rejoin_after;
                if let Some(d) = rejoin {
                    self.push(self.now + d, Ev::Join(w));
                }
            }
        }
        self.after_transition();
    }

    fn stop_node(&mut self, w: usize) {
        let n = &mut self.nodes[w];
        n.alive = false;
        n.life += 1;
        n.running.clear();
        n.waiting.clear();
    }

    fn start_waiting(&mut self, w: usize) {
        let max = self.sc.workers[w].max_qubits;
        while let Some(&c) = self.nodes[w].waiting.front() {
            let demand = self.sc.circuits[c].demand;
            if self.nodes[w].running.values().sum::<usize>() + demand > max {
                break;
            }
            self.nodes[w].waiting.pop_front();
            self.nodes[w].running.insert(c, demand);
            let life = self.nodes[w].life;
            self.push(
                self.now + self.sc.circuits[c].service,
                Ev::Finish { w, life, circuit: c },
            );
        }
    }

    fn step(&mut self, ev: Ev) {
        let p = self.sc.period;
        match ev {
            Ev::Join(w) => {
                if self.nodes[w].alive || self.nodes[w].crashed && self.sc.workers[w].rejoin_after.is_none() {
                    return;
                }
                let spec = &self.sc.workers[w];
                let cru = spec.cru.value_at(self.now.as_secs_f64());
                match self
                    .mgr
                    .register_worker(&spec.worker_id, spec.max_qubits, cru, self.now)
                {
                    Ok(()) => {
                        self.last_seen.insert(spec.worker_id.clone(), self.now);
                        let n = &mut self.nodes[w];
                        n.alive = true;
                        n.crashed = false;
                        let life = n.life;
                        self.push(self.now + p, Ev::Heartbeat { w, life, seq: 1 });
                        self.push(self.now + p * 3, Ev::Probe);
                        self.push(self.now + p * 3 + Duration::from_micros(1), Ev::Probe);
                    }
                    Err(_) => self.push(self.now + p, Ev::Join(w)),
                }
                self.after_transition();
            }
            Ev::Heartbeat { w, life, seq } => {
                if !self.nodes[w].alive || self.nodes[w].life != life {
                    return;
                }
                self.push(self.now + p, Ev::Heartbeat { w, life, seq: seq + 1 });
                let spec = &self.sc.workers[w];
                if spec.skipped_heartbeats.contains(&seq) {
                    return;
                }
                let mut report: Vec<(String, usize)> = self.nodes[w]
                    .running
                    .iter()
                    .map(|(&c, &d)| (self.sc.circuits[c].circuit_id.clone(), d))
                    .collect();
                if spec.misreports.contains(&seq) {
                    report.push((format!("phantom-{seq}"), spec.max_qubits + 1));
                }
                let id = spec.worker_id.clone();
                let cru = spec.cru.value_at(self.now.as_secs_f64());
                self.mgr.on_heartbeat(&id, &report, cru, self.now);
                if let Some(r) = self.mgr.worker(&id) {
                    if r.quarantined {
                        self.report.quarantines += 1;
                    }
                    self.last_seen.insert(id, self.now);
                }
                self.push(self.now + p * 3, Ev::Probe);
                self.push(self.now + p * 3 + Duration::from_micros(1), Ev::Probe);
                self.after_transition();
            }
            Ev::Submit(c) => {
                let spec = &self.sc.circuits[c];
                let outcome = self
                    .mgr
                    .assign(&spec.circuit_id, spec.demand, &spec.client_id, self.now)
                    .expect("scenario circuits are well formed");
                if let AssignOutcome::Cached(f) = outcome {
                    if f != fidelity_for(&spec.circuit_id) {
                        let msg = format!("cached result for {} differs", spec.circuit_id);
                        self.violation(msg);
                    }
                }
                self.after_transition();
            }
            Ev::Deliver { w, life, circuit } => {
                if self.nodes[w].alive && self.nodes[w].life == life {
                    self.nodes[w].waiting.push_back(circuit);
                    self.start_waiting(w);
                }
            }
            Ev::Finish { w, life, circuit } => {
                if !self.nodes[w].alive || self.nodes[w].life != life {
                    return;
                }
                self.nodes[w].running.remove(&circuit);
                let id = self.sc.circuits[circuit].circuit_id.clone();
                let wid = self.sc.workers[w].worker_id.clone();
                if let CompleteOutcome::Delivered { .. } = self.mgr.complete(&id, &wid, fidelity_for(&id), self.now) {
                    *self.report.deliveries.entry(id).or_default() += 1;
                }
                self.start_waiting(w);
                self.after_transition();
            }
            Ev::Crash(w) => {
                if self.nodes[w].alive {
                    self.stop_node(w);
                    self.nodes[w].crashed = true;
                    if let Some(d) = self.sc.workers[w].rejoin_after {
                        self.push(self.now + d, Ev::Join(w));
                    }
                }
            }
            Ev::Tick => {
                self.detect();
                self.push(self.now + p / 4, Ev::Tick);
            }
            Ev::Probe => self.detect(),
        }
    }

    fn done(&self) -> bool {
        self.sc
            .circuits
            .iter()
            .all(|c| self.report.deliveries.contains_key(&c.circuit_id))
    }
}

/// Runs a scenario to completion (or its horizon).
pub fn run(sc: &Scenario) -> SimReport {
    let config = ManagerConfig {
        heartbeat_period: sc.period,
        allow_exact_fit: sc.allow_exact_fit,
    };
    let mut sim = Sim {
        sc,
        mgr: CoManager::new(config),
        now: Duration::ZERO,
        heap: BinaryHeap::new(),
        seq: 0,
        nodes: (0..sc.workers.len()).map(|_| Node::default()).collect(),
        index: sc
            .workers
            .iter()
            .enumerate()
            .map(|(i, w)| (w.worker_id.clone(), i))
            .collect(),
        circuit_index: sc
            .circuits
            .iter()
            .enumerate()
            .map(|(i, c)| (c.circuit_id.clone(), i))
            .collect(),
        last_seen: BTreeMap::new(),
        report: SimReport::default(),
    };
    for (i, w) in sc.workers.iter().enumerate() {
        sim.push(w.join_at, Ev::Join(i));
        if let Some(t) = w.crash_at {
            sim.push(t, Ev::Crash(i));
        }
    }
    for (i, c) in sc.circuits.iter().enumerate() {
        sim.push(c.submit_at, Ev::Submit(i));
    }
    for &(i, t) in &sc.resubmits {
        sim.push(t, Ev::Submit(i));
    }
    sim.push(sc.period / 4, Ev::Tick);

    while let Some(s) = sim.heap.pop() {
        if s.at > sc.horizon {
            break;
        }
        sim.now = s.at;
        sim.step(s.ev);
        let resubmits_left = sim.heap.iter().any(|e| matches!(e.ev, Ev::Submit(_)));
        if sim.done() && !resubmits_left {
            break;
        }
    }
    let mut report = sim.report;
    report.finished_at = sim.now;
    for c in &sc.circuits {
        match report.deliveries.get(&c.circuit_id) {
            None => report.unfinished.push(c.circuit_id.clone()),
            Some(&n) if n > 1 => report.violations.push(format!("{} delivered {n} times", c.circuit_id)),
            _ => {}
        }
    }
    report
}
