//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails. Pass criterion numbers as arguments to run a subset.
//!
//! Criterion 5 needs at least four cores; on smaller hosts it is reported as
//! NOT EVALUATED unless `DQULEARN_FORCE_SCALING=1` is set.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dqulearn::circuit::{LayerSpec, LogicalCircuit};
use dqulearn::client::{RemoteConfig, RemoteDispatcher};
use dqulearn::comanager::sim::{self, Scenario, SimCircuit, SimWorker};
use dqulearn::comanager::{ManagerConfig, ManagerHandle, ServerConfig};
use dqulearn::dataset::{synthetic_bars, Dataset};
use dqulearn::protocol::{decode_frame, ActiveCircuit, ErrorCode, Message, SubmitStatus};
use dqulearn::statevector::{swap_test_fidelity, StateVector};
use dqulearn::trainer::bank::{analyze, build_circuit_bank, Model, PreparedSample};
use dqulearn::trainer::{DispatchError, Dispatcher, EpochMetrics, Head, LocalDispatcher, TrainConfig, Trainer};
use dqulearn::worker::{CruTrace, WorkerConfig, WorkerHandle};

enum Verdict {
    Pass(String),
    Fail(String),
    NotEvaluated(String),
}

type Check = fn() -> Verdict;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn main() {
    let criteria: [(usize, &str, Duration, Check); 9] = [
        (
            1,
            "swap-test oracle equivalence",
            Duration::from_secs(5),
            swap_test_oracle,
        ),
        (
            2,
            "parameter shift vs finite differences",
            Duration::from_secs(60),
            shift_vs_differences,
        ),
        (
            3,
            "scheduler conformance",
            Duration::from_secs(30),
            scheduler_conformance,
        ),
        (4, "circuit-count bookkeeping", Duration::from_secs(60), circuit_counts),
        (5, "worker-scaling trend", Duration::from_secs(600), worker_scaling),
        (
            6,
            "multi-tenant throughput gain",
            Duration::from_secs(600),
            multi_tenant_gain,
        ),
        (7, "fault tolerance", Duration::from_secs(300), fault_tolerance),
        (8, "learning sanity", Duration::from_secs(300), learning_sanity),
        (9, "protocol robustness", Duration::from_secs(30), protocol_robustness),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, budget, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let verdict = match verdict {
            Verdict::Pass(d) if elapsed > budget => {
                Verdict::Fail(format!("{d}; exceeded the {}s budget", budget.as_secs()))
            }
            v => v,
        };
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::NotEvaluated(d) => ("NOT EVALUATED", d),
        };
        println!("[{tag}] {n} {name}: {detail} ({:.2}s)", elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn random_state(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    let amps: Vec<Complex64> = (0..1usize << n)
        .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
        .collect();
    let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    amps.into_iter().map(|a| a / norm).collect()
}

fn swap_test_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for k in 0..200 {
        let n = 1 + k % 4;
        let a = random_state(&mut rng, n);
        let b = random_state(&mut rng, n);
        let overlap: Complex64 = a.iter().zip(&b).map(|(x, y)| x.conj() * y).sum();
        let expected = 0.5 + 0.5 * overlap.norm_sqr();
        let psi = StateVector::from_amplitudes(a).unwrap();
        let phi = StateVector::from_amplitudes(b).unwrap();
        let got = swap_test_fidelity(&psi, &phi, None, None).unwrap();
        worst = worst.max((got - expected).abs());
    }
    check(worst <= 1e-10, format!("200 pairs, max deviation {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

type Mat2 = [[Complex64; 2]; 2];
type Mat4 = [[Complex64; 4]; 4];

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn ry(t: f64) -> Mat2 {
    let (co, s) = ((t / 2.0).cos(), (t / 2.0).sin());
    [[c(co), c(-s)], [c(s), c(co)]]
}

fn rz(t: f64) -> Mat2 {
    [
        [Complex64::from_polar(1.0, -t / 2.0), c(0.0)],
        [c(0.0), Complex64::from_polar(1.0, t / 2.0)],
    ]
}

/// Operator `a` on local qubit 0 (low bit) and `b` on local qubit 1.
fn kron(a: &Mat2, b: &Mat2) -> Mat4 {
    let mut m = [[c(0.0); 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = b[i >> 1][j >> 1] * a[i & 1][j & 1];
        }
    }
    m
}

fn identity2() -> Mat2 {
    [[c(1.0), c(0.0)], [c(0.0), c(1.0)]]
}

/// `exp(-iθ/2 · P⊗P)`.
fn pauli_pair(p: &Mat2, t: f64) -> Mat4 {
    let pp = kron(p, p);
    let mut m = [[c(0.0); 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let id = if i == j { c((t / 2.0).cos()) } else { c(0.0) };
            m[i][j] = id - Complex64::i() * (t / 2.0).sin() * pp[i][j];
        }
    }
    m
}

/// Rotation on local qubit 1 controlled by local qubit 0.
fn controlled(r: &Mat2) -> Mat4 {
    let mut m = [[c(0.0); 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            if i & 1 == 0 || j & 1 == 0 {
                m[i][j] = if i == j { c(1.0) } else { c(0.0) };
            } else {
                m[i][j] = r[i >> 1][j >> 1];
            }
        }
    }
    m
}

fn apply4(m: &Mat4, v: [Complex64; 4]) -> [Complex64; 4] {
    let mut out = [c(0.0); 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i] += m[i][j] * v[j];
        }
    }
    out
}

/// Independent fidelity of a 5-qubit base circuit: two data qubits, two
/// model qubits.
fn oracle_fidelity(angles: &[f64], theta: &[f64], n_layers: usize) -> f64 {
    let start = [c(1.0), c(0.0), c(0.0), c(0.0)];
    let id = identity2();
    let mut psi = start;
    for q in 0..2 {
        let (a, b) = (angles[2 * q], angles[2 * q + 1]);
        let lift = |m: &Mat2| if q == 0 { kron(m, &id) } else { kron(&id, m) };
        psi = apply4(&lift(&ry(a)), psi);
        psi = apply4(&lift(&rz(b)), psi);
    }
    let mut phi = start;
    phi = apply4(&kron(&ry(theta[0]), &id), phi);
    phi = apply4(&kron(&rz(theta[1]), &id), phi);
    phi = apply4(&kron(&id, &ry(theta[2])), phi);
    phi = apply4(&kron(&id, &rz(theta[3])), phi);
    if n_layers >= 2 {
        let y = [[c(0.0), -Complex64::i()], [Complex64::i(), c(0.0)]];
        let z = [[c(1.0), c(0.0)], [c(0.0), c(-1.0)]];
        phi = apply4(&pauli_pair(&y, theta[4]), phi);
        phi = apply4(&pauli_pair(&z, theta[5]), phi);
    }
    if n_layers == 3 {
        phi = apply4(&controlled(&ry(theta[6])), phi);
        phi = apply4(&controlled(&rz(theta[7])), phi);
    }
    let overlap: Complex64 = psi.iter().zip(&phi).map(|(a, b)| a.conj() * b).sum();
    0.5 + 0.5 * overlap.norm_sqr()
}

fn oracle_angles(model: &Model, filter: usize, patch: &[f64]) -> Vec<f64> {
    let layer = model.dense(filter);
    let out = layer.output_dim();
    (0..out)
        .map(|j| {
            let y = layer.bias()[j]
                + patch
                    .iter()
                    .enumerate()
                    .map(|(i, h)| h * layer.weights()[i * out + j])
                    .sum::<f64>();
            PI / (1.0 + (-y).exp())
        })
        .collect()
}

/// Mean loss computed from base fidelities only.
fn oracle_loss(model: &Model, samples: &[PreparedSample]) -> f64 {
    let nf = model.n_filters();
    let mut total = 0.0;
    for s in samples {
        for f in 0..nf {
            let fids: Vec<f64> = (0..model.n_models())
                .map(|cls| {
                    s.patches
                        .iter()
                        .map(|p| {
                            let a = oracle_angles(model, f, p);
                            oracle_fidelity(&a, model.params(cls, f), model.spec().n_layers())
                        })
                        .sum::<f64>()
                        / s.patches.len() as f64
                })
                .collect();
            total += model.head().evaluate(&fids, s.label_index).unwrap().loss;
        }
    }
    total / (samples.len() * nf) as f64
}

fn shift_vs_differences() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let eps = 1e-5;
    let (mut worst_grad, mut worst_fid, mut components) = (0.0f64, 0.0f64, 0usize);
    for k in 0..20 {
        let n_layers = 1 + k % 3;
        let spec = LayerSpec::new(5, n_layers).unwrap();
        let head = if rng.gen_bool(0.5) {
            Head::PerClass
        } else {
            Head::Binary
        };
        let n_models = if head == Head::Binary { 1 } else { 2 };
        let n_filters = rng.gen_range(1..=2);
        let patch_len = 4;
        let model = Model::init(spec, head, n_models, n_filters, patch_len, rng.gen());
        let samples: Vec<PreparedSample> = (0..2)
            .map(|x| PreparedSample {
                label_index: (x + k) % 2,
                patches: (0..rng.gen_range(1..=2))
                    .map(|_| (0..patch_len).map(|_| rng.gen::<f64>()).collect())
                    .collect(),
            })
            .collect();

        let bank = build_circuit_bank("g", &samples, &model, true).unwrap();
        let circuits: Vec<&LogicalCircuit> = bank.circuits().collect();
        let results = LocalDispatcher.dispatch(&circuits).unwrap();
        for e in bank.entries.iter().filter(|e| !e.role.is_shifted()) {
            let angles = oracle_angles(&model, e.filter, &samples[e.sample].patches[e.patch]);
            let want = oracle_fidelity(&angles, model.params(e.class, e.filter), n_layers);
            worst_fid = worst_fid.max((results[e.circuit.circuit_id()] - want).abs());
        }
        let analysis = analyze(&bank, &results, &samples, &model).unwrap();
        let base_loss = oracle_loss(&model, &samples);
        if (analysis.loss - base_loss).abs() > 1e-10 {
            return Verdict::Fail(format!(
                "config {k}: loss {} differs from oracle {base_loss}",
                analysis.loss
            ));
        }
        let dense = analysis.dense_gradient.as_ref().expect("dense gradient requested");

        let mut compare = |what: String, analytic: f64, perturb: &dyn Fn(&mut Model, f64)| {
            let mut plus = model.clone();
            perturb(&mut plus, eps);
            let mut minus = model.clone();
            perturb(&mut minus, -eps);
            let fd = (oracle_loss(&plus, &samples) - oracle_loss(&minus, &samples)) / (2.0 * eps);
            components += 1;
            let err = (fd - analytic).abs();
            worst_grad = worst_grad.max(err);
            if err > 1e-4 {
                Err(format!("config {k}: {what} shift {analytic} vs difference {fd}"))
            } else {
                Ok(())
            }
        };
        for cls in 0..n_models {
            for f in 0..n_filters {
                for i in 0..spec.param_count() {
                    let g = analysis.gradient[cls * n_filters + f][i];
                    if let Err(e) = compare(format!("theta[{cls},{f},{i}]"), g, &|m, d| m.params_mut(cls, f)[i] += d) {
                        return Verdict::Fail(e);
                    }
                }
            }
        }
        for (f, dg) in dense.iter().enumerate() {
            for (i, &g) in dg.weights.iter().enumerate() {
                if let Err(e) = compare(format!("W[{f}][{i}]"), g, &|m, d| m.dense_mut(f).weights_mut()[i] += d) {
                    return Verdict::Fail(e);
                }
            }
            for (j, &g) in dg.bias.iter().enumerate() {
                if let Err(e) = compare(format!("b[{f}][{j}]"), g, &|m, d| m.dense_mut(f).bias_mut()[j] += d) {
                    return Verdict::Fail(e);
                }
            }
        }
    }
    if worst_fid > 1e-10 {
        return Verdict::Fail(format!(
            "base fidelity differs from the matrix oracle by {worst_fid:.2e}"
        ));
    }
    Verdict::Pass(format!(
        "20 configs, {components} components, max gradient error {worst_grad:.2e}, max fidelity error {worst_fid:.2e}"
    ))
}

// ---------------------------------------------------------------- 3

fn ms(v: u64) -> Duration {
    Duration::from_millis(v)
}

fn sim_worker(id: &str, mr: usize, cru: f64) -> SimWorker {
    SimWorker {
        worker_id: id.into(),
        max_qubits: mr,
        join_at: Duration::ZERO,
        cru: CruTrace::new(vec![(0.0, cru)]).unwrap(),
        crash_at: None,
        rejoin_after: None,
        skipped_heartbeats: vec![],
        misreports: vec![],
    }
}

fn sim_circuit(i: usize, demand: usize, at: u64, service: u64) -> SimCircuit {
    SimCircuit {
        circuit_id: format!("c{i}"),
        demand,
        client_id: "k".into(),
        submit_at: ms(at),
        service: ms(service),
    }
}

fn sim_scenario(workers: Vec<SimWorker>, circuits: Vec<SimCircuit>, exact: bool) -> Scenario {
    Scenario {
        period: ms(1000),
        allow_exact_fit: exact,
        latency: Duration::ZERO,
        workers,
        circuits,
        resubmits: vec![],
        horizon: ms(100_000),
    }
}

fn placed_on(r: &sim::SimReport) -> Vec<&str> {
    r.assignments.iter().map(|a| a.2.as_str()).collect()
}

fn targeted_cases() -> Result<(), String> {
    // strict fit: AR = D is not enough
    let sc = sim_scenario(
        vec![sim_worker("a", 5, 0.0), sim_worker("b", 10, 0.9)],
        vec![sim_circuit(0, 5, 10, 300)],
        false,
    );
    let r = sim::run(&sc);
    if placed_on(&r) != ["b"] || !r.violations.is_empty() {
        return Err(format!("strict fit placed on {:?}", placed_on(&r)));
    }
    let r = sim::run(&Scenario {
        allow_exact_fit: true,
        ..sc
    });
    if placed_on(&r) != ["a"] {
        return Err(format!("exact fit placed on {:?}", placed_on(&r)));
    }
    // min CRU, then id
    let r = sim::run(&sim_scenario(
        vec![
            sim_worker("y", 10, 0.3),
            sim_worker("x", 10, 0.3),
            sim_worker("z", 10, 0.7),
        ],
        vec![sim_circuit(0, 2, 10, 300)],
        false,
    ));
    if placed_on(&r) != ["x"] {
        return Err(format!("tie placed on {:?}", placed_on(&r)));
    }
    let r = sim::run(&sim_scenario(
        vec![sim_worker("a", 10, 0.2), sim_worker("b", 10, 0.1)],
        vec![sim_circuit(0, 2, 10, 300)],
        false,
    ));
    if placed_on(&r) != ["b"] {
        return Err(format!("lower CRU lost to {:?}", placed_on(&r)));
    }
    // eviction at the first check after 3P of silence, not before
    let mut a = sim_worker("a", 10, 0.0);
    a.crash_at = Some(ms(1500));
    let mut sc = sim_scenario(
        vec![a, sim_worker("b", 10, 0.5)],
        vec![sim_circuit(0, 3, 1400, 5000)],
        false,
    );
    sc.circuits[0].service = ms(5000);
    let r = sim::run(&sc);
    match r.evictions.first() {
        Some((t, id)) if id == "a" && *t > ms(4000) && *t <= ms(4001) => {}
        other => return Err(format!("eviction {other:?}, expected worker a just after 4 s")),
    }
    if placed_on(&r) != ["a", "b"] || r.deliveries.get("c0") != Some(&1) {
        return Err(format!("requeue after eviction went to {:?}", placed_on(&r)));
    }
    Ok(())
}

fn scheduler_conformance() -> Verdict {
    if let Err(e) = targeted_cases() {
        return Verdict::Fail(e);
    }
    let n = 600u64;
    let (mut transitions, mut evictions) = (0usize, 0usize);
    for seed in 0..n {
        let sc = Scenario::random(seed);
        let r = sim::run(&sc);
        if let Some(v) = r.violations.first() {
            return Verdict::Fail(format!("seed {seed}: {v} ({} violations)", r.violations.len()));
        }
        if !r.unfinished.is_empty() {
            return Verdict::Fail(format!("seed {seed}: unfinished {:?}", r.unfinished));
        }
        let again = sim::run(&sc);
        if again.log.join("\n").as_bytes() != r.log.join("\n").as_bytes() || again.assignments != r.assignments {
            return Verdict::Fail(format!("seed {seed}: replay differs"));
        }
        // selection depends only on the CRU order
        let scaled = sim::run(&sc.scale_cru(0.5));
        if scaled.assignments != r.assignments {
            return Verdict::Fail(format!("seed {seed}: scaling CRU changed the placements"));
        }
        transitions += r.transitions;
        evictions += r.evictions.len();
    }
    Verdict::Pass(format!(
        "{n} scenarios, {transitions} audited transitions, {evictions} evictions, replays identical"
    ))
}

// ---------------------------------------------------------------- 4

struct Counting {
    circuits: usize,
}

impl Dispatcher for Counting {
    fn dispatch(&mut self, circuits: &[&LogicalCircuit]) -> Result<HashMap<String, f64>, DispatchError> {
        self.circuits += circuits.len();
        LocalDispatcher.dispatch(circuits)
    }
}

struct CountCase {
    samples: usize,
    n_filters: usize,
    head: Head,
    n_layers: usize,
    qubits: usize,
    side: usize,
    filter_width: usize,
    stride: usize,
}

/// Shift evaluations per base circuit: two per Pauli rotation, four per
/// controlled rotation.
fn terms_per_circuit(qubits: usize, n_layers: usize) -> usize {
    let m = (qubits - 1) / 2;
    let single = 2 * m;
    let pair = if n_layers >= 2 { 2 * (m - 1) } else { 0 };
    let controlled = if n_layers == 3 { 2 * (m - 1) } else { 0 };
    2 * (single + pair) + 4 * controlled
}

fn count_case(case: &CountCase) -> Result<(usize, usize, usize), String> {
    let mut cfg = TrainConfig::new(vec![3, 8]);
    cfg.n_filters = case.n_filters;
    cfg.head = case.head;
    cfg.n_layers = case.n_layers;
    cfg.qubit_count = case.qubits;
    cfg.filter_width = case.filter_width;
    cfg.stride = case.stride;
    let mut ds = synthetic_bars(case.samples, case.side, [3, 8], 0.1, 7);
    ds.normalize();
    let mut trainer = Trainer::new(cfg, ds, Counting { circuits: 0 }).map_err(|e| e.to_string())?;
    let bank = trainer.current_bank().map_err(|e| e.to_string())?;
    let m = trainer.run_epoch().map_err(|e| e.to_string())?;
    let dispatched = trainer.dispatcher_mut().circuits;
    let models = if case.head == Head::Binary { 1 } else { 2 };
    let windows = (case.side - case.filter_width) / case.stride + 1;
    let slots = case.samples * case.n_filters * models * windows * windows;
    let shifted = slots * terms_per_circuit(case.qubits, case.n_layers);
    if bank.shifted_count() != shifted || bank.unshifted_count() != slots {
        return Err(format!(
            "bank has {} shifted + {} unshifted, expected {shifted} + {slots}",
            bank.shifted_count(),
            bank.unshifted_count()
        ));
    }
    if m.circuits_executed != shifted + slots || dispatched != shifted + slots {
        return Err(format!(
            "reported {} / dispatched {dispatched}, expected {}",
            m.circuits_executed,
            shifted + slots
        ));
    }
    Ok((shifted, slots, m.circuits_executed))
}

fn circuit_counts() -> Verdict {
    let anchor = CountCase {
        samples: 45,
        n_filters: 4,
        head: Head::Binary,
        n_layers: 1,
        qubits: 5,
        side: 4,
        filter_width: 4,
        stride: 2,
    };
    let (shifted, base, total) = match count_case(&anchor) {
        Ok(v) => v,
        Err(e) => return Verdict::Fail(format!("anchor config: {e}")),
    };
    if shifted != 1440 {
        return Verdict::Fail(format!("anchor shifted count {shifted}, expected 1440"));
    }
    let mut others = 0;
    for (n_layers, qubits, head, side, fw, stride) in [
        (1, 5, Head::PerClass, 4, 2, 2),
        (2, 5, Head::PerClass, 6, 4, 2),
        (2, 7, Head::Binary, 4, 4, 1),
        (1, 7, Head::PerClass, 5, 3, 1),
        (3, 5, Head::Binary, 4, 2, 2),
        (3, 7, Head::PerClass, 4, 4, 2),
    ] {
        let case = CountCase {
            samples: 3,
            n_filters: 2,
            head,
            n_layers,
            qubits,
            side,
            filter_width: fw,
            stride,
        };
        if let Err(e) = count_case(&case) {
            return Verdict::Fail(format!("nL={n_layers} qC={qubits} {head:?}: {e}"));
        }
        others += 1;
    }
    Verdict::Pass(format!(
        "anchor: {shifted} shifted + {base} unshifted = {total} circuits; {others} further configs exact"
    ))
}

// ---------------------------------------------------------------- 5, 6, 7

fn manager(period: Duration) -> ManagerHandle {
    let m = ManagerConfig {
        heartbeat_period: period,
        ..ManagerConfig::default()
    };
    ManagerHandle::start(ServerConfig::new("127.0.0.1:0", m)).expect("manager starts")
}

fn worker(
    addr: &str,
    id: &str,
    max_qubits: usize,
    period: Duration,
    parallelism: usize,
    delay: Duration,
) -> WorkerHandle {
    let mut c = WorkerConfig::new(id, max_qubits, addr);
    c.heartbeat_period = period;
    c.parallelism = parallelism;
    c.synthetic_delay = delay;
    c.backoff_base = ms(20);
    c.backoff_cap = ms(200);
    let w = WorkerHandle::spawn(c);
    assert!(w.wait_registered(Duration::from_secs(10)), "worker {id} registers");
    w
}

fn remote_epoch(addr: &str, cfg: TrainConfig, ds: Dataset) -> Result<EpochMetrics, String> {
    let mut rc = RemoteConfig::new(addr, cfg.client_id.clone().unwrap_or_default());
    rc.idle_timeout = Some(Duration::from_secs(60));
    let d = RemoteDispatcher::connect(rc).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(cfg, ds, d).map_err(|e| e.to_string())?;
    t.run_epoch().map_err(|e| e.to_string())
}

fn scaling_job() -> (TrainConfig, Dataset) {
    let mut cfg = TrainConfig::new(vec![0, 1]);
    cfg.qubit_count = 7;
    cfg.n_layers = 3;
    cfg.n_filters = 1;
    cfg.filter_width = 2;
    cfg.stride = 2;
    let mut ds = synthetic_bars(7, 4, [0, 1], 0.2, 11);
    ds.normalize();
    (cfg, ds)
}

fn worker_scaling() -> Verdict {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let forced = std::env::var("DQULEARN_FORCE_SCALING").is_ok_and(|v| v == "1");
    if cores < 4 && !forced {
        return Verdict::NotEvaluated(format!("host has {cores} core(s), criterion needs at least 4"));
    }
    let period = ms(500);
    let mut runs = Vec::new();
    for n in [1usize, 2, 4] {
        let m = manager(period);
        let addr = m.addr().to_string();
        let _workers: Vec<_> = (0..n)
            .map(|i| worker(&addr, &format!("s{i}"), 8, period, 1, Duration::ZERO))
            .collect();
        let (mut cfg, ds) = scaling_job();
        cfg.client_id = Some(format!("scale{n}"));
        match remote_epoch(&addr, cfg, ds) {
            Ok(metrics) => runs.push((n, metrics)),
            Err(e) => return Verdict::Fail(format!("{n} worker(s): {e}")),
        }
    }
    let t = |i: usize| runs[i].1.wall_seconds;
    let cps = |i: usize| runs[i].1.circuits_per_second;
    let reduction = (t(0) - t(2)) / t(0);
    let detail = format!(
        "{} circuits; wall {:.2}/{:.2}/{:.2}s, {:.0}/{:.0}/{:.0} circuits/s on 1/2/4 workers, reduction {:.1}%",
        runs[0].1.circuits_executed,
        t(0),
        t(1),
        t(2),
        cps(0),
        cps(1),
        cps(2),
        100.0 * reduction
    );
    check(reduction >= 0.25 && cps(0) <= cps(1) && cps(1) <= cps(2), detail)
}

fn tenant_jobs() -> Vec<(TrainConfig, Dataset)> {
    [("A", 5, 1), ("B", 5, 2), ("C", 7, 1), ("D", 7, 2)]
        .into_iter()
        .enumerate()
        .map(|(k, (name, qubits, layers))| {
            let mut cfg = TrainConfig::new(vec![0, 1]);
            cfg.qubit_count = qubits;
            cfg.n_layers = layers;
            cfg.n_filters = 1;
            cfg.seed = k as u64;
            cfg.client_id = Some(format!("job{name}"));
            let mut ds = synthetic_bars(2, 4, [0, 1], 0.2, k as u64);
            ds.normalize();
            (cfg, ds)
        })
        .collect()
}

/// Runs the four jobs concurrently against `addr`; returns their metrics in
/// job order.
fn run_tenants(addr: &str) -> Result<Vec<EpochMetrics>, String> {
    let jobs = tenant_jobs();
    let barrier = Arc::new(Barrier::new(jobs.len()));
    let handles: Vec<_> = jobs
        .into_iter()
        .map(|(cfg, ds)| {
            let (addr, barrier) = (addr.to_owned(), barrier.clone());
            std::thread::spawn(move || {
                barrier.wait();
                remote_epoch(&addr, cfg, ds)
            })
        })
        .collect();
    handles
        .into_iter()
        .map(|h| h.join().map_err(|_| "client thread panicked".to_string())?)
        .collect()
}

fn multi_tenant_gain() -> Verdict {
    let period = ms(500);
    let delay = ms(20);
    let shared = |parallelism: usize| {
        let m = manager(period);
        let addr = m.addr().to_string();
        let _w = worker(&addr, "shared", 20, period, parallelism, delay);
        run_tenants(&addr)
    };
    let baseline = match shared(1) {
        Ok(v) => v,
        Err(e) => return Verdict::Fail(format!("baseline: {e}")),
    };
    // informational: the shared worker also runs co-resident circuits
    let coresident = match shared(4) {
        Ok(v) => v,
        Err(e) => return Verdict::Fail(format!("co-resident baseline: {e}")),
    };
    let fleet = {
        let m = manager(period);
        let addr = m.addr().to_string();
        let _ws: Vec<_> = [5, 10, 15, 20]
            .into_iter()
            .map(|mr| worker(&addr, &format!("mr{mr}"), mr, period, 4, delay))
            .collect();
        match run_tenants(&addr) {
            Ok(v) => v,
            Err(e) => return Verdict::Fail(format!("fleet: {e}")),
        }
    };
    let smallest = 0;
    let ratio = fleet[smallest].circuits_per_second / baseline[smallest].circuits_per_second;
    let all: Vec<String> = fleet
        .iter()
        .zip(&baseline)
        .zip(["A", "B", "C", "D"])
        .map(|((f, b), n)| format!("{n} {:.1}x", f.circuits_per_second / b.circuits_per_second))
        .collect();
    check(
        ratio >= 2.0,
        format!(
            "job A {:.1} vs {:.1} circuits/s, gain {ratio:.2}x (all: {}); {:.2}x over a co-resident shared worker",
            fleet[smallest].circuits_per_second,
            baseline[smallest].circuits_per_second,
            all.join(", "),
            fleet[smallest].circuits_per_second / coresident[smallest].circuits_per_second
        ),
    )
}

fn chaos_round(rep: u64) -> Result<String, String> {
    let period = ms(100);
    let m = manager(period);
    let addr = m.addr().to_string();
    let workers: Vec<_> = (0..3)
        .map(|i| worker(&addr, &format!("w{i}"), 10, period, 2, ms(15)))
        .collect();
    let mut cfg = TrainConfig::new(vec![0, 1]);
    cfg.n_filters = 1;
    cfg.alpha = 0.1;
    cfg.seed = rep;
    cfg.client_id = Some(format!("chaos{rep}"));
    let mut ds = synthetic_bars(4, 4, [0, 1], 0.2, rep);
    ds.normalize();

    let mut local = Trainer::new(cfg.clone(), ds.clone(), LocalDispatcher).map_err(|e| e.to_string())?;
    let expected = local.run_epoch().map_err(|e| e.to_string())?;

    let mut rc = RemoteConfig::new(addr.clone(), "chaos");
    rc.idle_timeout = Some(Duration::from_secs(30));
    let d = RemoteDispatcher::connect(rc).map_err(|e| e.to_string())?;
    let mut remote = Trainer::new(cfg, ds, d).map_err(|e| e.to_string())?;
    let run = std::thread::spawn(move || {
        let m = remote.run_epoch();
        (m, remote)
    });

    let deadline = Instant::now() + Duration::from_secs(10);
    let victim = loop {
        if run.is_finished() || Instant::now() > deadline {
            return Err("epoch ended before any worker held a circuit".into());
        }
        if let Some(r) = m.registry().into_iter().find(|r| !r.active.is_empty()) {
            break r.worker_id;
        }
        std::thread::sleep(ms(1));
    };
    let idx: usize = victim[1..].parse().unwrap();
    workers[idx].kill();
    let killed_mid_epoch = !run.is_finished();

    let (metrics, mut remote) = run.join().map_err(|_| "training thread panicked".to_string())?;
    let got = metrics.map_err(|e| format!("epoch failed after killing {victim}: {e}"))?;
    if !killed_mid_epoch {
        return Err("kill landed after the epoch finished".into());
    }
    if got.circuits_executed != expected.circuits_executed
        || got.loss.to_bits() != expected.loss.to_bits()
        || got.accuracy != expected.accuracy
    {
        return Err(format!("remote epoch {got:?} differs from local {expected:?}"));
    }
    if remote.model() != local.model() {
        return Err("updated parameters differ from the local run".into());
    }
    let late = remote.dispatcher_mut().late_results();
    if late != 0 {
        return Err(format!("{late} duplicate or unmatched results"));
    }
    Ok(victim)
}

fn fault_tolerance() -> Verdict {
    for rep in 0..20 {
        if let Err(e) = chaos_round(rep) {
            return Verdict::Fail(format!("repetition {rep}: {e}"));
        }
    }
    Verdict::Pass("20 repetitions, each killed a busy worker mid-epoch; results identical to local runs".into())
}

// ---------------------------------------------------------------- 8

fn learning_sanity() -> Verdict {
    let mut cfg = TrainConfig::new(vec![0, 1]);
    cfg.n_filters = 1;
    cfg.alpha = 0.1;
    cfg.seed = 5;
    cfg.epochs = 5;
    let mut ds = synthetic_bars(16, 4, [0, 1], 0.2, 1);
    ds.normalize();
    let mut t = Trainer::new(cfg, ds, LocalDispatcher).unwrap();
    let metrics = t.train().unwrap();
    let losses: Vec<f64> = metrics.iter().map(|m| m.loss).collect();
    let accuracy = metrics.last().unwrap().accuracy;
    let decreasing = losses.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = losses.iter().map(|l| format!("{l:.4}")).collect();
    check(
        decreasing && accuracy >= 0.9,
        format!("loss {}, final accuracy {:.3}", shown.join(" > "), accuracy),
    )
}

// ---------------------------------------------------------------- 9

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const POOL: &[char] = &['a', 'Z', '0', ':', '\n', ',', '=', ' ', 'é', '∂', '\u{0}', '.', '-'];
    (0..rng.gen_range(0..24))
        .map(|_| POOL[rng.gen_range(0..POOL.len())])
        .collect()
}

fn random_float(rng: &mut ChaCha8Rng) -> f64 {
    match rng.gen_range(0..4) {
        0 => rng.gen::<f64>(),
        1 => 0.5 + 0.5 * rng.gen::<f64>(),
        2 => f64::from_bits(rng.gen::<u64>() & 0x3fef_ffff_ffff_ffff),
        _ => [0.0, 1.0, 0.5, 1e-300, -0.0][rng.gen_range(0..5)],
    }
}

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let corr = if rng.gen_bool(0.2) {
        u64::MAX
    } else {
        rng.gen_range(0..1000)
    };
    let bytes = |rng: &mut ChaCha8Rng| -> Vec<u8> { (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect() };
    match rng.gen_range(0..9) {
        0 => Message::Register {
            corr,
            worker_id: random_text(rng),
            max_qubits: rng.gen_range(0..64),
            cru: random_float(rng),
        },
        1 => Message::RegisterAck {
            corr,
            worker_id: random_text(rng),
        },
        2 => Message::Heartbeat {
            corr,
            worker_id: random_text(rng),
            active: (0..rng.gen_range(0..4))
                .map(|_| ActiveCircuit {
                    circuit_id: random_text(rng),
                    demand: rng.gen_range(0..30),
                })
                .collect(),
            cru: random_float(rng),
        },
        3 => Message::Assign {
            corr,
            circuit: bytes(rng),
        },
        4 => Message::Result {
            corr,
            circuit_id: random_text(rng),
            fidelity: random_float(rng),
        },
        5 => Message::Submit {
            corr,
            client_id: random_text(rng),
            circuit: bytes(rng),
        },
        6 => Message::SubmitAck {
            corr,
            circuit_id: random_text(rng),
            status: [SubmitStatus::Assigned, SubmitStatus::Queued, SubmitStatus::Cached][rng.gen_range(0..3)],
        },
        7 => Message::JobResult {
            corr,
            circuit_id: random_text(rng),
            fidelity: random_float(rng),
        },
        _ => Message::Error {
            corr,
            code: ErrorCode::ALL[rng.gen_range(0..ErrorCode::ALL.len())],
            detail: random_text(rng),
        },
    }
}

fn mutate(rng: &mut ChaCha8Rng, mut frame: Vec<u8>) -> Vec<u8> {
    match rng.gen_range(0..6) {
        0 => {
            let i = rng.gen_range(0..frame.len());
            frame[i] ^= 1 << rng.gen_range(0..8);
        }
        1 => frame.truncate(rng.gen_range(0..frame.len())),
        2 => {
            let len: u32 = rng.gen_range(0..=frame.len() as u32 + 8);
            frame[..4].copy_from_slice(&len.to_be_bytes());
        }
        3 => {
            let i = rng.gen_range(0..=frame.len());
            frame.insert(i, [b':', b'\n', b'0', b'9', 0xff][rng.gen_range(0..5)]);
        }
        4 => {
            let i = rng.gen_range(5..frame.len());
            frame[i] = rng.gen();
        }
        _ => frame[..4].copy_from_slice(&rng.gen::<u32>().to_be_bytes()),
    }
    frame
}

/// One adversarial input. Returns an error describing a broken property.
fn probe_frame(buf: &[u8]) -> Result<bool, String> {
    let outcome =
        catch_unwind(AssertUnwindSafe(|| decode_frame(buf))).map_err(|_| format!("decoder panicked on {buf:?}"))?;
    let Ok((msg, used)) = outcome else {
        return Ok(false);
    };
    if used > buf.len() {
        return Err(format!("consumed {used} of {} bytes", buf.len()));
    }
    // the result depends only on the declared frame
    match decode_frame(&buf[..used]) {
        Ok((again, n)) if again == msg && n == used => {}
        other => return Err(format!("prefix decode differs: {other:?}")),
    }
    if used > 0 && decode_frame(&buf[..used - 1]).is_ok() {
        return Err("a truncated frame decoded".into());
    }
    // accepted messages are stable under re-encoding
    let re = msg.encode();
    match decode_frame(&re) {
        Ok((again, n)) if again == msg && n == re.len() => Ok(true),
        other => Err(format!("re-encoded frame decodes to {other:?}")),
    }
}

fn protocol_robustness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (mut accepted, mut round_trips) = (0usize, 0usize);
    for i in 0..100_000 {
        let input = match i % 4 {
            0 => {
                let msg = random_message(&mut rng);
                let frame = msg.encode();
                match decode_frame(&frame) {
                    Ok((back, n)) if back == msg && n == frame.len() && back.encode() == frame => round_trips += 1,
                    other => return Verdict::Fail(format!("valid {msg:?} did not round-trip: {other:?}")),
                }
                let mut trailing = frame;
                trailing.extend((0..rng.gen_range(0..8)).map(|_| rng.gen::<u8>()));
                trailing
            }
            1 | 2 => {
                let frame = random_message(&mut rng).encode();
                mutate(&mut rng, frame)
            }
            _ => {
                let mut raw: Vec<u8> = (0..rng.gen_range(0..48)).map(|_| rng.gen()).collect();
                if raw.len() >= 5 && rng.gen_bool(0.5) {
                    let len = (raw.len() - 5) as u32;
                    raw[..4].copy_from_slice(&len.to_be_bytes());
                    raw[4] = 0x01;
                }
                raw
            }
        };
        match probe_frame(&input) {
            Ok(ok) => accepted += usize::from(ok),
            Err(e) => return Verdict::Fail(format!("input {i}: {e}")),
        }
    }
    Verdict::Pass(format!(
        "100000 inputs, {accepted} decoded, {round_trips} valid messages round-tripped byte-identically"
    ))
}
