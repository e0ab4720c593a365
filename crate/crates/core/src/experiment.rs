//! Experiment harness: local fleets of manager and workers, concurrent or
//! sequential training clients, and the per-epoch results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use thiserror::Error;

use crate::client::{RemoteConfig, RemoteDispatcher};
use crate::comanager::{ManagerConfig, ManagerHandle, ServerConfig, ServerError};
use crate::trainer::{parse_metrics_csv, EpochMetrics, TrainConfig, Trainer};
use crate::worker::{WorkerConfig, WorkerHandle};

pub const RESULTS_HEADER: &str =
    "repetition,client,epoch,wall_seconds,circuits,circuits_per_second,loss,accuracy,status";

const STARTUP_TIMEOUT: Duration = Duration::from_secs(20);

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("fleet startup failed: {0}")]
    Startup(String),
    #[error("client config {path}: {detail}")]
    Client { path: String, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Clients run one after another.
    #[default]
    SingleClient,
    /// Clients run concurrently against the same fleet.
    MultiTenant,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetMember {
    pub id: String,
    pub max_qubits: usize,
    #[serde(default = "one")]
    pub parallelism: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClientEntry {
    #[serde(default)]
    name: Option<String>,
    config: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    #[serde(default)]
    mode: Mode,
    #[serde(default = "one")]
    repetitions: usize,
    output: PathBuf,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_period")]
    heartbeat_period: f64,
    #[serde(default)]
    synthetic_delay_ms: u64,
    #[serde(default)]
    allow_exact_fit: bool,
    #[serde(default = "default_listen")]
    listen: String,
    #[serde(default)]
    client_timeout: Option<f64>,
    #[serde(rename = "worker", default)]
    workers: Vec<FleetMember>,
    #[serde(rename = "client", default)]
    clients: Vec<ClientEntry>,
}

fn default_period() -> f64 {
    crate::comanager::DEFAULT_HEARTBEAT_PERIOD.as_secs_f64()
}

fn default_listen() -> String {
    "127.0.0.1:0".into()
}

/// Manager and worker settings shared by every repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetSettings {
    pub listen: String,
    pub heartbeat_period: Duration,
    pub allow_exact_fit: bool,
    pub synthetic_delay: Duration,
    pub workers: Vec<FleetMember>,
}

impl FleetSettings {
    pub fn new(workers: Vec<FleetMember>) -> Self {
        FleetSettings {
            listen: default_listen(),
            heartbeat_period: crate::comanager::DEFAULT_HEARTBEAT_PERIOD,
            allow_exact_fit: false,
            synthetic_delay: Duration::ZERO,
            workers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientJob {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub repetitions: usize,
    pub output: PathBuf,
    pub seed: u64,
    pub fleet: FleetSettings,
    pub clients: Vec<ClientJob>,
    /// A client gives up when the manager stays silent this long.
    pub client_timeout: Option<Duration>,
}

impl ExperimentSpec {
    /// Reads a spec file. Client config and output paths resolve against
    /// the experiment file's directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let file: SpecFile = toml::from_str(&text).map_err(|e| ExperimentError::Spec(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut clients = Vec::new();
        for (i, c) in file.clients.iter().enumerate() {
            let cfg_path = base.join(&c.config);
            let config = TrainConfig::load(&cfg_path).map_err(|e| ExperimentError::Client {
                path: cfg_path.display().to_string(),
                detail: e.to_string(),
            })?;
            clients.push(ClientJob {
                name: c.name.clone().unwrap_or_else(|| format!("client{i}")),
                config,
            });
        }
        if !(file.heartbeat_period > 0.0 && file.heartbeat_period.is_finite()) {
            return Err(ExperimentError::Spec("heartbeat_period must be positive".into()));
        }
        let spec = ExperimentSpec {
            mode: file.mode,
            repetitions: file.repetitions,
            output: base.join(&file.output),
            seed: file.seed,
            fleet: FleetSettings {
                listen: file.listen,
                heartbeat_period: Duration::from_secs_f64(file.heartbeat_period),
                allow_exact_fit: file.allow_exact_fit,
                synthetic_delay: Duration::from_millis(file.synthetic_delay_ms),
                workers: file.workers,
            },
            clients,
            client_timeout: file
                .client_timeout
                .filter(|t| *t > 0.0 && t.is_finite())
                .map(Duration::from_secs_f64),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Spec(m.into()));
        if self.fleet.workers.is_empty() {
            return bad("at least one [[worker]] is required");
        }
        if self.clients.is_empty() {
            return bad("at least one [[client]] is required");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        let mut seen = std::collections::BTreeSet::new();
        for w in &self.fleet.workers {
            if !seen.insert(w.id.as_str()) {
                return Err(ExperimentError::Spec(format!("duplicate worker id {}", w.id)));
            }
            if w.max_qubits == 0 || w.parallelism == 0 {
                return Err(ExperimentError::Spec(format!(
                    "worker {} needs qubits and parallelism",
                    w.id
                )));
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.clients {
            if !names.insert(c.name.as_str()) || c.name.contains(',') {
                return Err(ExperimentError::Spec(format!(
                    "bad or duplicate client name {:?}",
                    c.name
                )));
            }
        }
        Ok(())
    }
}

/// How fleets and clients are launched.
#[derive(Debug, Clone, PartialEq)]
pub enum Launcher {
    /// Manager, workers and clients as threads of this process.
    InProcess,
    /// Child processes of the given `dqulearn` executable.
    Processes { exe: PathBuf },
}

enum Backend {
    InProcess {
        manager: Option<ManagerHandle>,
        workers: BTreeMap<String, WorkerHandle>,
    },
    Processes {
        manager: Option<Child>,
        workers: BTreeMap<String, Child>,
    },
}

/// A running manager and its workers.
pub struct FleetHandle {
    addr: String,
    backend: Backend,
}

impl FleetHandle {
    pub fn addr(&self) -> &str {
        &self.addr
    }

    /// Simulates a crash of one worker. Returns false for unknown ids.
    pub fn kill_worker(&mut self, id: &str) -> bool {
        match &mut self.backend {
            Backend::InProcess { workers, .. } => workers.get(id).map(WorkerHandle::kill).is_some(),
            Backend::Processes { workers, .. } => match workers.get_mut(id) {
                Some(child) => {
                    let _ = child.kill();
                    let _ = child.wait();
                    true
                }
                None => false,
            },
        }
    }

    /// Stops every worker and the manager. Safe to call repeatedly.
    pub fn teardown(&mut self) {
        match &mut self.backend {
            Backend::InProcess { manager, workers } => {
                for w in workers.values() {
                    w.stop();
                }
                for (_, w) in std::mem::take(workers) {
                    let _ = w.join();
                }
                if let Some(mut m) = manager.take() {
                    m.shutdown();
                }
            }
            Backend::Processes { manager, workers } => {
                for (_, mut c) in std::mem::take(workers)
                    .into_iter()
                    .chain(manager.take().map(|m| (String::new(), m)))
                {
                    let _ = c.kill();
                    let _ = c.wait();
                }
            }
        }
    }
}

impl Drop for FleetHandle {
    fn drop(&mut self) {
        self.teardown();
    }
}

fn wait_for<T>(rx: &Receiver<T>, deadline: Instant, mut accept: impl FnMut(T) -> bool) -> bool {
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok(v) => {
                if accept(v) {
                    return true;
                }
            }
            Err(_) => return false,
        }
    }
}

/// Starts a manager and every worker, and waits until all workers are
/// registered.
pub fn spawn_fleet(settings: &FleetSettings, launcher: &Launcher) -> Result<FleetHandle, ExperimentError> {
    let period = settings.heartbeat_period;
    match launcher {
        Launcher::InProcess => {
            let mc = ManagerConfig {
                heartbeat_period: period,
                allow_exact_fit: settings.allow_exact_fit,
            };
            let manager = ManagerHandle::start(ServerConfig::new(settings.listen.clone(), mc))?;
            let addr = manager.addr().to_string();
            let mut workers = BTreeMap::new();
            for m in &settings.workers {
                let mut wc = WorkerConfig::new(m.id.clone(), m.max_qubits, addr.clone());
                wc.heartbeat_period = period;
                wc.parallelism = m.parallelism;
                wc.synthetic_delay = settings.synthetic_delay;
                workers.insert(m.id.clone(), WorkerHandle::spawn(wc));
            }
            let fleet = FleetHandle {
                addr,
                backend: Backend::InProcess {
                    manager: Some(manager),
                    workers,
                },
            };
            if let Backend::InProcess { workers, .. } = &fleet.backend {
                for (id, w) in workers {
                    if !w.wait_registered(STARTUP_TIMEOUT) {
                        return Err(ExperimentError::Startup(format!("worker {id} did not register")));
                    }
                }
            }
            Ok(fleet)
        }
        Launcher::Processes { exe } => {
            let mut cmd = Command::new(exe);
            cmd.args(["manager", "--listen", &settings.listen, "--event-log", "-"])
                .arg("--heartbeat-period")
                .arg(period.as_secs_f64().to_string())
                .stdout(Stdio::piped());
            if settings.allow_exact_fit {
                cmd.arg("--allow-exact-fit");
            }
            let mut child = cmd.spawn().map_err(io_err(exe))?;
            let stdout = child.stdout.take().expect("stdout piped");
            let (tx, rx) = mpsc::channel::<String>();
            thread::spawn(move || {
                // keep draining so the manager never blocks on a full pipe
                for line in BufReader::new(stdout).lines().map_while(Result::ok) {
                    let _ = tx.send(line);
                }
            });
            let mut fleet = FleetHandle {
                addr: String::new(),
                backend: Backend::Processes {
                    manager: Some(child),
                    workers: BTreeMap::new(),
                },
            };
            let deadline = Instant::now() + STARTUP_TIMEOUT;
            let mut addr = None;
            wait_for(&rx, deadline, |line| {
                addr = line.strip_prefix("listening on ").map(str::to_owned);
                addr.is_some()
            });
            let Some(addr) = addr else {
                return Err(ExperimentError::Startup(format!(
                    "manager did not start listening on {}",
                    settings.listen
                )));
            };
            fleet.addr = addr.clone();
            for m in &settings.workers {
                let child = Command::new(exe)
                    .args(["worker", "--id", &m.id, "--manager", &addr])
                    .args(["--max-qubits", &m.max_qubits.to_string()])
                    .args(["--period", &period.as_secs_f64().to_string()])
                    .args(["--parallelism", &m.parallelism.to_string()])
                    .args(["--synthetic-delay", &settings.synthetic_delay.as_millis().to_string()])
                    .stdout(Stdio::null())
                    .spawn()
                    .map_err(io_err(exe))?;
                if let Backend::Processes { workers, .. } = &mut fleet.backend {
                    workers.insert(m.id.clone(), child);
                }
            }
            let mut pending: std::collections::BTreeSet<String> =
                settings.workers.iter().map(|w| w.id.clone()).collect();
            wait_for(&rx, deadline, |line| {
                let mut parts = line.split_whitespace().skip(1);
                if parts.next() == Some("register") {
                    if let Some(id) = parts.next().and_then(|w| w.strip_prefix("worker=")) {
                        pending.remove(id);
                    }
                }
                pending.is_empty()
            });
            if !pending.is_empty() {
                return Err(ExperimentError::Startup(format!(
                    "workers {pending:?} did not register"
                )));
            }
            Ok(fleet)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub repetition: usize,
    pub client: String,
    /// `None` marks the per-client aggregate row.
    pub epoch: Option<usize>,
    pub wall_seconds: f64,
    pub circuits: usize,
    pub circuits_per_second: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub ok: bool,
}

impl ResultRow {
    fn from_epoch(repetition: usize, client: &str, m: &EpochMetrics) -> Self {
        ResultRow {
            repetition,
            client: client.to_owned(),
            epoch: Some(m.epoch),
            wall_seconds: m.wall_seconds,
            circuits: m.circuits_executed,
            circuits_per_second: m.circuits_per_second,
            loss: m.loss,
            accuracy: m.accuracy,
            ok: true,
        }
    }

    fn aggregate(repetition: usize, client: &str, epochs: &[EpochMetrics], ok: bool) -> Self {
        let wall = epochs.iter().fold(0.0, |acc, m| acc + m.wall_seconds);
        let circuits: usize = epochs.iter().map(|m| m.circuits_executed).sum();
        let last = epochs.last();
        ResultRow {
            repetition,
            client: client.to_owned(),
            epoch: None,
            wall_seconds: wall,
            circuits,
            circuits_per_second: if wall > 0.0 { circuits as f64 / wall } else { 0.0 },
            loss: last.map_or(f64::NAN, |m| m.loss),
            accuracy: last.map_or(f64::NAN, |m| m.accuracy),
            ok,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.repetition,
            self.client,
            self.epoch.map_or_else(|| "all".to_string(), |e| e.to_string()),
            self.wall_seconds,
            self.circuits,
            self.circuits_per_second,
            self.loss,
            self.accuracy,
            if self.ok { "ok" } else { "failed" }
        )
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    /// `(repetition, client, error)` for every failed client.
    pub failures: Vec<(usize, String, String)>,
}

impl ExperimentReport {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }

    /// The aggregate row of one client in one repetition.
    pub fn aggregate(&self, repetition: usize, client: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.repetition == repetition && r.client == client && r.epoch.is_none())
    }
}

/// Runs one training client against `addr` on the current thread.
pub fn run_client_in_process(addr: &str, config: TrainConfig, timeout: Option<Duration>) -> ClientOutcome {
    let mut epochs = Vec::new();
    let result = (|| -> Result<(), String> {
        let dataset = config.load_dataset().map_err(|e| e.to_string())?;
        let mut rc = RemoteConfig::new(addr, config.client_id.clone().unwrap_or_else(|| "client".into()));
        rc.window = config.window;
        rc.retries = config.retries;
        rc.idle_timeout = timeout;
        let dispatcher = RemoteDispatcher::connect(rc).map_err(|e| format!("connect {addr}: {e}"))?;
        let mut trainer = Trainer::new(config.clone(), dataset, dispatcher).map_err(|e| e.to_string())?;
        for _ in 0..config.epochs {
            epochs.push(trainer.run_epoch().map_err(|e| e.to_string())?);
        }
        Ok(())
    })();
    ClientOutcome {
        epochs,
        error: result.err(),
    }
}

fn run_client_process(
    exe: &Path,
    addr: &str,
    config: &TrainConfig,
    dir: &Path,
    name: &str,
    timeout: Option<Duration>,
) -> ClientOutcome {
    let fail = |e: String| ClientOutcome {
        epochs: Vec::new(),
        error: Some(e),
    };
    let cfg_path = dir.join(format!("{name}.toml"));
    let metrics_path = dir.join(format!("{name}.csv"));
    let text = match toml::to_string(config) {
        Ok(t) => t,
        Err(e) => return fail(format!("cannot encode config: {e}")),
    };
    if let Err(e) = std::fs::write(&cfg_path, text) {
        return fail(format!("cannot write {}: {e}", cfg_path.display()));
    }
    let mut cmd = Command::new(exe);
    cmd.arg("train").arg("--config").arg(&cfg_path);
    cmd.args(["--manager", addr]).arg("--metrics").arg(&metrics_path);
    if let Some(t) = timeout {
        cmd.args(["--timeout", &t.as_secs_f64().to_string()]);
    }
    let status = cmd.stdout(Stdio::null()).status();
    let epochs = std::fs::read_to_string(&metrics_path)
        .ok()
        .and_then(|t| parse_metrics_csv(&t).ok())
        .unwrap_or_default();
    let error = match status {
        Ok(s) if s.success() => None,
        Ok(s) => Some(format!("train exited with {s}")),
        Err(e) => Some(format!("cannot run train: {e}")),
    };
    ClientOutcome { epochs, error }
}

/// Runs every repetition on a fresh fleet and writes the results table to
/// `spec.output` after each repetition. Client seeds are the root seed plus
/// the repetition index.
pub fn run_experiment(spec: &ExperimentSpec, launcher: &Launcher) -> Result<ExperimentReport, ExperimentError> {
    spec.validate()?;
    let mut report = ExperimentReport::default();
    let run_dir = spec.output.with_extension("runs");
    for rep in 0..spec.repetitions {
        let mut fleet = spawn_fleet(&spec.fleet, launcher)?;
        let addr = fleet.addr().to_owned();
        let rep_dir = run_dir.join(format!("rep{rep}"));
        if matches!(launcher, Launcher::Processes { .. }) {
            std::fs::create_dir_all(&rep_dir).map_err(io_err(&rep_dir))?;
        }
        let jobs: Vec<(String, TrainConfig)> = spec
            .clients
            .iter()
            .map(|c| {
                let mut cfg = c.config.clone();
                cfg.seed = spec.seed.wrapping_add(rep as u64);
                cfg.client_id = Some(format!("{}-r{rep}", c.name));
                (c.name.clone(), cfg)
            })
            .collect();
        let run_one = |name: &str, cfg: TrainConfig| match launcher {
            Launcher::InProcess => run_client_in_process(&addr, cfg, spec.client_timeout),
            Launcher::Processes { exe } => run_client_process(exe, &addr, &cfg, &rep_dir, name, spec.client_timeout),
        };
        let outcomes: Vec<ClientOutcome> = match spec.mode {
            Mode::SingleClient => jobs.into_iter().map(|(n, c)| run_one(&n, c)).collect(),
            Mode::MultiTenant => thread::scope(|s| {
                let handles: Vec<_> = jobs
                    .into_iter()
                    .map(|(n, c)| {
                        let run_one = &run_one;
                        s.spawn(move || run_one(&n, c))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join().unwrap_or_else(|_| ClientOutcome {
                            epochs: Vec::new(),
                            error: Some("client thread panicked".into()),
                        })
                    })
                    .collect()
            }),
        };
        fleet.teardown();
        for (c, out) in spec.clients.iter().zip(outcomes) {
            for m in &out.epochs {
                report.rows.push(ResultRow::from_epoch(rep, &c.name, m));
            }
            report
                .rows
                .push(ResultRow::aggregate(rep, &c.name, &out.epochs, out.error.is_none()));
            if let Some(e) = out.error {
                log::error!("client {} failed in repetition {rep}: {e}", c.name);
                report.failures.push((rep, c.name.clone(), e));
            }
        }
        if let Some(dir) = spec.output.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(&spec.output, results_csv(&report.rows)).map_err(io_err(&spec.output))?;
    }
    Ok(report)
}
