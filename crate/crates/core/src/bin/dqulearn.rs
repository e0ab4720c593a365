use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use dqulearn::client::{RemoteConfig, RemoteDispatcher};
use dqulearn::comanager::{ClockMode, FleetConfig, ManagerConfig, ManagerHandle, ServerConfig};
use dqulearn::experiment::{run_experiment, ExperimentSpec, Launcher};
use dqulearn::trainer::{write_metrics_csv, Dispatcher, EpochMetrics, LocalDispatcher, TrainConfig, Trainer};
use dqulearn::worker::{run_worker, Control, CruMode, CruTrace, WorkerConfig};

#[derive(Parser)]
#[command(name = "dqulearn", version, about = "Distributed variational quantum learning")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the co-manager.
    Manager {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Heartbeat period in seconds.
        #[arg(long, default_value_t = 5.0)]
        heartbeat_period: f64,
        /// Advance time by a fixed step per scheduler tick instead of reading
        /// the wall clock.
        #[arg(long)]
        virtual_clock: bool,
        /// Accept a worker whose free qubits exactly equal the demand.
        #[arg(long)]
        allow_exact_fit: bool,
        #[arg(long)]
        fleet_config: Option<PathBuf>,
        /// Write one line per scheduler event to this file (`-` for stdout).
        #[arg(long)]
        event_log: Option<String>,
    },
    /// Run a quantum worker.
    Worker {
        #[arg(long)]
        id: String,
        #[arg(long)]
        max_qubits: usize,
        #[arg(long, default_value = "127.0.0.1:7878")]
        manager: String,
        /// Heartbeat period in seconds.
        #[arg(long, default_value_t = 5.0)]
        period: f64,
        #[arg(long, value_enum, default_value_t = CruModeArg::Measured)]
        cru_mode: CruModeArg,
        /// `time,value` lines; required with `--cru-mode scripted`.
        #[arg(long)]
        cru_trace: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// Extra milliseconds added to every circuit.
        #[arg(long, default_value_t = 0)]
        synthetic_delay: u64,
    },
    /// Train a classifier, locally or through a co-manager.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Co-manager address; without it circuits run in this process.
        #[arg(long)]
        manager: Option<String>,
        /// Per-epoch metrics CSV, rewritten after every epoch.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        client_id: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Give up when the manager stays silent this many seconds.
        #[arg(long)]
        timeout: Option<f64>,
    },
    /// Run an experiment described by a spec file.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        /// Override the output path from the experiment file.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Run fleet and clients as threads instead of child processes.
        #[arg(long)]
        in_process: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CruModeArg {
    Measured,
    Scripted,
}

fn seconds(v: f64, what: &str) -> Result<Duration, String> {
    if v > 0.0 && v.is_finite() {
        Ok(Duration::from_secs_f64(v))
    } else {
        Err(format!("{what} must be a positive number of seconds, got {v}"))
    }
}

fn manager(
    listen: String,
    period: f64,
    virtual_clock: bool,
    allow_exact_fit: bool,
    fleet_config: Option<PathBuf>,
    event_log: Option<String>,
) -> Result<(), String> {
    let mc = ManagerConfig {
        heartbeat_period: seconds(period, "--heartbeat-period")?,
        allow_exact_fit,
    };
    let mut sc = ServerConfig::new(listen, mc);
    if let Some(p) = fleet_config {
        sc.fleet = FleetConfig::load(&p).map_err(|e| e.to_string())?;
    }
    if virtual_clock {
        sc.clock = ClockMode::Virtual;
    }
    sc.event_log = match event_log.as_deref() {
        None => None,
        Some("-") => Some(Box::new(std::io::stdout())),
        Some(path) => Some(Box::new(
            std::fs::File::create(path).map_err(|e| format!("cannot create {path}: {e}"))?,
        )),
    };
    let handle = ManagerHandle::start(sc).map_err(|e| e.to_string())?;
    println!("listening on {}", handle.addr());
    let _ = std::io::stdout().flush();
    handle.wait();
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn worker(
    id: String,
    max_qubits: usize,
    manager: String,
    period: f64,
    cru_mode: CruModeArg,
    cru_trace: Option<PathBuf>,
    parallelism: usize,
    synthetic_delay: u64,
) -> Result<(), String> {
    let mut wc = WorkerConfig::new(id, max_qubits, manager);
    wc.heartbeat_period = seconds(period, "--period")?;
    wc.parallelism = parallelism;
    wc.synthetic_delay = Duration::from_millis(synthetic_delay);
    wc.cru_mode = match (cru_mode, cru_trace) {
        (CruModeArg::Measured, _) => CruMode::Measured,
        (CruModeArg::Scripted, None) => return Err("--cru-mode scripted needs --cru-trace".into()),
        (CruModeArg::Scripted, Some(p)) => {
            let text = std::fs::read_to_string(&p).map_err(|e| format!("cannot read {}: {e}", p.display()))?;
            CruMode::Scripted(CruTrace::parse(&text).map_err(|e| format!("{}: {e}", p.display()))?)
        }
    };
    run_worker(wc, std::sync::Arc::new(Control::default())).map_err(|e| e.to_string())
}

fn train_with<D: Dispatcher>(mut trainer: Trainer<D>, metrics: Option<PathBuf>) -> Result<(), String> {
    let mut rows: Vec<EpochMetrics> = Vec::new();
    let save = |rows: &[EpochMetrics]| -> Result<(), String> {
        if let Some(path) = &metrics {
            let mut f = std::fs::File::create(path).map_err(|e| format!("cannot create {}: {e}", path.display()))?;
            write_metrics_csv(&mut f, rows).map_err(|e| e.to_string())?;
        }
        Ok(())
    };
    save(&rows)?;
    for _ in 0..trainer.config().epochs {
        let m = trainer.run_epoch().map_err(|e| e.to_string())?;
        println!(
            "epoch {}: loss {:.6} accuracy {:.4} circuits {} wall {:.3}s ({:.1} circuits/s)",
            m.epoch, m.loss, m.accuracy, m.circuits_executed, m.wall_seconds, m.circuits_per_second
        );
        rows.push(m);
        save(&rows)?;
    }
    Ok(())
}

fn train(
    config: PathBuf,
    manager: Option<String>,
    metrics: Option<PathBuf>,
    seed: Option<u64>,
    client_id: Option<String>,
    epochs: Option<usize>,
    timeout: Option<f64>,
) -> Result<(), String> {
    let mut cfg = TrainConfig::load(&config).map_err(|e| e.to_string())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(c) = client_id {
        cfg.client_id = Some(c);
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let dataset = cfg.load_dataset().map_err(|e| e.to_string())?;
    match manager {
        None => train_with(
            Trainer::new(cfg, dataset, LocalDispatcher).map_err(|e| e.to_string())?,
            metrics,
        ),
        Some(addr) => {
            let mut rc = RemoteConfig::new(
                addr.clone(),
                cfg.client_id.clone().unwrap_or_else(|| format!("job{}", cfg.seed)),
            );
            rc.window = cfg.window;
            rc.retries = cfg.retries;
            rc.idle_timeout = timeout.map(|t| seconds(t, "--timeout")).transpose()?;
            let d = RemoteDispatcher::connect(rc).map_err(|e| format!("cannot reach manager at {addr}: {e}"))?;
            train_with(Trainer::new(cfg, dataset, d).map_err(|e| e.to_string())?, metrics)
        }
    }
}

fn experiment(spec: PathBuf, output: Option<PathBuf>, in_process: bool) -> Result<(), String> {
    let mut spec = ExperimentSpec::load(&spec).map_err(|e| e.to_string())?;
    if let Some(o) = output {
        spec.output = o;
    }
    let launcher = if in_process {
        Launcher::InProcess
    } else {
        Launcher::Processes {
            exe: std::env::current_exe().map_err(|e| e.to_string())?,
        }
    };
    let report = run_experiment(&spec, &launcher).map_err(|e| e.to_string())?;
    println!("results written to {}", spec.output.display());
    if report.succeeded() {
        Ok(())
    } else {
        Err(format!("{} client run(s) failed", report.failures.len()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Cmd::Manager {
            listen,
            heartbeat_period,
            virtual_clock,
            allow_exact_fit,
            fleet_config,
            event_log,
        } => manager(
            listen,
            heartbeat_period,
            virtual_clock,
            allow_exact_fit,
            fleet_config,
            event_log,
        ),
        Cmd::Worker {
            id,
            max_qubits,
            manager,
            period,
            cru_mode,
            cru_trace,
            parallelism,
            synthetic_delay,
        } => worker(
            id,
            max_qubits,
            manager,
            period,
            cru_mode,
            cru_trace,
            parallelism,
            synthetic_delay,
        ),
        Cmd::Train {
            config,
            manager,
            metrics,
            seed,
            client_id,
            epochs,
            timeout,
        } => train(config, manager, metrics, seed, client_id, epochs, timeout),
        Cmd::Experiment {
            spec,
            output,
            in_process,
        } => experiment(spec, output, in_process),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
