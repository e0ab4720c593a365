#![allow(dead_code)]

use std::time::{Duration, Instant};

use dqulearn::comanager::{ManagerConfig, ManagerHandle, ServerConfig};
use dqulearn::dataset::{synthetic_bars, Dataset};
use dqulearn::trainer::TrainConfig;
use dqulearn::worker::{WorkerConfig, WorkerHandle};

pub fn start_manager(period: Duration) -> ManagerHandle {
    let m = ManagerConfig {
        heartbeat_period: period,
        ..ManagerConfig::default()
    };
    ManagerHandle::start(ServerConfig::new("127.0.0.1:0", m)).expect("manager starts")
}

pub fn worker_config(addr: &str, id: &str, max_qubits: usize, period: Duration) -> WorkerConfig {
    let mut c = WorkerConfig::new(id, max_qubits, addr);
    c.heartbeat_period = period;
    c.backoff_base = Duration::from_millis(20);
    c.backoff_cap = Duration::from_millis(200);
    c
}

pub fn spawn_worker(addr: &str, id: &str, max_qubits: usize, period: Duration) -> WorkerHandle {
    let w = WorkerHandle::spawn(worker_config(addr, id, max_qubits, period));
    assert!(w.wait_registered(Duration::from_secs(10)), "worker {id} registered");
    w
}

/// Small two-class bars problem.
pub fn bars(samples: usize, seed: u64) -> (TrainConfig, Dataset) {
    let mut cfg = TrainConfig::new(vec![0, 1]);
    cfg.n_filters = 1;
    cfg.alpha = 0.1;
    cfg.seed = seed;
    let mut ds = synthetic_bars(samples, 4, [0, 1], 0.2, seed);
    ds.normalize();
    (cfg, ds)
}

pub fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + timeout;
    while Instant::now() < end {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    f()
}
