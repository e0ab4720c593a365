mod common;

use std::collections::HashMap;
use std::time::Duration;

use common::{bars, spawn_worker, start_manager, wait_until};
use dqulearn::client::{RemoteConfig, RemoteDispatcher};
use dqulearn::trainer::{Dispatcher, LocalDispatcher, Trainer};
use dqulearn::worker::{WorkerError, WorkerHandle};

const P: Duration = Duration::from_millis(100);

#[test]
fn remote_training_matches_local_training() {
    let manager = start_manager(P);
    let addr = manager.addr().to_string();
    let _w1 = spawn_worker(&addr, "w1", 5, P);
    let _w2 = spawn_worker(&addr, "w2", 10, P);

    let (mut cfg, ds) = bars(6, 3);
    cfg.epochs = 2;
    let mut local = Trainer::new(cfg.clone(), ds.clone(), LocalDispatcher).unwrap();
    let local_metrics = local.train().unwrap();

    let mut rc = RemoteConfig::new(addr, "client-a");
    rc.idle_timeout = Some(Duration::from_secs(30));
    let remote_dispatch = RemoteDispatcher::connect(rc).unwrap();
    let mut remote = Trainer::new(cfg, ds, remote_dispatch).unwrap();
    let remote_metrics = remote.train().unwrap();

    for (l, r) in local_metrics.iter().zip(&remote_metrics) {
        assert!((l.loss - r.loss).abs() < 1e-12);
        assert_eq!(l.accuracy, r.accuracy);
        assert_eq!(l.circuits_executed, r.circuits_executed);
    }
    assert_eq!(local.model().all_params(), remote.model().all_params());
}

#[test]
fn remote_results_equal_in_process_execution() {
    let manager = start_manager(P);
    let addr = manager.addr().to_string();
    let _w = spawn_worker(&addr, "solo", 15, P);
    let (cfg, ds) = bars(3, 9);
    let trainer = Trainer::new(cfg, ds, LocalDispatcher).unwrap();
    let bank = trainer.current_bank().unwrap();
    let circuits: Vec<_> = bank.circuits().collect();
    let expected: HashMap<String, f64> = LocalDispatcher.dispatch(&circuits).unwrap();
    let mut remote = RemoteDispatcher::connect(RemoteConfig::new(addr, "c")).unwrap();
    let got = remote.dispatch(&circuits).unwrap();
    assert_eq!(got, expected);
    // a second submission of the same ids is served from the cache
    assert_eq!(remote.dispatch(&circuits).unwrap(), expected);
}

#[test]
fn duplicate_worker_id_is_rejected() {
    let manager = start_manager(P);
    let addr = manager.addr().to_string();
    let _first = spawn_worker(&addr, "dup", 5, P);
    let second = WorkerHandle::spawn(common::worker_config(&addr, "dup", 5, P));
    assert!(wait_until(Duration::from_secs(5), || second.is_finished()));
    assert!(matches!(second.join(), Err(WorkerError::Rejected { .. })));
}

#[test]
fn worker_retries_until_manager_appears() {
    let probe = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = probe.local_addr().unwrap();
    drop(probe);
    let w = WorkerHandle::spawn(common::worker_config(&addr.to_string(), "late", 5, P));
    std::thread::sleep(Duration::from_millis(150));
    assert!(!w.control().is_registered());
    let m = dqulearn::comanager::ManagerConfig {
        heartbeat_period: P,
        ..Default::default()
    };
    let manager =
        dqulearn::comanager::ManagerHandle::start(dqulearn::comanager::ServerConfig::new(addr.to_string(), m)).unwrap();
    assert!(w.wait_registered(Duration::from_secs(5)));
    assert!(wait_until(Duration::from_secs(2), || manager
        .registry()
        .iter()
        .any(|r| r.worker_id == "late")));
}

#[test]
fn worker_exits_when_manager_goes_away() {
    let mut manager = start_manager(P);
    let addr = manager.addr().to_string();
    let w = spawn_worker(&addr, "orphan", 5, P);
    manager.shutdown();
    assert!(wait_until(Duration::from_secs(5), || w.is_finished()));
    assert!(matches!(w.join(), Err(WorkerError::ConnectionLost(_))));
}

#[test]
fn killed_worker_circuits_are_rerun_elsewhere() {
    let manager = start_manager(P);
    let addr = manager.addr().to_string();
    let mut slow = common::worker_config(&addr, "slow", 15, P);
    slow.synthetic_delay = Duration::from_millis(400);
    let slow = WorkerHandle::spawn(slow);
    assert!(slow.wait_registered(Duration::from_secs(5)));

    let (cfg, ds) = bars(2, 4);
    let trainer = Trainer::new(cfg, ds, LocalDispatcher).unwrap();
    let bank = trainer.current_bank().unwrap();
    let circuits: Vec<_> = bank.circuits().take(4).collect();
    let expected = LocalDispatcher.dispatch(&circuits).unwrap();

    let killer = {
        let c = slow.control().clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(150));
            c.kill();
        })
    };
    let addr2 = addr.clone();
    let backup = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(200));
        spawn_worker(&addr2, "backup", 15, P)
    });
    let mut rc = RemoteConfig::new(addr, "c");
    rc.idle_timeout = Some(Duration::from_secs(20));
    let mut remote = RemoteDispatcher::connect(rc).unwrap();
    let got = remote.dispatch(&circuits).unwrap();
    killer.join().unwrap();
    let _backup = backup.join().unwrap();
    assert_eq!(got, expected);
}
