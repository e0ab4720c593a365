use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dqulearn_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as std::ffi::c_char; 256];
    unsafe {
        dql_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn swap_test_through_handles() {
    unsafe {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let plus = [s, 0.0, s, 0.0];
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(dql_state_from_amplitudes(plus.as_ptr(), 2, &mut a), DqlStatus::Ok);
        assert_eq!(dql_state_new(1, &mut b), DqlStatus::Ok);
        let mut f = 0.0;
        assert_eq!(dql_swap_test(a, b, &mut f), DqlStatus::Ok);
        assert!((f - 0.75).abs() < 1e-12);

        let q = [0usize];
        assert_eq!(dql_state_apply(b, DqlGateKind::H, q.as_ptr(), 1, 0.0), DqlStatus::Ok);
        let mut amps = [0.0; 4];
        let mut needed = 0;
        assert_eq!(
            dql_state_amplitudes(b, amps.as_mut_ptr(), 4, &mut needed),
            DqlStatus::Ok
        );
        assert_eq!(needed, 4);
        assert!((amps[0] - s).abs() < 1e-12 && (amps[2] - s).abs() < 1e-12);
        assert_eq!(
            dql_state_amplitudes(b, amps.as_mut_ptr(), 3, &mut needed),
            DqlStatus::BufferTooSmall
        );

        let bad = [3usize];
        assert_eq!(
            dql_state_apply(b, DqlGateKind::Rx, bad.as_ptr(), 1, 1.0),
            DqlStatus::InvalidArgument
        );
        assert!(last_error().contains('3'), "{}", last_error());
        dql_state_free(a);
        dql_state_free(b);
    }
}

#[test]
fn circuits_round_trip_through_the_wire_format() {
    unsafe {
        let id = CString::new("c.ffi").unwrap();
        let angles = [0.3, 1.1, 2.0, 0.4];
        let params = [0.5, 0.1, 1.5, 2.5, 0.7, 0.2];
        let mut c = ptr::null_mut();
        let st = dql_circuit_build(id.as_ptr(), 5, 2, angles.as_ptr(), 4, params.as_ptr(), 6, &mut c);
        assert_eq!(st, DqlStatus::Ok, "{}", last_error());
        assert_eq!(dql_circuit_qubit_demand(c), 5);

        let mut needed = 0;
        assert_eq!(
            dql_circuit_serialize(c, ptr::null_mut(), 0, &mut needed),
            DqlStatus::BufferTooSmall
        );
        let mut bytes = vec![0u8; needed];
        assert_eq!(
            dql_circuit_serialize(c, bytes.as_mut_ptr(), bytes.len(), &mut needed),
            DqlStatus::Ok
        );
        let mut back = ptr::null_mut();
        assert_eq!(
            dql_circuit_deserialize(bytes.as_ptr(), bytes.len(), &mut back),
            DqlStatus::Ok
        );

        let (mut f1, mut f2) = (0.0, 0.0);
        assert_eq!(dql_circuit_execute(c, &mut f1), DqlStatus::Ok);
        assert_eq!(dql_circuit_execute(back, &mut f2), DqlStatus::Ok);
        assert_eq!(f1, f2);
        assert!((0.5..=1.0).contains(&f1));

        let mut name = [0 as std::ffi::c_char; 16];
        assert_eq!(
            dql_circuit_id(back, name.as_mut_ptr(), name.len(), ptr::null_mut()),
            DqlStatus::Ok
        );
        assert_eq!(CStr::from_ptr(name.as_ptr()).to_str().unwrap(), "c.ffi");

        bytes[0] ^= 0xff;
        let mut broken = ptr::null_mut();
        assert_eq!(
            dql_circuit_deserialize(bytes.as_ptr(), bytes.len(), &mut broken),
            DqlStatus::Malformed
        );
        assert!(broken.is_null());
        dql_circuit_free(c);
        dql_circuit_free(back);
    }
}

#[test]
fn comanager_places_requeues_and_evicts() {
    let s = |v: &str| CString::new(v).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(dql_comanager_new(1000, false, &mut m), DqlStatus::Ok);
        assert_eq!(dql_comanager_register(m, s("a").as_ptr(), 10, 0.1, 0), DqlStatus::Ok);
        assert_eq!(dql_comanager_register(m, s("b").as_ptr(), 10, 0.4, 0), DqlStatus::Ok);

        let mut out = DqlAssign::Queued;
        let mut worker = [0 as std::ffi::c_char; 8];
        let assign = |m, id: &str, out: &mut DqlAssign, worker: &mut [std::ffi::c_char; 8]| {
            dql_comanager_assign(
                m,
                s(id).as_ptr(),
                6,
                s("k").as_ptr(),
                10,
                out,
                worker.as_mut_ptr(),
                8,
                ptr::null_mut(),
            )
        };
        assert_eq!(assign(m, "c0", &mut out, &mut worker), DqlStatus::Ok);
        assert_eq!(out, DqlAssign::Assigned);
        assert_eq!(CStr::from_ptr(worker.as_ptr()).to_str().unwrap(), "a");
        assert_eq!(assign(m, "c1", &mut out, &mut worker), DqlStatus::Ok);
        assert_eq!(CStr::from_ptr(worker.as_ptr()).to_str().unwrap(), "b");
        assert_eq!(assign(m, "c2", &mut out, &mut worker), DqlStatus::Ok);
        assert_eq!(out, DqlAssign::Queued);
        assert_eq!(dql_comanager_queue_len(m), 1);

        let mut avail = 0;
        assert_eq!(dql_comanager_available(m, s("a").as_ptr(), &mut avail), DqlStatus::Ok);
        assert_eq!(avail, 4);

        // b keeps reporting, a goes silent and is evicted after 3 s
        let ids = [s("c1")];
        let id_ptrs: Vec<_> = ids.iter().map(|c| c.as_ptr()).collect();
        let demands = [6usize];
        let mut quarantined = true;
        for t in [1000, 2000, 3000] {
            let st = dql_comanager_heartbeat(
                m,
                s("b").as_ptr(),
                id_ptrs.as_ptr(),
                demands.as_ptr(),
                1,
                0.4,
                t,
                &mut quarantined,
            );
            assert_eq!(st, DqlStatus::Ok);
            assert!(!quarantined);
        }
        let mut evicted = 0;
        assert_eq!(dql_comanager_detect_failures(m, 3000, &mut evicted), DqlStatus::Ok);
        assert_eq!(evicted, 0);
        assert_eq!(dql_comanager_detect_failures(m, 3001, &mut evicted), DqlStatus::Ok);
        assert_eq!(evicted, 1);

        let mut delivered = false;
        let st = dql_comanager_complete(m, s("c1").as_ptr(), s("b").as_ptr(), 0.9, 3002, &mut delivered);
        assert_eq!(st, DqlStatus::Ok);
        assert!(delivered);
        assert_eq!(
            dql_comanager_complete(m, s("c1").as_ptr(), s("b").as_ptr(), 0.9, 3003, &mut delivered),
            DqlStatus::Ok
        );
        assert!(!delivered);

        let mut cached = 0.0;
        let st = dql_comanager_assign(
            m,
            s("c1").as_ptr(),
            6,
            s("k").as_ptr(),
            3004,
            &mut out,
            worker.as_mut_ptr(),
            8,
            &mut cached,
        );
        assert_eq!(st, DqlStatus::Ok);
        assert_eq!((out, cached), (DqlAssign::Cached, 0.9));

        assert_eq!(
            dql_comanager_available(m, s("a").as_ptr(), &mut avail),
            DqlStatus::NotFound
        );
        assert_eq!(
            dql_comanager_register(m, s("b").as_ptr(), 10, 0.0, 3005),
            DqlStatus::Conflict
        );
        assert_eq!(
            dql_comanager_register(ptr::null_mut(), s("z").as_ptr(), 1, 0.0, 0),
            DqlStatus::NullPointer
        );
        dql_comanager_free(m);
    }
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/dqulearn.h");
    let text = std::fs::read_to_string(&header).expect("header generated by build.rs");
    for f in [
        "dql_state_new",
        "dql_circuit_deserialize",
        "dql_comanager_assign",
        "dql_last_error",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let lib = target_dir().join("libdqulearn_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping C build: no cc or no {}", lib.display());
        return;
    }
    let out = tempfile::tempdir().unwrap();
    let exe = out.path().join("smoke");
    let status = Command::new("cc")
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C smoke test failed to build");
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok 0.1.0"));
}
