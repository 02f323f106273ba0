mod common;

use std::net::{IpAddr, Ipv4Addr};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use common::{entries, latency, node, FaultyBackend, FaultyEmulator};
use proptest::prelude::*;
use qosmark_core::daemon::server::{bind, serve, SocketClient};
use qosmark_core::daemon::{BindingStore, CrashPoint, FixedClock, RetryPolicy, Verdict};
use qosmark_core::nef::DeleteOpts;
use qosmark_core::qos::PriorityClass;
use qosmark_core::{
    AddRequest, Backend, Daemon, DaemonClient, DaemonError, DaemonParts, Emulator, EmulatorClient, FwMarkSpace,
    ProfileTable, QosRequirement, SimBackend, StateDump,
};

const ROOMY: [&str; 3] = ["Kubernetes", "CNI Portmap", "Calico"];

fn ip(i: usize) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(10, 244, (i / 250) as u8 + 1, (i % 250) as u8 + 2))
}

fn add_req(i: usize, requirement: QosRequirement) -> AddRequest {
    AddRequest {
        container_id: format!("c{i}"),
        pod_ip: ip(i),
        requirement,
    }
}

fn quiet_parts(backend: Arc<dyn Backend>, emulator: Arc<dyn EmulatorClient>, reserved: &[&str]) -> DaemonParts {
    let mut parts = DaemonParts::new(ProfileTable::default(), FwMarkSpace::new(entries(reserved)), backend, emulator);
    parts.clock = Arc::new(FixedClock(1_700_000_000_000));
    parts.retry = RetryPolicy {
        attempts: 3,
        backoff: Duration::ZERO,
    };
    parts
}

fn requirement_from(choice: u8) -> QosRequirement {
    match choice % 7 {
        0 => latency(10),
        1 => latency(60),
        2 => latency(300),
        3 => latency(1), // unmappable
        4 => QosRequirement {
            latency_ms: Some(100),
            guaranteed_kbps: Some(500),
            ..Default::default()
        },
        5 => QosRequirement {
            priority_class: Some(PriorityClass::Burstable),
            max_kbps: Some(2000),
            ..Default::default()
        },
        _ => QosRequirement {
            explicit_five_qi: Some(82),
            ..Default::default()
        },
    }
}

#[test]
fn add_check_del_round_trip() {
    let n = node(&ROOMY);
    let b = n.daemon.handle_add(&add_req(0, latency(10))).unwrap();
    assert_eq!(b.profile.five_qi, 80);
    assert_eq!(b.mark.value(), 1);
    assert_eq!(b.mask, 0x1FFF);
    assert_eq!(b.qfi, 1);
    let report = n.daemon.handle_check("c0").unwrap();
    assert_eq!(report.verdict, Verdict::Pass);
    let names: Vec<&str> = report.elements.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(
        names,
        ["binding", "mark-allocation", "mark-rule", "fw-filter", "qos-flow", "emulator-filter"]
    );
    let del = n.daemon.handle_del("c0").unwrap();
    assert!(del.removed);
    assert!(del.drift.is_empty(), "{:?}", del.drift);
    assert_eq!(n.daemon.handle_check("c0").unwrap().verdict, Verdict::PassVacuous);
    assert!(!n.daemon.handle_del("c0").unwrap().removed);
    assert!(n.backend.is_empty());
}

#[test]
fn duplicate_add_rejected_without_side_effects() {
    let n = node(&ROOMY);
    n.daemon.handle_add(&add_req(0, latency(10))).unwrap();
    let before = n.daemon.snapshot_state();
    let err = n.daemon.handle_add(&add_req(0, latency(60))).unwrap_err();
    assert!(matches!(err, DaemonError::DuplicateContainer(_)));
    assert_eq!(n.daemon.snapshot_state(), before);
}

#[test]
fn exhausted_registry_leaves_no_state() {
    let all: Vec<&str> = common::TABLE_MASKS.iter().map(|(n, _)| *n).collect();
    let n = node(&all);
    assert_eq!(n.daemon.free_mask(), 0);
    let before = n.daemon.snapshot_state();
    let err = n.daemon.handle_add(&add_req(0, latency(10))).unwrap_err();
    assert_eq!(err.kind(), "allocation-exhausted");
    assert_eq!(n.daemon.snapshot_state(), before);
    assert!(n.emulator.radio_links().is_empty());
}

#[test]
fn cilium_node_runs_out_after_seven() {
    let n = node(&["Cilium"]);
    for i in 0..7 {
        n.daemon.handle_add(&add_req(i, latency(60))).unwrap();
    }
    let before = n.daemon.snapshot_state();
    let err = n.daemon.handle_add(&add_req(7, latency(60))).unwrap_err();
    assert_eq!(err.kind(), "allocation-exhausted");
    assert_eq!(n.daemon.snapshot_state(), before);
}

#[test]
fn invalid_and_unmappable_requirements_rejected() {
    let n = node(&ROOMY);
    let before = n.daemon.snapshot_state();
    let err = n.daemon.handle_add(&add_req(0, latency(1))).unwrap_err();
    assert_eq!(err.kind(), "qos-unmappable");
    let bad = QosRequirement {
        guaranteed_kbps: Some(900),
        max_kbps: Some(100),
        ..Default::default()
    };
    let err = n.daemon.handle_add(&add_req(1, bad)).unwrap_err();
    assert_eq!(err.kind(), "invalid-requirement");
    assert_eq!(n.daemon.snapshot_state(), before);
}

/// Every injected failure point must leave the four dumps as they were.
#[test]
fn failure_at_each_step_rolls_back() {
    let emu_ops: [&'static str; 4] = ["create_radio_link", "create_pdu_session", "create_qos_flow", "create_filter"];
    for op in emu_ops {
        for primed in [false, true] {
            let inner = Arc::new(Emulator::new());
            let faulty = Arc::new(FaultyEmulator::new(inner.clone()));
            let backend = Arc::new(SimBackend::new());
            let daemon = Daemon::new(quiet_parts(backend.clone(), faulty.clone(), &ROOMY));
            if primed {
                daemon.handle_add(&add_req(100, latency(60))).unwrap();
            }
            let before = daemon.snapshot_state();
            faulty.arm(Some(op));
            let res = daemon.handle_add(&add_req(0, latency(10)));
            faulty.arm(None);
            if primed && (op == "create_radio_link" || op == "create_pdu_session") {
                // The node session already exists, so these calls never happen.
                res.unwrap();
                continue;
            }
            let err = res.unwrap_err();
            assert_eq!(err.kind(), "network-rejection", "{op}");
            let after = daemon.snapshot_state();
            if primed {
                assert_eq!(after, before, "{op} primed");
            } else {
                assert_eq!(after.store, before.store, "{op}");
                assert_eq!(after.allocator, before.allocator, "{op}");
                assert_eq!(after.backend, before.backend, "{op}");
                assert!(inner.qos_flows().is_empty() && inner.filters().is_empty(), "{op}");
            }
        }
    }
    for kind in ["mark", "filter"] {
        let emu = Arc::new(Emulator::new());
        let backend = Arc::new(FaultyBackend::new());
        let daemon = Daemon::new(quiet_parts(backend.clone(), emu.clone(), &ROOMY));
        daemon.handle_add(&add_req(100, latency(60))).unwrap();
        let before = daemon.snapshot_state();
        backend.arm(Some(kind));
        let err = daemon.handle_add(&add_req(0, latency(10))).unwrap_err();
        backend.arm(None);
        assert_eq!(err.kind(), "backend-failure", "{kind}");
        assert_eq!(daemon.snapshot_state(), before, "{kind}");
    }
}

#[test]
fn persistence_failure_on_commit_rolls_back() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state");
    std::fs::create_dir(&state).unwrap();
    let emu = Arc::new(Emulator::new());
    let backend = Arc::new(SimBackend::new());
    let mut parts = quiet_parts(backend.clone(), emu.clone(), &ROOMY);
    parts.store = BindingStore::open(state.join("bindings.state")).unwrap();
    let daemon = Daemon::new(parts);
    daemon.handle_add(&add_req(100, latency(60))).unwrap();
    let before = daemon.snapshot_state();
    std::fs::remove_dir_all(&state).unwrap();
    let err = daemon.handle_add(&add_req(0, latency(10))).unwrap_err();
    assert_eq!(err.kind(), "persistence");
    let after = daemon.snapshot_state();
    assert_eq!(after.allocator, before.allocator);
    assert_eq!(after.backend, before.backend);
    assert_eq!(after.emulator, before.emulator);
}

fn open_node(dir: &Path, backend: Arc<SimBackend>, emu: Arc<Emulator>) -> Daemon {
    let mut parts = quiet_parts(backend, emu, &ROOMY);
    parts.marks = FwMarkSpace::open(entries(&ROOMY), dir.join("fwmark.state")).unwrap();
    parts.store = BindingStore::open(dir.join("bindings.state")).unwrap();
    Daemon::new(parts)
}

#[test]
fn crash_at_any_point_recovers_to_all_or_nothing() {
    for point in CrashPoint::ALL {
        let dir = tempfile::tempdir().unwrap();
        let emu = Arc::new(Emulator::new());
        let backend = Arc::new(SimBackend::new());
        let daemon = open_node(dir.path(), backend.clone(), emu.clone());
        daemon.handle_add(&add_req(100, latency(60))).unwrap();
        let before = daemon.snapshot_state();
        daemon.inject_crash(Some(point));
        let err = daemon.handle_add(&add_req(0, latency(10))).unwrap_err();
        assert_eq!(err, DaemonError::Crashed(point));
        drop(daemon);

        let restarted = open_node(dir.path(), backend.clone(), emu.clone());
        let report = restarted.recover().unwrap();
        let after = restarted.snapshot_state();
        if point == CrashPoint::AfterCommit {
            assert!(report.is_clean(), "{point}: {report:?}");
            assert_eq!(restarted.handle_check("c0").unwrap().verdict, Verdict::Pass, "{point}");
            restarted.handle_del("c0").unwrap();
            assert_eq!(restarted.snapshot_state(), before, "{point}");
        } else {
            assert_eq!(report.rolled_back, vec!["c0".to_string()], "{point}");
            assert_eq!(after, before, "{point}");
            assert!(restarted.binding("c0").is_none());
        }
        assert_eq!(restarted.handle_check("c100").unwrap().verdict, Verdict::Pass, "{point}");
        // A second recovery has nothing left to do.
        assert!(restarted.recover().unwrap().is_clean(), "{point}");
    }
}

#[test]
fn recovery_sweeps_orphans_without_journal() {
    let dir = tempfile::tempdir().unwrap();
    let emu = Arc::new(Emulator::new());
    let backend = Arc::new(SimBackend::new());
    let daemon = open_node(dir.path(), backend.clone(), emu.clone());
    daemon.handle_add(&add_req(1, latency(60))).unwrap();
    let before = daemon.snapshot_state();
    daemon.handle_add(&add_req(2, latency(10))).unwrap();
    drop(daemon);
    // Lose the binding file but keep everything else, as if the store was rolled back by hand.
    let text = std::fs::read_to_string(dir.path().join("bindings.state")).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.contains("\"c2\"")).collect();
    std::fs::write(dir.path().join("bindings.state"), kept.join("\n") + "\n").unwrap();
    let restarted = open_node(dir.path(), backend, emu);
    let report = restarted.recover().unwrap();
    assert_eq!(report.released_marks, vec![2]);
    assert_eq!(report.removed_rules, 2);
    assert_eq!(report.removed_filters.len(), 1);
    assert_eq!(report.removed_flows.len(), 1);
    assert_eq!(restarted.snapshot_state(), before);
}

#[test]
fn del_reports_drift_and_still_cleans_up() {
    let n = node(&ROOMY);
    let b = n.daemon.handle_add(&add_req(0, latency(10))).unwrap();
    n.daemon.handle_add(&add_req(1, latency(60))).unwrap();
    n.emulator.delete_filter(&b.filter_id, DeleteOpts::default()).unwrap();
    n.emulator.delete_qos_flow(&b.flow(), DeleteOpts::default()).unwrap();
    let check = n.daemon.handle_check("c0").unwrap();
    assert_eq!(check.verdict, Verdict::Fail);
    assert_eq!(check.failures(), vec!["qos-flow missing", "emulator-filter missing"]);
    let del = n.daemon.handle_del("c0").unwrap();
    assert!(del.removed);
    assert_eq!(del.drift.len(), 2, "{:?}", del.drift);
    assert!(n.daemon.binding("c0").is_none());
    assert_eq!(n.backend.len(), 2);
}

#[test]
fn teardown_on_empty_releases_session() {
    let emu = Arc::new(Emulator::new());
    let backend = Arc::new(SimBackend::new());
    let mut parts = quiet_parts(backend, emu.clone(), &ROOMY);
    parts.teardown_on_empty = true;
    let daemon = Daemon::new(parts);
    let empty = daemon.snapshot_state();
    daemon.handle_add(&add_req(0, latency(10))).unwrap();
    daemon.handle_add(&add_req(1, latency(10))).unwrap();
    daemon.handle_del("c0").unwrap();
    assert_eq!(emu.pdu_sessions().len(), 1);
    daemon.handle_del("c1").unwrap();
    assert!(emu.pdu_sessions().is_empty());
    assert!(emu.radio_links().is_empty());
    assert_eq!(daemon.snapshot_state(), empty);
    assert!(daemon.node_session().pdu_session_id.is_none());
}

#[test]
fn session_is_reused_and_recreated_when_gone() {
    let n = node(&ROOMY);
    let a = n.daemon.handle_add(&add_req(0, latency(10))).unwrap();
    let b = n.daemon.handle_add(&add_req(1, latency(10))).unwrap();
    assert_eq!(a.pdu_session_id, b.pdu_session_id);
    assert_ne!(a.qfi, b.qfi);
    n.daemon.handle_del("c0").unwrap();
    n.daemon.handle_del("c1").unwrap();
    n.emulator
        .delete_radio_link(&a.radio_link_id, DeleteOpts::IDEMPOTENT)
        .unwrap_or_else(|_| {
            n.emulator.delete_pdu_session(&a.pdu_session_id, DeleteOpts::default()).unwrap();
            n.emulator.delete_radio_link(&a.radio_link_id, DeleteOpts::default()).unwrap();
        });
    let c = n.daemon.handle_add(&add_req(2, latency(10))).unwrap();
    assert_ne!(c.pdu_session_id, a.pdu_session_id);
    assert_eq!(n.daemon.handle_check("c2").unwrap().verdict, Verdict::Pass);
}

#[test]
fn concurrent_adds_get_unique_marks_and_flows() {
    let n = node(&ROOMY);
    let handles: Vec<_> = (0..64)
        .map(|i| {
            let d = n.daemon.clone();
            std::thread::spawn(move || d.handle_add(&add_req(i, latency(10))).unwrap())
        })
        .collect();
    let bindings: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let marks: std::collections::BTreeSet<u32> = bindings.iter().map(|b| b.mark.value()).collect();
    let flows: std::collections::BTreeSet<(String, u8)> =
        bindings.iter().map(|b| (b.pdu_session_id.clone(), b.qfi)).collect();
    assert_eq!(marks.len(), 64);
    assert_eq!(flows.len(), 64);
    assert_eq!(marks, (1..=64).collect());
    for b in &bindings {
        assert_eq!(b.mark.value() & n.daemon.reserved_mask(), 0);
    }
}

enum Op {
    Add(usize, u8),
    Del(usize),
}

fn run_op(d: &Daemon, op: &Op) -> String {
    match op {
        Op::Add(i, r) => match d.handle_add(&add_req(*i, requirement_from(*r))) {
            Ok(b) => format!("ok mark={} qfi={}", b.mark, b.qfi),
            Err(e) => format!("err {}", e.kind()),
        },
        Op::Del(i) => format!("{:?}", d.handle_del(&format!("c{i}")).map(|r| r.removed)),
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// A concurrent batch ends in the same state, with the same per-request
/// outcomes, as some serial order of that batch.
#[test]
fn concurrent_batches_are_serializable() {
    let batches: Vec<Vec<Op>> = vec![
        vec![Op::Add(1, 0), Op::Add(2, 1), Op::Add(3, 4), Op::Del(0)],
        vec![Op::Add(1, 0), Op::Add(1, 1), Op::Del(1), Op::Add(2, 3)],
        vec![Op::Del(0), Op::Add(0, 0), Op::Add(4, 5), Op::Add(5, 6)],
    ];
    for (bi, batch) in batches.iter().enumerate() {
        let fresh = || {
            let n = node(&["Cilium"]);
            n.daemon.handle_add(&add_req(0, latency(60))).unwrap();
            n
        };
        let serial: Vec<(Vec<String>, StateDump)> = permutations(batch.len())
            .into_iter()
            .map(|order| {
                let n = fresh();
                let mut outcomes = vec![String::new(); batch.len()];
                for i in order {
                    outcomes[i] = run_op(&n.daemon, &batch[i]);
                }
                (outcomes, n.daemon.snapshot_state())
            })
            .collect();
        for _round in 0..10 {
            let n = fresh();
            let batch_ref = &batch;
            let daemon = &n.daemon;
            let outcomes: Vec<String> = std::thread::scope(|s| {
                let hs: Vec<_> = batch_ref.iter().map(|op| s.spawn(move || run_op(daemon, op))).collect();
                hs.into_iter().map(|h| h.join().unwrap()).collect()
            });
            let state = n.daemon.snapshot_state();
            assert!(
                serial.iter().any(|(o, s)| *o == outcomes && *s == state),
                "batch {bi}: {outcomes:?} matches no serial order"
            );
        }
    }
}

fn assert_add_del_identity(d: &Daemon, i: usize, r: u8) -> Result<(), TestCaseError> {
    let before = d.snapshot_state();
    match d.handle_add(&add_req(i, requirement_from(r))) {
        Ok(_) => {
            d.handle_del(&format!("c{i}")).unwrap();
        }
        Err(e) => prop_assert!(!matches!(e, DaemonError::Crashed(_))),
    }
    let after = d.snapshot_state();
    prop_assert_eq!(&after.store, &before.store);
    prop_assert_eq!(&after.allocator, &before.allocator);
    prop_assert_eq!(&after.backend, &before.backend);
    prop_assert_eq!(&after.emulator, &before.emulator);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn add_then_del_is_identity_anywhere(
        prelude in prop::collection::vec((any::<bool>(), 0usize..12, any::<u8>()), 0..30),
        probe in any::<u8>(),
    ) {
        let n = node(&ROOMY);
        // Keep the node session alive so only per-flow state is compared.
        n.daemon.handle_add(&add_req(999, latency(300))).unwrap();
        for (is_add, i, r) in &prelude {
            if *is_add {
                let _ = n.daemon.handle_add(&add_req(*i, requirement_from(*r)));
            } else {
                n.daemon.handle_del(&format!("c{i}")).unwrap();
            }
        }
        assert_add_del_identity(&n.daemon, 500, probe)?;
        for b in n.daemon.bindings() {
            prop_assert_eq!(n.daemon.handle_check(&b.container_id).unwrap().verdict, Verdict::Pass);
        }
    }
}

#[test]
fn socket_transport_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sock = dir.path().join("qosd.sock");
    let n = node(&ROOMY);
    let listener = bind(&sock).unwrap();
    let server: Arc<dyn DaemonClient + Send + Sync> = n.daemon.clone();
    std::thread::spawn(move || serve(listener, server));
    let client = SocketClient::new(&sock).with_timeout(Duration::from_secs(5));
    let b = client.add(&add_req(0, latency(10))).unwrap();
    assert_eq!(Some(b.clone()), n.daemon.binding("c0"));
    assert_eq!(client.list_bindings().unwrap(), vec![b]);
    assert_eq!(client.check("c0").unwrap().verdict, Verdict::Pass);
    assert_eq!(client.snapshot().unwrap(), n.daemon.snapshot_state());
    let err = client.add(&add_req(0, latency(10))).unwrap_err();
    assert_eq!(err.kind(), "duplicate-container");
    assert!(client.del("c0").unwrap().removed);
    assert!(client.list_bindings().unwrap().is_empty());
}

#[test]
fn missing_socket_is_unreachable() {
    let dir = tempfile::tempdir().unwrap();
    let client = SocketClient::new(dir.path().join("absent.sock"));
    assert_eq!(client.list_bindings().unwrap_err().kind(), "daemon-unreachable");
}

#[test]
fn recovery_reinstalls_rules_lost_with_the_backend() {
    let dir = tempfile::tempdir().unwrap();
    let emu = Arc::new(Emulator::new());
    let daemon = open_node(dir.path(), Arc::new(SimBackend::new()), emu.clone());
    daemon.handle_add(&add_req(1, latency(10))).unwrap();
    let before = daemon.snapshot_state();
    drop(daemon);
    let restarted = open_node(dir.path(), Arc::new(SimBackend::new()), emu);
    assert_eq!(restarted.handle_check("c1").unwrap().verdict, Verdict::Fail);
    let report = restarted.recover().unwrap();
    assert_eq!(report.reinstalled_rules, 2);
    assert_eq!(restarted.snapshot_state(), before);
    assert_eq!(restarted.handle_check("c1").unwrap().verdict, Verdict::Pass);
}
