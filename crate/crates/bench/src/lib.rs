//! Fixtures shared by the benchmarks.

use std::net::{IpAddr, Ipv4Addr};
use std::sync::Arc;

use qosmark_core::daemon::FixedClock;
use qosmark_core::nef::{CreateFilter, CreateFlow};
use qosmark_core::qos::PriorityClass;
use qosmark_core::{
    AddRequest, Daemon, DaemonParts, Emulator, FwMarkSpace, MarkRuleSpec, ProfileTable, QosRequirement, ReservedEntry,
    SimBackend,
};

/// Kubernetes, CNI Portmap and Calico: 13 free low bits.
pub fn roomy_space() -> FwMarkSpace {
    FwMarkSpace::new(vec![
        ReservedEntry::new("Kubernetes", 0x0000_C000),
        ReservedEntry::new("CNI Portmap", 0x0000_2000),
        ReservedEntry::new("Calico", 0xFFFF_0000),
    ])
}

pub fn pod_ip(i: usize) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(10, 244, (i / 250) as u8 + 1, (i % 250) as u8 + 2))
}

/// A spread of requirements touching every mapping branch.
pub fn requirements() -> Vec<QosRequirement> {
    vec![
        QosRequirement {
            latency_ms: Some(10),
            ..Default::default()
        },
        QosRequirement {
            latency_ms: Some(100),
            guaranteed_kbps: Some(500),
            ..Default::default()
        },
        QosRequirement {
            priority_class: Some(PriorityClass::Burstable),
            max_kbps: Some(2000),
            ..Default::default()
        },
        QosRequirement {
            latency_ms: Some(1),
            ..Default::default()
        },
        QosRequirement::default(),
    ]
}

/// An emulator with one session holding `flows` flows, each behind a fwmark filter.
pub fn populated_emulator(flows: u32) -> Emulator {
    let emu = Emulator::new();
    let link = emu.create_radio_link();
    let session = emu.create_pdu_session(&link.id).expect("session");
    for i in 0..flows {
        let flow = emu
            .create_qos_flow(&CreateFlow {
                session_id: session.id.clone(),
                qfi: None,
                five_qi: 9,
                delay_ms: 10.0,
                rate_kbps: None,
                averaging_window_ms: None,
                start_empty: false,
            })
            .expect("flow");
        emu.create_filter(&CreateFilter {
            mark: i + 1,
            mask: 0x1FFF,
            session_id: flow.session_id.clone(),
            qfi: flow.qfi,
        })
        .expect("filter");
    }
    emu
}

/// Mark rules for `n` pods.
pub fn mark_rules(n: usize) -> Vec<MarkRuleSpec> {
    (0..n)
        .map(|i| MarkRuleSpec {
            source: pod_ip(i),
            mark: i as u32 + 1,
            mask: 0x1FFF,
        })
        .collect()
}

pub fn daemon() -> Daemon {
    let mut parts = DaemonParts::new(
        ProfileTable::default(),
        roomy_space(),
        Arc::new(SimBackend::new()),
        Arc::new(Emulator::new()),
    );
    parts.clock = Arc::new(FixedClock(0));
    Daemon::new(parts)
}

pub fn add_request(i: usize) -> AddRequest {
    AddRequest {
        container_id: format!("bench-{i}"),
        pod_ip: pod_ip(i),
        requirement: QosRequirement {
            latency_ms: Some(10),
            ..Default::default()
        },
    }
}
