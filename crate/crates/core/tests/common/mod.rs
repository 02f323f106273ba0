//! Reference implementations the library is checked against. Each is written
//! from the documented behavior, shares no code with the library, and favors
//! obviousness over speed.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::Arc;

use qosmark_core::daemon::{DaemonParts, FixedClock, RetryPolicy};
use qosmark_core::fwmark::{FwMarkSpace, ReservedEntry};
use qosmark_core::qos::{PriorityClass, ResourceType};
use qosmark_core::{Daemon, Emulator, FiveQiProfile, ProfileTable, QosRequirement, SimBackend};

/// The seven registry masks, typed in by hand.
pub const TABLE_MASKS: [(&str, u32); 7] = [
    ("Cilium", 0xFFFF_1FFF),
    ("AWS CNI", 0x0000_0080),
    ("CNI Portmap", 0x0000_2000),
    ("Kubernetes", 0x0000_C000),
    ("Calico", 0xFFFF_0000),
    ("Weave Net", 0x0006_0000),
    ("Tailscale", 0x000C_0000),
];

/// OR of the reserved masks, bit by bit.
pub fn or_oracle(masks: &[u32]) -> u32 {
    let mut out = 0u32;
    for bit in 0..32 {
        if masks.iter().any(|m| m >> bit & 1 == 1) {
            out |= 1 << bit;
        }
    }
    out
}

/// Every nonzero submask of `free`, ascending, by scanning all 32-bit values
/// below the mask's top bit.
pub fn enumerate_submasks(free: u32) -> Vec<u32> {
    if free == 0 {
        return Vec::new();
    }
    let top = 32 - free.leading_zeros();
    let limit: u64 = 1u64 << top;
    (1..limit)
        .map(|v| v as u32)
        .filter(|v| v & !free == 0)
        .collect()
}

/// Brute-force profile choice, following the documented mapping rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleMapping {
    Profile(u8),
    Unmappable,
    UnknownFiveQi(u8),
}

pub fn mapping_oracle(req: &QosRequirement, profiles: &[FiveQiProfile], default: u8) -> OracleMapping {
    if let Some(q) = req.explicit_five_qi {
        return if profiles.iter().any(|p| p.five_qi == q) {
            OracleMapping::Profile(q)
        } else {
            OracleMapping::UnknownFiveQi(q)
        };
    }
    let only_best_effort = req.latency_ms.is_none()
        && req.guaranteed_kbps.is_none()
        && (req.priority_class.is_none() || req.priority_class == Some(PriorityClass::BestEffort));
    if only_best_effort {
        return OracleMapping::Profile(default);
    }
    let needs_gbr = req.guaranteed_kbps.is_some() || req.priority_class == Some(PriorityClass::Guaranteed);
    let must_be_non_gbr = matches!(
        req.priority_class,
        Some(PriorityClass::Burstable) | Some(PriorityClass::BestEffort)
    );
    if needs_gbr && must_be_non_gbr {
        return OracleMapping::Unmappable;
    }
    let wanted = if needs_gbr { ResourceType::Gbr } else { ResourceType::NonGbr };
    let mut best: Option<&FiveQiProfile> = None;
    for p in profiles {
        if p.resource_type != wanted {
            continue;
        }
        if let Some(l) = req.latency_ms {
            if p.packet_delay_budget_ms > l {
                continue;
            }
        }
        let better = match best {
            None => true,
            Some(b) => {
                if p.packet_delay_budget_ms != b.packet_delay_budget_ms {
                    p.packet_delay_budget_ms > b.packet_delay_budget_ms
                } else if p.priority_level != b.priority_level {
                    p.priority_level < b.priority_level
                } else {
                    p.five_qi < b.five_qi
                }
            }
        };
        if better {
            best = Some(p);
        }
    }
    match best {
        Some(p) => OracleMapping::Profile(p.five_qi),
        None => OracleMapping::Unmappable,
    }
}

/// Token bucket stepped in whole microseconds. Tokens are millibits, so a
/// rate of R kbit/s adds exactly R tokens per tick. Returns each packet's
/// departure in microseconds.
///
/// `packets` are (send time in µs, size in bytes), in send order.
pub fn token_bucket_oracle(rate_kbps: u64, window_ms: u64, start_empty: bool, packets: &[(u64, u64)]) -> Vec<u64> {
    let capacity = (rate_kbps * window_ms * 1000) as i64;
    let mut tokens = if start_empty { 0 } else { capacity };
    let mut queue: VecDeque<(usize, i64)> = VecDeque::new();
    let mut departures = vec![u64::MAX; packets.len()];
    let mut next = 0usize;
    let mut t: u64 = 0;
    let mut done = 0usize;
    while done < packets.len() {
        if t > 0 {
            tokens = (tokens + rate_kbps as i64).min(capacity);
        }
        while next < packets.len() && packets[next].0 == t {
            queue.push_back((next, (packets[next].1 * 8000) as i64));
            next += 1;
        }
        while let Some(&(idx, size)) = queue.front() {
            if tokens >= size.min(capacity) {
                tokens -= size;
                departures[idx] = t;
                queue.pop_front();
                done += 1;
            } else {
                break;
            }
        }
        t += 1;
    }
    departures
}

pub fn non_gbr(five_qi: u8, budget: u32, prio: u32) -> FiveQiProfile {
    FiveQiProfile {
        five_qi,
        resource_type: ResourceType::NonGbr,
        priority_level: prio,
        packet_delay_budget_ms: budget,
        packet_error_rate: 1e-6,
        averaging_window_ms: None,
        max_data_burst_bytes: None,
    }
}

pub fn gbr(five_qi: u8, budget: u32, prio: u32) -> FiveQiProfile {
    FiveQiProfile {
        five_qi,
        resource_type: ResourceType::Gbr,
        priority_level: prio,
        packet_delay_budget_ms: budget,
        packet_error_rate: 1e-4,
        averaging_window_ms: Some(2000),
        max_data_burst_bytes: None,
    }
}

pub fn entries(names: &[&str]) -> Vec<ReservedEntry> {
    names
        .iter()
        .map(|n| {
            let (name, mask) = TABLE_MASKS.iter().find(|(m, _)| m == n).expect("known entry");
            ReservedEntry::new(*name, *mask)
        })
        .collect()
}

pub struct Node {
    pub daemon: Arc<Daemon>,
    pub emulator: Arc<Emulator>,
    pub backend: Arc<SimBackend>,
}

/// In-memory daemon with deterministic timestamps and no retry sleeps.
pub fn node(reserved: &[&str]) -> Node {
    let emulator = Arc::new(Emulator::new());
    let backend = Arc::new(SimBackend::new());
    let mut parts = DaemonParts::new(
        ProfileTable::default(),
        FwMarkSpace::new(entries(reserved)),
        backend.clone(),
        emulator.clone(),
    );
    parts.clock = Arc::new(FixedClock(1_700_000_000_000));
    parts.retry = RetryPolicy {
        attempts: 3,
        backoff: std::time::Duration::ZERO,
    };
    Node {
        daemon: Arc::new(Daemon::new(parts)),
        emulator,
        backend,
    }
}

pub fn latency(ms: u32) -> QosRequirement {
    QosRequirement {
        latency_ms: Some(ms),
        ..Default::default()
    }
}

/// Emulator wrapper that fails the named operation while armed.
pub struct FaultyEmulator {
    pub inner: Arc<Emulator>,
    pub fail_on: std::sync::Mutex<Option<&'static str>>,
}

impl FaultyEmulator {
    pub fn new(inner: Arc<Emulator>) -> Self {
        Self {
            inner,
            fail_on: std::sync::Mutex::new(None),
        }
    }

    pub fn arm(&self, op: Option<&'static str>) {
        *self.fail_on.lock().unwrap() = op;
    }

    fn gate(&self, op: &'static str) -> Result<(), qosmark_core::EmulatorError> {
        if *self.fail_on.lock().unwrap() == Some(op) {
            return Err(qosmark_core::EmulatorError::Invalid(format!("injected failure in {op}")));
        }
        Ok(())
    }
}

mod faulty_impl {
    use super::FaultyEmulator;
    use qosmark_core::nef::*;
    use qosmark_core::FlowRef;

    impl EmulatorClient for FaultyEmulator {
        fn create_radio_link(&self) -> Result<RadioLink, EmulatorError> {
            self.gate("create_radio_link")?;
            EmulatorClient::create_radio_link(self.inner.as_ref())
        }
        fn delete_radio_link(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError> {
            self.gate("delete_radio_link")?;
            EmulatorClient::delete_radio_link(self.inner.as_ref(), id, opts)
        }
        fn radio_links(&self) -> Result<Vec<RadioLink>, EmulatorError> {
            EmulatorClient::radio_links(self.inner.as_ref())
        }
        fn create_pdu_session(&self, radio_link_id: &str) -> Result<PduSession, EmulatorError> {
            self.gate("create_pdu_session")?;
            EmulatorClient::create_pdu_session(self.inner.as_ref(), radio_link_id)
        }
        fn delete_pdu_session(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError> {
            EmulatorClient::delete_pdu_session(self.inner.as_ref(), id, opts)
        }
        fn pdu_sessions(&self) -> Result<Vec<PduSession>, EmulatorError> {
            EmulatorClient::pdu_sessions(self.inner.as_ref())
        }
        fn create_qos_flow(&self, req: &CreateFlow) -> Result<QosFlow, EmulatorError> {
            self.gate("create_qos_flow")?;
            EmulatorClient::create_qos_flow(self.inner.as_ref(), req)
        }
        fn delete_qos_flow(&self, flow: &FlowRef, opts: DeleteOpts) -> Result<(), EmulatorError> {
            self.gate("delete_qos_flow")?;
            EmulatorClient::delete_qos_flow(self.inner.as_ref(), flow, opts)
        }
        fn qos_flows(&self) -> Result<Vec<QosFlow>, EmulatorError> {
            EmulatorClient::qos_flows(self.inner.as_ref())
        }
        fn create_filter(&self, req: &CreateFilter) -> Result<MarkFilter, EmulatorError> {
            self.gate("create_filter")?;
            EmulatorClient::create_filter(self.inner.as_ref(), req)
        }
        fn delete_filter(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError> {
            self.gate("delete_filter")?;
            EmulatorClient::delete_filter(self.inner.as_ref(), id, opts)
        }
        fn filters(&self) -> Result<Vec<MarkFilter>, EmulatorError> {
            EmulatorClient::filters(self.inner.as_ref())
        }
        fn classify(&self, mark: u32) -> Result<Classification, EmulatorError> {
            EmulatorClient::classify(self.inner.as_ref(), mark)
        }
        fn transmit(&self, req: &TransmitRequest) -> Result<Delivery, EmulatorError> {
            EmulatorClient::transmit(self.inner.as_ref(), req)
        }
        fn dump_tree(&self) -> Result<String, EmulatorError> {
            EmulatorClient::dump_tree(self.inner.as_ref())
        }
    }
}

/// Backend wrapper that fails installs of the given rule kind while armed.
pub struct FaultyBackend {
    pub inner: SimBackend,
    pub fail_install: std::sync::Mutex<Option<&'static str>>,
}

impl FaultyBackend {
    pub fn new() -> Self {
        Self {
            inner: SimBackend::new(),
            fail_install: std::sync::Mutex::new(None),
        }
    }

    pub fn arm(&self, kind: Option<&'static str>) {
        *self.fail_install.lock().unwrap() = kind;
    }
}

impl qosmark_core::Backend for FaultyBackend {
    fn install(&self, rule: &qosmark_core::enforce::Rule) -> Result<String, qosmark_core::enforce::BackendError> {
        let kind = match rule {
            qosmark_core::enforce::Rule::Mark(_) => "mark",
            qosmark_core::enforce::Rule::Filter(_) => "filter",
        };
        if *self.fail_install.lock().unwrap() == Some(kind) {
            return Err(qosmark_core::enforce::BackendError::Failed(format!("injected {kind} failure")));
        }
        self.inner.install(rule)
    }
    fn remove(
        &self,
        rule: &qosmark_core::enforce::Rule,
    ) -> Result<qosmark_core::enforce::RemoveOutcome, qosmark_core::enforce::BackendError> {
        self.inner.remove(rule)
    }
    fn contains(&self, rule: &qosmark_core::enforce::Rule) -> bool {
        self.inner.contains(rule)
    }
    fn rules(&self) -> Vec<qosmark_core::enforce::Rule> {
        self.inner.rules()
    }
    fn dump(&self) -> String {
        self.inner.dump()
    }
}
