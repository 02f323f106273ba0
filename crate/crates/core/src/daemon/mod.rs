//! Node daemon: owns the mark space, the binding store, the enforcement
//! backend and the 5G-stack client, and runs ADD/DEL/CHECK as transactions.
//!
//! An ADD runs: map requirement, allocate mark, ensure the node's radio link
//! and PDU session, create the QoS flow, apply the enforcement plan, create the
//! emulator filter, commit. Each acquisition is journaled in the store before
//! the next step starts, so a restart can undo a half-finished ADD. On an
//! ordinary failure the completed steps are undone in reverse order at once.
//!
//! ADD and DEL hold a node-wide transaction lock. The mark allocator has its
//! own lock, held only while allocating.

pub mod config;
pub mod server;
mod store;

use std::fmt;
use std::net::IpAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::enforce::{self, Backend, FlowRef, PlanRequest, Rule};
use crate::fwmark::{FwMark, FwMarkError, FwMarkSpace};
use crate::nef::{CreateFilter, CreateFlow, DeleteOpts, EmulatorClient, EmulatorError, DEFAULT_AVERAGING_WINDOW_MS};
use crate::qos::{map_requirement, ProfileTable, QosRequirement};

pub use store::{Acquired, BindingStore, FlowBinding, NodeSession, PendingAdd, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DaemonError {
    #[error("container {0} already has a binding")]
    DuplicateContainer(String),
    #[error("invalid QoS requirement: {0}")]
    InvalidRequirement(String),
    #[error("no 5QI profile satisfies the requirement: {0}")]
    Unmappable(String),
    #[error("fwmark allocation failed: {0}")]
    Exhausted(String),
    #[error("5G network rejected the request: {0}")]
    NetworkRejection(String),
    #[error("enforcement backend failed: {0}")]
    BackendFailure(String),
    #[error("state persistence failed: {0}")]
    Persistence(String),
    #[error("crash injected at {0}")]
    Crashed(CrashPoint),
    #[error("daemon unreachable: {0}")]
    Unreachable(String),
    #[error("bad daemon response: {0}")]
    Protocol(String),
}

impl DaemonError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::DuplicateContainer(_) => "duplicate-container",
            Self::InvalidRequirement(_) => "invalid-requirement",
            Self::Unmappable(_) => "qos-unmappable",
            Self::Exhausted(_) => "allocation-exhausted",
            Self::NetworkRejection(_) => "network-rejection",
            Self::BackendFailure(_) => "backend-failure",
            Self::Persistence(_) => "persistence",
            Self::Crashed(_) => "crashed",
            Self::Unreachable(_) => "daemon-unreachable",
            Self::Protocol(_) => "protocol",
        }
    }

    pub fn message(&self) -> String {
        match self {
            Self::DuplicateContainer(m)
            | Self::InvalidRequirement(m)
            | Self::Unmappable(m)
            | Self::Exhausted(m)
            | Self::NetworkRejection(m)
            | Self::BackendFailure(m)
            | Self::Persistence(m)
            | Self::Unreachable(m)
            | Self::Protocol(m) => m.clone(),
            Self::Crashed(p) => p.to_string(),
        }
    }

    pub fn from_kind(kind: &str, message: String) -> Self {
        match kind {
            "duplicate-container" => Self::DuplicateContainer(message),
            "invalid-requirement" => Self::InvalidRequirement(message),
            "qos-unmappable" => Self::Unmappable(message),
            "allocation-exhausted" => Self::Exhausted(message),
            "network-rejection" => Self::NetworkRejection(message),
            "backend-failure" => Self::BackendFailure(message),
            "persistence" => Self::Persistence(message),
            "daemon-unreachable" => Self::Unreachable(message),
            _ => Self::Protocol(format!("{kind}: {message}")),
        }
    }
}

impl From<StoreError> for DaemonError {
    fn from(e: StoreError) -> Self {
        Self::Persistence(e.to_string())
    }
}

/// Step boundaries inside ADD where a test can simulate the process dying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrashPoint {
    AfterBegin,
    AfterMark,
    AfterSession,
    AfterFlow,
    AfterEnforcement,
    AfterFilter,
    AfterCommit,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 7] = [
        CrashPoint::AfterBegin,
        CrashPoint::AfterMark,
        CrashPoint::AfterSession,
        CrashPoint::AfterFlow,
        CrashPoint::AfterEnforcement,
        CrashPoint::AfterFilter,
        CrashPoint::AfterCommit,
    ];
}

impl fmt::Display for CrashPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AfterBegin => "after-begin",
            Self::AfterMark => "after-mark",
            Self::AfterSession => "after-session",
            Self::AfterFlow => "after-flow",
            Self::AfterEnforcement => "after-enforcement",
            Self::AfterFilter => "after-filter",
            Self::AfterCommit => "after-commit",
        })
    }
}

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Always reports the same instant.
#[derive(Debug, Default, Clone, Copy)]
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff: Duration::from_millis(100),
        }
    }
}

impl RetryPolicy {
    fn run<T, E: fmt::Display>(&self, what: &str, mut op: impl FnMut() -> Result<T, E>) -> Result<T, String> {
        let attempts = self.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    last = format!("{what}: {e}");
                    warn!("attempt {attempt}/{attempts} failed: {last}");
                    if attempt < attempts {
                        std::thread::sleep(self.backoff);
                    }
                }
            }
        }
        Err(last)
    }
}

/// Everything a daemon is assembled from.
pub struct DaemonParts {
    pub table: ProfileTable,
    pub marks: FwMarkSpace,
    pub store: BindingStore,
    pub backend: Arc<dyn Backend>,
    pub emulator: Arc<dyn EmulatorClient>,
    pub phys_interface: String,
    pub teardown_on_empty: bool,
    pub retry: RetryPolicy,
    pub clock: Arc<dyn Clock>,
}

impl DaemonParts {
    /// In-memory parts with default settings.
    pub fn new(
        table: ProfileTable,
        marks: FwMarkSpace,
        backend: Arc<dyn Backend>,
        emulator: Arc<dyn EmulatorClient>,
    ) -> Self {
        Self {
            table,
            marks,
            store: BindingStore::in_memory(),
            backend,
            emulator,
            phys_interface: "eth0".to_string(),
            teardown_on_empty: false,
            retry: RetryPolicy::default(),
            clock: Arc::new(SystemClock),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AddRequest {
    pub container_id: String,
    pub pod_ip: IpAddr,
    pub requirement: QosRequirement,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DelReport {
    pub removed: bool,
    /// Teardown steps that found their target already gone or kept failing.
    pub drift: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    /// No binding and nothing left behind.
    PassVacuous,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckElement {
    pub name: String,
    pub present: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckReport {
    pub container_id: String,
    pub verdict: Verdict,
    pub elements: Vec<CheckElement>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.verdict != Verdict::Fail
    }

    /// "qos-flow missing" style lines for every absent element.
    pub fn failures(&self) -> Vec<String> {
        self.elements
            .iter()
            .filter(|e| !e.present)
            .map(|e| format!("{} missing", e.name))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDump {
    pub store: String,
    pub allocator: String,
    pub backend: String,
    pub emulator: String,
}

impl StateDump {
    pub fn render(&self) -> String {
        format!(
            "[store]\n{}[allocator]\n{}[backend]\n{}[emulator]\n{}",
            self.store, self.allocator, self.backend, self.emulator
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RecoveryReport {
    pub rolled_back: Vec<String>,
    pub released_marks: Vec<u32>,
    pub removed_rules: usize,
    /// Rules of committed bindings that were missing and got installed again.
    pub reinstalled_rules: usize,
    pub removed_filters: Vec<String>,
    pub removed_flows: Vec<String>,
}

impl RecoveryReport {
    pub fn is_clean(&self) -> bool {
        *self == Self::default()
    }
}

pub struct Daemon {
    table: ProfileTable,
    marks: Mutex<FwMarkSpace>,
    store: Mutex<BindingStore>,
    backend: Arc<dyn Backend>,
    emulator: Arc<dyn EmulatorClient>,
    phys_interface: String,
    teardown_on_empty: bool,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
    txn: Mutex<()>,
    crash_at: Mutex<Option<CrashPoint>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn rejected(e: EmulatorError) -> DaemonError {
    DaemonError::NetworkRejection(e.to_string())
}

fn gone_ok(r: Result<(), EmulatorError>) -> Result<(), EmulatorError> {
    match r {
        Err(EmulatorError::NotFound(_)) => Ok(()),
        other => other,
    }
}

impl Daemon {
    pub fn new(parts: DaemonParts) -> Self {
        Self {
            table: parts.table,
            marks: Mutex::new(parts.marks),
            store: Mutex::new(parts.store),
            backend: parts.backend,
            emulator: parts.emulator,
            phys_interface: parts.phys_interface,
            teardown_on_empty: parts.teardown_on_empty,
            retry: parts.retry,
            clock: parts.clock,
            txn: Mutex::new(()),
            crash_at: Mutex::new(None),
        }
    }

    pub fn profile_table(&self) -> &ProfileTable {
        &self.table
    }

    pub fn free_mask(&self) -> u32 {
        lock(&self.marks).free_mask()
    }

    pub fn reserved_mask(&self) -> u32 {
        lock(&self.marks).reserved_mask()
    }

    pub fn bindings(&self) -> Vec<FlowBinding> {
        lock(&self.store).bindings().cloned().collect()
    }

    pub fn binding(&self, container_id: &str) -> Option<FlowBinding> {
        lock(&self.store).get(container_id).cloned()
    }

    pub fn node_session(&self) -> NodeSession {
        lock(&self.store).node().clone()
    }

    /// Makes the next ADD stop dead at `point`, leaving its journal and every
    /// resource it holds in place, the way a killed process would.
    pub fn inject_crash(&self, point: Option<CrashPoint>) {
        *lock(&self.crash_at) = point;
    }

    fn crash_check(&self, point: CrashPoint) -> Result<(), DaemonError> {
        let mut armed = lock(&self.crash_at);
        if *armed == Some(point) {
            *armed = None;
            return Err(DaemonError::Crashed(point));
        }
        Ok(())
    }

    pub fn handle_add(&self, req: &AddRequest) -> Result<FlowBinding, DaemonError> {
        let _txn = lock(&self.txn);
        let id = req.container_id.as_str();
        {
            let store = lock(&self.store);
            if store.get(id).is_some() || store.is_pending(id) {
                return Err(DaemonError::DuplicateContainer(id.to_string()));
            }
        }
        req.requirement
            .validate()
            .map_err(|e| DaemonError::InvalidRequirement(e.to_string()))?;
        let profile = map_requirement(&req.requirement, &self.table)
            .map_err(|e| DaemonError::Unmappable(e.to_string()))?
            .clone();

        lock(&self.store).begin(id, req.pod_ip)?;
        let mut acquired: Vec<Acquired> = Vec::new();
        let result = self.add_steps(req, profile, &mut acquired);
        match result {
            Ok(binding) => Ok(binding),
            Err(DaemonError::Crashed(p)) => Err(DaemonError::Crashed(p)),
            Err(e) => {
                warn!("ADD {id} failed: {e}; rolling back {} step(s)", acquired.len());
                self.rollback(&acquired);
                if let Err(pe) = lock(&self.store).abort(id) {
                    warn!("could not clear journal for {id}: {pe}");
                }
                Err(e)
            }
        }
    }

    fn journal(&self, id: &str, item: Acquired, acquired: &mut Vec<Acquired>) -> Result<(), DaemonError> {
        acquired.push(item.clone());
        lock(&self.store).record(id, item)?;
        Ok(())
    }

    fn add_steps(
        &self,
        req: &AddRequest,
        profile: crate::qos::FiveQiProfile,
        acquired: &mut Vec<Acquired>,
    ) -> Result<FlowBinding, DaemonError> {
        let id = req.container_id.as_str();
        self.crash_check(CrashPoint::AfterBegin)?;

        let (mark, free_mask) = {
            let mut marks = lock(&self.marks);
            let mark = marks.allocate().map_err(|e| match e {
                FwMarkError::Exhausted { .. } => DaemonError::Exhausted(e.to_string()),
                other => DaemonError::Persistence(other.to_string()),
            })?;
            (mark, marks.free_mask())
        };
        self.journal(id, Acquired::Mark { mark }, acquired)?;
        self.crash_check(CrashPoint::AfterMark)?;

        let (link_id, session_id) = self.ensure_session()?;
        self.crash_check(CrashPoint::AfterSession)?;

        let mut create = CreateFlow::new(
            session_id.clone(),
            profile.five_qi,
            f64::from(profile.packet_delay_budget_ms),
        );
        create.rate_kbps = req
            .requirement
            .max_kbps
            .or(req.requirement.guaranteed_kbps)
            .map(f64::from);
        if create.rate_kbps.is_some() {
            create.averaging_window_ms = Some(profile.averaging_window_ms.unwrap_or(DEFAULT_AVERAGING_WINDOW_MS));
        }
        let flow = self.emulator.create_qos_flow(&create).map_err(rejected)?.flow_ref();
        self.journal(id, Acquired::Flow { flow: flow.clone() }, acquired)?;
        self.crash_check(CrashPoint::AfterFlow)?;

        let plan = enforce::build_plan(
            &PlanRequest {
                pod_ip: Some(req.pod_ip),
                mark: Some(mark.value()),
                flow: Some(flow.clone()),
            },
            free_mask,
            &self.phys_interface,
        )
        .map_err(|e| DaemonError::BackendFailure(e.to_string()))?;
        let receipt = enforce::apply(&plan, self.backend.as_ref()).map_err(|e| DaemonError::BackendFailure(e.to_string()))?;
        self.journal(id, Acquired::Enforcement { receipt: receipt.clone() }, acquired)?;
        self.crash_check(CrashPoint::AfterEnforcement)?;

        let filter = self
            .emulator
            .create_filter(&CreateFilter {
                mark: mark.value(),
                mask: free_mask,
                session_id: flow.session_id.clone(),
                qfi: flow.qfi,
            })
            .map_err(rejected)?;
        self.journal(id, Acquired::Filter { id: filter.id.clone() }, acquired)?;
        self.crash_check(CrashPoint::AfterFilter)?;

        let binding = FlowBinding {
            container_id: id.to_string(),
            pod_ip: req.pod_ip,
            mark,
            mask: free_mask,
            requirement: req.requirement.clone(),
            profile,
            radio_link_id: link_id,
            pdu_session_id: session_id,
            qfi: flow.qfi,
            filter_id: filter.id,
            enforcement: receipt,
            created_at: self.clock.now_ms(),
        };
        lock(&self.store).commit(binding.clone())?;
        info!("bound {id} to mark {} and {}", binding.mark, binding.flow());
        self.crash_check(CrashPoint::AfterCommit)?;
        Ok(binding)
    }

    /// Returns the node's (radio link, PDU session), creating whichever is
    /// missing. Called with the transaction lock held.
    fn ensure_session(&self) -> Result<(String, String), DaemonError> {
        let mut node = lock(&self.store).node().clone();
        let links = self.emulator.radio_links().map_err(rejected)?;
        let link_alive = |id: &String| links.iter().any(|l| &l.id == id);
        let link_id = match node.radio_link_id.clone().filter(link_alive) {
            Some(id) => id,
            None => {
                let link = self.emulator.create_radio_link().map_err(rejected)?;
                node = NodeSession {
                    radio_link_id: Some(link.id.clone()),
                    pdu_session_id: None,
                };
                lock(&self.store).set_node(node.clone())?;
                link.id
            }
        };
        let sessions = self.emulator.pdu_sessions().map_err(rejected)?;
        let session_alive = |id: &String| sessions.iter().any(|s| &s.id == id && s.radio_link_id == link_id);
        let session_id = match node.pdu_session_id.clone().filter(session_alive) {
            Some(id) => id,
            None => {
                let session = self.emulator.create_pdu_session(&link_id).map_err(rejected)?;
                node.pdu_session_id = Some(session.id.clone());
                lock(&self.store).set_node(node)?;
                session.id
            }
        };
        Ok((link_id, session_id))
    }

    /// Undoes acquisitions in reverse order; failures are logged and skipped.
    fn rollback(&self, acquired: &[Acquired]) -> Vec<String> {
        let mut undone = Vec::new();
        for item in acquired.iter().rev() {
            let outcome = match item {
                Acquired::Filter { id } => gone_ok(self.emulator.delete_filter(id, DeleteOpts::IDEMPOTENT))
                    .map_err(|e| e.to_string())
                    .map(|_| format!("filter {id}")),
                Acquired::Enforcement { receipt } => {
                    let mut receipt = receipt.clone();
                    enforce::revert(&mut receipt, self.backend.as_ref())
                        .map_err(|e| e.to_string())
                        .map(|_| format!("enforcement {}", receipt.handles().join("; ")))
                }
                Acquired::Flow { flow } => gone_ok(self.emulator.delete_qos_flow(flow, DeleteOpts::IDEMPOTENT))
                    .map_err(|e| e.to_string())
                    .map(|_| format!("flow {flow}")),
                Acquired::Mark { mark } => lock(&self.marks)
                    .release(*mark)
                    .map_err(|e| e.to_string())
                    .map(|_| format!("mark {mark}")),
            };
            match outcome {
                Ok(what) => undone.push(what),
                Err(e) => warn!("rollback step failed: {e}"),
            }
        }
        undone
    }

    pub fn handle_del(&self, container_id: &str) -> Result<DelReport, DaemonError> {
        let _txn = lock(&self.txn);
        let Some(binding) = lock(&self.store).get(container_id).cloned() else {
            return Ok(DelReport::default());
        };
        let mut drift = Vec::new();
        let retry = self.retry;

        match retry.run("delete emulator filter", || {
            self.emulator.delete_filter(&binding.filter_id, DeleteOpts::default())
        }) {
            Ok(()) => {}
            Err(e) => drift.push(e),
        }
        let mut receipt = binding.enforcement.clone();
        match retry.run("revert enforcement", || enforce::revert(&mut receipt, self.backend.as_ref())) {
            Ok(report) => drift.extend(report.drift.into_iter().map(|h| format!("rule already absent: {h}"))),
            Err(e) => drift.push(e),
        }
        let flow = binding.flow();
        match retry.run("delete qos flow", || {
            self.emulator.delete_qos_flow(&flow, DeleteOpts::default())
        }) {
            Ok(()) => {}
            Err(e) => drift.push(e),
        }
        if let Err(e) = lock(&self.marks).release(binding.mark) {
            // The in-memory release stands; the file catches up on the next write.
            drift.push(format!("release mark {}: {e}", binding.mark));
        }
        let remaining = {
            let mut store = lock(&self.store);
            store.remove(container_id)?;
            store.len()
        };
        if self.teardown_on_empty && remaining == 0 {
            self.teardown_session(&mut drift);
        }
        for d in &drift {
            warn!("DEL {container_id}: {d}");
        }
        Ok(DelReport { removed: true, drift })
    }

    fn teardown_session(&self, drift: &mut Vec<String>) {
        let node = lock(&self.store).node().clone();
        if let Some(session) = &node.pdu_session_id {
            if let Err(e) = self.emulator.delete_pdu_session(session, DeleteOpts::IDEMPOTENT) {
                drift.push(format!("delete pdu session {session}: {e}"));
            }
        }
        if let Some(link) = &node.radio_link_id {
            if let Err(e) = self.emulator.delete_radio_link(link, DeleteOpts::IDEMPOTENT) {
                drift.push(format!("delete radio link {link}: {e}"));
            }
        }
        if let Err(e) = lock(&self.store).set_node(NodeSession::default()) {
            drift.push(e.to_string());
        }
    }

    pub fn handle_check(&self, container_id: &str) -> Result<CheckReport, DaemonError> {
        let binding = lock(&self.store).get(container_id).cloned();
        let Some(b) = binding else {
            return Ok(CheckReport {
                container_id: container_id.to_string(),
                verdict: Verdict::PassVacuous,
                elements: vec![CheckElement {
                    name: "binding".to_string(),
                    present: false,
                    detail: "no binding recorded".to_string(),
                }],
            });
        };
        let mut elements = vec![CheckElement {
            name: "binding".to_string(),
            present: true,
            detail: format!("mark {} flow {}", b.mark, b.flow()),
        }];
        elements.push(CheckElement {
            name: "mark-allocation".to_string(),
            present: lock(&self.marks).is_allocated(b.mark),
            detail: b.mark.to_string(),
        });
        for (step, handle) in &b.enforcement.steps {
            let rule = match &step.apply {
                enforce::Action::Install(r) => r,
                enforce::Action::Remove(r) => r,
            };
            let name = match rule {
                Rule::Mark(_) => "mark-rule",
                Rule::Filter(_) => "fw-filter",
            };
            elements.push(CheckElement {
                name: name.to_string(),
                present: self.backend.contains(rule),
                detail: handle.clone(),
            });
        }
        let flow = b.flow();
        let flow_ok = match self.emulator.qos_flow(&flow) {
            Ok(Some(f)) => Ok(f.five_qi == b.profile.five_qi),
            Ok(None) => Ok(false),
            Err(e) => Err(e),
        };
        elements.push(CheckElement {
            name: "qos-flow".to_string(),
            present: matches!(flow_ok, Ok(true)),
            detail: match &flow_ok {
                Err(e) => e.to_string(),
                _ => flow.to_string(),
            },
        });
        let filter_ok = self.emulator.filters().map(|fs| {
            fs.iter()
                .any(|f| f.id == b.filter_id && f.mark == b.mark.value() && f.mask == b.mask && f.target == flow)
        });
        elements.push(CheckElement {
            name: "emulator-filter".to_string(),
            present: matches!(filter_ok, Ok(true)),
            detail: match &filter_ok {
                Err(e) => e.to_string(),
                _ => b.filter_id.clone(),
            },
        });
        let verdict = if elements.iter().all(|e| e.present) {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        Ok(CheckReport {
            container_id: container_id.to_string(),
            verdict,
            elements,
        })
    }

    /// Canonical dump of store, allocator, backend and emulator tree. Taken
    /// under the transaction lock, so it never shows a half-done ADD.
    pub fn snapshot_state(&self) -> StateDump {
        let _txn = lock(&self.txn);
        let store = lock(&self.store).dump();
        let allocator = lock(&self.marks).state_text();
        let backend = self.backend.dump();
        let emulator = self
            .emulator
            .dump_tree()
            .unwrap_or_else(|e| format!("unavailable: {e}\n"));
        StateDump {
            store,
            allocator,
            backend,
            emulator,
        }
    }

    /// Undoes journaled ADDs that never committed, then sweeps marks, rules,
    /// filters and flows that no committed binding accounts for. Rules a
    /// committed binding needs but the backend lacks (an in-memory backend
    /// after a restart) are installed again.
    pub fn recover(&self) -> Result<RecoveryReport, DaemonError> {
        let _txn = lock(&self.txn);
        let mut report = RecoveryReport::default();
        let pending: Vec<PendingAdd> = lock(&self.store).pending().cloned().collect();
        for p in pending {
            let undone = self.rollback(&p.acquired);
            info!("recovery rolled back ADD {}: {}", p.container_id, undone.join(", "));
            lock(&self.store).abort(&p.container_id)?;
            report.rolled_back.push(p.container_id);
        }

        let bindings = self.bindings();
        let live_marks: Vec<u32> = bindings.iter().map(|b| b.mark.value()).collect();
        let stray: Vec<u32> = lock(&self.marks)
            .allocated()
            .iter()
            .copied()
            .filter(|m| !live_marks.contains(m))
            .collect();
        for m in stray {
            if let Some(mark) = FwMark::new(m) {
                lock(&self.marks)
                    .release(mark)
                    .map_err(|e| DaemonError::Persistence(e.to_string()))?;
                report.released_marks.push(m);
            }
        }

        let live_rules: Vec<Rule> = bindings
            .iter()
            .flat_map(|b| b.enforcement.steps.iter())
            .filter_map(|(s, _)| match &s.apply {
                enforce::Action::Install(r) => Some(r.clone()),
                enforce::Action::Remove(_) => None,
            })
            .collect();
        for rule in self.backend.rules() {
            if !live_rules.contains(&rule) {
                self.backend
                    .remove(&rule)
                    .map_err(|e| DaemonError::BackendFailure(e.to_string()))?;
                report.removed_rules += 1;
            }
        }
        for rule in &live_rules {
            if !self.backend.contains(rule) {
                self.backend
                    .install(rule)
                    .map_err(|e| DaemonError::BackendFailure(e.to_string()))?;
                report.reinstalled_rules += 1;
            }
        }

        if let Some(session) = self.node_session().pdu_session_id {
            let live_filters: Vec<&str> = bindings.iter().map(|b| b.filter_id.as_str()).collect();
            for f in self.emulator.filters().map_err(rejected)? {
                if f.target.session_id == session && !live_filters.contains(&f.id.as_str()) {
                    gone_ok(self.emulator.delete_filter(&f.id, DeleteOpts::IDEMPOTENT)).map_err(rejected)?;
                    report.removed_filters.push(f.id);
                }
            }
            let live_flows: Vec<FlowRef> = bindings.iter().map(FlowBinding::flow).collect();
            for f in self.emulator.qos_flows().map_err(rejected)? {
                let r = f.flow_ref();
                if r.session_id == session && !live_flows.contains(&r) {
                    gone_ok(self.emulator.delete_qos_flow(&r, DeleteOpts::IDEMPOTENT)).map_err(rejected)?;
                    report.removed_flows.push(r.to_string());
                }
            }
        }
        if !report.is_clean() {
            info!("recovery: {report:?}");
        }
        Ok(report)
    }
}

/// The daemon as seen by the plugin.
pub trait DaemonClient {
    fn add(&self, req: &AddRequest) -> Result<FlowBinding, DaemonError>;
    fn del(&self, container_id: &str) -> Result<DelReport, DaemonError>;
    fn check(&self, container_id: &str) -> Result<CheckReport, DaemonError>;
    fn snapshot(&self) -> Result<StateDump, DaemonError>;
    fn list_bindings(&self) -> Result<Vec<FlowBinding>, DaemonError>;
}

impl DaemonClient for Daemon {
    fn add(&self, req: &AddRequest) -> Result<FlowBinding, DaemonError> {
        self.handle_add(req)
    }

    fn del(&self, container_id: &str) -> Result<DelReport, DaemonError> {
        self.handle_del(container_id)
    }

    fn check(&self, container_id: &str) -> Result<CheckReport, DaemonError> {
        self.handle_check(container_id)
    }

    fn snapshot(&self) -> Result<StateDump, DaemonError> {
        Ok(self.snapshot_state())
    }

    fn list_bindings(&self) -> Result<Vec<FlowBinding>, DaemonError> {
        Ok(self.bindings())
    }
}

impl<T: DaemonClient + ?Sized> DaemonClient for Arc<T> {
    fn add(&self, req: &AddRequest) -> Result<FlowBinding, DaemonError> {
        (**self).add(req)
    }

    fn del(&self, container_id: &str) -> Result<DelReport, DaemonError> {
        (**self).del(container_id)
    }

    fn check(&self, container_id: &str) -> Result<CheckReport, DaemonError> {
        (**self).check(container_id)
    }

    fn snapshot(&self) -> Result<StateDump, DaemonError> {
        (**self).snapshot()
    }

    fn list_bindings(&self) -> Result<Vec<FlowBinding>, DaemonError> {
        (**self).list_bindings()
    }
}
