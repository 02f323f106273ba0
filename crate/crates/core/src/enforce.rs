//! Mark rules and fw-classifier filters that steer a pod's egress traffic into
//! its QoS flow.
//!
//! A plan is a short ordered list of reversible steps. Backends apply the
//! steps: [`SimBackend`] keeps them in memory for tests and experiments,
//! [`ShellBackend`] renders (and optionally runs) the equivalent `iptables` and
//! `tc` commands.
//!
//! Rendered command grammar:
//!
//! ```text
//! iptables -t mangle {-A|-D} PREROUTING -s <pod-ip>/32 -j MARK --set-mark <mark>/<mask>
//! tc filter {add|del} dev <phys-if> parent 1: protocol all prio 1 handle <mark>/<mask> fw flowid 1:<qfi>
//! ```
//!
//! Marks and masks are lower-case hex with a `0x` prefix and no padding. IPv6
//! pods use `ip6tables` and `/128`; the filter matches `protocol all` so one
//! grammar covers both families. The `flowid` minor is the QFI in hex, as `tc`
//! expects.

use std::collections::BTreeSet;
use std::fmt;
use std::net::IpAddr;
use std::process::Command;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

/// A QoS flow inside a PDU session.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FlowRef {
    pub session_id: String,
    pub qfi: u8,
}

impl FlowRef {
    pub fn new(session_id: impl Into<String>, qfi: u8) -> Self {
        Self {
            session_id: session_id.into(),
            qfi,
        }
    }
}

impl fmt::Display for FlowRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/qfi{}", self.session_id, self.qfi)
    }
}

/// `mangle`/`PREROUTING` rule marking packets sourced from a pod.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MarkRuleSpec {
    pub source: IpAddr,
    pub mark: u32,
    pub mask: u32,
}

impl MarkRuleSpec {
    pub const TABLE: &'static str = "mangle";
    pub const CHAIN: &'static str = "PREROUTING";

    /// Value/mask write: only the mask bits change.
    pub fn apply_to(&self, current: u32) -> u32 {
        (current & !self.mask) | self.mark
    }
}

/// fw-classifier filter on the physical interface.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FilterSpec {
    pub interface: String,
    pub mark: u32,
    pub mask: u32,
    pub target: FlowRef,
}

impl FilterSpec {
    pub const CLASSIFIER: &'static str = "fw";

    pub fn matches(&self, mark: u32) -> bool {
        mark & self.mask == self.mark
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Rule {
    Mark(MarkRuleSpec),
    Filter(FilterSpec),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Install(Rule),
    Remove(Rule),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub apply: Action,
    pub revert: Action,
}

impl PlanStep {
    fn install(rule: Rule) -> Self {
        Self {
            apply: Action::Install(rule.clone()),
            revert: Action::Remove(rule),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnforcementPlan {
    pub steps: Vec<PlanStep>,
}

impl EnforcementPlan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.steps.iter().filter_map(|s| match &s.apply {
            Action::Install(r) => Some(r),
            Action::Remove(_) => None,
        })
    }
}

/// Everything a plan is built from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlanRequest {
    pub pod_ip: Option<IpAddr>,
    pub mark: Option<u32>,
    pub flow: Option<FlowRef>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("binding is incomplete: missing {0}")]
    IncompleteBinding(&'static str),
    #[error("mark {mark:#x} has bits outside free mask {mask:#x}")]
    MarkOutsideMask { mark: u32, mask: u32 },
}

/// One mark rule plus one filter, both in value/mask form over `free_mask`.
pub fn build_plan(req: &PlanRequest, free_mask: u32, phys_if: &str) -> Result<EnforcementPlan, PlanError> {
    let pod_ip = req.pod_ip.ok_or(PlanError::IncompleteBinding("pod ip"))?;
    let mark = req.mark.filter(|m| *m != 0).ok_or(PlanError::IncompleteBinding("mark"))?;
    let flow = req.flow.clone().ok_or(PlanError::IncompleteBinding("flow"))?;
    if phys_if.is_empty() {
        return Err(PlanError::IncompleteBinding("physical interface"));
    }
    if mark & !free_mask != 0 {
        return Err(PlanError::MarkOutsideMask { mark, mask: free_mask });
    }
    Ok(EnforcementPlan {
        steps: vec![
            PlanStep::install(Rule::Mark(MarkRuleSpec {
                source: pod_ip,
                mark,
                mask: free_mask,
            })),
            PlanStep::install(Rule::Filter(FilterSpec {
                interface: phys_if.to_string(),
                mark,
                mask: free_mask,
                target: flow,
            })),
        ],
    })
}

fn render_rule(rule: &Rule, adding: bool) -> String {
    match rule {
        Rule::Mark(m) => {
            let (bin, prefix) = match m.source {
                IpAddr::V4(_) => ("iptables", 32),
                IpAddr::V6(_) => ("ip6tables", 128),
            };
            format!(
                "{bin} -t {} {} {} -s {}/{prefix} -j MARK --set-mark {:#x}/{:#x}",
                MarkRuleSpec::TABLE,
                if adding { "-A" } else { "-D" },
                MarkRuleSpec::CHAIN,
                m.source,
                m.mark,
                m.mask
            )
        }
        Rule::Filter(f) => {
            let mut cmd = format!(
                "tc filter {} dev {} parent 1: protocol all prio 1 handle {:#x}/{:#x} {}",
                if adding { "add" } else { "del" },
                f.interface,
                f.mark,
                f.mask,
                FilterSpec::CLASSIFIER
            );
            if adding {
                cmd.push_str(&format!(" flowid 1:{:x}", f.target.qfi));
            }
            cmd
        }
    }
}

/// Commands that would apply the plan on a real node.
pub fn render_commands(plan: &EnforcementPlan) -> Vec<String> {
    plan.steps.iter().map(|s| render_action(&s.apply)).collect()
}

/// Commands that would undo the plan, in undo order.
pub fn render_revert_commands(plan: &EnforcementPlan) -> Vec<String> {
    plan.steps.iter().rev().map(|s| render_action(&s.revert)).collect()
}

fn render_action(action: &Action) -> String {
    match action {
        Action::Install(r) => render_rule(r, true),
        Action::Remove(r) => render_rule(r, false),
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("rule already installed: {0}")]
    Duplicate(String),
    #[error("backend failure: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoveOutcome {
    Removed,
    /// The rule was already gone.
    Missing,
}

/// Something that can hold mark rules and filters.
pub trait Backend: Send + Sync {
    fn install(&self, rule: &Rule) -> Result<String, BackendError>;
    fn remove(&self, rule: &Rule) -> Result<RemoveOutcome, BackendError>;
    fn contains(&self, rule: &Rule) -> bool;
    /// Installed rules in sorted order.
    fn rules(&self) -> Vec<Rule>;
    /// Canonical, sorted text rendering of the installed rules.
    fn dump(&self) -> String;
}

/// In-memory backend.
#[derive(Debug, Default)]
pub struct SimBackend {
    rules: Mutex<BTreeSet<Rule>>,
}

impl SimBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mark_rules(&self) -> Vec<MarkRuleSpec> {
        self.rules
            .lock()
            .unwrap()
            .iter()
            .filter_map(|r| match r {
                Rule::Mark(m) => Some(m.clone()),
                Rule::Filter(_) => None,
            })
            .collect()
    }

    pub fn filters(&self) -> Vec<FilterSpec> {
        self.rules
            .lock()
            .unwrap()
            .iter()
            .filter_map(|r| match r {
                Rule::Filter(f) => Some(f.clone()),
                Rule::Mark(_) => None,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rules.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Backend for SimBackend {
    fn install(&self, rule: &Rule) -> Result<String, BackendError> {
        let handle = render_rule(rule, true);
        if !self.rules.lock().unwrap().insert(rule.clone()) {
            return Err(BackendError::Duplicate(handle));
        }
        Ok(handle)
    }

    fn remove(&self, rule: &Rule) -> Result<RemoveOutcome, BackendError> {
        Ok(if self.rules.lock().unwrap().remove(rule) {
            RemoveOutcome::Removed
        } else {
            RemoveOutcome::Missing
        })
    }

    fn contains(&self, rule: &Rule) -> bool {
        self.rules.lock().unwrap().contains(rule)
    }

    fn rules(&self) -> Vec<Rule> {
        self.rules.lock().unwrap().iter().cloned().collect()
    }

    fn dump(&self) -> String {
        let rules = self.rules.lock().unwrap();
        let mut lines: Vec<String> = rules.iter().map(|r| render_rule(r, true)).collect();
        lines.sort();
        let mut out = format!("backend sim rules={}\n", lines.len());
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
        out
    }
}

/// Renders commands and, when `execute` is set, runs them through `sh -c`.
///
/// Installed rules are tracked locally, so `contains` and `dump` describe what
/// this backend believes it applied rather than live kernel state.
#[derive(Debug)]
pub struct ShellBackend {
    execute: bool,
    state: Mutex<ShellState>,
}

#[derive(Debug, Default)]
struct ShellState {
    installed: BTreeSet<Rule>,
    log: Vec<String>,
}

impl ShellBackend {
    pub fn dry_run() -> Self {
        Self {
            execute: false,
            state: Mutex::default(),
        }
    }

    pub fn executing() -> Self {
        Self {
            execute: true,
            state: Mutex::default(),
        }
    }

    /// Every command issued so far, in order.
    pub fn command_log(&self) -> Vec<String> {
        self.state.lock().unwrap().log.clone()
    }

    fn run(&self, state: &mut ShellState, cmd: String) -> Result<(), BackendError> {
        if self.execute {
            let status = Command::new("sh")
                .arg("-c")
                .arg(&cmd)
                .status()
                .map_err(|e| BackendError::Failed(format!("{cmd}: {e}")))?;
            if !status.success() {
                return Err(BackendError::Failed(format!("{cmd}: exited with {status}")));
            }
        }
        state.log.push(cmd);
        Ok(())
    }
}

impl Backend for ShellBackend {
    fn install(&self, rule: &Rule) -> Result<String, BackendError> {
        let mut state = self.state.lock().unwrap();
        let cmd = render_rule(rule, true);
        if state.installed.contains(rule) {
            return Err(BackendError::Duplicate(cmd));
        }
        self.run(&mut state, cmd.clone())?;
        state.installed.insert(rule.clone());
        Ok(cmd)
    }

    fn remove(&self, rule: &Rule) -> Result<RemoveOutcome, BackendError> {
        let mut state = self.state.lock().unwrap();
        if !state.installed.contains(rule) {
            return Ok(RemoveOutcome::Missing);
        }
        self.run(&mut state, render_rule(rule, false))?;
        state.installed.remove(rule);
        Ok(RemoveOutcome::Removed)
    }

    fn contains(&self, rule: &Rule) -> bool {
        self.state.lock().unwrap().installed.contains(rule)
    }

    fn rules(&self) -> Vec<Rule> {
        self.state.lock().unwrap().installed.iter().cloned().collect()
    }

    fn dump(&self) -> String {
        let state = self.state.lock().unwrap();
        let mut lines: Vec<String> = state.installed.iter().map(|r| render_rule(r, true)).collect();
        lines.sort();
        let mut out = format!("backend shell rules={}\n", lines.len());
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("step {step} failed: {cause}")]
pub struct ApplyError {
    pub step: usize,
    pub cause: BackendError,
}

/// Record of an applied plan; the handle for each step is the backend's
/// rendering of the installed rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReceipt {
    pub steps: Vec<(PlanStep, String)>,
    pub reverted: bool,
}

impl ApplyReceipt {
    pub fn handles(&self) -> Vec<&str> {
        self.steps.iter().map(|(_, h)| h.as_str()).collect()
    }
}

fn run_action(action: &Action, backend: &dyn Backend) -> Result<Option<String>, BackendError> {
    match action {
        Action::Install(r) => backend.install(r).map(Some),
        Action::Remove(r) => backend.remove(r).map(|_| None),
    }
}

/// Applies every step in order; on failure, already-applied steps are undone
/// before returning.
pub fn apply(plan: &EnforcementPlan, backend: &dyn Backend) -> Result<ApplyReceipt, ApplyError> {
    let mut done: Vec<(PlanStep, String)> = Vec::with_capacity(plan.steps.len());
    for (idx, step) in plan.steps.iter().enumerate() {
        match run_action(&step.apply, backend) {
            Ok(handle) => done.push((step.clone(), handle.unwrap_or_default())),
            Err(cause) => {
                for (prev, _) in done.iter().rev() {
                    if let Err(e) = run_action(&prev.revert, backend) {
                        warn!("rollback of plan step failed: {e}");
                    }
                }
                return Err(ApplyError { step: idx, cause });
            }
        }
    }
    Ok(ApplyReceipt {
        steps: done,
        reverted: false,
    })
}

/// Result of a revert. `drift` lists rules that were already missing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RevertReport {
    pub drift: Vec<String>,
}

/// Undoes a receipt in reverse order. A second call is a no-op. If a step
/// fails the receipt stays un-reverted and steps already undone are skipped on
/// the retry.
pub fn revert(receipt: &mut ApplyReceipt, backend: &dyn Backend) -> Result<RevertReport, BackendError> {
    let mut report = RevertReport::default();
    if receipt.reverted {
        return Ok(report);
    }
    for (step, handle) in receipt.steps.iter().rev() {
        let outcome = match &step.revert {
            Action::Remove(r) => backend.remove(r)?,
            Action::Install(r) => {
                backend.install(r)?;
                RemoveOutcome::Removed
            }
        };
        if outcome == RemoveOutcome::Missing {
            warn!("rule already absent during revert: {handle}");
            report.drift.push(handle.clone());
        }
    }
    receipt.reverted = true;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(ip: &str, mark: u32, qfi: u8) -> PlanRequest {
        PlanRequest {
            pod_ip: Some(ip.parse().unwrap()),
            mark: Some(mark),
            flow: Some(FlowRef::new("pdu-1", qfi)),
        }
    }

    #[test]
    fn plan_has_one_rule_and_one_filter() {
        let plan = build_plan(&request("10.244.1.5", 0x2000, 1), 0xE000, "eth0").unwrap();
        let rules: Vec<&Rule> = plan.rules().collect();
        assert_eq!(rules.len(), 2);
        assert_eq!(
            rules[0],
            &Rule::Mark(MarkRuleSpec {
                source: "10.244.1.5".parse().unwrap(),
                mark: 0x2000,
                mask: 0xE000
            })
        );
        match rules[1] {
            Rule::Filter(f) => {
                assert_eq!((f.mark, f.mask), (0x2000, 0xE000));
                assert_eq!(f.target, FlowRef::new("pdu-1", 1));
                assert_eq!(f.interface, "eth0");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn incomplete_binding_rejected() {
        let mut req = request("10.244.1.5", 0x2000, 1);
        req.pod_ip = None;
        assert_eq!(build_plan(&req, 0xE000, "eth0"), Err(PlanError::IncompleteBinding("pod ip")));
        let mut req = request("10.244.1.5", 0x2000, 1);
        req.flow = None;
        assert_eq!(build_plan(&req, 0xE000, "eth0"), Err(PlanError::IncompleteBinding("flow")));
        assert_eq!(
            build_plan(&request("10.244.1.5", 0x2001, 1), 0xE000, "eth0"),
            Err(PlanError::MarkOutsideMask { mark: 0x2001, mask: 0xE000 })
        );
    }

    #[test]
    fn rendered_commands_match_grammar() {
        let plan = build_plan(&request("10.244.1.5", 0x2000, 1), 0xE000, "eth0").unwrap();
        assert_eq!(
            render_commands(&plan),
            vec![
                "iptables -t mangle -A PREROUTING -s 10.244.1.5/32 -j MARK --set-mark 0x2000/0xe000",
                "tc filter add dev eth0 parent 1: protocol all prio 1 handle 0x2000/0xe000 fw flowid 1:1",
            ]
        );
        assert_eq!(
            render_revert_commands(&plan),
            vec![
                "tc filter del dev eth0 parent 1: protocol all prio 1 handle 0x2000/0xe000 fw",
                "iptables -t mangle -D PREROUTING -s 10.244.1.5/32 -j MARK --set-mark 0x2000/0xe000",
            ]
        );
        assert!(render_commands(&EnforcementPlan::default()).is_empty());
    }

    #[test]
    fn ipv6_pod_uses_ip6tables() {
        let plan = build_plan(&request("fd00::5", 0x2000, 12), 0xE000, "eth0").unwrap();
        let cmds = render_commands(&plan);
        assert_eq!(
            cmds[0],
            "ip6tables -t mangle -A PREROUTING -s fd00::5/128 -j MARK --set-mark 0x2000/0xe000"
        );
        assert!(cmds[1].ends_with("flowid 1:c"));
    }

    #[test]
    fn apply_then_revert_restores_backend() {
        let backend = SimBackend::new();
        let before = backend.dump();
        let plan = build_plan(&request("10.244.1.5", 0x2000, 1), 0xE000, "eth0").unwrap();
        let mut receipt = apply(&plan, &backend).unwrap();
        assert_eq!(receipt.handles().len(), 2);
        assert_eq!(backend.len(), 2);
        assert_eq!(revert(&mut receipt, &backend).unwrap(), RevertReport::default());
        assert_eq!(backend.dump(), before);
        assert_eq!(revert(&mut receipt, &backend).unwrap(), RevertReport::default());
        assert_eq!(backend.dump(), before);
    }

    #[test]
    fn duplicate_apply_leaves_state_alone() {
        let backend = SimBackend::new();
        let plan = build_plan(&request("10.244.1.5", 0x2000, 1), 0xE000, "eth0").unwrap();
        apply(&plan, &backend).unwrap();
        let after_first = backend.dump();
        let err = apply(&plan, &backend).unwrap_err();
        assert_eq!(err.step, 0);
        assert!(matches!(err.cause, BackendError::Duplicate(_)));
        assert_eq!(backend.dump(), after_first);
    }

    #[test]
    fn failure_mid_plan_rolls_back_earlier_steps() {
        let backend = SimBackend::new();
        let plan = build_plan(&request("10.244.1.5", 0x2000, 1), 0xE000, "eth0").unwrap();
        // Pre-install only the filter so step 1 collides.
        let filter = plan.rules().nth(1).unwrap().clone();
        backend.install(&filter).unwrap();
        let before = backend.dump();
        let err = apply(&plan, &backend).unwrap_err();
        assert_eq!(err.step, 1);
        assert_eq!(backend.dump(), before);
    }

    #[test]
    fn revert_reports_drift() {
        let backend = SimBackend::new();
        let plan = build_plan(&request("10.244.1.5", 0x2000, 1), 0xE000, "eth0").unwrap();
        let mut receipt = apply(&plan, &backend).unwrap();
        let rule = plan.rules().next().unwrap().clone();
        backend.remove(&rule).unwrap();
        let report = revert(&mut receipt, &backend).unwrap();
        assert_eq!(report.drift.len(), 1);
        assert!(report.drift[0].starts_with("iptables"));
        assert!(backend.is_empty());
    }

    #[test]
    fn empty_plan_is_noop() {
        let backend = SimBackend::new();
        let receipt = apply(&EnforcementPlan::default(), &backend).unwrap();
        assert!(receipt.steps.is_empty());
        assert!(backend.is_empty());
    }

    #[test]
    fn shell_backend_logs_commands() {
        let backend = ShellBackend::dry_run();
        let plan = build_plan(&request("10.244.1.5", 0x4000, 2), 0xE000, "wlan0").unwrap();
        let mut receipt = apply(&plan, &backend).unwrap();
        revert(&mut receipt, &backend).unwrap();
        let mut expected = render_commands(&plan);
        expected.extend(render_revert_commands(&plan));
        assert_eq!(backend.command_log(), expected);
        assert_eq!(backend.dump(), "backend shell rules=0\n");
    }
}
