use std::collections::BTreeMap;
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::shaper::TokenBucket;
use super::EmulatorError;
use crate::enforce::FlowRef;

/// Averaging window used for the token bucket when a flow does not name one.
pub const DEFAULT_AVERAGING_WINDOW_MS: u32 = 2000;

const DEFAULT_CLASS_MINOR: u16 = 0xffff;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkState {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadioLink {
    pub id: String,
    pub state: LinkState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PduSession {
    pub id: String,
    pub radio_link_id: String,
    pub qfis: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QosFlow {
    pub session_id: String,
    pub qfi: u8,
    pub five_qi: u8,
    pub delay_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_kbps: Option<f64>,
    pub averaging_window_ms: u32,
    pub class_handle: String,
}

impl QosFlow {
    pub fn flow_ref(&self) -> FlowRef {
        FlowRef::new(self.session_id.clone(), self.qfi)
    }

    pub fn delay(&self) -> Duration {
        Duration::from_secs_f64(self.delay_ms / 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CreateFlow {
    pub session_id: String,
    /// Server picks the lowest unused QFI when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qfi: Option<u8>,
    pub five_qi: u8,
    pub delay_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_kbps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub averaging_window_ms: Option<u32>,
    /// Start the token bucket empty instead of full.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub start_empty: bool,
}

impl CreateFlow {
    pub fn new(session_id: impl Into<String>, five_qi: u8, delay_ms: f64) -> Self {
        Self {
            session_id: session_id.into(),
            qfi: None,
            five_qi,
            delay_ms,
            rate_kbps: None,
            averaging_window_ms: None,
            start_empty: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MarkFilter {
    pub id: String,
    pub mark: u32,
    pub mask: u32,
    pub target: FlowRef,
}

impl MarkFilter {
    pub fn matches(&self, mark: u32) -> bool {
        mark & self.mask == self.mark
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CreateFilter {
    pub mark: u32,
    pub mask: u32,
    pub session_id: String,
    pub qfi: u8,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeleteOpts {
    /// Remove dependent children too.
    #[serde(default)]
    pub cascade: bool,
    /// Treat a missing id as success.
    #[serde(default)]
    pub idempotent: bool,
}

impl DeleteOpts {
    pub const IDEMPOTENT: Self = Self {
        cascade: false,
        idempotent: true,
    };
}

/// Where a packet ends up after classification.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Classification {
    Flow(FlowRef),
    Default,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TransmitRequest {
    /// Virtual send time in nanoseconds.
    pub send_time_ns: u64,
    pub size_bytes: u32,
    /// Explicit flow; when absent the packet is classified by `mark`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowRef>,
    #[serde(default)]
    pub mark: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Delivery {
    pub class: Classification,
    pub send_time_ns: u64,
    /// When the shaper released the packet.
    pub departure_ns: u64,
    pub arrival_ns: u64,
}

impl Delivery {
    pub fn latency(&self) -> Duration {
        Duration::from_nanos(self.arrival_ns - self.send_time_ns)
    }

    pub fn queueing(&self) -> Duration {
        Duration::from_nanos(self.departure_ns - self.send_time_ns)
    }
}

#[derive(Debug)]
struct FlowEntry {
    flow: QosFlow,
    minor: u16,
    shaper: Mutex<Option<TokenBucket>>,
}

#[derive(Debug)]
struct SessionEntry {
    radio_link_id: String,
    flows: BTreeMap<u8, FlowEntry>,
}

#[derive(Debug, Default)]
struct State {
    next_link: u64,
    next_session: u64,
    next_filter: u64,
    links: BTreeMap<String, LinkState>,
    sessions: BTreeMap<String, SessionEntry>,
    /// Insertion order is priority order.
    filters: Vec<MarkFilter>,
}

impl State {
    fn session(&self, id: &str) -> Result<&SessionEntry, EmulatorError> {
        self.sessions
            .get(id)
            .ok_or_else(|| EmulatorError::NotFound(format!("pdu session {id}")))
    }

    fn flow(&self, flow: &FlowRef) -> Result<&FlowEntry, EmulatorError> {
        self.session(&flow.session_id)?
            .flows
            .get(&flow.qfi)
            .ok_or_else(|| EmulatorError::NotFound(format!("qos flow {flow}")))
    }

    fn used_minors(&self) -> impl Iterator<Item = u16> + '_ {
        self.sessions.values().flat_map(|s| s.flows.values().map(|f| f.minor))
    }

    fn classify(&self, mark: u32) -> Classification {
        self.filters
            .iter()
            .find(|f| f.matches(mark))
            .map(|f| Classification::Flow(f.target.clone()))
            .unwrap_or(Classification::Default)
    }
}

/// The emulated 5G stack: resources plus the qdisc/class/filter tree that
/// realizes them. Delays are computed in virtual time.
#[derive(Debug, Default)]
pub struct Emulator {
    state: RwLock<State>,
}

fn not_found_ok(opts: DeleteOpts, what: String) -> Result<(), EmulatorError> {
    if opts.idempotent {
        Ok(())
    } else {
        Err(EmulatorError::NotFound(what))
    }
}

impl Emulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_radio_link(&self) -> RadioLink {
        let mut st = self.state.write().unwrap();
        st.next_link += 1;
        let id = format!("link-{}", st.next_link);
        st.links.insert(id.clone(), LinkState::Up);
        RadioLink {
            id,
            state: LinkState::Up,
        }
    }

    pub fn set_radio_link_state(&self, id: &str, state: LinkState) -> Result<RadioLink, EmulatorError> {
        let mut st = self.state.write().unwrap();
        let slot = st
            .links
            .get_mut(id)
            .ok_or_else(|| EmulatorError::NotFound(format!("radio link {id}")))?;
        *slot = state;
        Ok(RadioLink {
            id: id.to_string(),
            state,
        })
    }

    pub fn radio_links(&self) -> Vec<RadioLink> {
        let st = self.state.read().unwrap();
        st.links
            .iter()
            .map(|(id, state)| RadioLink {
                id: id.clone(),
                state: *state,
            })
            .collect()
    }

    pub fn delete_radio_link(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError> {
        let mut st = self.state.write().unwrap();
        if !st.links.contains_key(id) {
            return not_found_ok(opts, format!("radio link {id}"));
        }
        let dependents: Vec<String> = st
            .sessions
            .iter()
            .filter(|(_, s)| s.radio_link_id == id)
            .map(|(sid, _)| sid.clone())
            .collect();
        if !dependents.is_empty() && !opts.cascade {
            return Err(EmulatorError::DependencyViolation(format!(
                "radio link {id} still carries sessions {}",
                dependents.join(", ")
            )));
        }
        for sid in dependents {
            st.filters.retain(|f| f.target.session_id != sid);
            st.sessions.remove(&sid);
        }
        st.links.remove(id);
        Ok(())
    }

    pub fn create_pdu_session(&self, radio_link_id: &str) -> Result<PduSession, EmulatorError> {
        let mut st = self.state.write().unwrap();
        match st.links.get(radio_link_id) {
            None => return Err(EmulatorError::NotFound(format!("radio link {radio_link_id}"))),
            Some(LinkState::Down) => {
                return Err(EmulatorError::DependencyViolation(format!(
                    "radio link {radio_link_id} is down"
                )))
            }
            Some(LinkState::Up) => {}
        }
        st.next_session += 1;
        let id = format!("pdu-{}", st.next_session);
        st.sessions.insert(
            id.clone(),
            SessionEntry {
                radio_link_id: radio_link_id.to_string(),
                flows: BTreeMap::new(),
            },
        );
        Ok(PduSession {
            id,
            radio_link_id: radio_link_id.to_string(),
            qfis: Vec::new(),
        })
    }

    pub fn pdu_sessions(&self) -> Vec<PduSession> {
        let st = self.state.read().unwrap();
        st.sessions
            .iter()
            .map(|(id, s)| PduSession {
                id: id.clone(),
                radio_link_id: s.radio_link_id.clone(),
                qfis: s.flows.keys().copied().collect(),
            })
            .collect()
    }

    pub fn delete_pdu_session(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError> {
        let mut st = self.state.write().unwrap();
        let Some(session) = st.sessions.get(id) else {
            return not_found_ok(opts, format!("pdu session {id}"));
        };
        if !session.flows.is_empty() && !opts.cascade {
            return Err(EmulatorError::DependencyViolation(format!(
                "pdu session {id} still has {} qos flows",
                session.flows.len()
            )));
        }
        st.filters.retain(|f| f.target.session_id != id);
        st.sessions.remove(id);
        Ok(())
    }

    pub fn create_qos_flow(&self, req: &CreateFlow) -> Result<QosFlow, EmulatorError> {
        if !(req.delay_ms.is_finite() && req.delay_ms >= 0.0) {
            return Err(EmulatorError::Invalid("delayMs must be a non-negative number".into()));
        }
        if let Some(rate) = req.rate_kbps {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(EmulatorError::Invalid("rateKbps must be positive".into()));
            }
        }
        if req.qfi == Some(0) || req.averaging_window_ms == Some(0) {
            return Err(EmulatorError::Invalid("qfi and averagingWindowMs must be positive".into()));
        }
        let mut st = self.state.write().unwrap();
        let mut used: Vec<u16> = st.used_minors().collect();
        used.sort_unstable();
        let session = st
            .sessions
            .get_mut(&req.session_id)
            .ok_or_else(|| EmulatorError::NotFound(format!("pdu session {}", req.session_id)))?;
        let qfi = match req.qfi {
            Some(q) if session.flows.contains_key(&q) => {
                return Err(EmulatorError::Conflict(format!(
                    "qfi {q} already exists in session {}",
                    req.session_id
                )))
            }
            Some(q) => q,
            None => (1..=u8::MAX)
                .find(|q| !session.flows.contains_key(q))
                .ok_or_else(|| EmulatorError::Conflict("session has no free qfi".into()))?,
        };
        let minor = (1..DEFAULT_CLASS_MINOR)
            .find(|m| used.binary_search(m).is_err())
            .ok_or_else(|| EmulatorError::Conflict("traffic tree is full".into()))?;
        let window = req.averaging_window_ms.unwrap_or(DEFAULT_AVERAGING_WINDOW_MS);
        let flow = QosFlow {
            session_id: req.session_id.clone(),
            qfi,
            five_qi: req.five_qi,
            delay_ms: req.delay_ms,
            rate_kbps: req.rate_kbps,
            averaging_window_ms: window,
            class_handle: format!("1:{minor:x}"),
        };
        let shaper = req
            .rate_kbps
            .map(|rate| TokenBucket::new(rate, window, req.start_empty));
        session.flows.insert(
            qfi,
            FlowEntry {
                flow: flow.clone(),
                minor,
                shaper: Mutex::new(shaper),
            },
        );
        Ok(flow)
    }

    pub fn qos_flow(&self, flow: &FlowRef) -> Result<QosFlow, EmulatorError> {
        Ok(self.state.read().unwrap().flow(flow)?.flow.clone())
    }

    pub fn qos_flows(&self) -> Vec<QosFlow> {
        let st = self.state.read().unwrap();
        st.sessions
            .values()
            .flat_map(|s| s.flows.values().map(|f| f.flow.clone()))
            .collect()
    }

    pub fn delete_qos_flow(&self, flow: &FlowRef, opts: DeleteOpts) -> Result<(), EmulatorError> {
        let mut st = self.state.write().unwrap();
        if st.flow(flow).is_err() {
            return not_found_ok(opts, format!("qos flow {flow}"));
        }
        let dependents = st.filters.iter().filter(|f| &f.target == flow).count();
        if dependents > 0 && !opts.cascade {
            return Err(EmulatorError::DependencyViolation(format!(
                "qos flow {flow} is the target of {dependents} filters"
            )));
        }
        st.filters.retain(|f| &f.target != flow);
        if let Some(s) = st.sessions.get_mut(&flow.session_id) {
            s.flows.remove(&flow.qfi);
        }
        Ok(())
    }

    pub fn create_filter(&self, req: &CreateFilter) -> Result<MarkFilter, EmulatorError> {
        if req.mark & req.mask != req.mark {
            return Err(EmulatorError::Invalid(format!(
                "mark {:#x} has bits outside mask {:#x}",
                req.mark, req.mask
            )));
        }
        let mut st = self.state.write().unwrap();
        let target = FlowRef::new(req.session_id.clone(), req.qfi);
        st.flow(&target)?;
        if st.filters.iter().any(|f| f.mark == req.mark && f.mask == req.mask) {
            return Err(EmulatorError::Conflict(format!(
                "filter {:#x}/{:#x} already exists",
                req.mark, req.mask
            )));
        }
        st.next_filter += 1;
        let filter = MarkFilter {
            id: format!("filter-{}", st.next_filter),
            mark: req.mark,
            mask: req.mask,
            target,
        };
        st.filters.push(filter.clone());
        Ok(filter)
    }

    pub fn filters(&self) -> Vec<MarkFilter> {
        self.state.read().unwrap().filters.clone()
    }

    pub fn delete_filter(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError> {
        let mut st = self.state.write().unwrap();
        match st.filters.iter().position(|f| f.id == id) {
            Some(pos) => {
                st.filters.remove(pos);
                Ok(())
            }
            None => not_found_ok(opts, format!("filter {id}")),
        }
    }

    /// First filter in priority order whose masked match fits wins.
    pub fn classify(&self, mark: u32) -> Classification {
        self.state.read().unwrap().classify(mark)
    }

    /// Sends a packet through its class. Unmatched traffic takes the default
    /// class, which adds no delay.
    pub fn transmit(&self, req: &TransmitRequest) -> Result<Delivery, EmulatorError> {
        let st = self.state.read().unwrap();
        let class = match &req.flow {
            Some(f) => Classification::Flow(f.clone()),
            None => st.classify(req.mark),
        };
        let send = Duration::from_nanos(req.send_time_ns);
        let (departure, arrival) = match &class {
            Classification::Default => (send, send),
            Classification::Flow(f) => {
                let entry = st.flow(f)?;
                let departure = match entry.shaper.lock().unwrap().as_mut() {
                    Some(bucket) => bucket.admit(send, req.size_bytes),
                    None => send,
                };
                (departure, departure + entry.flow.delay())
            }
        };
        Ok(Delivery {
            class,
            send_time_ns: req.send_time_ns,
            departure_ns: departure.as_nanos() as u64,
            arrival_ns: arrival.as_nanos() as u64,
        })
    }

    /// Sorted rendering of the qdisc/class/filter tree.
    pub fn dump_tree(&self) -> String {
        let st = self.state.read().unwrap();
        let mut out = format!("qdisc htb 1: root default {DEFAULT_CLASS_MINOR:x}\n");
        let mut classes: Vec<&FlowEntry> = st.sessions.values().flat_map(|s| s.flows.values()).collect();
        classes.sort_by_key(|f| f.minor);
        for c in classes {
            let rate = match c.flow.rate_kbps {
                Some(r) => format!("{r}kbit window {}ms", c.flow.averaging_window_ms),
                None => "unlimited".to_string(),
            };
            out.push_str(&format!(
                "class htb {} parent 1: session {} qfi {} 5qi {} delay {}ms rate {}\n",
                c.flow.class_handle, c.flow.session_id, c.flow.qfi, c.flow.five_qi, c.flow.delay_ms, rate
            ));
        }
        out.push_str(&format!(
            "class htb 1:{DEFAULT_CLASS_MINOR:x} parent 1: default delay 0ms rate unlimited\n"
        ));
        for (prio, f) in st.filters.iter().enumerate() {
            let handle = st
                .flow(&f.target)
                .map(|e| e.flow.class_handle.clone())
                .unwrap_or_else(|_| "?".into());
            out.push_str(&format!(
                "filter parent 1: prio {} handle {:#x}/{:#x} fw flowid {}\n",
                prio + 1,
                f.mark,
                f.mask,
                handle
            ));
        }
        out
    }

    /// Links and sessions, which the traffic tree does not show.
    pub fn dump_resources(&self) -> String {
        let st = self.state.read().unwrap();
        let mut out = String::new();
        for (id, state) in &st.links {
            let state = match state {
                LinkState::Up => "up",
                LinkState::Down => "down",
            };
            out.push_str(&format!("radio-link {id} {state}\n"));
        }
        for (id, s) in &st.sessions {
            out.push_str(&format!(
                "pdu-session {id} link {} flows {}\n",
                s.radio_link_id,
                s.flows.len()
            ));
        }
        out
    }
}
