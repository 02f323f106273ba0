use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::enforce::{ApplyReceipt, FlowRef};
use crate::fwmark::{write_atomic, FwMark};
use crate::qos::{FiveQiProfile, QosRequirement};

const HEADER: &str = "binding-store v1";

/// The pod / mark / QoS-flow association.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FlowBinding {
    pub container_id: String,
    pub pod_ip: IpAddr,
    pub mark: FwMark,
    pub mask: u32,
    pub requirement: QosRequirement,
    pub profile: FiveQiProfile,
    pub radio_link_id: String,
    pub pdu_session_id: String,
    pub qfi: u8,
    pub filter_id: String,
    pub enforcement: ApplyReceipt,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
}

impl FlowBinding {
    pub fn flow(&self) -> FlowRef {
        FlowRef::new(self.pdu_session_id.clone(), self.qfi)
    }
}

/// The radio link and PDU session shared by every pod on the node.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeSession {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radio_link_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pdu_session_id: Option<String>,
}

/// Something an in-flight ADD has acquired and must give back on rollback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Acquired {
    Mark { mark: FwMark },
    Flow { flow: FlowRef },
    Enforcement { receipt: ApplyReceipt },
    Filter { id: String },
}

/// Journal entry for an ADD that has not committed yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PendingAdd {
    pub container_id: String,
    pub pod_ip: IpAddr,
    pub acquired: Vec<Acquired>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt binding store {path} line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
}

/// Committed bindings plus the journal of in-flight ADDs. Every mutation is
/// written through to the state file with an atomic replace.
#[derive(Debug, Default)]
pub struct BindingStore {
    bindings: BTreeMap<String, FlowBinding>,
    pending: BTreeMap<String, PendingAdd>,
    node: NodeSession,
    path: Option<PathBuf>,
}

impl BindingStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        let mut store = Self {
            path: Some(path.clone()),
            ..Self::default()
        };
        match fs::read_to_string(&path) {
            Ok(text) => store.parse(&text, &path)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => store.persist()?,
            Err(source) => return Err(StoreError::Io { path, source }),
        }
        Ok(store)
    }

    fn parse(&mut self, text: &str, path: &Path) -> Result<(), StoreError> {
        let corrupt = |line: usize, reason: String| StoreError::Corrupt {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            _ => return Err(corrupt(1, format!("expected header {HEADER:?}"))),
        }
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (tag, body) = line.split_once(' ').unwrap_or((line, ""));
            let err = |e: serde_json::Error| corrupt(line_no, e.to_string());
            match tag {
                "node" => self.node = serde_json::from_str(body).map_err(err)?,
                "binding" => {
                    let b: FlowBinding = serde_json::from_str(body).map_err(err)?;
                    self.bindings.insert(b.container_id.clone(), b);
                }
                "pending" => {
                    let p: PendingAdd = serde_json::from_str(body).map_err(err)?;
                    self.pending.insert(p.container_id.clone(), p);
                }
                other => return Err(corrupt(line_no, format!("unknown record {other:?}"))),
            }
        }
        Ok(())
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, container_id: &str) -> Option<&FlowBinding> {
        self.bindings.get(container_id)
    }

    pub fn bindings(&self) -> impl Iterator<Item = &FlowBinding> {
        self.bindings.values()
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }

    pub fn pending(&self) -> impl Iterator<Item = &PendingAdd> {
        self.pending.values()
    }

    pub fn is_pending(&self, container_id: &str) -> bool {
        self.pending.contains_key(container_id)
    }

    pub fn node(&self) -> &NodeSession {
        &self.node
    }

    pub fn set_node(&mut self, node: NodeSession) -> Result<(), StoreError> {
        self.node = node;
        self.persist()
    }

    pub fn begin(&mut self, container_id: &str, pod_ip: IpAddr) -> Result<(), StoreError> {
        self.pending.insert(
            container_id.to_string(),
            PendingAdd {
                container_id: container_id.to_string(),
                pod_ip,
                acquired: Vec::new(),
            },
        );
        self.persist()
    }

    pub fn record(&mut self, container_id: &str, item: Acquired) -> Result<(), StoreError> {
        if let Some(p) = self.pending.get_mut(container_id) {
            p.acquired.push(item);
        }
        self.persist()
    }

    /// Drops the journal entry without committing.
    pub fn abort(&mut self, container_id: &str) -> Result<(), StoreError> {
        self.pending.remove(container_id);
        self.persist()
    }

    /// Replaces the journal entry with the finished binding in one write.
    pub fn commit(&mut self, binding: FlowBinding) -> Result<(), StoreError> {
        let id = binding.container_id.clone();
        let previous = self.pending.remove(&id);
        self.bindings.insert(id.clone(), binding);
        if let Err(e) = self.persist() {
            self.bindings.remove(&id);
            if let Some(p) = previous {
                self.pending.insert(id, p);
            }
            return Err(e);
        }
        Ok(())
    }

    pub fn remove(&mut self, container_id: &str) -> Result<Option<FlowBinding>, StoreError> {
        let removed = self.bindings.remove(container_id);
        if removed.is_some() {
            self.persist()?;
        }
        Ok(removed)
    }

    /// Bindings and journal, canonical. Node session ids are left out: the
    /// session outlives the pods that use it.
    pub fn dump(&self) -> String {
        let mut out = format!("bindings={} pending={}\n", self.bindings.len(), self.pending.len());
        for b in self.bindings.values() {
            out.push_str("binding ");
            out.push_str(&serde_json::to_string(b).expect("binding serializes"));
            out.push('\n');
        }
        for p in self.pending.values() {
            out.push_str("pending ");
            out.push_str(&serde_json::to_string(p).expect("journal serializes"));
            out.push('\n');
        }
        out
    }

    fn file_text(&self) -> String {
        let mut out = format!("{HEADER}\n");
        if self.node != NodeSession::default() {
            out.push_str("node ");
            out.push_str(&serde_json::to_string(&self.node).expect("node serializes"));
            out.push('\n');
        }
        for line in self.dump().lines().skip(1) {
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    fn persist(&self) -> Result<(), StoreError> {
        match &self.path {
            Some(path) => write_atomic(path, self.file_text().as_bytes()).map_err(|source| StoreError::Io {
                path: path.clone(),
                source,
            }),
            None => Ok(()),
        }
    }
}
