//! Experiment descriptions and the harness that runs them.
//!
//! A description names the pods, their requirements and the traffic schedule:
//!
//! ```toml
//! name = "qos-limited"
//! seed = 7
//! packets_per_pod = 1000
//! interval_us = 1000
//! jitter_us = 500
//! payload_bytes = 256
//! reserved = ["Kubernetes", "CNI Portmap"]   # entries from the built-in registry
//!
//! [[pod]]
//! name = "unlimited"
//! ip = "10.244.1.10"
//!
//! [[pod]]
//! name = "limited"
//! ip = "10.244.1.11"
//! requirement = { latencyMs = 10 }
//! ```
//!
//! `default_five_qi` plus `[[profile]]` entries replace the built-in profile
//! table. Pods without a requirement stay unbound and ride the default class.

use std::net::{IpAddr, Ipv4Addr};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::daemon::{AddRequest, Daemon, DaemonError, DaemonParts, FixedClock, FlowBinding};
use crate::enforce::SimBackend;
use crate::fwmark::{load_registry, FwMarkSpace, DEFAULT_REGISTRY};
use crate::nef::{EmulatorClient, EmulatorError};
use crate::overlay::{run_priority_experiment, ExperimentPod, ExperimentReport, NodePath, Schedule};
use crate::qos::{FiveQiProfile, ProfileTable, QosRequirement};

pub const THREE_FLOW: &str = include_str!("../scenarios/three-flow.toml");
pub const QOS_LIMITED: &str = include_str!("../scenarios/qos-limited.toml");
pub const RATE_LIMITED: &str = include_str!("../scenarios/rate-limited.toml");

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PodDesc {
    pub name: String,
    pub ip: Ipv4Addr,
    #[serde(default)]
    pub requirement: Option<QosRequirement>,
}

fn default_seed() -> u64 {
    1
}

fn default_interval() -> u64 {
    1000
}

fn default_jitter() -> u64 {
    500
}

fn default_payload() -> usize {
    256
}

fn default_reserved() -> Vec<String> {
    vec!["Kubernetes".to_string(), "CNI Portmap".to_string()]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentDesc {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub packets_per_pod: usize,
    #[serde(default = "default_interval")]
    pub interval_us: u64,
    #[serde(default = "default_jitter")]
    pub jitter_us: u64,
    #[serde(default = "default_payload")]
    pub payload_bytes: usize,
    #[serde(default = "default_reserved")]
    pub reserved: Vec<String>,
    #[serde(default)]
    pub default_five_qi: Option<u8>,
    #[serde(default)]
    pub profile: Vec<FiveQiProfile>,
    #[serde(default)]
    pub pod: Vec<PodDesc>,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read {0}: {1}")]
    Read(String, std::io::Error),
    #[error("bad experiment description: {0}")]
    Parse(String),
    #[error("daemon refused pod {pod}: {source}")]
    Daemon { pod: String, source: DaemonError },
    #[error(transparent)]
    Emulator(#[from] EmulatorError),
}

impl ExperimentDesc {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let desc: Self = toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
        desc.profile_table()?;
        desc.registry()?;
        let mut names: Vec<&str> = desc.pod.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(ExperimentError::Parse("pod names must be unique".to_string()));
        }
        Ok(desc)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Read(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn profile_table(&self) -> Result<ProfileTable, ExperimentError> {
        match (self.profile.is_empty(), self.default_five_qi) {
            (true, None) => Ok(ProfileTable::default()),
            (false, Some(d)) => {
                ProfileTable::new(self.profile.clone(), d).map_err(|e| ExperimentError::Parse(e.to_string()))
            }
            _ => Err(ExperimentError::Parse(
                "default_five_qi and [[profile]] must be given together".to_string(),
            )),
        }
    }

    fn registry(&self) -> Result<FwMarkSpace, ExperimentError> {
        let all = load_registry(DEFAULT_REGISTRY).expect("built-in registry parses");
        let mut entries = Vec::new();
        for name in &self.reserved {
            let e = all
                .iter()
                .find(|e| &e.software == name)
                .ok_or_else(|| ExperimentError::Parse(format!("unknown registry entry {name:?}")))?;
            entries.push(e.clone());
        }
        Ok(FwMarkSpace::new(entries))
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            seed: self.seed,
            interval: Duration::from_micros(self.interval_us),
            jitter: Duration::from_micros(self.jitter_us),
            payload_bytes: self.payload_bytes,
            ..Schedule::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub bindings: Vec<FlowBinding>,
}

/// Binds every pod with a requirement through a fresh in-process daemon,
/// drives the traffic, then unbinds again.
pub fn run(desc: &ExperimentDesc, emulator: Arc<dyn EmulatorClient>) -> Result<ExperimentOutcome, ExperimentError> {
    let backend = Arc::new(SimBackend::new());
    let mut parts = DaemonParts::new(desc.profile_table()?, desc.registry()?, backend.clone(), emulator.clone());
    parts.clock = Arc::new(FixedClock(0));
    let daemon = Daemon::new(parts);
    let mut bindings = Vec::new();
    let mut bound = Vec::new();
    let result = (|| -> Result<ExperimentReport, ExperimentError> {
        for pod in &desc.pod {
            if let Some(req) = &pod.requirement {
                let b = daemon
                    .handle_add(&AddRequest {
                        container_id: pod.name.clone(),
                        pod_ip: IpAddr::V4(pod.ip),
                        requirement: req.clone(),
                    })
                    .map_err(|source| ExperimentError::Daemon {
                        pod: pod.name.clone(),
                        source,
                    })?;
                bound.push(pod.name.clone());
                bindings.push(b);
            }
        }
        let path = NodePath::new(backend.mark_rules());
        let pods: Vec<ExperimentPod> = desc
            .pod
            .iter()
            .map(|p| ExperimentPod {
                name: p.name.clone(),
                ip: p.ip,
            })
            .collect();
        Ok(run_priority_experiment(
            &pods,
            desc.packets_per_pod,
            &desc.schedule(),
            &path,
            emulator.as_ref(),
        )?)
    })();
    for name in bound {
        if let Err(e) = daemon.handle_del(&name) {
            tracing::warn!("cleanup of {name} failed: {e}");
        }
    }
    Ok(ExperimentOutcome {
        report: result?,
        bindings,
    })
}
