//! Pod-level QoS for container workloads on a cellular uplink.
//!
//! A chained CNI plugin hands each pod's QoS demand to a node daemon. The
//! daemon maps the demand to a 5QI profile, allocates a conflict-free fwmark,
//! asks the 5G stack for a QoS flow, and installs a mark rule plus an
//! fw-classifier filter so the pod's egress packets land in that flow.

pub mod cni;
pub mod daemon;
pub mod enforce;
pub mod experiment;
pub mod fwmark;
pub mod nef;
pub mod overlay;
pub mod qos;

pub use daemon::{AddRequest, CheckReport, Daemon, DaemonClient, DaemonError, DaemonParts, FlowBinding, StateDump};
pub use enforce::{Backend, EnforcementPlan, FlowRef, MarkRuleSpec, SimBackend};
pub use fwmark::{FwMark, FwMarkSpace, ReservedEntry};
pub use nef::{Emulator, EmulatorClient, EmulatorError, HttpEmulatorClient};
pub use overlay::{NodePath, SimPacket};
pub use qos::{map_requirement, FiveQiProfile, ProfileTable, QosRequirement};
