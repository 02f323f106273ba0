//! The `traffic-priority` CNI plugin: a chained decorator that hands the pod's
//! QoS requirement to the node daemon and passes the previous plugin's result
//! through untouched.
//!
//! The requirement is read from the first of these that is present, taken as
//! a whole object:
//!
//! 1. `runtimeConfig.trafficPriority` (injected by the runtime from pod annotations)
//! 2. `trafficPriority` in the network configuration
//! 3. `CNI_ARGS` keys `latencyMs`, `fiveQi`, `guaranteedKbps`, `maxKbps`, `priorityClass`
//!
//! With no requirement anywhere, ADD is a pure pass-through.
//!
//! Error codes beyond the standard ones:
//!
//! | code | meaning |
//! |---|---|
//! | 100 | no free fwmark |
//! | 101 | requirement maps to no 5QI profile, or is invalid |
//! | 102 | 5G network rejected the flow |
//! | 103 | enforcement backend or daemon state failure |
//! | 104 | CHECK found missing or mismatched state |
//! | 105 | container already has a binding |
//! | 106 | pod has no address to mark (host network) |

use std::collections::BTreeMap;
use std::io::Write;
use std::net::IpAddr;
use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Value};

use crate::daemon::{AddRequest, DaemonClient, DaemonError, Verdict};
use crate::qos::QosRequirement;

pub const SUPPORTED_VERSIONS: &[&str] = &["0.3.0", "0.3.1", "0.4.0", "1.0.0", "1.1.0"];
pub const PLUGIN_TYPE: &str = "traffic-priority";
pub const DEFAULT_DAEMON_SOCKET: &str = "/run/qosmark/qosd.sock";

pub const CODE_INCOMPATIBLE_VERSION: u32 = 1;
pub const CODE_INVALID_ENV: u32 = 4;
pub const CODE_DECODE: u32 = 6;
pub const CODE_INVALID_CONFIG: u32 = 7;
pub const CODE_TRY_AGAIN: u32 = 11;
pub const CODE_EXHAUSTED: u32 = 100;
pub const CODE_UNMAPPABLE: u32 = 101;
pub const CODE_NETWORK_REJECTED: u32 = 102;
pub const CODE_BACKEND: u32 = 103;
pub const CODE_CHECK_FAILED: u32 = 104;
pub const CODE_DUPLICATE: u32 = 105;
pub const CODE_HOST_NETWORK: u32 = 106;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Add,
    Del,
    Check,
    Version,
}

impl std::str::FromStr for Command {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "ADD" => Ok(Self::Add),
            "DEL" => Ok(Self::Del),
            "CHECK" => Ok(Self::Check),
            "VERSION" => Ok(Self::Version),
            _ => Err(()),
        }
    }
}

/// CNI error document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CniError {
    pub code: u32,
    pub msg: String,
    pub details: String,
}

impl CniError {
    pub fn new(code: u32, msg: impl Into<String>, details: impl Into<String>) -> Self {
        Self {
            code,
            msg: msg.into(),
            details: details.into(),
        }
    }

    pub fn to_document(&self, cni_version: &str) -> Value {
        json!({
            "cniVersion": cni_version,
            "code": self.code,
            "msg": self.msg,
            "details": self.details,
        })
    }
}

impl std::fmt::Display for CniError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}: {}", self.code, self.msg, self.details)
    }
}

impl std::error::Error for CniError {}

impl From<DaemonError> for CniError {
    fn from(e: DaemonError) -> Self {
        let code = match &e {
            DaemonError::Unreachable(_) => CODE_TRY_AGAIN,
            DaemonError::Exhausted(_) => CODE_EXHAUSTED,
            DaemonError::Unmappable(_) | DaemonError::InvalidRequirement(_) => CODE_UNMAPPABLE,
            DaemonError::NetworkRejection(_) => CODE_NETWORK_REJECTED,
            DaemonError::DuplicateContainer(_) => CODE_DUPLICATE,
            DaemonError::BackendFailure(_)
            | DaemonError::Persistence(_)
            | DaemonError::Crashed(_)
            | DaemonError::Protocol(_) => CODE_BACKEND,
        };
        Self::new(code, e.kind(), e.message())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetConf {
    pub cni_version: String,
    pub name: String,
    pub plugin_type: String,
    pub prev_result: Option<Value>,
    pub traffic_priority: Option<QosRequirement>,
    /// `runtimeConfig.trafficPriority`.
    pub runtime_traffic_priority: Option<QosRequirement>,
    pub daemon_socket: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CniInvocation {
    pub command: Command,
    pub container_id: String,
    pub netns_path: String,
    pub interface_name: String,
    pub extra_args: Vec<(String, String)>,
    pub net_conf: NetConf,
}

fn version_supported(v: &str) -> bool {
    SUPPORTED_VERSIONS.contains(&v)
}

fn requirement_from(value: &Value, origin: &str) -> Result<QosRequirement, CniError> {
    serde_json::from_value(value.clone())
        .map_err(|e| CniError::new(CODE_INVALID_CONFIG, "malformed-config", format!("{origin}: {e}")))
}

fn str_field(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Option<String>, CniError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(other) => Err(CniError::new(
            CODE_INVALID_CONFIG,
            "malformed-config",
            format!("{key} must be a string, got {other}"),
        )),
    }
}

/// Parses the network configuration document.
pub fn parse_net_conf(stdin: &[u8]) -> Result<NetConf, CniError> {
    let doc: Value = serde_json::from_slice(stdin)
        .map_err(|e| CniError::new(CODE_DECODE, "malformed-config", format!("config is not JSON: {e}")))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| CniError::new(CODE_DECODE, "malformed-config", "config must be a JSON object"))?;
    let cni_version = str_field(obj, "cniVersion")?
        .ok_or_else(|| CniError::new(CODE_INVALID_CONFIG, "malformed-config", "cniVersion is required"))?;
    if !version_supported(&cni_version) {
        return Err(CniError::new(
            CODE_INCOMPATIBLE_VERSION,
            "unsupported-version",
            format!("cniVersion {cni_version} not in {}", SUPPORTED_VERSIONS.join(", ")),
        ));
    }
    let prev_result = match obj.get("prevResult") {
        None | Some(Value::Null) => None,
        Some(v @ Value::Object(_)) => Some(v.clone()),
        Some(other) => {
            return Err(CniError::new(
                CODE_INVALID_CONFIG,
                "malformed-config",
                format!("prevResult must be an object, got {other}"),
            ))
        }
    };
    let traffic_priority = obj
        .get("trafficPriority")
        .map(|v| requirement_from(v, "trafficPriority"))
        .transpose()?;
    let runtime_traffic_priority = match obj.get("runtimeConfig") {
        None | Some(Value::Null) => None,
        Some(Value::Object(rc)) => rc
            .get("trafficPriority")
            .map(|v| requirement_from(v, "runtimeConfig.trafficPriority"))
            .transpose()?,
        Some(other) => {
            return Err(CniError::new(
                CODE_INVALID_CONFIG,
                "malformed-config",
                format!("runtimeConfig must be an object, got {other}"),
            ))
        }
    };
    Ok(NetConf {
        cni_version,
        name: str_field(obj, "name")?.unwrap_or_default(),
        plugin_type: str_field(obj, "type")?.unwrap_or_default(),
        prev_result,
        traffic_priority,
        runtime_traffic_priority,
        daemon_socket: str_field(obj, "daemonSocket")?.map(PathBuf::from),
    })
}

fn parse_cni_args(raw: &str) -> Result<Vec<(String, String)>, CniError> {
    raw.split(';')
        .filter(|p| !p.is_empty())
        .map(|pair| {
            pair.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| CniError::new(CODE_INVALID_ENV, "invalid-args", format!("CNI_ARGS entry {pair:?} has no '='")))
        })
        .collect()
}

/// Builds a validated invocation from the environment and standard input.
pub fn parse_invocation(env: &BTreeMap<String, String>, stdin: &[u8]) -> Result<CniInvocation, CniError> {
    let get = |k: &str| env.get(k).map(String::as_str).unwrap_or("");
    let command_str = get("CNI_COMMAND");
    if command_str.is_empty() {
        return Err(CniError::new(CODE_INVALID_ENV, "missing-command", "CNI_COMMAND is not set"));
    }
    let command: Command = command_str.parse().map_err(|_| {
        CniError::new(CODE_INVALID_ENV, "missing-command", format!("unknown CNI_COMMAND {command_str:?}"))
    })?;
    if command == Command::Version {
        // Only the version matters here, and even that may be absent.
        let cni_version = serde_json::from_slice::<Value>(stdin)
            .ok()
            .and_then(|v| v.get("cniVersion").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_default();
        return Ok(CniInvocation {
            command,
            container_id: String::new(),
            netns_path: String::new(),
            interface_name: String::new(),
            extra_args: Vec::new(),
            net_conf: NetConf {
                cni_version,
                ..NetConf::default()
            },
        });
    }
    let container_id = get("CNI_CONTAINERID");
    if container_id.is_empty() {
        return Err(CniError::new(
            CODE_INVALID_ENV,
            "missing-container-id",
            "CNI_CONTAINERID is required",
        ));
    }
    let extra_args = parse_cni_args(get("CNI_ARGS"))?;
    let net_conf = parse_net_conf(stdin)?;
    Ok(CniInvocation {
        command,
        container_id: container_id.to_string(),
        netns_path: get("CNI_NETNS").to_string(),
        interface_name: get("CNI_IFNAME").to_string(),
        extra_args,
        net_conf,
    })
}

const ARG_KEYS: [&str; 5] = ["latencyMs", "fiveQi", "guaranteedKbps", "maxKbps", "priorityClass"];

impl CniInvocation {
    /// The requirement this pod asks for, if any. See the module docs for
    /// precedence.
    pub fn requirement(&self) -> Result<Option<QosRequirement>, CniError> {
        if let Some(r) = &self.net_conf.runtime_traffic_priority {
            return Ok(Some(r.clone()));
        }
        if let Some(r) = &self.net_conf.traffic_priority {
            return Ok(Some(r.clone()));
        }
        let mut obj = serde_json::Map::new();
        for (k, v) in &self.extra_args {
            if !ARG_KEYS.contains(&k.as_str()) {
                continue;
            }
            let value = if k == "priorityClass" {
                Value::String(v.clone())
            } else {
                let n: u64 = v.parse().map_err(|_| {
                    CniError::new(CODE_INVALID_ENV, "invalid-args", format!("CNI_ARGS {k}={v} is not a number"))
                })?;
                Value::from(n)
            };
            obj.insert(k.clone(), value);
        }
        if obj.is_empty() {
            return Ok(None);
        }
        requirement_from(&Value::Object(obj), "CNI_ARGS").map(Some)
    }

    fn version_for_output(&self) -> &str {
        if self.net_conf.cni_version.is_empty() {
            SUPPORTED_VERSIONS[SUPPORTED_VERSIONS.len() - 1]
        } else {
            &self.net_conf.cni_version
        }
    }
}

/// First address in a CNI result, without its prefix length.
pub fn pod_ip(prev_result: &Value) -> Option<IpAddr> {
    prev_result
        .get("ips")?
        .as_array()?
        .iter()
        .filter_map(|ip| ip.get("address")?.as_str())
        .find_map(|a| a.split('/').next()?.parse().ok())
}

pub fn run_add(inv: &CniInvocation, daemon: &dyn DaemonClient) -> Result<Value, CniError> {
    let prev = inv.net_conf.prev_result.clone().ok_or_else(|| {
        CniError::new(
            CODE_INVALID_CONFIG,
            "missing-prev-result",
            "traffic-priority is a chained plugin and needs prevResult",
        )
    })?;
    let Some(requirement) = inv.requirement()? else {
        return Ok(prev);
    };
    let pod_ip = pod_ip(&prev).ok_or_else(|| {
        CniError::new(
            CODE_HOST_NETWORK,
            "host-network",
            "prevResult carries no pod address; host-network pods cannot be marked",
        )
    })?;
    daemon.add(&AddRequest {
        container_id: inv.container_id.clone(),
        pod_ip,
        requirement,
    })?;
    Ok(prev)
}

pub fn run_del(inv: &CniInvocation, daemon: &dyn DaemonClient) -> Result<(), CniError> {
    let report = daemon.del(&inv.container_id)?;
    for d in &report.drift {
        tracing::warn!("DEL {}: {d}", inv.container_id);
    }
    Ok(())
}

pub fn run_check(inv: &CniInvocation, daemon: &dyn DaemonClient) -> Result<(), CniError> {
    let expected = inv.requirement()?.is_some();
    let report = daemon.check(&inv.container_id)?;
    match report.verdict {
        Verdict::Pass => Ok(()),
        Verdict::PassVacuous if !expected => Ok(()),
        Verdict::PassVacuous => Err(CniError::new(
            CODE_CHECK_FAILED,
            "check-failed",
            "binding missing",
        )),
        Verdict::Fail => Err(CniError::new(CODE_CHECK_FAILED, "check-failed", report.failures().join("; "))),
    }
}

pub fn run_version(inv: &CniInvocation) -> Value {
    json!({
        "cniVersion": inv.version_for_output(),
        "supportedVersions": SUPPORTED_VERSIONS,
    })
}

/// Whole plugin execution. Writes the result or error document to `stdout`
/// and returns the process exit status. `connect` is only called for commands
/// that need the daemon.
pub fn run_plugin<F>(env: &BTreeMap<String, String>, stdin: &[u8], stdout: &mut dyn Write, connect: F) -> i32
where
    F: FnOnce(&NetConf) -> Box<dyn DaemonClient>,
{
    let fallback_version = || {
        serde_json::from_slice::<Value>(stdin)
            .ok()
            .and_then(|v| v.get("cniVersion").and_then(Value::as_str).map(str::to_string))
            .filter(|v| version_supported(v))
            .unwrap_or_else(|| SUPPORTED_VERSIONS[SUPPORTED_VERSIONS.len() - 1].to_string())
    };
    let inv = match parse_invocation(env, stdin) {
        Ok(inv) => inv,
        Err(e) => return emit_error(stdout, &e, &fallback_version()),
    };
    let version = inv.version_for_output().to_string();
    let outcome: Result<Option<Value>, CniError> = match inv.command {
        Command::Version => Ok(Some(run_version(&inv))),
        Command::Add => {
            let daemon = connect(&inv.net_conf);
            run_add(&inv, daemon.as_ref()).map(Some)
        }
        Command::Del => {
            let daemon = connect(&inv.net_conf);
            run_del(&inv, daemon.as_ref()).map(|_| None)
        }
        Command::Check => {
            let daemon = connect(&inv.net_conf);
            run_check(&inv, daemon.as_ref()).map(|_| None)
        }
    };
    match outcome {
        Ok(Some(doc)) => {
            let _ = writeln!(stdout, "{}", serde_json::to_string(&doc).expect("json serializes"));
            0
        }
        Ok(None) => 0,
        Err(e) => emit_error(stdout, &e, &version),
    }
}

fn emit_error(stdout: &mut dyn Write, e: &CniError, version: &str) -> i32 {
    let _ = writeln!(stdout, "{}", e.to_document(version));
    1
}
