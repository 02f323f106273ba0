//! Daemon configuration: one TOML file, every key overridable from the
//! environment as `QOSD_<KEY>` (upper case).
//!
//! ```toml
//! emulator_url = "http://127.0.0.1:8080"
//! registry_path = "/etc/qosmark/registry.txt"     # optional
//! reserved = ["Kubernetes", "CNI Portmap"]        # built-in entries, used without registry_path
//! profile_table_path = "/etc/qosmark/profiles.toml" # optional
//! phys_interface = "eth0"
//! socket_path = "/run/qosmark/qosd.sock"
//! state_dir = "/var/lib/qosmark"
//! teardown_on_empty = false
//! backend = "sim"                                 # sim | dry-run | shell
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BindingStore, Daemon, DaemonParts, RetryPolicy, SystemClock};
use crate::enforce::{Backend, ShellBackend, SimBackend};
use crate::fwmark::{load_registry, FwMarkSpace, ReservedEntry, DEFAULT_REGISTRY};
use crate::nef::HttpEmulatorClient;
use crate::qos::{load_profile_table, ProfileTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Sim,
    DryRun,
    Shell,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(Self::Sim),
            "dry-run" => Ok(Self::DryRun),
            "shell" => Ok(Self::Shell),
            other => Err(format!("unknown backend {other:?} (sim, dry-run, shell)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaemonConfig {
    pub emulator_url: String,
    pub registry_path: Option<PathBuf>,
    pub reserved: Vec<String>,
    pub profile_table_path: Option<PathBuf>,
    pub phys_interface: String,
    pub socket_path: PathBuf,
    pub state_dir: PathBuf,
    pub teardown_on_empty: bool,
    pub backend: BackendKind,
}

impl Default for DaemonConfig {
    fn default() -> Self {
        Self {
            emulator_url: "http://127.0.0.1:8080".to_string(),
            registry_path: None,
            reserved: vec!["Kubernetes".to_string(), "CNI Portmap".to_string()],
            profile_table_path: None,
            phys_interface: "eth0".to_string(),
            socket_path: PathBuf::from("/run/qosmark/qosd.sock"),
            state_dir: PathBuf::from("/var/lib/qosmark"),
            teardown_on_empty: false,
            backend: BackendKind::Sim,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("bad config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("bad value for {var}: {message}")]
    Env { var: String, message: String },
    #[error("{0}")]
    Setup(String),
}

impl DaemonConfig {
    /// Reads `path` (if given), then applies overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::from_str(&text).map_err(|e| ConfigError::Parse {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?
            }
            None => Self::default(),
        };
        config.apply_env(env)?;
        Ok(config)
    }

    fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = env("QOSD_EMULATOR_URL") {
            self.emulator_url = v;
        }
        if let Some(v) = env("QOSD_REGISTRY_PATH") {
            self.registry_path = Some(v.into());
        }
        if let Some(v) = env("QOSD_RESERVED") {
            self.reserved = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        }
        if let Some(v) = env("QOSD_PROFILE_TABLE_PATH") {
            self.profile_table_path = Some(v.into());
        }
        if let Some(v) = env("QOSD_PHYS_INTERFACE") {
            self.phys_interface = v;
        }
        if let Some(v) = env("QOSD_SOCKET_PATH") {
            self.socket_path = v.into();
        }
        if let Some(v) = env("QOSD_STATE_DIR") {
            self.state_dir = v.into();
        }
        if let Some(v) = env("QOSD_TEARDOWN_ON_EMPTY") {
            self.teardown_on_empty = match v.as_str() {
                "1" | "true" | "yes" => true,
                "0" | "false" | "no" => false,
                _ => {
                    return Err(ConfigError::Env {
                        var: "QOSD_TEARDOWN_ON_EMPTY".to_string(),
                        message: format!("{v:?} is not a boolean"),
                    })
                }
            };
        }
        if let Some(v) = env("QOSD_BACKEND") {
            self.backend = v.parse().map_err(|message| ConfigError::Env {
                var: "QOSD_BACKEND".to_string(),
                message,
            })?;
        }
        Ok(())
    }

    fn read_optional(path: &Option<PathBuf>) -> Result<Option<String>, ConfigError> {
        path.as_ref()
            .map(|p| {
                fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.clone(),
                    source,
                })
            })
            .transpose()
    }

    pub fn profile_table(&self) -> Result<ProfileTable, ConfigError> {
        match Self::read_optional(&self.profile_table_path)? {
            Some(text) => load_profile_table(&text).map_err(|e| ConfigError::Setup(e.to_string())),
            None => Ok(ProfileTable::default()),
        }
    }

    pub fn backend(&self) -> Arc<dyn Backend> {
        match self.backend {
            BackendKind::Sim => Arc::new(SimBackend::new()),
            BackendKind::DryRun => Arc::new(ShellBackend::dry_run()),
            BackendKind::Shell => Arc::new(ShellBackend::executing()),
        }
    }

    /// The registry file if one is configured, else the named built-in entries.
    pub fn reserved_entries(&self) -> Result<Vec<ReservedEntry>, ConfigError> {
        if let Some(text) = Self::read_optional(&self.registry_path)? {
            return load_registry(&text).map_err(|e| ConfigError::Setup(e.to_string()));
        }
        let builtin = load_registry(DEFAULT_REGISTRY).expect("built-in registry parses");
        self.reserved
            .iter()
            .map(|name| {
                builtin
                    .iter()
                    .find(|e| &e.software == name)
                    .cloned()
                    .ok_or_else(|| ConfigError::Setup(format!("unknown built-in registry entry {name:?}")))
            })
            .collect()
    }

    /// Opens state under `state_dir` and assembles a daemon talking to the
    /// configured emulator. Recovery is left to the caller.
    pub fn build(&self) -> Result<Daemon, ConfigError> {
        let entries = self.reserved_entries()?;
        fs::create_dir_all(&self.state_dir).map_err(|source| ConfigError::Read {
            path: self.state_dir.clone(),
            source,
        })?;
        let marks = FwMarkSpace::open(entries, self.state_dir.join("fwmark.state"))
            .map_err(|e| ConfigError::Setup(e.to_string()))?;
        let store = BindingStore::open(self.state_dir.join("bindings.state"))
            .map_err(|e| ConfigError::Setup(e.to_string()))?;
        Ok(Daemon::new(DaemonParts {
            table: self.profile_table()?,
            marks,
            store,
            backend: self.backend(),
            emulator: Arc::new(HttpEmulatorClient::new(self.emulator_url.clone())),
            phys_interface: self.phys_interface.clone(),
            teardown_on_empty: self.teardown_on_empty,
            retry: RetryPolicy::default(),
            clock: Arc::new(SystemClock),
        }))
    }
}
