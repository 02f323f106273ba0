//! Line-delimited JSON over a Unix stream socket.
//!
//! Requests, one per line:
//!
//! ```text
//! {"op":"add","containerId":"abc","podIp":"10.244.1.5","requirement":{"latencyMs":10}}
//! {"op":"del","containerId":"abc"}
//! {"op":"check","containerId":"abc"}
//! {"op":"snapshot"}
//! {"op":"bindings"}
//! ```
//!
//! Each gets one response line: `{"ok":true,"result":...}` or
//! `{"ok":false,"error":{"kind":...,"message":...}}`.

use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, warn};

use super::{AddRequest, CheckReport, DaemonClient, DaemonError, DelReport, FlowBinding, StateDump};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Add(AddRequest),
    #[serde(rename_all = "camelCase")]
    Del { container_id: String },
    #[serde(rename_all = "camelCase")]
    Check { container_id: String },
    Snapshot,
    Bindings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl Response {
    fn from_result<T: Serialize>(r: Result<T, DaemonError>) -> Self {
        match r {
            Ok(v) => Self {
                ok: true,
                result: Some(serde_json::to_value(v).expect("result serializes")),
                error: None,
            },
            Err(e) => Self::error(&e),
        }
    }

    fn error(e: &DaemonError) -> Self {
        Self {
            ok: false,
            result: None,
            error: Some(WireError {
                kind: e.kind().to_string(),
                message: e.message(),
            }),
        }
    }
}

/// Answers one request against any daemon handle.
pub fn dispatch(daemon: &dyn DaemonClient, request: Request) -> Response {
    match request {
        Request::Add(req) => Response::from_result(daemon.add(&req)),
        Request::Del { container_id } => Response::from_result(daemon.del(&container_id)),
        Request::Check { container_id } => Response::from_result(daemon.check(&container_id)),
        Request::Snapshot => Response::from_result(daemon.snapshot()),
        Request::Bindings => Response::from_result(daemon.list_bindings()),
    }
}

fn serve_connection(stream: UnixStream, daemon: &dyn DaemonClient) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(req) => {
                debug!("request {req:?}");
                dispatch(daemon, req)
            }
            Err(e) => Response::error(&DaemonError::Protocol(format!("bad request: {e}"))),
        };
        let mut out = serde_json::to_string(&response).expect("response serializes");
        out.push('\n');
        writer.write_all(out.as_bytes())?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve(listener: UnixListener, daemon: Arc<dyn DaemonClient + Send + Sync>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let daemon = daemon.clone();
        std::thread::spawn(move || {
            if let Err(e) = serve_connection(stream, daemon.as_ref()) {
                warn!("daemon connection ended: {e}");
            }
        });
    }
    Ok(())
}

/// Binds `path`, replacing a stale socket file.
pub fn bind(path: &Path) -> io::Result<UnixListener> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    UnixListener::bind(path)
}

/// Talks to a daemon over its socket, one connection per request.
#[derive(Debug, Clone)]
pub struct SocketClient {
    path: PathBuf,
    timeout: Duration,
}

impl SocketClient {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            timeout: Duration::from_secs(30),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn call<T: DeserializeOwned>(&self, request: &Request) -> Result<T, DaemonError> {
        let unreachable = |e: io::Error| DaemonError::Unreachable(format!("{}: {e}", self.path.display()));
        let stream = UnixStream::connect(&self.path).map_err(unreachable)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(unreachable)?;
        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        (&stream).write_all(line.as_bytes()).map_err(unreachable)?;
        let mut reply = String::new();
        BufReader::new(&stream).read_line(&mut reply).map_err(unreachable)?;
        if reply.is_empty() {
            return Err(DaemonError::Unreachable("daemon closed the connection".to_string()));
        }
        let response: Response =
            serde_json::from_str(&reply).map_err(|e| DaemonError::Protocol(format!("{e}: {reply}")))?;
        if response.ok {
            serde_json::from_value(response.result.unwrap_or(Value::Null))
                .map_err(|e| DaemonError::Protocol(e.to_string()))
        } else {
            let err = response.error.unwrap_or(WireError {
                kind: "protocol".to_string(),
                message: "error response without details".to_string(),
            });
            Err(DaemonError::from_kind(&err.kind, err.message))
        }
    }
}

impl DaemonClient for SocketClient {
    fn add(&self, req: &AddRequest) -> Result<FlowBinding, DaemonError> {
        self.call(&Request::Add(req.clone()))
    }

    fn del(&self, container_id: &str) -> Result<DelReport, DaemonError> {
        self.call(&Request::Del {
            container_id: container_id.to_string(),
        })
    }

    fn check(&self, container_id: &str) -> Result<CheckReport, DaemonError> {
        self.call(&Request::Check {
            container_id: container_id.to_string(),
        })
    }

    fn snapshot(&self) -> Result<StateDump, DaemonError> {
        self.call(&Request::Snapshot)
    }

    fn list_bindings(&self) -> Result<Vec<FlowBinding>, DaemonError> {
        self.call(&Request::Bindings)
    }
}
