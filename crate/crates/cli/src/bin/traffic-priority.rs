//! Chained CNI plugin. Talks to qosd over its control socket.

use std::io::Read;
use std::process::ExitCode;
use std::time::Duration;

use qosmark_core::cni::{run_plugin, DEFAULT_DAEMON_SOCKET};
use qosmark_core::daemon::server::SocketClient;
use qosmark_core::DaemonClient;

fn main() -> ExitCode {
    // stdout carries the CNI result, so logs go to stderr and stay quiet by default.
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("TRAFFIC_PRIORITY_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let env = std::env::vars().collect();
    let mut stdin = Vec::new();
    if let Err(e) = std::io::stdin().read_to_end(&mut stdin) {
        eprintln!("traffic-priority: reading stdin: {e}");
    }
    let mut stdout = std::io::stdout().lock();
    let status = run_plugin(&env, &stdin, &mut stdout, |conf| {
        let socket = conf
            .daemon_socket
            .clone()
            .unwrap_or_else(|| DEFAULT_DAEMON_SOCKET.into());
        Box::new(SocketClient::new(socket).with_timeout(Duration::from_secs(30))) as Box<dyn DaemonClient>
    });
    ExitCode::from(status as u8)
}
