//! Node daemon. Reads its config, recovers any interrupted ADD, then serves
//! the control socket.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use qosmark_core::daemon::config::DaemonConfig;
use qosmark_core::daemon::server::{bind, serve};
use qosmark_core::DaemonClient;

#[derive(Parser)]
#[command(name = "qosd", version, about = "qosmark node daemon")]
struct Args {
    /// TOML config file. Every key can also be set as QOSD_<KEY>.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("QOSD_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let config = match DaemonConfig::load(args.config.as_deref(), |k| std::env::var(k).ok()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("qosd: {e}");
            return ExitCode::from(2);
        }
    };
    let daemon = match config.build() {
        Ok(d) => Arc::new(d),
        Err(e) => {
            eprintln!("qosd: {e}");
            return ExitCode::from(1);
        }
    };
    match daemon.recover() {
        Ok(report) if report.is_clean() => tracing::info!("state consistent"),
        Ok(report) => tracing::warn!("recovered: {report:?}"),
        Err(e) => {
            eprintln!("qosd: recovery failed: {e}");
            return ExitCode::from(1);
        }
    }
    tracing::info!(
        "free mask {:#010x}, {} bindings, socket {}",
        daemon.free_mask(),
        daemon.bindings().len(),
        config.socket_path.display()
    );
    if let Some(dir) = config.socket_path.parent() {
        let _ = std::fs::create_dir_all(dir);
    }
    let listener = match bind(&config.socket_path) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("qosd: cannot bind {}: {e}", config.socket_path.display());
            return ExitCode::from(1);
        }
    };
    let client: Arc<dyn DaemonClient + Send + Sync> = daemon;
    match serve(listener, client) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qosd: {e}");
            ExitCode::from(1)
        }
    }
}
