//! 5G network emulator REST service.

use std::net::SocketAddr;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use qosmark_core::nef::rest::{serve, TimeMode};
use qosmark_core::Emulator;

#[derive(Parser)]
#[command(name = "nef-emulator", version, about = "Emulated 5G QoS control plane and data path")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Hold /transmit responses for the packet's latency instead of only
    /// computing it.
    #[arg(long)]
    wall_clock: bool,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("NEF_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let listener = match tokio::net::TcpListener::bind(args.listen).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("nef-emulator: cannot listen on {}: {e}", args.listen);
            return ExitCode::from(1);
        }
    };
    let mode = if args.wall_clock {
        TimeMode::WallClock
    } else {
        TimeMode::Virtual
    };
    match serve(listener, Arc::new(Emulator::new()), mode).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nef-emulator: {e}");
            ExitCode::from(1)
        }
    }
}
