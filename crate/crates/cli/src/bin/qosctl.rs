//! Operator CLI.
//!
//! Exit status: 0 ok, 1 other failure, 2 usage or unreadable input file,
//! 3 daemon unreachable, 4 emulator unreachable.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use qosmark_core::cni::DEFAULT_DAEMON_SOCKET;
use qosmark_core::daemon::server::SocketClient;
use qosmark_core::experiment::{self, ExperimentDesc, ExperimentError, QOS_LIMITED, RATE_LIMITED, THREE_FLOW};
use qosmark_core::fwmark::{self, load_registry, DEFAULT_REGISTRY};
use qosmark_core::{DaemonClient, DaemonError, Emulator, EmulatorClient, EmulatorError, FlowBinding, HttpEmulatorClient};

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DAEMON: u8 = 3;
const EXIT_EMULATOR: u8 = 4;

#[derive(Parser)]
#[command(name = "qosctl", version, about = "Inspect and exercise a qosmark node")]
struct Cli {
    /// Daemon control socket.
    #[arg(long, global = true, env = "QOSCTL_DAEMON_SOCKET", default_value = DEFAULT_DAEMON_SOCKET)]
    daemon_socket: PathBuf,
    /// Emulator base URL. `experiment` runs an in-process emulator when unset.
    #[arg(long, global = true, env = "QOSCTL_EMULATOR_URL")]
    emulator_url: Option<String>,
    /// Tab-separated output.
    #[arg(long, global = true)]
    machine: bool,
    /// Overrides the experiment's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List live flow bindings.
    Bindings,
    /// Report the reserved and free fwmark bits of a registry file.
    FwmarkAudit {
        /// Registry file; the built-in table when omitted.
        registry: Option<PathBuf>,
    },
    /// Run a priority experiment.
    Experiment {
        /// Description file, or builtin:three-flow, builtin:qos-limited, builtin:rate-limited.
        description: String,
    },
    /// Print the emulator's traffic-control tree.
    Tree,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<DaemonError> for Failure {
    fn from(e: DaemonError) -> Self {
        let code = if matches!(e, DaemonError::Unreachable(_)) {
            EXIT_DAEMON
        } else {
            EXIT_OTHER
        };
        Self::new(code, e.to_string())
    }
}

impl From<EmulatorError> for Failure {
    fn from(e: EmulatorError) -> Self {
        let code = if matches!(e, EmulatorError::Unreachable(_)) {
            EXIT_EMULATOR
        } else {
            EXIT_OTHER
        };
        Self::new(code, e.to_string())
    }
}

fn bindings_table(bindings: &[FlowBinding], machine: bool) -> String {
    let mut rows: Vec<&FlowBinding> = bindings.iter().collect();
    rows.sort_by(|a, b| a.container_id.cmp(&b.container_id));
    let mut out = String::new();
    if machine {
        out.push_str("container\tpod_ip\tmark\tmask\t5qi\tsession\tqfi\tfilter\n");
        for b in rows {
            out.push_str(&format!(
                "{}\t{}\t{:#010x}\t{:#010x}\t{}\t{}\t{}\t{}\n",
                b.container_id,
                b.pod_ip,
                b.mark.value(),
                b.mask,
                b.profile.five_qi,
                b.pdu_session_id,
                b.qfi,
                b.filter_id
            ));
        }
        return out;
    }
    out.push_str(&format!(
        "{:<24} {:<16} {:<10} {:<10} {:>4}  {}\n",
        "CONTAINER", "POD IP", "MARK", "MASK", "5QI", "FLOW"
    ));
    for b in rows {
        out.push_str(&format!(
            "{:<24} {:<16} {:<10} {:<10} {:>4}  ({}, {})\n",
            b.container_id,
            b.pod_ip.to_string(),
            format!("{:#x}", b.mark.value()),
            format!("{:#x}", b.mask),
            b.profile.five_qi,
            b.pdu_session_id,
            b.qfi
        ));
    }
    out
}

fn load_description(arg: &str) -> Result<ExperimentDesc, Failure> {
    let builtin = match arg {
        "builtin:three-flow" => Some(THREE_FLOW),
        "builtin:qos-limited" => Some(QOS_LIMITED),
        "builtin:rate-limited" => Some(RATE_LIMITED),
        _ => None,
    };
    let parsed = match builtin {
        Some(text) => ExperimentDesc::parse(text),
        None => ExperimentDesc::load(arg.as_ref()),
    };
    parsed.map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))
}

fn run(cli: Cli) -> Result<String, Failure> {
    match cli.command {
        Command::Bindings => {
            let client = SocketClient::new(&cli.daemon_socket);
            Ok(bindings_table(&client.list_bindings()?, cli.machine))
        }
        Command::FwmarkAudit { registry } => {
            let text = match &registry {
                Some(path) => std::fs::read_to_string(path)
                    .map_err(|e| Failure::new(EXIT_USAGE, format!("cannot read {}: {e}", path.display())))?,
                None => DEFAULT_REGISTRY.to_string(),
            };
            let entries = load_registry(&text).map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?;
            let audit = fwmark::audit(&entries);
            Ok(if cli.machine {
                audit.render_machine()
            } else {
                audit.render_text()
            })
        }
        Command::Experiment { description } => {
            let mut desc = load_description(&description)?;
            if let Some(seed) = cli.seed {
                desc.seed = seed;
            }
            let emulator: Arc<dyn EmulatorClient> = match &cli.emulator_url {
                Some(url) => {
                    let client = HttpEmulatorClient::new(url.clone());
                    client.healthz()?;
                    Arc::new(client)
                }
                None => Arc::new(Emulator::new()),
            };
            let outcome = experiment::run(&desc, emulator).map_err(|e| match e {
                ExperimentError::Emulator(e) => Failure::from(e),
                ExperimentError::Daemon { source: DaemonError::NetworkRejection(m), .. }
                    if m.contains("unreachable") =>
                {
                    Failure::new(EXIT_EMULATOR, m)
                }
                other => Failure::new(EXIT_OTHER, other.to_string()),
            })?;
            Ok(if cli.machine {
                outcome.report.render_machine()
            } else {
                format!("experiment {} (seed {})\n{}", desc.name, desc.seed, outcome.report.render_text())
            })
        }
        Command::Tree => {
            let url = cli
                .emulator_url
                .clone()
                .unwrap_or_else(|| "http://127.0.0.1:8080".to_string());
            Ok(HttpEmulatorClient::new(url).dump_tree()?)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("QOSCTL_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("qosctl: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
