mod net;
mod tables;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ews_core::config::{resolve_config_path, Config, ConfigError, CONFIG_ENV};
use ews_core::domain::NodeId;
use ews_core::nodesim::{load_scenario, Scenario, ScenarioError};
use ews_core::replay::{run_replay, ReplayOptions, REPLAY_EPOCH};

/// Landslide early-warning telemetry: field node, base station, replays and
/// offline analysis.
#[derive(Debug, Parser)]
#[command(name = "ews", version)]
struct Cli {
    /// Configuration file (TOML).
    #[arg(long, global = true, env = CONFIG_ENV, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a field node that streams a scenario to a server over TCP.
    Node {
        /// Server address, host:port.
        #[arg(long, value_name = "ADDR")]
        connect: String,
        /// Scenario CSV with t_offset_s,sensor,raw rows.
        #[arg(long, value_name = "FILE")]
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        node_id: u16,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speedup: f64,
    },
    /// Run the base station until interrupted.
    Server {
        /// Accept node connections on this TCP address.
        #[arg(long, value_name = "ADDR", required_unless_present = "sim", conflicts_with = "sim")]
        listen: Option<String>,
        /// Drive an in-process simulated node instead of listening.
        #[arg(long, requires = "scenario")]
        sim: bool,
        /// Scenario for the simulated node.
        #[arg(long, value_name = "FILE")]
        scenario: Option<PathBuf>,
        /// Store directory (overrides the config file).
        #[arg(long, value_name = "DIR")]
        store: Option<PathBuf>,
        /// Link RNG seed for --sim.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Simulated seconds per wall-clock second for --sim; unpaced if omitted.
        #[arg(long)]
        speedup: Option<f64>,
    },
    /// Replay a scenario through a simulated node, link and server.
    Replay {
        #[arg(long, value_name = "FILE")]
        scenario: PathBuf,
        /// Link RNG seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Simulated seconds per wall-clock second; unpaced if omitted.
        #[arg(long)]
        speedup: Option<f64>,
        /// Empty store directory to write into (overrides the config file).
        #[arg(long, value_name = "DIR")]
        store: Option<PathBuf>,
        /// Write the event trace (ts,side,node_id,state,event,action) here.
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
    },
    /// Rain events and intensity-duration exceedances in a store.
    Analyze {
        /// Store directory (overrides the config file).
        #[arg(long, value_name = "DIR")]
        store: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Per-sensor summary, forecast snapshot and alert history of a store.
    Report {
        /// Store directory (overrides the config file).
        #[arg(long, value_name = "DIR")]
        store: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

/// Problems with flags, configuration or input files: exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.downcast_ref::<UsageError>().is_some()
        || e.downcast_ref::<ConfigError>().is_some()
        || e.downcast_ref::<ScenarioError>().is_some()
}

fn require_config(explicit: Option<&Path>) -> Result<Config> {
    let path = resolve_config_path(explicit)
        .ok_or_else(|| usage(format!("no configuration: pass --config or set {CONFIG_ENV}")))?;
    Ok(Config::load(&path)?)
}

fn optional_config(explicit: Option<&Path>) -> Result<Option<Config>> {
    resolve_config_path(explicit)
        .map(|p| Config::load(&p).map_err(Into::into))
        .transpose()
}

fn store_dir(flag: Option<PathBuf>, config: Option<&Config>) -> Result<PathBuf> {
    flag.or_else(|| config.map(|c| c.store.clone()))
        .ok_or_else(|| usage("no store directory: pass --store or a config file"))
}

fn scenario(path: &Path) -> Result<Scenario> {
    Ok(load_scenario(path)?)
}

fn check_speedup(speedup: Option<f64>) -> Result<()> {
    match speedup {
        Some(s) if !(s.is_finite() && s > 0.0) => Err(usage(format!("--speedup must be positive, got {s}"))),
        _ => Ok(()),
    }
}

fn replay(config: Config, scenario: Scenario, store: &Path, seed: u64, speedup: Option<f64>, trace: Option<&Path>) -> Result<()> {
    let trace: Option<Box<dyn Write>> = match trace {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating trace {}", p.display()))?;
            Some(Box::new(BufWriter::new(f)))
        }
        None => None,
    };
    let opts = ReplayOptions {
        seed,
        speedup,
        start: REPLAY_EPOCH,
        console: || Box::new(io::stdout()),
        trace,
        ..Default::default()
    };
    std::fs::create_dir_all(store).with_context(|| format!("creating store {}", store.display()))?;
    let summary = run_replay(config, scenario, store, opts)?;
    println!("{summary}");
    if !summary.complete {
        bail!("replay ended with readings still unacknowledged");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config_flag = cli.config.as_deref();
    match cli.command {
        Command::Node {
            connect,
            scenario: path,
            node_id,
            speedup,
        } => {
            check_speedup(Some(speedup))?;
            let scenario = scenario(&path)?;
            let start = SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs();
            net::run_node(&connect, scenario, NodeId(node_id), speedup, start)
        }
        Command::Server {
            listen,
            sim,
            scenario: path,
            store,
            seed,
            speedup,
        } => {
            let config = require_config(config_flag)?;
            let store = store_dir(store, Some(&config))?;
            check_speedup(speedup)?;
            if sim {
                let path = path.ok_or_else(|| usage("--sim needs --scenario"))?;
                replay(config, scenario(&path)?, &store, seed, speedup, None)
            } else {
                let listen = listen.ok_or_else(|| usage("--listen or --sim is required"))?;
                net::run_server(&config, &store, &listen)
            }
        }
        Command::Replay {
            scenario: path,
            seed,
            speedup,
            store,
            trace,
        } => {
            let config = require_config(config_flag)?;
            let store = store_dir(store, Some(&config))?;
            check_speedup(speedup)?;
            replay(config, scenario(&path)?, &store, seed, speedup, trace.as_deref())
        }
        Command::Analyze { store, format } => {
            let config = optional_config(config_flag)?;
            let store = store_dir(store, config.as_ref())?;
            tables::analyze(&store, config.as_ref(), format, &mut io::stdout().lock())
        }
        Command::Report { store, format } => {
            let config = optional_config(config_flag)?;
            let store = store_dir(store, config.as_ref())?;
            tables::report(&store, config.as_ref(), format, &mut io::stdout().lock())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
