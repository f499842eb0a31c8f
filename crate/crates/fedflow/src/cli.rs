//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 when the config (or any other input) is
//! unusable, 1 when a run fails after starting. Config errors are detected
//! before anything is written under `--out`.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{ArgAction, Args, Parser, Subcommand};
use log::info;
use thiserror::Error;

use crate::config::TaskConfig;
use crate::runtime::{join_tcp, materialize, run_materialized, serve_tcp, ComponentRegistry, Materialized, RuntimeError};
use crate::tracker::{import, summarize_records, Tracker};

pub const MAPPING_FILE: &str = "mapping.txt";
pub const METRICS_FILE: &str = "metrics.ndl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HETEROGENEITY_FILE: &str = "heterogeneity.txt";

/// Task id used for runs started from the command line.
pub const CLI_TASK_ID: &str = "task-0";

const JOIN_PATIENCE: Duration = Duration::from_secs(30);

#[derive(Debug, Parser)]
#[command(name = "fedflow", version, about = "Federated learning runs on simulated or networked clients")]
pub struct Cli {
    /// More log output; repeat for more.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `data.seed`.
    #[arg(long, env = "FEDFLOW_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured workflow in process.
    Run {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, env = "FEDFLOW_OUT")]
        out: PathBuf,
    },
    /// Write the partition mapping and heterogeneity report only.
    Partition {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, env = "FEDFLOW_OUT")]
        out: PathBuf,
    },
    /// Summarize a metrics file.
    Report {
        /// Path to a metrics.ndl file.
        metrics: PathBuf,
    },
    /// Run the server of a networked task.
    Serve {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, env = "FEDFLOW_OUT")]
        out: PathBuf,
        #[arg(long)]
        listen: String,
    },
    /// Join a networked task as one client.
    Join {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        server: String,
        #[arg(long)]
        client_id: usize,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

/// Reads, overrides, and validates a config.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<TaskConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut config = TaskConfig::parse(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        config.data.seed = s;
        config.validate().map_err(|e| CliError::Input(e.to_string()))?;
    }
    Ok(config)
}

/// Config plus everything derived from it before any output is written.
fn prepare(task: &TaskArgs) -> Result<(TaskConfig, ComponentRegistry, Materialized), CliError> {
    let config = load_config(&task.config, task.seed)?;
    let registry = ComponentRegistry::with_builtins();
    let m = materialize(&config, &registry).map_err(|e| match e {
        RuntimeError::Io(_) => failed(e),
        other => CliError::Input(other.to_string()),
    })?;
    Ok((config, registry, m))
}

fn write_partition(out: &Path, m: &Materialized) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(failed)?;
    fs::write(out.join(MAPPING_FILE), m.partition.to_mapping_text()).map_err(failed)?;
    let report = m.heterogeneity().map_err(failed)?;
    fs::write(out.join(HETEROGENEITY_FILE), report.to_text()).map_err(failed)?;
    info!("mean pairwise js {:.6}", report.mean_js());
    Ok(())
}

fn cmd_run(task: &TaskArgs, out: &Path) -> Result<(), CliError> {
    let (config, registry, m) = prepare(task)?;
    write_partition(out, &m)?;
    let tracker = Arc::new(Tracker::with_file(&out.join(METRICS_FILE)).map_err(failed)?);
    let report = run_materialized(CLI_TASK_ID, &config, &registry, &m, tracker).map_err(failed)?;
    fs::write(out.join(CHECKPOINT_FILE), report.final_model.to_checkpoint_bytes()).map_err(failed)?;
    match report.final_accuracy {
        Some(a) => println!("final accuracy {a:.4}"),
        None => println!("finished without an evaluation"),
    }
    Ok(())
}

fn cmd_partition(task: &TaskArgs, out: &Path) -> Result<(), CliError> {
    let (_, _, m) = prepare(task)?;
    write_partition(out, &m)?;
    let report = m.heterogeneity().map_err(failed)?;
    println!("mean_js {:.6}", report.mean_js());
    Ok(())
}

fn cmd_report(path: &Path) -> Result<(), CliError> {
    let records = import(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut tasks: Vec<&str> = records.iter().map(|r| r.task_id.as_str()).collect();
    tasks.sort_unstable();
    tasks.dedup();
    for task in tasks {
        println!("task\t{task}");
        print!("{}", summarize_records(&records, task).to_table());
    }
    Ok(())
}

fn cmd_serve(task: &TaskArgs, out: &Path, listen: &str) -> Result<(), CliError> {
    let (config, registry, m) = prepare(task)?;
    let listener = TcpListener::bind(listen).map_err(|e| CliError::Input(format!("{listen}: {e}")))?;
    write_partition(out, &m)?;
    println!("listening on {}", listener.local_addr().map_err(failed)?);
    let tracker = Arc::new(Tracker::with_file(&out.join(METRICS_FILE)).map_err(failed)?);
    let report = serve_tcp(CLI_TASK_ID, &config, &registry, &m, listener, tracker).map_err(failed)?;
    fs::write(out.join(CHECKPOINT_FILE), report.final_model.to_checkpoint_bytes()).map_err(failed)?;
    if let Some(a) = report.final_accuracy {
        println!("final accuracy {a:.4}");
    }
    Ok(())
}

fn cmd_join(task: &TaskArgs, server: &str, client_id: usize) -> Result<(), CliError> {
    let (config, registry, m) = prepare(task)?;
    if client_id >= m.partition.clients.len() {
        return Err(CliError::Input(format!(
            "client id {client_id} out of range for {} clients",
            m.partition.clients.len()
        )));
    }
    join_tcp(CLI_TASK_ID, &config, &registry, &m, server, client_id, JOIN_PATIENCE).map_err(failed)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run { task, out } => cmd_run(task, out),
        Command::Partition { task, out } => cmd_partition(task, out),
        Command::Report { metrics } => cmd_report(metrics),
        Command::Serve { task, out, listen } => cmd_serve(task, out, listen),
        Command::Join { task, server, client_id } => cmd_join(task, server, *client_id),
    }
}

/// Parses arguments, sets up logging, and runs the command.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
