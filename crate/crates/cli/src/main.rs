//! `coeflow` command-line frontend.
//!
//! Exit codes: 0 on success, 2 for invalid input, 3 when a model or mapping
//! does not fit the target.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "coeflow",
    version,
    about = "Dataflow fusion, performance and CoE serving models"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Built-in platform name or path to a platform TOML file.
    #[arg(long, global = true, default_value = "sn40l_node")]
    pub platform: String,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory for CSV and JSON outputs.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Concurrent independent simulations in sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Unfused,
    Maximal,
    Hinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrchestrationArg {
    So,
    Ho,
    Both,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    /// Operator graph JSON.
    #[arg(long)]
    pub graph: PathBuf,
    /// Hinted-fusion boundary tensors; defaults to the graph file's hints.
    #[arg(long, value_delimiter = ',')]
    pub hints: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-kernel and aggregate operational intensity for a partition.
    Analyze {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, value_enum, default_value = "unfused")]
        partition: PolicyArg,
    },
    /// Plan fused kernels and write the plan as JSON.
    Fuse {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
    },
    /// Place and route every kernel of a fusion plan.
    Pnr {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
    },
    /// Fused vs unfused and software vs hardware orchestrated run time.
    Estimate {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Orchestration used for the fused-vs-unfused comparison.
        #[arg(long, value_enum, default_value = "both")]
        orchestration: OrchestrationArg,
        /// Account for link congestion of a seeded placement.
        #[arg(long)]
        placed: bool,
    },
    /// Static HBM plan for the tensors crossing kernel boundaries.
    Memplan {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// HBM bytes available; defaults to one socket's HBM.
        #[arg(long)]
        hbm_bytes: Option<u64>,
        /// DDR bytes available for spills; defaults to one socket's DDR.
        #[arg(long)]
        ddr_bytes: Option<u64>,
    },
    /// Serve a request trace over a Composition of Experts.
    Serve {
        /// Line-delimited JSON requests; a uniform trace is drawn when absent.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// CoE configuration JSON; defaults to 150 7B experts.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Routing policy JSON for requests carrying a tag.
        #[arg(long)]
        routing: Option<PathBuf>,
        /// Override the expert count.
        #[arg(long)]
        experts: Option<usize>,
        /// Length of the drawn uniform trace.
        #[arg(long, default_value_t = 800)]
        requests: usize,
    },
    /// Machines needed to hold each expert count.
    Footprint {
        /// Expert counts, e.g. `50,150,850` or `1-150`.
        #[arg(long, value_delimiter = ',', default_value = "50,150,850")]
        counts: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "sn40l_node,dgx_a100,dgx_h100")]
        platforms: Vec<String>,
        #[arg(long, default_value_t = 14_000_000_000)]
        expert_bytes: u64,
    },
    /// Footprint and steady-state batch latency over expert counts.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1-150")]
        counts: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "sn40l_node,dgx_a100,dgx_h100")]
        platforms: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        warmup_batches: usize,
        #[arg(long, default_value_t = 200)]
        batches: usize,
        /// Drop the host-memory tier from GPU platforms.
        #[arg(long)]
        no_host_tier: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !parts.last().is_some_and(|prev| prev.ends_with(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ")
}

/// 3 for infeasible models or mappings, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<coeflow::Error>() {
        Some(coeflow::Error::Infeasible(_)) => 3,
        _ => 2,
    }
}
