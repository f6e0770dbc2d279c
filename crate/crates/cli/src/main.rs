//! `memtestkit` command-line tool.
//!
//! Exit codes: 0 clean, 1 errors detected, 2 usage or configuration error,
//! 3 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "memtestkit", version, about = "Memory and logic soft-error testing toolkit")]
struct Cli {
    /// Seed for every random choice; fixes record timestamps to a synthetic clock.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Line-delimited configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Only print data products and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run test iterations on host memory or a simulated device.
    Test(TestArgs),
    /// Sweep a simulated device over memory clocks.
    Sweep(SweepArgs),
    /// Sample a card fleet and run a testing campaign.
    Fleet(FleetArgs),
    /// Analyze record files.
    Analyze(AnalyzeArgs),
    /// Compare G80 and GT200 memory traffic of the modulo-20 test.
    Coalesce(CoalesceArgs),
    /// Write plot-ready tables for record files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct TestArgs {
    #[arg(long)]
    region_mib: Option<u32>,
    #[arg(long)]
    lcg_period: Option<u32>,
    #[arg(long)]
    iterations: Option<u64>,
    /// `host` or `simulated`.
    #[arg(long)]
    device: Option<String>,
    /// Configuration file whose `fault_profile` section drives the simulated device.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    lanes: Option<usize>,
    #[arg(long)]
    logic_threads: Option<usize>,
    #[arg(long)]
    memory_clock: Option<u32>,
    /// Reject region and period pairings other than the deployed ones.
    #[arg(long)]
    deployed_profile: bool,
    #[arg(long)]
    card_id: Option<String>,
    /// Record file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Comma-separated clocks in MHz.
    #[arg(long, value_delimiter = ',')]
    frequencies: Option<Vec<u32>>,
    /// Iterations per clock. Defaults to 20, and 10 at 530 MHz.
    #[arg(long)]
    iterations: Option<u64>,
    /// Number of seeds averaged, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 32)]
    region_mib: u32,
    #[arg(long)]
    lcg_period: Option<u32>,
    #[arg(long)]
    logic_threads: Option<usize>,
    /// Configuration file with a `fault_profile` section. Defaults to the overdrive model.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Only `simulated` is accepted; host memory clocks cannot be set.
    #[arg(long, default_value = "simulated")]
    device: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FleetArgs {
    #[arg(long)]
    cards: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    /// `bernoulli` or `device`.
    #[arg(long)]
    mode: Option<String>,
    /// Configuration file with `fleet` and `campaign` sections.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    /// Keep complete records already in --out and append the rest.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Minimum iterations per card; repeatable.
    #[arg(long = "cutoff")]
    cutoffs: Vec<u64>,
    /// `overclock`, `daynight` or `architecture`; repeatable.
    #[arg(long = "hypothesis")]
    hypotheses: Vec<String>,
    #[arg(long)]
    mi_matrix: bool,
    #[arg(long)]
    cdf_out: Option<PathBuf>,
    #[arg(long)]
    pmf_out: Option<PathBuf>,
    #[arg(long)]
    stock_table: Option<PathBuf>,
    /// Equal-width P(fail) bins over (0, 1], besides the zero bin.
    #[arg(long, default_value_t = 1000)]
    bins: usize,
}

#[derive(Debug, Args)]
struct CoalesceArgs {
    #[arg(long, default_value_t = 65536)]
    region_words: u64,
    /// `thread-per-word`, `class-compact` or `all`.
    #[arg(long, default_value = "all")]
    mapping: String,
    /// `writes` or `writes-and-reads`.
    #[arg(long, default_value = "writes")]
    scope: String,
    /// Dump the access trace of this round as JSON lines to --trace-out.
    #[arg(long, requires = "trace_out")]
    trace_round: Option<u32>,
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long = "cutoff")]
    cutoffs: Vec<u64>,
    #[arg(long, default_value_t = 1000)]
    bins: usize,
    #[arg(long)]
    stock_table: Option<PathBuf>,
    /// Also run the standard simulated clock sweep and write sweep.csv.
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value_t = 32)]
    sweep_region_mib: u32,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "error" } else { "warn" }))
        .init();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
