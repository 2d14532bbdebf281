//! `qsync`: simulate, correlate and solve photon-pair clock synchronization runs.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qsync_core::SwapState;

#[derive(Parser, Debug)]
#[command(name = "qsync", version, about = "Clock synchronization and fiber ranging with entangled photon pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one swap state of a scenario and write d1.bptt, d2.bptt and manifest.toml.
    Simulate(SimulateArgs),
    /// Histogram t1 - t2 for two record files and report the peaks.
    Correlate(CorrelateArgs),
    /// Solve D or r1, and t0, from 0° and 45° measurements.
    Solve(SolveArgs),
    /// Central-peak offset in sliding windows, as CSV.
    Track(TrackArgs),
    /// Vary one config key, simulate both swap states per value and tabulate solutions.
    Sweep(SweepArgs),
    /// Print the reference scenario as a config file.
    Config,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Plate {
    Plate0,
    Plate45,
}

impl From<Plate> for SwapState {
    fn from(p: Plate) -> Self {
        match p {
            Plate::Plate0 => SwapState::Plate0,
            Plate::Plate45 => SwapState::Plate45,
        }
    }
}

/// Histogram settings shared by the analysis commands.
#[derive(Args, Debug, Clone)]
struct HistogramArgs {
    /// Bin width (ps).
    #[arg(long, default_value_t = 3.0)]
    bin_ps: f64,
    /// Half width of the histogram window around the located peak (ns).
    #[arg(long, default_value_t = 100.0)]
    window_ns: f64,
    /// Window center (ns). Located with a coarse search when omitted.
    #[arg(long)]
    center_ns: Option<f64>,
    /// Half width of the coarse search (us).
    #[arg(long, default_value_t = 1000.0)]
    search_us: f64,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the config's swap state.
    #[arg(long, value_enum)]
    swap: Option<Plate>,
    /// Override the config's rng seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker slabs; output does not depend on this.
    #[arg(long, default_value_t = 0)]
    slabs: usize,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    file1: PathBuf,
    file2: PathBuf,
    #[command(flatten)]
    hist: HistogramArgs,
    /// Write the histogram here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Fit the central peak with the far-field model of `--config`.
    #[arg(long, requires = "config")]
    fit: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// D1 and D2 record files of a 0° run. Repeat with --multi.
    #[arg(long, num_args = 2, value_names = ["D1", "D2"], required = true)]
    m0: Vec<PathBuf>,
    /// D1 and D2 record files of a 45° run. Repeat with --multi.
    #[arg(long, num_args = 2, value_names = ["D1", "D2"], required = true)]
    m45: Vec<PathBuf>,
    /// Lab-side fiber length (km); one per measurement pair with --multi.
    #[arg(long, required = true)]
    r2_km: Vec<f64>,
    /// Known remote fiber length (km); D is solved.
    #[arg(long, conflicts_with_all = ["d_ps_per_km", "multi"])]
    r1_km: Option<f64>,
    /// Known fiber dispersion (ps/km); r1 is solved.
    #[arg(long = "d-ps-per-km", conflicts_with = "multi")]
    d_ps_per_km: Option<f64>,
    /// Joint (D, r1) solve over several r2 values.
    #[arg(long)]
    multi: bool,
    /// Signal inverse group velocity (ps/km), for t0.
    #[arg(long, requires = "inv_u_i")]
    inv_u_s: Option<f64>,
    /// Idler inverse group velocity (ps/km), for t0.
    #[arg(long, requires = "inv_u_s")]
    inv_u_i: Option<f64>,
    #[command(flatten)]
    hist: HistogramArgs,
    /// Append the solution row to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "solve")]
    label: String,
}

#[derive(Args, Debug)]
struct TrackArgs {
    file1: PathBuf,
    file2: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    window_s: f64,
    #[arg(long, default_value_t = 1.0)]
    stride_s: f64,
    #[command(flatten)]
    hist: HistogramArgs,
    /// Write the series here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dotted config key, e.g. fiber2.length_km.
    #[arg(long)]
    key: String,
    /// Values for the key (TOML literals).
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    slabs: usize,
    #[command(flatten)]
    hist: HistogramArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Correlate(a) => commands::correlate(&a),
        Command::Solve(a) => commands::solve(&a),
        Command::Track(a) => commands::track(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Config => commands::print_config(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
