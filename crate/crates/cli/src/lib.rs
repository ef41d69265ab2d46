//! Batch front end: `rvm <command> --config run.toml`.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{CmdError, Context};
use crate::config::{ModeName, RunConfig};
use crate::manifest::{now, Outputs, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "rvm", version, about = "Random vortex particle engine")]
pub struct Cli {
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to `output.dir` or `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `solver.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Also write radial profiles for plotting.
    #[arg(long, global = true)]
    pub emit_plot_data: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    MeanField,
    Empirical,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the structure constants.
    Constants,
    /// Solve for the drift by Picard iteration.
    SolveDrift {
        #[arg(long)]
        allow_beyond_tk: bool,
    },
    /// Run the particle system and recover vorticity and velocity.
    Simulate {
        /// Drift file from `solve-drift` (mean-field mode).
        #[arg(long)]
        drift: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Audit the density and integral bounds.
    VerifyBounds,
    /// Compare recovered fields with the Lamb–Oseen vortex.
    Compare {
        #[arg(long)]
        vorticity: PathBuf,
        #[arg(long)]
        velocity: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Constants => "constants",
            Command::SolveDrift { .. } => "solve-drift",
            Command::Simulate { .. } => "simulate",
            Command::VerifyBounds => "verify-bounds",
            Command::Compare { .. } => "compare",
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let started = now();
    let Some(path) = cli.config.clone() else {
        eprintln!("error: --config is required");
        return 2;
    };
    let cfg = match RunConfig::load(&path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let seed = cli.seed.unwrap_or(cfg.solver.seed);
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(cfg.output.dir.clone().unwrap_or_else(|| "out".into())));
    let mut out = match Outputs::new(dir) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: cannot create output directory: {e}");
            return 1;
        }
    };
    let config_hash = cfg.hash();
    let ctx = Context { cfg, seed, emit_plot_data: cli.emit_plot_data };
    let result = match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
        Ok(pool) => pool.install(|| dispatch(&cli.command, &ctx, &mut out)),
        Err(e) => Err(CmdError::Io(std::io::Error::other(e))),
    };
    let (status, code) = match &result {
        Ok(()) => ("ok".to_string(), 0),
        Err(e) => {
            eprintln!("error: {e}");
            (format!("error: {e}"), e.exit_code())
        }
    };
    let files = match out.entries() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: cannot checksum outputs: {e}");
            return 1;
        }
    };
    let manifest = RunManifest {
        kind: "run_manifest",
        command: cli.command.name().into(),
        status,
        exit_code: code,
        config_hash,
        code_version: env!("CARGO_PKG_VERSION"),
        seed,
        threads,
        started,
        finished: now(),
        files,
    };
    if let Err(e) = manifest.write(&out.dir) {
        eprintln!("error: cannot write manifest: {e}");
        return 1;
    }
    code
}

fn dispatch(cmd: &Command, ctx: &Context, out: &mut Outputs) -> Result<(), CmdError> {
    match cmd {
        Command::Constants => commands::constants(ctx, out),
        Command::SolveDrift { allow_beyond_tk } => commands::solve_drift(ctx, out, *allow_beyond_tk),
        Command::Simulate { drift, mode } => {
            let mode = mode.map(|m| match m {
                ModeArg::MeanField => ModeName::MeanField,
                ModeArg::Empirical => ModeName::Empirical,
            });
            commands::simulate(ctx, out, drift.as_deref(), mode)
        }
        Command::VerifyBounds => commands::verify_bounds(ctx, out),
        Command::Compare { vorticity, velocity } => commands::compare(ctx, out, vorticity, velocity),
    }
}
