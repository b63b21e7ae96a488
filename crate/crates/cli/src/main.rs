//! `hoe`: drives a preference-steerable policy mixture run step by step.
//!
//! Every subcommand reads the same TOML config (or the built-in defaults),
//! works inside one run directory, and is deterministic given the seed.
//! Errors print a single machine-readable JSON line to stderr and exit
//! nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hoe_core::persist::RunConfig;
use hoe_core::pipeline;

#[derive(Parser)]
#[command(name = "hoe", version, about = "Preference-steerable policy mixtures")]
struct Cli {
    /// Run configuration TOML. Omitted fields take defaults; omitting the
    /// flag runs the canonical two-objective setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory holding all checkpoints and reports.
    #[arg(long, short, global = true, default_value = "run")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one dense policy per objective from a shared random base.
    ///
    /// Each single must reach 95% of the closed-form best linear return for
    /// its objective, or the step fails without writing anything.
    TrainSingles,

    /// Compress each single's weight delta into a calibrated low-rank expert.
    Extract,

    /// Build merged experts for the planned interior preferences.
    Merge,

    /// Train router experts over the frozen expert registry.
    TrainRouters,

    /// Assemble base, experts, and routers into one serving checkpoint.
    Assemble,

    /// Sweep the preference grid and write sweep.csv (plus sweep.svg for
    /// two objectives).
    Sweep {
        /// Methods to sweep, comma separated: hoe, rs_soup, mod_fuse,
        /// morlhf. Defaults to the config's eval.methods.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },

    /// Rebuild the comparison table and report.json from sweep.csv.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainSingles => "train-singles",
            Command::Extract => "extract",
            Command::Merge => "merge",
            Command::TrainRouters => "train-routers",
            Command::Assemble => "assemble",
            Command::Sweep { .. } => "sweep",
            Command::Report => "report",
        }
    }
}

fn load_config(cli: &Cli) -> hoe_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default().normalized()?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> hoe_core::Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::TrainSingles => pipeline::cmd_train_singles(&cfg, out)?,
        Command::Extract => pipeline::cmd_extract(&cfg, out)?,
        Command::Merge => pipeline::cmd_merge(&cfg, out)?,
        Command::TrainRouters => pipeline::cmd_train_routers(&cfg, out)?,
        Command::Assemble => pipeline::cmd_assemble(&cfg, out)?,
        Command::Sweep { methods } => {
            let methods = if methods.is_empty() { &cfg.eval.methods } else { methods };
            pipeline::cmd_sweep(&cfg, out, methods)?;
        }
        Command::Report => {
            print!("{}", pipeline::cmd_report(&cfg, out)?);
            return Ok(());
        }
    }
    println!("{} done, artifacts in {}", cli.command.name(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line =
                serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
