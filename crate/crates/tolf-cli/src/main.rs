//! `tolf`: train, sweep, export densities, and self-check from JSON
//! configs. Exit codes: 0 success, 2 config error, 3 divergence,
//! 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tolf_cli::{
    cmd_density_export, cmd_run, cmd_selftest, cmd_sweep, load_config, resolve_out_root,
    CliError, DensityExportSpec, SweepAxis,
};

#[derive(Parser)]
#[command(name = "tolf", version, about = "Noise-robust tiny-object localization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON). The default resolves to a bundled
    /// starter config when no such file exists.
    #[arg(long, default_value = "quickstart.json")]
    config: PathBuf,
    /// Overrides the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; defaults to config out_dir, then $TOLF_OUT_DIR, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment and write its run directory.
    Run(RunArgs),
    /// Run one config axis against a list of values and seeds.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Axis: noise_scale, lambda, loss, or coupling_layers.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Max concurrent cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Export a 1D log-density slice and samples from a flow checkpoint.
    DensityExport {
        /// Flow checkpoint JSON written by `run`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Coordinate name (dx, dy, dw, dh) or index.
        #[arg(long, default_value = "dx")]
        coordinate: String,
        #[arg(long, default_value_t = -4.0)]
        lo: f64,
        #[arg(long, default_value_t = 4.0)]
        hi: f64,
        #[arg(long, default_value_t = 801)]
        points: usize,
        /// Number of flow samples to export alongside the slice.
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for slice.csv and samples.csv.
        #[arg(long, default_value = "density-export")]
        out: PathBuf,
    },
    /// Run the built-in invariant suite and report each check.
    Selftest,
}

fn run_command(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let mut cfg = load_config(&args.config)?;
            if let Some(seed) = args.seed {
                cfg.train.seed = seed;
            }
            let out_root = resolve_out_root(args.out.clone(), &cfg);
            let result = cmd_run(&cfg, &out_root, args.force)?;
            println!("run: {}", result.dir.display());
            println!("loc_ap: {:.6}", result.record.loc_ap);
            println!("acc@0.50: {:.6}", result.record.accuracy["0.50"]);
            println!("clamped_targets: {}", result.clamped_targets);
            Ok(())
        }
        Command::Sweep {
            run,
            axis,
            values,
            seeds,
            jobs,
        } => {
            let mut cfg = load_config(&run.config)?;
            if let Some(seed) = run.seed {
                cfg.train.seed = seed;
            }
            let axis: SweepAxis = axis.parse()?;
            let out_root = resolve_out_root(run.out.clone(), &cfg);
            let outcome = cmd_sweep(&cfg, axis, &values, &seeds, &out_root, jobs, run.force)?;
            println!("sweep: {}", outcome.dir.display());
            println!("cells: {} ok, {} failed", outcome.ok, outcome.failed);
            print!("{}", outcome.table_csv);
            Ok(())
        }
        Command::DensityExport {
            checkpoint,
            coordinate,
            lo,
            hi,
            points,
            samples,
            seed,
            out,
        } => {
            let spec = DensityExportSpec {
                coordinate,
                lo,
                hi,
                points,
                samples,
                seed,
            };
            let (slice, sample_file) = cmd_density_export(&checkpoint, &spec, &out)?;
            println!("slice: {}", slice.display());
            println!("samples: {}", sample_file.display());
            Ok(())
        }
        Command::Selftest => {
            let report = cmd_selftest();
            for (name, ok) in &report.checks {
                println!("{}: {}", name, if *ok { "ok" } else { "FAILED" });
            }
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Failure {
                    detail: "selftest failed".to_string(),
                })
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
