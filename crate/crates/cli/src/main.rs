use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polartomo::config::PipelineConfig;
use polartomo::error::{Error, Result};
use polartomo::pipeline::{
    cmd_analyze, cmd_reconstruct, cmd_simulate, cmd_symmetrize, run_pipeline, AnalysisOutcome, ANALYSIS_DIR,
    RECONSTRUCTION_DIR,
};
use polartomo::registry::{Reconstruction, Registry};
use polartomo::selftest::run_all;

/// Polarization-state tomography from Stokes measurements.
#[derive(Parser)]
#[command(name = "polartomo", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "POLARTOMO_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set scan.seed=4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set scan.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set scan.samples=N`.
    #[arg(long)]
    samples: Option<u64>,
    /// Shorthand for `--set reconstruction.path=P`.
    #[arg(long, value_parser = ["exact", "radon"])]
    path: Option<String>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<(PipelineConfig, PathBuf)> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("scan.seed={seed}"));
        }
        if let Some(samples) = self.samples {
            overrides.push(format!("scan.samples={samples}"));
        }
        if let Some(path) = &self.path {
            overrides.push(format!("reconstruction.path={path}"));
        }
        let config = PipelineConfig::load(&self.config, &overrides)?;
        let output = self.output.clone().unwrap_or_else(|| config.output_dir());
        Ok((config, output))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a tomogram scan into `<output>/tomograms`.
    Simulate(ConfigArgs),
    /// Complete a quarter-sphere scan to the full sphere.
    Symmetrize {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Reconstruct density blocks (exact) or a volume (radon) from tomograms.
    Reconstruct {
        #[command(flatten)]
        config: ConfigArgs,
        /// Tomogram directory.
        #[arg(long, short)]
        input: PathBuf,
    },
    /// Moments, half widths, slices and sphere maps of a reconstruction.
    Analyze {
        /// `volume.bin`, `blocks.txt`, or the directory holding one.
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Simulate, symmetrize, reconstruct and analyze in one go.
    Run(ConfigArgs),
    /// Run the acceptance checks and print one pass/fail line each.
    Selftest {
        /// Comma-separated criterion numbers (default: all).
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u32>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("polartomo: cannot configure {threads} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("polartomo: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    let registry = Registry::builtin();
    match command {
        Command::Simulate(args) => {
            let (config, output) = args.load()?;
            let (dir, set) = cmd_simulate(&config, &registry, &output)?;
            println!(
                "wrote {} records over {} directions ({}) to {}",
                set.records.len(),
                set.grid.len(),
                set.grid.coverage.as_str(),
                dir.display()
            );
        }
        Command::Symmetrize { input, output } => {
            let set = cmd_symmetrize(&input, &output)?;
            println!("wrote {} records over {} directions to {}", set.records.len(), set.grid.len(), output.display());
        }
        Command::Reconstruct { config, input } => {
            let (config, output) = config.load()?;
            let outcome = cmd_reconstruct(&config, &registry, &input, &output.join(RECONSTRUCTION_DIR))?;
            print_reconstruction(&outcome.reconstruction, outcome.frobenius_error, &outcome.output_file);
        }
        Command::Analyze { input, output } => {
            let outcome = cmd_analyze(&input, &output)?;
            print_analysis(&outcome, &output);
        }
        Command::Run(args) => {
            let (config, output) = args.load()?;
            let outputs = run_pipeline(&config, &registry, &output)?;
            println!("tomograms in {}", outputs.tomograms.display());
            let r = &outputs.reconstruction;
            print_reconstruction(&r.reconstruction, r.frobenius_error, &r.output_file);
            print_analysis(&outputs.analysis, &output.join(ANALYSIS_DIR));
        }
        Command::Selftest { criteria } => {
            let results = run_all(&criteria, |r| println!("{r}"))?;
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("selftest: {} passed, {failed} failed", results.len() - failed);
            if failed > 0 {
                return Ok(ExitCode::from(Error::Diagnostic(String::new()).exit_code() as u8));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_reconstruction(reconstruction: &Reconstruction, frobenius_error: Option<f64>, file: &Path) {
    match reconstruction {
        Reconstruction::Blocks(full) => {
            let worst = full.blocks.iter().map(|b| b.hermitian_residual).fold(0.0, f64::max);
            println!(
                "reconstructed {} blocks, trace deficit {:.3e}, max hermiticity residual {worst:.3e}",
                full.blocks.len(),
                full.trace_deficit
            );
            for w in full.blocks.iter().flat_map(|b| &b.warnings) {
                println!("warning: {w}");
            }
        }
        Reconstruction::Volume(v) => println!(
            "reconstructed {:?} volume, out-of-support fraction {:.3e}",
            v.volume.dims, v.out_of_support_fraction
        ),
    }
    if let Some(err) = frobenius_error {
        println!("Frobenius error against the configured state: {err:.3e}");
    }
    println!("wrote {}", file.display());
}

fn print_analysis(outcome: &AnalysisOutcome, dir: &Path) {
    match outcome {
        AnalysisOutcome::Volume(a) => {
            let v = a.principal_variances;
            println!("principal variances {:.4} {:.4} {:.4} (deconvolved)", v[0], v[1], v[2]);
            println!("squeezing {:.2} dB, antisqueezing {:.2} dB", a.squeezing_db(), a.antisqueezing_db());
            println!("negative mass fraction {:.3e}", a.moments.negative_fraction);
        }
        AnalysisOutcome::Blocks { blocks } => println!("analyzed {blocks} blocks"),
    }
    println!("analysis in {}", dir.display());
}
