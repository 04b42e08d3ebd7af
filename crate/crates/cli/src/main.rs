use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdglab_core::experiment::{
    cmd_compare_guidance, cmd_diagnose_lag, cmd_par_generate, cmd_sample, cmd_schedule_dump,
    Experiment, ExperimentConfig, Overrides,
};

/// Guided diffusion sampling experiments on Gaussian-mixture worlds.
#[derive(Debug, Parser)]
#[command(name = "sdglab", version)]
struct Cli {
    /// Experiment config (JSON). Without it the bundled two-well config is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for seed sweeps and prompt batches.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// First seed when the config gives `seed_count`.
    #[arg(long, global = true)]
    seed_base: Option<u64>,

    /// Treat rejected LLM replies as failures.
    #[arg(long, global = true)]
    strict: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample with the configured strategy.
    Sample,
    /// Counterfactual-mode mass for every guidance strategy.
    CompareGuidance,
    /// Discrepancy, spectral and trajectory-bias curves.
    DiagnoseLag,
    /// Generate counterfactual prompts with the LLM pipeline.
    ParGenerate {
        /// One prompt per line.
        #[arg(long)]
        prompts: PathBuf,
        /// Answer from fixture files in this directory instead of the endpoint.
        #[arg(long)]
        mock: Option<PathBuf>,
    },
    /// Per-step beta and alpha-bar of the configured schedule.
    ScheduleDump,
}

fn run(cli: Cli) -> Result<bool, sdglab_core::Error> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default_two_well(),
    };
    let overrides = Overrides {
        out: cli.out,
        jobs: cli.jobs,
        seed_base: cli.seed_base,
    };
    let exp = Experiment::prepare(config, &overrides)?;
    match cli.command {
        Command::Sample => {
            let r = cmd_sample(&exp)?;
            println!("{} samples -> {}", r.rows, r.dir.display());
            for (label, mass) in &r.mode_masses {
                println!("  {label}: {mass}");
            }
        }
        Command::CompareGuidance => {
            let r = cmd_compare_guidance(&exp)?;
            println!(
                "{:<9} {:>10} {:>10} {:>6}",
                "strategy", "mass", "stderr", "seeds"
            );
            for row in &r.rows {
                println!(
                    "{:<9} {:>10.4} {:>10.4} {:>6}",
                    row.strategy.as_str(),
                    row.counterfactual_mass_mean,
                    row.counterfactual_mass_stderr,
                    row.seeds
                );
            }
            println!("-> {}", r.dir.display());
        }
        Command::DiagnoseLag => {
            let r = cmd_diagnose_lag(&exp)?;
            let s = &r.summary;
            if s.diagnosed_strategy != s.strategy {
                eprintln!(
                    "note: {} is diagnosed through its shared-latent counterpart {}",
                    s.strategy, s.diagnosed_strategy
                );
            }
            let ratio = s.ratio.map_or("undefined".to_string(), |r| r.to_string());
            println!(
                "delta norm early {} late {} ratio {ratio}",
                s.delta_norm.early, s.delta_norm.late
            );
            println!(
                "bias gap early {} late {}",
                s.bias_gap.early, s.bias_gap.late
            );
            println!("-> {}", r.dir.display());
        }
        Command::ParGenerate { prompts, mock } => {
            let r = cmd_par_generate(&exp, &prompts, mock.as_deref())?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            if !r.statuses.is_empty() {
                print!("{}", r.table());
                println!(
                    "{} of {} accepted -> {}",
                    r.accepted(),
                    r.statuses.len(),
                    r.corpus.display()
                );
            }
            return Ok(r.succeeded(cli.strict));
        }
        Command::ScheduleDump => {
            let r = cmd_schedule_dump(&exp)?;
            println!("-> {}", r.dir.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
