//! Command-line front end for the caption-training laboratory. Each
//! subcommand drives one pipeline stage against a run directory under
//! the output root.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for missing
//! or inconsistent data, 1 for anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use caplab::config::RunConfig;
use caplab::pipeline::{self, RunDirectory};
use caplab::{Error, Result};

#[derive(Parser)]
#[command(name = "caplab", version, about = "Caption training from prediction-model feedback on a synthetic grid world")]
struct Cli {
    /// Root directory holding run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create the run directory and generate its dataset.
    GenData {
        /// Run configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Replace an existing run directory of the same name.
        #[arg(long)]
        force: bool,
    },
    /// Select and fine-tune on top-graded captions, then reinforce.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score the best checkpoint on the labeled split.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Grade-quality curve and confidence-correlation diagnostics.
    Analyze {
        #[arg(long)]
        config: PathBuf,
    },
    /// Objective grid, grading-scheme and caption-count sweeps.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                Error::Data(_) | Error::Domain(_) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::config(format!("cannot size the worker pool: {e}")))?;
    }
    match cli.command {
        Command::GenData { config, seed, force } => {
            let mut config = load_config(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let summary = pipeline::gen_data(&cli.out, &config, force)?;
            println!(
                "generated {} train and {} eval pairs for run '{}' (fingerprint {})",
                summary.n_train_pairs, summary.n_eval_pairs, config.run_name, summary.fingerprint
            );
        }
        Command::Train { config } => {
            let dir = open_run(&cli.out, &config)?;
            let summary = pipeline::train(&dir)?;
            println!(
                "retained {} captions, fine-tuned {} epochs, trained {} epochs; best epoch {} at mean reward {:.4}",
                summary.n_retained,
                summary.fine_tune_epochs,
                summary.train_epochs,
                summary.best_epoch,
                summary.best_mean_reward
            );
        }
        Command::Eval { config } => {
            let dir = open_run(&cli.out, &config)?;
            let report = pipeline::evaluate(&dir)?;
            println!(
                "mean consensus score {:.4} over {} questions (majority {:.4}, marginal {:.4})",
                report.mean_vqa, report.n_questions, report.mean_vqa_majority, report.mean_vqa_marginal
            );
            for (template, stat) in &report.per_template {
                println!("  {template}: {:.4} over {}", stat.mean_vqa, stat.n);
            }
        }
        Command::Analyze { config } => {
            let dir = open_run(&cli.out, &config)?;
            let report = pipeline::analyze(&dir)?;
            println!(
                "confidence correlation rho {:.4} over {} questions{}",
                report.nll.spearman_rho,
                report.nll.n,
                if report.nll.degenerate { " (degenerate)" } else { "" }
            );
            for bucket in &report.grade_curve {
                match bucket.mean_vqa {
                    Some(mean) => println!(
                        "  grade {}: {} captions, mean score {mean:.4}",
                        bucket.letter, bucket.count
                    ),
                    None => println!("  grade {}: empty", bucket.letter),
                }
            }
        }
        Command::Ablate { config } => {
            let dir = open_run(&cli.out, &config)?;
            let report = pipeline::ablate(&dir)?;
            println!(
                "wrote {} objective cells, {} grading schemes, {} caption counts under {}",
                report.objectives.len(),
                report.level_schemes.len(),
                report.caption_counts.len(),
                dir.path("curves").display()
            );
        }
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config file {}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("cannot parse config file {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Later stages locate the run by the name in the given config file; the
/// resolved config stored in the run directory stays authoritative.
fn open_run(out: &Path, config_path: &Path) -> Result<RunDirectory> {
    let config = load_config(config_path)?;
    RunDirectory::open(out, &config.run_name)
}
