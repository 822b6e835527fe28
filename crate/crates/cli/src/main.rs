use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use csr_cli::report::{self, TheoremOptions};
use csr_cli::run::{export_world, run, run_stats};
use csr_cli::{exit, CliError, RunConfig};
use csr_core::theory::{Convention, Regime};

#[derive(Parser)]
#[command(name = "csr", version, about = "Calibrated self-rewarding preference lab")]
struct Cli {
    /// Worker threads for generation and training (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate preferences and train for T iterations, writing an artifact tree.
    Run(RunArgs),
    /// Monte-Carlo check that a calibrated response beats the uncalibrated one.
    Theorem1(TheoremArgs),
    /// Greedy-caption CHAIR of the seed policy or a checkpoint.
    Chair(ChairArgs),
    /// Re-score a finished run from its files and summarize it.
    Stats {
        /// Output directory of a previous `run`.
        dir: PathBuf,
    },
    /// Write the config's prompts as an ingestible dataset.
    ExportWorld(ExportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    num_beams: Option<usize>,
    #[arg(long)]
    diversity_penalty: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    bottom_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Theorem,
    Control,
    Generic,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    TextWeighted,
    ImageWeighted,
    Both,
}

#[derive(Args)]
struct TheoremArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "theorem")]
    regime: RegimeArg,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    /// Comma-separated λ values; must include 1.0.
    #[arg(long, default_value = "0.5,0.7,0.9,1.0")]
    grid: String,
    #[arg(long, default_value_t = 50_000)]
    samples: usize,
    #[arg(long, value_enum, default_value = "both")]
    convention: ConventionArg,
    /// CSV destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ChairArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Policy checkpoint to caption with (default: the seed policy).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Prompt dataset destination.
    #[arg(long)]
    out: PathBuf,
    /// Also write the world's image records here.
    #[arg(long)]
    images: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_run(a: RunArgs) -> Result<u8, CliError> {
    let mut c = load_config(a.config.as_deref())?;
    if let Some(v) = a.lambda {
        c.lambda = v;
    }
    if let Some(v) = a.iterations {
        c.iterations = v;
    }
    if let Some(v) = a.num_beams {
        c.num_beams = v;
    }
    if let Some(v) = a.diversity_penalty {
        c.diversity_penalty = v;
    }
    if let Some(v) = a.top_k {
        c.top_k = v;
    }
    if let Some(v) = a.bottom_k {
        c.bottom_k = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.out {
        c.out = v;
    }
    let outcome = run(&c, a.force)?;
    for (a, r) in outcome.artifacts.iter().zip(&outcome.rewards) {
        println!(
            "iteration {}: {} pairs ({} ties, {} skipped), mean chosen {:.4}, mean rejected {:.4}, loss {:.4} -> {:.4}",
            a.iteration,
            r.pairs,
            r.ties,
            a.skipped_prompts.len(),
            r.mean_chosen_reward,
            r.mean_rejected_reward,
            a.metrics.initial_loss,
            a.metrics.final_loss
        );
        if r.tie_warning {
            eprintln!("warning: every pair in iteration {} is a tie", a.iteration);
        }
    }
    for (t, ch) in outcome.chair.iter().enumerate() {
        println!("chair after iteration {t}: CHAIR_I {:.4}, CHAIR_S {:.4}", ch.chair_i, ch.chair_s);
    }
    println!("wrote {} files to {}", outcome.files.len(), c.out.display());
    Ok(exit::SUCCESS)
}

fn cmd_theorem1(a: TheoremArgs) -> Result<u8, CliError> {
    let opts = TheoremOptions {
        seed: a.seed,
        regime: match a.regime {
            RegimeArg::Theorem => Regime::Theorem,
            RegimeArg::Control => Regime::Control,
            RegimeArg::Generic => Regime::Generic,
        },
        dim: a.dim,
        rank: a.rank,
        grid: report::parse_grid(&a.grid)?,
        num_samples: a.samples,
        conventions: match a.convention {
            ConventionArg::TextWeighted => vec![Convention::TextWeighted],
            ConventionArg::ImageWeighted => vec![Convention::ImageWeighted],
            ConventionArg::Both => vec![Convention::TextWeighted, Convention::ImageWeighted],
        },
    };
    let reports = report::theorem1(&opts)?;
    match &a.out {
        Some(path) => report::write_theorem_csv(std::fs::File::create(path)?, &reports)?,
        None => report::write_theorem_csv(std::io::stdout().lock(), &reports)?,
    }
    println!("{}", report::verdict_line(&reports));
    Ok(if report::verdict(&reports) {
        exit::SUCCESS
    } else {
        exit::VERDICT_FALSE
    })
}

fn cmd_chair(a: ChairArgs) -> Result<u8, CliError> {
    let mut c = load_config(a.config.as_deref())?;
    if let Some(v) = a.seed {
        c.seed = v;
    }
    let r = report::chair(&c, a.checkpoint.as_deref())?;
    println!(
        "CHAIR_I {:.6} ({}/{} mentions), CHAIR_S {:.6} ({}/{} captions)",
        r.chair_i, r.hallucinated, r.mentioned, r.chair_s, r.captions_with_hallucination, r.total_captions
    );
    Ok(exit::SUCCESS)
}

fn cmd_stats(dir: &Path) -> Result<u8, CliError> {
    let s = run_stats(dir)?;
    println!("iteration,mean_chosen_reward,mean_rejected_reward,pairs,ties,chosen_relevance,rejected_relevance,relevance_gap");
    for (r, rel) in s.rewards.iter().zip(&s.relevance) {
        println!(
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            r.mean_chosen_reward,
            r.mean_rejected_reward,
            r.pairs,
            r.ties,
            rel.chosen.mean,
            rel.rejected.mean,
            rel.gap
        );
    }
    println!("re-scored {} records, max deviation {:e}", s.records, s.max_rescore_error);
    Ok(exit::SUCCESS)
}

fn cmd_export(a: ExportArgs) -> Result<u8, CliError> {
    let mut c = load_config(a.config.as_deref())?;
    if let Some(v) = a.seed {
        c.seed = v;
    }
    let n = export_world(&c, &a.out, a.images.as_deref())?;
    println!("wrote {n} prompts to {}", a.out.display());
    Ok(exit::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(exit::USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(exit::RUNTIME);
        }
    }
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Theorem1(a) => cmd_theorem1(a),
        Command::Chair(a) => cmd_chair(a),
        Command::Stats { dir } => cmd_stats(&dir),
        Command::ExportWorld(a) => cmd_export(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
