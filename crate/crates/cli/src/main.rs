//! `embinv`: build datasets, train inverters, invert embeddings, evaluate,
//! and sweep the noise defense. Exit codes: 0 success, 2 configuration
//! error, 1 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use embinv::models::ModelRole;

use config::{set, AnalysisKind, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "embinv", version, about = "Reconstruct text from embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory (overrides `dataset.dir`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Worker threads for per-example parallelism.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args, Debug, Clone)]
struct SearchFlags {
    /// Correction rounds.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Withhold the hypothesis embedding from the corrector.
    #[arg(long)]
    no_feedback: bool,
    /// `base`, `random`, or `fixed:<text>`.
    #[arg(long)]
    init: Option<String>,
    /// Evaluate at most this many examples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest a corpus, embed it, and write a dataset directory.
    BuildDataset {
        #[command(flatten)]
        common: Common,
        /// Corpus JSONL (overrides `dataset.corpus`).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train the base inverter or the corrector.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_role)]
        role: Option<ModelRole>,
        /// Total optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Invert the selected examples and write traces and a report.
    Invert {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        search: SearchFlags,
    },
    /// Like `invert`, plus plots and name recovery.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        search: SearchFlags,
    },
    /// Sweep noise levels and record the retrieval/reconstruction trade-off.
    Defend {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        search: SearchFlags,
        /// Comma-separated noise levels.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Hypothesis closeness, frequency buckets, or cosine-vs-BLEU scatter.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<AnalysisKind>,
        /// Report JSON to analyze.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_role(s: &str) -> Result<ModelRole, String> {
    match s {
        "base" => Ok(ModelRole::Base),
        "corrector" => Ok(ModelRole::Corrector),
        _ => Err(format!("unknown role {s:?} (base|corrector)")),
    }
}

fn parse_kind(s: &str) -> Result<AnalysisKind, String> {
    match s {
        "hypothesis-closeness" => Ok(AnalysisKind::HypothesisCloseness),
        "frequency" => Ok(AnalysisKind::Frequency),
        "scatter" => Ok(AnalysisKind::Scatter),
        _ => Err(format!("unknown analysis {s:?} (hypothesis-closeness|frequency|scatter)")),
    }
}

fn apply_common(cfg: &mut RunConfig, c: &Common) {
    set(&mut cfg.out, c.out.clone().map(Some));
    set(&mut cfg.dataset.dir, c.dataset.clone().map(Some));
    set(&mut cfg.workers, c.workers);
}

fn apply_search(cfg: &mut RunConfig, s: &SearchFlags, rounds_are_defense: bool) {
    if rounds_are_defense {
        set(&mut cfg.defense.rounds, s.steps);
    } else {
        set(&mut cfg.search.rounds, s.steps);
    }
    set(&mut cfg.search.beam_width, s.beam_width);
    if s.no_feedback {
        cfg.search.feedback = false;
    }
    set(&mut cfg.search.init, s.init.clone());
    if s.init.is_some() {
        cfg.search.inits.clear();
    }
    set(&mut cfg.eval.limit, s.limit.map(Some));
}

fn run(cli: Cli) -> embinv::Result<()> {
    let (common, name) = match &cli.command {
        Command::BuildDataset { common, .. } => (common, "build-dataset"),
        Command::Train { common, .. } => (common, "train"),
        Command::Invert { common, .. } => (common, "invert"),
        Command::Evaluate { common, .. } => (common, "evaluate"),
        Command::Defend { common, .. } => (common, "defend"),
        Command::Analyze { common, .. } => (common, "analyze"),
    };
    init_logging(common.verbose);
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    apply_common(&mut cfg, common);
    match &cli.command {
        Command::BuildDataset { corpus, .. } => set(&mut cfg.dataset.corpus, corpus.clone().map(Some)),
        Command::Train {
            role, steps, resume, ..
        } => {
            set(&mut cfg.train.role, role.map(Some));
            set(&mut cfg.train.max_steps, steps.map(Some));
            cfg.train.resume |= *resume;
        }
        Command::Invert { search, .. } | Command::Evaluate { search, .. } => apply_search(&mut cfg, search, false),
        Command::Defend { search, lambdas, .. } => {
            apply_search(&mut cfg, search, true);
            set(&mut cfg.defense.lambdas, lambdas.clone());
        }
        Command::Analyze { kind, report, .. } => {
            set(&mut cfg.analyze.kind, kind.map(Some));
            set(&mut cfg.analyze.report, report.clone().map(Some));
        }
    }
    commands::write_manifest(&cfg, name)?;
    match cli.command {
        Command::BuildDataset { .. } => commands::build_dataset(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Invert { .. } => commands::invert(&cfg, false),
        Command::Evaluate { .. } => commands::invert(&cfg, true),
        Command::Defend { .. } => commands::defend(&cfg),
        Command::Analyze { .. } => commands::analyze(&cfg),
    }
}

fn init_logging(verbose: bool) {
    let level = if verbose {
        tracing::Level::DEBUG
    } else {
        tracing::Level::INFO
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
