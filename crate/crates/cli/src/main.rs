//! Command-line driver for the retrieval augmentation pipeline.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use attnaug::pipeline::{self, EvalTarget, ModelKind, Pipeline, PipelineError, Stage, StageLock};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "attnaug", version, about = "Attention-guided synthetic data for dense retrieval")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the worker thread count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the stage directory.
    #[arg(long, global = true)]
    stage_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print a config file with every default.
    Init {
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Check the config and report every violation.
    Validate,
    /// Read or generate passages and gold questions.
    Ingest,
    /// Build the BM25 index.
    Index,
    /// Train the subword vocabulary.
    TrainVocab,
    /// Recognize entities in every passage.
    Ner,
    /// Train one retriever.
    Train {
        /// baseline, unconditioned or mixed.
        model: ModelKind,
    },
    /// Score entity attention under the baseline and pick generation targets.
    ProbeAttention,
    /// Generate conditioned and unconditioned questions.
    Generate,
    /// Apply the answerability and hardness filters.
    Filter,
    /// Mix the filtered pools.
    Mix,
    /// Attach BM25 hard negatives to the mixed sets.
    MineNegatives,
    /// Top-k accuracy of one retriever.
    Eval {
        /// baseline, unconditioned or mixed.
        #[arg(conflicts_with_all = ["bm25", "run"], required_unless_present_any = ["bm25", "run"])]
        model: Option<ModelKind>,
        /// Evaluate BM25 over the index.
        #[arg(long)]
        bm25: bool,
        /// Evaluate a TREC run file.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Evaluate all three retrievers and their pairwise deltas.
    Compare,
    /// Write plot data as CSV.
    EmitPlots,
    /// Chained stages.
    Pipeline {
        #[command(subcommand)]
        action: PipelineAction,
    },
}

#[derive(Subcommand, Debug)]
enum PipelineAction {
    /// Run every stage, skipping those already up to date.
    Run,
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_STAGE: u8 = 2;

/// An error together with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self {
            code: if e.is_validation() { EXIT_VALIDATION } else { EXIT_STAGE },
            error: e.into(),
        }
    }
}

fn validation(error: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_VALIDATION,
        error,
    }
}

fn stage_for(command: &Command) -> Option<Stage> {
    Some(match command {
        Command::Ingest => Stage::Ingest,
        Command::Index => Stage::Index,
        Command::TrainVocab => Stage::TrainVocab,
        Command::Ner => Stage::Ner,
        Command::Train { model } => Stage::Train(*model),
        Command::ProbeAttention => Stage::ProbeAttention,
        Command::Generate => Stage::Generate,
        Command::Filter => Stage::Filter,
        Command::Mix => Stage::Mix,
        Command::MineNegatives => Stage::MineNegatives,
        Command::Eval { model, bm25, run } => Stage::Eval(match (model, bm25, run) {
            (Some(m), _, _) => EvalTarget::Model(*m),
            (None, true, _) => EvalTarget::Bm25,
            (None, false, Some(p)) => EvalTarget::Run(p.clone()),
            (None, false, None) => return None,
        }),
        Command::Compare => Stage::Compare,
        Command::EmitPlots => Stage::EmitPlots,
        Command::Init { .. } | Command::Validate | Command::Pipeline { .. } => return None,
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Init { output } = &cli.command {
        let body = config::init_text();
        match output {
            Some(p) => std::fs::write(p, body)
                .with_context(|| format!("writing {}", p.display()))
                .map_err(validation)?,
            None => print!("{body}"),
        }
        return Ok(());
    }

    let mut cfg = match &cli.global.config {
        Some(p) => config::load(p).map_err(validation)?,
        None => pipeline::PipelineConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.global.workers {
        cfg.workers = w;
    }
    if let Some(d) = &cli.global.stage_dir {
        cfg.stage_dir = d.clone();
    }
    let pipe = Pipeline::new(&cfg)?;
    if let Command::Validate = cli.command {
        println!("config ok ({})", pipe.config_hash());
        return Ok(());
    }

    let _lock = StageLock::acquire(pipe.dir())?;
    match &cli.command {
        Command::Pipeline {
            action: PipelineAction::Run,
        } => {
            for s in pipe.run_all()? {
                println!("{:<24} {}", s.command, if s.skipped { "up to date" } else { "done" });
            }
        }
        other => {
            let stage = stage_for(other).ok_or_else(|| validation(anyhow::anyhow!("nothing to run")))?;
            let record = pipe.run_stage(&stage)?;
            for (path, hash) in &record.outputs {
                println!("{path}  {}", &hash[..16]);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
