use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use enotab_core::config::{Config, EvalMode};
use enotab_core::pipeline::{file_stem, Pipeline, QuestionRecord, RunReport};
use enotab_core::table::load_table;

#[derive(Parser)]
#[command(
    name = "enotab",
    version,
    about = "Table question answering with evidence filtering and table pruning"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replay fixture for the scripted provider (overrides the config).
    #[arg(long, global = true)]
    fixture: Option<PathBuf>,
    /// Fail on requests missing from the fixture instead of using defaults.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct QuestionArgs {
    /// Table file (.csv, or .jsonl with one record per line).
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    question: String,
    /// Directory for the per-question trace document.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one question.
    Ask {
        #[command(flatten)]
        q: QuestionArgs,
        /// Gold answers; when given, correctness is reported.
        #[arg(long = "answer")]
        answers: Vec<String>,
    },
    /// Prune the table for a question and print the kept rows, without
    /// generating an answer.
    Prune {
        #[command(flatten)]
        q: QuestionArgs,
    },
    /// Evaluate a line-delimited dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        repeat: u32,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Where to write the JSON run report.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Summarize token savings from a saved run report.
    Stats {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    Qa,
    Fact,
}

/// Error paired with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn input(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn exhausted(error: anyhow::Error) -> Failure {
    Failure { code: 3, error }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| input(e.into()))?,
        None => Config::default(),
    };
    if let Some(f) = &cli.fixture {
        cfg.provider.fixture = Some(f.clone());
    }
    if cli.strict {
        cfg.provider.strict = true;
    }
    Ok(cfg)
}

fn write_trace(dir: &Path, id: &str, json: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{}.json", file_stem(id)));
    std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli)?;
    if let Command::Stats { report } = &cli.command {
        let text = std::fs::read_to_string(report)
            .with_context(|| format!("reading {}", report.display()))
            .map_err(input)?;
        let report: RunReport = serde_json::from_str(&text)
            .context("parsing run report")
            .map_err(input)?;
        print!("{}", report.compression_summary());
        return Ok(());
    }
    if let Command::Eval { mode: Some(m), .. } = &cli.command {
        cfg.pipeline.mode = match m {
            Mode::Qa => EvalMode::Qa,
            Mode::Fact => EvalMode::Fact,
        };
    }
    let provider = cfg.build_provider().map_err(|e| input(e.into()))?;
    let embedder = cfg.build_embedder().map_err(|e| input(e.into()))?;
    let pipe = Pipeline::new(&cfg, provider.as_ref(), embedder.as_ref());

    match &cli.command {
        Command::Ask { q, answers } => {
            let table = load_table(&q.table).map_err(|e| input(e.into()))?.0;
            let rec = QuestionRecord {
                id: "ask".into(),
                question: q.question.clone(),
                table_path: Some(q.table.clone()),
                table: None,
                answers: answers.clone(),
            };
            let done = pipe.answer_table(&rec, &table, 0).map_err(|e| input(e.into()))?;
            if let Some(dir) = &q.trace_dir {
                write_trace(dir, &rec.id, &done.trace.to_json()).map_err(input)?;
            }
            if done.row.provider_exhausted {
                return Err(exhausted(anyhow!("answer generation failed")));
            }
            println!("{}", done.answer);
            if !answers.is_empty() {
                eprintln!("correct: {}", done.row.correct);
            }
            Ok(())
        }
        Command::Prune { q } => {
            let table = load_table(&q.table).map_err(|e| input(e.into()))?.0;
            let pruned = pipe.prune("prune", &q.question, &table).map_err(|e| input(e.into()))?;
            let json = pruned.trace.to_json();
            if let Some(dir) = &q.trace_dir {
                write_trace(dir, "prune", &json).map_err(input)?;
            }
            println!("{}", pruned.table.render());
            println!();
            println!("{json}");
            Ok(())
        }
        Command::Eval {
            dataset,
            repeat,
            report,
            trace_dir,
            ..
        } => {
            let out = pipe
                .run_dataset(dataset, *repeat as usize, trace_dir.as_deref())
                .map_err(|e| {
                    if e.is_input_error() {
                        input(e.into())
                    } else {
                        Failure {
                            code: 1,
                            error: e.into(),
                        }
                    }
                })?;
            if let Some(path) = report {
                std::fs::write(path, out.to_json())
                    .with_context(|| format!("writing {}", path.display()))
                    .map_err(input)?;
            }
            print!("{}", out.compression_summary());
            let failed = out.rows.iter().filter(|r| r.provider_exhausted).count();
            if failed > 0 {
                return Err(exhausted(anyhow!("{failed} answer call(s) failed")));
            }
            Ok(())
        }
        Command::Stats { .. } => unreachable!("handled above"),
    }
}
