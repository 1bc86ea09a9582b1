//! `uimer`: annotate corpora with rationales, sample n-shot subsets,
//! train with an interpretation-alignment loss, dump attributions, and
//! report aggregated results.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, configs, or
//! inputs), 2 runtime failure.

mod exp;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use uimer_core::config::Task;
use uimer_core::corpus::{annotate, load_corpus, sample_n_shot, save_corpus, RationaleSource};
use uimer_core::synthetic;

#[derive(Parser)]
#[command(name = "uimer", version, about = "Rationale-guided training experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Attach rationale masks to a dataset from a keyword or pattern file.
    Annotate {
        /// Input dataset (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Rationale source: {"keywords": {label: [...]}} or {"patterns": [...]}.
        #[arg(long)]
        source: PathBuf,
        /// Output dataset (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw an n-shot-per-class subset of a dataset.
    Sample {
        #[arg(long)]
        data: PathBuf,
        /// Examples to keep per label (per tag type for labeling tasks).
        #[arg(long)]
        shots: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the planted-rationale benchmark splits.
    Synth {
        /// Task: ic, sf, or nli.
        #[arg(long)]
        task: String,
        /// Training examples per class.
        #[arg(long)]
        shots: usize,
        #[arg(long)]
        seed: u64,
        /// Directory for train.jsonl, dev.jsonl, test.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train per an experiment config; writes per-seed run logs and
    /// checkpoints plus an aggregated metrics.json.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a dataset with a trained checkpoint and dump attributions.
    Interpret {
        #[arg(long)]
        config: PathBuf,
        /// Seed directory from train, or a model.json path.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sampling seed for marginalization scores (default: first
        /// configured seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Partition an attribution dump by a_R > a_N and report accuracy
    /// inside each bucket.
    Diagnose {
        #[arg(long)]
        attributions: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate per-seed run logs into a mean and std table.
    Report {
        /// Output directories of train runs.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

/// A failure with the exit code it maps to.
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn validation(e: impl std::fmt::Display) -> Self {
        Failure::Validation(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests arrive as "errors" but succeed.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.cmd {
        Cmd::Annotate { data, source, out } => cmd_annotate(&data, &source, &out),
        Cmd::Sample { data, shots, seed, out } => cmd_sample(&data, shots, seed, &out),
        Cmd::Synth { task, shots, seed, out_dir } => cmd_synth(&task, shots, seed, &out_dir),
        Cmd::Train { config } => exp::cmd_train(&config),
        Cmd::Interpret { config, checkpoint, data, out, seed } => {
            exp::cmd_interpret(&config, &checkpoint, &data, &out, seed)
        }
        Cmd::Diagnose { attributions, out } => exp::cmd_diagnose(&attributions, out.as_deref()),
        Cmd::Report { dirs } => exp::cmd_report(&dirs),
    }
}

fn parse_task(s: &str) -> Result<Task, Failure> {
    match s {
        "ic" => Ok(Task::Ic),
        "sf" => Ok(Task::Sf),
        "nli" => Ok(Task::Nli),
        other => Err(Failure::Validation(format!("unknown task {other:?}: expected ic, sf, or nli"))),
    }
}

fn cmd_annotate(data: &PathBuf, source: &PathBuf, out: &PathBuf) -> CliResult {
    let corpus = load_corpus(data).map_err(Failure::validation)?;
    let src = RationaleSource::load(source).map_err(Failure::validation)?;
    let mut annotated = Vec::with_capacity(corpus.examples.len());
    for ex in &corpus.examples {
        annotated.push(annotate(ex, &src).map_err(Failure::validation)?);
    }
    let masked = annotated
        .iter()
        .filter(|ex| ex.rationale_mask.as_ref().is_some_and(|m| m.iter().any(|&b| b)))
        .count();
    let out_corpus = uimer_core::corpus::Corpus::from_examples(annotated);
    save_corpus(&out_corpus, out).map_err(Failure::runtime)?;
    println!(
        "annotated {} examples ({} with at least one rationale token) -> {}",
        out_corpus.examples.len(),
        masked,
        out.display()
    );
    Ok(())
}

fn cmd_sample(data: &PathBuf, shots: usize, seed: u64, out: &PathBuf) -> CliResult {
    let corpus = load_corpus(data).map_err(Failure::validation)?;
    let subset = sample_n_shot(&corpus, shots, seed).map_err(Failure::validation)?;
    save_corpus(&subset, out).map_err(Failure::runtime)?;
    println!(
        "sampled {} of {} examples ({shots}-shot, seed {seed}) -> {}",
        subset.examples.len(),
        corpus.examples.len(),
        out.display()
    );
    Ok(())
}

fn cmd_synth(task: &str, shots: usize, seed: u64, out_dir: &PathBuf) -> CliResult {
    let task = parse_task(task)?;
    if shots == 0 {
        return Err(Failure::Validation("shots must be >= 1".into()));
    }
    let bench = synthetic::benchmark(task.kind(), shots, seed);
    std::fs::create_dir_all(out_dir).map_err(Failure::runtime)?;
    for (name, split) in
        [("train", &bench.train), ("dev", &bench.dev), ("test", &bench.test)]
    {
        let corpus = uimer_core::corpus::Corpus::from_examples(split.clone());
        let path = out_dir.join(format!("{name}.jsonl"));
        save_corpus(&corpus, &path).map_err(Failure::runtime)?;
        println!("{name}: {} examples -> {}", corpus.examples.len(), path.display());
    }
    Ok(())
}
