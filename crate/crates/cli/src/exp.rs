//! Experiment subcommands: train, interpret, diagnose, report.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use uimer_core::attribution::{gradient_attribution, im_multi_attribution, Extractor};
use uimer_core::config::{ExperimentConfig, MlmKind, Task};
use uimer_core::corpus::{load_corpus, Corpus};
use uimer_core::eval::{diagnostics_from_scores, mask_contrast_scores, Diagnostics};
use uimer_core::loss::{example_seed, Interpreter, Method, ObjectiveConfig};
use uimer_core::model::TaskModel;
use uimer_core::replace::{
    ConditionalTokenModel, CountingMlm, ReplacementStrategy, StrategyKind, TinyMaskedLm,
};
use uimer_core::schedule::{
    mean_std, run_log_lines, train_joint, train_multi_round_dm, RunSummary, ScheduleError,
    ScheduleMode, TrainedRun,
};

use crate::{CliResult, Failure};

const MODEL_INIT_SALT: u64 = 0x5D58_8B65_6C07_8965;
const EXTRACTOR_INIT_SALT: u64 = 0x2722_0A95_FE4D_BF6B;
/// The tiny masked LM is fit once per experiment, not per seed.
const MLM_FIT_SEED: u64 = 17;

fn schedule_failure(e: ScheduleError) -> Failure {
    match e {
        ScheduleError::Config(_) => Failure::validation(e),
        _ => Failure::runtime(e),
    }
}

fn labels_for(task: Task, train: &Corpus) -> Vec<String> {
    match task {
        Task::Sf => train.tags(),
        _ => train.labels(),
    }
}

fn init_model(cfg: &ExperimentConfig, train: &Corpus, seed: u64) -> TaskModel {
    TaskModel::new(
        cfg.task.kind(),
        train.vocabulary.keys().cloned(),
        labels_for(cfg.task, train),
        cfg.embedding_dim,
        cfg.hidden_dim,
        seed ^ MODEL_INIT_SALT,
    )
}

fn build_strategy(cfg: &ExperimentConfig, train: &Corpus) -> ReplacementStrategy {
    let mlm: Option<Arc<dyn ConditionalTokenModel>> = match (cfg.strategy, cfg.mlm) {
        (StrategyKind::Bert, MlmKind::Counting) => {
            Some(Arc::new(CountingMlm::fit(train, cfg.mlm_smoothing)))
        }
        (StrategyKind::Bert, MlmKind::Tiny) => {
            Some(Arc::new(TinyMaskedLm::fit(train, 12, 2, 100, MLM_FIT_SEED)))
        }
        _ => None,
    };
    ReplacementStrategy::new(cfg.strategy, train, mlm, cfg.bert_top_k)
}

fn run_one_seed(
    cfg: &ExperimentConfig,
    obj: &ObjectiveConfig,
    strategy: &ReplacementStrategy,
    train: &Corpus,
    dev: &Corpus,
    test: &Corpus,
    seed: u64,
) -> Result<TrainedRun, Failure> {
    let model = init_model(cfg, train, seed);
    let run = match cfg.schedule.mode {
        ScheduleMode::Joint => {
            let interpreter = match cfg.method {
                Method::Im => Interpreter::Im { strategy },
                _ => Interpreter::Gradient,
            };
            train_joint(
                model,
                &train.examples,
                &dev.examples,
                &test.examples,
                obj,
                &cfg.schedule,
                &interpreter,
                seed,
            )
        }
        ScheduleMode::OnePassDm | ScheduleMode::MultiRoundDm => {
            let extractor = Extractor::new(
                2 * cfg.hidden_dim,
                cfg.probe_hidden,
                cfg.gate_temperature,
                seed ^ EXTRACTOR_INIT_SALT,
            );
            train_multi_round_dm(
                model,
                extractor,
                &train.examples,
                &dev.examples,
                &test.examples,
                obj,
                &cfg.schedule,
                &cfg.penalties(),
                seed,
            )
        }
    }
    .map_err(schedule_failure)?;

    let dir = cfg.output_dir.join(format!("seed_{seed}"));
    std::fs::create_dir_all(&dir).map_err(Failure::runtime)?;
    std::fs::write(dir.join("run_log.jsonl"), run_log_lines(&run.log, &run.summary))
        .map_err(Failure::runtime)?;
    run.model.save(&dir.join("model.json")).map_err(Failure::runtime)?;
    if let Some(ext) = &run.extractor {
        ext.save(&dir.join("extractor.json")).map_err(Failure::runtime)?;
    }
    Ok(run)
}

fn strategy_name(kind: StrategyKind) -> &'static str {
    match kind {
        StrategyKind::Mask => "mask",
        StrategyKind::Bert => "bert",
        StrategyKind::Prior => "prior",
        StrategyKind::Uniform => "uniform",
    }
}

#[derive(Serialize, Deserialize)]
struct MetricsFile {
    task: String,
    method: String,
    strategy: String,
    metric: String,
    alpha: f64,
    epsilon: f64,
    per_seed: Vec<RunSummary>,
    mean: f64,
    std: f64,
}

pub fn cmd_train(config_path: &Path) -> CliResult {
    let mut cfg = ExperimentConfig::load(config_path).map_err(Failure::validation)?;
    cfg.apply_env_override().map_err(Failure::validation)?;
    let train = load_corpus(&cfg.train).map_err(Failure::validation)?;
    let dev = load_corpus(&cfg.dev).map_err(Failure::validation)?;
    let test = load_corpus(&cfg.test).map_err(Failure::validation)?;
    if train.examples.is_empty() {
        return Err(Failure::Validation(format!("empty training set: {}", cfg.train.display())));
    }
    let strategy = build_strategy(&cfg, &train);
    let obj = cfg.objective();
    std::fs::create_dir_all(&cfg.output_dir).map_err(Failure::runtime)?;

    let runs: Vec<Result<TrainedRun, Failure>> = cfg
        .schedule
        .seeds
        .par_iter()
        .map(|&seed| run_one_seed(&cfg, &obj, &strategy, &train, &dev, &test, seed))
        .collect();
    let mut per_seed = Vec::with_capacity(runs.len());
    for run in runs {
        per_seed.push(run?.summary);
    }

    let tests: Vec<f64> = per_seed.iter().map(|s| s.test_metric).collect();
    let (mean, std) = mean_std(&tests);
    let metrics = MetricsFile {
        task: cfg.task.name().to_string(),
        method: cfg.method.name().to_string(),
        strategy: strategy_name(cfg.strategy).to_string(),
        metric: cfg.task.metric_name().to_string(),
        alpha: cfg.alpha,
        epsilon: cfg.epsilon,
        per_seed: per_seed.clone(),
        mean,
        std,
    };
    let metrics_path = cfg.output_dir.join("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&metrics).expect("serializes"))
        .map_err(Failure::runtime)?;

    println!("task {} method {} ({})", metrics.task, metrics.method, metrics.metric);
    println!("{:<6} {:>10} {:>7} {:>10} {:>10}", "seed", "best_epoch", "epochs", "dev", "test");
    for s in &per_seed {
        println!(
            "{:<6} {:>10} {:>7} {:>10.4} {:>10.4}",
            s.seed, s.best_epoch, s.epochs_run, s.best_dev_metric, s.test_metric
        );
    }
    println!("test {}: mean {:.4} std {:.4} over {} seeds", metrics.metric, mean, std, tests.len());
    println!("wrote {}", metrics_path.display());
    Ok(())
}

/// One line of attributions.jsonl: per-token scores for the gradient and
/// extractor methods, the (a_R, a_N) pair for marginalization. `mask` is
/// the gold rationale as 0/1 ints, matching the dataset format.
#[derive(Serialize, Deserialize)]
pub struct AttributionRecord {
    pub tokens: Vec<String>,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_token: Option<Vec<f64>>,
    #[serde(rename = "a_R", skip_serializing_if = "Option::is_none")]
    pub a_r: Option<f64>,
    #[serde(rename = "a_N", skip_serializing_if = "Option::is_none")]
    pub a_n: Option<f64>,
    pub mask: Option<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
}

fn mask_ints(mask: &Option<Vec<bool>>) -> Option<Vec<u8>> {
    mask.as_ref().map(|m| m.iter().map(|&b| u8::from(b)).collect())
}

pub fn cmd_interpret(
    config_path: &Path,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
) -> CliResult {
    let cfg = ExperimentConfig::load(config_path).map_err(Failure::validation)?;
    let model_path =
        if checkpoint.is_dir() { checkpoint.join("model.json") } else { checkpoint.to_path_buf() };
    let model = TaskModel::load(&model_path).map_err(Failure::validation)?;
    let extractor = if cfg.method == Method::Dm {
        let ext_path = model_path.with_file_name("extractor.json");
        Some(Extractor::load(&ext_path).map_err(Failure::validation)?)
    } else {
        None
    };
    let corpus = load_corpus(data).map_err(Failure::validation)?;
    let train = load_corpus(&cfg.train).map_err(Failure::validation)?;
    let strategy = build_strategy(&cfg, &train);
    let seed = seed.unwrap_or(cfg.schedule.seeds[0]);

    let mut lines = String::new();
    let mut skipped = 0usize;
    for (idx, ex) in corpus.examples.iter().enumerate() {
        let correct = model
            .predict(&ex.tokens, ex.pair_boundary)
            .map(|p| p == ex.output)
            .map_err(Failure::runtime)?;
        let mut record = AttributionRecord {
            tokens: ex.tokens.clone(),
            method: cfg.method.name().to_string(),
            per_token: None,
            a_r: None,
            a_n: None,
            mask: mask_ints(&ex.rationale_mask),
            correct: Some(correct),
            skipped: false,
        };
        match cfg.method {
            Method::GbGhaeini | Method::GbMargin => {
                let res = gradient_attribution(&model, ex, cfg.f_kind, cfg.objective_kind)
                    .map_err(Failure::runtime)?;
                record.per_token = res.per_token;
            }
            Method::Im => {
                match im_multi_attribution(
                    &model,
                    ex,
                    &strategy,
                    cfg.sample_set_size,
                    example_seed(seed, idx),
                    cfg.redraw_non_rationales,
                ) {
                    Ok(multi) => {
                        record.a_r = Some(multi.a_r);
                        record.a_n = Some(multi.a_n);
                    }
                    Err(e) if e.is_skip() => {
                        record.skipped = true;
                        skipped += 1;
                    }
                    Err(e) => return Err(Failure::runtime(e)),
                }
            }
            Method::Dm => {
                let ext = extractor.as_ref().expect("loaded for dm");
                let scores = ext
                    .scores(&model, &ex.tokens, ex.pair_boundary)
                    .map_err(Failure::runtime)?;
                record.per_token = Some(scores);
            }
        }
        lines.push_str(&serde_json::to_string(&record).expect("record serializes"));
        lines.push('\n');
    }
    std::fs::write(out, lines).map_err(Failure::runtime)?;
    println!(
        "interpreted {} examples with {} ({} skipped) -> {}",
        corpus.examples.len(),
        cfg.method.name(),
        skipped,
        out.display()
    );
    Ok(())
}

pub fn cmd_diagnose(attributions: &Path, out: Option<&Path>) -> CliResult {
    let text = std::fs::read_to_string(attributions).map_err(Failure::validation)?;
    let mut items = Vec::new();
    let mut excluded = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AttributionRecord = serde_json::from_str(line).map_err(|e| {
            Failure::Validation(format!("{}:{}: {e}", attributions.display(), lineno + 1))
        })?;
        if record.skipped {
            excluded += 1;
            continue;
        }
        let scores = match (record.a_r, record.a_n, &record.per_token, &record.mask) {
            (Some(a_r), Some(a_n), _, _) => Some((a_r, a_n)),
            (None, None, Some(per_token), Some(mask)) => {
                if per_token.len() != mask.len() {
                    return Err(Failure::Validation(format!(
                        "{}:{}: {} scores for {} mask entries",
                        attributions.display(),
                        lineno + 1,
                        per_token.len(),
                        mask.len()
                    )));
                }
                let mask: Vec<bool> = mask.iter().map(|&v| v != 0).collect();
                mask_contrast_scores(per_token, &mask)
            }
            _ => None,
        };
        let (a_r, a_n) = match scores {
            Some(s) => s,
            None => {
                excluded += 1;
                continue;
            }
        };
        let correct = record.correct.ok_or_else(|| {
            Failure::Validation(format!(
                "{}:{}: record has scores but no correctness flag; \
                 regenerate the dump with interpret",
                attributions.display(),
                lineno + 1
            ))
        })?;
        items.push((a_r, a_n, correct));
    }
    let diag = diagnostics_from_scores(items, excluded);
    print_diagnostics(&diag);
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&diag).expect("serializes"))
            .map_err(Failure::runtime)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn print_diagnostics(d: &Diagnostics) {
    println!("fraction a_R > a_N    {:.4}", d.fraction_a_r_gt_a_n);
    println!("acc when a_R > a_N    {:.4}", d.acc_when_a_r_gt_a_n);
    println!("acc when a_R <= a_N   {:.4}", d.acc_when_a_r_le_a_n);
    println!("overall accuracy      {:.4}", d.overall);
    println!("counted {} examples, excluded {}", d.counted, d.excluded);
}

/// Pull the summary (last line) out of one run_log.jsonl.
fn read_summary(path: &Path) -> Result<RunSummary, Failure> {
    let text = std::fs::read_to_string(path).map_err(Failure::validation)?;
    let last = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .last()
        .ok_or_else(|| Failure::Validation(format!("{} is empty", path.display())))?;
    serde_json::from_str(last)
        .map_err(|e| Failure::Validation(format!("{}: bad summary line: {e}", path.display())))
}

pub fn cmd_report(dirs: &[PathBuf]) -> CliResult {
    println!("{:<28} {:>2} {:>10} {:>10}  per-seed", "run", "n", "mean", "std");
    for dir in dirs {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(Failure::validation)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_dir()
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("seed_"))
            })
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(Failure::Validation(format!(
                "{} contains no seed_* run directories",
                dir.display()
            )));
        }
        let mut summaries = Vec::with_capacity(entries.len());
        for e in &entries {
            summaries.push(read_summary(&e.join("run_log.jsonl"))?);
        }
        summaries.sort_by_key(|s| s.seed);
        let values: Vec<f64> = summaries.iter().map(|s| s.test_metric).collect();
        let (mean, std) = mean_std(&values);
        let per_seed: Vec<String> =
            summaries.iter().map(|s| format!("{}:{:.4}", s.seed, s.test_metric)).collect();
        let label = dir.display().to_string();
        println!(
            "{:<28} {:>2} {:>10.4} {:>10.4}  {}",
            label,
            values.len(),
            mean,
            std,
            per_seed.join(" ")
        );
    }
    Ok(())
}
