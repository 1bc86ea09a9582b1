//! Training schedules: warm-up then joint training for the gradient and
//! marginalization methods, and the extractor/model alternation for dm.
//!
//! Runs are deterministic functions of (config, seed): data order is fixed,
//! every draw comes from a seed-derived ChaCha stream, and each epoch takes
//! one full-batch optimizer step.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{extractor_objective_tape, DmPenalties, Extractor};
use crate::corpus::AnnotatedExample;
use crate::eval::{dataset_metric, EvalError};
use crate::loss::{
    combined_gradients, combined_objective, Interpreter, LossError, Method, ObjectiveConfig,
};
use crate::model::{ModelError, Param, TaskModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::tape::Tape;

const STEP_SALT: u64 = 0xA5A5_1234_9ABC_DEF1;
const EVAL_SALT: u64 = 0x3C6E_F372_FE94_F82B;
const NOISE_SALT: u64 = 0x1F83_D9AB_FB41_BD6B;

fn default_learning_rate() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Joint,
    OnePassDm,
    MultiRoundDm,
}

/// Missing fields deserialize to their [`Default`] values, so a config file
/// only has to spell out what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub rounds: usize,
    pub extractor_epochs_per_round: usize,
    pub model_epochs_per_round: usize,
    pub early_stop_patience: usize,
    pub seeds: Vec<u64>,
    pub learning_rate: f64,
    pub extractor_learning_rate: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            mode: ScheduleMode::Joint,
            warmup_epochs: 3,
            max_epochs: 30,
            rounds: 1,
            extractor_epochs_per_round: 10,
            model_epochs_per_round: 20,
            early_stop_patience: 7,
            seeds: vec![1, 2, 3, 4],
            learning_rate: default_learning_rate(),
            extractor_learning_rate: default_learning_rate(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        match self.mode {
            ScheduleMode::Joint => {
                if self.warmup_epochs > self.max_epochs {
                    return Err(ScheduleError::Config(format!(
                        "warmup_epochs {} exceeds max_epochs {}",
                        self.warmup_epochs, self.max_epochs
                    )));
                }
                if self.max_epochs == 0 {
                    return Err(ScheduleError::Config("max_epochs must be >= 1".into()));
                }
            }
            ScheduleMode::OnePassDm => {
                if self.rounds != 1 {
                    return Err(ScheduleError::Config(format!(
                        "one_pass_dm runs exactly one round, got {}",
                        self.rounds
                    )));
                }
            }
            ScheduleMode::MultiRoundDm => {
                if self.rounds < 2 {
                    return Err(ScheduleError::Config(format!(
                        "multi_round_dm needs rounds >= 2, got {}",
                        self.rounds
                    )));
                }
            }
        }
        if matches!(self.mode, ScheduleMode::OnePassDm | ScheduleMode::MultiRoundDm)
            && (self.extractor_epochs_per_round == 0 || self.model_epochs_per_round == 0)
        {
            return Err(ScheduleError::Config(
                "dm alternation needs at least one epoch per phase".into(),
            ));
        }
        if self.early_stop_patience == 0 {
            return Err(ScheduleError::Config("early_stop_patience must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(ScheduleError::Config("at least one seed".into()));
        }
        if self.learning_rate <= 0.0 || self.extractor_learning_rate <= 0.0 {
            return Err(ScheduleError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("schedule config: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    #[serde(rename = "L_task")]
    pub l_task: f64,
    #[serde(rename = "L_int")]
    pub l_int: Option<f64>,
    pub dev_metric: f64,
}

/// Final line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub test_metric: f64,
    pub best_dev_metric: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Bit-exact parameter digests around one alternation phase; the frozen
/// side must not move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseChecksum {
    pub round: usize,
    pub phase: String,
    pub theta_before: u64,
    pub theta_after: u64,
    pub phi_before: u64,
    pub phi_after: u64,
}

pub struct TrainedRun {
    pub model: TaskModel,
    pub extractor: Option<Extractor>,
    pub log: Vec<EpochRecord>,
    pub summary: RunSummary,
    pub checksums: Vec<PhaseChecksum>,
}

/// Order-sensitive digest over parameter bit patterns.
pub fn param_digest(params: &BTreeMap<String, Param>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (name, p) in params {
        name.hash(&mut h);
        for v in &p.data {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ ((epoch as u64) + 1).wrapping_mul(STEP_SALT)
}

fn noise_seed(seed: u64, round: usize, epoch: usize) -> u64 {
    seed ^ NOISE_SALT ^ ((round as u64 + 1) << 32 | (epoch as u64 + 1))
}

/// The run log as line-delimited JSON, summary last.
pub fn run_log_lines(log: &[EpochRecord], summary: &RunSummary) -> String {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r).expect("epoch record serializes"));
        s.push('\n');
    }
    s.push_str(&serde_json::to_string(summary).expect("summary serializes"));
    s.push('\n');
    s
}

struct Tracker {
    best: Option<(f64, usize, TaskModel, Option<Extractor>)>,
    stale: usize,
}

impl Tracker {
    fn new() -> Self {
        Tracker { best: None, stale: 0 }
    }

    /// Record this epoch's dev metric; returns true when patience is spent.
    /// `counts` gates the staleness counter (warm-up epochs never spend
    /// patience), improvements always reset it.
    fn observe(
        &mut self,
        metric: f64,
        epoch: usize,
        model: &TaskModel,
        extractor: Option<&Extractor>,
        counts: bool,
        patience: usize,
    ) -> bool {
        let improved = self.best.as_ref().map_or(true, |(b, _, _, _)| metric > *b);
        if improved {
            self.best = Some((metric, epoch, model.clone(), extractor.cloned()));
            self.stale = 0;
            return false;
        }
        if counts {
            self.stale += 1;
            self.stale >= patience
        } else {
            false
        }
    }
}

/// Warm-up on the task loss alone, then joint training on the combined
/// objective. The warm-up epochs run the same combined build with alpha
/// forced to zero, so the L_int term contributes exactly nothing to the
/// gradient while still being logged.
pub fn train_joint(
    mut model: TaskModel,
    train: &[AnnotatedExample],
    dev: &[AnnotatedExample],
    test: &[AnnotatedExample],
    obj: &ObjectiveConfig,
    sched: &ScheduleConfig,
    interpreter: &Interpreter,
    seed: u64,
) -> Result<TrainedRun, ScheduleError> {
    sched.validate()?;
    obj.validate()?;
    if sched.mode != ScheduleMode::Joint {
        return Err(ScheduleError::Config(format!("train_joint requires joint mode, got {:?}", sched.mode)));
    }
    if obj.method == Method::Dm {
        return Err(ScheduleError::Config(
            "the extractor and the model must not be optimized simultaneously; \
             use one_pass_dm or multi_round_dm"
                .into(),
        ));
    }
    if train.is_empty() {
        return Err(ScheduleError::Config("empty training split".into()));
    }

    let refs: Vec<&AnnotatedExample> = train.iter().collect();
    let mut opt = AdamW::new(AdamWConfig { lr: sched.learning_rate, ..Default::default() });
    let mut tracker = Tracker::new();
    let mut log = Vec::new();
    let eval_seed = seed ^ EVAL_SALT;

    for epoch in 0..sched.max_epochs {
        let warm = epoch < sched.warmup_epochs;
        let step_cfg =
            if warm { ObjectiveConfig { alpha: 0.0, ..obj.clone() } } else { obj.clone() };
        let step = combined_gradients(&model, &refs, &step_cfg, interpreter, epoch_seed(seed, epoch))?;
        opt.step(&mut model.params, &step.grads, 1.0);

        let eval = combined_objective(&model, &refs, obj, interpreter, eval_seed)?;
        let dev_metric = dataset_metric(&model, dev)?;
        log.push(EpochRecord {
            epoch,
            phase: if warm { "warmup" } else { "joint" }.to_string(),
            l_task: eval.task,
            l_int: eval.l_int,
            dev_metric,
        });
        if tracker.observe(dev_metric, epoch, &model, None, !warm, sched.early_stop_patience) {
            break;
        }
    }

    let (best_dev, best_epoch, best_model, _) =
        tracker.best.expect("max_epochs >= 1 logs at least one epoch");
    let test_metric = dataset_metric(&best_model, test)?;
    let summary = RunSummary {
        seed,
        test_metric,
        best_dev_metric: best_dev,
        best_epoch,
        epochs_run: log.len(),
    };
    Ok(TrainedRun { model: best_model, extractor: None, log, summary, checksums: Vec::new() })
}

/// Warm-up, then alternate: extractor epochs on L^Dm with theta frozen,
/// model epochs on the combined objective with phi frozen. Freezing is
/// verified with bit-exact digests around every phase.
pub fn train_multi_round_dm(
    mut model: TaskModel,
    mut extractor: Extractor,
    train: &[AnnotatedExample],
    dev: &[AnnotatedExample],
    test: &[AnnotatedExample],
    obj: &ObjectiveConfig,
    sched: &ScheduleConfig,
    penalties: &DmPenalties,
    seed: u64,
) -> Result<TrainedRun, ScheduleError> {
    sched.validate()?;
    obj.validate()?;
    if sched.mode == ScheduleMode::Joint {
        return Err(ScheduleError::Config(
            "dm training alternates phases; mode must be one_pass_dm or multi_round_dm".into(),
        ));
    }
    if obj.method != Method::Dm {
        return Err(ScheduleError::Config(format!(
            "dm schedule requires the dm method, got {}",
            obj.method.name()
        )));
    }
    if train.is_empty() {
        return Err(ScheduleError::Config("empty training split".into()));
    }

    let refs: Vec<&AnnotatedExample> = train.iter().collect();
    let mut model_opt = AdamW::new(AdamWConfig { lr: sched.learning_rate, ..Default::default() });
    let mut ext_opt =
        AdamW::new(AdamWConfig { lr: sched.extractor_learning_rate, ..Default::default() });
    let mut tracker = Tracker::new();
    let mut log = Vec::new();
    let mut checksums = Vec::new();
    let mut epoch = 0usize;
    let eval_seed = seed ^ EVAL_SALT;
    fn interpreter(ext: &Extractor) -> Interpreter<'_> {
        Interpreter::Dm { extractor: ext }
    }

    let record = |model: &TaskModel,
                      extractor: &Extractor,
                      phase: &str,
                      epoch: usize,
                      log: &mut Vec<EpochRecord>|
     -> Result<f64, ScheduleError> {
        let eval = combined_objective(model, &refs, obj, &interpreter(extractor), eval_seed)?;
        let dev_metric = dataset_metric(model, dev)?;
        log.push(EpochRecord {
            epoch,
            phase: phase.to_string(),
            l_task: eval.task,
            l_int: eval.l_int,
            dev_metric,
        });
        Ok(dev_metric)
    };

    for _ in 0..sched.warmup_epochs {
        let warm_cfg = ObjectiveConfig { alpha: 0.0, ..obj.clone() };
        let step =
            combined_gradients(&model, &refs, &warm_cfg, &interpreter(&extractor), epoch_seed(seed, epoch))?;
        model_opt.step(&mut model.params, &step.grads, 1.0);
        let dev_metric = record(&model, &extractor, "warmup", epoch, &mut log)?;
        tracker.observe(dev_metric, epoch, &model, Some(&extractor), false, sched.early_stop_patience);
        epoch += 1;
    }

    'rounds: for round in 0..sched.rounds {
        // Extractor phase: theta frozen.
        let theta_before = param_digest(&model.params);
        let phi_before = param_digest(&extractor.params);
        for e in 0..sched.extractor_epochs_per_round {
            let mut tape = Tape::new();
            let mb = model.bind(&mut tape);
            let eb = extractor.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(seed, round, e));
            let mut terms = Vec::with_capacity(refs.len());
            for ex in &refs {
                let noise = Extractor::sample_noise(ex.tokens.len(), &mut rng);
                let nodes = extractor_objective_tape(
                    &mut tape, &model, &mb, &extractor, &eb, ex, Some(&noise), penalties,
                )?;
                terms.push(nodes.objective);
            }
            let stacked = tape.stack_rows(&terms);
            let mean = tape.mean_all(stacked);
            let grads = tape.backward(mean);
            let g = extractor.read_grads(&tape, &grads, &eb);
            ext_opt.step(&mut extractor.params, &g, 1.0);
            let dev_metric = record(&model, &extractor, "extractor", epoch, &mut log)?;
            tracker.observe(dev_metric, epoch, &model, Some(&extractor), false, sched.early_stop_patience);
            epoch += 1;
        }
        let theta_after = param_digest(&model.params);
        assert_eq!(theta_before, theta_after, "theta moved during an extractor phase");
        checksums.push(PhaseChecksum {
            round,
            phase: "extractor".into(),
            theta_before,
            theta_after,
            phi_before,
            phi_after: param_digest(&extractor.params),
        });

        // Model phase: phi frozen.
        let theta_before = param_digest(&model.params);
        let phi_before = param_digest(&extractor.params);
        let mut stop = false;
        for _ in 0..sched.model_epochs_per_round {
            let step = combined_gradients(
                &model,
                &refs,
                obj,
                &interpreter(&extractor),
                epoch_seed(seed, epoch),
            )?;
            model_opt.step(&mut model.params, &step.grads, 1.0);
            let dev_metric = record(&model, &extractor, "model", epoch, &mut log)?;
            stop = tracker.observe(
                dev_metric,
                epoch,
                &model,
                Some(&extractor),
                true,
                sched.early_stop_patience,
            );
            epoch += 1;
            if stop {
                break;
            }
        }
        let phi_after = param_digest(&extractor.params);
        assert_eq!(phi_before, phi_after, "phi moved during a model phase");
        checksums.push(PhaseChecksum {
            round,
            phase: "model".into(),
            theta_before,
            theta_after: param_digest(&model.params),
            phi_before,
            phi_after,
        });
        if stop {
            break 'rounds;
        }
    }

    let (best_dev, best_epoch, best_model, best_ext) = match tracker.best {
        Some(b) => b,
        None => {
            // No epochs at all (warmup 0 is legal but rounds >= 1 always log).
            let dm = dataset_metric(&model, dev)?;
            (dm, 0, model.clone(), Some(extractor.clone()))
        }
    };
    let test_metric = dataset_metric(&best_model, test)?;
    let summary = RunSummary {
        seed,
        test_metric,
        best_dev_metric: best_dev,
        best_epoch,
        epochs_run: log.len(),
    };
    Ok(TrainedRun {
        model: best_model,
        extractor: best_ext.or(Some(extractor)),
        log,
        summary,
        checksums,
    })
}

/// Mean and unbiased (n-1) standard deviation; a single value has std 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    /// Successful cells in seed order.
    pub results: Vec<(u64, f64)>,
    /// Failed cells in seed order; never silently dropped.
    pub failures: Vec<(u64, String)>,
}

/// Run every (config, seed) cell, in parallel across cells, and aggregate
/// per config. Output ordering follows the input orderings, so identical
/// inputs produce identical tables.
pub fn run_matrix<C, F>(configs: &[(String, C)], seeds: &[u64], run: F) -> Vec<MatrixRow>
where
    C: Sync,
    F: Fn(&C, u64) -> Result<f64, String> + Sync,
{
    use rayon::prelude::*;
    let cells: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, _)| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let outcomes: Vec<Result<f64, String>> =
        cells.par_iter().map(|&(i, s)| run(&configs[i].1, s)).collect();

    let mut rows = Vec::with_capacity(configs.len());
    for (i, (label, _)) in configs.iter().enumerate() {
        let mut results = Vec::new();
        let mut failures = Vec::new();
        for (cell, outcome) in cells.iter().zip(&outcomes) {
            if cell.0 != i {
                continue;
            }
            match outcome {
                Ok(v) => results.push((cell.1, *v)),
                Err(e) => failures.push((cell.1, e.clone())),
            }
        }
        let values: Vec<f64> = results.iter().map(|(_, v)| *v).collect();
        let (mean, std) = mean_std(&values);
        rows.push(MatrixRow { label: label.clone(), mean, std, results, failures });
    }
    rows
}
