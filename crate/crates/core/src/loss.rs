//! Interpretation-alignment losses and the combined training objective
//! L = L_task + alpha * L_int.
//!
//! Three L_int families share one config surface: gradient constraints over
//! per-token scores, a margin between the multi-token marginalization scores
//! a_R and a_N, and a ratio penalty over extractor gates. Each has a plain
//! evaluation form (used for logging and oracles) and a tape form (used for
//! training); the pairs must agree, and tests hold them to that.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{
    gradient_scores_tape, log2_odds, non_rationale_seed, rationale_seed,
    weighted_gold_probability, Extractor, FKind,
};
use crate::corpus::AnnotatedExample;
use crate::model::{Bound, ModelError, ObjectiveKind, TaskModel, PROB_FLOOR};
use crate::replace::{build_multi, ReplaceError, ReplacementStrategy, StrategyKind, Which};
use crate::tape::{NodeId, Tape};

/// Floor for the max non-rationale gate in the dm ratio penalty.
pub const DM_DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GbGhaeini,
    GbMargin,
    Im,
    Dm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::GbGhaeini => "gb_ghaeini",
            Method::GbMargin => "gb_margin",
            Method::Im => "im",
            Method::Dm => "dm",
        }
    }

    pub fn gb_variant(self) -> Option<GbVariant> {
        match self {
            Method::GbGhaeini => Some(GbVariant::Ghaeini),
            Method::GbMargin => Some(GbVariant::Margin),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GbVariant {
    /// Maximize the summed rationale gradients: -sum over rationales.
    Ghaeini,
    /// Hinge pushing rationale scores above non-rationale scores by epsilon.
    Margin,
}

/// Everything the combined objective needs beyond the model and the data.
/// `strategy` and `set_size` only matter for the im method; `f_kind` and
/// `objective_kind` only for the gradient methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub method: Method,
    pub alpha: f64,
    pub epsilon: f64,
    pub f_kind: FKind,
    pub objective_kind: ObjectiveKind,
    pub strategy: StrategyKind,
    pub set_size: usize,
    /// Treat m_R/m_N as constants instead of differentiating through the
    /// replaced-sentence forwards. The margin's value is unchanged but its
    /// gradient vanishes (the p terms cancel), so this ablates im training
    /// while keeping its logs.
    pub stop_gradient_m: bool,
    /// Redraw the S^N non-rationale subset per variant.
    pub redraw_non_rationales: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            method: Method::Im,
            alpha: 1.0,
            epsilon: 1.0,
            f_kind: FKind::Sum,
            objective_kind: ObjectiveKind::GoldLogProb,
            strategy: StrategyKind::Mask,
            set_size: 8,
            stop_gradient_m: false,
            redraw_non_rationales: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(LossError::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(LossError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.set_size == 0 {
            return Err(LossError::Config("set_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Stricter bounds for configs produced by the calibrated sweep.
    pub fn validate_sweep(&self) -> Result<(), LossError> {
        self.validate()?;
        if !(0.001..=20.0).contains(&self.alpha) {
            return Err(LossError::Config(format!(
                "sweep alpha must lie in [0.001, 20], got {}",
                self.alpha
            )));
        }
        if !(0.01..=10.0).contains(&self.epsilon) {
            return Err(LossError::Config(format!(
                "sweep epsilon must lie in [0.01, 10], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("objective config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("replacement failure: {0}")]
    Replace(ReplaceError),
}

/// Per-example seed for anything the objective draws (replacement sets).
pub fn example_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(((index as u64) + 1).wrapping_mul(0xB5AD_4ECE_DA1C_E2A9))
}

// ----------------------------------------------------------------------
// Evaluation-mode losses
// ----------------------------------------------------------------------

/// Gradient-based L_int over per-token scores. `None` is the skip signal
/// for masks without contrast (all rationale or no rationale).
pub fn l_int_gb(attr: &[f64], mask: &[bool], variant: GbVariant, epsilon: f64) -> Option<f64> {
    assert_eq!(attr.len(), mask.len(), "scores and mask must align");
    let any_rat = mask.iter().any(|&b| b);
    let any_non = mask.iter().any(|&b| !b);
    if !any_rat || !any_non {
        return None;
    }
    match variant {
        GbVariant::Ghaeini => {
            Some(-attr.iter().zip(mask).filter(|(_, &g)| g).map(|(a, _)| a).sum::<f64>())
        }
        GbVariant::Margin => {
            let mean = |want: bool| {
                let vals: Vec<f64> = attr
                    .iter()
                    .zip(mask)
                    .filter(|(_, &g)| g == want)
                    .map(|(a, _)| *a)
                    .collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            Some((mean(false) - mean(true) + epsilon).max(0.0))
        }
    }
}

/// Margin loss over multi-token scores: max(a_N - a_R + epsilon, 0).
pub fn l_int_im(a_r: f64, a_n: f64, epsilon: f64) -> f64 {
    (a_n - a_r + epsilon).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmLint {
    pub value: f64,
    /// True when the max non-rationale score was at or below the floor.
    pub denominator_clamped: bool,
}

/// Ratio penalty over extractor gates: every rationale gate should reach
/// the highest non-rationale gate. `None` skips masks without contrast.
pub fn l_int_dm(attr: &[f64], mask: &[bool]) -> Option<DmLint> {
    assert_eq!(attr.len(), mask.len(), "scores and mask must align");
    let any_rat = mask.iter().any(|&b| b);
    let any_non = mask.iter().any(|&b| !b);
    if !any_rat || !any_non {
        return None;
    }
    let max_non = attr
        .iter()
        .zip(mask)
        .filter(|(_, &g)| !g)
        .map(|(a, _)| *a)
        .fold(f64::NEG_INFINITY, f64::max);
    let denominator_clamped = max_non <= DM_DENOMINATOR_FLOOR;
    let deno = max_non.max(DM_DENOMINATOR_FLOOR);
    let value = attr
        .iter()
        .zip(mask)
        .filter(|(_, &g)| g)
        .map(|(a, _)| (a / deno - 1.0).min(0.0).powi(2))
        .sum();
    Some(DmLint { value, denominator_clamped })
}

// ----------------------------------------------------------------------
// Combined objective
// ----------------------------------------------------------------------

/// The method-specific machinery the objective runs on. Must match
/// `config.method`.
pub enum Interpreter<'a> {
    Gradient,
    Im { strategy: &'a ReplacementStrategy },
    Dm { extractor: &'a Extractor },
}

fn check_interpreter(config: &ObjectiveConfig, interpreter: &Interpreter) -> Result<(), LossError> {
    let ok = match (config.method, interpreter) {
        (Method::GbGhaeini | Method::GbMargin, Interpreter::Gradient) => true,
        (Method::Im, Interpreter::Im { strategy }) => {
            if strategy.kind != config.strategy {
                return Err(LossError::Config(format!(
                    "strategy {:?} does not match config strategy {:?}",
                    strategy.kind, config.strategy
                )));
            }
            true
        }
        (Method::Dm, Interpreter::Dm { .. }) => true,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(LossError::Config(format!("interpreter does not match method {}", config.method.name())))
    }
}

/// Tape handles from one combined-objective build. `l_int` is absent when
/// every example was skipped.
pub struct BatchObjectiveNodes {
    pub total: NodeId,
    pub task: NodeId,
    pub l_int: Option<NodeId>,
    pub skipped: usize,
    /// Weighted replacement probabilities that landed outside (0,1).
    pub m_clamp_events: usize,
    /// dm denominators at or below the floor.
    pub denominator_clamp_events: usize,
}

/// Values read back out of a finished build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedLoss {
    pub total: f64,
    pub task: f64,
    pub l_int: Option<f64>,
    pub skipped: usize,
    pub m_clamp_events: usize,
    pub denominator_clamp_events: usize,
}

/// One training step's worth of results: the loss values and the gradient
/// of the total with respect to every model parameter.
pub struct CombinedStep {
    pub loss: CombinedLoss,
    pub grads: BTreeMap<String, Vec<f64>>,
}

fn mask_contrast(ex: &AnnotatedExample) -> bool {
    match &ex.rationale_mask {
        Some(m) => m.iter().any(|&b| b) && m.iter().any(|&b| !b),
        None => false,
    }
}

/// Skips cover inputs the loss is undefined on; anything else is a real error.
fn replace_skip(e: ReplaceError) -> Result<(), LossError> {
    match e {
        ReplaceError::NoMask | ReplaceError::DegenerateInput { .. } | ReplaceError::NoCandidates { .. } => Ok(()),
        other => Err(LossError::Replace(other)),
    }
}

/// log2(odds(m)) for an already-clamped scalar node.
fn log2_odds_tape(tape: &mut Tape, m: NodeId) -> NodeId {
    let ln_m = tape.ln(m);
    let neg_m = tape.neg(m);
    let one_minus = tape.add_const(neg_m, 1.0);
    let ln_om = tape.ln(one_minus);
    let diff = tape.sub(ln_m, ln_om);
    tape.scale(diff, 1.0 / std::f64::consts::LN_2)
}

/// Weighted gold probability of a replacement set as a clamped scalar node,
/// plus whether the raw sum needed clamping.
fn m_tape(
    tape: &mut Tape,
    model: &TaskModel,
    bound: &Bound,
    ex: &AnnotatedExample,
    set: &crate::replace::ReplacementSampleSet,
) -> Result<(NodeId, bool), ModelError> {
    let mut acc: Option<NodeId> = None;
    for v in &set.variants {
        let (logits, input) = model.logits_tape(tape, bound, &v.tokens, ex.pair_boundary);
        let lp = model.gold_logprob_from_logits(tape, logits, &input, ex)?;
        let p = tape.exp(lp);
        let term = tape.scale(p, v.q);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let m = acc.expect("replacement sets are never empty");
    let raw = tape.value(m)[0];
    let clamped = raw <= 0.0 || raw >= 1.0;
    Ok((tape.clamp(m, PROB_FLOOR, 1.0 - PROB_FLOOR), clamped))
}

/// Build mean task loss + alpha * mean L_int over `batch` on the caller's
/// tape. Degenerate examples keep their task term and are counted in
/// `skipped`. Backward on `total` yields the training gradient.
pub fn combined_objective_tape(
    tape: &mut Tape,
    model: &TaskModel,
    bound: &Bound,
    batch: &[&AnnotatedExample],
    config: &ObjectiveConfig,
    interpreter: &Interpreter,
    seed: u64,
) -> Result<BatchObjectiveNodes, LossError> {
    config.validate()?;
    check_interpreter(config, interpreter)?;
    if batch.is_empty() {
        return Err(LossError::Config("empty batch".into()));
    }

    // The extractor's probe is a constant in this objective: its leaves are
    // bound here and their gradients are simply never applied, which is how
    // the alternation freezes phi while theta trains.
    let ext_bound = match interpreter {
        Interpreter::Dm { extractor } => Some(extractor.bind(tape)),
        _ => None,
    };

    let mut task_terms = Vec::with_capacity(batch.len());
    let mut lint_terms: Vec<NodeId> = Vec::new();
    let mut skipped = 0usize;
    let mut m_clamp_events = 0usize;
    let mut denominator_clamp_events = 0usize;

    for (idx, ex) in batch.iter().enumerate() {
        match config.method {
            Method::GbGhaeini | Method::GbMargin => {
                if !mask_contrast(ex) {
                    let lp = model.gold_logprob_tape(tape, bound, ex)?;
                    task_terms.push(tape.neg(lp));
                    skipped += 1;
                    continue;
                }
                let nodes = gradient_scores_tape(
                    tape,
                    model,
                    bound,
                    ex,
                    config.f_kind,
                    config.objective_kind,
                )?;
                task_terms.push(tape.neg(nodes.gold_logprob));
                let rat = ex.rationale_positions();
                let non = ex.non_rationale_positions();
                match config.method.gb_variant().expect("gb method") {
                    GbVariant::Ghaeini => {
                        let rows = tape.gather(nodes.scores, &rat);
                        let s = tape.sum_all(rows);
                        lint_terms.push(tape.neg(s));
                    }
                    GbVariant::Margin => {
                        let r = tape.gather(nodes.scores, &rat);
                        let n = tape.gather(nodes.scores, &non);
                        let mean_r = tape.mean_all(r);
                        let mean_n = tape.mean_all(n);
                        let diff = tape.sub(mean_n, mean_r);
                        let shifted = tape.add_const(diff, config.epsilon);
                        lint_terms.push(tape.relu(shifted));
                    }
                }
            }
            Method::Im => {
                let lp = model.gold_logprob_tape(tape, bound, ex)?;
                task_terms.push(tape.neg(lp));
                let strategy = match interpreter {
                    Interpreter::Im { strategy } => *strategy,
                    _ => unreachable!("checked above"),
                };
                let ex_seed = example_seed(seed, idx);
                let redraw = config.redraw_non_rationales;
                let set_r = match build_multi(
                    strategy,
                    ex,
                    Which::Rationales,
                    config.set_size,
                    rationale_seed(ex_seed),
                    redraw,
                ) {
                    Ok(s) => s,
                    Err(e) => {
                        replace_skip(e)?;
                        skipped += 1;
                        continue;
                    }
                };
                let set_n = match build_multi(
                    strategy,
                    ex,
                    Which::NonRationales,
                    config.set_size,
                    non_rationale_seed(ex_seed),
                    redraw,
                ) {
                    Ok(s) => s,
                    Err(e) => {
                        replace_skip(e)?;
                        skipped += 1;
                        continue;
                    }
                };
                if config.stop_gradient_m {
                    // Constant-target ablation: the value is identical but
                    // contributes no gradient.
                    let (m_r, c_r) = weighted_gold_probability(model, ex, &set_r)?;
                    let (m_n, c_n) = weighted_gold_probability(model, ex, &set_n)?;
                    m_clamp_events += usize::from(c_r) + usize::from(c_n);
                    let value = l_int_im(-log2_odds(m_r), -log2_odds(m_n), config.epsilon);
                    lint_terms.push(tape.scalar_leaf(value));
                } else {
                    let (m_r, c_r) = m_tape(tape, model, bound, ex, &set_r)?;
                    let (m_n, c_n) = m_tape(tape, model, bound, ex, &set_n)?;
                    m_clamp_events += usize::from(c_r) + usize::from(c_n);
                    // a_N - a_R + eps = log2odds(m_R) - log2odds(m_N) + eps:
                    // the p term cancels and is never built.
                    let lo_r = log2_odds_tape(tape, m_r);
                    let lo_n = log2_odds_tape(tape, m_n);
                    let diff = tape.sub(lo_r, lo_n);
                    let shifted = tape.add_const(diff, config.epsilon);
                    lint_terms.push(tape.relu(shifted));
                }
            }
            Method::Dm => {
                let extractor = match interpreter {
                    Interpreter::Dm { extractor } => *extractor,
                    _ => unreachable!("checked above"),
                };
                let input = model.embed_input(tape, bound, &ex.tokens, ex.pair_boundary);
                let enc = model.encode_tape(tape, bound, input.embed, input.seq_len);
                let logits = model.head_tape(tape, bound, enc);
                let lp = model.gold_logprob_from_logits(tape, logits, &input, ex)?;
                task_terms.push(tape.neg(lp));
                if !mask_contrast(ex) {
                    skipped += 1;
                    continue;
                }
                let enc_tok = tape.gather(enc, &input.token_rows);
                let gates =
                    extractor.gates_tape(tape, ext_bound.as_ref().expect("dm bound"), enc_tok, None);
                let rat = ex.rationale_positions();
                let non = ex.non_rationale_positions();
                let rat_rows = tape.gather(gates, &rat);
                let non_rows = tape.gather(gates, &non);
                let mx = tape.max_all(non_rows);
                if tape.value(mx)[0] <= DM_DENOMINATOR_FLOOR {
                    denominator_clamp_events += 1;
                }
                let deno = tape.clamp(mx, DM_DENOMINATOR_FLOOR, f64::INFINITY);
                let deno_b = tape.broadcast_scalar(deno, rat.len(), 1);
                let ratio = tape.div(rat_rows, deno_b);
                let shifted = tape.add_const(ratio, -1.0);
                // min(x,0)^2 == relu(-x)^2
                let neg_shift = tape.neg(shifted);
                let hinge = tape.relu(neg_shift);
                let sq = tape.mul(hinge, hinge);
                lint_terms.push(tape.sum_all(sq));
            }
        }
    }

    let task_stack = tape.stack_rows(&task_terms);
    let task = tape.mean_all(task_stack);
    let l_int = if lint_terms.is_empty() {
        None
    } else {
        let stack = tape.stack_rows(&lint_terms);
        Some(tape.mean_all(stack))
    };
    let total = match l_int {
        Some(li) if config.alpha != 0.0 => {
            let scaled = tape.scale(li, config.alpha);
            tape.add(task, scaled)
        }
        _ => task,
    };
    Ok(BatchObjectiveNodes { total, task, l_int, skipped, m_clamp_events, denominator_clamp_events })
}

fn read_loss(tape: &Tape, nodes: &BatchObjectiveNodes) -> CombinedLoss {
    CombinedLoss {
        total: tape.value(nodes.total)[0],
        task: tape.value(nodes.task)[0],
        l_int: nodes.l_int.map(|n| tape.value(n)[0]),
        skipped: nodes.skipped,
        m_clamp_events: nodes.m_clamp_events,
        denominator_clamp_events: nodes.denominator_clamp_events,
    }
}

/// Evaluate the combined objective without keeping the tape.
pub fn combined_objective(
    model: &TaskModel,
    batch: &[&AnnotatedExample],
    config: &ObjectiveConfig,
    interpreter: &Interpreter,
    seed: u64,
) -> Result<CombinedLoss, LossError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let nodes = combined_objective_tape(&mut tape, model, &bound, batch, config, interpreter, seed)?;
    Ok(read_loss(&tape, &nodes))
}

/// Evaluate and differentiate in one shot: the step every trainer takes.
pub fn combined_gradients(
    model: &TaskModel,
    batch: &[&AnnotatedExample],
    config: &ObjectiveConfig,
    interpreter: &Interpreter,
    seed: u64,
) -> Result<CombinedStep, LossError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let nodes = combined_objective_tape(&mut tape, model, &bound, batch, config, interpreter, seed)?;
    let grads = tape.backward(nodes.total);
    let g = model.read_grads(&tape, &grads, &bound);
    Ok(CombinedStep { loss: read_loss(&tape, &nodes), grads: g })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::im_multi_attribution;
    use crate::corpus::{Corpus, Output};
    use crate::model::TaskKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn labeled(s: &str, label: &str) -> AnnotatedExample {
        AnnotatedExample::new(toks(s), Output::Label(label.into()))
    }

    fn masked(s: &str, label: &str, mask: &[bool]) -> AnnotatedExample {
        labeled(s, label).with_mask(mask.to_vec())
    }

    fn fixture_corpus() -> Corpus {
        Corpus::from_examples(vec![
            labeled("the cat sat on the mat", "a"),
            labeled("a dog ran over the hill", "b"),
            labeled("the bird flew past a tree", "a"),
            labeled("mud stuck to the old boot", "b"),
        ])
    }

    /// Model whose head is randomized so outputs depend on the input.
    fn responsive_model(corpus: &Corpus, seed: u64) -> TaskModel {
        let mut model = TaskModel::new(
            TaskKind::SingleClassification,
            corpus.vocabulary.keys().cloned(),
            corpus.labels(),
            6,
            5,
            seed,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let head = model.params.get_mut("head.w").unwrap();
        head.data.iter_mut().for_each(|w| *w = rng.gen_range(-0.8..0.8));
        model
    }

    fn masked_batch() -> Vec<AnnotatedExample> {
        vec![
            masked("the cat sat on the mat", "a", &[false, true, false, false, false, false]),
            masked("a dog ran over the hill", "b", &[false, true, true, false, false, false]),
            masked("the bird flew past a tree", "a", &[false, true, false, false, false, true]),
        ]
    }

    fn refs(batch: &[AnnotatedExample]) -> Vec<&AnnotatedExample> {
        batch.iter().collect()
    }

    #[test]
    fn gb_hand_values() {
        let g = l_int_gb(&[0.3, 0.7], &[true, false], GbVariant::Ghaeini, 1.0).unwrap();
        assert_eq!(g, -0.3);
        let m = l_int_gb(&[1.0, 0.2], &[true, false], GbVariant::Margin, 0.5).unwrap();
        assert_eq!(m, 0.0, "0.2 - 1.0 + 0.5 clamps to zero");
        let active = l_int_gb(&[0.1, 0.9], &[true, false], GbVariant::Margin, 0.5).unwrap();
        assert!((active - 1.3).abs() < 1e-12);
    }

    #[test]
    fn gb_skips_masks_without_contrast() {
        for variant in [GbVariant::Ghaeini, GbVariant::Margin] {
            assert!(l_int_gb(&[0.1, 0.2], &[true, true], variant, 0.5).is_none());
            assert!(l_int_gb(&[0.1, 0.2], &[false, false], variant, 0.5).is_none());
        }
    }

    #[test]
    fn im_hand_values() {
        assert!((l_int_im(1.787, 2.355, 1.0) - 1.568).abs() < 1e-12);
        assert_eq!(l_int_im(6.098, 0.544, 1.0), 0.0);
    }

    #[test]
    fn im_translation_invariance_and_zero_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let a_r: f64 = rng.gen_range(-100.0..100.0);
            let a_n: f64 = rng.gen_range(-100.0..100.0);
            let c: f64 = rng.gen_range(-100.0..100.0);
            let eps: f64 = rng.gen_range(0.01..10.0);
            let base = l_int_im(a_r, a_n, eps);
            let shifted = l_int_im(a_r + c, a_n + c, eps);
            assert!((base - shifted).abs() <= 1e-12, "{base} vs {shifted} under shift {c}");
            assert!(base >= 0.0);
            assert_eq!(base == 0.0, a_r - a_n >= eps, "zero exactly when the margin is met");
        }
    }

    #[test]
    fn dm_hand_values() {
        let r = l_int_dm(&[0.2, 0.4], &[true, false]).unwrap();
        assert_eq!(r.value, 0.25, "(0.2/0.4 - 1)^2");
        assert!(!r.denominator_clamped);

        // Zero non-rationale scores clamp the denominator; the huge ratios
        // then vanish under min(.,0).
        let z = l_int_dm(
            &[0.99, 0.0, 0.0, 0.0, 0.0, 0.99],
            &[true, false, false, false, false, true],
        )
        .unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.denominator_clamped);

        let dominant = l_int_dm(&[0.9, 0.8, 0.3], &[true, true, false]).unwrap();
        assert_eq!(dominant.value, 0.0);
        assert!(!dominant.denominator_clamped);
    }

    #[test]
    fn dm_skips_masks_without_contrast() {
        assert!(l_int_dm(&[0.2, 0.4], &[true, true]).is_none());
        assert!(l_int_dm(&[0.2, 0.4], &[false, false]).is_none());
    }

    #[test]
    fn dm_zero_iff_rationales_dominate() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let n = rng.gen_range(2..8);
            let attr: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            mask[0] = true;
            mask[n - 1] = false;
            let res = l_int_dm(&attr, &mask).unwrap();
            let min_rat = attr
                .iter()
                .zip(&mask)
                .filter(|(_, &g)| g)
                .map(|(a, _)| *a)
                .fold(f64::INFINITY, f64::min);
            let max_non = attr
                .iter()
                .zip(&mask)
                .filter(|(_, &g)| !g)
                .map(|(a, _)| *a)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(!res.denominator_clamped);
            assert_eq!(res.value == 0.0, min_rat >= max_non);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ObjectiveConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.alpha = -0.1;
        assert!(matches!(cfg.validate(), Err(LossError::Config(_))));
        cfg.alpha = 0.0;
        assert!(cfg.validate().is_ok(), "alpha zero is legal outside sweeps");
        assert!(cfg.validate_sweep().is_err(), "but below the sweep floor");
        cfg.alpha = 1.0;
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
        cfg.epsilon = 12.0;
        assert!(cfg.validate().is_ok());
        assert!(cfg.validate_sweep().is_err());
        cfg.epsilon = 1.0;
        assert!(cfg.validate_sweep().is_ok());
    }

    #[test]
    fn method_serialization_names() {
        for (m, s) in [
            (Method::GbGhaeini, "\"gb_ghaeini\""),
            (Method::GbMargin, "\"gb_margin\""),
            (Method::Im, "\"im\""),
            (Method::Dm, "\"dm\""),
        ] {
            assert_eq!(serde_json::to_string(&m).unwrap(), s);
        }
    }

    #[test]
    fn interpreter_must_match_method() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 5);
        let batch = masked_batch();
        let cfg = ObjectiveConfig { method: Method::Im, ..ObjectiveConfig::default() };
        let err = combined_objective(&model, &refs(&batch), &cfg, &Interpreter::Gradient, 9);
        assert!(matches!(err, Err(LossError::Config(_))));

        let strategy = ReplacementStrategy::new(StrategyKind::Uniform, &corpus, None, 4);
        let cfg = ObjectiveConfig {
            method: Method::Im,
            strategy: StrategyKind::Prior,
            ..ObjectiveConfig::default()
        };
        let err =
            combined_objective(&model, &refs(&batch), &cfg, &Interpreter::Im { strategy: &strategy }, 9);
        assert!(matches!(err, Err(LossError::Config(_))), "strategy kind mismatch");
    }

    #[test]
    fn alpha_zero_equals_task_loss_exactly() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 7);
        let batch = masked_batch();
        let strategy = ReplacementStrategy::new(StrategyKind::Uniform, &corpus, None, 4);
        let cfg = ObjectiveConfig {
            method: Method::Im,
            alpha: 0.0,
            strategy: StrategyKind::Uniform,
            set_size: 2,
            ..ObjectiveConfig::default()
        };
        let loss = combined_objective(&model, &refs(&batch), &cfg, &Interpreter::Im { strategy: &strategy }, 3)
            .unwrap();
        let task = model.task_loss(&refs(&batch)).unwrap();
        assert_eq!(loss.total, task.value, "bitwise equal: same nodes, no alpha term");
        assert_eq!(loss.total, loss.task);
        assert!(loss.l_int.is_some(), "l_int still reported for logging");
    }

    #[test]
    fn all_skipped_reports_task_loss() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 7);
        // No masks at all: every example skips, task loss remains.
        let batch = vec![
            labeled("the cat sat on the mat", "a"),
            labeled("a dog ran over the hill", "b"),
        ];
        let strategy = ReplacementStrategy::new(StrategyKind::Uniform, &corpus, None, 4);
        let cfg = ObjectiveConfig {
            method: Method::Im,
            strategy: StrategyKind::Uniform,
            ..ObjectiveConfig::default()
        };
        let loss = combined_objective(&model, &refs(&batch), &cfg, &Interpreter::Im { strategy: &strategy }, 3)
            .unwrap();
        assert_eq!(loss.skipped, 2);
        assert!(loss.l_int.is_none());
        let task = model.task_loss(&refs(&batch)).unwrap();
        assert_eq!(loss.total, task.value);
    }

    #[test]
    fn combined_is_affine_in_alpha() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 13);
        let batch = masked_batch();
        let strategy = ReplacementStrategy::new(StrategyKind::Prior, &corpus, None, 4);
        let at = |alpha: f64| {
            let cfg = ObjectiveConfig {
                method: Method::Im,
                alpha,
                strategy: StrategyKind::Prior,
                set_size: 3,
                ..ObjectiveConfig::default()
            };
            combined_objective(&model, &refs(&batch), &cfg, &Interpreter::Im { strategy: &strategy }, 17)
                .unwrap()
        };
        let lo = at(0.3);
        let hi = at(0.9);
        let lint = lo.l_int.unwrap();
        assert!(lint > 0.0, "fixture must exercise the active branch");
        assert!((hi.l_int.unwrap() - lint).abs() < 1e-15, "same draws, same scores");
        assert!(((hi.total - lo.total) - 0.6 * lint).abs() < 1e-12, "slope is mean l_int");
        assert!(hi.total >= lo.total, "monotone in alpha for nonnegative l_int");
    }

    #[test]
    fn im_lint_matches_attribution_path() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 19);
        let batch = masked_batch();
        let strategy = ReplacementStrategy::new(StrategyKind::Prior, &corpus, None, 4);
        let cfg = ObjectiveConfig {
            method: Method::Im,
            alpha: 0.5,
            epsilon: 1.0,
            strategy: StrategyKind::Prior,
            set_size: 3,
            ..ObjectiveConfig::default()
        };
        let seed = 23;
        let loss = combined_objective(&model, &refs(&batch), &cfg, &Interpreter::Im { strategy: &strategy }, seed)
            .unwrap();
        let mut expected = 0.0;
        for (idx, ex) in batch.iter().enumerate() {
            let multi = im_multi_attribution(
                &model,
                ex,
                &strategy,
                cfg.set_size,
                example_seed(seed, idx),
                cfg.redraw_non_rationales,
            )
            .unwrap();
            expected += l_int_im(multi.a_r, multi.a_n, cfg.epsilon);
        }
        expected /= batch.len() as f64;
        assert_eq!(loss.skipped, 0);
        assert!(
            (loss.l_int.unwrap() - expected).abs() < 1e-9,
            "tape {} vs eval {}",
            loss.l_int.unwrap(),
            expected
        );
    }

    #[test]
    fn dm_lint_matches_extractor_scores() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 29);
        let batch = masked_batch();
        let extractor = Extractor::new(10, 6, 0.7, 31);
        let cfg = ObjectiveConfig { method: Method::Dm, alpha: 0.5, ..ObjectiveConfig::default() };
        let loss =
            combined_objective(&model, &refs(&batch), &cfg, &Interpreter::Dm { extractor: &extractor }, 0)
                .unwrap();
        let mut expected = 0.0;
        for ex in &batch {
            let scores = extractor.scores(&model, &ex.tokens, ex.pair_boundary).unwrap();
            let mask = ex.rationale_mask.as_ref().unwrap();
            expected += l_int_dm(&scores, mask).unwrap().value;
        }
        expected /= batch.len() as f64;
        assert!((loss.l_int.unwrap() - expected).abs() < 1e-9);
    }

    fn fd_check(
        model: &TaskModel,
        batch: &[&AnnotatedExample],
        cfg: &ObjectiveConfig,
        interpreter: &Interpreter,
        seed: u64,
        coords: &[(&str, usize)],
    ) {
        let step = combined_gradients(model, batch, cfg, interpreter, seed).unwrap();
        assert!(
            step.loss.l_int.unwrap_or(0.0) != 0.0 || cfg.method == Method::GbGhaeini,
            "fixture must keep the interpretation loss active ({:?})",
            step.loss
        );
        let h = 1e-4;
        for &(name, idx) in coords {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.get_mut(name).unwrap().data[idx] += delta;
                combined_objective(&m, batch, cfg, interpreter, seed).unwrap().total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = step.grads[name][idx];
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((analytic - fd) / denom).abs() <= 1e-3,
                "{} [{}]: analytic {} vs fd {}",
                name,
                idx,
                analytic,
                fd
            );
        }
    }

    const FD_COORDS: &[(&str, usize)] = &[
        ("embedding", 0),
        ("embedding", 13),
        ("fwd.wx", 3),
        ("bwd.wh", 2),
        ("head.w", 1),
        ("head.b", 0),
    ];

    #[test]
    fn fd_gradient_gb_ghaeini() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 37);
        let batch = masked_batch();
        let cfg = ObjectiveConfig {
            method: Method::GbGhaeini,
            alpha: 0.7,
            f_kind: FKind::Sum,
            ..ObjectiveConfig::default()
        };
        fd_check(&model, &refs(&batch), &cfg, &Interpreter::Gradient, 1, FD_COORDS);
    }

    #[test]
    fn fd_gradient_gb_margin() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 41);
        let batch = masked_batch();
        let cfg = ObjectiveConfig {
            method: Method::GbMargin,
            alpha: 0.7,
            epsilon: 0.5,
            f_kind: FKind::L1,
            ..ObjectiveConfig::default()
        };
        fd_check(&model, &refs(&batch), &cfg, &Interpreter::Gradient, 1, FD_COORDS);
    }

    #[test]
    fn fd_gradient_im() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 43);
        let batch = masked_batch();
        let strategy = ReplacementStrategy::new(StrategyKind::Prior, &corpus, None, 4);
        let cfg = ObjectiveConfig {
            method: Method::Im,
            alpha: 0.7,
            epsilon: 1.0,
            strategy: StrategyKind::Prior,
            set_size: 2,
            ..ObjectiveConfig::default()
        };
        fd_check(&model, &refs(&batch), &cfg, &Interpreter::Im { strategy: &strategy }, 5, FD_COORDS);
    }

    #[test]
    fn fd_gradient_dm() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 47);
        let batch = masked_batch();
        let extractor = Extractor::new(10, 6, 0.7, 53);
        let cfg = ObjectiveConfig { method: Method::Dm, alpha: 0.7, ..ObjectiveConfig::default() };
        fd_check(&model, &refs(&batch), &cfg, &Interpreter::Dm { extractor: &extractor }, 5, FD_COORDS);
    }

    #[test]
    fn stop_gradient_m_keeps_value_and_kills_gradient() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 59);
        let batch = masked_batch();
        let strategy = ReplacementStrategy::new(StrategyKind::Prior, &corpus, None, 4);
        let base = ObjectiveConfig {
            method: Method::Im,
            alpha: 0.8,
            strategy: StrategyKind::Prior,
            set_size: 3,
            ..ObjectiveConfig::default()
        };
        let frozen = ObjectiveConfig { stop_gradient_m: true, ..base.clone() };
        let seed = 61;
        let interp = Interpreter::Im { strategy: &strategy };

        let live = combined_objective(&model, &refs(&batch), &base, &interp, seed).unwrap();
        let stopped = combined_gradients(&model, &refs(&batch), &frozen, &interp, seed).unwrap();
        assert!(live.l_int.unwrap() > 0.0);
        assert!((live.l_int.unwrap() - stopped.loss.l_int.unwrap()).abs() < 1e-9);
        assert!((live.total - stopped.loss.total).abs() < 1e-9);

        // With m frozen the interpretation term is constant, so the gradient
        // collapses to the task gradient.
        let task_only = ObjectiveConfig { alpha: 0.0, ..base };
        let task_step = combined_gradients(&model, &refs(&batch), &task_only, &interp, seed).unwrap();
        for (name, g) in &stopped.grads {
            for (a, b) in g.iter().zip(&task_step.grads[name]) {
                assert!((a - b).abs() <= 1e-15, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn negative_alpha_is_config_error() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 67);
        let batch = masked_batch();
        let cfg = ObjectiveConfig {
            method: Method::GbGhaeini,
            alpha: -1.0,
            ..ObjectiveConfig::default()
        };
        let err = combined_objective(&model, &refs(&batch), &cfg, &Interpreter::Gradient, 1);
        assert!(matches!(err, Err(LossError::Config(_))));
    }

    #[test]
    fn empty_batch_is_config_error() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 71);
        let cfg = ObjectiveConfig { method: Method::GbGhaeini, ..ObjectiveConfig::default() };
        let err = combined_objective(&model, &[], &cfg, &Interpreter::Gradient, 1);
        assert!(matches!(err, Err(LossError::Config(_))));
    }

    #[test]
    fn gb_mixed_batch_counts_skips_and_keeps_task_terms() {
        let corpus = fixture_corpus();
        let model = responsive_model(&corpus, 73);
        let mut batch = masked_batch();
        batch.push(labeled("mud stuck to the old boot", "b"));
        batch.push(masked("the cat sat on the mat", "a", &[true; 6]));
        let cfg = ObjectiveConfig { method: Method::GbMargin, alpha: 0.4, epsilon: 0.5, ..ObjectiveConfig::default() };
        let loss = combined_objective(&model, &refs(&batch), &cfg, &Interpreter::Gradient, 1).unwrap();
        assert_eq!(loss.skipped, 2);
        let task = model.task_loss(&refs(&batch)).unwrap();
        assert!((loss.task - task.value).abs() < 1e-12, "task term covers skipped examples too");
    }
}
