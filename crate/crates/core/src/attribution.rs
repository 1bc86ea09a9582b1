//! Interpretation backends: gradient-based, input-marginalization, and
//! extractor-based attribution over a task model.
//!
//! All scores share one scale-free convention: higher means the token (or
//! token set) matters more for the gold output. Input marginalization
//! measures a log2-odds drop against replacement sets; gradients are reduced
//! per embedding row; the extractor emits gates in [0,1].

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedExample;
use crate::model::{clamp_prob, Bound, ForwardInput, ModelError, ObjectiveKind, Param, TaskKind, TaskModel};
use crate::replace::{build_multi, build_single, ReplaceError, ReplacementSampleSet, ReplacementStrategy, Which};
use crate::tape::{Gradients, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    GradientSum,
    GradientL1,
    InputMarginalization,
    Extractor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiScores {
    #[serde(rename = "a_R")]
    pub a_r: f64,
    #[serde(rename = "a_N")]
    pub a_n: f64,
}

/// Exactly one of `per_token` / `multi_token` is populated; the
/// constructors enforce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_token: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_token: Option<MultiScores>,
    pub method: AttributionMethod,
}

impl AttributionResult {
    pub fn per_token(scores: Vec<f64>, method: AttributionMethod) -> Self {
        AttributionResult { per_token: Some(scores), multi_token: None, method }
    }

    pub fn multi(a_r: f64, a_n: f64, method: AttributionMethod) -> Self {
        AttributionResult {
            per_token: None,
            multi_token: Some(MultiScores { a_r, a_n }),
            method,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AttributionError {
    /// The example cannot support this interpretation (degenerate rationale
    /// structure); the loss layer consumes this as "contribute task loss
    /// only".
    #[error("example skipped: {0}")]
    Skip(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("replacement: {0}")]
    Replace(ReplaceError),
}

impl From<ReplaceError> for AttributionError {
    fn from(e: ReplaceError) -> Self {
        match e {
            ReplaceError::DegenerateInput { .. }
            | ReplaceError::NoMask
            | ReplaceError::NoCandidates { .. } => AttributionError::Skip(e.to_string()),
            other => AttributionError::Replace(other),
        }
    }
}

impl AttributionError {
    pub fn is_skip(&self) -> bool {
        matches!(self, AttributionError::Skip(_))
    }
}

// ----------------------------------------------------------------------
// Gradient-based attribution
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FKind {
    Sum,
    L1,
}

/// Reduce one input-gradient row to a scalar score.
pub fn f_reduce(row: &[f64], f: FKind) -> f64 {
    match f {
        FKind::Sum => row.iter().sum(),
        FKind::L1 => row.iter().map(|g| g.abs()).sum(),
    }
}

pub fn gradient_attribution(
    model: &TaskModel,
    example: &AnnotatedExample,
    f_kind: FKind,
    objective: ObjectiveKind,
) -> Result<AttributionResult, AttributionError> {
    let grads = model.input_gradient(example, objective)?;
    let scores = grads.iter().map(|row| f_reduce(row, f_kind)).collect();
    let method = match f_kind {
        FKind::Sum => AttributionMethod::GradientSum,
        FKind::L1 => AttributionMethod::GradientL1,
    };
    Ok(AttributionResult::per_token(scores, method))
}

/// Tape handles from one example's gradient attribution: the T x 1 score
/// column and the gold log-probability node of the same forward pass.
pub struct GradientScoresNodes {
    pub scores: NodeId,
    pub gold_logprob: NodeId,
}

/// Per-token gradient scores as a T x 1 tape node, differentiable into the
/// model parameters (the scores are themselves built from gradient nodes,
/// so a later backward pass is second-order).
pub fn gradient_scores_tape(
    tape: &mut Tape,
    model: &TaskModel,
    bound: &Bound,
    example: &AnnotatedExample,
    f_kind: FKind,
    objective: ObjectiveKind,
) -> Result<GradientScoresNodes, ModelError> {
    let (logits, input) = model.logits_tape(tape, bound, &example.tokens, example.pair_boundary);
    let lp = model.gold_logprob_from_logits(tape, logits, &input, example)?;
    let root = match objective {
        ObjectiveKind::GoldLogProb => lp,
        ObjectiveKind::TaskLoss => tape.neg(lp),
    };
    let grads = tape.backward(root);
    let g = grads.get(input.embed).expect("objective depends on the input");
    let rows = tape.gather(g, &input.token_rows);
    let reduced = match f_kind {
        FKind::Sum => tape.sum_cols(rows),
        FKind::L1 => {
            let a = tape.abs(rows);
            tape.sum_cols(a)
        }
    };
    Ok(GradientScoresNodes { scores: reduced, gold_logprob: lp })
}

// ----------------------------------------------------------------------
// Input marginalization
// ----------------------------------------------------------------------

/// log2 of p/(1-p) with the model's probability clamp.
pub fn log2_odds(p: f64) -> f64 {
    let p = clamp_prob(p);
    (p / (1.0 - p)).log2()
}

/// Derived seed for position `i` so per-token scores draw independent sets.
pub fn position_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Seeds decoupling the S^R and S^N draws of one multi-token attribution.
pub fn rationale_seed(seed: u64) -> u64 {
    seed
}

pub fn non_rationale_seed(seed: u64) -> u64 {
    seed ^ 0xD1B5_4A32_D192_ED03
}

#[derive(Debug, Clone)]
pub struct ImScore {
    pub value: f64,
    /// Gold probability of the unperturbed input.
    pub p: f64,
    /// Weighted replacement probability, after clamping.
    pub m: f64,
    /// True when the weighted sum fell outside (0,1) and was clamped.
    pub m_clamped: bool,
    /// The variant set the score was computed over, kept for re-evaluation.
    pub set: ReplacementSampleSet,
}

pub(crate) fn weighted_gold_probability(
    model: &TaskModel,
    example: &AnnotatedExample,
    set: &ReplacementSampleSet,
) -> Result<(f64, bool), ModelError> {
    let mut m = 0.0;
    for v in &set.variants {
        m += v.q * model.output_probability(&v.tokens, example.pair_boundary, &example.output)?;
    }
    let clamped = m <= 0.0 || m >= 1.0;
    Ok((clamp_prob(m), clamped))
}

/// a_i = log2(odds(p(y|x))) - log2(odds(m)) over a single-position set.
pub fn im_single_attribution(
    model: &TaskModel,
    example: &AnnotatedExample,
    strategy: &ReplacementStrategy,
    i: usize,
    set_size: usize,
    seed: u64,
) -> Result<ImScore, AttributionError> {
    let p = model.output_probability(&example.tokens, example.pair_boundary, &example.output)?;
    let set = build_single(strategy, &example.tokens, i, set_size, seed)?;
    let (m, m_clamped) = weighted_gold_probability(model, example, &set)?;
    Ok(ImScore { value: log2_odds(p) - log2_odds(m), p, m, m_clamped, set })
}

/// Every position scored with an independently derived seed.
pub fn im_per_token(
    model: &TaskModel,
    example: &AnnotatedExample,
    strategy: &ReplacementStrategy,
    set_size: usize,
    seed: u64,
) -> Result<AttributionResult, AttributionError> {
    let mut scores = Vec::with_capacity(example.tokens.len());
    for i in 0..example.tokens.len() {
        let s = im_single_attribution(model, example, strategy, i, set_size, position_seed(seed, i))?;
        scores.push(s.value);
    }
    Ok(AttributionResult::per_token(scores, AttributionMethod::InputMarginalization))
}

#[derive(Debug, Clone)]
pub struct ImMulti {
    pub a_r: f64,
    pub a_n: f64,
    pub p: f64,
    pub m_r: f64,
    pub m_n: f64,
    pub m_clamped: bool,
    pub set_r: ReplacementSampleSet,
    pub set_n: ReplacementSampleSet,
}

impl ImMulti {
    pub fn result(&self) -> AttributionResult {
        AttributionResult::multi(self.a_r, self.a_n, AttributionMethod::InputMarginalization)
    }
}

/// a_R over S^R (all rationales replaced) and a_N over S^N (an equally
/// sized random non-rationale subset replaced). Degenerate examples come
/// back as a skip signal.
pub fn im_multi_attribution(
    model: &TaskModel,
    example: &AnnotatedExample,
    strategy: &ReplacementStrategy,
    set_size: usize,
    seed: u64,
    redraw: bool,
) -> Result<ImMulti, AttributionError> {
    let p = model.output_probability(&example.tokens, example.pair_boundary, &example.output)?;
    let set_r =
        build_multi(strategy, example, Which::Rationales, set_size, rationale_seed(seed), redraw)?;
    let set_n = build_multi(
        strategy,
        example,
        Which::NonRationales,
        set_size,
        non_rationale_seed(seed),
        redraw,
    )?;
    let (m_r, c_r) = weighted_gold_probability(model, example, &set_r)?;
    let (m_n, c_n) = weighted_gold_probability(model, example, &set_n)?;
    let lp = log2_odds(p);
    Ok(ImMulti {
        a_r: lp - log2_odds(m_r),
        a_n: lp - log2_odds(m_n),
        p,
        m_r,
        m_n,
        m_clamped: c_r || c_n,
        set_r,
        set_n,
    })
}

// ----------------------------------------------------------------------
// Extractor
// ----------------------------------------------------------------------

/// Per-token scorer over encoder states: a one-hidden-layer tanh probe
/// producing a logit, squashed through a temperature sigmoid gate. Gates
/// are stochastic (logistic noise) during extractor training and collapse
/// to the deterministic sigmoid(logit / temperature) at attribution time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extractor {
    pub enc_dim: usize,
    pub probe_hidden: usize,
    pub temperature: f64,
    pub params: BTreeMap<String, Param>,
}

#[derive(Serialize, Deserialize)]
struct ExtractorCheckpoint {
    format_version: u32,
    extractor: Extractor,
}

impl Extractor {
    pub fn new(enc_dim: usize, probe_hidden: usize, temperature: f64, seed: u64) -> Self {
        assert!(temperature > 0.0, "gate temperature must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let s1 = 1.0 / (enc_dim as f64).sqrt();
        params.insert("probe.w1".to_string(), Param::uniform(enc_dim, probe_hidden, s1, &mut rng));
        params.insert("probe.b1".to_string(), Param::zeros(1, probe_hidden));
        let s2 = 1.0 / (probe_hidden as f64).sqrt();
        params.insert("probe.w2".to_string(), Param::uniform(probe_hidden, 1, s2, &mut rng));
        params.insert("probe.b2".to_string(), Param::zeros(1, 1));
        Extractor { enc_dim, probe_hidden, temperature, params }
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound::from_params(tape, &self.params)
    }

    pub fn read_grads(&self, tape: &Tape, grads: &Gradients, bound: &Bound) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, p) in &self.params {
            let g = match grads.get(bound.get(name)) {
                Some(node) => tape.value(node).to_vec(),
                None => vec![0.0; p.rows * p.cols],
            };
            out.insert(name.clone(), g);
        }
        out
    }

    /// Probe logits for encoder rows: T x enc_dim -> T x 1.
    pub fn logits_tape(&self, tape: &mut Tape, bound: &Bound, enc: NodeId) -> NodeId {
        let h = tape.matmul(enc, bound.get("probe.w1"));
        let h = tape.add_row(h, bound.get("probe.b1"));
        let h = tape.tanh(h);
        let l = tape.matmul(h, bound.get("probe.w2"));
        tape.add_row(l, bound.get("probe.b2"))
    }

    /// Gates in [0,1]: sigmoid((logit + noise) / temperature). Pass noise
    /// (one value per row) for the stochastic training relaxation; None for
    /// the deterministic evaluation gate.
    pub fn gates_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        enc: NodeId,
        noise: Option<&[f64]>,
    ) -> NodeId {
        let logits = self.logits_tape(tape, bound, enc);
        let shifted = match noise {
            Some(n) => {
                let (rows, _) = tape.shape(logits);
                assert_eq!(n.len(), rows, "one noise value per token");
                let nl = tape.leaf(rows, 1, n.to_vec());
                tape.add(logits, nl)
            }
            None => logits,
        };
        let scaled = tape.scale(shifted, 1.0 / self.temperature);
        tape.sigmoid(scaled)
    }

    /// Logistic noise for the stochastic gate relaxation.
    pub fn sample_noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len)
            .map(|_| {
                let u: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
                u.ln() - (1.0 - u).ln()
            })
            .collect()
    }

    /// Deterministic evaluation-mode scores, one per original token.
    pub fn scores(
        &self,
        model: &TaskModel,
        tokens: &[String],
        pair_boundary: Option<usize>,
    ) -> Result<Vec<f64>, ModelError> {
        let enc = model.encode(tokens, pair_boundary)?;
        Ok(enc.iter().map(|row| crate::tape::sigmoid(self.logit(row) / self.temperature)).collect())
    }

    fn logit(&self, enc_row: &[f64]) -> f64 {
        let w1 = &self.params["probe.w1"];
        let b1 = &self.params["probe.b1"];
        let w2 = &self.params["probe.w2"];
        let b2 = &self.params["probe.b2"];
        let mut out = b2.data[0];
        for j in 0..self.probe_hidden {
            let mut h = b1.data[j];
            for (d, x) in enc_row.iter().enumerate() {
                h += x * w1.data[d * self.probe_hidden + j];
            }
            out += h.tanh() * w2.data[j];
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let ckpt = ExtractorCheckpoint { format_version: 1, extractor: self.clone() };
        let json = serde_json::to_string_pretty(&ckpt)
            .map_err(|e| ModelError::Checkpoint { path: path.display().to_string(), msg: e.to_string() })?;
        std::fs::write(path, json)
            .map_err(|e| ModelError::Checkpoint { path: path.display().to_string(), msg: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Checkpoint { path: path.display().to_string(), msg: e.to_string() })?;
        let ckpt: ExtractorCheckpoint = serde_json::from_str(&text)
            .map_err(|e| ModelError::Checkpoint { path: path.display().to_string(), msg: e.to_string() })?;
        if ckpt.format_version != 1 {
            return Err(ModelError::Checkpoint {
                path: path.display().to_string(),
                msg: format!("unsupported format version {}", ckpt.format_version),
            });
        }
        Ok(ckpt.extractor)
    }
}

pub fn extractor_attribution(
    extractor: &Extractor,
    model: &TaskModel,
    tokens: &[String],
    pair_boundary: Option<usize>,
) -> Result<AttributionResult, AttributionError> {
    let scores = extractor.scores(model, tokens, pair_boundary)?;
    Ok(AttributionResult::per_token(scores, AttributionMethod::Extractor))
}

// ----------------------------------------------------------------------
// Extractor objective (DiffMask-style)
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DmPenalties {
    pub lambda_sparse: f64,
    pub lambda_faith: f64,
}

impl Default for DmPenalties {
    fn default() -> Self {
        DmPenalties { lambda_sparse: 1.0, lambda_faith: 1.0 }
    }
}

/// Tape handles from one example's extractor objective.
pub struct DmNodes {
    pub objective: NodeId,
    pub sparsity: NodeId,
    pub faithfulness: NodeId,
    /// Output distribution rows of the unmasked input (original tokens only
    /// for labeling; a single row otherwise).
    pub p_original: NodeId,
    pub p_masked: NodeId,
    pub gates: NodeId,
}

/// Build L^Dm for one example on the tape:
/// lambda_sparse * mean(gates) + lambda_faith * symKL(p(x), p(x masked)).
///
/// Masking happens at the embedding layer: each token embedding is
/// multiplied by its gate, so the gate-0 baseline is the zero vector (an
/// absent input step for the recurrent encoder). Internal [SEP] rows are
/// structural and never masked.
pub fn extractor_objective_tape(
    tape: &mut Tape,
    model: &TaskModel,
    model_bound: &Bound,
    extractor: &Extractor,
    ext_bound: &Bound,
    example: &AnnotatedExample,
    noise: Option<&[f64]>,
    pen: &DmPenalties,
) -> Result<DmNodes, ModelError> {
    let input = model.embed_input(tape, model_bound, &example.tokens, example.pair_boundary);
    let enc = model.encode_tape(tape, model_bound, input.embed, input.seq_len);
    let enc_tokens = tape.gather(enc, &input.token_rows);
    let gates = extractor.gates_tape(tape, ext_bound, enc_tokens, noise);
    let sparsity = tape.mean_all(gates);

    let masked_embed = mask_embedding_tape(tape, &input, gates);
    let enc_masked = model.encode_tape(tape, model_bound, masked_embed, input.seq_len);

    let logits_o = model.head_tape(tape, model_bound, enc);
    let logits_m = model.head_tape(tape, model_bound, enc_masked);
    let (logits_o, logits_m) = match model.kind {
        TaskKind::SequenceLabeling => (
            tape.gather(logits_o, &input.token_rows),
            tape.gather(logits_m, &input.token_rows),
        ),
        _ => (logits_o, logits_m),
    };
    let p_original = tape.softmax_rows(logits_o);
    let p_masked = tape.softmax_rows(logits_m);
    let faithfulness = symmetric_kl_tape(tape, logits_o, logits_m);

    let s_term = tape.scale(sparsity, pen.lambda_sparse);
    let f_term = tape.scale(faithfulness, pen.lambda_faith);
    let objective = tape.add(s_term, f_term);
    Ok(DmNodes { objective, sparsity, faithfulness, p_original, p_masked, gates })
}

/// gate * emb over the embedded input; [SEP] rows keep gate 1.
fn mask_embedding_tape(tape: &mut Tape, input: &ForwardInput, gates: NodeId) -> NodeId {
    let full_gates = {
        let scattered = tape.scatter_rows(gates, &input.token_rows, input.seq_len);
        let mut sep_rows = vec![1.0; input.seq_len];
        for &r in &input.token_rows {
            sep_rows[r] = 0.0;
        }
        let sep = tape.leaf(input.seq_len, 1, sep_rows);
        tape.add(scattered, sep)
    };
    tape.mul_col(input.embed, full_gates)
}

/// Mean over rows of KL(p||q) + KL(q||p), from logits.
fn symmetric_kl_tape(tape: &mut Tape, logits_a: NodeId, logits_b: NodeId) -> NodeId {
    let pa = tape.softmax_rows(logits_a);
    let pb = tape.softmax_rows(logits_b);
    let la = tape.log_softmax_rows(logits_a);
    let lb = tape.log_softmax_rows(logits_b);
    let dp = tape.sub(pa, pb);
    let dl = tape.sub(la, lb);
    let prod = tape.mul(dp, dl);
    let per_row = tape.sum_cols(prod);
    tape.mean_all(per_row)
}

#[derive(Debug, Clone)]
pub struct DmBreakdown {
    pub sparsity: f64,
    pub faithfulness: f64,
    pub p_original: Vec<Vec<f64>>,
    pub p_masked: Vec<Vec<f64>>,
    pub gates: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DmObjective {
    /// Mean per-example objective over the batch.
    pub total: f64,
    pub per_example: Vec<DmBreakdown>,
}

/// Evaluation-mode L^Dm: deterministic gates, mean over the batch, with the
/// two output distributions of every example kept for inspection.
pub fn extractor_objective(
    extractor: &Extractor,
    model: &TaskModel,
    batch: &[&AnnotatedExample],
    pen: &DmPenalties,
) -> Result<DmObjective, AttributionError> {
    assert!(!batch.is_empty(), "extractor objective over an empty batch");
    let mut total = 0.0;
    let mut per_example = Vec::with_capacity(batch.len());
    for ex in batch {
        let mut tape = Tape::new();
        let mb = model.bind(&mut tape);
        let eb = extractor.bind(&mut tape);
        let nodes = extractor_objective_tape(&mut tape, model, &mb, extractor, &eb, ex, None, pen)?;
        total += tape.scalar(nodes.objective);
        let rows = |id: NodeId| -> Vec<Vec<f64>> {
            let (r, c) = tape.shape(id);
            let v = tape.value(id);
            (0..r).map(|i| v[i * c..(i + 1) * c].to_vec()).collect()
        };
        per_example.push(DmBreakdown {
            sparsity: tape.scalar(nodes.sparsity),
            faithfulness: tape.scalar(nodes.faithfulness),
            p_original: rows(nodes.p_original),
            p_masked: rows(nodes.p_masked),
            gates: tape.value(nodes.gates).to_vec(),
        });
    }
    Ok(DmObjective { total: total / batch.len() as f64, per_example })
}
