//! Task models for the three task shapes.
//!
//! Architecture: embedding (dim d) -> single-layer bidirectional tanh RNN
//! (hidden H per direction) -> task head. Classification and pair tasks
//! mean-pool the 2H states and apply a linear head; labeling applies the
//! head per position. Pair inputs are joined with a [SEP] token internally;
//! every public per-token result (encode, input gradients) is reported for
//! the original tokens only.
//!
//! All forward passes run on a [`Tape`], so gradients with respect to both
//! parameters and input embeddings are available, and objectives built from
//! those gradients can be differentiated again.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedExample, Output};
use crate::tape::{Gradients, NodeId, Tape};

pub const UNK_TOKEN: &str = "[UNK]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const SEP_TOKEN: &str = "[SEP]";

const UNK_ID: usize = 0;
const MASK_ID: usize = 1;
const SEP_ID: usize = 2;

/// Probabilities are clamped into this interval before odds/log arithmetic.
pub const PROB_FLOOR: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleClassification,
    SequenceLabeling,
    PairClassification,
}

/// Scalar objective to differentiate for gradient-based attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    TaskLoss,
    GoldLogProb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Param {
    pub(crate) fn zeros(rows: usize, cols: usize) -> Self {
        Param { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub(crate) fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Param { rows, cols, data }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("empty token sequence")]
    EmptyInput,
    #[error("label {0:?} is not in the model's label set")]
    UnknownLabel(String),
    #[error("example output shape does not match task kind {0:?}")]
    OutputShape(String),
    #[error("{path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

/// Model output distributions: one over labels, or one per token position.
#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Single(Vec<f64>),
    PerPosition(Vec<Vec<f64>>),
}

/// Parameter leaves for one tape; create with [`TaskModel::bind`].
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    /// Bind an arbitrary parameter map as fresh tape leaves.
    pub fn from_params(tape: &mut Tape, params: &BTreeMap<String, Param>) -> Self {
        let mut ids = BTreeMap::new();
        for (name, p) in params {
            ids.insert(name.clone(), tape.leaf(p.rows, p.cols, p.data.clone()));
        }
        Bound { ids }
    }
}

/// A forward pass's handles: the embedded input actually fed to the encoder
/// and the rows of it that correspond to the caller's tokens ([SEP] rows
/// are internal).
pub struct ForwardInput {
    pub embed: NodeId,
    pub token_rows: Vec<usize>,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    pub kind: TaskKind,
    pub dim: usize,
    pub hidden: usize,
    /// token -> embedding row; rows 0..3 are [UNK], [MASK], [SEP].
    pub token_ids: BTreeMap<String, usize>,
    /// Output classes (classification/pair) or tag set (labeling), sorted.
    pub labels: Vec<String>,
    pub params: BTreeMap<String, Param>,
}

impl TaskModel {
    /// Build a model over a vocabulary. The head is zero-initialized, so an
    /// untrained model predicts the uniform distribution.
    pub fn new(
        kind: TaskKind,
        vocab: impl IntoIterator<Item = String>,
        labels: Vec<String>,
        dim: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        assert!(!labels.is_empty(), "model needs at least one output label");
        let mut token_ids = BTreeMap::new();
        token_ids.insert(UNK_TOKEN.to_string(), UNK_ID);
        token_ids.insert(MASK_TOKEN.to_string(), MASK_ID);
        token_ids.insert(SEP_TOKEN.to_string(), SEP_ID);
        for t in vocab {
            let next = token_ids.len();
            token_ids.entry(t).or_insert(next);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_rows = token_ids.len();
        let k = labels.len();
        let rnn_scale = 1.0 / (dim.max(hidden) as f64).sqrt();
        let mut params = BTreeMap::new();
        params.insert("embedding".into(), Param::uniform(n_rows, dim, 0.1, &mut rng));
        for dir in ["fwd", "bwd"] {
            params.insert(format!("{dir}.wx"), Param::uniform(dim, hidden, rnn_scale, &mut rng));
            params.insert(format!("{dir}.wh"), Param::uniform(hidden, hidden, rnn_scale, &mut rng));
            params.insert(format!("{dir}.b"), Param::zeros(1, hidden));
        }
        params.insert("head.w".into(), Param::zeros(2 * hidden, k));
        params.insert("head.b".into(), Param::zeros(1, k));

        TaskModel { kind, dim, hidden, token_ids, labels, params }
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn token_id(&self, token: &str) -> usize {
        *self.token_ids.get(token).unwrap_or(&UNK_ID)
    }

    pub fn label_index(&self, label: &str) -> Result<usize, ModelError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| ModelError::UnknownLabel(label.to_string()))
    }

    /// Embedding rows fed to the encoder for these tokens, with [SEP]
    /// inserted at the pair boundary, plus which rows are caller tokens.
    fn input_layout(&self, tokens: &[String], pair_boundary: Option<usize>) -> (Vec<usize>, Vec<usize>) {
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        let mut token_rows = Vec::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if pair_boundary == Some(i) {
                ids.push(SEP_ID);
            }
            token_rows.push(ids.len());
            ids.push(self.token_id(t));
        }
        (ids, token_rows)
    }

    /// Create one leaf per parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.params {
            ids.insert(name.clone(), tape.leaf(p.rows, p.cols, p.data.clone()));
        }
        Bound { ids }
    }

    /// Read parameter gradients back out of a finished backward pass.
    /// Parameters the objective does not touch get zero gradients.
    pub fn read_grads(
        &self,
        tape: &Tape,
        grads: &Gradients,
        bound: &Bound,
    ) -> BTreeMap<String, Vec<f64>> {
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

    /// Embed the input tokens (with internal [SEP] for pairs).
    pub fn embed_input(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[String],
        pair_boundary: Option<usize>,
    ) -> ForwardInput {
        let (ids, token_rows) = self.input_layout(tokens, pair_boundary);
        let embed = tape.gather(bound.get("embedding"), &ids);
        ForwardInput { embed, token_rows, seq_len: ids.len() }
    }

    /// Bidirectional tanh RNN over embedded input: seq_len x d -> seq_len x 2H.
    pub fn encode_tape(&self, tape: &mut Tape, bound: &Bound, embed: NodeId, seq_len: usize) -> NodeId {
        let run = |tape: &mut Tape, prefix: &str, order: Vec<usize>| -> Vec<NodeId> {
            let wx = bound.get(&format!("{prefix}.wx"));
            let wh = bound.get(&format!("{prefix}.wh"));
            let b = bound.get(&format!("{prefix}.b"));
            let mut h = tape.zeros(1, self.hidden);
            let mut states = vec![h; order.len()];
            for &t in &order {
                let x = tape.gather(embed, &[t]);
                let xw = tape.matmul(x, wx);
                let hw = tape.matmul(h, wh);
                let s = tape.add(xw, hw);
                let sb = tape.add(s, b);
                h = tape.tanh(sb);
                states[t] = h;
            }
            states
        };
        let fwd = run(tape, "fwd", (0..seq_len).collect());
        let bwd = run(tape, "bwd", (0..seq_len).rev().collect());
        let rows: Vec<NodeId> = (0..seq_len)
            .map(|t| tape.concat_cols(fwd[t], bwd[t]))
            .collect();
        tape.stack_rows(&rows)
    }

    /// Head logits: 1 x K (classification/pair, mean-pooled) or seq_len x K
    /// (labeling, per position).
    pub fn head_tape(&self, tape: &mut Tape, bound: &Bound, hidden: NodeId) -> NodeId {
        let w = bound.get("head.w");
        let b = bound.get("head.b");
        match self.kind {
            TaskKind::SingleClassification | TaskKind::PairClassification => {
                let (n, _) = tape.shape(hidden);
                let summed = tape.sum_rows(hidden);
                let pooled = tape.scale(summed, 1.0 / n as f64);
                let logits = tape.matmul(pooled, w);
                tape.add(logits, b)
            }
            TaskKind::SequenceLabeling => {
                let logits = tape.matmul(hidden, w);
                tape.add_row(logits, b)
            }
        }
    }

    /// Full forward to logits; returns the forward-input handles so callers
    /// can take gradients with respect to the embedded input.
    pub fn logits_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[String],
        pair_boundary: Option<usize>,
    ) -> (NodeId, ForwardInput) {
        let input = self.embed_input(tape, bound, tokens, pair_boundary);
        let hidden = self.encode_tape(tape, bound, input.embed, input.seq_len);
        let logits = self.head_tape(tape, bound, hidden);
        (logits, input)
    }

    /// Log probability of the example's gold output (scalar node). For
    /// labeling this is the sum of per-position gold log probabilities,
    /// i.e. the log of the gold sequence probability.
    pub fn gold_logprob_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        example: &AnnotatedExample,
    ) -> Result<NodeId, ModelError> {
        let (logits, input) = self.logits_tape(tape, bound, &example.tokens, example.pair_boundary);
        self.gold_logprob_from_logits(tape, logits, &input, example)
    }

    /// As [`gold_logprob_tape`] but over already-computed logits, so callers
    /// can reuse one forward pass (or a perturbed one).
    pub fn gold_logprob_from_logits(
        &self,
        tape: &mut Tape,
        logits: NodeId,
        input: &ForwardInput,
        example: &AnnotatedExample,
    ) -> Result<NodeId, ModelError> {
        if example.tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let lp = tape.log_softmax_rows(logits);
        match (&self.kind, &example.output) {
            (TaskKind::SingleClassification | TaskKind::PairClassification, Output::Label(l)) => {
                let idx = self.label_index(l)?;
                Ok(tape.pick(lp, 0, idx))
            }
            (TaskKind::SequenceLabeling, Output::Tags(tags)) => {
                if tags.len() != example.tokens.len() {
                    return Err(ModelError::OutputShape(format!("{:?}", self.kind)));
                }
                let mut picks = Vec::with_capacity(tags.len());
                for (pos, tag) in tags.iter().enumerate() {
                    let idx = self.label_index(tag)?;
                    picks.push(tape.pick(lp, input.token_rows[pos], idx));
                }
                let stacked = tape.stack_rows(&picks);
                Ok(tape.sum_all(stacked))
            }
            _ => Err(ModelError::OutputShape(format!("{:?}", self.kind))),
        }
    }

    /// Mean negative log gold probability over a batch (scalar node).
    pub fn task_loss_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&AnnotatedExample],
    ) -> Result<NodeId, ModelError> {
        assert!(!batch.is_empty(), "task loss over an empty batch");
        let mut terms = Vec::with_capacity(batch.len());
        for ex in batch {
            let lp = self.gold_logprob_tape(tape, bound, ex)?;
            terms.push(tape.neg(lp));
        }
        let stacked = tape.stack_rows(&terms);
        Ok(tape.mean_all(stacked))
    }

    // ------------------------------------------------------------------
    // Evaluation-mode (plain f64) views
    // ------------------------------------------------------------------

    /// Output distribution(s) for the input. Labeling results are reported
    /// per original token position.
    pub fn predict_distribution(
        &self,
        tokens: &[String],
        pair_boundary: Option<usize>,
    ) -> Result<Distribution, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (logits, input) = self.logits_tape(&mut tape, &bound, tokens, pair_boundary);
        let probs = tape.softmax_rows(logits);
        let k = self.n_labels();
        let v = tape.value(probs);
        match self.kind {
            TaskKind::SingleClassification | TaskKind::PairClassification => {
                Ok(Distribution::Single(v.to_vec()))
            }
            TaskKind::SequenceLabeling => {
                let rows = input
                    .token_rows
                    .iter()
                    .map(|&r| v[r * k..(r + 1) * k].to_vec())
                    .collect();
                Ok(Distribution::PerPosition(rows))
            }
        }
    }

    /// Probability of the gold output, clamped into (0,1).
    pub fn gold_probability(&self, example: &AnnotatedExample) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let lp = self.gold_logprob_tape(&mut tape, &bound, example)?;
        Ok(clamp_prob(tape.scalar(lp).exp()))
    }

    /// Probability of `output` given possibly perturbed `tokens` (used by
    /// replacement-based attribution, where tokens differ from the
    /// example's own). Clamped into (0,1).
    pub fn output_probability(
        &self,
        tokens: &[String],
        pair_boundary: Option<usize>,
        output: &Output,
    ) -> Result<f64, ModelError> {
        let probe = AnnotatedExample {
            tokens: tokens.to_vec(),
            output: output.clone(),
            rationale_mask: None,
            pair_boundary,
        };
        self.gold_probability(&probe)
    }

    /// Argmax prediction in evaluation mode.
    pub fn predict(&self, tokens: &[String], pair_boundary: Option<usize>) -> Result<Output, ModelError> {
        match self.predict_distribution(tokens, pair_boundary)? {
            Distribution::Single(p) => Ok(Output::Label(self.labels[argmax(&p)].clone())),
            Distribution::PerPosition(rows) => Ok(Output::Tags(
                rows.iter().map(|r| self.labels[argmax(r)].clone()).collect(),
            )),
        }
    }

    /// Mean negative log gold probability with per-example values.
    pub fn task_loss(&self, batch: &[&AnnotatedExample]) -> Result<TaskLoss, ModelError> {
        assert!(!batch.is_empty(), "task loss over an empty batch");
        let mut per_example = Vec::with_capacity(batch.len());
        for ex in batch {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let lp = self.gold_logprob_tape(&mut tape, &bound, ex)?;
            per_example.push(-tape.scalar(lp));
        }
        let value = per_example.iter().sum::<f64>() / per_example.len() as f64;
        Ok(TaskLoss { value, per_example })
    }

    /// Gradient of the chosen scalar objective with respect to the input
    /// embeddings, one row per original token.
    pub fn input_gradient(
        &self,
        example: &AnnotatedExample,
        objective: ObjectiveKind,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (logits, input) = self.logits_tape(&mut tape, &bound, &example.tokens, example.pair_boundary);
        let lp = self.gold_logprob_from_logits(&mut tape, logits, &input, example)?;
        let root = match objective {
            ObjectiveKind::GoldLogProb => lp,
            ObjectiveKind::TaskLoss => tape.neg(lp),
        };
        let grads = tape.backward(root);
        let g = grads.get(input.embed).expect("objective depends on the input");
        let v = tape.value(g);
        Ok(input
            .token_rows
            .iter()
            .map(|&r| v[r * self.dim..(r + 1) * self.dim].to_vec())
            .collect())
    }

    /// Encoder hidden states, one 2H row per original token.
    pub fn encode(&self, tokens: &[String], pair_boundary: Option<usize>) -> Result<Vec<Vec<f64>>, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let input = self.embed_input(&mut tape, &bound, tokens, pair_boundary);
        let h = self.encode_tape(&mut tape, &bound, input.embed, input.seq_len);
        let v = tape.value(h);
        let width = 2 * self.hidden;
        Ok(input
            .token_rows
            .iter()
            .map(|&r| v[r * width..(r + 1) * width].to_vec())
            .collect())
    }

    // ------------------------------------------------------------------
    // Checkpointing
    // ------------------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let file = Checkpoint { format_version: 1, model: self.clone() };
        let text = serde_json::to_string(&file).expect("model always serializes");
        std::fs::write(path, text).map_err(|e| ModelError::Checkpoint {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let file: Checkpoint = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        if file.format_version != 1 {
            return Err(ModelError::Checkpoint {
                path: path.display().to_string(),
                msg: format!("unsupported checkpoint version {}", file.format_version),
            });
        }
        Ok(file.model)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: TaskModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskLoss {
    pub value: f64,
    pub per_example: Vec<f64>,
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
