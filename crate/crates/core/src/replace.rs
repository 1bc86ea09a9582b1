//! Replaced-sentence sets for input marginalization.
//!
//! A strategy turns an input into weighted variants: single-token sets S
//! (one position replaced), and multi-token sets S^R (all rationale
//! positions replaced) and S^N (an equally sized random non-rationale
//! subset replaced). Each variant carries the weight q of its replacement:
//! the replacing distribution's probability of the chosen filler for
//! single-token sets, and the arithmetic mean of the per-position
//! probabilities for multi-token sets. Weights are used as given — they are
//! never renormalized over the set — and duplicate variants are collapsed
//! with summed weights, which preserves the weighted sum over the sampled
//! multiset exactly.
//!
//! MASK is deterministic, so a MASK build always yields exactly one variant
//! with q = 1 regardless of the requested set size.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedExample, Corpus};
use crate::model::MASK_TOKEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Mask,
    Bert,
    Prior,
    Uniform,
}

/// Conditional token model for the BERT-style strategy: a distribution over
/// a fixed vocabulary for the token at position `i`, given the rest of the
/// sentence. Implementations must be safe for concurrent read-only queries.
pub trait ConditionalTokenModel: Send + Sync {
    fn vocab(&self) -> &[String];
    /// Probabilities aligned with `vocab()`; must sum to 1 within 1e-6.
    fn fill_distribution(&self, tokens: &[String], i: usize) -> Vec<f64>;
}

#[derive(Debug, thiserror::Error)]
pub enum ReplaceError {
    #[error("bert strategy requires a conditional token model")]
    BertNeedsMlm,
    #[error("degenerate input: {rationales} rationales, {non_rationales} non-rationales")]
    DegenerateInput { rationales: usize, non_rationales: usize },
    #[error("no replacement candidates at position {position}")]
    NoCandidates { position: usize },
    #[error("example has no rationale mask")]
    NoMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Single(usize),
    RationaleSet,
    NonRationaleSet,
}

/// One replaced sentence. `replaced` lists the positions at which it
/// differs from the original (for S^N under per-variant redraw these differ
/// between variants).
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub tokens: Vec<String>,
    pub q: f64,
    pub replaced: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementSampleSet {
    pub variants: Vec<Variant>,
    pub origin: Origin,
}

impl ReplacementSampleSet {
    /// Weighted sum m = sum q(x') * p(x') over the set.
    pub fn weighted_sum(&self, mut p: impl FnMut(&[String]) -> f64) -> f64 {
        self.variants.iter().map(|v| v.q * p(&v.tokens)).sum()
    }
}

pub struct ReplacementStrategy {
    pub kind: StrategyKind,
    pub mlm: Option<Arc<dyn ConditionalTokenModel>>,
    pub top_k: usize,
    /// Corpus vocabulary (sorted) with prior probabilities count(u)/N.
    vocab: Vec<String>,
    priors: Vec<f64>,
}

impl ReplacementStrategy {
    pub fn new(
        kind: StrategyKind,
        corpus: &Corpus,
        mlm: Option<Arc<dyn ConditionalTokenModel>>,
        top_k: usize,
    ) -> Self {
        let vocab: Vec<String> = corpus.vocabulary.keys().cloned().collect();
        let priors = vocab.iter().map(|t| corpus.prior(t)).collect();
        ReplacementStrategy { kind, mlm, top_k, vocab, priors }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn require_mlm(&self) -> Result<&Arc<dyn ConditionalTokenModel>, ReplaceError> {
        self.mlm.as_ref().ok_or(ReplaceError::BertNeedsMlm)
    }

    /// Draw one filler for `tokens[i]`, returning (token, probability under
    /// the strategy's distribution). The original token is never drawn, so
    /// the variant is guaranteed to differ at the position; its stated
    /// probability is reported unrenormalized.
    fn draw(
        &self,
        tokens: &[String],
        i: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(String, f64), ReplaceError> {
        let original = &tokens[i];
        match self.kind {
            StrategyKind::Mask => Ok((MASK_TOKEN.to_string(), 1.0)),
            StrategyKind::Uniform => {
                let q = 1.0 / self.vocab.len() as f64;
                let candidates: Vec<&String> =
                    self.vocab.iter().filter(|t| *t != original).collect();
                if candidates.is_empty() {
                    return Err(ReplaceError::NoCandidates { position: i });
                }
                let pick = candidates[rng.gen_range(0..candidates.len())];
                Ok((pick.clone(), q))
            }
            StrategyKind::Prior => {
                let pick = weighted_draw(
                    self.vocab.iter().zip(&self.priors).filter(|(t, _)| *t != original),
                    rng,
                )
                .ok_or(ReplaceError::NoCandidates { position: i })?;
                Ok(pick)
            }
            StrategyKind::Bert => {
                let mlm = self.require_mlm()?;
                let dist = mlm.fill_distribution(tokens, i);
                let pick = weighted_draw(
                    mlm.vocab().iter().zip(&dist).filter(|(t, _)| *t != original),
                    rng,
                )
                .ok_or(ReplaceError::NoCandidates { position: i })?;
                Ok(pick)
            }
        }
    }
}

/// Weighted draw over (token, weight) pairs; returns the token and its raw
/// weight. None when the filtered support carries no mass.
fn weighted_draw<'a>(
    pairs: impl Iterator<Item = (&'a String, &'a f64)>,
    rng: &mut ChaCha8Rng,
) -> Option<(String, f64)> {
    let items: Vec<(&String, f64)> = pairs.map(|(t, &w)| (t, w)).collect();
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return None;
    }
    let mut x = rng.gen_range(0.0..total);
    for (t, w) in &items {
        if x < *w {
            return Some(((*t).clone(), *w));
        }
        x -= w;
    }
    let (t, w) = items.last()?;
    Some(((*t).clone(), *w))
}

/// Collapse duplicate token sequences, summing their weights. First
/// occurrence order is kept.
fn collapse(variants: Vec<Variant>) -> Vec<Variant> {
    let mut out: Vec<Variant> = Vec::with_capacity(variants.len());
    let mut index: HashMap<Vec<String>, usize> = HashMap::new();
    for v in variants {
        match index.get(&v.tokens) {
            Some(&at) => out[at].q += v.q,
            None => {
                index.insert(v.tokens.clone(), out.len());
                out.push(v);
            }
        }
    }
    out
}

/// Single-token replacement set S for position `i`.
///
/// MASK: one variant, q = 1. BERT: the top_k most probable fillers under
/// the mlm, selected rather than sampled, q = mlm probability. Prior and
/// Uniform: `set_size` draws from the stated distribution, q = that
/// distribution's probability of the drawn token.
pub fn build_single(
    strategy: &ReplacementStrategy,
    tokens: &[String],
    i: usize,
    set_size: usize,
    seed: u64,
) -> Result<ReplacementSampleSet, ReplaceError> {
    assert!(i < tokens.len(), "replace position out of range");
    assert!(set_size >= 1, "set_size must be >= 1");
    let origin = Origin::Single(i);
    let with = |filler: String, q: f64| -> Variant {
        let mut t = tokens.to_vec();
        t[i] = filler;
        Variant { tokens: t, q, replaced: BTreeSet::from([i]) }
    };

    let variants = match strategy.kind {
        StrategyKind::Mask => vec![with(MASK_TOKEN.to_string(), 1.0)],
        StrategyKind::Bert => {
            let mlm = strategy.require_mlm()?;
            let dist = mlm.fill_distribution(tokens, i);
            let mut scored: Vec<(&String, f64)> = mlm
                .vocab()
                .iter()
                .zip(dist)
                .filter(|(t, _)| *t != &tokens[i])
                .collect();
            // Probability descending, token ascending on ties.
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
            if scored.is_empty() {
                return Err(ReplaceError::NoCandidates { position: i });
            }
            scored
                .into_iter()
                .take(strategy.top_k.max(1))
                .map(|(t, q)| with(t.clone(), q))
                .collect()
        }
        StrategyKind::Prior | StrategyKind::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut vs = Vec::with_capacity(set_size);
            for _ in 0..set_size {
                let (t, q) = strategy.draw(tokens, i, &mut rng)?;
                vs.push(with(t, q));
            }
            vs
        }
    };
    Ok(ReplacementSampleSet { variants: collapse(variants), origin })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Rationales,
    NonRationales,
}

/// Multi-token replacement set S^R or S^N for an annotated example.
///
/// Every variant replaces each chosen position, one position at a time;
/// its weight is the mean of the per-position replacement probabilities.
/// For S^N the non-rationale subset is drawn freshly per variant when
/// `redraw` is set, once for the whole set otherwise. MASK collapses to a
/// single variant (one subset draw for S^N).
pub fn build_multi(
    strategy: &ReplacementStrategy,
    example: &AnnotatedExample,
    which: Which,
    set_size: usize,
    seed: u64,
    redraw: bool,
) -> Result<ReplacementSampleSet, ReplaceError> {
    assert!(set_size >= 1, "set_size must be >= 1");
    if example.rationale_mask.is_none() {
        return Err(ReplaceError::NoMask);
    }
    let rationales = example.rationale_positions();
    let non_rationales = example.non_rationale_positions();
    if rationales.is_empty() || non_rationales.len() < rationales.len() {
        return Err(ReplaceError::DegenerateInput {
            rationales: rationales.len(),
            non_rationales: non_rationales.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // MASK is deterministic per position set: one variant.
    let n_variants = if strategy.kind == StrategyKind::Mask { 1 } else { set_size };

    let mut fixed_subset: Option<Vec<usize>> = None;
    let mut variants = Vec::with_capacity(n_variants);
    for v in 0..n_variants {
        let positions: Vec<usize> = match which {
            Which::Rationales => rationales.clone(),
            Which::NonRationales => {
                if redraw || v == 0 {
                    let drawn = draw_subset(&non_rationales, rationales.len(), &mut rng);
                    if !redraw {
                        fixed_subset = Some(drawn.clone());
                    }
                    drawn
                } else {
                    fixed_subset.clone().expect("fixed subset drawn on first variant")
                }
            }
        };
        let mut tokens = example.tokens.clone();
        let mut probs = Vec::with_capacity(positions.len());
        for &p in &positions {
            // Left-to-right, each draw conditioned on the original context
            // with only the current position outstanding.
            let (filler, q) = strategy.draw(&example.tokens, p, &mut rng)?;
            tokens[p] = filler;
            probs.push(q);
        }
        let q = probs.iter().sum::<f64>() / probs.len() as f64;
        variants.push(Variant { tokens, q, replaced: positions.into_iter().collect() });
    }

    let origin = match which {
        Which::Rationales => Origin::RationaleSet,
        Which::NonRationales => Origin::NonRationaleSet,
    };
    Ok(ReplacementSampleSet { variants: collapse(variants), origin })
}

fn draw_subset(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = pool.to_vec();
    // Partial Fisher-Yates: the first k entries are the sample.
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut out = pool[..k].to_vec();
    out.sort_unstable();
    out
}

// ----------------------------------------------------------------------
// Conditional token model backends
// ----------------------------------------------------------------------

/// Count-based context-window model: p(u | neighbors) is proportional to
/// (count(prev -> u) + s) * (count(u -> next) + s), with sentence-boundary
/// sentinels and add-s smoothing. Cheap, deterministic, corpus-derived.
pub struct CountingMlm {
    vocab: Vec<String>,
    /// bigram[(a, b)] = count of token b following token a; indices into
    /// vocab with the sentinel at index vocab.len().
    bigram: HashMap<(usize, usize), u64>,
    smoothing: f64,
    token_index: HashMap<String, usize>,
}

impl CountingMlm {
    const SENTINEL: usize = usize::MAX;

    pub fn fit(corpus: &Corpus, smoothing: f64) -> Self {
        let vocab: Vec<String> = corpus.vocabulary.keys().cloned().collect();
        let token_index: HashMap<String, usize> =
            vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let mut bigram = HashMap::new();
        for ex in &corpus.examples {
            let ids: Vec<usize> =
                ex.tokens.iter().map(|t| token_index[t]).collect();
            let mut prev = Self::SENTINEL;
            for &id in &ids {
                *bigram.entry((prev, id)).or_insert(0) += 1;
                prev = id;
            }
            *bigram.entry((prev, Self::SENTINEL)).or_insert(0) += 1;
        }
        CountingMlm { vocab, bigram, smoothing, token_index }
    }

    fn id_of(&self, token: &str) -> usize {
        *self.token_index.get(token).unwrap_or(&Self::SENTINEL)
    }
}

impl ConditionalTokenModel for CountingMlm {
    fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn fill_distribution(&self, tokens: &[String], i: usize) -> Vec<f64> {
        let prev = if i == 0 { Self::SENTINEL } else { self.id_of(&tokens[i - 1]) };
        let next = if i + 1 >= tokens.len() { Self::SENTINEL } else { self.id_of(&tokens[i + 1]) };
        let mut scores: Vec<f64> = (0..self.vocab.len())
            .map(|u| {
                let left = *self.bigram.get(&(prev, u)).unwrap_or(&0) as f64 + self.smoothing;
                let right = *self.bigram.get(&(u, next)).unwrap_or(&0) as f64 + self.smoothing;
                left * right
            })
            .collect();
        let z: f64 = scores.iter().sum();
        scores.iter_mut().for_each(|s| *s /= z);
        scores
    }
}

/// Tiny trainable masked LM: predicts a token from the average embedding of
/// its in-window neighbors through a linear output layer. Trained with
/// AdamW on the corpus itself.
pub struct TinyMaskedLm {
    vocab: Vec<String>,
    token_index: HashMap<String, usize>,
    window: usize,
    dim: usize,
    embedding: Vec<f64>, // |V| x dim
    out_w: Vec<f64>,     // dim x |V|
    out_b: Vec<f64>,     // |V|
}

impl TinyMaskedLm {
    pub fn fit(corpus: &Corpus, dim: usize, window: usize, epochs: usize, seed: u64) -> Self {
        use crate::model::Param;
        use crate::optim::{AdamW, AdamWConfig};
        use crate::tape::Tape;

        let vocab: Vec<String> = corpus.vocabulary.keys().cloned().collect();
        let token_index: HashMap<String, usize> =
            vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let v = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = std::collections::BTreeMap::new();
        let init = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| Param {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        };
        params.insert("emb".to_string(), init(v, dim, &mut rng));
        params.insert("out_w".to_string(), init(dim, v, &mut rng));
        params.insert("out_b".to_string(), Param { rows: 1, cols: v, data: vec![0.0; v] });

        let contexts: Vec<(Vec<usize>, usize)> = corpus
            .examples
            .iter()
            .flat_map(|ex| {
                let ids: Vec<usize> = ex.tokens.iter().map(|t| token_index[t]).collect();
                (0..ids.len())
                    .map(|i| {
                        let lo = i.saturating_sub(window);
                        let hi = (i + window + 1).min(ids.len());
                        let ctx: Vec<usize> =
                            (lo..hi).filter(|&j| j != i).map(|j| ids[j]).collect();
                        (ctx, ids[i])
                    })
                    .collect::<Vec<_>>()
            })
            .collect();

        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() });
        for _ in 0..epochs {
            let mut tape = Tape::new();
            let emb = tape.leaf(v, dim, params["emb"].data.clone());
            let out_w = tape.leaf(dim, v, params["out_w"].data.clone());
            let out_b = tape.leaf(1, v, params["out_b"].data.clone());
            let mut terms = Vec::new();
            for (ctx, target) in &contexts {
                if ctx.is_empty() {
                    continue;
                }
                let rows = tape.gather(emb, ctx);
                let summed = tape.sum_rows(rows);
                let mean = tape.scale(summed, 1.0 / ctx.len() as f64);
                let logits = tape.matmul(mean, out_w);
                let logits = tape.add(logits, out_b);
                let lp = tape.log_softmax_rows(logits);
                let gold = tape.pick(lp, 0, *target);
                terms.push(tape.neg(gold));
            }
            if terms.is_empty() {
                break;
            }
            let stacked = tape.stack_rows(&terms);
            let loss = tape.mean_all(stacked);
            let grads = tape.backward(loss);
            let mut gmap = std::collections::BTreeMap::new();
            for (name, node) in [("emb", emb), ("out_w", out_w), ("out_b", out_b)] {
                if let Some(g) = grads.get(node) {
                    gmap.insert(name.to_string(), tape.value(g).to_vec());
                }
            }
            opt.step(&mut params, &gmap, 1.0);
        }

        TinyMaskedLm {
            vocab,
            token_index,
            window,
            dim,
            embedding: params["emb"].data.clone(),
            out_w: params["out_w"].data.clone(),
            out_b: params["out_b"].data.clone(),
        }
    }
}

impl ConditionalTokenModel for TinyMaskedLm {
    fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn fill_distribution(&self, tokens: &[String], i: usize) -> Vec<f64> {
        let v = self.vocab.len();
        let lo = i.saturating_sub(self.window);
        let hi = (i + self.window + 1).min(tokens.len());
        let ctx: Vec<usize> = (lo..hi)
            .filter(|&j| j != i)
            .filter_map(|j| self.token_index.get(&tokens[j]).copied())
            .collect();
        let mut mean = vec![0.0; self.dim];
        if !ctx.is_empty() {
            for &c in &ctx {
                for d in 0..self.dim {
                    mean[d] += self.embedding[c * self.dim + d];
                }
            }
            mean.iter_mut().for_each(|m| *m /= ctx.len() as f64);
        }
        let mut logits = self.out_b.clone();
        for (d, m) in mean.iter().enumerate() {
            for u in 0..v {
                logits[u] += m * self.out_w[d * v + u];
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }
}
