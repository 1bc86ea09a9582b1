//! Task metrics and the attribution-vs-rationale diagnostics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{im_multi_attribution, AttributionError, Extractor};
use crate::corpus::{AnnotatedExample, Output};
use crate::loss::example_seed;
use crate::model::{ModelError, TaskKind, TaskModel};
use crate::replace::ReplacementStrategy;

/// Tag outside any span.
pub const NULL_TAG: &str = "O";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions and golds differ in length: {predictions} vs {golds}")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("output {0:?} does not fit the task kind")]
    OutputShape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
}

/// Maximal runs of identical non-null tags as (start, end-exclusive, label).
pub fn spans(tags: &[String]) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if tags[i] == NULL_TAG {
            i += 1;
            continue;
        }
        let start = i;
        let label = &tags[i];
        while i < tags.len() && &tags[i] == label {
            i += 1;
        }
        out.push((start, i, label.clone()));
    }
    out
}

/// Exact-boundary, exact-label span F1, aggregated over the dataset.
/// No spans anywhere (neither predicted nor gold) counts as perfect.
pub fn span_f1(predictions: &[Vec<String>], golds: &[Vec<String>]) -> f64 {
    let mut n_pred = 0usize;
    let mut n_gold = 0usize;
    let mut n_match = 0usize;
    for (p, g) in predictions.iter().zip(golds) {
        let ps = spans(p);
        let gs = spans(g);
        n_pred += ps.len();
        n_gold += gs.len();
        n_match += ps.iter().filter(|s| gs.contains(s)).count();
    }
    if n_pred == 0 && n_gold == 0 {
        return 1.0;
    }
    if n_match == 0 {
        return 0.0;
    }
    let p = n_match as f64 / n_pred as f64;
    let r = n_match as f64 / n_gold as f64;
    2.0 * p * r / (p + r)
}

/// Accuracy for classification tasks, span F1 for labeling.
pub fn metric(kind: TaskKind, predictions: &[Output], golds: &[Output]) -> Result<f64, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    match kind {
        TaskKind::SingleClassification | TaskKind::PairClassification => {
            let mut correct = 0usize;
            for (p, g) in predictions.iter().zip(golds) {
                match (p, g) {
                    (Output::Label(a), Output::Label(b)) => correct += usize::from(a == b),
                    other => return Err(EvalError::OutputShape(format!("{other:?}"))),
                }
            }
            Ok(correct as f64 / predictions.len().max(1) as f64)
        }
        TaskKind::SequenceLabeling => {
            let mut ps = Vec::with_capacity(predictions.len());
            let mut gs = Vec::with_capacity(golds.len());
            for (p, g) in predictions.iter().zip(golds) {
                match (p, g) {
                    (Output::Tags(a), Output::Tags(b)) => {
                        ps.push(a.clone());
                        gs.push(b.clone());
                    }
                    other => return Err(EvalError::OutputShape(format!("{other:?}"))),
                }
            }
            Ok(span_f1(&ps, &gs))
        }
    }
}

/// Model predictions over a slice of examples.
pub fn predict_all(model: &TaskModel, examples: &[AnnotatedExample]) -> Result<Vec<Output>, ModelError> {
    examples.iter().map(|ex| model.predict(&ex.tokens, ex.pair_boundary)).collect()
}

/// The model's metric on a dataset, under its own task kind.
pub fn dataset_metric(model: &TaskModel, examples: &[AnnotatedExample]) -> Result<f64, EvalError> {
    let preds = predict_all(model, examples)?;
    let golds: Vec<Output> = examples.iter().map(|ex| ex.output.clone()).collect();
    metric(model.kind, &preds, &golds)
}

/// How each example's multi-token scores are produced for diagnostics.
pub enum ScoreSource<'a> {
    /// a_R/a_N from input marginalization directly.
    Im { strategy: &'a ReplacementStrategy, set_size: usize, seed: u64, redraw: bool },
    /// a_R/a_N by averaging the extractor's per-token scores inside and
    /// outside the rationale mask.
    Dm { extractor: &'a Extractor },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(rename = "acc_when_aR_gt_aN")]
    pub acc_when_a_r_gt_a_n: f64,
    #[serde(rename = "acc_when_aR_le_aN")]
    pub acc_when_a_r_le_a_n: f64,
    #[serde(rename = "fraction_aR_gt_aN")]
    pub fraction_a_r_gt_a_n: f64,
    pub overall: f64,
    /// Examples without both token classes (or degenerate for the scorer).
    pub excluded: usize,
    pub counted: usize,
}

/// Partition test examples by whether the rationale score beats the
/// non-rationale score, and report accuracy inside each bucket. Ties land
/// in the "not higher" bucket.
pub fn diagnose(
    model: &TaskModel,
    source: &ScoreSource,
    test: &[AnnotatedExample],
) -> Result<Diagnostics, EvalError> {
    let mut excluded = 0usize;
    let mut items = Vec::with_capacity(test.len());
    for (idx, ex) in test.iter().enumerate() {
        let scores = match source {
            ScoreSource::Im { strategy, set_size, seed, redraw } => {
                match im_multi_attribution(model, ex, strategy, *set_size, example_seed(*seed, idx), *redraw)
                {
                    Ok(multi) => Some((multi.a_r, multi.a_n)),
                    Err(e) if e.is_skip() => None,
                    Err(e) => return Err(e.into()),
                }
            }
            ScoreSource::Dm { extractor } => {
                let mask = match &ex.rationale_mask {
                    Some(m) if m.iter().any(|&b| b) && m.iter().any(|&b| !b) => m,
                    _ => {
                        excluded += 1;
                        continue;
                    }
                };
                let per_token = extractor.scores(model, &ex.tokens, ex.pair_boundary)?;
                mask_contrast_scores(&per_token, mask)
            }
        };
        let (a_r, a_n) = match scores {
            Some(s) => s,
            None => {
                excluded += 1;
                continue;
            }
        };
        let correct = model.predict(&ex.tokens, ex.pair_boundary)? == ex.output;
        items.push((a_r, a_n, correct));
    }
    Ok(diagnostics_from_scores(items, excluded))
}

/// Average per-token scores inside and outside the mask; None when the
/// mask lacks one of the classes.
pub fn mask_contrast_scores(per_token: &[f64], mask: &[bool]) -> Option<(f64, f64)> {
    let avg = |want: bool| {
        let vals: Vec<f64> = per_token
            .iter()
            .zip(mask)
            .filter(|(_, &g)| g == want)
            .map(|(s, _)| *s)
            .collect();
        if vals.is_empty() { None } else { Some(vals.iter().sum::<f64>() / vals.len() as f64) }
    };
    Some((avg(true)?, avg(false)?))
}

/// Aggregate per-example (a_R, a_N, correct) triples into the partition
/// table. Ties land in the "not higher" bucket; an empty bucket reports
/// accuracy 0.
pub fn diagnostics_from_scores(
    items: impl IntoIterator<Item = (f64, f64, bool)>,
    excluded: usize,
) -> Diagnostics {
    let mut n_gt = 0usize;
    let mut c_gt = 0usize;
    let mut n_le = 0usize;
    let mut c_le = 0usize;
    for (a_r, a_n, correct) in items {
        if a_r > a_n {
            n_gt += 1;
            c_gt += usize::from(correct);
        } else {
            n_le += 1;
            c_le += usize::from(correct);
        }
    }
    let counted = n_gt + n_le;
    let acc = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Diagnostics {
        acc_when_a_r_gt_a_n: acc(c_gt, n_gt),
        acc_when_a_r_le_a_n: acc(c_le, n_le),
        fraction_a_r_gt_a_n: if counted == 0 { 0.0 } else { n_gt as f64 / counted as f64 },
        overall: acc(c_gt + c_le, counted),
        excluded,
        counted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Corpus;
    use crate::replace::StrategyKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn tags(s: &str) -> Vec<String> {
        toks(s)
    }

    fn labels(xs: &[&str]) -> Vec<Output> {
        xs.iter().map(|x| Output::Label(x.to_string())).collect()
    }

    #[test]
    fn spans_are_maximal_non_null_runs() {
        let t = tags("O artist artist O rating O O genre");
        assert_eq!(
            spans(&t),
            vec![(1, 3, "artist".into()), (4, 5, "rating".into()), (7, 8, "genre".into())]
        );
        assert!(spans(&tags("O O O")).is_empty());
        // Adjacent spans with different labels stay separate.
        assert_eq!(
            spans(&tags("artist rating")),
            vec![(0, 1, "artist".into()), (1, 2, "rating".into())]
        );
    }

    #[test]
    fn accuracy_counts_exact_label_matches() {
        let preds = labels(&["a", "b", "a", "a"]);
        let golds = labels(&["a", "b", "b", "a"]);
        let acc = metric(TaskKind::SingleClassification, &preds, &golds).unwrap();
        assert_eq!(acc, 0.75);
        assert_eq!(metric(TaskKind::PairClassification, &preds, &preds).unwrap(), 1.0);
    }

    #[test]
    fn metric_rejects_misaligned_lists() {
        let preds = labels(&["a"]);
        let golds = labels(&["a", "b"]);
        assert!(matches!(
            metric(TaskKind::SingleClassification, &preds, &golds),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn span_f1_hand_fixture() {
        // Two gold spans, one predicted and matching: P=1, R=0.5, F1=2/3.
        let gold = vec![tags("O artist artist O rating")];
        let pred = vec![tags("O artist artist O O")];
        let f1 = span_f1(&pred, &gold);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn span_f1_edge_cases() {
        let gold = vec![tags("O artist O")];
        assert_eq!(span_f1(&[tags("O O O")], &gold), 0.0, "nothing predicted");
        assert_eq!(span_f1(&[tags("O O O")], &[tags("O O O")]), 1.0, "nothing to find");
        // Boundary must be exact: a shorter overlap does not count.
        assert_eq!(span_f1(&[tags("artist O O")], &[tags("artist artist O")]), 0.0);
        // Label must be exact too.
        assert_eq!(span_f1(&[tags("genre O")], &[tags("artist O")]), 0.0);
        let all = metric(
            TaskKind::SequenceLabeling,
            &[Output::Tags(tags("O artist"))],
            &[Output::Tags(tags("O artist"))],
        )
        .unwrap();
        assert_eq!(all, 1.0);
    }

    fn labeled(s: &str, label: &str) -> AnnotatedExample {
        AnnotatedExample::new(toks(s), Output::Label(label.into()))
    }

    fn masked(s: &str, label: &str, mask: &[bool]) -> AnnotatedExample {
        labeled(s, label).with_mask(mask.to_vec())
    }

    fn fixture_model(corpus: &Corpus, seed: u64) -> TaskModel {
        let mut model = TaskModel::new(
            TaskKind::SingleClassification,
            corpus.vocabulary.keys().cloned(),
            corpus.labels(),
            5,
            4,
            seed,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let head = model.params.get_mut("head.w").unwrap();
        head.data.iter_mut().for_each(|w| *w = rng.gen_range(-0.7..0.7));
        model
    }

    #[test]
    fn diagnose_decomposition_identity_and_exclusions() {
        let train = vec![
            labeled("sun glows over the dunes", "a"),
            labeled("rain soaks the old pier", "b"),
        ];
        let corpus = Corpus::from_examples(train);
        let model = fixture_model(&corpus, 3);
        let strategy = ReplacementStrategy::new(StrategyKind::Prior, &corpus, None, 4);
        let test = vec![
            masked("sun glows over the dunes", "a", &[true, false, false, false, false]),
            masked("rain soaks the old pier", "b", &[false, true, false, false, false]),
            masked("sun soaks the old dunes", "a", &[true, false, false, false, false]),
            // No mask: excluded and counted as such.
            labeled("rain glows over the pier", "b"),
            // All-rationale mask: no contrast set, also excluded.
            masked("sun glows", "a", &[true, true]),
        ];
        let source = ScoreSource::Im { strategy: &strategy, set_size: 3, seed: 11, redraw: true };
        let d = diagnose(&model, &source, &test).unwrap();
        assert_eq!(d.excluded, 2);
        assert_eq!(d.counted, 3);
        let recomposed = d.fraction_a_r_gt_a_n * d.acc_when_a_r_gt_a_n
            + (1.0 - d.fraction_a_r_gt_a_n) * d.acc_when_a_r_le_a_n;
        assert!((d.overall - recomposed).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&d.fraction_a_r_gt_a_n));
    }

    #[test]
    fn diagnose_ties_fall_to_the_le_bucket() {
        let train = vec![
            labeled("sun glows over the dunes", "a"),
            labeled("rain soaks the old pier", "b"),
        ];
        let corpus = Corpus::from_examples(train);
        // Fresh model, zero head: constant predictor, so every a_R == a_N == 0.
        let model = TaskModel::new(
            TaskKind::SingleClassification,
            corpus.vocabulary.keys().cloned(),
            corpus.labels(),
            5,
            4,
            1,
        );
        let strategy = ReplacementStrategy::new(StrategyKind::Prior, &corpus, None, 4);
        let test = vec![
            masked("sun glows over the dunes", "a", &[true, false, false, false, false]),
            masked("rain soaks the old pier", "b", &[false, true, false, false, false]),
        ];
        let source = ScoreSource::Im { strategy: &strategy, set_size: 3, seed: 7, redraw: true };
        let d = diagnose(&model, &source, &test).unwrap();
        assert_eq!(d.fraction_a_r_gt_a_n, 0.0);
        assert_eq!(d.acc_when_a_r_le_a_n, d.overall);
    }

    #[test]
    fn diagnose_dm_uses_masked_averages() {
        let train = vec![
            labeled("sun glows over the dunes", "a"),
            labeled("rain soaks the old pier", "b"),
        ];
        let corpus = Corpus::from_examples(train);
        let model = fixture_model(&corpus, 9);
        let extractor = Extractor::new(8, 5, 0.7, 13);
        let ex = masked("sun glows over the dunes", "a", &[true, true, false, false, false]);
        let per_token = extractor.scores(&model, &ex.tokens, ex.pair_boundary).unwrap();
        let a_r = (per_token[0] + per_token[1]) / 2.0;
        let a_n = (per_token[2] + per_token[3] + per_token[4]) / 3.0;
        let d = diagnose(&model, &ScoreSource::Dm { extractor: &extractor }, &[ex]).unwrap();
        let in_gt = a_r > a_n;
        assert_eq!(d.fraction_a_r_gt_a_n, if in_gt { 1.0 } else { 0.0 });
        assert_eq!(d.counted, 1);
    }

    #[test]
    fn diagnostics_serialization_uses_table_names() {
        let d = Diagnostics {
            acc_when_a_r_gt_a_n: 0.75,
            acc_when_a_r_le_a_n: 0.5,
            fraction_a_r_gt_a_n: 0.4,
            overall: 0.6,
            excluded: 1,
            counted: 5,
        };
        let s = serde_json::to_string(&d).unwrap();
        assert!(s.contains("\"acc_when_aR_gt_aN\":0.75"));
        assert!(s.contains("\"fraction_aR_gt_aN\":0.4"));
    }
}
