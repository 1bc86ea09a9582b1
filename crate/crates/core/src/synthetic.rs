//! Deterministic planted-rationale benchmarks.
//!
//! Each task plants tokens that fully determine the output and marks them
//! as the rationale. The other tokens are bait: classification and pair
//! contexts are iid distractors that still correlate with the labels
//! in-sample when training examples are few, and labeling contexts carry
//! lure words that co-occur with one slot type at train time but with the
//! opposite type at test time. A model that leans on any of that instead
//! of the rationale generalizes poorly — the gap rationale-guided training
//! is supposed to close.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{AnnotatedExample, Corpus, Output};
use crate::model::TaskKind;

const CLASS_KEYWORDS: &[(&str, [&str; 2])] = &[
    ("circuit", ["alpha", "ampere"]),
    ("storm", ["beta", "bolt"]),
    ("harvest", ["gamma", "grain"]),
];

const DISTRACTORS: &[&str] = &[
    "the", "a", "on", "with", "plate", "window", "river", "stone", "cloud", "lamp", "paper",
    "wheel", "grass", "door", "hill", "spoon", "cable", "mirror", "branch", "sand",
];

const SLOT_TRIGGERS: &[(&str, [&str; 2])] = &[("artist", ["play", "queue"]), ("rating", ["rate", "score"])];

const SLOT_VALUES: &[&str] = &["vela", "moss", "onyx", "pearl", "flint", "coral", "slate", "amber"];

/// Context bait for the labeling task, one pool per slot type. Training
/// sentences draw lures from their own type's pool, dev and test sentences
/// from the opposite pool, so lures anti-predict the tag out of sample
/// while the trigger stays decisive everywhere.
const SLOT_LURES: &[(&str, [&str; 3])] =
    &[("artist", ["velvet", "neon", "drift"]), ("rating", ["chalk", "ember", "frost"])];

const LURE_PROB: f64 = 0.5;

const PAIR_FAMILIES: &[[&str; 2]] = &[["north", "cold"], ["south", "warm"]];

const CLASSIFICATION_LEN: usize = 7;
const DEV_PER_CLASS: usize = 8;
const TEST_PER_CLASS: usize = 20;

// Labeling splits are larger: span F1 over one span per sentence needs more
// sentences before dev differences resolve at all.
const DEV_PER_TYPE: usize = 24;
const TEST_PER_TYPE: usize = 40;

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub task: TaskKind,
    pub train: Vec<AnnotatedExample>,
    pub dev: Vec<AnnotatedExample>,
    pub test: Vec<AnnotatedExample>,
}

impl Benchmark {
    /// Vocabulary, priors and label set all come from the training split,
    /// exactly as they would from a loaded dataset.
    pub fn train_corpus(&self) -> Corpus {
        Corpus::from_examples(self.train.clone())
    }
}

fn split_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

/// Label decided by 1-2 planted keywords of one class amid iid distractors.
pub fn classification(shots: usize, seed: u64) -> Benchmark {
    assert!(shots >= 1, "at least one example per class");
    let gen_split = |salt: u64, per_class: usize| -> Vec<AnnotatedExample> {
        let mut rng = split_rng(seed, salt);
        let mut out = Vec::new();
        for _ in 0..per_class {
            for (label, keywords) in CLASS_KEYWORDS {
                let n_kw = rng.gen_range(1..=2usize);
                let mut positions: Vec<usize> = (0..CLASSIFICATION_LEN).collect();
                // Partial shuffle: the first n_kw entries become keyword slots.
                for i in 0..n_kw {
                    let j = rng.gen_range(i..positions.len());
                    positions.swap(i, j);
                }
                let kw_positions = &positions[..n_kw];
                let mut tokens = Vec::with_capacity(CLASSIFICATION_LEN);
                let mut mask = vec![false; CLASSIFICATION_LEN];
                for i in 0..CLASSIFICATION_LEN {
                    if kw_positions.contains(&i) {
                        tokens.push(pick(&mut rng, keywords).to_string());
                        mask[i] = true;
                    } else {
                        tokens.push(pick(&mut rng, DISTRACTORS).to_string());
                    }
                }
                out.push(
                    AnnotatedExample::new(tokens, Output::Label(label.to_string()))
                        .with_mask(mask),
                );
            }
        }
        out
    };
    Benchmark {
        task: TaskKind::SingleClassification,
        train: gen_split(1, shots),
        dev: gen_split(2, DEV_PER_CLASS),
        test: gen_split(3, TEST_PER_CLASS),
    }
}

/// A trigger token decides the tag of the value span that follows it. The
/// same value tokens also show up as plain context, so the trigger is the
/// only reliable evidence — and it is the rationale. Context lures predict
/// the tag in training and anti-predict it at dev/test.
pub fn labeling(shots: usize, seed: u64) -> Benchmark {
    assert!(shots >= 1, "at least one example per slot type");
    let gen_split = |salt: u64, per_type: usize, own_lures: bool| -> Vec<AnnotatedExample> {
        let mut rng = split_rng(seed, salt);
        let mut out = Vec::new();
        for _ in 0..per_type {
            for (idx, (tag, triggers)) in SLOT_TRIGGERS.iter().enumerate() {
                let lure_pool =
                    SLOT_LURES[if own_lures { idx } else { (idx + 1) % SLOT_LURES.len() }].1;
                let lead = rng.gen_range(1..=3usize);
                let span = rng.gen_range(1..=2usize);
                let trail = rng.gen_range(1..=3usize);
                let mut tokens = Vec::new();
                let mut tags = Vec::new();
                let mut mask = Vec::new();
                let context = |rng: &mut ChaCha8Rng,
                               tokens: &mut Vec<String>,
                               tags: &mut Vec<String>,
                               mask: &mut Vec<bool>,
                               allow_value: bool| {
                    // Values drift into the lead so the tag cannot be read
                    // off the value token itself; the trail never carries
                    // them, so the span's right edge stays readable.
                    let tok = if rng.gen_bool(LURE_PROB) {
                        pick(rng, &lure_pool)
                    } else if allow_value && rng.gen_bool(0.25) {
                        pick(rng, SLOT_VALUES)
                    } else {
                        pick(rng, DISTRACTORS)
                    };
                    tokens.push(tok.to_string());
                    tags.push("O".to_string());
                    mask.push(false);
                };
                for _ in 0..lead {
                    context(&mut rng, &mut tokens, &mut tags, &mut mask, true);
                }
                tokens.push(pick(&mut rng, triggers).to_string());
                tags.push("O".to_string());
                mask.push(true);
                for _ in 0..span {
                    tokens.push(pick(&mut rng, SLOT_VALUES).to_string());
                    tags.push(tag.to_string());
                    mask.push(false);
                }
                for _ in 0..trail {
                    context(&mut rng, &mut tokens, &mut tags, &mut mask, false);
                }
                out.push(AnnotatedExample::new(tokens, Output::Tags(tags)).with_mask(mask));
            }
        }
        out
    };
    Benchmark {
        task: TaskKind::SequenceLabeling,
        train: gen_split(1, shots, true),
        dev: gen_split(2, DEV_PER_TYPE, false),
        test: gen_split(3, TEST_PER_TYPE, false),
    }
}

/// Premise and hypothesis each carry one marker token; the label says
/// whether the two markers come from the same family.
pub fn pair(shots: usize, seed: u64) -> Benchmark {
    assert!(shots >= 1, "at least one example per label");
    let gen_split = |salt: u64, per_label: usize| -> Vec<AnnotatedExample> {
        let mut rng = split_rng(seed, salt);
        let mut out = Vec::new();
        for _ in 0..per_label {
            for want_match in [true, false] {
                let fp = rng.gen_range(0..PAIR_FAMILIES.len());
                let fh = if want_match {
                    fp
                } else {
                    (fp + 1 + rng.gen_range(0..PAIR_FAMILIES.len() - 1)) % PAIR_FAMILIES.len()
                };
                let premise_len = 4;
                let hyp_len = 3;
                let mp = rng.gen_range(0..premise_len);
                let mh = rng.gen_range(0..hyp_len);
                let mut tokens = Vec::with_capacity(premise_len + hyp_len);
                let mut mask = vec![false; premise_len + hyp_len];
                for i in 0..premise_len {
                    if i == mp {
                        tokens.push(pick(&mut rng, &PAIR_FAMILIES[fp]).to_string());
                        mask[i] = true;
                    } else {
                        tokens.push(pick(&mut rng, DISTRACTORS).to_string());
                    }
                }
                for i in 0..hyp_len {
                    if i == mh {
                        tokens.push(pick(&mut rng, &PAIR_FAMILIES[fh]).to_string());
                        mask[premise_len + i] = true;
                    } else {
                        tokens.push(pick(&mut rng, DISTRACTORS).to_string());
                    }
                }
                let label = if want_match { "match" } else { "clash" };
                let ex = AnnotatedExample {
                    tokens,
                    output: Output::Label(label.to_string()),
                    rationale_mask: Some(mask),
                    pair_boundary: Some(premise_len),
                };
                out.push(ex);
            }
        }
        out
    };
    Benchmark {
        task: TaskKind::PairClassification,
        train: gen_split(1, shots),
        dev: gen_split(2, DEV_PER_CLASS),
        test: gen_split(3, TEST_PER_CLASS),
    }
}

/// Generator for a task kind; `shots` is train examples per class.
pub fn benchmark(task: TaskKind, shots: usize, seed: u64) -> Benchmark {
    match task {
        TaskKind::SingleClassification => classification(shots, seed),
        TaskKind::SequenceLabeling => labeling(shots, seed),
        TaskKind::PairClassification => pair(shots, seed),
    }
}
