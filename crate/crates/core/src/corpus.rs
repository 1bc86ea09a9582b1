//! Datasets, rationale annotation, and n-shot subsampling.
//!
//! Examples carry tokens, a gold output, an optional 0/1 rationale mask,
//! and an optional premise/hypothesis boundary for sentence-pair tasks.
//! Rationale masks come from one of three sources: a per-label keyword
//! dictionary, a set of regular expressions with `rationale*` capture
//! groups, or masks provided verbatim in the data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

/// Gold output: a single label for (pair) classification, or one tag per
/// token for sequence labeling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Output {
    Label(String),
    Tags(Vec<String>),
}

impl Output {
    pub fn as_label(&self) -> Option<&str> {
        match self {
            Output::Label(l) => Some(l),
            Output::Tags(_) => None,
        }
    }

    pub fn as_tags(&self) -> Option<&[String]> {
        match self {
            Output::Label(_) => None,
            Output::Tags(t) => Some(t),
        }
    }
}

/// One example: tokens, gold output, optional rationale mask, optional
/// pair boundary (tokens[..b] premise, tokens[b..] hypothesis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Record", into = "Record")]
pub struct AnnotatedExample {
    pub tokens: Vec<String>,
    pub output: Output,
    pub rationale_mask: Option<Vec<bool>>,
    pub pair_boundary: Option<usize>,
}

impl AnnotatedExample {
    pub fn new(tokens: Vec<String>, output: Output) -> Self {
        Self { tokens, output, rationale_mask: None, pair_boundary: None }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.rationale_mask = Some(mask);
        self
    }

    /// Indices of rationale tokens (empty when the example is unannotated).
    pub fn rationale_positions(&self) -> Vec<usize> {
        match &self.rationale_mask {
            Some(m) => m.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect(),
            None => Vec::new(),
        }
    }

    pub fn non_rationale_positions(&self) -> Vec<usize> {
        match &self.rationale_mask {
            Some(m) => m.iter().enumerate().filter(|(_, &v)| !v).map(|(i, _)| i).collect(),
            None => (0..self.tokens.len()).collect(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.tokens.is_empty() {
            return Err("example has no tokens".into());
        }
        if let Some(m) = &self.rationale_mask {
            if m.len() != self.tokens.len() {
                return Err(format!(
                    "rationale_mask length {} != token count {}",
                    m.len(),
                    self.tokens.len()
                ));
            }
        }
        if let Output::Tags(t) = &self.output {
            if t.len() != self.tokens.len() {
                return Err(format!(
                    "tag sequence length {} != token count {}",
                    t.len(),
                    self.tokens.len()
                ));
            }
        }
        if let Some(b) = self.pair_boundary {
            if b == 0 || b >= self.tokens.len() {
                return Err(format!(
                    "pair_boundary {} must split the {} tokens into two non-empty parts",
                    b,
                    self.tokens.len()
                ));
            }
        }
        Ok(())
    }
}

/// Line format: masks travel as 0/1 integers.
#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<String>,
    output: Output,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale_mask: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pair_boundary: Option<usize>,
}

impl TryFrom<Record> for AnnotatedExample {
    type Error = String;

    fn try_from(r: Record) -> Result<Self, String> {
        let mask = match r.rationale_mask {
            None => None,
            Some(bits) => {
                let mut m = Vec::with_capacity(bits.len());
                for (i, b) in bits.iter().enumerate() {
                    match b {
                        0 => m.push(false),
                        1 => m.push(true),
                        other => {
                            return Err(format!("rationale_mask[{i}] = {other}, expected 0 or 1"))
                        }
                    }
                }
                Some(m)
            }
        };
        let ex = AnnotatedExample {
            tokens: r.tokens,
            output: r.output,
            rationale_mask: mask,
            pair_boundary: r.pair_boundary,
        };
        ex.validate()?;
        Ok(ex)
    }
}

impl From<AnnotatedExample> for Record {
    fn from(e: AnnotatedExample) -> Record {
        Record {
            tokens: e.tokens,
            output: e.output,
            rationale_mask: e
                .rationale_mask
                .map(|m| m.into_iter().map(|b| if b { 1 } else { 0 }).collect()),
            pair_boundary: e.pair_boundary,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("label {0:?} is not in the keyword map")]
    UnknownLabel(String),
    #[error("keyword annotation requires a classification label, got a tag sequence")]
    KeywordNeedsLabel,
    #[error("provided-mask annotation requires the example to carry a mask")]
    MissingProvidedMask,
    #[error("provided mask length {mask} != token count {tokens}")]
    ProvidedMaskLength { mask: usize, tokens: usize },
    #[error("pattern {index} does not compile: {msg}")]
    BadPattern { index: usize, msg: String },
    #[error("pattern {index} has no capture group named rationale*")]
    NoRationaleGroup { index: usize },
    #[error("rationale source file must contain exactly one of \"keywords\" or \"patterns\"")]
    BadSourceFile,
    #[error("cannot sample {needed} examples for label {label:?}: only {available} available")]
    Sampling { label: String, needed: usize, available: usize },
    #[error("annotation requires a non-empty token sequence")]
    EmptyTokens,
}

/// Where rationale masks come from.
pub enum RationaleSource {
    /// label -> lowercased keyword set; a token is a rationale iff it is a
    /// keyword of the example's gold label (case-insensitive).
    Keywords(BTreeMap<String, BTreeSet<String>>),
    /// Compiled patterns; a token is a rationale iff some `rationale*`
    /// capture group of some pattern fully covers it.
    Patterns(Vec<Regex>),
    /// Masks already present in the data are taken verbatim.
    Provided,
}

impl fmt::Debug for RationaleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RationaleSource::Keywords(m) => write!(f, "Keywords({} labels)", m.len()),
            RationaleSource::Patterns(p) => write!(f, "Patterns({} regexes)", p.len()),
            RationaleSource::Provided => write!(f, "Provided"),
        }
    }
}

#[derive(Deserialize)]
struct SourceFile {
    #[serde(default)]
    keywords: Option<BTreeMap<String, Vec<String>>>,
    #[serde(default)]
    patterns: Option<Vec<String>>,
}

impl RationaleSource {
    pub fn from_keywords(map: BTreeMap<String, Vec<String>>) -> Self {
        let lowered = map
            .into_iter()
            .map(|(label, words)| {
                (label, words.into_iter().map(|w| w.to_lowercase()).collect())
            })
            .collect();
        RationaleSource::Keywords(lowered)
    }

    pub fn from_patterns(patterns: &[String]) -> Result<Self, CorpusError> {
        let mut compiled = Vec::with_capacity(patterns.len());
        for (index, p) in patterns.iter().enumerate() {
            let re = Regex::new(p)
                .map_err(|e| CorpusError::BadPattern { index, msg: e.to_string() })?;
            let has_group = re
                .capture_names()
                .flatten()
                .any(|name| name.starts_with("rationale"));
            if !has_group {
                return Err(CorpusError::NoRationaleGroup { index });
            }
            compiled.push(re);
        }
        Ok(RationaleSource::Patterns(compiled))
    }

    /// Parse a source file: `{"keywords": {label: [token, ...]}}` or
    /// `{"patterns": [regex, ...]}`.
    pub fn from_json_str(s: &str) -> Result<Self, CorpusError> {
        let file: SourceFile =
            serde_json::from_str(s).map_err(|_| CorpusError::BadSourceFile)?;
        match (file.keywords, file.patterns) {
            (Some(k), None) => Ok(Self::from_keywords(k)),
            (None, Some(p)) => Self::from_patterns(&p),
            _ => Err(CorpusError::BadSourceFile),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    /// Compute the rationale mask for one example. `provided` is the mask
    /// already on the example, consumed only by the `Provided` kind.
    pub fn mask(
        &self,
        tokens: &[String],
        output: &Output,
        provided: Option<&[bool]>,
    ) -> Result<Vec<bool>, CorpusError> {
        if tokens.is_empty() {
            return Err(CorpusError::EmptyTokens);
        }
        match self {
            RationaleSource::Keywords(map) => {
                let label = output.as_label().ok_or(CorpusError::KeywordNeedsLabel)?;
                let set = map
                    .get(label)
                    .ok_or_else(|| CorpusError::UnknownLabel(label.to_string()))?;
                Ok(tokens.iter().map(|t| set.contains(&t.to_lowercase())).collect())
            }
            RationaleSource::Patterns(patterns) => Ok(pattern_mask(patterns, tokens)),
            RationaleSource::Provided => {
                let mask = provided.ok_or(CorpusError::MissingProvidedMask)?;
                if mask.len() != tokens.len() {
                    return Err(CorpusError::ProvidedMaskLength {
                        mask: mask.len(),
                        tokens: tokens.len(),
                    });
                }
                Ok(mask.to_vec())
            }
        }
    }
}

/// Union over patterns: a token is marked iff at least one `rationale*`
/// group of at least one match fully covers the token's span in the
/// space-joined sentence.
fn pattern_mask(patterns: &[Regex], tokens: &[String]) -> Vec<bool> {
    let joined = tokens.join(" ");
    // Byte span of each token within the joined sentence.
    let mut spans = Vec::with_capacity(tokens.len());
    let mut at = 0;
    for t in tokens {
        spans.push((at, at + t.len()));
        at += t.len() + 1;
    }
    let mut mask = vec![false; tokens.len()];
    for re in patterns {
        let names: Vec<&str> = re
            .capture_names()
            .flatten()
            .filter(|n| n.starts_with("rationale"))
            .collect();
        for caps in re.captures_iter(&joined) {
            for name in &names {
                if let Some(m) = caps.name(name) {
                    for (i, &(s, e)) in spans.iter().enumerate() {
                        if m.start() <= s && e <= m.end() {
                            mask[i] = true;
                        }
                    }
                }
            }
        }
    }
    mask
}

/// Re-annotate one example from a source. Provided-kind sources pass the
/// existing mask through, so annotation is idempotent for every kind.
pub fn annotate(
    example: &AnnotatedExample,
    source: &RationaleSource,
) -> Result<AnnotatedExample, CorpusError> {
    let mask = source.mask(
        &example.tokens,
        &example.output,
        example.rationale_mask.as_deref(),
    )?;
    Ok(AnnotatedExample {
        tokens: example.tokens.clone(),
        output: example.output.clone(),
        rationale_mask: Some(mask),
        pair_boundary: example.pair_boundary,
    })
}

/// Whitespace-plus-punctuation tokenizer: whitespace separates tokens, and
/// leading/trailing ASCII punctuation splits off as its own token. Interior
/// punctuation (hyphens, apostrophes) stays inside the token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        while lo < hi && chars[lo].is_ascii_punctuation() {
            lo += 1;
        }
        while hi > lo && chars[hi - 1].is_ascii_punctuation() {
            hi -= 1;
        }
        for &c in &chars[..lo] {
            out.push(c.to_string());
        }
        if lo < hi {
            out.push(chars[lo..hi].iter().collect());
        }
        for &c in &chars[hi..] {
            out.push(c.to_string());
        }
    }
    out
}

/// A dataset plus the token statistics the replacement strategies need.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub examples: Vec<AnnotatedExample>,
    /// token -> dense id, assigned in first-occurrence order.
    pub vocabulary: BTreeMap<String, usize>,
    pub token_counts: BTreeMap<String, u64>,
    /// Total token count N.
    pub corpus_size: u64,
}

impl Corpus {
    pub fn from_examples(examples: Vec<AnnotatedExample>) -> Self {
        let mut vocabulary = BTreeMap::new();
        let mut token_counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut corpus_size = 0;
        for ex in &examples {
            for t in &ex.tokens {
                let next_id = vocabulary.len();
                vocabulary.entry(t.clone()).or_insert(next_id);
                *token_counts.entry(t.clone()).or_insert(0) += 1;
                corpus_size += 1;
            }
        }
        Corpus { examples, vocabulary, token_counts, corpus_size }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Sorted distinct classification labels.
    pub fn labels(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for ex in &self.examples {
            if let Output::Label(l) = &ex.output {
                set.insert(l.clone());
            }
        }
        set.into_iter().collect()
    }

    /// Sorted distinct tags over all labeling examples.
    pub fn tags(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for ex in &self.examples {
            if let Output::Tags(tags) = &ex.output {
                for t in tags {
                    set.insert(t.clone());
                }
            }
        }
        set.into_iter().collect()
    }

    /// Prior probability count(u)/N of a token, zero for unknown tokens.
    pub fn prior(&self, token: &str) -> f64 {
        if self.corpus_size == 0 {
            return 0.0;
        }
        *self.token_counts.get(token).unwrap_or(&0) as f64 / self.corpus_size as f64
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: AnnotatedExample =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        examples.push(ex);
    }
    Ok(Corpus::from_examples(examples))
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let as_io = |source: std::io::Error| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(as_io)?);
    for ex in &corpus.examples {
        let line = serde_json::to_string(ex).expect("examples always serialize");
        file.write_all(line.as_bytes()).map_err(as_io)?;
        file.write_all(b"\n").map_err(as_io)?;
    }
    file.flush().map_err(as_io)
}

/// n-shot subsample. Classification: exactly `n` examples per class, chosen
/// by a seeded shuffle. Labeling: a greedy multicover in which every tag
/// other than `"O"` occurs at least `n` times, built rarest-label-first with
/// ties broken by example index (deterministic, so the seed is unused).
pub fn sample_n_shot(corpus: &Corpus, n: usize, seed: u64) -> Result<Corpus, CorpusError> {
    assert!(n >= 1, "n-shot requires n >= 1");
    let is_labeling = corpus.examples.iter().any(|e| matches!(e.output, Output::Tags(_)));
    let selected = if is_labeling {
        sample_labeling(corpus, n)?
    } else {
        sample_classification(corpus, n, seed)?
    };
    let examples = selected.into_iter().map(|i| corpus.examples[i].clone()).collect();
    Ok(Corpus::from_examples(examples))
}

fn sample_classification(corpus: &Corpus, n: usize, seed: u64) -> Result<Vec<usize>, CorpusError> {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in corpus.examples.iter().enumerate() {
        if let Output::Label(l) = &ex.output {
            by_label.entry(l).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::new();
    for (label, mut ids) in by_label {
        if ids.len() < n {
            return Err(CorpusError::Sampling {
                label: label.to_string(),
                needed: n,
                available: ids.len(),
            });
        }
        ids.shuffle(&mut rng);
        selected.extend_from_slice(&ids[..n]);
    }
    selected.sort_unstable();
    Ok(selected)
}

fn sample_labeling(corpus: &Corpus, n: usize) -> Result<Vec<usize>, CorpusError> {
    // Per-example tag occurrence counts, "O" excluded.
    let counts_of = |ex: &AnnotatedExample| -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        if let Output::Tags(tags) = &ex.output {
            for t in tags {
                if t != "O" {
                    *m.entry(t.clone()).or_insert(0) += 1;
                }
            }
        }
        m
    };
    let per_example: Vec<BTreeMap<String, usize>> =
        corpus.examples.iter().map(counts_of).collect();

    let mut total: BTreeMap<String, usize> = BTreeMap::new();
    for c in &per_example {
        for (t, k) in c {
            *total.entry(t.clone()).or_insert(0) += k;
        }
    }
    let mut need: BTreeMap<String, usize> = total.keys().map(|t| (t.clone(), n)).collect();

    let mut selected: Vec<usize> = Vec::new();
    let mut used = vec![false; corpus.examples.len()];
    while let Some(rarest) = need
        .iter()
        .filter(|(_, &k)| k > 0)
        .min_by_key(|(t, _)| (total[*t], (*t).clone()))
        .map(|(t, _)| t.clone())
    {
        // Candidate containing the rarest still-needed tag that covers the
        // most outstanding need; ties go to the smallest example index.
        let mut best: Option<(usize, usize)> = None; // (gain, index)
        for (i, c) in per_example.iter().enumerate() {
            if used[i] || !c.contains_key(&rarest) {
                continue;
            }
            let gain: usize =
                c.iter().map(|(t, k)| (*k).min(*need.get(t).unwrap_or(&0))).sum();
            let better = match best {
                None => true,
                Some((bg, bi)) => gain > bg || (gain == bg && i < bi),
            };
            if better {
                best = Some((gain, i));
            }
        }
        let (_, pick) = best.ok_or_else(|| {
            let have: usize = selected
                .iter()
                .map(|&i| per_example[i].get(&rarest).copied().unwrap_or(0))
                .sum();
            CorpusError::Sampling { label: rarest.clone(), needed: n, available: have }
        })?;
        used[pick] = true;
        selected.push(pick);
        for (t, k) in &per_example[pick] {
            if let Some(r) = need.get_mut(t) {
                *r = r.saturating_sub(*k);
            }
        }
    }
    selected.sort_unstable();
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn fixture(name: &str) -> String {
        let path = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
        std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
    }

    fn marked(tokens: &[String], mask: &[bool]) -> Vec<String> {
        tokens
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t.clone())
            .collect()
    }

    #[test]
    fn regex_fixture_marks_rate_out_of() {
        let source = RationaleSource::from_json_str(&fixture("sf_patterns.json")).unwrap();
        let tokens = toks("rate the current essay 2 out of 6");
        let tags = toks("O O O B-object_type O B-rating_unit I-rating_unit O");
        let mask = source.mask(&tokens, &Output::Tags(tags), None).unwrap();
        assert_eq!(marked(&tokens, &mask), toks("rate out of"));
    }

    #[test]
    fn keyword_fixture_marks_add_playlist() {
        let source = RationaleSource::from_json_str(&fixture("ic_keywords.json")).unwrap();
        let tokens = toks("add step to me to the 50 clásicos playlist");
        let mask = source
            .mask(&tokens, &Output::Label("AddToPlaylist".into()), None)
            .unwrap();
        assert_eq!(marked(&tokens, &mask), toks("add playlist"));
    }

    #[test]
    fn keyword_matching_is_case_insensitive_and_whole_token() {
        let mut map = BTreeMap::new();
        map.insert("PlayMusic".to_string(), vec!["Play".to_string(), "song".to_string()]);
        let source = RationaleSource::from_keywords(map);
        let tokens = toks("PLAY that Song playlist songs");
        let mask = source
            .mask(&tokens, &Output::Label("PlayMusic".into()), None)
            .unwrap();
        // "playlist" and "songs" contain keywords as substrings but are not
        // whole-token matches.
        assert_eq!(mask, vec![true, false, true, false, false]);
    }

    #[test]
    fn empty_keyword_set_gives_all_zero_mask() {
        let mut map = BTreeMap::new();
        map.insert("Empty".to_string(), Vec::new());
        let source = RationaleSource::from_keywords(map);
        let tokens = toks("anything at all");
        let mask = source.mask(&tokens, &Output::Label("Empty".into()), None).unwrap();
        assert!(mask.iter().all(|&b| !b));
    }

    #[test]
    fn unknown_label_is_an_error() {
        let source = RationaleSource::from_keywords(BTreeMap::new());
        let err = source
            .mask(&toks("a b"), &Output::Label("Nope".into()), None)
            .unwrap_err();
        assert!(matches!(err, CorpusError::UnknownLabel(l) if l == "Nope"));
    }

    #[test]
    fn provided_mask_passes_through_and_checks_length() {
        let source = RationaleSource::Provided;
        let tokens = toks("a b c");
        let mask = vec![true, false, true];
        let got = source
            .mask(&tokens, &Output::Label("x".into()), Some(&mask))
            .unwrap();
        assert_eq!(got, mask);
        let err = source
            .mask(&tokens, &Output::Label("x".into()), Some(&[true]))
            .unwrap_err();
        assert!(matches!(err, CorpusError::ProvidedMaskLength { .. }));
    }

    #[test]
    fn pattern_group_must_cover_whole_token() {
        // "rate" occurs inside "pirate": the pattern fires, but only fully
        // covered tokens are marked, so "pirate" stays unmarked while the
        // "out of" groups still mark their tokens.
        let source = RationaleSource::from_patterns(&[
            r".*(?P<rationale>rate|give) .*(?P<rationale1>out of).*".to_string(),
        ])
        .unwrap();
        let tokens = toks("the pirate sails out of port");
        let mask = source
            .mask(&tokens, &Output::Tags(vec!["O".into(); 6]), None)
            .unwrap();
        assert_eq!(marked(&tokens, &mask), toks("out of"));
    }

    #[test]
    fn pattern_without_rationale_group_is_rejected() {
        let err =
            RationaleSource::from_patterns(&[r".*(?P<other>x).*".to_string()]).unwrap_err();
        assert!(matches!(err, CorpusError::NoRationaleGroup { index: 0 }));
        let err = RationaleSource::from_patterns(&["(unclosed".to_string()]).unwrap_err();
        assert!(matches!(err, CorpusError::BadPattern { index: 0, .. }));
    }

    #[test]
    fn annotation_is_idempotent() {
        let source = RationaleSource::from_json_str(&fixture("sf_patterns.json")).unwrap();
        let ex = AnnotatedExample::new(
            toks("rate the current essay 2 out of 6"),
            Output::Tags(vec!["O".into(); 8]),
        );
        let once = annotate(&ex, &source).unwrap();
        let twice = annotate(&once, &source).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn corpus_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let examples = vec![
            AnnotatedExample::new(toks("book a table"), Output::Label("BookRestaurant".into()))
                .with_mask(vec![true, false, false]),
            AnnotatedExample::new(
                toks("play some jazz"),
                Output::Tags(vec!["O".into(), "O".into(), "B-genre".into()]),
            ),
            AnnotatedExample {
                tokens: toks("a man sleeps someone is asleep"),
                output: Output::Label("entailment".into()),
                rationale_mask: None,
                pair_boundary: Some(3),
            },
        ];
        let corpus = Corpus::from_examples(examples);
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(corpus, loaded);
        assert_eq!(loaded.corpus_size, 12);
        assert_eq!(loaded.vocabulary.len(), 11); // "a" repeats
    }

    #[test]
    fn malformed_record_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"tokens\":[\"a\"],\"output\":\"x\"}\n{\"tokens\":[\"a\",\"b\"],\"output\":\"x\",\"rationale_mask\":[1]}\n",
        )
        .unwrap();
        let err = load_corpus(&path).unwrap_err();
        match err {
            CorpusError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn mask_with_values_outside_01_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"tokens\":[\"a\"],\"output\":\"x\",\"rationale_mask\":[2]}\n")
            .unwrap();
        assert!(matches!(load_corpus(&path).unwrap_err(), CorpusError::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_file_loads_as_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let corpus = load_corpus(&path).unwrap();
        assert!(corpus.is_empty());
        assert!(corpus.vocabulary.is_empty());
        assert_eq!(corpus.corpus_size, 0);
    }

    fn three_class_corpus() -> Corpus {
        let mut examples = Vec::new();
        for label in ["alpha", "beta", "gamma"] {
            for i in 0..10 {
                examples.push(AnnotatedExample::new(
                    toks(&format!("{label} example {i}")),
                    Output::Label(label.to_string()),
                ));
            }
        }
        Corpus::from_examples(examples)
    }

    #[test]
    fn one_shot_takes_one_example_per_class() {
        let corpus = three_class_corpus();
        let sub = sample_n_shot(&corpus, 1, 7).unwrap();
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.labels(), vec!["alpha", "beta", "gamma"]);
        let again = sample_n_shot(&corpus, 1, 7).unwrap();
        assert_eq!(sub, again);
        let other_seed = sample_n_shot(&corpus, 1, 8).unwrap();
        assert_eq!(other_seed.len(), 3);
    }

    #[test]
    fn n_shot_counts_are_exact_for_classification() {
        let corpus = three_class_corpus();
        let sub = sample_n_shot(&corpus, 4, 55).unwrap();
        assert_eq!(sub.len(), 12);
        for label in ["alpha", "beta", "gamma"] {
            let count = sub
                .examples
                .iter()
                .filter(|e| e.output.as_label() == Some(label))
                .count();
            assert_eq!(count, 4, "label {label}");
        }
    }

    #[test]
    fn insufficient_class_examples_name_the_label() {
        let corpus = three_class_corpus();
        let err = sample_n_shot(&corpus, 11, 0).unwrap_err();
        assert!(matches!(err, CorpusError::Sampling { label, .. } if label == "alpha"));
    }

    #[test]
    fn labeling_n_shot_covers_every_tag() {
        let mk = |tokens: &str, tags: &[&str]| {
            AnnotatedExample::new(
                toks(tokens),
                Output::Tags(tags.iter().map(|s| s.to_string()).collect()),
            )
        };
        let corpus = Corpus::from_examples(vec![
            mk("a b c", &["O", "B-x", "O"]),
            mk("d e f", &["B-y", "O", "B-x"]),
            mk("g h i", &["B-y", "B-z", "O"]),
            mk("j k l", &["O", "O", "B-z"]),
            mk("m n o", &["B-x", "B-y", "B-z"]),
        ]);
        let sub = sample_n_shot(&corpus, 2, 0).unwrap();
        for tag in ["B-x", "B-y", "B-z"] {
            let count: usize = sub
                .examples
                .iter()
                .filter_map(|e| e.output.as_tags())
                .map(|tags| tags.iter().filter(|t| *t == tag).count())
                .sum();
            assert!(count >= 2, "tag {tag} appears {count} < 2 times");
        }
        // Determinism across calls and seeds.
        assert_eq!(sub, sample_n_shot(&corpus, 2, 99).unwrap());
    }

    #[test]
    fn labeling_n_shot_errors_on_infeasible_tag() {
        let corpus = Corpus::from_examples(vec![AnnotatedExample::new(
            toks("a b"),
            Output::Tags(vec!["B-rare".into(), "O".into()]),
        )]);
        let err = sample_n_shot(&corpus, 2, 0).unwrap_err();
        assert!(matches!(err, CorpusError::Sampling { label, .. } if label == "B-rare"));
    }

    #[test]
    fn tokenizer_splits_whitespace_and_edge_punctuation() {
        assert_eq!(tokenize("rate it, now!"), toks("rate it , now !"));
        assert_eq!(tokenize("top-rated (really)"), vec!["top-rated", "(", "really", ")"]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
    }

    #[test]
    fn pair_boundary_is_validated() {
        let bad = "{\"tokens\":[\"a\",\"b\"],\"output\":\"x\",\"pair_boundary\":2}";
        assert!(serde_json::from_str::<AnnotatedExample>(bad).is_err());
        let good = "{\"tokens\":[\"a\",\"b\"],\"output\":\"x\",\"pair_boundary\":1}";
        assert!(serde_json::from_str::<AnnotatedExample>(good).is_ok());
    }
}
