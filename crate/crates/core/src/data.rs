//! Corpus ingestion and vocabulary handling.
//!
//! Two on-disk formats:
//! - tagging: CoNLL-style TSV, one `token<TAB>label` per line, blank line
//!   between sequences;
//! - classification: one `label<TAB>space-tokenized text` per line.
//!
//! Tokens are taken as-is (no lowercasing unless [`ReadOptions::lowercase`]
//! is set). The vocabulary is built on the training split only; everything
//! else maps out-of-vocabulary tokens to UNK.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Tagging,
    Classification,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Tagging => "tagging",
            Task::Classification => "classification",
        })
    }
}

/// One example: tokens plus per-token labels (tagging) or a single label
/// (classification).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub task: Task,
    pub sequences: Vec<Sequence>,
}

impl Corpus {
    pub fn new(task: Task) -> Self {
        Corpus { task, sequences: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (i, s) in self.sequences.iter().enumerate() {
            if s.tokens.is_empty() {
                return Err(DataError::Invalid(format!("sequence {i} is empty")));
            }
            match self.task {
                Task::Tagging if s.tokens.len() != s.labels.len() => {
                    return Err(DataError::Invalid(format!(
                        "sequence {i}: {} tokens but {} labels",
                        s.tokens.len(),
                        s.labels.len()
                    )));
                }
                Task::Classification if s.labels.len() != 1 => {
                    return Err(DataError::Invalid(format!(
                        "sequence {i}: classification needs exactly one label"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Drop sequences longer than `max_len` tokens; returns how many were
    /// removed.
    pub fn retain_max_len(&mut self, max_len: usize) -> usize {
        let before = self.sequences.len();
        self.sequences.retain(|s| s.tokens.len() <= max_len);
        before - self.sequences.len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    pub lowercase: bool,
}

/// Parse CoNLL-style TSV tagging data.
pub fn read_conll(path: &Path) -> Result<Corpus, DataError> {
    read_conll_with(path, ReadOptions::default())
}

pub fn read_conll_with(path: &Path, opts: ReadOptions) -> Result<Corpus, DataError> {
    let text = fs::read_to_string(path)?;
    let mut corpus = Corpus::new(Task::Tagging);
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                corpus.sequences.push(Sequence {
                    tokens: std::mem::take(&mut tokens),
                    labels: std::mem::take(&mut labels),
                });
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 || cols[0].is_empty() || cols[1].is_empty() {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("expected `token<TAB>label`, got {} column(s)", cols.len()),
            });
        }
        tokens.push(apply_case(cols[0], opts));
        labels.push(cols[1].to_string());
    }
    if !tokens.is_empty() {
        corpus.sequences.push(Sequence { tokens, labels });
    }
    Ok(corpus)
}

/// Write tagging data back out in the same TSV format.
pub fn write_conll(path: &Path, corpus: &Corpus) -> Result<(), DataError> {
    if corpus.task != Task::Tagging {
        return Err(DataError::Invalid("write_conll expects a tagging corpus".into()));
    }
    let mut out = String::new();
    for (i, s) in corpus.sequences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (t, l) in s.tokens.iter().zip(&s.labels) {
            out.push_str(t);
            out.push('\t');
            out.push_str(l);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse classification data: `label<TAB>space-tokenized text` per line.
pub fn read_classification(path: &Path) -> Result<Corpus, DataError> {
    read_classification_with(path, ReadOptions::default())
}

pub fn read_classification_with(path: &Path, opts: ReadOptions) -> Result<Corpus, DataError> {
    let text = fs::read_to_string(path)?;
    let mut corpus = Corpus::new(Task::Classification);
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((label, body)) = line.split_once('\t') else {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: "expected `label<TAB>text`".into(),
            });
        };
        let tokens: Vec<String> =
            body.split_whitespace().map(|t| apply_case(t, opts)).collect();
        if label.is_empty() || tokens.is_empty() {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: "empty label or text".into(),
            });
        }
        corpus.sequences.push(Sequence { tokens, labels: vec![label.to_string()] });
    }
    Ok(corpus)
}

fn apply_case(tok: &str, opts: ReadOptions) -> String {
    if opts.lowercase {
        tok.to_lowercase()
    } else {
        tok.to_string()
    }
}

/// Deterministic shuffle-and-cut split with largest-remainder sizing, so the
/// three parts are disjoint, exhaustive and reproducible per seed.
pub fn split_random(corpus: &Corpus, fractions: (f64, f64, f64), seed: u64) -> (Corpus, Corpus, Corpus) {
    let n = corpus.sequences.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);

    let fr = [fractions.0, fractions.1, fractions.2];
    let exact: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: usize = n - sizes.iter().sum::<usize>();
    // Largest fractional remainder first; ties go to the earlier part
    // (train), so a single sequence lands in train.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .partial_cmp(&(exact[a] - exact[a].floor()))
            .unwrap()
            .then(a.cmp(&b))
    });
    for &part in &order {
        if rest == 0 {
            break;
        }
        sizes[part] += 1;
        rest -= 1;
    }

    let mut parts = vec![Corpus::new(corpus.task), Corpus::new(corpus.task), Corpus::new(corpus.task)];
    let mut cursor = 0;
    for (p, &size) in sizes.iter().enumerate() {
        for &i in &idx[cursor..cursor + size] {
            parts[p].sequences.push(corpus.sequences[i].clone());
        }
        cursor += size;
    }
    let test = parts.pop().unwrap();
    let valid = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    (train, valid, test)
}

/// Token-to-id map with reserved PAD and UNK entries. Ids are dense from 0;
/// once frozen the map never grows and unknown tokens resolve to UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    tokens: Vec<String>,
    frozen: bool,
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab { token_to_id: HashMap::new(), tokens: Vec::new(), frozen: false };
        v.intern(PAD_TOKEN);
        v.intern(UNK_TOKEN);
        v
    }

    /// Rebuild from an ordered token list (checkpoint loading). The first
    /// two entries must be the reserved PAD and UNK tokens.
    pub fn from_ordered_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(DataError::Invalid(
                "vocab list must start with the reserved <pad>, <unk> entries".into(),
            ));
        }
        let mut token_to_id = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(DataError::Invalid(format!("duplicate vocab entry `{t}`")));
            }
        }
        Ok(Vocab { token_to_id, tokens, frozen: true })
    }

    fn intern(&mut self, tok: &str) -> u32 {
        if let Some(&id) = self.token_to_id.get(tok) {
            return id;
        }
        assert!(!self.frozen, "frozen vocab never grows");
        let id = self.tokens.len() as u32;
        self.tokens.push(tok.to_string());
        self.token_to_id.insert(tok.to_string(), id);
        id
    }

    /// Build a frozen vocabulary from the training split.
    pub fn build(train: &Corpus) -> Self {
        let mut v = Vocab::new();
        for s in &train.sequences {
            for t in &s.tokens {
                v.intern(t);
            }
        }
        v.frozen = true;
        v
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // PAD and UNK always present
    }

    pub fn id(&self, tok: &str) -> u32 {
        self.token_to_id.get(tok).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn ordered_tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

/// Label-name-to-id map (dense from 0, no reserved entries).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocab {
    label_to_id: HashMap<String, u32>,
    labels: Vec<String>,
}

impl LabelVocab {
    /// Collect every label in the corpus, in first-seen order.
    pub fn build(corpus: &Corpus) -> Self {
        let mut v = LabelVocab { label_to_id: HashMap::new(), labels: Vec::new() };
        for s in &corpus.sequences {
            for l in &s.labels {
                v.intern(l);
            }
        }
        v
    }

    pub fn from_ordered_labels(labels: Vec<String>) -> Result<Self, DataError> {
        let mut label_to_id = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if label_to_id.insert(l.clone(), i as u32).is_some() {
                return Err(DataError::Invalid(format!("duplicate label `{l}`")));
            }
        }
        if labels.is_empty() {
            return Err(DataError::Invalid("empty label set".into()));
        }
        Ok(LabelVocab { label_to_id, labels })
    }

    fn intern(&mut self, l: &str) -> u32 {
        if let Some(&id) = self.label_to_id.get(l) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(l.to_string());
        self.label_to_id.insert(l.to_string(), id);
        id
    }

    pub fn id(&self, l: &str) -> Option<u32> {
        self.label_to_id.get(l).copied()
    }

    pub fn label(&self, id: u32) -> Option<&str> {
        self.labels.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ordered_labels(&self) -> &[String] {
        &self.labels
    }
}

/// A corpus encoded to ids, ready for training or deployment drivers.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub task: Task,
    pub sequences: Vec<EncodedSequence>,
}

#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub tokens: Vec<u32>,
    /// Per-token label ids (tagging) or a single id (classification).
    pub labels: Vec<u32>,
}

/// Encode with the given vocabularies; labels unknown to `labels` are an
/// error (label sets are closed).
pub fn encode_corpus(
    corpus: &Corpus,
    vocab: &Vocab,
    labels: &LabelVocab,
) -> Result<EncodedCorpus, DataError> {
    let mut out = Vec::with_capacity(corpus.sequences.len());
    for (i, s) in corpus.sequences.iter().enumerate() {
        let mut lab = Vec::with_capacity(s.labels.len());
        for l in &s.labels {
            lab.push(labels.id(l).ok_or_else(|| {
                DataError::Invalid(format!("sequence {i}: label `{l}` not in label set"))
            })?);
        }
        out.push(EncodedSequence { tokens: vocab.encode(&s.tokens), labels: lab });
    }
    Ok(EncodedCorpus { task: corpus.task, sequences: out })
}
