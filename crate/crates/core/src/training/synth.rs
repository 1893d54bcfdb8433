//! Synthetic task generators standing in for licensed corpora. Each task has
//! a documented label function:
//!
//! - copy tagging: the label of a token is its own class, `class(w_i) = i mod 3`.
//! - bracket depth: over bracket strings, the label after consuming a token
//!   is the current nesting depth mod K (K = 3); depth increments on `(`
//!   before labeling, decrements on `)` before labeling. Solving it requires
//!   carrying unbounded-ish state across the whole prefix.
//! - acausal tagging: the label of token t is the class of token t+1 (the
//!   last token is labeled with its own class). Unsolvable for a strictly
//!   causal model, solvable with one token of delay or with right context.
//! - majority classification: the sequence label is the most frequent token
//!   class (ties to the smallest class id).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Corpus, Sequence, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTask {
    CopyTag,
    BracketDepth,
    AcausalTag,
    MajorityClass,
}

pub const N_TOKEN_CLASSES: usize = 3;
const VOCAB_WORDS: usize = 12;
const BRACKET_DEPTH_MOD: usize = 3;
const MAX_DEPTH: usize = 4;

impl SynthTask {
    pub const ALL: [SynthTask; 4] = [
        SynthTask::CopyTag,
        SynthTask::BracketDepth,
        SynthTask::AcausalTag,
        SynthTask::MajorityClass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthTask::CopyTag => "synth-copy",
            SynthTask::BracketDepth => "synth-bracket",
            SynthTask::AcausalTag => "synth-acausal",
            SynthTask::MajorityClass => "synth-majority",
        }
    }

    pub fn task(self) -> Task {
        match self {
            SynthTask::MajorityClass => Task::Classification,
            _ => Task::Tagging,
        }
    }
}

impl std::str::FromStr for SynthTask {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SynthTask::ALL
            .iter()
            .find(|t| t.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = SynthTask::ALL.iter().map(|t| t.name()).collect();
                format!("unknown synthetic task `{s}` (expected one of: {})", names.join(", "))
            })
    }
}

fn word(idx: usize) -> String {
    format!("w{idx}")
}

fn class_of(idx: usize) -> usize {
    idx % N_TOKEN_CLASSES
}

fn class_label(c: usize) -> String {
    format!("c{c}")
}

/// Depth labels for a bracket string: depth after consuming each token,
/// mod K. "(()" labels as [1, 2, 1].
pub fn bracket_depths(tokens: &[&str]) -> Vec<usize> {
    let mut depth = 0usize;
    tokens
        .iter()
        .map(|t| {
            match *t {
                "(" => depth += 1,
                ")" => depth = depth.saturating_sub(1),
                other => panic!("bracket task token {other}"),
            }
            depth % BRACKET_DEPTH_MOD
        })
        .collect()
}

/// Deterministic dataset of `n` sequences for the given task.
pub fn synth_generate(kind: SynthTask, n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Corpus::new(kind.task());
    for _ in 0..n {
        corpus.sequences.push(match kind {
            SynthTask::CopyTag => gen_copy(&mut rng),
            SynthTask::BracketDepth => gen_bracket(&mut rng),
            SynthTask::AcausalTag => gen_acausal(&mut rng),
            SynthTask::MajorityClass => gen_majority(&mut rng),
        });
    }
    corpus
}

fn gen_copy(rng: &mut ChaCha8Rng) -> Sequence {
    let len = rng.gen_range(5..=12);
    let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..VOCAB_WORDS)).collect();
    Sequence {
        tokens: idx.iter().map(|&i| word(i)).collect(),
        labels: idx.iter().map(|&i| class_label(class_of(i))).collect(),
    }
}

fn gen_bracket(rng: &mut ChaCha8Rng) -> Sequence {
    let len = rng.gen_range(6..=14);
    let mut depth = 0usize;
    let mut tokens = Vec::with_capacity(len);
    let mut labels = Vec::with_capacity(len);
    for _ in 0..len {
        let open = if depth == 0 {
            true
        } else if depth >= MAX_DEPTH {
            false
        } else {
            rng.gen_bool(0.5)
        };
        if open {
            depth += 1;
            tokens.push("(".to_string());
        } else {
            depth -= 1;
            tokens.push(")".to_string());
        }
        labels.push(class_label(depth % BRACKET_DEPTH_MOD));
    }
    Sequence { tokens, labels }
}

fn gen_acausal(rng: &mut ChaCha8Rng) -> Sequence {
    let len = rng.gen_range(5..=10);
    let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..VOCAB_WORDS)).collect();
    let labels = (0..len)
        .map(|t| {
            let source = if t + 1 < len { idx[t + 1] } else { idx[t] };
            class_label(class_of(source))
        })
        .collect();
    Sequence { tokens: idx.iter().map(|&i| word(i)).collect(), labels }
}

fn gen_majority(rng: &mut ChaCha8Rng) -> Sequence {
    let len = rng.gen_range(5..=12);
    let favored = rng.gen_range(0..N_TOKEN_CLASSES);
    let mut counts = [0usize; N_TOKEN_CLASSES];
    let tokens: Vec<String> = (0..len)
        .map(|_| {
            let c = if rng.gen_bool(0.5) { favored } else { rng.gen_range(0..N_TOKEN_CLASSES) };
            counts[c] += 1;
            // Any word of that class.
            let within = rng.gen_range(0..VOCAB_WORDS / N_TOKEN_CLASSES);
            word(within * N_TOKEN_CLASSES + c)
        })
        .collect();
    let majority = (0..N_TOKEN_CLASSES)
        .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
        .unwrap();
    Sequence { tokens, labels: vec![class_label(majority)] }
}
