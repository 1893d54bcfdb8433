//! Deployment drivers that turn an encoder into an incremental processor
//! and record everything it emits over time.
//!
//! A log has one row per timestep. With a total output delay `d`, timestep t
//! commits outputs for tokens 1..=t-d, so the log spans `T + d` timesteps and
//! the first `d` rows are empty. Tagging rows hold the label ids currently
//! assigned to the committed tokens; classification rows hold the single
//! current label. The final row is the reference output the diachronic
//! metrics are computed against.
//!
//! Delay semantics by driver:
//! - restart: pure output-side withholding. Every step re-runs the full
//!   forward on the available prefix, and the committed span is re-read from
//!   the newest forward, so already-committed labels can be revised.
//! - recurrent: the trained alignment (cfg.delay) consumes that many
//!   end-padding tokens and reads token t's label at step t+delay; any extra
//!   requested delay is withheld output. Tagging rows only ever extend.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Task;
use crate::model::{
    forward_full, padded_tokens, AttentionKind, ModelConfig, ModelError, ModelWeights,
    RecurrentState,
};

#[derive(Debug, Error)]
pub enum IncrementalError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

/// Timestep-indexed record of the partial outputs one driver emitted for one
/// input sequence. Serialized as one JSON object per line; see the schema
/// notes in `docs/formats.md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalLog {
    pub task: Task,
    /// Index of the sequence within its corpus/run.
    #[serde(default)]
    pub seq: usize,
    /// Number of real input tokens T.
    pub input_len: usize,
    /// Total output delay d (trained alignment + withholding).
    pub delay: usize,
    /// One row per timestep t = 1..=T+d of committed label ids.
    pub rows: Vec<Vec<u32>>,
    /// Optional debug channel: per timestep, the distribution of the most
    /// recently committed output (empty when nothing was committed).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dists: Option<Vec<Vec<f64>>>,
}

impl IncrementalLog {
    /// The final (non-incremental) output the metrics compare against.
    pub fn final_row(&self) -> &[u32] {
        self.rows.last().map(|r| r.as_slice()).unwrap_or(&[])
    }

    /// Number of committed outputs expected at timestep `t` (1-based).
    pub fn expected_len(&self, t: usize) -> usize {
        match self.task {
            Task::Tagging => t.saturating_sub(self.delay).min(self.input_len),
            Task::Classification => usize::from(t > self.delay),
        }
    }

    /// Structural invariants: T+d rows, each of the committed length.
    pub fn validate(&self) -> Result<(), IncrementalError> {
        if self.input_len == 0 {
            return Err(IncrementalError::Invalid("log with input_len 0".into()));
        }
        let want_rows = self.input_len + self.delay;
        if self.rows.len() != want_rows {
            return Err(IncrementalError::Invalid(format!(
                "log with T={} d={} must have {} rows, found {}",
                self.input_len,
                self.delay,
                want_rows,
                self.rows.len()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            let want = self.expected_len(i + 1);
            if row.len() != want {
                return Err(IncrementalError::Invalid(format!(
                    "row {} has {} labels, expected {}",
                    i + 1,
                    row.len(),
                    want
                )));
            }
        }
        if let Some(dists) = &self.dists {
            if dists.len() != want_rows {
                return Err(IncrementalError::Invalid(
                    "dists channel must have one entry per timestep".into(),
                ));
            }
        }
        Ok(())
    }

    /// Round the debug distributions to `decimals` places (stable emission).
    pub fn round_dists(&mut self, decimals: u32) {
        if let Some(dists) = &mut self.dists {
            let scale = 10f64.powi(decimals as i32);
            for row in dists {
                for v in row {
                    *v = (*v * scale).round() / scale;
                }
            }
        }
    }
}

/// Cost accounting for one driver run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DriveStats {
    /// Total tokens pushed through the encoder (restart: T(T+1)/2;
    /// recurrent: T plus any trained-delay padding).
    pub forward_tokens: usize,
    /// Timesteps recorded in the log.
    pub timesteps: usize,
}

fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Restart-incrementality: re-run the full-sequence encoder on every prefix,
/// committing outputs for tokens 1..=t-d at timestep t. Output rows may be
/// non-monotonic since each step re-reads the committed span from the newest
/// forward pass.
pub fn run_restart_incremental(
    cfg: &ModelConfig,
    w: &ModelWeights,
    tokens: &[u32],
    delay: usize,
    with_dists: bool,
) -> Result<(IncrementalLog, DriveStats), IncrementalError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput.into());
    }
    let t_len = tokens.len();
    let steps = t_len + delay;
    let mut rows = Vec::with_capacity(steps);
    let mut dists = with_dists.then(|| Vec::with_capacity(steps));
    let mut stats = DriveStats { forward_tokens: 0, timesteps: steps };

    let mut last_probs: Option<crate::numerics::Tensor> = None;
    // Classification estimates per prefix length (lagged commitment).
    let mut cls_estimates: Vec<(u32, Vec<f64>)> = Vec::new();

    for t in 1..=steps {
        if t <= t_len {
            let out = forward_full(cfg, w, &tokens[..t])?;
            stats.forward_tokens += t;
            if cfg.head_kind == crate::model::HeadKind::Classification {
                cls_estimates.push((argmax(out.probs.data()), out.probs.data().to_vec()));
            }
            last_probs = Some(out.probs);
        }
        match cfg.head_kind {
            crate::model::HeadKind::Tagging => {
                let committed = t.saturating_sub(delay).min(t_len);
                let probs = last_probs.as_ref().expect("forward ran at t=1");
                let cols = probs.cols();
                let row: Vec<u32> = (0..committed)
                    .map(|i| argmax(&probs.data()[i * cols..(i + 1) * cols]))
                    .collect();
                if let Some(d) = dists.as_mut() {
                    if committed > 0 {
                        let i = committed - 1;
                        d.push(probs.data()[i * cols..(i + 1) * cols].to_vec());
                    } else {
                        d.push(Vec::new());
                    }
                }
                rows.push(row);
            }
            crate::model::HeadKind::Classification => {
                if t > delay {
                    let idx = (t - delay).min(t_len) - 1;
                    let (label, dist) = &cls_estimates[idx];
                    rows.push(vec![*label]);
                    if let Some(d) = dists.as_mut() {
                        d.push(dist.clone());
                    }
                } else {
                    rows.push(Vec::new());
                    if let Some(d) = dists.as_mut() {
                        d.push(Vec::new());
                    }
                }
            }
        }
    }

    let log = IncrementalLog {
        task: match cfg.head_kind {
            crate::model::HeadKind::Tagging => Task::Tagging,
            crate::model::HeadKind::Classification => Task::Classification,
        },
        seq: 0,
        input_len: t_len,
        delay,
        rows,
        dists,
    };
    debug_assert!(log.validate().is_ok());
    Ok((log, stats))
}

/// Recurrent deployment: one step per token plus `cfg.delay` padding steps;
/// token t's label is read at step `t + cfg.delay`. Any `delay` beyond the
/// trained alignment is withheld output. Tagging logs are monotonic by
/// construction: a committed label never changes.
pub fn run_recurrent(
    cfg: &ModelConfig,
    w: &ModelWeights,
    tokens: &[u32],
    delay: usize,
    with_dists: bool,
) -> Result<(IncrementalLog, DriveStats), IncrementalError> {
    if cfg.attention_kind != AttentionKind::Linear {
        return Err(ModelError::UnsupportedMode.into());
    }
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput.into());
    }
    if delay < cfg.delay {
        return Err(IncrementalError::Invalid(format!(
            "requested delay {} below the model's trained alignment {}",
            delay, cfg.delay
        )));
    }
    let t_len = tokens.len();
    let aligned = cfg.delay;
    let steps = t_len + delay;
    let padded = padded_tokens(tokens, cfg.pad_id, aligned);

    let mut state = RecurrentState::new(cfg);
    // Output row per consumed input position.
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(padded.len());
    let mut rows = Vec::with_capacity(steps);
    let mut dists = with_dists.then(|| Vec::with_capacity(steps));
    let mut committed_labels: Vec<u32> = Vec::new();

    for t in 1..=steps {
        if t <= padded.len() {
            let out = state.step(cfg, w, padded[t - 1])?;
            outputs.push(out.probs);
        }
        let committed = t.saturating_sub(delay).min(t_len);
        match cfg.head_kind {
            crate::model::HeadKind::Tagging => {
                while committed_labels.len() < committed {
                    // Token j (1-based) is read from output position j + aligned.
                    let j = committed_labels.len();
                    committed_labels.push(argmax(&outputs[j + aligned]));
                }
                rows.push(committed_labels.clone());
                if let Some(d) = dists.as_mut() {
                    if committed > 0 {
                        d.push(outputs[committed - 1 + aligned].clone());
                    } else {
                        d.push(Vec::new());
                    }
                }
            }
            crate::model::HeadKind::Classification => {
                if committed > 0 {
                    // Lagged estimate: the distribution after the committed
                    // number of real tokens (padding never changes it).
                    let probs = &outputs[committed - 1];
                    rows.push(vec![argmax(probs)]);
                    if let Some(d) = dists.as_mut() {
                        d.push(probs.clone());
                    }
                } else {
                    rows.push(Vec::new());
                    if let Some(d) = dists.as_mut() {
                        d.push(Vec::new());
                    }
                }
            }
        }
    }

    let stats = DriveStats { forward_tokens: padded.len(), timesteps: steps };
    let log = IncrementalLog {
        task: match cfg.head_kind {
            crate::model::HeadKind::Tagging => Task::Tagging,
            crate::model::HeadKind::Classification => Task::Classification,
        },
        seq: 0,
        input_len: t_len,
        delay,
        rows,
        dists,
    };
    debug_assert!(log.validate().is_ok());
    Ok((log, stats))
}

/// Drive a whole corpus, sequence-parallel, logs in input order.
pub fn run_corpus(
    cfg: &ModelConfig,
    w: &ModelWeights,
    sequences: &[Vec<u32>],
    mode: crate::model::DeployMode,
    delay: usize,
    with_dists: bool,
) -> Result<(Vec<IncrementalLog>, DriveStats), IncrementalError> {
    let results: Result<Vec<_>, IncrementalError> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, tokens)| {
            let (mut log, stats) = match mode {
                crate::model::DeployMode::Restart => {
                    run_restart_incremental(cfg, w, tokens, delay, with_dists)?
                }
                crate::model::DeployMode::Recurrent => {
                    run_recurrent(cfg, w, tokens, delay, with_dists)?
                }
            };
            log.seq = i;
            Ok((log, stats))
        })
        .collect();
    let results = results?;
    let mut total = DriveStats::default();
    let mut logs = Vec::with_capacity(results.len());
    for (log, stats) in results {
        total.forward_tokens += stats.forward_tokens;
        total.timesteps += stats.timesteps;
        logs.push(log);
    }
    Ok((logs, total))
}

/// Serialize logs as JSON Lines (one object per sequence).
pub fn logs_to_jsonl(logs: &[IncrementalLog], path: &Path) -> Result<(), IncrementalError> {
    let mut out = String::new();
    for log in logs {
        let line = serde_json::to_string(log)
            .map_err(|e| IncrementalError::Invalid(format!("serialize: {e}")))?;
        let _ = writeln!(out, "{line}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a JSONL log file, validating structural invariants. Errors carry
/// the 1-based line number.
pub fn logs_from_jsonl(path: &Path) -> Result<Vec<IncrementalLog>, IncrementalError> {
    let text = std::fs::read_to_string(path)?;
    let mut logs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let log: IncrementalLog = serde_json::from_str(line).map_err(|e| {
            IncrementalError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: e.to_string(),
            }
        })?;
        log.validate().map_err(|e| IncrementalError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, ModelConfig, ModelWeights};

    fn linear_cfg(head: HeadKind, causal: bool) -> ModelConfig {
        let mut cfg = ModelConfig::desk_default(16, 4, head);
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.d_model = 12;
        cfg.d_ff = 24;
        cfg.max_len = 48;
        cfg.dropout = 0.0;
        cfg.causal = causal;
        cfg
    }

    #[test]
    fn restart_singleton_matches_forward() {
        let cfg = linear_cfg(HeadKind::Tagging, false);
        let w = ModelWeights::init(&cfg, 5);
        let (log, stats) = run_restart_incremental(&cfg, &w, &[3], 0, false).unwrap();
        assert_eq!(log.rows.len(), 1);
        let full = forward_full(&cfg, &w, &[3]).unwrap();
        assert_eq!(log.rows[0], vec![argmax(full.probs.data())]);
        assert_eq!(stats.forward_tokens, 1);
    }

    #[test]
    fn restart_final_row_is_full_forward() {
        let cfg = linear_cfg(HeadKind::Tagging, false);
        let w = ModelWeights::init(&cfg, 6);
        let tokens = [1u32, 5, 2, 9, 4];
        let (log, stats) = run_restart_incremental(&cfg, &w, &tokens, 0, false).unwrap();
        let full = forward_full(&cfg, &w, &tokens).unwrap();
        let cols = full.probs.cols();
        let want: Vec<u32> = (0..tokens.len())
            .map(|i| argmax(&full.probs.data()[i * cols..(i + 1) * cols]))
            .collect();
        assert_eq!(log.final_row(), want.as_slice());
        // T(T+1)/2 forward tokens for T=5.
        assert_eq!(stats.forward_tokens, 15);
    }

    #[test]
    fn recurrent_rows_form_prefix_chain() {
        let cfg = linear_cfg(HeadKind::Tagging, true);
        let w = ModelWeights::init(&cfg, 7);
        let tokens = [2u32, 8, 1, 7, 3, 6];
        let (log, stats) = run_recurrent(&cfg, &w, &tokens, 0, false).unwrap();
        assert_eq!(stats.forward_tokens, 6);
        for t in 1..log.rows.len() {
            assert_eq!(log.rows[t].len(), log.rows[t - 1].len() + 1);
            assert_eq!(&log.rows[t][..log.rows[t - 1].len()], log.rows[t - 1].as_slice());
        }
    }

    #[test]
    fn recurrent_delay_shifts_commitments() {
        let cfg = linear_cfg(HeadKind::Tagging, true);
        let w = ModelWeights::init(&cfg, 8);
        let tokens = [4u32, 1, 9];
        let (d0, _) = run_recurrent(&cfg, &w, &tokens, 0, false).unwrap();
        let (d1, _) = run_recurrent(&cfg, &w, &tokens, 1, false).unwrap();
        // First commit appears at timestep d+1.
        assert!(d1.rows[0].is_empty());
        assert_eq!(d1.rows[1].len(), 1);
        // Row t of the delayed log equals row t-1 of the d=0 log.
        for t in 1..d1.rows.len() {
            assert_eq!(d1.rows[t], d0.rows[t - 1]);
        }
        // Final rows agree.
        assert_eq!(d0.final_row(), d1.final_row());
    }

    #[test]
    fn restart_equals_recurrent_on_causal_linear_model() {
        // Restart-incrementality over a causal encoder is redundant work:
        // identical logs.
        for head in [HeadKind::Tagging, HeadKind::Classification] {
            let cfg = linear_cfg(head, true);
            let w = ModelWeights::init(&cfg, 9);
            let tokens = [1u32, 6, 11, 3, 2, 10, 5];
            for delay in [0usize, 1, 2] {
                let (restart, _) =
                    run_restart_incremental(&cfg, &w, &tokens, delay, false).unwrap();
                let (recurrent, _) = run_recurrent(&cfg, &w, &tokens, delay, false).unwrap();
                assert_eq!(restart.rows, recurrent.rows, "head={head:?} delay={delay}");
            }
        }
    }

    #[test]
    fn recurrent_rejects_softmax_and_underdelay() {
        let mut cfg = linear_cfg(HeadKind::Tagging, true);
        cfg.attention_kind = AttentionKind::Softmax;
        let w = ModelWeights::init(&cfg, 10);
        assert!(run_recurrent(&cfg, &w, &[1, 2], 0, false).is_err());

        let mut cfg = linear_cfg(HeadKind::Tagging, true);
        cfg.delay = 1;
        let w = ModelWeights::init(&cfg, 10);
        assert!(run_recurrent(&cfg, &w, &[1, 2], 0, false).is_err());
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let dir = std::env::temp_dir().join("increc_jsonl_tests");
        std::fs::create_dir_all(&dir).unwrap();

        let cfg = linear_cfg(HeadKind::Tagging, true);
        let w = ModelWeights::init(&cfg, 11);
        let (mut log, _) = run_recurrent(&cfg, &w, &[5, 3, 8, 1], 1, true).unwrap();
        log.seq = 3;
        log.round_dists(6);
        let path = dir.join("roundtrip.jsonl");
        logs_to_jsonl(&[log.clone()], &path).unwrap();
        let back = logs_from_jsonl(&path).unwrap();
        assert_eq!(back, vec![log]);

        // Hand-written fixture with a known shape.
        let fixture = dir.join("fixture.jsonl");
        std::fs::write(
            &fixture,
            concat!(
                r#"{"task":"tagging","seq":0,"input_len":2,"delay":0,"rows":[[1],[1,0]]}"#,
                "\n",
                r#"{"task":"classification","seq":1,"input_len":3,"delay":1,"rows":[[],[0],[1],[1]]}"#,
                "\n",
            ),
        )
        .unwrap();
        let logs = logs_from_jsonl(&fixture).unwrap();
        assert_eq!(logs.len(), 2);
        assert_eq!(logs[0].rows[1], vec![1, 0]);
        assert_eq!(logs[1].delay, 1);

        // Missing field names the field; bad row shapes carry line numbers.
        let missing = dir.join("missing.jsonl");
        std::fs::write(&missing, "{\"task\":\"tagging\",\"delay\":0,\"rows\":[[0]]}\n").unwrap();
        let err = logs_from_jsonl(&missing).unwrap_err().to_string();
        assert!(err.contains("input_len"), "{err}");
        assert!(err.contains(":1:"), "{err}");

        let bad_shape = dir.join("bad_shape.jsonl");
        std::fs::write(
            &bad_shape,
            "{\"task\":\"tagging\",\"input_len\":2,\"delay\":0,\"rows\":[[0]]}\n",
        )
        .unwrap();
        let err = logs_from_jsonl(&bad_shape).unwrap_err().to_string();
        assert!(err.contains("2 rows"), "{err}");
    }

    #[test]
    fn classification_log_shape_under_delay() {
        let cfg = linear_cfg(HeadKind::Classification, true);
        let w = ModelWeights::init(&cfg, 12);
        let tokens = [2u32, 7, 4];
        let (log, _) = run_recurrent(&cfg, &w, &tokens, 2, false).unwrap();
        assert_eq!(log.rows.len(), 5);
        assert!(log.rows[0].is_empty() && log.rows[1].is_empty());
        for t in 2..5 {
            assert_eq!(log.rows[t].len(), 1);
        }
        log.validate().unwrap();
    }
}
