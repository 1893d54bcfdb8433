//! Diachronic incremental metrics over [`IncrementalLog`]s: edit overhead
//! (EO), correction time score (CT) and relative correctness (RC), with
//! delay-discounted variants. All are computed against the log's own final
//! row, which stands in for the non-incremental output.
//!
//! Normative definitions for this artifact (the upstream literature leaves
//! room for interpretation; these are validated against the reproducible
//! fixed points, e.g. monotone logs score exactly EO=0, CT=0, RC=1):
//!
//! - Edits: diffing consecutive rows, each first label for a unit is one
//!   necessary edit (an addition); each later change to an existing unit is
//!   one unnecessary edit (a substitution). Partial rows only grow or
//!   relabel, so no other edit type exists.
//!   EO = unnecessary / (necessary + unnecessary), and 0 when there are no
//!   edits at all.
//! - CT: per output unit, F0 is the first timestep with any label and FD the
//!   first timestep from which the label equals its final value and never
//!   changes again; the unit scores (FD - F0) / (T_last - F0) when
//!   T_last > F0, else 0. CT is the mean over units, so CT is always in
//!   [0, 1].
//! - RC: the fraction of committed rows that are a correct prefix of the
//!   final row. Rows that are empty in the log (timesteps before the first
//!   committed output under delay) are excluded from the denominator.
//! - Delta variants (EO-d / RC-d): each row is truncated by its last d
//!   labels, exempting the d most recent commitments. Rows emptied by the
//!   truncation count as vacuously correct prefixes (they stay in the
//!   denominator), which makes RC-d monotonically nondecreasing in d. For
//!   classification logs (single-label rows) the truncation variants
//!   degenerate to 0/1 at d >= 1; meaningful delayed-classification numbers
//!   come from running the driver with a delay instead.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::data::Task;
use crate::incremental::IncrementalLog;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric undefined on an empty log")]
    EmptyLog,
    #[error("mixed tasks in one report: {0} vs {1}")]
    MixedTasks(Task, Task),
    #[error("no logs to aggregate")]
    NoLogs,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Edit counts for one log under a delay discount.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditCounts {
    pub necessary: usize,
    pub unnecessary: usize,
}

fn truncated(row: &[u32], delta: usize) -> &[u32] {
    &row[..row.len().saturating_sub(delta)]
}

/// Count necessary (first assignment) and unnecessary (substitution) edits
/// between consecutive rows, with the `delta` most recent commitments of
/// every row exempted.
pub fn edit_counts(log: &IncrementalLog, delta: usize) -> Result<EditCounts, MetricsError> {
    if log.rows.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let mut counts = EditCounts { necessary: 0, unnecessary: 0 };
    let empty: &[u32] = &[];
    let mut prev = empty;
    for row in &log.rows {
        let cur = truncated(row, delta);
        for (i, &label) in cur.iter().enumerate() {
            if i >= prev.len() {
                counts.necessary += 1;
            } else if prev[i] != label {
                counts.unnecessary += 1;
            }
        }
        prev = cur;
    }
    Ok(counts)
}

/// EO: the proportion of unnecessary edits over all edits.
pub fn edit_overhead(log: &IncrementalLog) -> Result<f64, MetricsError> {
    edit_overhead_delta(log, 0)
}

pub fn edit_overhead_delta(log: &IncrementalLog, delta: usize) -> Result<f64, MetricsError> {
    let c = edit_counts(log, delta)?;
    let total = c.necessary + c.unnecessary;
    if total == 0 {
        return Ok(0.0);
    }
    Ok(c.unnecessary as f64 / total as f64)
}

/// CT: mean normalized time from a unit's first output to its final, stable
/// decision.
pub fn correction_time(log: &IncrementalLog) -> Result<f64, MetricsError> {
    if log.rows.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let t_last = log.rows.len();
    let final_row = log.final_row();
    let n_units = final_row.len();
    if n_units == 0 {
        return Err(MetricsError::EmptyLog);
    }
    let mut total = 0.0;
    for unit in 0..n_units {
        let mut f0 = None;
        let mut last_diff = None;
        for (t0, row) in log.rows.iter().enumerate() {
            if let Some(&label) = row.get(unit) {
                let t = t0 + 1;
                if f0.is_none() {
                    f0 = Some(t);
                }
                if label != final_row[unit] {
                    last_diff = Some(t);
                }
            }
        }
        let f0 = f0.expect("unit present in final row");
        let fd = last_diff.map(|t| t + 1).unwrap_or(f0);
        if t_last > f0 {
            total += (fd - f0) as f64 / (t_last - f0) as f64;
        }
    }
    Ok(total / n_units as f64)
}

/// RC: the fraction of committed rows that are a correct prefix of the final
/// row, with the `delta` most recent commitments exempted.
pub fn relative_correctness(log: &IncrementalLog, delta: usize) -> Result<f64, MetricsError> {
    if log.rows.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let final_row = log.final_row();
    let mut judged = 0usize;
    let mut correct = 0usize;
    for row in &log.rows {
        if row.is_empty() {
            continue; // no committed output yet (delay)
        }
        judged += 1;
        let eff = truncated(row, delta);
        if final_row.len() >= eff.len() && &final_row[..eff.len()] == eff {
            correct += 1;
        }
    }
    if judged == 0 {
        return Err(MetricsError::EmptyLog);
    }
    Ok(correct as f64 / judged as f64)
}

/// All metrics for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMetrics {
    pub seq: usize,
    pub input_len: usize,
    pub timesteps: usize,
    pub delay: usize,
    pub necessary_edits: usize,
    pub unnecessary_edits: usize,
    pub eo: f64,
    pub ct: f64,
    pub rc: f64,
    pub eo_d1: f64,
    pub eo_d2: f64,
    pub rc_d1: f64,
    pub rc_d2: f64,
}

pub fn score_log(log: &IncrementalLog) -> Result<SequenceMetrics, MetricsError> {
    let counts = edit_counts(log, 0)?;
    Ok(SequenceMetrics {
        seq: log.seq,
        input_len: log.input_len,
        timesteps: log.rows.len(),
        delay: log.delay,
        necessary_edits: counts.necessary,
        unnecessary_edits: counts.unnecessary,
        eo: edit_overhead(log)?,
        ct: correction_time(log)?,
        rc: relative_correctness(log, 0)?,
        eo_d1: edit_overhead_delta(log, 1)?,
        eo_d2: edit_overhead_delta(log, 2)?,
        rc_d1: relative_correctness(log, 1)?,
        rc_d2: relative_correctness(log, 2)?,
    })
}

/// Corpus-level means (unweighted over sequences) plus counts.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    pub per_sequence: Vec<SequenceMetrics>,
    pub sequences: usize,
    pub tokens: usize,
    pub edits: usize,
    pub mean_eo: f64,
    pub mean_ct: f64,
    pub mean_rc: f64,
    pub mean_eo_d1: f64,
    pub mean_eo_d2: f64,
    pub mean_rc_d1: f64,
    pub mean_rc_d2: f64,
}

/// Score every log and aggregate with an unweighted mean over sequences.
pub fn score_logs(logs: &[IncrementalLog]) -> Result<MetricsReport, MetricsError> {
    if logs.is_empty() {
        return Err(MetricsError::NoLogs);
    }
    let task = logs[0].task;
    for log in logs {
        if log.task != task {
            return Err(MetricsError::MixedTasks(task, log.task));
        }
    }
    let per_sequence: Result<Vec<_>, _> = logs.iter().map(score_log).collect();
    let per_sequence = per_sequence?;
    let n = per_sequence.len() as f64;
    let mean = |f: fn(&SequenceMetrics) -> f64| per_sequence.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        task,
        sequences: per_sequence.len(),
        tokens: per_sequence.iter().map(|m| m.input_len).sum(),
        edits: per_sequence
            .iter()
            .map(|m| m.necessary_edits + m.unnecessary_edits)
            .sum(),
        mean_eo: mean(|m| m.eo),
        mean_ct: mean(|m| m.ct),
        mean_rc: mean(|m| m.rc),
        mean_eo_d1: mean(|m| m.eo_d1),
        mean_eo_d2: mean(|m| m.eo_d2),
        mean_rc_d1: mean(|m| m.rc_d1),
        mean_rc_d2: mean(|m| m.rc_d2),
        per_sequence,
    })
}

/// Stable CSV schema: one row per sequence plus a trailing `mean` row.
pub fn report_to_csv(report: &MetricsReport, path: &Path) -> Result<(), MetricsError> {
    let mut out = String::from(
        "seq,task,input_len,timesteps,delay,necessary_edits,unnecessary_edits,eo,ct,rc,eo_d1,eo_d2,rc_d1,rc_d2\n",
    );
    for m in &report.per_sequence {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.seq,
            report.task,
            m.input_len,
            m.timesteps,
            m.delay,
            m.necessary_edits,
            m.unnecessary_edits,
            m.eo,
            m.ct,
            m.rc,
            m.eo_d1,
            m.eo_d2,
            m.rc_d1,
            m.rc_d2
        );
    }
    let _ = writeln!(
        out,
        "mean,{},{},,,,,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        report.task,
        report.tokens,
        report.mean_eo,
        report.mean_ct,
        report.mean_rc,
        report.mean_eo_d1,
        report.mean_eo_d2,
        report.mean_rc_d1,
        report.mean_rc_d2
    );
    std::fs::write(path, out)?;
    Ok(())
}

/// Human-readable summary table.
pub fn report_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "task: {}   sequences: {}   tokens: {}   edits: {}",
        report.task, report.sequences, report.tokens, report.edits
    );
    let _ = writeln!(out, "{:<8} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", "metric", "EO", "CT", "RC", "EO-d1", "EO-d2", "RC-d1");
    let _ = writeln!(
        out,
        "{:<8} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3}   RC-d2 {:>7.3}",
        "mean",
        report.mean_eo,
        report.mean_ct,
        report.mean_rc,
        report.mean_eo_d1,
        report.mean_eo_d2,
        report.mean_rc_d1,
        report.mean_rc_d2
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagging_log(rows: Vec<Vec<u32>>, input_len: usize, delay: usize) -> IncrementalLog {
        IncrementalLog {
            task: Task::Tagging,
            seq: 0,
            input_len,
            delay,
            rows,
            dists: None,
        }
    }

    fn classification_log(rows: Vec<Vec<u32>>, input_len: usize, delay: usize) -> IncrementalLog {
        IncrementalLog {
            task: Task::Classification,
            seq: 0,
            input_len,
            delay,
            rows,
            dists: None,
        }
    }

    // Spec fixture: t1:[A]; t2:[B,C]; t3:[B,C,D] => 3 adds + 1 substitution.
    #[test]
    fn eo_hand_enumeration() {
        let log = tagging_log(vec![vec![0], vec![1, 2], vec![1, 2, 3]], 3, 0);
        let counts = edit_counts(&log, 0).unwrap();
        assert_eq!(counts, EditCounts { necessary: 3, unnecessary: 1 });
        assert_eq!(edit_overhead(&log).unwrap(), 0.25);
        // Delta variants exempt the trailing flip.
        assert_eq!(edit_overhead_delta(&log, 1).unwrap(), 0.0);
        assert_eq!(edit_overhead_delta(&log, 2).unwrap(), 0.0);
    }

    #[test]
    fn eo_monotone_log_is_zero() {
        let log = tagging_log(vec![vec![0], vec![0, 1], vec![0, 1, 2]], 3, 0);
        assert_eq!(edit_overhead(&log).unwrap(), 0.0);
    }

    #[test]
    fn eo_classification_hand_value() {
        let log = classification_log(vec![vec![0], vec![1], vec![1]], 3, 0);
        assert_eq!(edit_overhead(&log).unwrap(), 0.5);
    }

    #[test]
    fn ct_hand_enumerations() {
        // Monotone log: every unit is final on first emission.
        let log = tagging_log(vec![vec![0], vec![0, 1], vec![0, 1, 2]], 3, 0);
        assert_eq!(correction_time(&log).unwrap(), 0.0);

        // classification [a,b,b]: F0=1, FD=2, T_last=3 => 0.5.
        let log = classification_log(vec![vec![0], vec![1], vec![1]], 3, 0);
        assert_eq!(correction_time(&log).unwrap(), 0.5);

        // Unit correct immediately and forever: FD=F0 => 0.
        let log = classification_log(vec![vec![1], vec![1], vec![1]], 3, 0);
        assert_eq!(correction_time(&log).unwrap(), 0.0);

        // The spec's three-unit tagging fixture: mean(0.5, 0, 0) = 1/6.
        let log = tagging_log(vec![vec![0], vec![1, 2], vec![1, 2, 3]], 3, 0);
        assert!((correction_time(&log).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn rc_hand_enumerations() {
        let log = tagging_log(vec![vec![0], vec![0, 1], vec![0, 1, 2]], 3, 0);
        assert_eq!(relative_correctness(&log, 0).unwrap(), 1.0);

        // classification [a,b,b] final b => 2/3.
        let log = classification_log(vec![vec![0], vec![1], vec![1]], 3, 0);
        assert!((relative_correctness(&log, 0).unwrap() - 2.0 / 3.0).abs() < 1e-15);

        // Spec fixture rows: [A];[B,C];[B,C,D]: RC 2/3, both deltas 1.
        let log = tagging_log(vec![vec![0], vec![1, 2], vec![1, 2, 3]], 3, 0);
        assert!((relative_correctness(&log, 0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(relative_correctness(&log, 1).unwrap(), 1.0);
        assert_eq!(relative_correctness(&log, 2).unwrap(), 1.0);
    }

    #[test]
    fn rc_excludes_pre_commit_rows_under_delay() {
        // d=1 withheld log: first row empty and excluded from the denominator.
        let log = tagging_log(vec![vec![], vec![0], vec![0, 1], vec![0, 1, 2]], 3, 1);
        assert_eq!(relative_correctness(&log, 0).unwrap(), 1.0);
        let counts = edit_counts(&log, 0).unwrap();
        assert_eq!(counts.necessary, 3);
    }

    #[test]
    fn empty_log_is_undefined() {
        let log = tagging_log(vec![], 1, 0);
        assert!(matches!(edit_overhead(&log), Err(MetricsError::EmptyLog)));
        assert!(matches!(correction_time(&log), Err(MetricsError::EmptyLog)));
        assert!(matches!(
            relative_correctness(&log, 0),
            Err(MetricsError::EmptyLog)
        ));
    }

    #[test]
    fn aggregate_means() {
        let a = tagging_log(vec![vec![0], vec![0, 1]], 2, 0); // EO 0, RC 1
        let b = tagging_log(vec![vec![9], vec![0, 1]], 2, 0); // 1 sub: EO 1/3, RC 1/2
        let report = score_logs(&[a.clone(), b]).unwrap();
        assert!((report.mean_eo - (0.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((report.mean_rc - 0.75).abs() < 1e-15);
        // Single log aggregates to itself.
        let single = score_logs(&[a.clone()]).unwrap();
        assert_eq!(single.mean_eo, score_log(&a).unwrap().eo);
        assert_eq!(single.sequences, 1);
    }

    #[test]
    fn aggregate_rejects_mixed_tasks() {
        let a = tagging_log(vec![vec![0]], 1, 0);
        let b = classification_log(vec![vec![0]], 1, 0);
        assert!(matches!(
            score_logs(&[a, b]),
            Err(MetricsError::MixedTasks(_, _))
        ));
    }
}
