//! The training loop: per-epoch shuffling, UNK replacement, batched taped
//! forward/backward, AdamW updates under the warmup/decay schedule, and
//! early stopping that restores the best-validation weights.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lr_at_epoch, AdamW, TrainConfig, TrainError};
use crate::data::{EncodedSequence, Task, UNK_ID};
use crate::model::{
    apply_delay_head, delayed_targets, forward_full, forward_on_tape, padded_tokens, HeadKind,
    ModelConfig, ModelWeights, TapedParams,
};
use crate::numerics::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub valid_metric: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
}

/// Train/valid splits, already encoded to ids.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub task: Task,
    pub train: Vec<EncodedSequence>,
    pub valid: Vec<EncodedSequence>,
}

fn check_task(cfg: &ModelConfig, task: Task) -> Result<(), TrainError> {
    let ok = matches!(
        (task, cfg.head_kind),
        (Task::Tagging, HeadKind::Tagging) | (Task::Classification, HeadKind::Classification)
    );
    if ok {
        Ok(())
    } else {
        Err(TrainError::InvalidConfig(format!(
            "task {task} does not match head {:?}",
            cfg.head_kind
        )))
    }
}

/// Train from a fresh Xavier init (seeded by the train config).
pub fn train(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &TrainData,
) -> Result<(ModelWeights, TrainReport), TrainError> {
    let weights = ModelWeights::init(cfg, tcfg.seed);
    train_with_initial(cfg, tcfg, data, weights, 0)
}

/// Train starting from existing weights; epoch numbering continues from
/// `start_epoch` up to the config's absolute epoch budget (resume support;
/// optimizer moments restart).
pub fn train_with_initial(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &TrainData,
    mut weights: ModelWeights,
    start_epoch: usize,
) -> Result<(ModelWeights, TrainReport), TrainError> {
    cfg.validate()?;
    tcfg.validate()?;
    check_task(cfg, data.task)?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyDataset("train split".into()));
    }
    if data.valid.is_empty() {
        return Err(TrainError::EmptyDataset("validation split".into()));
    }
    let epsilon = match data.task {
        Task::Classification => tcfg.label_smoothing,
        Task::Tagging => 0.0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_mul(0x9e3779b97f4a7c15));
    let mut opt = AdamW::new(tcfg.base_lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.weight_decay);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ModelWeights)> = None;
    let mut stopped_early = false;

    for epoch in (start_epoch + 1)..=tcfg.epochs {
        let lr = lr_at_epoch(tcfg, epoch);
        opt.lr = lr;

        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (batch_idx, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let tape_seed = tcfg
                .seed
                .wrapping_add((epoch as u64) << 24)
                .wrapping_add(batch_idx as u64);
            let mut tape = Tape::training(tape_seed);
            let params = TapedParams::register(&mut tape, &weights)?;

            let mut total: Option<crate::numerics::Var> = None;
            for &si in chunk {
                let seq = &data.train[si];
                let tokens: Vec<u32> = seq
                    .tokens
                    .iter()
                    .map(|&t| {
                        if tcfg.unk_prob > 0.0 && rng.gen::<f64>() < tcfg.unk_prob {
                            UNK_ID
                        } else {
                            t
                        }
                    })
                    .collect();
                let loss = match data.task {
                    Task::Tagging => {
                        let padded = padded_tokens(&tokens, cfg.pad_id, cfg.delay);
                        let (targets, mask) = delayed_targets(&seq.labels, cfg.delay);
                        let fwd = forward_on_tape(&mut tape, cfg, &params, &padded)?;
                        tape.smoothed_cross_entropy(fwd.probs, &targets, &mask, epsilon)?
                    }
                    Task::Classification => {
                        let fwd = forward_on_tape(&mut tape, cfg, &params, &tokens)?;
                        tape.smoothed_cross_entropy(fwd.probs, &seq.labels, &[true], epsilon)?
                    }
                };
                total = Some(match total {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let total = total.expect("non-empty batch");
            let loss = tape.scale(total, 1.0 / chunk.len() as f64)?;
            let loss_val = tape.value(loss)[0];
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged { epoch, loss: loss_val });
            }
            tape.backward(loss)?;
            params.write_grads(&tape, &mut weights);
            let mut named = weights.named_mut();
            if let Some(clip) = tcfg.grad_clip {
                AdamW::clip_global_norm(&mut named, clip);
            }
            opt.step(&mut named)?;
            loss_sum += loss_val;
            n_batches += 1;
        }

        let loss = loss_sum / n_batches as f64;
        let valid_metric = evaluate(cfg, &weights, &data.valid, data.task)?;
        epochs.push(EpochStats { epoch, loss, valid_metric, lr });

        let improved = best.as_ref().map_or(true, |(_, m, _)| valid_metric > *m);
        if improved {
            best = Some((epoch, valid_metric, weights.clone()));
        } else if let Some((best_epoch, _, _)) = &best {
            if epoch - best_epoch >= tcfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    match best {
        Some((best_epoch, best_metric, best_weights)) => Ok((
            best_weights,
            TrainReport { epochs, best_epoch, best_metric, stopped_early },
        )),
        // start_epoch >= epochs: nothing to do, keep the incoming weights.
        None => Ok((
            weights,
            TrainReport { epochs, best_epoch: start_epoch, best_metric: f64::NAN, stopped_early },
        )),
    }
}

/// Per-position label predictions from the full (non-incremental) forward,
/// honoring the model's trained delay alignment.
pub fn predict_tags(
    cfg: &ModelConfig,
    w: &ModelWeights,
    tokens: &[u32],
) -> Result<Vec<u32>, TrainError> {
    let padded = padded_tokens(tokens, cfg.pad_id, cfg.delay);
    let out = forward_full(cfg, w, &padded)?;
    let aligned = apply_delay_head(&out.probs, cfg.delay, tokens.len())?;
    let cols = aligned.cols();
    Ok((0..tokens.len())
        .map(|i| argmax(&aligned.data()[i * cols..(i + 1) * cols]))
        .collect())
}

pub fn predict_class(
    cfg: &ModelConfig,
    w: &ModelWeights,
    tokens: &[u32],
) -> Result<u32, TrainError> {
    let out = forward_full(cfg, w, tokens)?;
    Ok(argmax(out.probs.data()))
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

/// Validation metric: token-level macro F1 for tagging, accuracy for
/// classification.
pub fn evaluate(
    cfg: &ModelConfig,
    w: &ModelWeights,
    data: &[EncodedSequence],
    task: Task,
) -> Result<f64, TrainError> {
    match task {
        Task::Tagging => {
            let mut pairs = Vec::new();
            for seq in data {
                let preds = predict_tags(cfg, w, &seq.tokens)?;
                pairs.extend(seq.labels.iter().copied().zip(preds));
            }
            Ok(macro_f1(&pairs, cfg.n_labels))
        }
        Task::Classification => {
            let mut correct = 0usize;
            for seq in data {
                if predict_class(cfg, w, &seq.tokens)? == seq.labels[0] {
                    correct += 1;
                }
            }
            Ok(correct as f64 / data.len() as f64)
        }
    }
}

/// Fraction of (gold, pred) pairs that agree.
pub fn token_accuracy(pairs: &[(u32, u32)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|(g, p)| g == p).count() as f64 / pairs.len() as f64
}

/// Span-less token-level macro F1 over the classes present in the gold data.
pub fn macro_f1(pairs: &[(u32, u32)], n_labels: usize) -> f64 {
    let mut tp = vec![0usize; n_labels];
    let mut fp = vec![0usize; n_labels];
    let mut fn_ = vec![0usize; n_labels];
    for &(gold, pred) in pairs {
        if gold == pred {
            tp[gold as usize] += 1;
        } else {
            fp[pred as usize] += 1;
            fn_[gold as usize] += 1;
        }
    }
    let mut f1_sum = 0.0;
    let mut classes = 0usize;
    for c in 0..n_labels {
        if tp[c] + fn_[c] == 0 {
            continue; // absent from gold
        }
        classes += 1;
        let p = if tp[c] + fp[c] > 0 { tp[c] as f64 / (tp[c] + fp[c]) as f64 } else { 0.0 };
        let r = tp[c] as f64 / (tp[c] + fn_[c]) as f64;
        if p + r > 0.0 {
            f1_sum += 2.0 * p * r / (p + r);
        }
    }
    if classes == 0 {
        0.0
    } else {
        f1_sum / classes as f64
    }
}
