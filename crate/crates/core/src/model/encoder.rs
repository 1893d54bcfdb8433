//! Full-sequence forward passes: a plain inference path over raw buffers and
//! a tape-recorded path for training. Both are built from the same kernels
//! and mirror each other op for op.
//!
//! Sublayer layout is the post-norm original: x = LN(x + Dropout(Sublayer(x))),
//! ReLU feed-forward, learned positional embeddings added to the scaled token
//! embeddings. Positional encodings are a learned lookup table; a sinusoidal
//! table would work as well but the learned form keeps the on/off toggle
//! trivial.

use super::weights::ModelWeights;
use super::{AttentionKind, HeadKind, ModelConfig, ModelError, LN_EPS};
use crate::numerics::kernels;
use crate::numerics::{Tape, Tensor, Var};

/// Result of a full-sequence pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final-layer hidden states, `(T, d_model)`.
    pub hidden: Tensor,
    /// Tagging: `(T, n_labels)` label distributions per position.
    /// Classification: `(1, n_labels)` distribution for the sequence.
    pub probs: Tensor,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if tokens.len() > cfg.max_len {
        return Err(ModelError::TooLong { len: tokens.len(), max: cfg.max_len });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange { id, vocab: cfg.vocab_size });
    }
    Ok(())
}

/// Full forward pass in inference mode (dropout is the identity).
///
/// With `cfg.causal` the hidden state at position i depends only on tokens
/// 1..=i; otherwise attention is fully bidirectional.
pub fn forward_full(
    cfg: &ModelConfig,
    w: &ModelWeights,
    tokens: &[u32],
) -> Result<ForwardOutput, ModelError> {
    check_tokens(cfg, tokens)?;
    let t = tokens.len();
    let d = cfg.d_model;
    let emb_scale = (d as f64).sqrt();

    let mut x = vec![0.0f64; t * d];
    for (i, &id) in tokens.iter().enumerate() {
        let row = &w.token_emb.data()[id as usize * d..(id as usize + 1) * d];
        for c in 0..d {
            x[i * d + c] = row[c] * emb_scale;
        }
    }
    if cfg.use_positional {
        for i in 0..t {
            let row = &w.pos_emb.data()[i * d..(i + 1) * d];
            for c in 0..d {
                x[i * d + c] += row[c];
            }
        }
    }

    let mut q = vec![0.0f64; t * d];
    let mut k = vec![0.0f64; t * d];
    let mut v = vec![0.0f64; t * d];
    let mut att = vec![0.0f64; t * d];
    let mut proj = vec![0.0f64; t * d];
    let mut ff_mid = vec![0.0f64; t * cfg.d_ff];
    let mut ff_out = vec![0.0f64; t * d];
    let mut normed = vec![0.0f64; t * d];
    let mut inv_std = vec![0.0f64; t];

    for layer in &w.layers {
        for buf in [&mut q, &mut k, &mut v] {
            buf.iter_mut().for_each(|z| *z = 0.0);
        }
        kernels::gemm_nn(&x, layer.w_q.data(), &mut q, t, d, d);
        kernels::gemm_nn(&x, layer.w_k.data(), &mut k, t, d, d);
        kernels::gemm_nn(&x, layer.w_v.data(), &mut v, t, d, d);

        match cfg.attention_kind {
            AttentionKind::Linear => {
                for buf in [&mut q, &mut k] {
                    for z in buf.iter_mut() {
                        *z = kernels::elu_plus_one(*z);
                    }
                }
                kernels::linear_attention(
                    &q, &k, &v, t, cfg.n_heads, cfg.d_head(), cfg.causal, &mut att,
                );
            }
            AttentionKind::Softmax => {
                kernels::softmax_attention(
                    &q, &k, &v, t, cfg.n_heads, cfg.d_head(), cfg.causal, &mut att, None,
                );
            }
        }

        proj.iter_mut().for_each(|z| *z = 0.0);
        kernels::gemm_nn(&att, layer.w_o.data(), &mut proj, t, d, d);
        for i in 0..t * d {
            proj[i] += x[i];
        }
        kernels::layer_norm_rows(
            &proj,
            layer.ln1_scale.data(),
            layer.ln1_bias.data(),
            d,
            LN_EPS,
            &mut x,
            &mut normed,
            &mut inv_std,
        );

        ff_mid.iter_mut().for_each(|z| *z = 0.0);
        kernels::gemm_nn(&x, layer.ff1.data(), &mut ff_mid, t, d, cfg.d_ff);
        for row in ff_mid.chunks_mut(cfg.d_ff) {
            for (c, z) in row.iter_mut().enumerate() {
                *z = (*z + layer.ff1_b.data()[c]).max(0.0);
            }
        }
        ff_out.iter_mut().for_each(|z| *z = 0.0);
        kernels::gemm_nn(&ff_mid, layer.ff2.data(), &mut ff_out, t, cfg.d_ff, d);
        for i in 0..t {
            for c in 0..d {
                ff_out[i * d + c] += layer.ff2_b.data()[c];
            }
        }
        for i in 0..t * d {
            ff_out[i] += x[i];
        }
        kernels::layer_norm_rows(
            &ff_out,
            layer.ln2_scale.data(),
            layer.ln2_bias.data(),
            d,
            LN_EPS,
            &mut x,
            &mut normed,
            &mut inv_std,
        );
    }

    let hidden = Tensor::new(vec![t, d], x.clone())?;
    hidden.validate_finite("forward_full hidden")?;

    let probs = match cfg.head_kind {
        HeadKind::Tagging => {
            let mut logits = vec![0.0f64; t * cfg.n_labels];
            kernels::gemm_nn(&x, w.head_w.data(), &mut logits, t, d, cfg.n_labels);
            for row in logits.chunks_mut(cfg.n_labels) {
                for (c, z) in row.iter_mut().enumerate() {
                    *z += w.head_b.data()[c];
                }
            }
            kernels::softmax_rows(&mut logits, cfg.n_labels);
            Tensor::new(vec![t, cfg.n_labels], logits)?
        }
        HeadKind::Classification => {
            let mut mean = vec![0.0f64; d];
            let mut n_real = 0usize;
            for (i, &id) in tokens.iter().enumerate() {
                if id != cfg.pad_id {
                    n_real += 1;
                    for c in 0..d {
                        mean[c] += x[i * d + c];
                    }
                }
            }
            if n_real == 0 {
                return Err(ModelError::NoRealTokens);
            }
            mean.iter_mut().for_each(|z| *z /= n_real as f64);
            let mut logits = vec![0.0f64; cfg.n_labels];
            kernels::gemm_nn(&mean, w.head_w.data(), &mut logits, 1, d, cfg.n_labels);
            for (c, z) in logits.iter_mut().enumerate() {
                *z += w.head_b.data()[c];
            }
            kernels::softmax_rows(&mut logits, cfg.n_labels);
            Tensor::new(vec![1, cfg.n_labels], logits)?
        }
    };
    probs.validate_finite("forward_full probs")?;
    Ok(ForwardOutput { hidden, probs })
}

/// Tape handles for every parameter, in `ModelWeights::named` order.
pub struct TapedParams {
    pub vars: Vec<(String, Var)>,
    token_emb: Var,
    pos_emb: Var,
    layers: Vec<TapedLayer>,
    head_w: Var,
    head_b: Var,
}

struct TapedLayer {
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ff1: Var,
    ff1_b: Var,
    ff2: Var,
    ff2_b: Var,
    ln1_scale: Var,
    ln1_bias: Var,
    ln2_scale: Var,
    ln2_bias: Var,
}

impl TapedParams {
    /// Register every weight tensor as a parameter leaf on the tape.
    pub fn register(tape: &mut Tape, w: &ModelWeights) -> Result<Self, ModelError> {
        let mut vars = Vec::new();
        for (name, t) in w.named() {
            vars.push((name, tape.param(t)?));
        }
        let mut it = vars.iter();
        let mut next = || it.next().expect("var order matches named order").1;
        let token_emb = next();
        let pos_emb = next();
        let layers = (0..w.layers.len())
            .map(|_| TapedLayer {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ff1: next(),
                ff1_b: next(),
                ff2: next(),
                ff2_b: next(),
                ln1_scale: next(),
                ln1_bias: next(),
                ln2_scale: next(),
                ln2_bias: next(),
            })
            .collect();
        let head_w = next();
        let head_b = next();
        Ok(TapedParams { vars, token_emb, pos_emb, layers, head_w, head_b })
    }

    /// Copy computed gradients back into the weight tensors' `grad` fields.
    pub fn write_grads(&self, tape: &Tape, w: &mut ModelWeights) {
        for ((_, var), (_, tensor)) in self.vars.iter().zip(w.named_mut()) {
            tape.write_grad(*var, tensor);
        }
    }
}

/// Taped output of [`forward_on_tape`].
pub struct TapedForward {
    pub hidden: Var,
    pub probs: Var,
}

/// Full forward pass recorded on a tape; mirrors [`forward_full`] exactly
/// (dropout active only when the tape is in training mode).
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &TapedParams,
    tokens: &[u32],
) -> Result<TapedForward, ModelError> {
    check_tokens(cfg, tokens)?;
    let t = tokens.len();
    let emb_scale = (cfg.d_model as f64).sqrt();

    let tok = tape.embedding(params.token_emb, tokens)?;
    let mut x = tape.scale(tok, emb_scale)?;
    if cfg.use_positional {
        let pos_ids: Vec<u32> = (0..t as u32).collect();
        let pos = tape.embedding(params.pos_emb, &pos_ids)?;
        x = tape.add(x, pos)?;
    }
    x = tape.dropout(x, cfg.dropout)?;

    for layer in &params.layers {
        let q = tape.matmul(x, layer.w_q)?;
        let k = tape.matmul(x, layer.w_k)?;
        let v = tape.matmul(x, layer.w_v)?;
        let att = match cfg.attention_kind {
            AttentionKind::Linear => {
                let qp = tape.elu_plus_one(q)?;
                let kp = tape.elu_plus_one(k)?;
                tape.linear_attention(qp, kp, v, cfg.n_heads, cfg.causal)?
            }
            AttentionKind::Softmax => {
                tape.softmax_attention(q, k, v, cfg.n_heads, cfg.causal)?
            }
        };
        let proj = tape.matmul(att, layer.w_o)?;
        let proj = tape.dropout(proj, cfg.dropout)?;
        let res = tape.add(proj, x)?;
        x = tape.layer_norm(res, layer.ln1_scale, layer.ln1_bias, LN_EPS)?;

        let mid = tape.matmul(x, layer.ff1)?;
        let mid = tape.add_bias(mid, layer.ff1_b)?;
        let mid = tape.relu(mid)?;
        let out = tape.matmul(mid, layer.ff2)?;
        let out = tape.add_bias(out, layer.ff2_b)?;
        let out = tape.dropout(out, cfg.dropout)?;
        let res = tape.add(out, x)?;
        x = tape.layer_norm(res, layer.ln2_scale, layer.ln2_bias, LN_EPS)?;
    }

    let probs = match cfg.head_kind {
        HeadKind::Tagging => {
            let logits = tape.matmul(x, params.head_w)?;
            let logits = tape.add_bias(logits, params.head_b)?;
            tape.softmax(logits, 1)?
        }
        HeadKind::Classification => {
            let mask: Vec<bool> = tokens.iter().map(|&id| id != cfg.pad_id).collect();
            if mask.iter().all(|m| !m) {
                return Err(ModelError::NoRealTokens);
            }
            let mean = tape.mean_rows_masked(x, mask)?;
            let logits = tape.matmul(mean, params.head_w)?;
            let logits = tape.add_bias(logits, params.head_b)?;
            tape.softmax(logits, 1)?
        }
    };
    Ok(TapedForward { hidden: x, probs })
}

/// Delay alignment: the prediction for input token t is read at output
/// position t + d. Returns the `n_tokens` aligned rows of `outputs`
/// (which must therefore have at least `n_tokens + d` rows); `d == 0` is
/// the identity.
pub fn apply_delay_head(outputs: &Tensor, d: usize, n_tokens: usize) -> Result<Tensor, ModelError> {
    let rows = outputs.rows();
    let cols = outputs.cols();
    if rows < n_tokens + d {
        return Err(ModelError::Invalid(format!(
            "delay {d} over {n_tokens} tokens needs {} output rows, got {rows}",
            n_tokens + d
        )));
    }
    let data = outputs.data()[d * cols..(d + n_tokens) * cols].to_vec();
    Ok(Tensor::new(vec![n_tokens, cols], data)?)
}

/// Training-side delay alignment: targets and loss mask over `labels.len() + d`
/// output positions. The first `d` positions carry no target.
pub fn delayed_targets(labels: &[u32], d: usize) -> (Vec<u32>, Vec<bool>) {
    let total = labels.len() + d;
    let mut targets = vec![0u32; total];
    let mut mask = vec![false; total];
    for (i, &l) in labels.iter().enumerate() {
        targets[i + d] = l;
        mask[i + d] = true;
    }
    (targets, mask)
}

/// Input padded with `d` trailing PAD tokens for delayed training/inference.
pub fn padded_tokens(tokens: &[u32], pad_id: u32, d: usize) -> Vec<u32> {
    let mut out = tokens.to_vec();
    out.extend(std::iter::repeat(pad_id).take(d));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadKind;

    fn small_cfg(kind: AttentionKind, causal: bool) -> ModelConfig {
        let mut cfg = ModelConfig::desk_default(12, 4, HeadKind::Tagging);
        cfg.attention_kind = kind;
        cfg.causal = causal;
        cfg.n_layers = 2;
        cfg.n_heads = 2;
        cfg.d_model = 16;
        cfg.d_ff = 32;
        cfg.max_len = 32;
        cfg.dropout = 0.0;
        cfg
    }

    #[test]
    fn forward_validates_inputs() {
        let cfg = small_cfg(AttentionKind::Linear, true);
        let w = ModelWeights::init(&cfg, 3);
        assert!(matches!(forward_full(&cfg, &w, &[]), Err(ModelError::EmptyInput)));
        assert!(matches!(
            forward_full(&cfg, &w, &[99]),
            Err(ModelError::TokenOutOfRange { .. })
        ));
        let long = vec![1u32; cfg.max_len + 1];
        assert!(matches!(
            forward_full(&cfg, &w, &long),
            Err(ModelError::TooLong { .. })
        ));
    }

    #[test]
    fn taped_eval_matches_inference_path() {
        for kind in [AttentionKind::Linear, AttentionKind::Softmax] {
            for causal in [true, false] {
                let cfg = small_cfg(kind, causal);
                let w = ModelWeights::init(&cfg, 5);
                let tokens = [1u32, 3, 5, 7, 2, 4];
                let plain = forward_full(&cfg, &w, &tokens).unwrap();

                let mut tape = Tape::inference();
                let params = TapedParams::register(&mut tape, &w).unwrap();
                let taped = forward_on_tape(&mut tape, &cfg, &params, &tokens).unwrap();
                let tp = tape.value(taped.probs);
                for (a, b) in plain.probs.data().iter().zip(tp) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b} ({kind:?}, causal={causal})");
                }
                let th = tape.value(taped.hidden);
                for (a, b) in plain.hidden.data().iter().zip(th) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn causal_prefix_insensitivity() {
        // With causal attention, positions 1..=2 must be identical between
        // [a,b,c] and [a,b,x] (exactly).
        for kind in [AttentionKind::Linear, AttentionKind::Softmax] {
            let cfg = small_cfg(kind, true);
            let w = ModelWeights::init(&cfg, 9);
            let h1 = forward_full(&cfg, &w, &[1, 2, 3]).unwrap();
            let h2 = forward_full(&cfg, &w, &[1, 2, 9]).unwrap();
            let d = cfg.d_model;
            assert_eq!(&h1.hidden.data()[..2 * d], &h2.hidden.data()[..2 * d]);
            assert_ne!(&h1.hidden.data()[2 * d..], &h2.hidden.data()[2 * d..]);
        }
    }

    #[test]
    fn delay_alignment_examples() {
        // d=0 is the identity.
        let out = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let aligned = apply_delay_head(&out, 0, 3).unwrap();
        assert_eq!(aligned.data(), out.data());

        // d=1, T=3: token 1 read at row 2 etc. (rows 1..4 of 4).
        let out = Tensor::new(vec![4, 1], vec![10., 11., 12., 13.]).unwrap();
        let aligned = apply_delay_head(&out, 1, 3).unwrap();
        assert_eq!(aligned.data(), &[11., 12., 13.]);

        let (targets, mask) = delayed_targets(&[7, 8, 9], 1);
        assert_eq!(targets, vec![0, 7, 8, 9]);
        assert_eq!(mask, vec![false, true, true, true]);
        assert_eq!(padded_tokens(&[5, 6], 0, 2), vec![5, 6, 0, 0]);
    }
}
