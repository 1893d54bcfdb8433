//! Recurrent inference: the linear-attention encoder driven one token at a
//! time with per-layer, per-head running sums
//!
//!   S_i = S_{i-1} + phi(K_i) V_i^T,  Z_i = Z_{i-1} + phi(K_i),  S_0 = Z_0 = 0,
//!
//! so each step costs O(1) in the tokens consumed so far. The step mirrors
//! the causal full forward exactly: iterating `step` over a sequence yields,
//! at each t, the position-t output of `forward_full` on the length-t prefix.

use super::weights::ModelWeights;
use super::{AttentionKind, HeadKind, ModelConfig, ModelError, LN_EPS};
use crate::numerics::kernels;

/// Output of one recurrent step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Final-layer hidden state for this position, length `d_model`.
    pub hidden: Vec<f64>,
    /// Tagging: label distribution for this position.
    /// Classification: distribution from the running hidden-state mean.
    pub probs: Vec<f64>,
}

/// Per-stream recurrent state. One owner per input stream; concurrent
/// streams each hold their own.
#[derive(Debug, Clone)]
pub struct RecurrentState {
    /// `[layer][head]` attention matrices, each `d_head * d_head`.
    s: Vec<f64>,
    /// `[layer][head]` normalizer vectors, each `d_head`.
    z: Vec<f64>,
    /// Tokens consumed so far (including padding).
    t: usize,
    /// Running sum of final-layer hidden states over non-pad tokens.
    hidden_sum: Vec<f64>,
    n_real: usize,
    // scratch buffers, reused across steps
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>,
    proj: Vec<f64>,
    mid: Vec<f64>,
    normed: Vec<f64>,
    inv_std: Vec<f64>,
}

impl RecurrentState {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let dh = cfg.d_head();
        RecurrentState {
            s: vec![0.0; cfg.n_layers * cfg.n_heads * dh * dh],
            z: vec![0.0; cfg.n_layers * cfg.n_heads * dh],
            t: 0,
            hidden_sum: vec![0.0; d],
            n_real: 0,
            x: vec![0.0; d],
            q: vec![0.0; d],
            k: vec![0.0; d],
            v: vec![0.0; d],
            att: vec![0.0; d],
            proj: vec![0.0; d],
            mid: vec![0.0; cfg.d_ff],
            normed: vec![0.0; d],
            inv_std: vec![0.0; 1],
        }
    }

    /// Tokens consumed so far.
    pub fn t(&self) -> usize {
        self.t
    }

    /// Non-padding tokens consumed so far.
    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn reset(&mut self) {
        self.s.iter_mut().for_each(|v| *v = 0.0);
        self.z.iter_mut().for_each(|v| *v = 0.0);
        self.hidden_sum.iter_mut().for_each(|v| *v = 0.0);
        self.t = 0;
        self.n_real = 0;
    }

    /// Verification hook: corrupt the first attention state entry. Used by
    /// the `verify` gate to prove the equivalence check detects a broken
    /// state update; never called on the production path.
    pub fn perturb_first_state(&mut self, delta: f64) {
        if let Some(v) = self.s.first_mut() {
            *v += delta;
        }
    }

    /// Minimum over heads of the attention denominator phi(Q_t)^T Z_t for
    /// the given feature-mapped query; used by invariant checks.
    pub fn min_denominator(&self, cfg: &ModelConfig, q_phi: &[f64], layer: usize) -> f64 {
        let dh = cfg.d_head();
        let mut min = f64::INFINITY;
        for h in 0..cfg.n_heads {
            let z = &self.z[(layer * cfg.n_heads + h) * dh..(layer * cfg.n_heads + h + 1) * dh];
            let den: f64 = q_phi[h * dh..(h + 1) * dh]
                .iter()
                .zip(z)
                .map(|(a, b)| a * b)
                .sum();
            min = min.min(den);
        }
        min
    }

    /// Consume one token: update every layer's (S, Z), produce this
    /// position's output. Constant cost in `t`.
    pub fn step(
        &mut self,
        cfg: &ModelConfig,
        w: &ModelWeights,
        token: u32,
    ) -> Result<StepOutput, ModelError> {
        if cfg.attention_kind != AttentionKind::Linear {
            return Err(ModelError::UnsupportedMode);
        }
        if self.t >= cfg.max_len {
            return Err(ModelError::TooLong { len: self.t + 1, max: cfg.max_len });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange { id: token, vocab: cfg.vocab_size });
        }
        let d = cfg.d_model;
        let dh = cfg.d_head();
        let emb_scale = (d as f64).sqrt();

        let emb = &w.token_emb.data()[token as usize * d..(token as usize + 1) * d];
        for c in 0..d {
            self.x[c] = emb[c] * emb_scale;
        }
        if cfg.use_positional {
            let pos = &w.pos_emb.data()[self.t * d..(self.t + 1) * d];
            for c in 0..d {
                self.x[c] += pos[c];
            }
        }

        for (l, layer) in w.layers.iter().enumerate() {
            for buf in [&mut self.q, &mut self.k, &mut self.v] {
                buf.iter_mut().for_each(|z| *z = 0.0);
            }
            kernels::gemm_nn(&self.x, layer.w_q.data(), &mut self.q, 1, d, d);
            kernels::gemm_nn(&self.x, layer.w_k.data(), &mut self.k, 1, d, d);
            kernels::gemm_nn(&self.x, layer.w_v.data(), &mut self.v, 1, d, d);
            for buf in [&mut self.q, &mut self.k] {
                for z in buf.iter_mut() {
                    *z = kernels::elu_plus_one(*z);
                }
            }

            for h in 0..cfg.n_heads {
                let s = &mut self.s
                    [(l * cfg.n_heads + h) * dh * dh..(l * cfg.n_heads + h + 1) * dh * dh];
                let z = &mut self.z[(l * cfg.n_heads + h) * dh..(l * cfg.n_heads + h + 1) * dh];
                let kp = &self.k[h * dh..(h + 1) * dh];
                let vp = &self.v[h * dh..(h + 1) * dh];
                for a in 0..dh {
                    let ka = kp[a];
                    let srow = &mut s[a * dh..(a + 1) * dh];
                    for (b, sv) in srow.iter_mut().enumerate() {
                        *sv += ka * vp[b];
                    }
                    z[a] += ka;
                }
                kernels::attention_readout(
                    &self.q[h * dh..(h + 1) * dh],
                    s,
                    z,
                    dh,
                    &mut self.att[h * dh..(h + 1) * dh],
                );
            }

            self.proj.iter_mut().for_each(|z| *z = 0.0);
            kernels::gemm_nn(&self.att, layer.w_o.data(), &mut self.proj, 1, d, d);
            for c in 0..d {
                self.proj[c] += self.x[c];
            }
            kernels::layer_norm_rows(
                &self.proj,
                layer.ln1_scale.data(),
                layer.ln1_bias.data(),
                d,
                LN_EPS,
                &mut self.x,
                &mut self.normed,
                &mut self.inv_std,
            );

            self.mid.iter_mut().for_each(|z| *z = 0.0);
            kernels::gemm_nn(&self.x, layer.ff1.data(), &mut self.mid, 1, d, cfg.d_ff);
            for (c, z) in self.mid.iter_mut().enumerate() {
                *z = (*z + layer.ff1_b.data()[c]).max(0.0);
            }
            self.proj.iter_mut().for_each(|z| *z = 0.0);
            kernels::gemm_nn(&self.mid, layer.ff2.data(), &mut self.proj, 1, cfg.d_ff, d);
            for c in 0..d {
                self.proj[c] += layer.ff2_b.data()[c];
            }
            for c in 0..d {
                self.proj[c] += self.x[c];
            }
            kernels::layer_norm_rows(
                &self.proj,
                layer.ln2_scale.data(),
                layer.ln2_bias.data(),
                d,
                LN_EPS,
                &mut self.x,
                &mut self.normed,
                &mut self.inv_std,
            );
        }

        if token != cfg.pad_id {
            for c in 0..d {
                self.hidden_sum[c] += self.x[c];
            }
            self.n_real += 1;
        }
        self.t += 1;

        let probs = match cfg.head_kind {
            HeadKind::Tagging => {
                let mut logits = vec![0.0; cfg.n_labels];
                kernels::gemm_nn(&self.x, w.head_w.data(), &mut logits, 1, d, cfg.n_labels);
                for (c, z) in logits.iter_mut().enumerate() {
                    *z += w.head_b.data()[c];
                }
                kernels::softmax_rows(&mut logits, cfg.n_labels);
                logits
            }
            HeadKind::Classification => {
                if self.n_real == 0 {
                    return Err(ModelError::NoRealTokens);
                }
                let mean: Vec<f64> =
                    self.hidden_sum.iter().map(|v| v / self.n_real as f64).collect();
                let mut logits = vec![0.0; cfg.n_labels];
                kernels::gemm_nn(&mean, w.head_w.data(), &mut logits, 1, d, cfg.n_labels);
                for (c, z) in logits.iter_mut().enumerate() {
                    *z += w.head_b.data()[c];
                }
                kernels::softmax_rows(&mut logits, cfg.n_labels);
                logits
            }
        };
        crate::numerics::Tensor::new(vec![probs.len()], probs.clone())?
            .validate_finite("step probs")?;

        Ok(StepOutput { hidden: self.x.clone(), probs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_full, HeadKind};
    use crate::model::weights::ModelWeights;

    fn cfg(head: HeadKind) -> ModelConfig {
        let mut c = ModelConfig::desk_default(14, 5, head);
        c.n_layers = 2;
        c.n_heads = 2;
        c.d_model = 16;
        c.d_ff = 32;
        c.max_len = 40;
        c.dropout = 0.0;
        c
    }

    #[test]
    fn step_rejects_softmax_attention() {
        let mut c = cfg(HeadKind::Tagging);
        c.attention_kind = AttentionKind::Softmax;
        let w = ModelWeights::init(&c, 1);
        let mut st = RecurrentState::new(&c);
        assert!(matches!(st.step(&c, &w, 1), Err(ModelError::UnsupportedMode)));
    }

    #[test]
    fn fresh_step_equals_forward_on_singleton() {
        let c = cfg(HeadKind::Tagging);
        let w = ModelWeights::init(&c, 2);
        let mut st = RecurrentState::new(&c);
        let out = st.step(&c, &w, 7).unwrap();
        let full = forward_full(&c, &w, &[7]).unwrap();
        for (a, b) in out.probs.iter().zip(full.probs.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in out.hidden.iter().zip(full.hidden.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn step_iteration_matches_causal_full_forward() {
        for head in [HeadKind::Tagging, HeadKind::Classification] {
            let c = cfg(head);
            let w = ModelWeights::init(&c, 3);
            let tokens = [1u32, 4, 9, 2, 6, 11, 3, 5];
            let full = forward_full(&c, &w, &tokens).unwrap();
            let mut st = RecurrentState::new(&c);
            for (i, &tok) in tokens.iter().enumerate() {
                let out = st.step(&c, &w, tok).unwrap();
                // Hidden state matches position i of the full pass.
                for (a, b) in out
                    .hidden
                    .iter()
                    .zip(&full.hidden.data()[i * c.d_model..(i + 1) * c.d_model])
                {
                    assert!((a - b).abs() <= 1e-10, "hidden diverged at {i}");
                }
                match head {
                    HeadKind::Tagging => {
                        for (a, b) in out
                            .probs
                            .iter()
                            .zip(&full.probs.data()[i * c.n_labels..(i + 1) * c.n_labels])
                        {
                            assert!((a - b).abs() <= 1e-10);
                        }
                    }
                    HeadKind::Classification => {
                        // Matches the full forward on the length-(i+1) prefix.
                        let prefix = forward_full(&c, &w, &tokens[..=i]).unwrap();
                        for (a, b) in out.probs.iter().zip(prefix.probs.data()) {
                            assert!((a - b).abs() <= 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn classification_running_mean_skips_padding() {
        let c = cfg(HeadKind::Classification);
        let w = ModelWeights::init(&c, 4);
        let mut st = RecurrentState::new(&c);
        st.step(&c, &w, 3).unwrap();
        let before = st.step(&c, &w, 8).unwrap();
        assert_eq!(st.n_real(), 2);
        // A padding step advances t but neither the mean nor the distribution.
        let after = st.step(&c, &w, c.pad_id).unwrap();
        assert_eq!(st.n_real(), 2);
        assert_eq!(st.t(), 3);
        assert_eq!(before.probs, after.probs);
    }
}
