//! Learned parameters for one encoder, Xavier-initialized.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ff1: Tensor,
    pub ff1_b: Tensor,
    pub ff2: Tensor,
    pub ff2_b: Tensor,
    pub ln1_scale: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).unwrap().with_grad()
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).unwrap().with_grad()
}

fn zeros(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![0.0; n]).unwrap().with_grad()
}

impl ModelWeights {
    /// All-zero parameter set with the right shapes (checkpoint loading).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let zmat = |r: usize, c: usize| Tensor::zeros(vec![r, c]).with_grad();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                w_q: zmat(d, d),
                w_k: zmat(d, d),
                w_v: zmat(d, d),
                w_o: zmat(d, d),
                ff1: zmat(d, cfg.d_ff),
                ff1_b: zeros(cfg.d_ff),
                ff2: zmat(cfg.d_ff, d),
                ff2_b: zeros(d),
                ln1_scale: zeros(d),
                ln1_bias: zeros(d),
                ln2_scale: zeros(d),
                ln2_bias: zeros(d),
            })
            .collect();
        ModelWeights {
            token_emb: zmat(cfg.vocab_size, d),
            pos_emb: zmat(cfg.max_len, d),
            layers,
            head_w: zmat(d, cfg.n_labels),
            head_b: zeros(cfg.n_labels),
        }
    }

    /// Xavier-uniform init for all weight matrices; layer-norm scales start
    /// at one, biases at zero. Deterministic for a given seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                w_q: xavier(&mut rng, d, d),
                w_k: xavier(&mut rng, d, d),
                w_v: xavier(&mut rng, d, d),
                w_o: xavier(&mut rng, d, d),
                ff1: xavier(&mut rng, d, cfg.d_ff),
                ff1_b: zeros(cfg.d_ff),
                ff2: xavier(&mut rng, cfg.d_ff, d),
                ff2_b: zeros(d),
                ln1_scale: ones(d),
                ln1_bias: zeros(d),
                ln2_scale: ones(d),
                ln2_bias: zeros(d),
            })
            .collect();
        ModelWeights {
            token_emb: xavier(&mut rng, cfg.vocab_size, d),
            pos_emb: xavier(&mut rng, cfg.max_len, d),
            layers,
            head_w: xavier(&mut rng, d, cfg.n_labels),
            head_b: zeros(cfg.n_labels),
        }
    }

    /// Parameters in a stable, documented order, with dotted names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_emb".into(), &self.token_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (field, t) in [
                ("w_q", &l.w_q),
                ("w_k", &l.w_k),
                ("w_v", &l.w_v),
                ("w_o", &l.w_o),
                ("ff1", &l.ff1),
                ("ff1_b", &l.ff1_b),
                ("ff2", &l.ff2),
                ("ff2_b", &l.ff2_b),
                ("ln1_scale", &l.ln1_scale),
                ("ln1_bias", &l.ln1_bias),
                ("ln2_scale", &l.ln2_scale),
                ("ln2_bias", &l.ln2_bias),
            ] {
                out.push((format!("layers.{i}.{field}"), t));
            }
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("token_emb".into(), &mut self.token_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (field, t) in [
                ("w_q", &mut l.w_q),
                ("w_k", &mut l.w_k),
                ("w_v", &mut l.w_v),
                ("w_o", &mut l.w_o),
                ("ff1", &mut l.ff1),
                ("ff1_b", &mut l.ff1_b),
                ("ff2", &mut l.ff2),
                ("ff2_b", &mut l.ff2_b),
                ("ln1_scale", &mut l.ln1_scale),
                ("ln1_bias", &mut l.ln1_bias),
                ("ln2_scale", &mut l.ln2_scale),
                ("ln2_bias", &mut l.ln2_bias),
            ] {
                out.push((format!("layers.{i}.{field}"), t));
            }
        }
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadKind;

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = ModelConfig::desk_default(20, 4, HeadKind::Tagging);
        let a = ModelWeights::init(&cfg, 11);
        let b = ModelWeights::init(&cfg, 11);
        let c = ModelWeights::init(&cfg, 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
        assert_eq!(a.layers.len(), 2);
    }

    #[test]
    fn named_order_is_stable() {
        let cfg = ModelConfig::desk_default(10, 3, HeadKind::Tagging);
        let w = ModelWeights::init(&cfg, 1);
        let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "token_emb");
        assert_eq!(names[2], "layers.0.w_q");
        assert_eq!(names.last().unwrap(), "head_b");
        let mut w2 = w.clone();
        let names_mut: Vec<String> = w2.named_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
    }
}
