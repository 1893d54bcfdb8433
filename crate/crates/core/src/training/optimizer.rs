//! AdamW: Adam moment estimates with bias correction plus decoupled weight
//! decay (the decay multiplies the weight directly, outside the adaptive
//! step).

use super::TrainError;
use crate::numerics::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1, beta2, eps, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> usize {
        self.t
    }

    /// Rescale all gradients so their global L2 norm is at most `clip`.
    pub fn clip_global_norm(params: &mut [(String, &mut Tensor)], clip: f64) {
        let mut sq = 0.0;
        for (_, tensor) in params.iter() {
            if let Some(g) = &tensor.grad {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if norm > clip && norm > 0.0 {
            let scale = clip / norm;
            for (_, tensor) in params.iter_mut() {
                if let Some(g) = &mut tensor.grad {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
    }

    /// One update over the full parameter list (order must be stable across
    /// calls; moment buffers are keyed by position). Consumes each tensor's
    /// `grad` and aborts on non-finite gradients.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<(), TrainError> {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, (name, tensor)) in params.iter_mut().enumerate() {
            let grad = tensor
                .grad
                .take()
                .ok_or_else(|| TrainError::MissingGradient { name: name.clone() })?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::BadGradient { name: name.clone() });
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                // Decoupled decay on the incoming weight, then the adaptive step.
                data[i] -= self.lr * self.weight_decay * data[i];
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> Tensor {
        Tensor::new(vec![1], vec![value]).unwrap().with_grad()
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_weights() {
        let mut w = one_param(1.5);
        w.grad = Some(vec![0.0]);
        let mut opt = AdamW::new(0.1, 0.9, 0.98, 1e-8, 0.0);
        let mut params = vec![("w".to_string(), &mut w)];
        opt.step(&mut params).unwrap();
        assert_eq!(w.data(), &[1.5]);
    }

    #[test]
    fn single_step_matches_hand_computed_update() {
        // Constant gradient 1.0, lr 0.1, betas (0.9, 0.98), eps 1e-8, no decay:
        // m = 0.1, v = 0.02, m_hat = 1, v_hat = 1
        // w <- 1 - 0.1 * 1 / (1 + 1e-8)
        let mut w = one_param(1.0);
        w.grad = Some(vec![1.0]);
        let mut opt = AdamW::new(0.1, 0.9, 0.98, 1e-8, 0.0);
        let mut params = vec![("w".to_string(), &mut w)];
        opt.step(&mut params).unwrap();
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((w.data()[0] - want).abs() < 1e-15, "{} vs {want}", w.data()[0]);
    }

    #[test]
    fn decoupled_decay_shrinks_weights_exactly() {
        let mut w = one_param(2.0);
        w.grad = Some(vec![0.0]);
        let mut opt = AdamW::new(0.1, 0.9, 0.98, 1e-8, 0.5);
        let mut params = vec![("w".to_string(), &mut w)];
        opt.step(&mut params).unwrap();
        assert!((w.data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut w = one_param(1.0);
        w.grad = Some(vec![f64::NAN]);
        let mut opt = AdamW::new(0.1, 0.9, 0.98, 1e-8, 0.0);
        let mut params = vec![("theta".to_string(), &mut w)];
        let err = opt.step(&mut params).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }

    #[test]
    fn global_norm_clip() {
        let mut a = one_param(0.0);
        let mut b = one_param(0.0);
        a.grad = Some(vec![3.0]);
        b.grad = Some(vec![4.0]);
        let mut params = vec![("a".to_string(), &mut a), ("b".to_string(), &mut b)];
        AdamW::clip_global_norm(&mut params, 1.0);
        let ga = a.grad.as_ref().unwrap()[0];
        let gb = b.grad.as_ref().unwrap()[0];
        assert!(((ga * ga + gb * gb).sqrt() - 1.0).abs() < 1e-12);
        assert!((ga / gb - 0.75).abs() < 1e-12);
    }
}
