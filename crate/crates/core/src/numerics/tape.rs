//! Wengert-tape reverse-mode differentiation over [`Tensor`] values.
//!
//! A training step records ops onto a [`Tape`] and calls [`Tape::backward`]
//! once on a scalar loss. Replaying the records in reverse order fills the
//! gradient of every parameter leaf. Backward consumes the tape: the op
//! records and intermediate buffers are cleared, only leaf values and
//! gradients remain readable.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{validate_finite_slice, NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    Matmul { a: Var, b: Var },
    EluPlusOne { x: Var },
    Relu { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, scale: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    MeanAxis { x: Var, axis: usize },
    MeanRowsMasked { x: Var, mask: Vec<bool> },
    SumAll { x: Var },
    Embedding { table: Var, ids: Vec<u32> },
    Concat { parts: Vec<Var>, axis: usize },
    LinearAttention { q: Var, k: Var, v: Var, n_heads: usize, causal: bool },
    SoftmaxAttention { q: Var, k: Var, v: Var, n_heads: usize, weights: Vec<f64> },
    SmoothedCe { probs: Var, targets: Vec<u32>, mask: Vec<bool>, epsilon: f64 },
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    train: bool,
    rng: ChaCha8Rng,
    consumed: bool,
}

impl Tape {
    /// Tape for inference-style evaluation: dropout is the identity.
    pub fn inference() -> Self {
        Tape::with_mode(false, 0)
    }

    /// Tape for a training step; `seed` drives dropout masks.
    pub fn training(seed: u64) -> Self {
        Tape::with_mode(true, seed)
    }

    fn with_mode(train: bool, seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            consumed: false,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of a leaf after `backward`; `None` if it never received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy the computed gradient into the tensor's `grad` field.
    pub fn write_grad(&self, v: Var, tensor: &mut Tensor) {
        tensor.grad = self.grad(v).map(|g| g.to_vec());
    }

    /// Register a constant input (no gradient will be propagated into it).
    pub fn constant(&mut self, t: &Tensor) -> Result<Var, NumericsError> {
        self.leaf_raw(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Register a trainable parameter leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<Var, NumericsError> {
        self.leaf_raw(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn leaf_raw(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        needs_grad: bool,
    ) -> Result<Var, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "leaf shape {:?} vs buffer of {}",
                shape,
                data.len()
            )));
        }
        self.push(shape, data, needs_grad, Op::Leaf)
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        needs_grad: bool,
        op: Op,
    ) -> Result<Var, NumericsError> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        self.nodes.push(Node { shape, data, needs_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<(), NumericsError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(NumericsError::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        validate_finite_slice(&data, "add")?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, data, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        validate_finite_slice(&data, "sub")?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, data, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        validate_finite_slice(&data, "mul")?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, data, ng, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_same_shape(a, b, "div")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x / y)
            .collect();
        validate_finite_slice(&data, "div")?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, data, ng, Op::Div(a, b))
    }

    /// `(rows, cols) + (cols,)` trailing-dimension bias add.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let cols = *self.nodes[x.0].shape.last().unwrap_or(&0);
        let bn = self.nodes[bias.0].data.len();
        if cols != bn {
            return Err(NumericsError::ShapeMismatch(format!(
                "add_bias: trailing dim {cols} vs bias of {bn}"
            )));
        }
        let bias_data = &self.nodes[bias.0].data;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bias_data).map(|(x, b)| x + b))
            .collect();
        validate_finite_slice(&data, "add_bias")?;
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(bias);
        self.push(shape, data, ng, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        validate_finite_slice(&data, "scale")?;
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(shape, data, ng, Op::Scale { x, c })
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch(format!(
                "matmul: {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::gemm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut data, m, k, n);
        validate_finite_slice(&data, "matmul")?;
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![m, n], data, ng, Op::Matmul { a, b })
    }

    /// phi(x) = elu(x) + 1, elementwise; strictly positive output.
    pub fn elu_plus_one(&mut self, x: Var) -> Result<Var, NumericsError> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| kernels::elu_plus_one(v)).collect();
        validate_finite_slice(&data, "elu_plus_one")?;
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(shape, data, ng, Op::EluPlusOne { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(shape, data, ng, Op::Relu { x })
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(NumericsError::InvalidAxis { axis, rank: shape.len() });
        }
        let mut data = self.nodes[x.0].data.clone();
        let (outer, mid, inner) = axis_split(&shape, axis);
        if inner == 1 {
            kernels::softmax_rows(&mut data, mid);
        } else {
            let mut lane = vec![0.0; mid];
            for o in 0..outer {
                for i in 0..inner {
                    for j in 0..mid {
                        lane[j] = data[o * mid * inner + j * inner + i];
                    }
                    kernels::softmax_rows(&mut lane, mid);
                    for j in 0..mid {
                        data[o * mid * inner + j * inner + i] = lane[j];
                    }
                }
            }
        }
        validate_finite_slice(&data, "softmax")?;
        let ng = self.needs(x);
        self.push(shape, data, ng, Op::Softmax { x, axis })
    }

    /// Layer normalization over the trailing dimension with affine params.
    pub fn layer_norm(
        &mut self,
        x: Var,
        scale: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let shape = self.nodes[x.0].shape.clone();
        let cols = *shape.last().unwrap_or(&0);
        if self.nodes[scale.0].data.len() != cols || self.nodes[bias.0].data.len() != cols {
            return Err(NumericsError::ShapeMismatch(format!(
                "layer_norm: trailing dim {cols} vs affine of {}/{}",
                self.nodes[scale.0].data.len(),
                self.nodes[bias.0].data.len()
            )));
        }
        let rows = self.nodes[x.0].data.len() / cols;
        let mut out = vec![0.0; rows * cols];
        let mut normed = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        kernels::layer_norm_rows(
            &self.nodes[x.0].data,
            &self.nodes[scale.0].data,
            &self.nodes[bias.0].data,
            cols,
            eps,
            &mut out,
            &mut normed,
            &mut inv_std,
        );
        validate_finite_slice(&out, "layer_norm")?;
        let ng = self.needs(x) || self.needs(scale) || self.needs(bias);
        self.push(shape, out, ng, Op::LayerNorm { x, scale, bias, normed, inv_std })
    }

    /// Inverted dropout. In inference mode (or p == 0) this is the identity.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, NumericsError> {
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(shape, data, ng, Op::Dropout { x, mask })
    }

    /// Mean along `axis`, keeping the axis with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(NumericsError::InvalidAxis { axis, rank: shape.len() });
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..mid {
                for i in 0..inner {
                    data[o * inner + i] += self.nodes[x.0].data[o * mid * inner + j * inner + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= mid as f64);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let ng = self.needs(x);
        self.push(out_shape, data, ng, Op::MeanAxis { x, axis })
    }

    /// Mean over a subset of rows of a rank-2 tensor (used by the
    /// classification head, where padding rows are excluded).
    pub fn mean_rows_masked(&mut self, x: Var, mask: Vec<bool>) -> Result<Var, NumericsError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 || mask.len() != shape[0] {
            return Err(NumericsError::ShapeMismatch(format!(
                "mean_rows_masked: shape {:?}, mask of {}",
                shape,
                mask.len()
            )));
        }
        let cnt = mask.iter().filter(|m| **m).count();
        if cnt == 0 {
            return Err(NumericsError::Invalid("mean_rows_masked: empty mask".into()));
        }
        let cols = shape[1];
        let mut data = vec![0.0; cols];
        for (r, keep) in mask.iter().enumerate() {
            if *keep {
                for c in 0..cols {
                    data[c] += self.nodes[x.0].data[r * cols + c];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= cnt as f64);
        let ng = self.needs(x);
        self.push(vec![1, cols], data, ng, Op::MeanRowsMasked { x, mask })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.nodes[x.0].data.iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s], ng, Op::SumAll { x })
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, NumericsError> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(NumericsError::ShapeMismatch(
                "embedding table must be rank 2".into(),
            ));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut data = vec![0.0; ids.len() * cols];
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= rows {
                return Err(NumericsError::Invalid(format!(
                    "embedding id {id} out of range (table has {rows} rows)"
                )));
            }
            data[i * cols..(i + 1) * cols]
                .copy_from_slice(&self.nodes[table.0].data[id * cols..(id + 1) * cols]);
        }
        let ng = self.needs(table);
        self.push(vec![ids.len(), cols], data, ng, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Concatenate tensors along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Invalid("concat of zero tensors".into()));
        }
        let base = self.nodes[parts[0].0].shape.clone();
        if axis >= base.len() {
            return Err(NumericsError::InvalidAxis { axis, rank: base.len() });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, d)| i != axis && *d != base[i])
            {
                return Err(NumericsError::ShapeMismatch(format!(
                    "concat: {:?} vs {:?} along axis {axis}",
                    s, base
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; out_shape.iter().product()];
        let out_stride = axis_total * inner;
        let mut offset = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let part_mid = s[axis];
            let part_stride = part_mid * inner;
            for o in 0..outer {
                let src = &self.nodes[p.0].data[o * part_stride..(o + 1) * part_stride];
                data[o * out_stride + offset * inner..o * out_stride + (offset + part_mid) * inner]
                    .copy_from_slice(src);
            }
            offset += part_mid;
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(out_shape, data, ng, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Multi-head normalized linear attention (inputs already feature-mapped).
    pub fn linear_attention(
        &mut self,
        q_phi: Var,
        k_phi: Var,
        v: Var,
        n_heads: usize,
        causal: bool,
    ) -> Result<Var, NumericsError> {
        self.check_same_shape(q_phi, k_phi, "linear_attention")?;
        self.check_same_shape(q_phi, v, "linear_attention")?;
        let shape = self.nodes[q_phi.0].shape.clone();
        if shape.len() != 2 || shape[1] % n_heads != 0 {
            return Err(NumericsError::ShapeMismatch(format!(
                "linear_attention: shape {:?} with {n_heads} heads",
                shape
            )));
        }
        let (t, d) = (shape[0], shape[1]);
        let mut out = vec![0.0; t * d];
        kernels::linear_attention(
            &self.nodes[q_phi.0].data,
            &self.nodes[k_phi.0].data,
            &self.nodes[v.0].data,
            t,
            n_heads,
            d / n_heads,
            causal,
            &mut out,
        );
        validate_finite_slice(&out, "linear_attention")?;
        let ng = self.needs(q_phi) || self.needs(k_phi) || self.needs(v);
        self.push(shape, out, ng, Op::LinearAttention { q: q_phi, k: k_phi, v, n_heads, causal })
    }

    /// Multi-head scaled dot-product attention with optional causal mask.
    pub fn softmax_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        causal: bool,
    ) -> Result<Var, NumericsError> {
        self.check_same_shape(q, k, "softmax_attention")?;
        self.check_same_shape(q, v, "softmax_attention")?;
        let shape = self.nodes[q.0].shape.clone();
        if shape.len() != 2 || shape[1] % n_heads != 0 {
            return Err(NumericsError::ShapeMismatch(format!(
                "softmax_attention: shape {:?} with {n_heads} heads",
                shape
            )));
        }
        let (t, d) = (shape[0], shape[1]);
        let mut out = vec![0.0; t * d];
        let mut weights = vec![0.0; n_heads * t * t];
        kernels::softmax_attention(
            &self.nodes[q.0].data,
            &self.nodes[k.0].data,
            &self.nodes[v.0].data,
            t,
            n_heads,
            d / n_heads,
            causal,
            &mut out,
            Some(&mut weights),
        );
        validate_finite_slice(&out, "softmax_attention")?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(shape, out, ng, Op::SoftmaxAttention { q, k, v, n_heads, weights })
    }

    /// Label-smoothed cross entropy over probability rows. The target row
    /// distribution puts `1 - epsilon` on the gold class and
    /// `epsilon / (C - 1)` elsewhere; the loss is averaged over rows with
    /// `mask[r] == true`.
    pub fn smoothed_cross_entropy(
        &mut self,
        probs: Var,
        targets: &[u32],
        mask: &[bool],
        epsilon: f64,
    ) -> Result<Var, NumericsError> {
        let shape = self.nodes[probs.0].shape.clone();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] != mask.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "smoothed_cross_entropy: probs {:?}, {} targets, {} mask",
                shape,
                targets.len(),
                mask.len()
            )));
        }
        let classes = shape[1];
        if classes < 2 && epsilon > 0.0 {
            return Err(NumericsError::Invalid(
                "label smoothing needs at least 2 classes".into(),
            ));
        }
        let n_eff = mask.iter().filter(|m| **m).count();
        if n_eff == 0 {
            return Err(NumericsError::Invalid(
                "smoothed_cross_entropy: no unmasked rows".into(),
            ));
        }
        let mut loss = 0.0;
        for r in 0..targets.len() {
            if !mask[r] {
                continue;
            }
            let gold = targets[r] as usize;
            if gold >= classes {
                return Err(NumericsError::Invalid(format!(
                    "target {gold} out of range for {classes} classes"
                )));
            }
            let row = &self.nodes[probs.0].data[r * classes..(r + 1) * classes];
            let off = if classes > 1 { epsilon / (classes - 1) as f64 } else { 0.0 };
            for (c, &p) in row.iter().enumerate() {
                let qc = if c == gold { 1.0 - epsilon } else { off };
                if qc != 0.0 {
                    loss -= qc * p.max(CE_FLOOR).ln();
                }
            }
        }
        loss /= n_eff as f64;
        validate_finite_slice(std::slice::from_ref(&loss), "smoothed_cross_entropy")?;
        let ng = self.needs(probs);
        self.push(
            vec![1],
            vec![loss],
            ng,
            Op::SmoothedCe { probs, targets: targets.to_vec(), mask: mask.to_vec(), epsilon },
        )
    }

    /// Reverse pass from a scalar loss. Fills gradients for every leaf that
    /// requires them and clears the tape's op records.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if self.nodes.is_empty() {
            return Err(NumericsError::Invalid("backward on an empty tape".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.apply_backward(idx, &g)?;
            // Leaves keep their gradient; intermediates drop theirs.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.grads[idx] = Some(g);
            }
        }

        // Ensure every parameter leaf reports a gradient, even if zero.
        for idx in 0..self.nodes.len() {
            if matches!(self.nodes[idx].op, Op::Leaf)
                && self.nodes[idx].needs_grad
                && self.grads[idx].is_none()
            {
                self.grads[idx] = Some(vec![0.0; self.nodes[idx].data.len()]);
            }
        }

        // Clear the tape: drop op records and intermediate values.
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Leaf;
                node.data = Vec::new();
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn add_grad(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn apply_backward(&mut self, idx: usize, g: &[f64]) -> Result<(), NumericsError> {
        // The op is moved out so `self` can be borrowed freely; it is
        // restored afterwards (backward runs once per node).
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, g);
                self.add_grad(*b, g);
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].data).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(&self.nodes[a.0].data).map(|(g, x)| g * x).collect();
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::Div(a, b) => {
                let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].data).map(|(g, y)| g / y).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::AddBias { x, bias } => {
                self.add_grad(*x, g);
                let cols = self.nodes[bias.0].data.len();
                let mut db = vec![0.0; cols];
                for row in g.chunks(cols) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.add_grad(*bias, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_grad(*x, &dx);
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(g, &self.nodes[b.0].data, &mut da, m, n, k);
                    self.add_grad(*a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(&self.nodes[a.0].data, g, &mut db, k, m, n);
                    self.add_grad(*b, &db);
                }
            }
            Op::EluPlusOne { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[x.0].data.iter().zip(&self.nodes[idx].data))
                    .map(|(g, (&xv, &yv))| g * kernels::elu_plus_one_grad(xv, yv))
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(g, &xv)| if xv > 0.0 { *g } else { 0.0 })
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[idx].data;
                let shape = &self.nodes[idx].shape;
                let (outer, mid, inner) = axis_split(shape, *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0;
                        for j in 0..mid {
                            let p = o * mid * inner + j * inner + i;
                            dot += g[p] * y[p];
                        }
                        for j in 0..mid {
                            let p = o * mid * inner + j * inner + i;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::LayerNorm { x, scale, bias, normed, inv_std } => {
                let cols = self.nodes[scale.0].data.len();
                let rows = normed.len() / cols;
                let scale_data = &self.nodes[scale.0].data;
                let mut dx = vec![0.0; normed.len()];
                let mut dscale = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let nr = &normed[r * cols..(r + 1) * cols];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_n = 0.0;
                    for c in 0..cols {
                        let dxhat = gr[c] * scale_data[c];
                        mean_dxhat += dxhat;
                        mean_dxhat_n += dxhat * nr[c];
                        dscale[c] += gr[c] * nr[c];
                        dbias[c] += gr[c];
                    }
                    mean_dxhat /= cols as f64;
                    mean_dxhat_n /= cols as f64;
                    for c in 0..cols {
                        let dxhat = gr[c] * scale_data[c];
                        dx[r * cols + c] = inv_std[r] * (dxhat - mean_dxhat - nr[c] * mean_dxhat_n);
                    }
                }
                self.add_grad(*x, &dx);
                self.add_grad(*scale, &dscale);
                self.add_grad(*bias, &dbias);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.add_grad(*x, &dx);
            }
            Op::MeanAxis { x, axis } => {
                let shape = &self.nodes[x.0].shape;
                let (outer, mid, inner) = axis_split(shape, *axis);
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                let inv = 1.0 / mid as f64;
                for o in 0..outer {
                    for j in 0..mid {
                        for i in 0..inner {
                            dx[o * mid * inner + j * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::MeanRowsMasked { x, mask } => {
                let cols = self.nodes[x.0].shape[1];
                let cnt = mask.iter().filter(|m| **m).count();
                let inv = 1.0 / cnt as f64;
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for (r, keep) in mask.iter().enumerate() {
                    if *keep {
                        for c in 0..cols {
                            dx[r * cols + c] = g[c] * inv;
                        }
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::SumAll { x } => {
                let dx = vec![g[0]; self.nodes[x.0].data.len()];
                self.add_grad(*x, &dx);
            }
            Op::Embedding { table, ids } => {
                let cols = self.nodes[table.0].shape[1];
                let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * cols..(id as usize + 1) * cols];
                    for (d, v) in dst.iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                        *d += v;
                    }
                }
                self.add_grad(*table, &dt);
            }
            Op::Concat { parts, axis } => {
                let out_shape = &self.nodes[idx].shape;
                let (outer, _, inner) = axis_split(out_shape, *axis);
                let out_stride = out_shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let part_mid = self.nodes[p.0].shape[*axis];
                    let part_stride = part_mid * inner;
                    let mut dp = vec![0.0; self.nodes[p.0].data.len()];
                    for o in 0..outer {
                        dp[o * part_stride..(o + 1) * part_stride].copy_from_slice(
                            &g[o * out_stride + offset * inner
                                ..o * out_stride + (offset + part_mid) * inner],
                        );
                    }
                    self.add_grad(*p, &dp);
                    offset += part_mid;
                }
            }
            Op::LinearAttention { q, k, v, n_heads, causal } => {
                let (t, d) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                linear_attention_backward(
                    &self.nodes[q.0].data,
                    &self.nodes[k.0].data,
                    &self.nodes[v.0].data,
                    &self.nodes[idx].data,
                    g,
                    t,
                    *n_heads,
                    d / n_heads,
                    *causal,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                self.add_grad(*q, &dq);
                self.add_grad(*k, &dk);
                self.add_grad(*v, &dv);
            }
            Op::SoftmaxAttention { q, k, v, n_heads, weights } => {
                let (t, d) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                softmax_attention_backward(
                    &self.nodes[q.0].data,
                    &self.nodes[k.0].data,
                    &self.nodes[v.0].data,
                    weights,
                    g,
                    t,
                    *n_heads,
                    d / n_heads,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                self.add_grad(*q, &dq);
                self.add_grad(*k, &dk);
                self.add_grad(*v, &dv);
            }
            Op::SmoothedCe { probs, targets, mask, epsilon } => {
                let classes = self.nodes[probs.0].shape[1];
                let n_eff = mask.iter().filter(|m| **m).count() as f64;
                let off = if classes > 1 { epsilon / (classes - 1) as f64 } else { 0.0 };
                let mut dp = vec![0.0; self.nodes[probs.0].data.len()];
                for (r, keep) in mask.iter().enumerate() {
                    if !keep {
                        continue;
                    }
                    let gold = targets[r] as usize;
                    for c in 0..classes {
                        let qc = if c == gold { 1.0 - epsilon } else { off };
                        if qc == 0.0 {
                            continue;
                        }
                        let p = self.nodes[probs.0].data[r * classes + c];
                        if p > CE_FLOOR {
                            dp[r * classes + c] = -g[0] * qc / (p * n_eff);
                        }
                    }
                }
                self.add_grad(*probs, &dp);
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}

/// Probabilities are clamped to this floor inside the cross-entropy log so a
/// fully saturated softmax cannot produce an infinite loss.
const CE_FLOOR: f64 = 1e-300;

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

/// Reverse rule for the normalized linear attention, linear in T for the
/// causal form: one forward sweep rebuilds (S_i, Z_i) and yields dQ, one
/// reverse sweep accumulates the outer-product sums needed for dK and dV.
#[allow(clippy::too_many_arguments)]
fn linear_attention_backward(
    q_phi: &[f64],
    k_phi: &[f64],
    v: &[f64],
    out: &[f64],
    g: &[f64],
    t: usize,
    n_heads: usize,
    d_head: usize,
    causal: bool,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let d = n_heads * d_head;
    let mut s = vec![0.0f64; d_head * d_head];
    let mut z = vec![0.0f64; d_head];
    let mut dmat = vec![0.0f64; d_head * d_head];
    let mut zacc = vec![0.0f64; d_head];
    let mut dens = vec![0.0f64; t];

    for h in 0..n_heads {
        let off = h * d_head;
        let row = |buf: &[f64], i: usize| -> Vec<f64> { buf[i * d + off..i * d + off + d_head].to_vec() };

        s.iter_mut().for_each(|x| *x = 0.0);
        z.iter_mut().for_each(|x| *x = 0.0);

        if !causal {
            for i in 0..t {
                let ki = row(k_phi, i);
                let vi = row(v, i);
                for a in 0..d_head {
                    for b in 0..d_head {
                        s[a * d_head + b] += ki[a] * vi[b];
                    }
                    z[a] += ki[a];
                }
            }
        }

        // Sweep 1: dQ (and the per-position denominators).
        for i in 0..t {
            if causal {
                let ki = row(k_phi, i);
                let vi = row(v, i);
                for a in 0..d_head {
                    for b in 0..d_head {
                        s[a * d_head + b] += ki[a] * vi[b];
                    }
                    z[a] += ki[a];
                }
            }
            let qi = row(q_phi, i);
            let gi = row(g, i);
            let oi = row(out, i);
            let den: f64 = (0..d_head).map(|a| qi[a] * z[a]).sum();
            dens[i] = den;
            let dden = -(0..d_head).map(|b| gi[b] * oi[b]).sum::<f64>() / den;
            for a in 0..d_head {
                let mut acc = 0.0;
                for b in 0..d_head {
                    acc += s[a * d_head + b] * gi[b] / den;
                }
                dq[i * d + off + a] = acc + dden * z[a];
            }
        }

        // Sweep 2: dK, dV via reverse-accumulated sums.
        dmat.iter_mut().for_each(|x| *x = 0.0);
        zacc.iter_mut().for_each(|x| *x = 0.0);
        let backward_at = |i: usize, dmat: &mut [f64], zacc: &mut [f64]| {
            let qi = row(q_phi, i);
            let gi = row(g, i);
            let oi = row(out, i);
            let den = dens[i];
            let dden = -(0..d_head).map(|b| gi[b] * oi[b]).sum::<f64>() / den;
            for a in 0..d_head {
                for b in 0..d_head {
                    dmat[a * d_head + b] += qi[a] * gi[b] / den;
                }
                zacc[a] += dden * qi[a];
            }
        };
        if causal {
            for i in (0..t).rev() {
                backward_at(i, &mut dmat, &mut zacc);
                let ki = row(k_phi, i);
                let vi = row(v, i);
                for a in 0..d_head {
                    let mut acc = zacc[a];
                    for b in 0..d_head {
                        acc += dmat[a * d_head + b] * vi[b];
                    }
                    dk[i * d + off + a] = acc;
                }
                for b in 0..d_head {
                    let mut acc = 0.0;
                    for a in 0..d_head {
                        acc += dmat[a * d_head + b] * ki[a];
                    }
                    dv[i * d + off + b] = acc;
                }
            }
        } else {
            for i in 0..t {
                backward_at(i, &mut dmat, &mut zacc);
            }
            for j in 0..t {
                let kj = row(k_phi, j);
                let vj = row(v, j);
                for a in 0..d_head {
                    let mut acc = zacc[a];
                    for b in 0..d_head {
                        acc += dmat[a * d_head + b] * vj[b];
                    }
                    dk[j * d + off + a] = acc;
                }
                for b in 0..d_head {
                    let mut acc = 0.0;
                    for a in 0..d_head {
                        acc += dmat[a * d_head + b] * kj[a];
                    }
                    dv[j * d + off + b] = acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn softmax_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    weights: &[f64],
    g: &[f64],
    t: usize,
    n_heads: usize,
    d_head: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let d = n_heads * d_head;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut dscore = vec![0.0f64; t];
    for h in 0..n_heads {
        let off = h * d_head;
        let w = &weights[h * t * t..(h + 1) * t * t];
        for i in 0..t {
            let gi = &g[i * d + off..i * d + off + d_head];
            // dA[i][j] = g_i . v_j; dScore = A * (dA - sum_j dA*A)
            let mut dot = 0.0;
            for j in 0..t {
                let aij = w[i * t + j];
                if aij == 0.0 {
                    dscore[j] = 0.0;
                    continue;
                }
                let vj = &v[j * d + off..j * d + off + d_head];
                let da: f64 = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                dscore[j] = da;
                dot += da * aij;
            }
            for j in 0..t {
                let aij = w[i * t + j];
                if aij != 0.0 {
                    let ds = aij * (dscore[j] - dot) * scale;
                    // dq_i += ds * k_j ; dk_j += ds * q_i
                    for a in 0..d_head {
                        dq[i * d + off + a] += ds * k[j * d + off + a];
                        dk[j * d + off + a] += ds * q[i * d + off + a];
                    }
                    // dv_j += A[i][j] * g_i
                    for b in 0..d_head {
                        dv[j * d + off + b] += aij * gi[b];
                    }
                }
            }
        }
    }
}
