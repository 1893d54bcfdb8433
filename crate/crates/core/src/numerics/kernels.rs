//! Raw f64 compute kernels shared by the inference path and the tape ops.
//!
//! The GEMM is cache-blocked with a 2x8 AVX2/FMA microkernel behind runtime
//! feature detection and a blocked scalar fallback, single-threaded by
//! design. Attention kernels operate on row-major `(T, n_heads * d_head)`
//! buffers where head `h` occupies the column block `h*d_head..(h+1)*d_head`.

/// C(m,n) += A(m,k) * B(k,n), all row-major.
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    if m == 1 {
        // Matrix-vector row: stream B once, accumulate into the single C row.
        for p in 0..k {
            let ap = a[p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c[j] += ap * brow[j];
            }
        }
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            unsafe { gemm_nn_avx(a, b, c, m, k, n) };
            return;
        }
    }
    gemm_nn_scalar(a, b, c, m, k, n);
}

const KC: usize = 256;
const NC: usize = 64;

fn gemm_nn_scalar(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let mut pb = 0;
    while pb < k {
        let kb = KC.min(k - pb);
        let mut jb = 0;
        while jb < n {
            let nb = NC.min(n - jb);
            let mut j = jb;
            while j + 4 <= jb + nb {
                let mut i = 0;
                while i + 2 <= m {
                    let mut acc = [0.0f64; 8];
                    for p in pb..pb + kb {
                        let a0 = a[i * k + p];
                        let a1 = a[(i + 1) * k + p];
                        let bp = &b[p * n + j..p * n + j + 4];
                        acc[0] += a0 * bp[0];
                        acc[1] += a0 * bp[1];
                        acc[2] += a0 * bp[2];
                        acc[3] += a0 * bp[3];
                        acc[4] += a1 * bp[0];
                        acc[5] += a1 * bp[1];
                        acc[6] += a1 * bp[2];
                        acc[7] += a1 * bp[3];
                    }
                    for (q, v) in acc[..4].iter().enumerate() {
                        c[i * n + j + q] += v;
                    }
                    for (q, v) in acc[4..].iter().enumerate() {
                        c[(i + 1) * n + j + q] += v;
                    }
                    i += 2;
                }
                if i < m {
                    let mut acc = [0.0f64; 4];
                    for p in pb..pb + kb {
                        let a0 = a[i * k + p];
                        let bp = &b[p * n + j..p * n + j + 4];
                        for (q, acc_q) in acc.iter_mut().enumerate() {
                            *acc_q += a0 * bp[q];
                        }
                    }
                    for (q, v) in acc.iter().enumerate() {
                        c[i * n + j + q] += v;
                    }
                }
                j += 4;
            }
            while j < jb + nb {
                for i in 0..m {
                    let mut s = 0.0;
                    for p in pb..pb + kb {
                        s += a[i * k + p] * b[p * n + j];
                    }
                    c[i * n + j] += s;
                }
                j += 1;
            }
            jb += nb;
        }
        pb += kb;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn gemm_nn_avx(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    use std::arch::x86_64::*;
    let mut pb = 0;
    while pb < k {
        let kb = KC.min(k - pb);
        let mut jb = 0;
        while jb < n {
            let nb = NC.min(n - jb);
            let mut j = jb;
            while j + 8 <= jb + nb {
                let mut i = 0;
                while i + 2 <= m {
                    let mut acc00 = _mm256_setzero_pd();
                    let mut acc01 = _mm256_setzero_pd();
                    let mut acc10 = _mm256_setzero_pd();
                    let mut acc11 = _mm256_setzero_pd();
                    for p in pb..pb + kb {
                        let b0 = _mm256_loadu_pd(b.as_ptr().add(p * n + j));
                        let b1 = _mm256_loadu_pd(b.as_ptr().add(p * n + j + 4));
                        let a0 = _mm256_set1_pd(*a.get_unchecked(i * k + p));
                        let a1 = _mm256_set1_pd(*a.get_unchecked((i + 1) * k + p));
                        acc00 = _mm256_fmadd_pd(a0, b0, acc00);
                        acc01 = _mm256_fmadd_pd(a0, b1, acc01);
                        acc10 = _mm256_fmadd_pd(a1, b0, acc10);
                        acc11 = _mm256_fmadd_pd(a1, b1, acc11);
                    }
                    let cp = c.as_mut_ptr();
                    let c00 = cp.add(i * n + j);
                    let c01 = cp.add(i * n + j + 4);
                    let c10 = cp.add((i + 1) * n + j);
                    let c11 = cp.add((i + 1) * n + j + 4);
                    _mm256_storeu_pd(c00, _mm256_add_pd(_mm256_loadu_pd(c00), acc00));
                    _mm256_storeu_pd(c01, _mm256_add_pd(_mm256_loadu_pd(c01), acc01));
                    _mm256_storeu_pd(c10, _mm256_add_pd(_mm256_loadu_pd(c10), acc10));
                    _mm256_storeu_pd(c11, _mm256_add_pd(_mm256_loadu_pd(c11), acc11));
                    i += 2;
                }
                if i < m {
                    let mut acc0 = _mm256_setzero_pd();
                    let mut acc1 = _mm256_setzero_pd();
                    for p in pb..pb + kb {
                        let b0 = _mm256_loadu_pd(b.as_ptr().add(p * n + j));
                        let b1 = _mm256_loadu_pd(b.as_ptr().add(p * n + j + 4));
                        let a0 = _mm256_set1_pd(*a.get_unchecked(i * k + p));
                        acc0 = _mm256_fmadd_pd(a0, b0, acc0);
                        acc1 = _mm256_fmadd_pd(a0, b1, acc1);
                    }
                    let cp = c.as_mut_ptr();
                    let c0 = cp.add(i * n + j);
                    let c1 = cp.add(i * n + j + 4);
                    _mm256_storeu_pd(c0, _mm256_add_pd(_mm256_loadu_pd(c0), acc0));
                    _mm256_storeu_pd(c1, _mm256_add_pd(_mm256_loadu_pd(c1), acc1));
                }
                j += 8;
            }
            while j < jb + nb {
                for i in 0..m {
                    let mut s = 0.0;
                    for p in pb..pb + kb {
                        s += a[i * k + p] * b[p * n + j];
                    }
                    c[i * n + j] += s;
                }
                j += 1;
            }
            jb += nb;
        }
        pb += kb;
    }
}

/// C(m,n) += A(m,k) * B(n,k)^T. Used by matmul backward (dA = dC * B^T).
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cj) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            *cj += s;
        }
    }
}

/// C(m,n) += A(k,m)^T * B(k,n). Used by matmul backward (dB = A^T * dC).
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Numerically stabilized softmax over each contiguous row of length `cols`.
pub fn softmax_rows(data: &mut [f64], cols: usize) {
    debug_assert_eq!(data.len() % cols.max(1), 0);
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// phi(x) = elu(x) + 1: x + 1 for x > 0, exp(x) for x <= 0. Strictly positive.
pub fn elu_plus_one(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Derivative of `elu_plus_one` expressed via its output value.
pub fn elu_plus_one_grad(x: f64, y: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        y
    }
}

pub fn map_elu_plus_one(src: &[f64], dst: &mut [f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = elu_plus_one(s);
    }
}

/// Layer norm over each row; writes the normalized output into `out` and the
/// per-row inverse std into `inv_std` (needed by backward).
pub fn layer_norm_rows(
    x: &[f64],
    scale: &[f64],
    bias: &[f64],
    cols: usize,
    eps: f64,
    out: &mut [f64],
    normed: &mut [f64],
    inv_std: &mut [f64],
) {
    let rows = x.len() / cols;
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for c in 0..cols {
            let nv = (xr[c] - mean) * istd;
            normed[r * cols + c] = nv;
            out[r * cols + c] = nv * scale[c] + bias[c];
        }
    }
}

/// Causal (or full) normalized linear attention of Eqs. 1-2, multi-head.
///
/// `q_phi`/`k_phi` are the feature-mapped queries/keys, `v` the values, all
/// `(t, n_heads * d_head)` row-major. For each head the kernel maintains the
/// running sums S_i = sum_{j<=i} phi(K_j) V_j^T and Z_i = sum_{j<=i} phi(K_j)
/// and emits phi(Q_i)^T S_i / phi(Q_i)^T Z_i. With `causal == false` the sums
/// run over the whole sequence for every position.
pub fn linear_attention(
    q_phi: &[f64],
    k_phi: &[f64],
    v: &[f64],
    t: usize,
    n_heads: usize,
    d_head: usize,
    causal: bool,
    out: &mut [f64],
) {
    let d = n_heads * d_head;
    debug_assert_eq!(q_phi.len(), t * d);
    debug_assert_eq!(out.len(), t * d);
    let mut s = vec![0.0f64; d_head * d_head];
    let mut z = vec![0.0f64; d_head];
    for h in 0..n_heads {
        let off = h * d_head;
        s.iter_mut().for_each(|v| *v = 0.0);
        z.iter_mut().for_each(|v| *v = 0.0);
        if causal {
            for i in 0..t {
                let ki = &k_phi[i * d + off..i * d + off + d_head];
                let vi = &v[i * d + off..i * d + off + d_head];
                for a in 0..d_head {
                    let ka = ki[a];
                    let srow = &mut s[a * d_head..(a + 1) * d_head];
                    for (b, sv) in srow.iter_mut().enumerate() {
                        *sv += ka * vi[b];
                    }
                    z[a] += ka;
                }
                let qi = &q_phi[i * d + off..i * d + off + d_head];
                attention_readout(qi, &s, &z, d_head, &mut out[i * d + off..i * d + off + d_head]);
            }
        } else {
            for i in 0..t {
                let ki = &k_phi[i * d + off..i * d + off + d_head];
                let vi = &v[i * d + off..i * d + off + d_head];
                for a in 0..d_head {
                    let ka = ki[a];
                    let srow = &mut s[a * d_head..(a + 1) * d_head];
                    for (b, sv) in srow.iter_mut().enumerate() {
                        *sv += ka * vi[b];
                    }
                    z[a] += ka;
                }
            }
            for i in 0..t {
                let qi = &q_phi[i * d + off..i * d + off + d_head];
                attention_readout(qi, &s, &z, d_head, &mut out[i * d + off..i * d + off + d_head]);
            }
        }
    }
}

/// out = q^T S / (q . z) for one position of one head.
pub fn attention_readout(q: &[f64], s: &[f64], z: &[f64], d_head: usize, out: &mut [f64]) {
    let mut den = 0.0;
    for a in 0..d_head {
        den += q[a] * z[a];
    }
    debug_assert!(
        den > 0.0,
        "linear attention denominator must be strictly positive, got {den}"
    );
    out.iter_mut().for_each(|v| *v = 0.0);
    for a in 0..d_head {
        let qa = q[a];
        let srow = &s[a * d_head..(a + 1) * d_head];
        for (b, o) in out.iter_mut().enumerate() {
            *o += qa * srow[b];
        }
    }
    for o in out.iter_mut() {
        *o /= den;
    }
}

/// Standard scaled dot-product attention, multi-head, optionally causal.
/// When `weights_out` is provided it receives the post-softmax attention
/// matrix per head, laid out `(n_heads, t, t)` (needed by backward).
pub fn softmax_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    n_heads: usize,
    d_head: usize,
    causal: bool,
    out: &mut [f64],
    mut weights_out: Option<&mut [f64]>,
) {
    let d = n_heads * d_head;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut scores = vec![0.0f64; t];
    for h in 0..n_heads {
        let off = h * d_head;
        for i in 0..t {
            let limit = if causal { i + 1 } else { t };
            let qi = &q[i * d + off..i * d + off + d_head];
            for j in 0..limit {
                let kj = &k[j * d + off..j * d + off + d_head];
                let mut s = 0.0;
                for a in 0..d_head {
                    s += qi[a] * kj[a];
                }
                scores[j] = s * scale;
            }
            softmax_rows(&mut scores[..limit], limit);
            let oi = &mut out[i * d + off..i * d + off + d_head];
            oi.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..limit {
                let w = scores[j];
                let vj = &v[j * d + off..j * d + off + d_head];
                for (b, o) in oi.iter_mut().enumerate() {
                    *o += w * vj[b];
                }
            }
            if let Some(w) = weights_out.as_deref_mut() {
                let row = &mut w[h * t * t + i * t..h * t * t + (i + 1) * t];
                row[..limit].copy_from_slice(&scores[..limit]);
                row[limit..].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                for j in 0..n {
                    c[i * n + j] += av * b[p * n + j];
                }
            }
        }
        c
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let x = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(salt);
                ((x >> 33) % 1000) as f64 / 250.0 - 2.0
            })
            .collect()
    }

    #[test]
    fn gemm_matches_naive_on_odd_shapes() {
        for &(m, k, n) in &[(1, 7, 5), (3, 1, 4), (37, 129, 83), (64, 64, 64), (2, 300, 9)] {
            let a = pseudo(m * k, 17);
            let b = pseudo(k * n, 91);
            let mut c = vec![0.0; m * n];
            gemm_nn(&a, &b, &mut c, m, k, n);
            let want = naive_gemm(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn gemm_transpose_variants_match_naive() {
        let (m, k, n) = (9, 31, 13);
        let a = pseudo(m * k, 3);
        let b = pseudo(k * n, 5);
        let want = naive_gemm(&a, &b, m, k, n);

        // nt: B supplied as (n, k) transposed.
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }

        // tn: A supplied as (k, m) transposed.
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_is_stable_and_normalized() {
        let mut x = vec![1000.0, 1000.0];
        softmax_rows(&mut x, 2);
        assert_eq!(x, vec![0.5, 0.5]);

        let mut y = vec![1.0, 2.0, 3.0];
        softmax_rows(&mut y, 3);
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((y[0] - 0.09003057317038046).abs() < 1e-12);
        assert!((y[1] - 0.24472847105479767).abs() < 1e-12);
        assert!((y[2] - 0.6652409557748219).abs() < 1e-12);
    }

    #[test]
    fn elu_plus_one_values() {
        assert_eq!(elu_plus_one(0.0), 1.0);
        assert_eq!(elu_plus_one(1.0), 2.0);
        assert!((elu_plus_one(-1.0) - (-1.0f64).exp()).abs() < 1e-15);
        for i in -50..50 {
            assert!(elu_plus_one(i as f64 / 7.0) > 0.0);
        }
    }
}
