//! Finite-difference validation of every differentiable tape op: central
//! differences at h = 1e-6 in f64, random inputs in [-2, 2], 100 trials per
//! op, relative tolerance 1e-4.

mod common;

use common::{central_diff, grads_close, SplitMix};
use increc::numerics::{Tape, Var};

const H: f64 = 1e-6;
const REL: f64 = 1e-4;
const FLOOR: f64 = 1e-8;
const TRIALS: usize = 100;

/// FD check of d(sum(covec * build(x)))/dx for one differentiated leaf.
/// Constants used by `build` must be created inside it so every fresh tape
/// sees the same graph.
fn check(
    name: &str,
    seed: u64,
    shape: Vec<usize>,
    sample: impl Fn(&mut SplitMix, usize) -> Vec<f64>,
    build: impl Fn(&mut Tape, Var) -> Var,
) {
    let n: usize = shape.iter().product();
    let mut rng = SplitMix(seed);
    for trial in 0..TRIALS {
        let x0 = sample(&mut rng, n);

        let out_len = {
            let mut tape = Tape::inference();
            let x = tape.leaf_raw(shape.clone(), x0.clone(), true).unwrap();
            let y = build(&mut tape, x);
            tape.value(y).len()
        };
        let covec: Vec<f64> = (0..out_len).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let mut scalar = |xs: &[f64]| -> f64 {
            let mut tape = Tape::inference();
            let x = tape.leaf_raw(shape.clone(), xs.to_vec(), false).unwrap();
            let y = build(&mut tape, x);
            tape.value(y).iter().zip(&covec).map(|(v, c)| v * c).sum()
        };
        let numeric = central_diff(&mut scalar, &x0, H);

        let mut tape = Tape::inference();
        let x = tape.leaf_raw(shape.clone(), x0.clone(), true).unwrap();
        let y = build(&mut tape, x);
        let yshape = tape.shape(y).to_vec();
        let cv = tape.leaf_raw(yshape, covec.clone(), false).unwrap();
        let prod = tape.mul(y, cv).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).expect("leaf gradient");

        grads_close(analytic, &numeric, REL, FLOOR)
            .unwrap_or_else(|e| panic!("{name} (trial {trial}): {e}"));
    }
}

fn uniform(rng: &mut SplitMix, n: usize) -> Vec<f64> {
    rng.fill(n, -2.0, 2.0)
}

/// Uniform but bounded away from zero (for kinked or divided-by ops).
fn uniform_away_from_zero(rng: &mut SplitMix, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.uniform(0.01, 2.0);
            if rng.next_u64() % 2 == 0 {
                v
            } else {
                -v
            }
        })
        .collect()
}

#[test]
fn fd_add_sub_scale_bias() {
    check("add", 11, vec![3, 4], uniform, |tape, x| {
        let c = tape
            .leaf_raw(vec![3, 4], (0..12).map(|i| i as f64 / 5.0 - 1.0).collect(), false)
            .unwrap();
        tape.add(x, c).unwrap()
    });
    check("sub", 12, vec![3, 4], uniform, |tape, x| {
        let c = tape
            .leaf_raw(vec![3, 4], (0..12).map(|i| i as f64 / 7.0 - 0.5).collect(), false)
            .unwrap();
        tape.sub(c, x).unwrap()
    });
    check("scale", 13, vec![3, 4], uniform, |tape, x| {
        tape.scale(x, -1.7).unwrap()
    });
    check("add_bias", 14, vec![4], uniform, |tape, x| {
        let m = tape
            .leaf_raw(vec![3, 4], (0..12).map(|i| i as f64 / 3.0 - 2.0).collect(), false)
            .unwrap();
        tape.add_bias(m, x).unwrap()
    });
}

#[test]
fn fd_mul_div() {
    check("mul", 21, vec![3, 4], uniform, |tape, x| {
        let c = tape
            .leaf_raw(vec![3, 4], (0..12).map(|i| i as f64 / 4.0 - 1.3).collect(), false)
            .unwrap();
        tape.mul(x, c).unwrap()
    });
    check("div_num", 22, vec![3, 4], uniform, |tape, x| {
        let c = tape
            .leaf_raw(vec![3, 4], (0..12).map(|i| 0.5 + (i as f64) / 11.0).collect(), false)
            .unwrap();
        tape.div(x, c).unwrap()
    });
    check("div_den", 23, vec![3, 4], uniform_away_from_zero, |tape, x| {
        let c = tape
            .leaf_raw(vec![3, 4], (0..12).map(|i| i as f64 / 6.0 - 1.1).collect(), false)
            .unwrap();
        tape.div(c, x).unwrap()
    });
}

#[test]
fn fd_matmul_both_sides() {
    check("matmul_lhs", 31, vec![4, 5], uniform, |tape, x| {
        let b = tape
            .leaf_raw(vec![5, 3], (0..15).map(|i| i as f64 / 8.0 - 0.9).collect(), false)
            .unwrap();
        tape.matmul(x, b).unwrap()
    });
    check("matmul_rhs", 32, vec![5, 3], uniform, |tape, x| {
        let a = tape
            .leaf_raw(vec![4, 5], (0..20).map(|i| i as f64 / 9.0 - 1.1).collect(), false)
            .unwrap();
        tape.matmul(a, x).unwrap()
    });
}

#[test]
fn fd_elementwise_nonlinearities() {
    // elu+1 is C1 everywhere, so plain uniform sampling is fine.
    check("elu_plus_one", 41, vec![3, 4], uniform, |tape, x| {
        tape.elu_plus_one(x).unwrap()
    });
    // relu has a kink at 0; sample away from it.
    check("relu", 42, vec![3, 4], uniform_away_from_zero, |tape, x| {
        tape.relu(x).unwrap()
    });
}

#[test]
fn fd_softmax_both_axes() {
    check("softmax_rows", 51, vec![3, 4], uniform, |tape, x| {
        tape.softmax(x, 1).unwrap()
    });
    check("softmax_cols", 52, vec![3, 4], uniform, |tape, x| {
        tape.softmax(x, 0).unwrap()
    });
}

#[test]
fn fd_layer_norm_all_inputs() {
    check("layer_norm_x", 61, vec![3, 6], uniform, |tape, x| {
        let s = tape
            .leaf_raw(vec![6], (0..6).map(|i| 0.5 + i as f64 / 6.0).collect(), false)
            .unwrap();
        let b = tape
            .leaf_raw(vec![6], (0..6).map(|i| i as f64 / 10.0 - 0.2).collect(), false)
            .unwrap();
        tape.layer_norm(x, s, b, 1e-5).unwrap()
    });
    check("layer_norm_scale", 62, vec![6], uniform, |tape, x| {
        let m = tape
            .leaf_raw(vec![3, 6], (0..18).map(|i| i as f64 / 5.0 - 1.5).collect(), false)
            .unwrap();
        let b = tape.leaf_raw(vec![6], vec![0.1; 6], false).unwrap();
        tape.layer_norm(m, x, b, 1e-5).unwrap()
    });
    check("layer_norm_bias", 63, vec![6], uniform, |tape, x| {
        let m = tape
            .leaf_raw(vec![3, 6], (0..18).map(|i| i as f64 / 4.0 - 2.0).collect(), false)
            .unwrap();
        let s = tape.leaf_raw(vec![6], vec![1.0; 6], false).unwrap();
        tape.layer_norm(m, s, x, 1e-5).unwrap()
    });
}

#[test]
fn fd_reductions_and_lookup() {
    check("mean_axis0", 71, vec![3, 4], uniform, |tape, x| {
        tape.mean_axis(x, 0).unwrap()
    });
    check("mean_axis1", 72, vec![3, 4], uniform, |tape, x| {
        tape.mean_axis(x, 1).unwrap()
    });
    check("mean_rows_masked", 73, vec![4, 3], uniform, |tape, x| {
        tape.mean_rows_masked(x, vec![true, false, true, true]).unwrap()
    });
    check("embedding", 74, vec![5, 3], uniform, |tape, x| {
        tape.embedding(x, &[4, 0, 2, 0]).unwrap()
    });
    check("concat", 75, vec![3, 2], uniform, |tape, x| {
        let c = tape
            .leaf_raw(vec![3, 3], (0..9).map(|i| i as f64 / 2.0 - 2.0).collect(), false)
            .unwrap();
        tape.concat(&[x, c], 1).unwrap()
    });
}

#[test]
fn fd_linear_attention_composed_with_feature_map() {
    // Raw q/k pass through elu+1 on the tape, so denominators stay positive
    // while the FD perturbs unconstrained inputs.
    let t = 5;
    let heads = 2;
    let d = 6;
    for (name, seed, causal) in [("linear_att_causal", 81u64, true), ("linear_att_full", 85, false)]
    {
        for (input, iseed) in [("q", 0u64), ("k", 1), ("v", 2)] {
            check(
                &format!("{name}_{input}"),
                seed + iseed,
                vec![t, d],
                uniform,
                |tape, x| {
                    let mk = |tape: &mut Tape, salt: u64| {
                        let mut r = SplitMix(salt);
                        let data = r.fill(t * d, -1.5, 1.5);
                        tape.leaf_raw(vec![t, d], data, false).unwrap()
                    };
                    let (q, k, v) = match input {
                        "q" => (x, mk(tape, 100 + seed), mk(tape, 200 + seed)),
                        "k" => (mk(tape, 100 + seed), x, mk(tape, 200 + seed)),
                        _ => (mk(tape, 100 + seed), mk(tape, 200 + seed), x),
                    };
                    let qp = tape.elu_plus_one(q).unwrap();
                    let kp = tape.elu_plus_one(k).unwrap();
                    tape.linear_attention(qp, kp, v, heads, causal).unwrap()
                },
            );
        }
    }
}

#[test]
fn fd_softmax_attention() {
    let t = 5;
    let heads = 2;
    let d = 6;
    for (name, seed, causal) in [("softmax_att_causal", 91u64, true), ("softmax_att_full", 95, false)]
    {
        for (input, iseed) in [("q", 0u64), ("k", 1), ("v", 2)] {
            check(
                &format!("{name}_{input}"),
                seed + iseed,
                vec![t, d],
                uniform,
                |tape, x| {
                    let mk = |tape: &mut Tape, salt: u64| {
                        let mut r = SplitMix(salt);
                        let data = r.fill(t * d, -1.5, 1.5);
                        tape.leaf_raw(vec![t, d], data, false).unwrap()
                    };
                    let (q, k, v) = match input {
                        "q" => (x, mk(tape, 300 + seed), mk(tape, 400 + seed)),
                        "k" => (mk(tape, 300 + seed), x, mk(tape, 400 + seed)),
                        _ => (mk(tape, 300 + seed), mk(tape, 400 + seed), x),
                    };
                    tape.softmax_attention(q, k, v, heads, causal).unwrap()
                },
            );
        }
    }
}

#[test]
fn fd_smoothed_cross_entropy_through_softmax() {
    for (name, seed, eps) in [("ce_plain", 101, 0.0), ("ce_smoothed", 102, 0.1)] {
        check(name, seed, vec![4, 3], uniform, |tape, x| {
            let probs = tape.softmax(x, 1).unwrap();
            tape.smoothed_cross_entropy(probs, &[0, 2, 1, 0], &[true, true, false, true], eps)
                .unwrap()
        });
    }
}
