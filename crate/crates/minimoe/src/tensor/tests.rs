use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
}

/// Central finite differences of `f` w.r.t. each leaf in `inputs`.
/// `f` rebuilds the graph from scratch for every probe.
fn fd_grads(
    f: &dyn Fn(&mut Tape, &[Vec<f64>]) -> TensorId,
    inputs: &[Vec<f64>],
    h: f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for p in 0..inputs.len() {
        let mut g = vec![0.0; inputs[p].len()];
        for i in 0..inputs[p].len() {
            let mut plus = inputs.to_vec();
            plus[p][i] += h;
            let mut tp = Tape::new();
            let lp = f(&mut tp, &plus);
            let mut minus = inputs.to_vec();
            minus[p][i] -= h;
            let mut tm = Tape::new();
            let lm = f(&mut tm, &minus);
            g[i] = (tp.value(lp) - tm.value(lm)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// L2 relative error between analytic and finite-difference gradients.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut t = Tape::new();
    let eye = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
    let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
    let c = t.matmul(eye, a).unwrap();
    assert_eq!(t.data(c), &[1.0, 2.0, 3.0, 4.0]);

    let r = t.constant(vec![1.0, 2.0], vec![1, 2]);
    let col = t.constant(vec![3.0, 4.0], vec![2, 1]);
    let p = t.matmul(r, col).unwrap();
    assert_eq!(t.data(p), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(vec![0.0; 6], vec![2, 3]);
    let b = t.constant(vec![0.0; 8], vec![4, 2]);
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "got: {msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a0 = randn(&mut rng, 5 * 7);
    let b0 = randn(&mut rng, 7 * 3);
    let build = |t: &mut Tape, xs: &[Vec<f64>]| {
        let a = t.leaf(xs[0].clone(), vec![5, 7], true);
        let b = t.leaf(xs[1].clone(), vec![7, 3], true);
        let c = t.matmul(a, b).unwrap();
        t.sum_all(c)
    };
    let inputs = vec![a0, b0];
    let mut t = Tape::new();
    let a = t.leaf(inputs[0].clone(), vec![5, 7], true);
    let b = t.leaf(inputs[1].clone(), vec![7, 3], true);
    let c = t.matmul(a, b).unwrap();
    let loss = t.sum_all(c);
    t.backward(loss);
    let fd = fd_grads(&build, &inputs, 1e-5);
    assert!(rel_err(t.grad(a).unwrap(), &fd[0]) < 1e-6);
    assert!(rel_err(t.grad(b).unwrap(), &fd[1]) < 1e-6);
}

#[test]
fn softmax_rows_examples() {
    let mut t = Tape::new();
    let x = t.constant(vec![0.0, 0.0, 0.0], vec![1, 3]);
    let s = t.softmax_rows(x);
    for v in t.data(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = t.constant(vec![1000.0, 0.0], vec![1, 2]);
    let s = t.softmax_rows(x);
    assert!((t.data(s)[0] - 1.0).abs() < 1e-12);
    assert!(t.data(s)[1] >= 0.0 && t.data(s)[1] < 1e-300);

    let x = t.constant(vec![1.0, 2.0, 3.0], vec![1, 3]);
    let s = t.softmax_rows(x);
    let want = [0.09003, 0.24473, 0.66524];
    for (v, w) in t.data(s).iter().zip(&want) {
        assert!((v - w).abs() < 1e-5, "{v} vs {w}");
    }
}

#[test]
fn softmax_rows_sum_to_one_with_huge_spread() {
    let mut t = Tape::new();
    let x = t.constant(vec![-400.0, 0.0, 350.0, 12.0, -800.0, 100.0], vec![2, 3]);
    let s = t.softmax_rows(x);
    for r in 0..2 {
        let sum: f64 = t.data(s)[r * 3..(r + 1) * 3].iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12, "row {r} sums to {sum}");
    }
}

#[test]
fn gelu_examples() {
    let mut t = Tape::new();
    let x = t.constant(vec![0.0, 1.0, 8.0, -8.0], vec![1, 4]);
    let y = t.gelu(x);
    let out = t.data(y);
    assert_eq!(out[0], 0.0);
    assert!((out[1] - 0.841345 * 1.0).abs() < 1e-4, "gelu(1) = {}", out[1]);
    assert!((out[2] - 8.0).abs() < 1e-6);
    assert!(out[3].abs() < 1e-6);
}

#[test]
fn kl_div_rows_closed_forms() {
    let mut t = Tape::new();
    let p = t.constant(vec![0.3, 0.7], vec![1, 2]);
    let kl = t.kl_div_rows(p, p).unwrap();
    assert_eq!(t.value(kl), 0.0, "kl(p, p) must be exactly zero");

    let p = t.constant(vec![1.0, 0.0], vec![1, 2]);
    let q = t.constant(vec![0.5, 0.5], vec![1, 2]);
    let kl = t.kl_div_rows(p, q).unwrap();
    assert!((t.value(kl) - std::f64::consts::LN_2).abs() < 1e-12);

    let p = t.constant(vec![0.9, 0.1], vec![1, 2]);
    let q = t.constant(vec![0.5, 0.5], vec![1, 2]);
    let kl = t.kl_div_rows(p, q).unwrap();
    let want = 0.9 * (1.8f64).ln() + 0.1 * (0.2f64).ln();
    assert!((t.value(kl) - want).abs() < 1e-12);
    assert!((t.value(kl) - 0.36806).abs() < 1e-5);
}

#[test]
fn kl_div_rows_rejects_non_stochastic_rows() {
    let mut t = Tape::new();
    let p = t.constant(vec![0.5, 0.4], vec![1, 2]);
    let q = t.constant(vec![0.5, 0.5], vec![1, 2]);
    assert!(matches!(
        t.kl_div_rows(p, q),
        Err(TensorError::NotStochastic { side: "p", .. })
    ));
}

#[test]
fn kl_gradient_reaches_q_only() {
    let build = |t: &mut Tape, xs: &[Vec<f64>]| {
        let p = t.constant(vec![0.9, 0.1], vec![1, 2]);
        // renormalize the probe so rows stay stochastic
        let total: f64 = xs[0].iter().sum();
        let q = t.leaf(xs[0].iter().map(|v| v / total).collect(), vec![1, 2], true);
        t.kl_div_rows(p, q).unwrap()
    };
    // direct gradient at a stochastic point: d/dq of -p·ln q is -p/q
    let mut t = Tape::new();
    let p = t.constant(vec![0.9, 0.1], vec![1, 2]);
    let q = t.leaf(vec![0.6, 0.4], vec![1, 2], true);
    let kl = t.kl_div_rows(p, q).unwrap();
    t.backward(kl);
    let gq = t.grad(q).unwrap();
    assert!((gq[0] - (-0.9 / 0.6)).abs() < 1e-12);
    assert!((gq[1] - (-0.1 / 0.4)).abs() < 1e-12);
    assert!(t.grad(p).is_none(), "p is a detached target");
    let _ = build; // constrained probe kept for reference
}

#[test]
fn layer_norm_examples_and_gradient() {
    let mut t = Tape::new();
    let x = t.constant(vec![2.0, 2.0, 2.0], vec![1, 3]);
    let g1 = t.constant(vec![1.0, 1.0, 1.0], vec![3]);
    let b0 = t.constant(vec![0.0, 0.0, 0.0], vec![3]);
    let y = t.layer_norm(x, g1, b0);
    for v in t.data(y) {
        assert!(v.abs() < 1e-9, "constant row must normalize to zero, got {v}");
    }

    let x = t.constant(vec![1.0, 3.0], vec![1, 2]);
    let g1 = t.constant(vec![1.0, 1.0], vec![2]);
    let b0 = t.constant(vec![0.0, 0.0], vec![2]);
    let y = t.layer_norm(x, g1, b0);
    // population variance = 1, so the row maps to [-1, 1] modulo eps
    assert!((t.data(y)[0] + 1.0).abs() < 1e-4);
    assert!((t.data(y)[1] - 1.0).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![randn(&mut rng, 3 * 4), randn(&mut rng, 4), randn(&mut rng, 4)];
    let build = |t: &mut Tape, xs: &[Vec<f64>]| {
        let x = t.leaf(xs[0].clone(), vec![3, 4], true);
        let g = t.leaf(xs[1].clone(), vec![4], true);
        let b = t.leaf(xs[2].clone(), vec![4], true);
        let y = t.layer_norm(x, g, b);
        let sq = t.mul(y, y);
        t.mean_all(sq)
    };
    let mut t = Tape::new();
    let x = t.leaf(inputs[0].clone(), vec![3, 4], true);
    let g = t.leaf(inputs[1].clone(), vec![4], true);
    let b = t.leaf(inputs[2].clone(), vec![4], true);
    let y = t.layer_norm(x, g, b);
    let sq = t.mul(y, y);
    let loss = t.mean_all(sq);
    t.backward(loss);
    let fd = fd_grads(&build, &inputs, 1e-5);
    assert!(rel_err(t.grad(x).unwrap(), &fd[0]) < 1e-5, "layer_norm dx");
    assert!(rel_err(t.grad(g).unwrap(), &fd[1]) < 1e-5, "layer_norm dgain");
    assert!(rel_err(t.grad(b).unwrap(), &fd[2]) < 1e-5, "layer_norm dbias");
}

#[test]
fn composed_three_op_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![randn(&mut rng, 2 * 3), randn(&mut rng, 3 * 3)];
    let build = |t: &mut Tape, xs: &[Vec<f64>]| {
        let x = t.leaf(xs[0].clone(), vec![2, 3], true);
        let w = t.leaf(xs[1].clone(), vec![3, 3], true);
        let h = t.matmul(x, w).unwrap();
        let h = t.gelu(h);
        let s = t.softmax_rows(h);
        let sq = t.mul(s, s);
        t.sum_all(sq)
    };
    let mut t = Tape::new();
    let x = t.leaf(inputs[0].clone(), vec![2, 3], true);
    let w = t.leaf(inputs[1].clone(), vec![3, 3], true);
    let h = t.matmul(x, w).unwrap();
    let h = t.gelu(h);
    let s = t.softmax_rows(h);
    let sq = t.mul(s, s);
    let loss = t.sum_all(sq);
    t.backward(loss);
    let fd = fd_grads(&build, &inputs, 1e-5);
    assert!(rel_err(t.grad(x).unwrap(), &fd[0]) < 1e-4, "chain dx");
    assert!(rel_err(t.grad(w).unwrap(), &fd[1]) < 1e-4, "chain dw");
}

#[test]
fn gather_scatter_roundtrip_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![randn(&mut rng, 4 * 3), vec![0.2, 0.5, 0.3, 0.9]];
    let idx = [2usize, 0, 3, 1];
    let build = move |t: &mut Tape, xs: &[Vec<f64>]| {
        let x = t.leaf(xs[0].clone(), vec![4, 3], true);
        let s = t.leaf(xs[1].clone(), vec![4], true);
        let gathered = t.gather_rows(x, &idx);
        let back = t.scatter_scaled_rows(gathered, &idx, Some(s), 4);
        let sq = t.mul(back, back);
        t.sum_all(sq)
    };
    let mut t = Tape::new();
    let x = t.leaf(inputs[0].clone(), vec![4, 3], true);
    let s = t.leaf(inputs[1].clone(), vec![4], true);
    let gathered = t.gather_rows(x, &idx);
    let back = t.scatter_scaled_rows(gathered, &idx, Some(s), 4);
    let sq = t.mul(back, back);
    let loss = t.sum_all(sq);
    t.backward(loss);
    let fd = fd_grads(&build, &inputs, 1e-5);
    assert!(rel_err(t.grad(x).unwrap(), &fd[0]) < 1e-6);
    assert!(rel_err(t.grad(s).unwrap(), &fd[1]) < 1e-6);
}

#[test]
fn slice_concat_and_reductions_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![randn(&mut rng, 3 * 6)];
    let build = |t: &mut Tape, xs: &[Vec<f64>]| {
        let x = t.leaf(xs[0].clone(), vec![3, 6], true);
        let left = t.slice_cols(x, 0, 3);
        let right = t.slice_cols(x, 3, 3);
        let swapped = t.concat_cols(&[right, left]);
        let top = t.slice_rows(swapped, 0, 2);
        let bottom = t.slice_rows(swapped, 2, 1);
        let re = t.concat_rows(&[bottom, top]);
        let m = t.mean_cols(re);
        let sq = t.mul(m, m);
        t.sum_all(sq)
    };
    let mut t = Tape::new();
    let x = t.leaf(inputs[0].clone(), vec![3, 6], true);
    let left = t.slice_cols(x, 0, 3);
    let right = t.slice_cols(x, 3, 3);
    let swapped = t.concat_cols(&[right, left]);
    let top = t.slice_rows(swapped, 0, 2);
    let bottom = t.slice_rows(swapped, 2, 1);
    let re = t.concat_rows(&[bottom, top]);
    let m = t.mean_cols(re);
    let sq = t.mul(m, m);
    let loss = t.sum_all(sq);
    t.backward(loss);
    let fd = fd_grads(&build, &inputs, 1e-5);
    assert!(rel_err(t.grad(x).unwrap(), &fd[0]) < 1e-6);
}

#[test]
fn cross_entropy_matches_hand_value_and_finite_differences() {
    let mut t = Tape::new();
    let logits = t.leaf(vec![2.0, 1.0, 0.1, 0.1, 2.0, 1.0], vec![2, 3], true);
    let loss = t.cross_entropy_rows(logits, &[0, 1]);
    let lse0 = (2.0f64.exp() + 1.0f64.exp() + 0.1f64.exp()).ln();
    let lse1 = (0.1f64.exp() + 2.0f64.exp() + 1.0f64.exp()).ln();
    let want = ((lse0 - 2.0) + (lse1 - 2.0)) / 2.0;
    assert!((t.value(loss) - want).abs() < 1e-12);

    t.backward(loss);
    let inputs = vec![vec![2.0, 1.0, 0.1, 0.1, 2.0, 1.0]];
    let build = |t: &mut Tape, xs: &[Vec<f64>]| {
        let l = t.leaf(xs[0].clone(), vec![2, 3], true);
        t.cross_entropy_rows(l, &[0, 1])
    };
    let fd = fd_grads(&build, &inputs, 1e-5);
    assert!(rel_err(t.grad(logits).unwrap(), &fd[0]) < 1e-6);
}

#[test]
fn backward_skips_untracked_subgraphs() {
    let mut t = Tape::new();
    let frozen = t.leaf(vec![1.0, 2.0], vec![1, 2], false);
    let live = t.leaf(vec![3.0, 4.0], vec![1, 2], true);
    let s = t.add(frozen, live);
    let loss = t.sum_all(s);
    t.backward(loss);
    assert!(t.grad(frozen).is_none());
    assert_eq!(t.grad(live).unwrap(), &[1.0, 1.0]);
}
