//! Dense tensors with reverse-mode automatic differentiation.

mod check;
mod graph;
mod ops;
mod params;

pub use check::{finite_diff_check, finite_diff_check_params};
pub use graph::{Graph, Var};
pub use ops::broadcast_shapes;
pub use params::{ones, trunc_normal, zeros, Param, ParamId, ParamStore};

/// Default central-difference step for gradient checks (64-bit mode).
pub const FD_STEP: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_identity() {
        let mut g: Graph<f64> = Graph::new();
        let i2 = g.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let b = g.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let c = g.matmul(i2, b);
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(vec![1.0, 2.0], vec![1, 2]);
        let b = g.constant(vec![3.0, 4.0], vec![2, 1]);
        let c = g.matmul(a, b);
        assert_eq!(g.value(c), &[11.0]);
        assert_eq!(g.shape(c), &[1, 1]);
    }

    #[test]
    fn matmul_zero_matrix() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(vec![0.0; 4], vec![2, 2]);
        let b = g.constant(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]);
        let c = g.matmul(z, b);
        assert!(g.value(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(vec![0.0; 6], vec![2, 3]);
        let b = g.constant(vec![0.0; 4], vec![2, 2]);
        let err = g.try_matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_batched_matches_loop() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant((0..12).map(|i| i as f64).collect(), vec![2, 2, 3]);
        let b = g.constant((0..12).map(|i| (i as f64) * 0.5).collect(), vec![2, 3, 2]);
        let c = g.matmul(a, b);
        assert_eq!(g.shape(c), &[2, 2, 2]);
        // First batch, element (0,0): [0,1,2] . [0,1,2] (column 0 of b batch 0).
        let b0col0 = [0.0, 1.0, 2.0];
        let expect00: f64 = (0..3).map(|i| i as f64 * b0col0[i]).sum();
        assert_relative_eq!(g.value(c)[0], expect00);
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(vec![0.0, 0.0], vec![2]);
        let s = g.softmax(a, 0);
        assert_relative_eq!(g.value(s)[0], 0.5);
        let b = g.constant(vec![1000.0, 1000.0], vec![2]);
        let s = g.softmax(b, 0);
        assert_relative_eq!(g.value(s)[0], 0.5);
        assert_relative_eq!(g.value(s)[1], 0.5);
    }

    #[test]
    fn softmax_direct_value() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(vec![0.0, 3f64.ln()], vec![2]);
        let s = g.softmax(a, 0);
        assert_relative_eq!(g.value(s)[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(g.value(s)[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(vec![0.3, -1.2, 4.0, 2.0, 0.0, -7.0], vec![2, 3]);
        let s = g.softmax(a, 1);
        let v = g.value(s);
        for r in 0..2 {
            let sum: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![7.0, 7.0, 7.0], vec![1, 3]);
        let gain = g.constant(vec![1.0; 3], vec![3]);
        let bias = g.constant(vec![0.0; 3], vec![3]);
        let y = g.layer_norm(x, gain, bias, 1e-5);
        for &v in g.value(y) {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_already_standardized() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![1.0, -1.0], vec![1, 2]);
        let gain = g.constant(vec![1.0; 2], vec![2]);
        let bias = g.constant(vec![0.0; 2], vec![2]);
        let y = g.layer_norm(x, gain, bias, 1e-12);
        assert_relative_eq!(g.value(y)[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(g.value(y)[1], -1.0, epsilon = 1e-5);
    }

    #[test]
    fn layer_norm_zero_gain_broadcasts_bias() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![3.0, -2.0, 9.0], vec![1, 3]);
        let gain = g.constant(vec![0.0; 3], vec![3]);
        let bias = g.constant(vec![0.5, 1.5, -0.5], vec![3]);
        let y = g.layer_norm(x, gain, bias, 1e-5);
        assert_eq!(g.value(y), &[0.5, 1.5, -0.5]);
    }

    #[test]
    fn gelu_values() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![0.0, 1.0, -10.0], vec![3]);
        let y = g.gelu(x);
        let v = g.value(y);
        assert_eq!(v[0], 0.0);
        assert_relative_eq!(v[1], 0.8413447460685429, epsilon = 1e-6);
        assert!(v[2].abs() < 1e-8);
    }

    #[test]
    fn backward_square() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![3.0], vec![1]);
        let sq = g.mul(x, x);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_relative_eq!(g.grad(x).unwrap()[0], 6.0);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, -2.0, 0.5], vec![3]);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_detached_tensor_has_no_grad() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0], vec![1]);
        let detached = g.constant(vec![2.0], vec![1]);
        let y = g.mul(x, x);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert!(g.grad(detached).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], vec![2]);
        let y = g.mul(x, x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_rejects_nan_loss() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![-1.0], vec![1]);
        let y = g.ln(x);
        let loss = g.sum_all(y);
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn backward_accumulates_on_repeat() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![3.0], vec![1]);
        let sq = g.mul(x, x);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_relative_eq!(g.grad(x).unwrap()[0], 12.0);
    }

    #[test]
    fn gradient_linearity_of_summed_losses() {
        // grad of (f + g) == grad f + grad g
        let run = |with_both: bool| -> Vec<f64> {
            let mut g: Graph<f64> = Graph::new();
            let x = g.leaf(vec![1.5, -0.5], vec![2]);
            let sq = g.mul(x, x);
            let l1 = g.sum_all(sq);
            let loss = if with_both {
                let e = g.exp(x);
                let l2 = g.sum_all(e);
                g.add(l1, l2)
            } else {
                l1
            };
            g.backward(loss).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let both = run(true);
        let sq_only = run(false);
        for i in 0..2 {
            let exp_grad = [1.5f64, -0.5][i].exp();
            assert_relative_eq!(both[i], sq_only[i] + exp_grad, epsilon = 1e-12);
        }
    }

    #[test]
    fn finite_diff_sum_of_squares() {
        let err = finite_diff_check(
            |g: &mut Graph<f64>, x| {
                let sq = g.mul(x, x);
                g.sum_all(sq)
            },
            &[1.0, 2.0, 3.0],
            &[3],
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn finite_diff_linear_is_near_exact() {
        let err = finite_diff_check(
            |g: &mut Graph<f64>, x| {
                let w = g.constant(vec![2.0, -3.0, 0.5], vec![3]);
                let p = g.mul(x, w);
                g.sum_all(p)
            },
            &[1.0, 2.0, 3.0],
            &[3],
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn finite_diff_composite_block() {
        // attention-like composite: softmax(x W) V reduced to a scalar
        let err = finite_diff_check(
            |g: &mut Graph<f64>, x| {
                let w = g.constant(vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6, 0.2, 0.0, -0.1], vec![3, 3]);
                let scores = g.matmul(x, w);
                let attn = g.softmax(scores, 1);
                let v = g.constant(vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0, -0.5, 0.3, 0.8], vec![3, 3]);
                let out = g.matmul(attn, v);
                let gl = g.gelu(out);
                g.mean_all(gl)
            },
            &[0.1, -0.4, 0.8, 1.2, -0.3, 0.05, 0.6, -0.9, 0.2],
            &[3, 3],
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0], vec![1, 4]);
        let y = g.rope(x, &[0], 10000.0);
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0], vec![1, 4]);
        let y = g.rope(x, &[7], 10000.0);
        let v = g.value(y);
        assert_relative_eq!(v[0].hypot(v[1]), 1f64.hypot(2.0), epsilon = 1e-12);
        assert_relative_eq!(v[2].hypot(v[3]), 3f64.hypot(4.0), epsilon = 1e-12);
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant((0..12).map(|i| i as f64).collect(), vec![2, 6]);
        let a = g.narrow(x, 1, 0, 2);
        let b = g.narrow(x, 1, 2, 4);
        let back = g.concat(&[a, b], 1);
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn broadcast_add_bias() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let b = g.leaf(vec![10.0, 20.0], vec![2]);
        let y = g.add(x, b);
        assert_eq!(g.value(y), &[11.0, 22.0, 13.0, 24.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn cumsum_and_grad() {
        let err = finite_diff_check(
            |g: &mut Graph<f64>, x| {
                let c = g.cumsum_last(x);
                let sq = g.mul(c, c);
                g.sum_all(sq)
            },
            &[1.0, 2.0, 3.0],
            &[1, 3],
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn grad_check_misc_ops() {
        let err = finite_diff_check(
            |g: &mut Graph<f64>, x| {
                let sp = g.softplus(x);
                let lg = g.lgamma(sp);
                let l1 = g.ln1p(sp);
                let mx = g.maximum(lg, l1);
                let sq = g.sqrt(sp);
                let s = g.add(mx, sq);
                g.mean_all(s)
            },
            &[0.5, -1.2, 2.0, 0.01],
            &[4],
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn permute_roundtrip_and_grad() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant((0..24).map(|i| i as f64).collect(), vec![2, 3, 4]);
        let p = g.permute(x, &[2, 0, 1]);
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]);
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn param_store_binding_accumulates_grads() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.add("w", vec![2], vec![1.0, 2.0], true);
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let sq = g.mul(wv, wv);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        g.collect_grads(&mut store);
        assert_eq!(store.get(w).grad, vec![2.0, 4.0]);
    }
}
