//! Reverse-mode automatic differentiation: tape, ops, optimizer, checks.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use kernels::softplus;
pub use tape::{softmax_row, logsumexp_row, Tape, Tensor, TensorError, TensorId};

#[cfg(test)]
mod tests {
    use super::gradcheck::check_gradients;
    use super::tape::Tape;
    use crate::rng::seeded;
    use rand::Rng;

    fn rand_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn grad_add_sub_mul_scale() {
        let mut rng = seeded(11);
        for _ in 0..5 {
            let inputs = vec![
                (rand_vec(&mut rng, 6, -2.0, 2.0), vec![2, 3]),
                (rand_vec(&mut rng, 6, -2.0, 2.0), vec![2, 3]),
            ];
            let fails = check_gradients(&inputs, 1e-5, |t, ids| {
                let a = t.add(ids[0], ids[1]).unwrap();
                let s = t.sub(a, ids[1]).unwrap();
                let m = t.mul(s, ids[0]).unwrap();
                let sc = t.scale(m, -1.7).unwrap();
                let sh = t.add_scalar(sc, 0.9).unwrap();
                t.mean_all(sh).unwrap()
            });
            assert!(fails.is_empty(), "{fails:?}");
        }
    }

    #[test]
    fn grad_matmul_bias() {
        let mut rng = seeded(12);
        let inputs = vec![
            (rand_vec(&mut rng, 6, -1.0, 1.0), vec![2, 3]),
            (rand_vec(&mut rng, 12, -1.0, 1.0), vec![3, 4]),
            (rand_vec(&mut rng, 4, -1.0, 1.0), vec![4]),
        ];
        let fails = check_gradients(&inputs, 1e-5, |t, ids| {
            let y = t.matmul(ids[0], ids[1]).unwrap();
            let z = t.add_bias(y, ids[2]).unwrap();
            let g = t.gelu(z).unwrap();
            t.sum_all(g).unwrap()
        });
        assert!(fails.is_empty(), "{fails:?}");
    }

    #[test]
    fn grad_softmax_logsumexp_max() {
        let mut rng = seeded(13);
        let inputs = vec![(rand_vec(&mut rng, 8, -3.0, 3.0), vec![2, 4])];
        let fails = check_gradients(&inputs, 1e-5, |t, ids| {
            let sm = t.softmax_last(ids[0]).unwrap();
            let lg = t.log(sm).unwrap();
            let lse = t.logsumexp_last(ids[0]).unwrap();
            let mx = t.max_last(lg).unwrap();
            let s1 = t.sum_all(lse).unwrap();
            let s2 = t.sum_all(mx).unwrap();
            t.add(s1, s2).unwrap()
        });
        assert!(fails.is_empty(), "{fails:?}");
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = seeded(14);
        let inputs = vec![
            (rand_vec(&mut rng, 12, -2.0, 2.0), vec![3, 4]),
            (rand_vec(&mut rng, 4, 0.5, 1.5), vec![4]),
            (rand_vec(&mut rng, 4, -0.5, 0.5), vec![4]),
        ];
        let fails = check_gradients(&inputs, 1e-4, |t, ids| {
            let ln = t.layer_norm(ids[0], ids[1], ids[2]).unwrap();
            let sq = t.mul(ln, ln).unwrap();
            t.mean_all(sq).unwrap()
        });
        assert!(fails.is_empty(), "{fails:?}");
    }

    #[test]
    fn grad_attention_both_masks() {
        let mut rng = seeded(15);
        for causal in [false, true] {
            let inputs = vec![
                (rand_vec(&mut rng, 12, -1.0, 1.0), vec![4, 3]),
                (rand_vec(&mut rng, 12, -1.0, 1.0), vec![4, 3]),
                (rand_vec(&mut rng, 12, -1.0, 1.0), vec![4, 3]),
            ];
            let fails = check_gradients(&inputs, 1e-4, |t, ids| {
                let at = t.attention(ids[0], ids[1], ids[2], causal).unwrap();
                let sq = t.mul(at, at).unwrap();
                t.sum_all(sq).unwrap()
            });
            assert!(fails.is_empty(), "causal={causal}: {fails:?}");
        }
    }

    #[test]
    fn grad_gather_slice_concat_stack_pick() {
        let mut rng = seeded(16);
        let inputs = vec![
            (rand_vec(&mut rng, 10, -1.0, 1.0), vec![5, 2]),
            (rand_vec(&mut rng, 6, -1.0, 1.0), vec![3, 2]),
        ];
        let fails = check_gradients(&inputs, 1e-5, |t, ids| {
            let g = t.gather_rows(ids[0], &[4, 0, 0]).unwrap();
            let cat = t.concat_cols(&[g, ids[1]]).unwrap();
            let sl = t.slice_cols(cat, 1, 2).unwrap();
            let rows = t.slice_rows(sl, 1, 2).unwrap();
            let p0 = t.pick(rows, 0).unwrap();
            let p3 = t.pick(rows, 3).unwrap();
            let st = t.stack_scalars(&[p0, p3]).unwrap();
            let e = t.exp(st).unwrap();
            t.sum_all(e).unwrap()
        });
        assert!(fails.is_empty(), "{fails:?}");
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2.0], &[1], true).unwrap();
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 4.0).abs() < 1e-12);
        tape.backward(s).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 8.0).abs() < 1e-12);
        tape.zero_grads();
        tape.backward(s).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.0; 6], &[2, 3], true).unwrap();
        let b = tape.leaf(vec![0.0; 4], &[2, 2], true).unwrap();
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.log(a).is_err(), "log of zero must be a domain error");
    }

    #[test]
    fn fanout_sums_gradients() {
        // y = x*x + x, dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0], &[1], true).unwrap();
        let xx = tape.mul(x, x).unwrap();
        let y = tape.add(xx, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 7.0).abs() < 1e-12);
    }
}
