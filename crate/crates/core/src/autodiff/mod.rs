//! Minimal reverse-mode differentiation over dense `f64` arrays.

mod array;
mod tape;

pub use array::Array;
pub use tape::{conv1d_output_len, BinaryOp, Reduction, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Central differences of a scalar function of several arrays, against tape gradients.
    fn check_grads(inputs: &[Array], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.var(a.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.backward(out).unwrap();
        let eval = |xs: &[Array]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|a| t.constant(a.clone())).collect();
            let o = f(&mut t, &vs);
            t.value(o).item()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[idx]);
            for i in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[idx].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[idx].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / (1e-8_f64).max(a.abs().max(numeric.abs()));
                if (a - numeric).abs() > 1e-9 {
                    worst = worst.max(err);
                }
            }
        }
        worst
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let i2 = t.constant(Array::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = t.constant(Array::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p), t.value(m));

        let a = t.constant(Array::from_rows(&[&[1.0, 2.0]]));
        let b = t.constant(Array::from_rows(&[&[3.0], &[4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
        assert!(t.matmul(a, a).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
        let err = check_grads(&inputs, |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            let s = t.mul(p, p).unwrap();
            t.sum(s)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn conv1d_lengths_and_identity() {
        assert_eq!(conv1d_output_len(96, 3, 2, 1), Some(48));
        assert_eq!(conv1d_output_len(2, 5, 1, 1), None);
        let mut t = Tape::new();
        let x = t.constant(Array::new(vec![1, 5], vec![1.0, -2.0, 3.0, 0.5, 4.0]).unwrap());
        let w = t.constant(Array::ones(&[1, 1, 1]));
        let b = t.constant(Array::zeros(&[1]));
        let y = t.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let long = t.constant(Array::ones(&[1, 96]));
        let w3 = t.constant(Array::ones(&[2, 1, 3]));
        let b3 = t.constant(Array::zeros(&[2]));
        let y3 = t.conv1d(long, w3, b3, 2, 1).unwrap();
        assert_eq!(t.value(y3).shape(), &[2, 48]);

        let short = t.constant(Array::ones(&[1, 2]));
        let w5 = t.constant(Array::ones(&[1, 1, 5]));
        let b1 = t.constant(Array::zeros(&[1]));
        assert!(t.conv1d(short, w5, b1, 1, 0).is_err());
    }

    #[test]
    fn conv1d_zero_weights_give_bias() {
        let mut t = Tape::new();
        let x = t.constant(Array::ones(&[2, 3, 11]));
        let w = t.constant(Array::zeros(&[4, 3, 3]));
        let b = t.constant(Array::from_vec(vec![0.5, -1.0, 2.0, 0.0]));
        let y = t.conv1d(x, w, b, 2, 1).unwrap();
        let v = t.value(y);
        assert_eq!(v.shape(), &[2, 4, 6]);
        for n in 0..2 {
            for c in 0..4 {
                for o in 0..6 {
                    assert_eq!(v.get(&[n, c, o]), [0.5, -1.0, 2.0, 0.0][c]);
                }
            }
        }
    }

    #[test]
    fn conv1d_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [
            random(&[2, 10], &mut rng),
            random(&[3, 2, 3], &mut rng),
            random(&[3], &mut rng),
        ];
        let err = check_grads(&inputs, |t, v| {
            let y = t.conv1d(v[0], v[1], v[2], 2, 1).unwrap();
            let s = t.mul(y, y).unwrap();
            t.sum(s)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn abs_relu_values_and_subgradient_at_zero() {
        let mut t = Tape::new();
        let x = t.var(Array::from_vec(vec![-1.0, 0.0, 2.0]));
        let a = t.abs(x);
        let r = t.relu(x);
        assert_eq!(t.value(a).data(), &[1.0, 0.0, 2.0]);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(a);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[-1.0, 0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.var(Array::from_vec(vec![0.5, -0.3]));
        let a = t.abs(x);
        let m = t.mean(a);
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).data(), &[0.5, -0.5]);
    }

    #[test]
    fn elementwise_rejects_incompatible_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Array::zeros(&[2, 3]));
        let b = t.constant(Array::zeros(&[3, 2]));
        assert!(t.add(a, b).is_err());
        let s = t.constant(Array::scalar(2.0));
        let p = t.mul(a, s).unwrap();
        assert_eq!(t.value(p).shape(), &[2, 3]);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
            let a = random(&[3, 4], &mut rng);
            let b = random(&[3, 4], &mut rng).map(|v| v.signum() * (v.abs() + 0.5));
            let s = Array::scalar(1.7);
            let err = check_grads(&[a.clone(), b, s], |t, v| {
                let y = t.binary(op, v[0], v[1]).unwrap();
                let z = t.binary(op, y, v[2]).unwrap();
                let w = t.binary(op, v[2], z).unwrap();
                let q = t.mul(w, w).unwrap();
                t.mean(q)
            });
            assert!(err < 1e-6, "{op:?}: rel err {err}");
        }
        let x = random(&[5], &mut rng);
        let err = check_grads(&[x], |t, v| {
            let a = t.abs(v[0]);
            let r = t.relu(v[0]);
            let s = t.scale(r, -3.0);
            let p = t.mul(a, s).unwrap();
            t.sum(p)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let x = t.var(Array::from_vec(vec![1.0, 2.0, 3.0]));
        let m = t.mean(x);
        assert_eq!(t.value(m).item(), 2.0);
        let y = t.var(Array::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s0 = t.reduce(Reduction::Sum, y, &[0]).unwrap();
        assert_eq!(t.value(s0).data(), &[4.0, 6.0]);
        assert_eq!(t.value(s0).shape(), &[2]);
        assert!(t.reduce(Reduction::Sum, y, &[2]).is_err());
        let total = t.sum(y);
        t.backward(total).unwrap();
        assert_eq!(t.grad(y), Array::ones(&[2, 2]));
    }

    #[test]
    fn reduce_axes_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3, 4], &mut rng);
        let err = check_grads(&[x], |t, v| {
            let r = t.reduce(Reduction::Mean, v[0], &[0, 2]).unwrap();
            let s = t.reduce(Reduction::Sum, v[0], &[1]).unwrap();
            let r2 = t.mul(r, r).unwrap();
            let s2 = t.mul(s, s).unwrap();
            let a = t.sum(r2);
            let b = t.mean(s2);
            t.add(a, b).unwrap()
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn concat_transpose_reshape() {
        let mut t = Tape::new();
        let a = t.var(Array::from_rows(&[&[1.0], &[2.0]]));
        let b = t.var(Array::from_rows(&[&[3.0], &[4.0]]));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c), &Array::from_rows(&[&[1.0, 3.0], &[2.0, 4.0]]));

        let m = t.var(Array::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let mt = t.transpose(m).unwrap();
        let mtt = t.transpose(mt).unwrap();
        assert_eq!(t.value(mtt), t.value(m));

        let r = t.var(Array::zeros(&[2, 6]));
        assert!(t.reshape(r, &[5, 2]).is_err());
    }

    #[test]
    fn structural_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [random(&[2, 6], &mut rng), random(&[2, 3, 2], &mut rng)];
        let weights = random(&[3, 4], &mut rng);
        let err = check_grads(&inputs, |t, v| {
            let r = t.reshape(v[0], &[3, 4]).unwrap();
            let w = t.constant(weights.clone());
            let rw = t.mul(r, w).unwrap();
            let p = t.permute(v[1], &[2, 0, 1]).unwrap();
            let p = t.reshape(p, &[4, 3]).unwrap();
            let pt = t.transpose(p).unwrap();
            let c = t.concat(&[rw, pt, rw], 0).unwrap();
            let sq = t.mul(c, c).unwrap();
            t.sum(sq)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn stop_gradient_freezes_one_factor() {
        let mut t = Tape::new();
        let x = t.var(Array::from_vec(vec![2.0]));
        let sx = t.stop_gradient(x);
        assert_eq!(t.value(sx), t.value(x));
        let p = t.mul(x, sx).unwrap();
        let m = t.mean(p);
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).data(), &[2.0]);

        let mut t = Tape::new();
        let mask = Array::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let x = t.var(Array::from_vec(vec![0.3, -1.0, 2.0, 5.0]));
        let mv = t.var(mask.clone());
        let m = t.stop_gradient(mv);
        let p = t.mul(m, x).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), mask);
        assert_eq!(t.grad(mv), Array::zeros(&[4]));
    }

    #[test]
    fn backward_tiny_regression_and_accumulation() {
        let mut t = Tape::new();
        let w = t.var(Array::from_rows(&[&[2.0]]));
        let x = t.constant(Array::from_rows(&[&[3.0]]));
        let y = t.constant(Array::from_rows(&[&[5.0]]));
        let wx = t.matmul(w, x).unwrap();
        let d = t.sub(wx, y).unwrap();
        let sq = t.mul(d, d).unwrap();
        let loss = t.mean(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).item(), 6.0);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).item(), 12.0);
        t.zero_grad();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).item(), 6.0);

        assert!(t.backward(wx).is_ok());
        let v = t.var(Array::zeros(&[2]));
        assert!(t.backward(v).is_err());
    }

    #[test]
    fn shared_node_sums_both_consumers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[4], &mut rng);
        let err = check_grads(&[x], |t, v| {
            let a = t.relu(v[0]);
            let b = t.abs(a);
            let c = t.mul(a, b).unwrap();
            let d = t.add(c, a).unwrap();
            t.sum(d)
        });
        assert!(err < 1e-6, "rel err {err}");
    }
}
