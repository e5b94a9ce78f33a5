use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Array, Tape};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        lookback: 12,
        horizon: 16,
        hidden: 6,
        recon_hidden: 5,
        series: 3,
        ..ModelConfig::default()
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Largest relative error between tape gradients and central differences of `loss`
/// with respect to every parameter of `module`.
fn grad_check<M: Module + Clone>(module: &M, loss: impl Fn(&M, &mut Tape, &M::Vars) -> crate::autodiff::Var) -> f64 {
    let mut tape = Tape::new();
    let vars = module.bind(&mut tape, true);
    let out = loss(module, &mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic = flatten_grads::<M>(&tape, &vars);
    let base = flatten_params(module);
    let eval = |p: &[f64]| {
        let mut m = module.clone();
        load_flat_params(&mut m, p);
        let mut t = Tape::new();
        let v = m.bind(&mut t, false);
        let o = loss(&m, &mut t, &v);
        t.value(o).item()
    };
    let h = 1e-5;
    let centre = eval(&base);
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += h;
        let up = eval(&p);
        p[i] -= 2.0 * h;
        let down = eval(&p);
        let (fwd, bwd) = ((up - centre) / h, (centre - down) / h);
        // a ReLU or |·| kink inside [θ−h, θ+h] makes the one-sided slopes disagree
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-3) {
            skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let diff = (a - numeric).abs();
        if diff > 1e-8 {
            worst = worst.max(diff / a.abs().max(numeric.abs()));
        }
    }
    assert!(skipped * 100 <= base.len(), "{skipped} of {} coordinates straddle a kink", base.len());
    worst
}

#[test]
fn zero_weights_predict_window_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ModelConfig {
        snr: SnrPlacement::None,
        ..small_cfg()
    };
    let mut p = Predictor::new(&cfg, 1, &mut rng).unwrap();
    p.visit_mut(&mut |_, a| *a = Array::zeros(a.shape()));
    let x = random(&[3, 12], &mut rng);
    let y = p.predict(&x).unwrap();
    for r in 0..3 {
        let mean = x.data()[r * 12..(r + 1) * 12].iter().sum::<f64>() / 12.0;
        for j in 0..16 {
            assert!((y.get(&[r, j]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn predictor_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for snr in [SnrPlacement::None, SnrPlacement::Both] {
        for backbone in [Backbone::Mlp, Backbone::Linear] {
            let cfg = ModelConfig {
                snr,
                backbone,
                ..small_cfg()
            };
            let p = Predictor::new(&cfg, 1, &mut rng).unwrap();
            let x = random(&[4, 12], &mut rng);
            let y = random(&[4, 16], &mut rng);
            let err = grad_check(&p, |m, t, v| {
                let xv = t.constant(x.clone());
                let yv = t.constant(y.clone());
                let pred = m.forward(t, v, xv).unwrap();
                let d = t.sub(pred, yv).unwrap();
                let a = t.abs(d);
                t.mean(a)
            });
            assert!(err < 1e-4, "{snr:?}/{backbone:?}: rel err {err}");
        }
    }
}

#[test]
fn batch_rows_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = Predictor::new(&small_cfg(), 1, &mut rng).unwrap();
    let x = random(&[2, 12], &mut rng);
    let both = p.predict(&x).unwrap();
    for r in 0..2 {
        let row = Array::new(vec![1, 12], x.data()[r * 12..(r + 1) * 12].to_vec()).unwrap();
        let single = p.predict(&row).unwrap();
        assert_eq!(&both.data()[r * 16..(r + 1) * 16], single.data());
    }
}

#[test]
fn predictor_is_translation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = Predictor::new(&small_cfg(), 1, &mut rng).unwrap();
    let x = random(&[5, 12], &mut rng);
    let base = p.predict(&x).unwrap();
    for c in [-7.5, 0.3, 42.0] {
        let shifted = p.predict(&x.map(|v| v + c)).unwrap();
        assert!(shifted.max_abs_diff(&base.map(|v| v + c)) < 1e-9);
    }
}

#[test]
fn rejects_wrong_input_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = Predictor::new(&small_cfg(), 1, &mut rng).unwrap();
    assert!(p.predict(&Array::zeros(&[2, 11])).is_err());
}

#[test]
fn parameter_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let wide = ModelConfig {
        hidden: 512,
        snr: SnrPlacement::None,
        ..ModelConfig::default()
    };
    let mlp = Predictor::new(&wide, 7, &mut rng).unwrap();
    assert_eq!(param_count(&mlp), 98_912);
    let wide_snr = ModelConfig {
        snr: SnrPlacement::Both,
        ..wide
    };
    assert_eq!(param_count(&Predictor::new(&wide_snr, 7, &mut rng).unwrap()), 98_914);
    // width 128 gives the 24.8K-parameter MLP
    let narrow = ModelConfig {
        snr: SnrPlacement::None,
        ..ModelConfig::default()
    };
    assert_eq!(param_count(&Predictor::new(&narrow, 7, &mut rng).unwrap()), 24_800);
    let g = ReconstructionNet::new(&ModelConfig::default(), &mut rng).unwrap();
    assert_eq!(param_count(&g), 4_281);
}

#[test]
fn conv_concat_shapes_at_h96() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = ReconstructionNet::new(&ModelConfig::default(), &mut rng).unwrap();
    let mut tape = Tape::new();
    let vars = g.bind(&mut tape, false);
    let y = tape.constant(random(&[2, 96], &mut rng));
    let (features, raw) = g.encode(&mut tape, &vars, y).unwrap();
    let shapes: Vec<Vec<usize>> = raw.iter().map(|v| tape.value(*v).shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![vec![2, 4, 48], vec![2, 8, 24], vec![2, 16, 12], vec![2, 32, 6]]
    );
    for v in &raw {
        assert_eq!(tape.value(*v).len() / 2, 2 * 96);
    }
    assert_eq!(tape.value(features).shape(), &[2, 96, 8]);
    // step j, layer l reads conv position j >> l with its channels in order
    let f = tape.value(features);
    for (l, v) in raw.iter().enumerate() {
        let conv = tape.value(*v);
        let c = conv.shape()[1];
        for j in 0..96 {
            for k in 0..2 {
                let flat = j * 2 + k;
                let expected = conv.get(&[1, flat % c, flat / c]);
                assert_eq!(f.get(&[1, j, 2 * l + k]), expected);
                assert_eq!(flat / c, layer_source_position(j, l + 1));
            }
        }
    }
}

#[test]
fn zero_input_and_biases_give_zero_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = ReconstructionNet::new(&ModelConfig::default(), &mut rng).unwrap();
    let mut tape = Tape::new();
    let vars = g.bind(&mut tape, false);
    let y = tape.constant(Array::zeros(&[1, 96]));
    let (features, _) = g.encode(&mut tape, &vars, y).unwrap();
    assert!(tape.value(features).data().iter().all(|v| *v == 0.0));
}

#[test]
fn impulse_stays_inside_receptive_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = ReconstructionNet::new(&ModelConfig::default(), &mut rng).unwrap();
    let mut y = Array::zeros(&[1, 96]);
    y.data_mut()[50] = 1.0;
    let mut tape = Tape::new();
    let vars = g.bind(&mut tape, false);
    let yv = tape.constant(y);
    let (features, _) = g.encode(&mut tape, &vars, yv).unwrap();
    let f = tape.value(features);
    let mut max_half_width = 0;
    for j in 0..96 {
        for l in 1..=CONV_LAYERS {
            let center = layer_source_position(j, l) << l;
            let half = (1usize << l) - 1;
            let touched = (0..2).any(|k| f.get(&[0, j, 2 * (l - 1) + k]) != 0.0);
            if touched {
                assert!(center.abs_diff(50) <= half, "layer {l}, step {j}");
                max_half_width = max_half_width.max(center.abs_diff(50));
            }
        }
    }
    assert!(max_half_width <= 15);
}

#[test]
fn reconstruction_output_shapes_and_symmetric_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = ReconstructionNet::new(&ModelConfig::default(), &mut rng).unwrap();
    let y = random(&[2, 96], &mut rng);
    let (series, inter) = g.reconstruct(&y).unwrap();
    assert_eq!(series.shape(), &[2, 8, 96]);
    assert_eq!(inter.shape(), &[2, 96]);

    let row: Vec<f64> = g.heads_w.data()[..128].to_vec();
    let tiled: Vec<f64> = (0..8).flat_map(|_| row.clone()).collect();
    g.heads_w = Array::new(vec![8, 128], tiled).unwrap();
    g.heads_b = Array::full(&[8], 0.25);
    let (series, _) = g.reconstruct(&y).unwrap();
    for b in 0..2 {
        for s in 1..8 {
            for j in 0..96 {
                assert_eq!(series.get(&[b, s, j]), series.get(&[b, 0, j]));
            }
        }
    }
}

#[test]
fn reconstruction_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let cfg = small_cfg();
    let g = ReconstructionNet::new(&cfg, &mut rng).unwrap();
    let y = random(&[2, 16], &mut rng);
    let err = grad_check(&g, |m, t, v| {
        let yv = t.constant(y.clone());
        let out = m.forward(t, v, yv).unwrap();
        let reps = vec![yv; m.series()];
        let target = t.concat(&reps, 1).unwrap();
        let target = t.reshape(target, &[2, m.series(), 16]).unwrap();
        let d = t.sub(out.series, target).unwrap();
        let a = t.mul(d, d).unwrap();
        t.mean(a)
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn readout_loss_only_reaches_readout_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let g = ReconstructionNet::new(&small_cfg(), &mut rng).unwrap();
    let y = random(&[2, 16], &mut rng);
    let mut tape = Tape::new();
    let vars = g.bind(&mut tape, true);
    let yv = tape.constant(y);
    let out = g.forward(&mut tape, &vars, yv).unwrap();
    let d = tape.sub(out.intermediate, yv).unwrap();
    let a = tape.abs(d);
    let loss = tape.mean(a);
    tape.backward(loss).unwrap();
    let grads = flatten_grads::<ReconstructionNet>(&tape, &vars);
    for (name, start, len) in param_segments(&g) {
        let norm: f64 = grads[start..start + len].iter().map(|v| v.abs()).sum();
        if name.starts_with("readout") {
            assert!(norm > 0.0, "{name}");
        } else {
            assert_eq!(norm, 0.0, "{name}");
        }
    }
}

#[test]
fn intermediate_readout() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = ReconstructionNet::new(&ModelConfig::default(), &mut rng).unwrap();
    g.readout_b = Array::scalar(0.7);
    let (_, inter) = g.reconstruct(&Array::zeros(&[1, 96])).unwrap();
    assert!(inter.data().iter().all(|v| *v == 0.7));
    let y = random(&[1, 96], &mut rng);
    let (series, inter) = g.reconstruct(&y).unwrap();
    let first = &series.data()[..96];
    assert!(first.iter().zip(inter.data()).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn identity_network_reproduces_input() {
    let cfg = ModelConfig::default();
    let g = ReconstructionNet::identity(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let y = random(&[3, 96], &mut rng);
    let (series, inter) = g.reconstruct(&y).unwrap();
    for b in 0..3 {
        for s in 0..8 {
            for j in 0..96 {
                assert_eq!(series.get(&[b, s, j]), y.get(&[b, j]));
            }
        }
    }
    assert_eq!(inter, y);
}

#[test]
fn spectral_norm_matches_dense_eigensolve() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let w = random(&[8, 8], &mut rng);
        let m = nalgebra::DMatrix::from_row_slice(8, 8, w.data());
        let gram = m.transpose() * &m;
        let top = gram.symmetric_eigenvalues().max().sqrt();
        let est = spectral_norm(&w, 100).unwrap();
        assert!((est - top).abs() / top < 1e-6, "{est} vs {top}");
    }
}

#[test]
fn flatten_roundtrip_and_segments() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = Predictor::new(&small_cfg(), 1, &mut rng).unwrap();
    let flat = flatten_params(&p);
    let mut q = Predictor::new(&small_cfg(), 1, &mut rng).unwrap();
    load_flat_params(&mut q, &flat);
    assert_eq!(flatten_params(&q), flat);
    assert_eq!(p.predict(&Array::ones(&[1, 12])).unwrap(), {
        let mut q = q.clone();
        q.layers = p.layers.clone();
        q.predict(&Array::ones(&[1, 12])).unwrap()
    });
    let segs = p.component_segments();
    assert_eq!(segs[0].0, "embedding");
    assert_eq!(segs[1].0, "projector");
    assert_eq!(segs[1].1 + segs[1].2, flat.len());
    assert_eq!(param_segments(&p).len(), 6);
}
