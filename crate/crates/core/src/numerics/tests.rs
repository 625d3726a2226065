use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

/// Central finite differences of `f` at `x` (step 1e-5).
fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.numel())
        .map(|i| {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Checks d(sum(w ⊙ f(x)))/dx against finite differences for a unary op.
fn check_unary(x: Tensor<f64>, op: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var, NumError>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let probe = {
        let mut t = Tape::new();
        let v = t.constant(x.clone()).unwrap();
        let y = op(&mut t, v).unwrap();
        Tensor::<f64>::randn(t.shape(y), 1.0, &mut rng)
    };
    let f = |xx: &Tensor<f64>| {
        let mut t = Tape::new();
        let v = t.constant(xx.clone()).unwrap();
        let y = op(&mut t, v).unwrap();
        t.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut t = Tape::new();
    let v = t.leaf(x.clone(), true).unwrap();
    let y = op(&mut t, v).unwrap();
    let w = t.constant(probe.clone()).unwrap();
    let prod = t.mul(y, w).unwrap();
    let loss = t.sum(prod).unwrap();
    let g = t.backward(loss).unwrap();
    let analytic = g.get(v).unwrap().data().to_vec();
    let numeric = numeric_grad(&x, &f);
    let e = rel_err(&analytic, &numeric);
    assert!(e < 1e-6, "relative error {e}");
}

#[test]
fn matmul_identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = Tensor::<f64>::randn(&[2, 5], 1.0, &mut rng);
    assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
    let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let z = matmul(&a, &Tensor::zeros(&[4, 6])).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_two_by_two_matches_hand_oracle() {
    let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::<f64>::from_f64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap();
    let expected = naive_matmul(a.data(), b.data(), 2, 2, 2);
    assert_eq!(expected, vec![19.0, 22.0, 43.0, 50.0]);
    assert_eq!(matmul(&a, &b).unwrap().data(), expected.as_slice());
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let a = Tensor::<f32>::zeros(&[2, 3]);
    let b = Tensor::<f32>::zeros(&[4, 2]);
    assert!(matches!(matmul(&a, &b), Err(NumError::Shape(_))));
}

#[test]
fn matmul_random_shapes_agree_with_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (m, k, n) = (rng.random_range(1..=32), rng.random_range(1..=32), rng.random_range(1..=32));
        let a = Tensor::<f64>::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[k, n], 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(a.data(), b.data(), m, k, n);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-6);
        }
    }
}

#[test]
fn bmm_transposed_rhs_matches_per_batch_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[3, 6, 5], 1.0, &mut rng);
    let got = bmm(&a, &b, true).unwrap();
    for i in 0..3 {
        let bt = permute(&Tensor::from_f64(&[6, 5], &b.data()[i * 30..(i + 1) * 30].to_vec()).unwrap(), &[1, 0]).unwrap();
        let want = naive_matmul(&a.data()[i * 20..(i + 1) * 20], bt.data(), 4, 5, 6);
        for (g, w) in got.data()[i * 24..(i + 1) * 24].iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }
    }
}

#[test]
fn softmax_closed_forms() {
    let c = Tensor::<f64>::from_f64(&[3], &[2.5, 2.5, 2.5]).unwrap();
    for v in softmax(&c, 0).unwrap().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let x = Tensor::<f64>::from_f64(&[2], &[0.0, 2f64.ln()]).unwrap();
    let s = softmax(&x, 0).unwrap();
    assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant_on_any_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::randn(&[3, 4, 5], 3.0, &mut rng);
    for axis in 0..3 {
        let s = softmax(&x, axis).unwrap();
        let shifted = softmax(&x.map(|v| v + 17.0), axis).unwrap();
        assert!(s.max_abs_diff(&shifted) < 1e-6);
        let mut t = Tape::new();
        let v = t.constant(s.clone()).unwrap();
        let sums = t.sum_axis(v, axis).unwrap();
        for &total in t.value(sums).data() {
            assert!((total - 1.0).abs() < 1e-6);
        }
        assert!(s.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
    assert!(matches!(softmax(&x, 3), Err(NumError::Axis { .. })));
}

#[test]
fn softmax_large_inputs_stay_finite() {
    let x = Tensor::<f32>::from_f64(&[3], &[1000.0, 1001.0, 999.0]).unwrap();
    assert!(softmax(&x, 0).unwrap().is_finite());
}

#[test]
fn conv1d_examples() {
    let x = Tensor::<f64>::from_f64(&[1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let id = Tensor::<f64>::from_f64(&[1, 1, 1], &[1.0]).unwrap();
    assert_eq!(conv1d(&x, &id, 1).unwrap(), x);
    let pair = Tensor::<f64>::from_f64(&[1, 1, 2], &[1.0, 1.0]).unwrap();
    assert_eq!(conv1d(&x, &pair, 2).unwrap().data(), &[3.0, 7.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sig = Tensor::<f64>::randn(&[3, 24], 1.0, &mut rng);
    let k = Tensor::<f64>::randn(&[5, 3, 4], 1.0, &mut rng);
    let y = conv1d(&sig, &k, 4).unwrap();
    assert_eq!(y.shape(), &[5, 6]);

    let long = Tensor::<f64>::from_f64(&[1, 1, 5], &[1.0; 5]).unwrap();
    assert!(matches!(conv1d(&x, &long, 1), Err(NumError::KernelTooLong { .. })));
}

#[test]
fn conv1d_with_stride_equal_kernel_is_a_per_token_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (c, s, n, d) = (3, 4, 5, 7);
    let sig = Tensor::<f64>::randn(&[c, s * n], 1.0, &mut rng);
    let k = Tensor::<f64>::randn(&[d, c, s], 1.0, &mut rng);
    let y = conv1d(&sig, &k, s).unwrap();
    for tok in 0..n {
        for o in 0..d {
            let mut acc = 0.0;
            for ch in 0..c {
                for j in 0..s {
                    acc += k.at(&[o, ch, j]) * sig.at(&[ch, tok * s + j]);
                }
            }
            assert!((y.at(&[o, tok]) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::<f64>::randn(&[2, 3, 6, 5], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
    let y = conv2d(&x, &w, Some(&b), 2, 1).unwrap();
    assert_eq!(y.shape(), &[2, 4, 3, 3]);
    for bi in 0..2 {
        for o in 0..4 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b.data()[o];
                    for c in 0..3 {
                        for i in 0..3 {
                            for j in 0..3 {
                                let iy = (oy * 2 + i) as isize - 1;
                                let ix = (ox * 2 + j) as isize - 1;
                                if iy >= 0 && iy < 6 && ix >= 0 && ix < 5 {
                                    acc += w.at(&[o, c, i, j]) * x.at(&[bi, c, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    assert!((y.at(&[bi, o, oy, ox]) - acc).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn backward_closed_forms() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap(), true).unwrap();
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap(), true).unwrap();
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_and_skips_non_ancestors() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::ones(&[3]), true).unwrap();
    let unused = t.leaf(Tensor::ones(&[2]), true).unwrap();
    let y = t.scale(x, 2.0).unwrap();
    assert!(matches!(t.backward(y), Err(NumError::NotScalar(_))));
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(x).is_some());
    assert!(g.get(unused).is_none());
}

#[test]
fn non_finite_results_surface_as_errors() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::full(&[2], 3.0e38), true).unwrap();
    assert!(matches!(t.add(x, x), Err(NumError::NonFinite("add"))));
}

#[test]
fn unary_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    check_unary(x.clone(), &|t, v| t.gelu(v));
    check_unary(x.clone(), &|t, v| t.silu(v));
    check_unary(x.clone(), &|t, v| t.softmax(v, 0));
    check_unary(x.clone(), &|t, v| t.softmax(v, 1));
    check_unary(x.clone(), &|t, v| t.log_softmax(v));
    check_unary(x.clone(), &|t, v| t.transpose(v));
    check_unary(x.clone(), &|t, v| t.reshape(v, &[2, 6]));
    check_unary(x.clone(), &|t, v| t.sum_axis(v, 0));
    check_unary(x.clone(), &|t, v| t.mean_axis(v, 1));
    check_unary(x.clone(), &|t, v| t.normalize(v, 1e-12));
    check_unary(x.clone(), &|t, v| t.gather(v, &[2, 0, 2]));
    check_unary(x.clone(), &|t, v| {
        let y = t.scale(v, 0.5)?;
        t.concat(&[v, y], 1)
    });
    check_unary(x.clone(), &|t, v| t.mean(v));
    let img = Tensor::<f64>::randn(&[2, 2, 3, 3], 1.0, &mut rng);
    check_unary(img.clone(), &|t, v| t.upsample2x(v));
    check_unary(img.clone(), &|t, v| t.permute(v, &[2, 0, 3, 1]));
}

#[test]
fn binary_and_parametric_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
    check_unary(Tensor::randn(&[2, 3, 4], 1.0, &mut rng), &|t, v| {
        let wv = t.constant(w.clone())?;
        t.matmul(v, wv)
    });
    let a = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
    check_unary(Tensor::randn(&[2, 5, 4], 1.0, &mut rng), &|t, v| {
        let av = t.constant(a.clone())?;
        t.bmm(av, v, true)
    });
    let gamma = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
    let beta = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
    check_unary(Tensor::randn(&[3, 4], 1.0, &mut rng), &|t, v| {
        let g = t.constant(gamma.clone())?;
        let b = t.constant(beta.clone())?;
        t.layer_norm(v, g, b, 1e-5)
    });
    let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    check_unary(Tensor::randn(&[4], 1.0, &mut rng), &|t, v| {
        let g = t.leaf(Tensor::ones(&[4]), false)?;
        let xv = t.constant(x.clone())?;
        t.layer_norm(xv, v, g, 1e-5)
    });
    let img = Tensor::<f64>::randn(&[2, 3, 5, 5], 1.0, &mut rng);
    check_unary(Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng), &|t, v| {
        let xv = t.constant(img.clone())?;
        t.conv2d(xv, v, None, 2, 1)
    });
    let k = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
    check_unary(img.clone(), &|t, v| {
        let kv = t.constant(k.clone())?;
        let bv = t.constant(Tensor::ones(&[4]))?;
        t.conv2d(v, kv, Some(bv), 1, 1)
    });
    let kern = Tensor::<f64>::randn(&[5, 3, 2], 1.0, &mut rng);
    check_unary(Tensor::randn(&[2, 3, 8], 1.0, &mut rng), &|t, v| {
        let kv = t.constant(kern.clone())?;
        t.conv1d(v, kv, 2)
    });
    let rows = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
    check_unary(Tensor::randn(&[2, 3], 1.0, &mut rng), &|t, v| {
        let r = t.constant(rows.clone())?;
        t.add_suffix(v, r)
    });
    let other = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
    check_unary(Tensor::randn(&[2], 1.0, &mut rng), &|t, v| {
        let o = t.constant(other.clone())?;
        t.add_prefix(o, v)
    });
    check_unary(Tensor::randn(&[3, 5], 1.0, &mut rng), &|t, v| {
        let lp = t.log_softmax(v)?;
        t.nll(lp, &[4, 0, 2])
    });
}

#[test]
fn shared_inputs_accumulate_gradients() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap(), true).unwrap();
    let a = t.scale(x, 3.0).unwrap();
    let b = t.add(a, x).unwrap();
    let s = t.sum(b).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[4.0, 4.0]);
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
    let before = p.clone();
    let mut st = AdamMoments::zeros(&[3]);
    adam_step(&mut p, &Tensor::zeros(&[3]), &mut st, 1, &AdamConfig::default()).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adam_first_step_moves_against_gradient_sign() {
    let cfg = AdamConfig { lr: 0.01, ..Default::default() };
    let mut p = Tensor::<f64>::zeros(&[3]);
    let g = Tensor::from_f64(&[3], &[0.3, -5.0, 1e-3]).unwrap();
    let mut st = AdamMoments::zeros(&[3]);
    adam_step(&mut p, &g, &mut st, 1, &cfg).unwrap();
    for (pv, gv) in p.data().iter().zip(g.data()) {
        let expected = -cfg.lr * gv.signum();
        assert!((pv - expected).abs() < 1e-5 * cfg.lr.max(1.0));
    }
    assert!(adam_step(&mut p, &g, &mut st, 0, &cfg).is_err());
    assert!(adam_step(&mut p, &Tensor::zeros(&[2]), &mut st, 2, &cfg).is_err());
}

#[test]
fn adam_converges_on_shifted_quadratic() {
    // Oracle: the scalar recursion run directly.
    let cfg = AdamConfig { lr: 0.1, ..Default::default() };
    let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for step in 1..=100 {
        let g = 2.0 * (w - 3.0);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(step));
        let vh = v / (1.0 - 0.999f64.powi(step));
        w -= 0.1 * mh / (vh.sqrt() + 1e-8);
    }
    assert!((w - 3.0).abs() < 0.1);

    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::zeros(&[1]), true);
    let mut opt = Adam::new(cfg);
    for _ in 0..100 {
        let wv = store.value("w").unwrap().item();
        let grads = [("w".to_string(), Tensor::scalar(2.0 * (wv - 3.0)))].into_iter().collect();
        opt.step(&mut store, &grads).unwrap();
    }
    let got = store.value("w").unwrap().item();
    assert!((got - w).abs() < 1e-12);
}

#[test]
fn adam_skips_frozen_parameters_and_rejects_nan() {
    let mut store = ParamStore::<f32>::new();
    store.insert("a", Tensor::ones(&[2]), true);
    store.insert("b", Tensor::ones(&[2]), false);
    let mut opt = Adam::new(AdamConfig::default());
    let grads = [("a".to_string(), Tensor::ones(&[2])), ("b".to_string(), Tensor::ones(&[2]))]
        .into_iter()
        .collect();
    opt.step(&mut store, &grads).unwrap();
    assert_ne!(store.value("a").unwrap(), &Tensor::ones(&[2]));
    assert_eq!(store.value("b").unwrap(), &Tensor::ones(&[2]));
    let bad = [("a".to_string(), Tensor::full(&[2], f32::NAN))].into_iter().collect();
    let snapshot = store.clone();
    assert!(opt.step(&mut store, &bad).is_err());
    assert_eq!(store, snapshot);
}

#[test]
fn attention_heads_split_matches_per_head_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (b, n, m, d, h) = (2, 3, 4, 6, 2);
    let q = Tensor::<f64>::randn(&[b, n, d], 1.0, &mut rng);
    let k = Tensor::<f64>::randn(&[b, m, d], 1.0, &mut rng);
    let v = Tensor::<f64>::randn(&[b, m, d], 1.0, &mut rng);
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q.clone()).unwrap(), t.constant(k.clone()).unwrap(), t.constant(v.clone()).unwrap());
    let o = nn::attention(&mut t, qv, kv, vv, h).unwrap();
    let out = t.value(o);
    let dh = d / h;
    for bi in 0..b {
        for head in 0..h {
            for i in 0..n {
                let scores: Vec<f64> = (0..m)
                    .map(|j| (0..dh).map(|c| q.at(&[bi, i, head * dh + c]) * k.at(&[bi, j, head * dh + c])).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for c in 0..dh {
                    let want: f64 = (0..m).map(|j| (scores[j] - mx).exp() / z * v.at(&[bi, j, head * dh + c])).sum();
                    assert!((out.at(&[bi, i, head * dh + c]) - want).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn bit_identical_replay_of_a_training_step() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut store = ParamStore::<f32>::new();
        let block = nn::TransformerBlock::new("blk", 8, 2, 2);
        block.init(&mut store, &mut rng);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            let x = Tensor::<f32>::randn(&[2, 5, 8], 1.0, &mut rng);
            let mut s = Session::new(&store, true);
            let xv = s.input(x).unwrap();
            let y = block.forward(&mut s, xv).unwrap();
            let loss = s.tape.mean(y).unwrap();
            let sq = s.tape.mul(loss, loss).unwrap();
            let grads = s.param_grads(sq).unwrap();
            drop(s);
            opt.step(&mut store, &grads).unwrap();
        }
        store
    };
    let (a, b) = (run(), run());
    for ((na, pa), (nb, pb)) in a.iter().zip(b.iter()) {
        assert_eq!(na, nb);
        let bits_a: Vec<u32> = pa.value.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = pb.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}
