use mzu::numerics::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Reference product by the triple loop.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn trivial_primitive_values() {
    let t = forward_primitive(&Primitive::Tanh, &[Tensor::<f64>::vector(&[0.0])]).unwrap();
    assert_eq!(t.data(), &[0.0]);
    let s = forward_primitive(&Primitive::Softmax, &[Tensor::<f64>::vector(&[0.0, 0.0])]).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let v = Tensor::<f64>::vector(&[1.0, 0.0]);
    let c = forward_primitive(&Primitive::Cosine, &[v.clone(), v]).unwrap();
    assert!((c.item() - 1.0).abs() < 1e-12);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = rand_tensor(&[2, 3], &mut r);
    let b = rand_tensor(&[3, 4], &mut r);
    let c = forward_primitive(&Primitive::MatMul, &[a.clone(), b.clone()]).unwrap();
    assert_eq!(c.shape(), &[2, 4]);
    let want = matmul_oracle(a.data(), b.data(), 2, 3, 4);
    for (x, y) in c.data().iter().zip(&want) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn bmm_matches_per_batch_loops() {
    let mut r = rng(2);
    let a = rand_tensor(&[3, 2, 5], &mut r);
    let b = rand_tensor(&[3, 5, 4], &mut r);
    let bt = rand_tensor(&[3, 4, 5], &mut r);
    let c = forward_primitive(&Primitive::BatchMatMul { transpose_b: false }, &[a.clone(), b.clone()]).unwrap();
    let ct = forward_primitive(&Primitive::BatchMatMul { transpose_b: true }, &[a.clone(), bt.clone()]).unwrap();
    for t in 0..3 {
        let at = &a.data()[t * 10..(t + 1) * 10];
        let want = matmul_oracle(at, &b.data()[t * 20..(t + 1) * 20], 2, 5, 4);
        // explicit transpose of bt[t]
        let mut btt = vec![0.0; 20];
        for i in 0..4 {
            for j in 0..5 {
                btt[j * 4 + i] = bt.data()[t * 20 + i * 5 + j];
            }
        }
        let want_t = matmul_oracle(at, &btt, 2, 5, 4);
        for i in 0..8 {
            assert!((c.data()[t * 8 + i] - want[i]).abs() < 1e-12);
            assert!((ct.data()[t * 8 + i] - want_t[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_with_zero_inner_width_gives_zeros() {
    let a = Tensor::<f64>::zeros(&[3, 0]);
    let b = Tensor::<f64>::zeros(&[0, 2]);
    let c = forward_primitive(&Primitive::MatMul, &[a, b]).unwrap();
    assert_eq!(c.shape(), &[3, 2]);
    assert!(c.data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_errors_name_the_op() {
    let err = forward_primitive(
        &Primitive::MatMul,
        &[Tensor::<f64>::zeros(&[2, 3]), Tensor::zeros(&[4, 2])],
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    let empty = forward_primitive(&Primitive::Softmax, &[Tensor::<f64>::zeros(&[2, 0])]);
    assert!(empty.is_err());
}

#[test]
fn reverse_sweep_of_linear_sum() {
    // loss = sum(x · W) with x fixed: dL/dW[i][j] = x[i].
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(3);
    store.insert("w", rand_tensor(&[3, 2], &mut r)).unwrap();
    store.insert("unused", rand_tensor(&[4], &mut r)).unwrap();
    let x = Tensor::from_f64(&[1, 3], &[0.5, -1.0, 2.0]).unwrap();
    let build = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
        let w = tape.param(s, "w")?;
        tape.param(s, "unused")?;
        let xv = tape.constant(x.clone());
        let y = tape.matmul(xv, w)?;
        Ok(tape.sum_all(y))
    };
    let mut tape = Tape::new();
    let loss = build(&mut tape, &store).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get("w").unwrap().data(), &[0.5, 0.5, -1.0, -1.0, 2.0, 2.0]);
    assert!(g.get("unused").unwrap().data().iter().all(|&v| v == 0.0));

    let report = gradient_check(&store, build, &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn tanh_derivative_at_origin() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::vector(&[0.0])).unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let t = tape.tanh(w);
    let loss = tape.sum_all(t);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get("w").unwrap().data(), &[1.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::zeros(&[2]));
    assert!(tape.backward(v).is_err());
    let mut inf = Tape::<f64>::inference();
    let s = inf.constant(Tensor::scalar(1.0));
    assert!(inf.backward(s).is_err());
}

#[test]
fn gradient_check_on_quadratic_and_constant() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(4);
    store.insert("theta", rand_tensor(&[7], &mut r)).unwrap();
    let quad = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
        let t = tape.param(s, "theta")?;
        let sq = tape.mul(t, t)?;
        let sum = tape.sum_all(sq);
        Ok(tape.scale(sum, 0.5))
    };
    let mut tape = Tape::new();
    let l = quad(&mut tape, &store).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get("theta").unwrap(), store.get("theta").unwrap());
    let rep = gradient_check(&store, quad, &GradCheckOptions { tol: 1e-8, ..Default::default() }).unwrap();
    assert!(rep.passed && rep.max_rel_error < 1e-8, "{rep:?}");

    let constant = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
        tape.param(s, "theta")?;
        Ok(tape.constant(Tensor::scalar(3.0)))
    };
    let rep = gradient_check(&store, constant, &GradCheckOptions::default()).unwrap();
    assert!(rep.passed);
    assert_eq!(rep.max_rel_error, 0.0);
}

#[test]
fn gradient_check_rejects_non_finite() {
    let mut store = ParamStore::<f64>::new();
    store.insert("theta", Tensor::vector(&[1.0])).unwrap();
    let f = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
        let t = tape.param(s, "theta")?;
        let s = tape.sum_all(t);
        Ok(tape.scale(s, f64::INFINITY))
    };
    assert!(gradient_check(&store, f, &GradCheckOptions::default()).is_err());
}

#[test]
fn global_norm_clip_examples() {
    let mut g = Gradients::<f64>::new();
    g.insert("a", Tensor::vector(&[3.0, 4.0]));
    assert_eq!(global_norm_clip(&mut g, 5.0), 5.0);
    assert_eq!(g.get("a").unwrap().data(), &[3.0, 4.0]);

    let mut g = Gradients::<f64>::new();
    g.insert("a", Tensor::vector(&[6.0, 8.0]));
    global_norm_clip(&mut g, 5.0);
    assert_eq!(g.get("a").unwrap().data(), &[3.0, 4.0]);

    let mut g = Gradients::<f64>::new();
    g.insert("a", Tensor::zeros(&[3]));
    global_norm_clip(&mut g, 5.0);
    assert!(g.get("a").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_examples() {
    let ones = Tensor::<f64>::ones(&[4]);
    let zeros = Tensor::<f64>::zeros(&[4]);
    let c = layer_norm(&Tensor::vector(&[2.0; 4]), &ones, &zeros, LAYER_NORM_EPS).unwrap();
    assert!(c.data().iter().all(|v| v.abs() < 1e-9));

    let y = layer_norm(
        &Tensor::<f64>::vector(&[1.0, -1.0]),
        &Tensor::ones(&[2]),
        &Tensor::zeros(&[2]),
        1e-12,
    )
    .unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);

    let mut r = rng(5);
    let x = Tensor::<f64>::normal(&[64], 3.0, &mut r).map(|v| v + 7.0);
    let y = layer_norm(&x, &Tensor::ones(&[64]), &Tensor::zeros(&[64]), LAYER_NORM_EPS).unwrap();
    let mean = y.sum() / 64.0;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-4);

    assert!(layer_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[64]), 1e-5).is_err());
}

#[test]
fn dropout_mask_examples() {
    let mut r = rng(6);
    let m: Tensor<f64> = dropout_mask(&[10], 0.0, true, &mut r).unwrap();
    assert!(m.data().iter().all(|&v| v == 1.0));
    let m: Tensor<f64> = dropout_mask(&[10], 0.7, false, &mut r).unwrap();
    assert!(m.data().iter().all(|&v| v == 1.0));
    assert!(dropout_mask::<f64, _>(&[3], 1.0, true, &mut r).is_err());

    // Monte Carlo: entries are 0 or 2, so the sample mean has σ = 1/sqrt(n).
    let n = 100_000;
    let m: Tensor<f64> = dropout_mask(&[n], 0.5, true, &mut r).unwrap();
    let mean = m.sum() / n as f64;
    let sigma = 1.0 / (n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
}

#[test]
fn dropout_and_forward_are_seed_reproducible() {
    let a: Tensor<f32> = dropout_mask(&[50], 0.3, true, &mut rng(9)).unwrap();
    let b: Tensor<f32> = dropout_mask(&[50], 0.3, true, &mut rng(9)).unwrap();
    assert_eq!(a, b);
    let x = Tensor::<f32>::uniform(&[4, 6], -2.0, 2.0, &mut rng(10));
    let y1 = forward_primitive(&Primitive::Softmax, std::slice::from_ref(&x)).unwrap();
    let y2 = forward_primitive(&Primitive::Softmax, &[x]).unwrap();
    assert_eq!(y1.data(), y2.data());
}

#[test]
fn reverse_sweep_is_linear_in_the_loss() {
    let mut r = rng(11);
    let mut store = ParamStore::<f64>::new();
    store.insert("a", rand_tensor(&[3, 4], &mut r)).unwrap();
    store.insert("b", rand_tensor(&[4], &mut r)).unwrap();
    let l1 = |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> mzu::Result<Var> {
        let a = tape.param(s, "a")?;
        let b = tape.param(s, "b")?;
        let y = tape.add(a, b)?;
        let t = tape.tanh(y);
        Ok(tape.sum_all(t))
    };
    let l2 = |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> mzu::Result<Var> {
        let a = tape.param(s, "a")?;
        let sm = tape.softmax(a)?;
        let sq = tape.mul(sm, sm)?;
        Ok(tape.sum_all(sq))
    };
    let grads = |f: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> mzu::Result<Var>| {
        let mut t = Tape::new();
        let l = f(&mut t, &store).unwrap();
        let mut g = t.backward(l).unwrap();
        g.fill_missing(&store);
        g
    };
    let g1 = grads(&l1);
    let g2 = grads(&l2);
    let gsum = grads(&|t: &mut Tape<f64>, s: &ParamStore<f64>| {
        let x = l1(t, s)?;
        let y = l2(t, s)?;
        t.add(x, y)
    });
    let both = g1.merged(&g2);
    for (name, g) in gsum.iter() {
        assert!(g.max_abs_diff(both.get(name).unwrap()) < 1e-12, "{name}");
    }
}

/// Weighted sum of a primitive's output against a fixed probe, so every
/// output coordinate contributes a distinct weight to the loss.
fn probe_loss(tape: &mut Tape<f64>, y: Var, seed: u64) -> mzu::Result<Var> {
    let probe = Tensor::uniform(tape.shape(y), -1.0, 1.0, &mut rng(seed));
    let p = tape.constant(probe);
    let m = tape.mul(y, p)?;
    Ok(tape.sum_all(m))
}

fn check_primitive(shapes: &[Vec<usize>], seed: u64, prim: Primitive, positive: bool) {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    for (i, s) in shapes.iter().enumerate() {
        let t = if positive {
            Tensor::uniform(s, 0.5, 2.0, &mut r)
        } else {
            rand_tensor(s, &mut r)
        };
        store.insert(format!("in{i}"), t).unwrap();
    }
    let n = shapes.len();
    let f = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
        let vars: Vec<Var> = (0..n)
            .map(|i| tape.param(s, &format!("in{i}")))
            .collect::<mzu::Result<_>>()?;
        let y = tape.apply(&prim, &vars)?;
        probe_loss(tape, y, seed + 1000)
    };
    let rep = gradient_check(&store, f, &GradCheckOptions::default()).unwrap();
    assert!(rep.passed, "{prim:?} {shapes:?}: {rep:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_primitive_passes_gradient_check(m in 1usize..4, k in 1usize..5, n in 1usize..4, seed in 0u64..1000) {
        check_primitive(&[vec![m, k], vec![k, n]], seed, Primitive::MatMul, false);
        check_primitive(&[vec![2, m, k], vec![2, k, n]], seed, Primitive::BatchMatMul { transpose_b: false }, false);
        check_primitive(&[vec![2, m, k], vec![2, n, k]], seed, Primitive::BatchMatMul { transpose_b: true }, false);
        check_primitive(&[vec![m, k], vec![k]], seed, Primitive::Add, false);
        check_primitive(&[vec![m, 1, k], vec![n, 1]], seed, Primitive::Sub, false);
        check_primitive(&[vec![m, n, k], vec![n, k]], seed, Primitive::Mul, false);
        check_primitive(&[vec![m, k], vec![m, k]], seed, Primitive::Mul, false);
        check_primitive(&[vec![m, k], vec![m, n]], seed, Primitive::Concat { axis: 1 }, false);
        check_primitive(&[vec![m, k]], seed, Primitive::Slice { axis: 1, start: k / 2, len: k - k / 2 }, false);
        check_primitive(&[vec![m, k]], seed, Primitive::Sigmoid, false);
        check_primitive(&[vec![m, k]], seed, Primitive::Tanh, false);
        check_primitive(&[vec![m, k]], seed, Primitive::Relu, false);
        check_primitive(&[vec![m, k]], seed, Primitive::Softmax, false);
        check_primitive(&[vec![m, k]], seed, Primitive::L2Normalize, false);
        check_primitive(&[vec![m, k], vec![m, k]], seed, Primitive::Cosine, false);
        check_primitive(&[vec![m, k]], seed, Primitive::Squash, false);
        check_primitive(&[vec![m, k]], seed, Primitive::Scale(-1.7), false);
        check_primitive(&[vec![m, n, k]], seed, Primitive::SumAxis(1), false);
        check_primitive(&[vec![m, k]], seed, Primitive::MeanAll, false);
        check_primitive(&[vec![4, k]], seed, Primitive::Gather(vec![0, 3, 3, 1]), false);
        check_primitive(&[vec![m, k + 1]], seed, Primitive::LayerNorm { eps: 1e-5 }, false);
        check_primitive(&[vec![m, k]], seed, Primitive::CrossEntropy((0..m).map(|i| i % k).collect()), false);
        check_primitive(&[vec![2, k, k]], seed, Primitive::FillDiagonal(1.0), false);
        check_primitive(&[vec![m, k]], seed, Primitive::ClampMin(-5.0), false);
        check_primitive(&[vec![m, k]], seed, Primitive::Rsqrt, true);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let x = Tensor::<f64>::uniform(&[rows, cols], -30.0, 30.0, &mut rng(seed));
        let y = forward_primitive(&Primitive::Softmax, &[x]).unwrap();
        for row in y.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn cosine_is_bounded(d in 1usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::<f64>::uniform(&[d], -5.0, 5.0, &mut r);
        let b = Tensor::<f64>::uniform(&[d], -5.0, 5.0, &mut r);
        let c = forward_primitive(&Primitive::Cosine, &[a.clone(), b]).unwrap().item();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        if a.sq_norm() > 1e-12 {
            let s = forward_primitive(&Primitive::Cosine, &[a.clone(), a]).unwrap().item();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn cosine_with_zero_vector_is_zero_with_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    store.insert("a", Tensor::zeros(&[3])).unwrap();
    store.insert("b", Tensor::vector(&[1.0, 2.0, 3.0])).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, "a").unwrap();
    let b = tape.param(&store, "b").unwrap();
    let c = tape.cosine(a, b).unwrap();
    assert_eq!(tape.scalar(c), 0.0);
    let g = tape.backward(c).unwrap();
    assert!(g.get("a").unwrap().data().iter().all(|v| v.is_finite() && *v == 0.0));
    assert!(g.get("b").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn gather_rejects_unknown_ids() {
    let r = forward_primitive(&Primitive::Gather(vec![5]), &[Tensor::<f64>::zeros(&[3, 2])]);
    assert!(r.is_err());
}

#[test]
fn fan_out_accumulates() {
    // loss = sum(w * w + w) uses w three times; dL/dw = 2w + 1.
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(12);
    let w: Tensor<f64> = Tensor::uniform(&[5], -1.0, 1.0, &mut r);
    store.insert("w", w.clone()).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, "w").unwrap();
    let b = tape.param(&store, "w").unwrap();
    assert_eq!(a, b);
    let sq = tape.mul(a, b).unwrap();
    let s = tape.add(sq, a).unwrap();
    let l = tape.sum_all(s);
    let g = tape.backward(l).unwrap();
    for (gv, wv) in g.get("w").unwrap().data().iter().zip(w.data()) {
        assert!((gv - (2.0 * wv + 1.0)).abs() < 1e-12);
    }
}
