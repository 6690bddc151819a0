use proptest::prelude::*;

use super::*;

fn random_tensor(shape: Vec<usize>, rng: &mut RngStream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn matmul_identity_and_projector() {
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(matmul(&eye, &m).unwrap().data(), m.data());

    let proj = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
    assert_eq!(matmul(&proj, &b).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::<f64>::zeros(vec![2, 3]);
    let b = Tensor::<f64>::zeros(vec![2, 3]);
    let err = matmul(&a, &b).unwrap_err();
    assert_eq!(err, NumericsError::Dimension { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] });
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = RngStream::new(1, 0);
    let a = random_tensor(vec![3, 4], &mut rng);
    let b = random_tensor(vec![4, 2], &mut rng);
    let w = random_tensor(vec![3, 2], &mut rng);
    let report = finite_difference_check(&[a, b], 1e-5, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        let wv = t.constant(w.clone());
        let p = t.mul(c, wv)?;
        Ok(t.sum(p))
    })
    .unwrap();
    assert_eq!(report.coordinates, 20);
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn cross_entropy_reference_values() {
    assert!((softmax_cross_entropy(&[0.0, 0.0], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((softmax_cross_entropy(&[10.0, 10.0, 10.0], 2).unwrap() - 3f64.ln()).abs() < 1e-12);
    // unstabilized brute force
    let logits = [1.0f64, 4.0, 0.0];
    let direct = -(logits[1].exp() / logits.iter().map(|v| v.exp()).sum::<f64>()).ln();
    assert!((softmax_cross_entropy(&logits, 1).unwrap() - direct).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_bad_target() {
    assert!(matches!(softmax_cross_entropy(&[0.0, 1.0], 2), Err(NumericsError::Index { .. })));
    let mut t = Tape::<f64>::new();
    let l = t.constant(Tensor::vector(vec![0.0, 1.0]));
    assert!(matches!(t.cross_entropy(l, &[5], None), Err(NumericsError::Index { .. })));
}

#[test]
fn cross_entropy_node_matches_plain_function_and_gradient() {
    let mut rng = RngStream::new(2, 0);
    let logits = random_tensor(vec![3, 5], &mut rng);
    let targets = [1usize, 4, 0];
    let mut t = Tape::new();
    let v = t.constant(logits.clone());
    let loss = t.cross_entropy(v, &targets, None).unwrap();
    let plain: f64 = (0..3).map(|j| softmax_cross_entropy(logits.row(j), targets[j]).unwrap()).sum::<f64>() / 3.0;
    assert!((t.value(loss).item().unwrap() - plain).abs() < 1e-14);

    let report =
        finite_difference_check(&[logits], 1e-5, |t, v| t.cross_entropy(v[0], &targets, Some(&[true, false, true])))
            .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn dropout_degenerate_and_eval_are_identity() {
    let mut rng = RngStream::new(3, 0);
    let x = random_tensor(vec![4, 4], &mut rng);
    assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
    assert_eq!(dropout(&x, 0.5, &mut rng, false).unwrap(), x);
    assert!(matches!(dropout(&x, 1.0, &mut rng, true), Err(NumericsError::Config(_))));
    assert!(matches!(dropout(&x, -0.1, &mut rng, true), Err(NumericsError::Config(_))));
}

#[test]
fn dropout_survivor_fraction_and_mean() {
    let n = 100_000;
    let x = Tensor::filled(vec![n], 1.0f64);
    let mut rng = RngStream::new(4, 9);
    let y = dropout(&x, 0.5, &mut rng, true).unwrap();
    let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    let mean = y.data().iter().sum::<f64>() / n as f64;
    assert!((survivors - 0.5).abs() <= 0.01, "survivor fraction {survivors}");
    assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
}

#[test]
fn dropout_masks_replay_bitwise() {
    let x = Tensor::filled(vec![257], 1.5f64);
    let a = dropout(&x, 0.3, &mut RngStream::new(5, 2), true).unwrap();
    let b = dropout(&x, 0.3, &mut RngStream::new(5, 2), true).unwrap();
    let c = dropout(&x, 0.3, &mut RngStream::new(5, 3), true).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::zeros(vec![2, 3, 4]));
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0; 24]);
}

#[test]
fn backward_of_square_and_accumulation() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0]);
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[12.0]);
    t.zero_grad();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::zeros(vec![2]));
    assert!(matches!(t.backward(x), Err(NumericsError::Shape(_))));
}

#[test]
fn gradcheck_on_quadratic() {
    let theta = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
    let report = finite_difference_check(&[theta], 1e-5, |t, v| {
        let sq = t.square(v[0]);
        let s = t.sum(sq);
        Ok(t.scale(s, 0.5))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-8, "{report:?}");
}

#[test]
fn gradcheck_reports_non_finite_loss() {
    let theta = Tensor::vector(vec![0.0, 1.0]);
    let r = finite_difference_check(&[theta], 1e-5, |t, v| {
        let r = t.recip(v[0]);
        Ok(t.sum(r))
    });
    assert!(matches!(r, Err(NumericsError::Numeric(_))));
}

#[test]
fn elementwise_and_row_ops_gradients() {
    let mut rng = RngStream::new(6, 0);
    let a = random_tensor(vec![3, 4], &mut rng);
    let b = random_tensor(vec![3, 4], &mut rng);
    let bias = random_tensor(vec![4], &mut rng);
    let pos = Tensor::new(vec![3], vec![1.3, 0.7, 2.1]).unwrap();
    let report = finite_difference_check(&[a, b, bias, pos], 1e-5, |t, v| {
        let s = t.sub(v[0], v[1])?;
        let m = t.mul(s, v[0])?;
        let r = t.relu(m);
        let ab = t.add_bias(v[1], v[2])?;
        let sq = t.square(ab);
        let one = t.add_scalar(sq, 1.0);
        let root = t.sqrt(one);
        let inv = t.recip(root);
        let both = t.add(r, inv)?;
        let d = t.div_rows(both, v[3])?;
        let rows = t.row_sum(d);
        let cat = t.concat_rows(v[0], d)?;
        let c = t.sum(cat);
        let rs = t.sum(rows);
        let total = t.add(c, rs)?;
        Ok(t.scale(total, 0.7))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn embedding_scatter_adds_repeated_ids() {
    let mut t = Tape::<f64>::new();
    let table = t.param(Tensor::zeros(vec![5, 2]));
    let e = t.embedding(table, &[1, 3, 1]).unwrap();
    let s = t.sum(e);
    t.backward(s).unwrap();
    assert_eq!(t.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    assert!(matches!(t.embedding(table, &[5]), Err(NumericsError::Index { .. })));
}

#[test]
fn layer_norm_and_attention_gradients() {
    let mut rng = RngStream::new(7, 0);
    let x = random_tensor(vec![4, 6], &mut rng);
    let gamma = random_tensor(vec![6], &mut rng);
    let beta = random_tensor(vec![6], &mut rng);
    let mem = random_tensor(vec![3, 6], &mut rng);
    let w = random_tensor(vec![4, 6], &mut rng);
    for causal in [false, true] {
        let report = finite_difference_check(&[x.clone(), gamma.clone(), beta.clone(), mem.clone()], 1e-5, |t, v| {
            let h = t.layer_norm(v[0], v[1], v[2])?;
            let a = if causal { t.attention(h, v[0], h, 2, true)? } else { t.attention(h, v[3], v[3], 3, false)? };
            let wv = t.constant(w.clone());
            let p = t.mul(a, wv)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "causal={causal} {report:?}");
    }
}

#[test]
fn causal_attention_ignores_future_rows() {
    let mut rng = RngStream::new(8, 0);
    let x = random_tensor(vec![4, 4], &mut rng);
    let mut y = x.clone();
    for v in &mut y.data_mut()[12..] {
        *v += 1.0;
    }
    let run = |inp: &Tensor<f64>| {
        let mut t = Tape::new();
        let v = t.constant(inp.clone());
        let a = t.attention(v, v, v, 2, true).unwrap();
        t.value(a).clone()
    };
    let (ox, oy) = (run(&x), run(&y));
    assert_eq!(&ox.data()[..12], &oy.data()[..12]);
    assert_ne!(&ox.data()[12..], &oy.data()[12..]);
}

#[test]
fn tape_dropout_gradient_uses_mask() {
    let x = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let report = finite_difference_check(&[x], 1e-5, |t, v| {
        let mut rng = RngStream::new(9, 1);
        let d = t.dropout(v[0], 0.5, &mut rng, true)?;
        let sq = t.square(d);
        Ok(t.sum(sq))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-8, "{report:?}");
}

#[test]
fn f32_tape_runs() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::vector(vec![1.0f32, 2.0]));
    let l = t.cross_entropy(x, &[0], None).unwrap();
    t.backward(l).unwrap();
    let g = t.grad(x).unwrap();
    assert!((g[0] + g[1]).abs() < 1e-6);
}

fn logits_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (2usize..12)
        .prop_flat_map(|v| (prop::collection::vec(-20.0f64..20.0, v), prop::collection::vec(-20.0f64..20.0, v), 0..v))
}

proptest! {
    #[test]
    fn cross_entropy_is_shift_invariant((a, _b, y) in logits_strategy(), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = a.iter().map(|v| v + c).collect();
        let d = softmax_cross_entropy(&shifted, y).unwrap() - softmax_cross_entropy(&a, y).unwrap();
        prop_assert!(d.abs() <= 1e-12 * (1.0 + c.abs()), "diff {d}");
    }

    #[test]
    fn cross_entropy_is_convex_in_logits((a, b, y) in logits_strategy(), t in 0.0f64..=1.0) {
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, z)| t * x + (1.0 - t) * z).collect();
        let lhs = softmax_cross_entropy(&mix, y).unwrap();
        let rhs = t * softmax_cross_entropy(&a, y).unwrap() + (1.0 - t) * softmax_cross_entropy(&b, y).unwrap();
        prop_assert!(lhs <= rhs + 1e-12, "{lhs} > {rhs}");
    }
}
