use std::rc::Rc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    t(&[m, n], &out)
}

fn forward<F>(inputs: &[Tensor<f64>], f: F) -> Tensor<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).clone()
}

#[test]
fn matmul_identity_and_projector() {
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(forward(&[eye, m.clone()], |g, v| g.matmul(v[0], v[1]).unwrap()), m);

    let p = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
    let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    assert_eq!(
        forward(&[p, b], |g, v| g.matmul(v[0], v[1]).unwrap()),
        t(&[2, 2], &[5.0, 6.0, 0.0, 0.0])
    );
}

#[test]
fn matmul_random_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::<f64>::randn(&[3, 4], &mut r);
    let b = Tensor::<f64>::randn(&[4, 2], &mut r);
    let out = forward(&[a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]).unwrap());
    assert!(out.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let out = forward(&[t(&[3], &[0.0, 0.0, 0.0])], |g, v| g.softmax(v[0], 0).unwrap());
    for &p in out.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let out = forward(&[t(&[1], &[42.0])], |g, v| g.softmax(v[0], 0).unwrap());
    assert_eq!(out.data(), &[1.0]);

    // 40-digit reference values of exp(i) / Σ exp(j) for i in 1..=3.
    let reference = [
        0.0900305731703804579980221,
        0.2447284710547976524729596,
        0.6652409557748218895290183,
    ];
    let out = forward(&[t(&[3], &[1.0, 2.0, 3.0])], |g, v| g.softmax(v[0], 0).unwrap());
    for (a, b) in out.data().iter().zip(reference) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn softmax_on_middle_axis() {
    let mut r = rng(2);
    let x = Tensor::<f64>::randn(&[2, 3, 4], &mut r);
    let out = forward(&[x], |g, v| g.softmax(v[0], 1).unwrap());
    for a in 0..2 {
        for c in 0..4 {
            let s: f64 = (0..3).map(|b| out.get(&[a, b, c])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn rms_norm_examples() {
    let c = -2.5;
    let x = t(&[4], &[c; 4]);
    let out = forward(&[x.clone(), Tensor::ones(&[4])], |g, v| {
        g.rms_norm(v[0], v[1], 1e-12).unwrap()
    });
    for &y in out.data() {
        assert!((y + 1.0).abs() < 1e-9);
    }
    let out = forward(&[x, Tensor::zeros(&[4])], |g, v| g.rms_norm(v[0], v[1], 1e-6).unwrap());
    assert!(out.data().iter().all(|&y| y == 0.0));
}

#[test]
fn rms_norm_matches_scalar_loop() {
    let mut r = rng(3);
    let x = Tensor::<f64>::randn(&[3, 5], &mut r);
    let gain = Tensor::<f64>::randn(&[5], &mut r);
    let eps = 1e-5;
    let out = forward(&[x.clone(), gain.clone()], |g, v| g.rms_norm(v[0], v[1], eps).unwrap());
    for i in 0..3 {
        let mut ms = 0.0;
        for j in 0..5 {
            ms += x.get(&[i, j]) * x.get(&[i, j]);
        }
        ms /= 5.0;
        for j in 0..5 {
            let expect = x.get(&[i, j]) / (ms + eps).sqrt() * gain.data()[j];
            assert!((out.get(&[i, j]) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn gelu_matches_extended_precision_grid() {
    // 0.5·x·(1 + erf(x/√2)) evaluated at 40 digits for x = -4, -3.5, …, 4.
    let reference = [
        -0.000126684967332479685015083,
        -0.0008142017766243376272247406,
        -0.004049694094890283579955444,
        -0.01552416331444033791744526,
        -0.04550026389635841440056527,
        -0.1002108019032870990067411,
        -0.1586552539314570514147675,
        -0.1542687693629934481811477,
        0.0,
        0.3457312306370065518188523,
        0.8413447460685429485852325,
        1.399789198096712900993259,
        1.954499736103641585599435,
        2.484475836685559662082555,
        2.995950305905109716420045,
        3.499185798223375662372775,
        3.999873315032667520314985,
    ];
    let xs: Vec<f64> = (-8..=8).map(|i| i as f64 / 2.0).collect();
    let out = forward(&[t(&[17], &xs)], |g, v| g.gelu(v[0]));
    assert_eq!(out.data()[8], 0.0);
    for (a, b) in out.data().iter().zip(reference) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn split_concat_round_trip_example() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 1], &[5.0, 6.0]);
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let c = g.concat(&[va, vb], 1).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    let parts = g.split(c, &[2, 1], 1).unwrap();
    assert_eq!(g.value(parts[0]), &a);
    assert_eq!(g.value(parts[1]), &b);
    assert!(g.split(c, &[2, 2], 1).is_err());
}

#[test]
fn backward_sum_of_squares_is_twice_x() {
    let x = t(&[3], &[1.0, -2.0, 0.5]);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let sq = g.square(v);
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(v), x.map(|a| 2.0 * a));
}

#[test]
fn backward_matmul_matches_finite_differences() {
    let mut r = rng(4);
    let a = Tensor::<f64>::randn(&[3, 4], &mut r);
    let b = Tensor::<f64>::randn(&[4, 2], &mut r);
    let report = grad_check(
        |g, v| {
            let m = g.matmul(v[0], v[1])?;
            Ok(g.sum(m))
        },
        &[a, b],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "max rel error {}", report.max_rel_error);
}

#[test]
fn disconnected_leaf_has_zero_grad() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let loss = g.sum(x);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(unused), Tensor::zeros(&[3]));
}

#[test]
fn backward_rejects_non_scalar_and_second_call() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.square(x);
    assert!(g.backward(y).is_err());
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert!(g.backward(loss).is_err());
    g.zero_grad();
    g.backward(loss).unwrap();
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 3.0]));
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    let loss = g.sum(z);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).data(), &[3.0, 7.0]);
}

#[test]
fn grad_check_linear_is_exact() {
    let w = t(&[3], &[0.5, -1.0, 2.0]);
    let report = grad_check(
        move |g, v| {
            let c = g.constant(w.clone());
            let p = g.mul(v[0], c)?;
            Ok(g.sum(p))
        },
        &[t(&[3], &[1.0, 2.0, 3.0])],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
}

#[test]
fn grad_check_catches_a_wrong_backward_rule() {
    // Cube with a deliberately wrong derivative (2x instead of 3x²).
    let report = grad_check(
        |g, v| {
            let cube = g.value(v[0]).map(|x| x * x * x);
            let y = g.custom(
                &[v[0]],
                cube,
                Box::new(|inputs, grad| {
                    vec![inputs[0].zip_map(grad, |x, gi| 2.0 * x * gi).unwrap()]
                }),
            );
            Ok(g.sum(y))
        },
        &[t(&[3], &[0.7, -1.3, 2.0])],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(!report.passed);
}

#[test]
fn grad_check_rejects_non_scalar_function() {
    let res = grad_check(|g, v| Ok(g.square(v[0])), &[t(&[2], &[1.0, 2.0])], 1e-5, 1e-4);
    assert!(res.is_err());
}

#[test]
fn embedding_rejects_out_of_vocab() {
    let mut g = Graph::<f64>::new();
    let table = g.param(Tensor::zeros(&[4, 2]));
    assert!(g.embedding(table, &[0, 4]).is_err());
}

#[test]
fn attention_rejects_empty_mask() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::zeros(&[2, 1, 2]));
    assert!(g.attention(q, q, q, Some(&[false, false])).is_err());
}

/// Random smooth scalar readout so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, crate::Error> {
    let w = Tensor::randn(g.shape(y), &mut rng(seed));
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, crate::Error>) {
    let report = grad_check(f, inputs, 1e-5, 1e-4).unwrap();
    assert!(report.passed, "max rel error {}", report.max_rel_error);
}

#[test]
fn every_differentiable_op_passes_grad_check() {
    let mut r = rng(5);
    let x = Tensor::<f64>::randn(&[2, 3, 4], &mut r);
    let y = Tensor::<f64>::randn(&[2, 3, 4], &mut r);
    let row = Tensor::<f64>::randn(&[4], &mut r);

    check(&[x.clone(), y.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        weighted_sum(g, s, 1)
    });
    check(&[x.clone(), row.clone()], |g, v| {
        let s = g.sub(v[0], v[1])?;
        weighted_sum(g, s, 2)
    });
    check(&[x.clone(), row.clone()], |g, v| {
        let s = g.mul(v[0], v[1])?;
        weighted_sum(g, s, 3)
    });
    check(&[x.clone()], |g, v| {
        let s = g.scale(v[0], -0.7);
        weighted_sum(g, s, 4)
    });
    check(&[x.clone()], |g, v| {
        let s = g.square(v[0]);
        weighted_sum(g, s, 5)
    });
    check(&[x.clone()], |g, v| {
        let s = g.gelu(v[0]);
        weighted_sum(g, s, 6)
    });
    check(&[x.clone()], |g, v| {
        let s = g.silu(v[0]);
        weighted_sum(g, s, 7)
    });
    for axis in 0..3 {
        check(&[x.clone()], |g, v| {
            let s = g.softmax(v[0], axis)?;
            weighted_sum(g, s, 8)
        });
    }
    check(&[x.clone(), row.clone()], |g, v| {
        let s = g.rms_norm(v[0], v[1], 1e-5)?;
        weighted_sum(g, s, 9)
    });
    check(&[x.clone(), y.clone()], |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        weighted_sum(g, c, 10)
    });
    check(&[x.clone()], |g, v| {
        let parts = g.split(v[0], &[1, 3], 2)?;
        let a = weighted_sum(g, parts[0], 11)?;
        let b = weighted_sum(g, parts[1], 12)?;
        g.add(a, b)
    });
    check(&[x.clone()], |g, v| {
        let s = g.reshape(v[0], &[6, 4])?;
        weighted_sum(g, s, 13)
    });
    check(&[Tensor::randn(&[5, 3], &mut r)], |g, v| {
        let e = g.embedding(v[0], &[4, 0, 4, 2])?;
        weighted_sum(g, e, 14)
    });
    check(
        &[Tensor::randn(&[3, 4], &mut r), Tensor::randn(&[4, 2], &mut r), Tensor::randn(&[2], &mut r)],
        |g, v| {
            let s = g.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, s, 15)
        },
    );
    let tables = Rc::new(RotaryTables {
        tokens: 2,
        pairs: 2,
        cos: vec![0.3f64.cos(), 1.1f64.cos(), (-0.4f64).cos(), 2.0f64.cos()],
        sin: vec![0.3f64.sin(), 1.1f64.sin(), (-0.4f64).sin(), 2.0f64.sin()],
    });
    check(&[Tensor::randn(&[2, 3, 4], &mut r)], |g, v| {
        let s = g.rope(v[0], tables.clone())?;
        weighted_sum(g, s, 16)
    });
    let q = Tensor::<f64>::randn(&[5, 2, 3], &mut r);
    let k = Tensor::<f64>::randn(&[5, 2, 3], &mut r);
    let vv = Tensor::<f64>::randn(&[5, 2, 3], &mut r);
    check(&[q.clone(), k.clone(), vv.clone()], |g, v| {
        let s = g.attention(v[0], v[1], v[2], None)?;
        weighted_sum(g, s, 17)
    });
    check(&[q, k, vv], |g, v| {
        let mask = [true, false, true, true, false];
        let s = g.attention(v[0], v[1], v[2], Some(&mask))?;
        weighted_sum(g, s, 18)
    });
}

fn shape_strategy(max_rank: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..4, 1..=max_rank)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_equals_triple_loop(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::<f64>::randn(&[m, k], &mut r);
        let b = Tensor::<f64>::randn(&[k, n], &mut r);
        let out = forward(&[a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]).unwrap());
        prop_assert!(out.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn split_after_concat_is_identity(
        shape in shape_strategy(4),
        extra in prop::collection::vec(0usize..4, 1..4),
        axis_pick in any::<usize>(),
        seed in any::<u64>(),
    ) {
        let axis = axis_pick % shape.len();
        let mut r = rng(seed);
        let mut parts = vec![Tensor::<f64>::randn(&shape, &mut r)];
        for e in extra {
            let mut s = shape.clone();
            s[axis] = e;
            parts.push(Tensor::randn(&s, &mut r));
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = parts.iter().map(|p| g.constant(p.clone())).collect();
        let c = g.concat(&vars, axis).unwrap();
        let back = g.split(c, &sizes, axis).unwrap();
        for (v, p) in back.iter().zip(&parts) {
            prop_assert_eq!(g.value(*v), p);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        shape in shape_strategy(3),
        axis_pick in any::<usize>(),
        shift in -50.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let axis = axis_pick % shape.len();
        let x = Tensor::<f64>::randn(&shape, &mut rng(seed)).map(|v| 4.0 * v);
        let y = forward(&[x.clone()], |g, v| g.softmax(v[0], axis).unwrap());
        let y_shift = forward(&[x.map(|v| v + shift)], |g, v| g.softmax(v[0], axis).unwrap());
        prop_assert!(y.max_abs_diff(&y_shift) < 1e-6);
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|j| y.data()[(o * n + j) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                for j in 0..n {
                    prop_assert!(y.data()[(o * n + j) * inner + i] >= 0.0);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn elementwise_ops_pass_grad_check_on_random_shapes(shape in shape_strategy(4), seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&shape, &mut r);
        let y = Tensor::<f64>::randn(&shape, &mut r);
        let last = Tensor::<f64>::randn(&shape[shape.len() - 1..], &mut r);
        let axis = seed as usize % shape.len();
        let cases: Vec<(Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, crate::Error>>)> = vec![
            (vec![x.clone(), y.clone()], Box::new(|g, v| { let s = g.mul(v[0], v[1])?; weighted_sum(g, s, 1) })),
            (vec![x.clone(), last.clone()], Box::new(|g, v| { let s = g.add(v[0], v[1])?; weighted_sum(g, s, 2) })),
            (vec![x.clone()], Box::new(|g, v| { let s = g.gelu(v[0]); weighted_sum(g, s, 3) })),
            (vec![x.clone()], Box::new(move |g, v| { let s = g.softmax(v[0], axis)?; weighted_sum(g, s, 4) })),
            (vec![x.clone(), last.clone()], Box::new(|g, v| { let s = g.rms_norm(v[0], v[1], 1e-5)?; weighted_sum(g, s, 5) })),
            (vec![x.clone(), y.clone()], Box::new(move |g, v| { let s = g.concat(&[v[0], v[1]], axis)?; weighted_sum(g, s, 6) })),
        ];
        for (inputs, f) in cases {
            let report = grad_check(f, &inputs, 1e-5, 1e-4).unwrap();
            prop_assert!(report.passed, "max rel error {}", report.max_rel_error);
        }
    }
}
