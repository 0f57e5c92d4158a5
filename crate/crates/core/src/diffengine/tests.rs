use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Central differences of a plain function of the flat data of `v`.
fn fd_gradient(v: &Array, h: f64, f: impl Fn(&Array) -> f64) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let mut p = v.clone();
            p.data_mut()[i] += h;
            let mut m = v.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn eval_scalar(v: &Array, f: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let x = tape.leaf(v.clone());
    let y = f(&mut tape, x);
    tape.scalar_value(y)
}

#[test]
fn quadratic_gradient_is_identity() {
    let v = Array::vector(vec![3.0, -4.0]).unwrap();
    let g = grad_input(&v, |t, x| {
        let s = t.sum_squares(x);
        t.scale(s, 0.5)
    })
    .unwrap();
    assert_eq!(g.data(), &[3.0, -4.0]);
}

#[test]
fn logsumexp_of_equal_logits_has_uniform_gradient() {
    let v = Array::matrix(1, 2, vec![0.0, 0.0]).unwrap();
    let g = grad_input(&v, |t, x| {
        let l = t.logsumexp_rows(x);
        t.sum(l)
    })
    .unwrap();
    assert_eq!(g.data(), &[0.5, 0.5]);
}

#[test]
fn logsumexp_gradient_equals_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let v = random_array(&mut rng, &[3, 5], 20.0);
        let g = grad_input(&v, |t, x| {
            let l = t.logsumexp_rows(x);
            t.sum(l)
        })
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(v.clone());
        let s = tape.softmax_rows(x);
        for (a, b) in g.data().iter().zip(tape.value(s).data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

type Prim = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape, Var) -> Var>);

/// One scalar probe per primitive. Each probe contracts the primitive's
/// output with a fixed weight pattern so every output entry matters.
fn primitive_probes() -> Vec<Prim> {
    fn weighted(t: &mut Tape, y: Var) -> Var {
        let shape = t.value(y).shape().to_vec();
        let n: usize = shape.iter().product();
        let w = Array::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap();
        let w = t.leaf(w);
        let p = t.mul(y, w);
        t.sum(p)
    }
    let mut probes: Vec<Prim> = Vec::new();
    probes.push(("matmul", vec![3, 4], Box::new(|t, x| {
        let w = t.leaf(Array::matrix(4, 2, vec![0.5, -1.0, 0.25, 2.0, -0.75, 0.1, 1.5, -0.3]).unwrap());
        let y = t.matmul(x, w);
        weighted(t, y)
    })));
    probes.push(("matmul_tt", vec![4, 3], Box::new(|t, x| {
        let w = t.leaf(Array::matrix(2, 4, vec![0.5, -1.0, 0.25, 2.0, -0.75, 0.1, 1.5, -0.3]).unwrap());
        let y = t.matmul_t(x, w, true, true);
        weighted(t, y)
    })));
    probes.push(("self_matmul", vec![3, 3], Box::new(|t, x| {
        let y = t.matmul_t(x, x, true, false);
        weighted(t, y)
    })));
    for act in [Activation::Silu, Activation::Softplus, Activation::Tanh] {
        probes.push((act.name(), vec![2, 3], Box::new(move |t, x| {
            let y = t.activate(x, act);
            weighted(t, y)
        })));
    }
    probes.push(("mul_sub_add", vec![2, 3], Box::new(|t, x| {
        let a = t.mul(x, x);
        let b = t.sub(a, x);
        let c = t.add(b, a);
        weighted(t, c)
    })));
    probes.push(("broadcast_rows_col_sum", vec![4], Box::new(|t, x| {
        let b = t.broadcast_rows(x, 3);
        let sq = t.mul(b, b);
        let c = t.col_sum(sq);
        weighted(t, c)
    })));
    probes.push(("broadcast_cols_row_sum", vec![3], Box::new(|t, x| {
        let b = t.broadcast_cols(x, 2);
        let sq = t.mul(b, b);
        let r = t.row_sum(sq);
        weighted(t, r)
    })));
    probes.push(("logsumexp", vec![2, 4], Box::new(|t, x| {
        let l = t.logsumexp_rows(x);
        weighted(t, l)
    })));
    probes.push(("softmax", vec![2, 4], Box::new(|t, x| {
        let s = t.softmax_rows(x);
        weighted(t, s)
    })));
    probes.push(("gather_scatter", vec![3, 2], Box::new(|t, x| {
        let g = t.gather_rows(x, vec![2, 0, 2, 1]);
        let sq = t.mul(g, g);
        let s = t.scatter_rows(sq, vec![0, 0, 1, 1], 2);
        weighted(t, s)
    })));
    probes.push(("pick_place", vec![3, 3], Box::new(|t, x| {
        let p = t.pick_cols(x, vec![2, 0, 1]);
        let sq = t.mul(p, p);
        let q = t.place_cols(sq, vec![1, 1, 0], 2);
        weighted(t, q)
    })));
    probes.push(("expand_sum_squares", vec![5], Box::new(|t, x| {
        let s = t.sum_squares(x);
        let e = t.expand(s, &[2, 2]);
        weighted(t, e)
    })));
    probes
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, shape, f) in primitive_probes() {
        for _ in 0..100 {
            let v = random_array(&mut rng, &shape, 2.0);
            let g = grad_input(&v, |t, x| f(t, x)).unwrap();
            let fd = fd_gradient(&v, 1e-4, |p| eval_scalar(p, &*f));
            for (a, b) in g.data().iter().zip(&fd) {
                assert!(rel_err(*a, *b) <= 1e-5 || (a - b).abs() <= 1e-9, "{name}: {a} vs fd {b}");
            }
        }
    }
}

#[test]
fn second_derivatives_of_every_primitive() {
    // ∇_v of (Σ ((∇_v f)²)) against differences of the first-order gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (name, shape, f) in primitive_probes() {
        let v = random_array(&mut rng, &shape, 1.5);
        let analytic = grad_input(&v, |t, x| {
            let y = f(t, x);
            let g = t.grad(y, &[x]).unwrap()[0];
            t.sum_squares(g)
        })
        .unwrap();
        let first_sq = |p: &Array| grad_input(p, |t, x| f(t, x)).unwrap().squared_norm();
        let fd = fd_gradient(&v, 1e-4, first_sq);
        for (a, b) in analytic.data().iter().zip(&fd) {
            assert!(rel_err(*a, *b) <= 1e-5 || (a - b).abs() <= 1e-8, "{name}: {a} vs fd {b}");
        }
    }
}

#[test]
fn grad_params_of_half_squared_norm_is_the_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParameterSet::new();
    params.insert("w", random_array(&mut rng, &[3, 4], 1.0)).unwrap();
    let g = grad_params(&params, |t, pv| {
        let s = t.sum_squares(pv.get(0));
        t.scale(s, 0.5)
    })
    .unwrap();
    assert_eq!(g.array(0), params.array(0));
}

#[test]
fn balanced_uniform_cross_entropy_leaves_final_bias_gradient_zero() {
    let mut params = ParameterSet::new();
    params.insert("w", Array::zeros(&[2, 3])).unwrap();
    params.insert("b", Array::zeros(&[2])).unwrap();
    let x = Array::matrix(4, 3, vec![1.0, 2.0, -1.0, 0.5, 0.0, 1.0, -2.0, 1.0, 0.3, 0.7, -0.4, 0.9]).unwrap();
    let labels = vec![0, 1, 1, 0];
    let g = grad_params(&params, |t, pv| {
        let xv = t.leaf(x.clone());
        let logits = t.affine(xv, pv.get(0), pv.get(1));
        let lse = t.logsumexp_rows(logits);
        let picked = t.pick_cols(logits, labels.clone());
        let ce = t.sub(lse, picked);
        t.sum(ce)
    })
    .unwrap();
    assert_eq!(g.array(1).data(), &[0.0, 0.0]);
}

/// A two-layer smooth network with ≤1k parameters, built directly on the
/// tape: E(v) = Σ_rows LSE(W2 · silu(W1 v + b1) + b2).
fn small_net(rng: &mut ChaCha8Rng) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.insert("w1", random_array(rng, &[16, 5], 0.8)).unwrap();
    p.insert("b1", random_array(rng, &[16], 0.3)).unwrap();
    p.insert("w2", random_array(rng, &[3, 16], 0.8)).unwrap();
    p.insert("b2", random_array(rng, &[3], 0.3)).unwrap();
    assert!(p.count() <= 1000);
    p
}

fn small_energy(t: &mut Tape, pv: &ParamVars, v: Var) -> Var {
    let h = t.affine(v, pv.get(0), pv.get(1));
    let h = t.activate(h, Activation::Silu);
    let logits = t.affine(h, pv.get(2), pv.get(3));
    let e = t.logsumexp_rows(logits);
    t.sum(e)
}

fn score_of(params: &ParameterSet, v: &Array) -> Array {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let x = tape.leaf(v.clone());
    let e = small_energy(&mut tape, &pv, x);
    let g = tape.grad(e, &[x]).unwrap()[0];
    let s = tape.neg(g);
    tape.value(s).clone()
}

fn half_sq_residual(target: &Array, score: &Array) -> f64 {
    0.5 * target.data().iter().zip(score.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}

#[test]
fn score_loss_parameter_gradient_matches_differences_of_analytic_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = small_net(&mut rng);
    let v = random_array(&mut rng, &[4, 5], 1.5);
    let target = random_array(&mut rng, &[4, 5], 2.0);
    let (_, grads) =
        grad_params_of_input_grad(&params, &v, small_energy, score_matching_objective(target.clone())).unwrap();
    let total = params.count();
    for _ in 0..40 {
        let coord = rng.random_range(0..total);
        let h = 1e-5;
        let mut p = params.clone();
        p.flat_set(coord, params.flat_get(coord) + h);
        let lp = half_sq_residual(&target, &score_of(&p, &v));
        p.flat_set(coord, params.flat_get(coord) - h);
        let lm = half_sq_residual(&target, &score_of(&p, &v));
        let fd = (lp - lm) / (2.0 * h);
        let an = grads.flat_get(coord);
        assert!(rel_err(an, fd) <= 1e-4 || (an - fd).abs() < 1e-9, "coord {coord}: {an} vs {fd}");
    }
}

#[test]
fn scalar_quadratic_energy_second_order_by_hand() {
    // E = ½ a v², s = −a v, loss = ½ (0 − s)² = ½ a² v² → ∂loss/∂a = a v² = a at v = 1.
    let mut params = ParameterSet::new();
    params.insert("a", Array::scalar(1.7)).unwrap();
    let v = Array::scalar(1.0);
    let (loss, g) = grad_params_of_input_grad(
        &params,
        &v,
        |t, pv, x| {
            let sq = t.mul(x, x);
            let e = t.mul(sq, pv.get(0));
            t.scale(e, 0.5)
        },
        score_matching_objective(Array::scalar(0.0)),
    )
    .unwrap();
    assert!((loss - 0.5 * 1.7 * 1.7).abs() < 1e-15);
    assert!((g.array(0).item() - 1.7).abs() < 1e-15);
}

#[test]
fn symmetric_bilinear_energy_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_array(&mut rng, &[3, 3], 1.0);
    let mut sym = a.clone();
    for i in 0..3 {
        for j in 0..3 {
            sym.data_mut()[i * 3 + j] = 0.5 * (a.data()[i * 3 + j] + a.data()[j * 3 + i]);
        }
    }
    let mut params = ParameterSet::new();
    params.insert("w", sym).unwrap();
    let v = random_array(&mut rng, &[1, 3], 1.0);
    let target = random_array(&mut rng, &[1, 3], 1.0);
    let energy = |t: &mut Tape, pv: &ParamVars, x: Var| {
        let wx = t.matmul_t(pv.get(0), x, false, true);
        let q = t.matmul(x, wx);
        t.sum(q)
    };
    let (_, g) = grad_params_of_input_grad(&params, &v, energy, score_matching_objective(target.clone())).unwrap();
    let loss_at = |p: &ParameterSet| {
        let s = {
            let mut tape = Tape::new();
            let pv = ParamVars::register(&mut tape, p);
            let x = tape.leaf(v.clone());
            let e = energy(&mut tape, &pv, x);
            let gx = tape.grad(e, &[x]).unwrap()[0];
            tape.value(gx).data().iter().map(|x| -x).collect::<Vec<_>>()
        };
        half_sq_residual(&target, &Array::matrix(1, 3, s).unwrap())
    };
    for coord in 0..9 {
        let h = 1e-5;
        let mut p = params.clone();
        p.flat_set(coord, params.flat_get(coord) + h);
        let lp = loss_at(&p);
        p.flat_set(coord, params.flat_get(coord) - h);
        let lm = loss_at(&p);
        let fd = (lp - lm) / (2.0 * h);
        assert!(rel_err(g.flat_get(coord), fd) <= 1e-5, "{coord}");
    }
}

#[test]
fn perfect_score_has_zero_parameter_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = small_net(&mut rng);
    let v = random_array(&mut rng, &[2, 5], 1.0);
    let target = score_of(&params, &v);
    let (loss, g) = grad_params_of_input_grad(&params, &v, small_energy, score_matching_objective(target)).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.arrays().iter().all(|a| a.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn relu_inside_inner_gradient_is_rejected() {
    let mut params = ParameterSet::new();
    params.insert("w", Array::matrix(2, 2, vec![1.0, 0.5, -0.5, 1.0]).unwrap()).unwrap();
    let v = Array::matrix(1, 2, vec![0.3, 0.8]).unwrap();
    let err = grad_params_of_input_grad(
        &params,
        &v,
        |t, pv, x| {
            let h = t.matmul_t(x, pv.get(0), false, true);
            let h = t.activate(h, Activation::Relu);
            t.sum_squares(h)
        },
        score_matching_objective(Array::matrix(1, 2, vec![0.0, 0.0]).unwrap()),
    )
    .unwrap_err();
    assert_eq!(err, EngineError::NonSmooth { primitive: "relu", order: 2 });
}

#[test]
fn first_order_relu_gradients_are_allowed() {
    let v = Array::vector(vec![-1.0, 2.0]).unwrap();
    let g = grad_input(&v, |t, x| {
        let h = t.activate(x, Activation::Relu);
        t.sum(h)
    })
    .unwrap();
    assert_eq!(g.data(), &[0.0, 1.0]);
}

#[test]
fn checked_mode_names_the_failing_primitive() {
    let v = Array::matrix(1, 2, vec![1e308, 1e308]).unwrap();
    let err = grad_input(&v, |t, x| {
        let y = t.scale(x, 10.0);
        t.sum(y)
    })
    .unwrap_err();
    assert_eq!(err, EngineError::NonFinite { primitive: "scale" });

    let mut fast = Tape::with_mode(CheckMode::Fast);
    let x = fast.leaf(v);
    let y = fast.scale(x, 10.0);
    assert!(fast.check().is_ok());
    assert!(fast.value(y).data()[0].is_infinite());
}

#[test]
fn array_construction_validates() {
    assert!(matches!(Array::new(vec![2, 2], vec![1.0; 3]), Err(EngineError::ShapeMismatch { .. })));
    assert_eq!(Array::new(vec![2], vec![1.0, f64::NAN]), Err(EngineError::NonFiniteInput { index: 1 }));
    let mut p = ParameterSet::new();
    p.insert("a", Array::scalar(1.0)).unwrap();
    assert_eq!(p.insert("a", Array::scalar(2.0)), Err(EngineError::DuplicateParameter("a".into())));
}

#[test]
fn third_order_is_refused() {
    let v = Array::vector(vec![0.4]).unwrap();
    let err = grad_input(&v, |t, x| {
        let y = t.activate(x, Activation::Tanh);
        let s = t.sum(y);
        let g1 = t.grad(s, &[x]).unwrap()[0];
        let s1 = t.sum(g1);
        let g2 = t.grad(s1, &[x]).unwrap()[0];
        let s2 = t.sum(g2);
        let g3 = t.grad(s2, &[x]).unwrap()[0];
        t.sum(g3)
    })
    .unwrap_err();
    assert_eq!(err, EngineError::OrderExceeded { order: 4, max: 3 });
}

proptest! {
    #[test]
    fn gradient_is_linear_in_the_function(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = small_net(&mut rng);
        let v = random_array(&mut rng, &[2, 5], 1.5);
        let f = |t: &mut Tape, x: Var| {
            let pv = ParamVars::register(t, &params);
            small_energy(t, &pv, x)
        };
        let g = |t: &mut Tape, x: Var| {
            let s = t.sum_squares(x);
            let a = t.activate(x, Activation::Softplus);
            let sa = t.sum(a);
            t.add(s, sa)
        };
        let gf = grad_input(&v, f).unwrap();
        let gg = grad_input(&v, g).unwrap();
        let gc = grad_input(&v, |t, x| {
            let a = f(t, x);
            let b = g(t, x);
            let a = t.scale(a, alpha);
            let b = t.scale(b, beta);
            t.add(a, b)
        })
        .unwrap();
        for i in 0..v.len() {
            let expect = alpha * gf.data()[i] + beta * gg.data()[i];
            prop_assert!((gc.data()[i] - expect).abs() <= 1e-10);
        }
    }
}
