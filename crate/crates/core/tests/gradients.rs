mod common;

use common::grads::{self, mlp_task, tiny_crnn_setup, MAML_ALPHA, MAML_STEPS};
use common::{rng, FD_TOL};
use seldlab::autodiff::{ParamSet, Tape};
use seldlab::meta::{inner_adapt, task_second_order, Activation, Learner, Mlp, Quadratic, QuadraticTask};
use seldlab::Tensor;

fn failures(cases: &[grads::Case], check: impl Fn(&grads::Case) -> f64) -> Vec<String> {
    cases
        .iter()
        .filter_map(|c| {
            let err = check(c);
            (err >= FD_TOL || err.is_nan()).then(|| format!("{}: {err:e}", c.name))
        })
        .collect()
}

#[test]
fn every_op_matches_central_differences() {
    let bad = failures(&grads::op_cases(), grads::Case::first_order);
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn double_backward_matches_differences_of_gradients() {
    let bad = failures(&grads::double_backward_cases(), grads::Case::second_order);
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn tiny_crnn_train_mode() {
    let err = grads::crnn_train_error();
    assert!(err < FD_TOL, "{err:e}");
}

#[test]
fn tiny_crnn_eval_mode_and_input_gradient() {
    let err = grads::crnn_eval_error();
    assert!(err < FD_TOL, "{err:e}");
}

#[test]
fn second_order_maml_gradient_matches_finite_differences() {
    let err = grads::maml_second_order_error();
    assert!(err < 1e-3, "{err:e}");
}

#[test]
fn first_order_gradient_differs_from_exact_when_curvature_matters() {
    let mlp = Mlp::new(&[1, 8, 1], Activation::Tanh);
    let theta = mlp.init::<f64>(&mut rng(9)).unwrap();
    let (s, q) = mlp_task(10, 6);
    let exact = task_second_order(&mlp, &theta, &s, &q, MAML_ALPHA, MAML_STEPS).unwrap().grad;
    let adapted = inner_adapt(&mlp, &theta, &s, MAML_ALPHA, MAML_STEPS).unwrap().params;
    let (_, fo, _) = seldlab::meta::loss_and_grad(&mlp, &adapted, &q).unwrap();
    let diff = exact.zip_with(&fo, |a, b| a - b).unwrap().sq_norm().sqrt();
    assert!(diff > 1e-4, "first- and second-order gradients coincide ({diff:e})");
}

fn mat_pow_times(a: &[f64], n: usize, alpha: f64, steps: usize, v: &[f64]) -> Vec<f64> {
    // (I - αA)^steps v, A is n×n row-major
    let mut x = v.to_vec();
    for _ in 0..steps {
        let ax: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect();
        x = x.iter().zip(&ax).map(|(xi, axi)| xi - alpha * axi).collect();
    }
    x
}

#[test]
fn quadratic_meta_gradient_is_analytic() {
    let n = 3;
    let a = [2.0, 0.3, -0.1, 0.3, 1.5, 0.2, -0.1, 0.2, 1.0];
    let aq = [1.0, 0.1, 0.0, 0.1, 2.0, -0.3, 0.0, -0.3, 0.8];
    let (c, cq) = ([0.5, -1.0, 2.0], [1.0, 0.0, -0.5]);
    let theta0 = [0.2, 0.4, -0.3];
    let (alpha, steps) = (0.1, 4);
    let support = QuadraticTask {
        a: Tensor::from_f64(&[n, n], &a).unwrap(),
        c: Tensor::from_f64(&[1, n], &c).unwrap(),
    };
    let query = QuadraticTask {
        a: Tensor::from_f64(&[n, n], &aq).unwrap(),
        c: Tensor::from_f64(&[1, n], &cq).unwrap(),
    };
    let theta = ParamSet::new(vec![("theta".into(), Tensor::from_f64(&[1, n], &theta0).unwrap())]).unwrap();

    // θ_N - c = (I - αA)^N (θ - c); ∇ = (I - αA)^N A_q (θ_N - c_q)
    let d: Vec<f64> = theta0.iter().zip(&c).map(|(t, c)| t - c).collect();
    let theta_n: Vec<f64> = mat_pow_times(&a, n, alpha, steps, &d).iter().zip(&c).map(|(x, c)| x + c).collect();
    let r: Vec<f64> = theta_n.iter().zip(&cq).map(|(x, c)| x - c).collect();
    let aqr: Vec<f64> = (0..n).map(|i| (0..n).map(|j| aq[i * n + j] * r[j]).sum()).collect();
    let expected = mat_pow_times(&a, n, alpha, steps, &aqr);

    let adapted = inner_adapt(&Quadratic, &theta, &support, alpha, steps).unwrap();
    for (x, y) in adapted.params.get("theta").unwrap().data().iter().zip(&theta_n) {
        assert!((x - y).abs() < 1e-12);
    }
    let got = task_second_order(&Quadratic, &theta, &support, &query, alpha, steps).unwrap().grad;
    for (x, y) in got.get("theta").unwrap().data().iter().zip(&expected) {
        assert!((x - y).abs() < 1e-8, "{x} vs {y}");
    }
    let (_, fo, _) = seldlab::meta::loss_and_grad(&Quadratic, &adapted.params, &query).unwrap();
    let fo_expected = &aqr;
    for (x, y) in fo.get("theta").unwrap().data().iter().zip(fo_expected) {
        assert!((x - y).abs() < 1e-8);
    }
}

#[test]
fn second_order_through_the_crnn_is_refused() {
    let (cfg, params, x, y) = tiny_crnn_setup();
    let learner = seldlab::experiment::CrnnLearner { cfg };
    let batch = seldlab::experiment::SeldBatch { x: x.cast(), y: y.cast() };
    let p32 = params.cast::<f32>();
    let tape = Tape::<f32>::new();
    let vars = p32.vars(&tape);
    let (loss, _) = learner.loss(&p32, &vars, &batch).unwrap();
    assert!(matches!(tape.grad_graph(loss, &vars), Err(seldlab::Error::SecondOrderUnsupported(_))));
}
