//! Finite-difference cases shared by the gradient tests and the acceptance run.

use seldlab::autodiff::{BatchStats, ParamSet, Tape, Var};
use seldlab::meta::{inner_adapt, task_second_order, Activation, Mlp, RegressionBatch};
use seldlab::model::{batch_targets, forward, gru, init_params, random_features, seld_loss, BnState, GruWeights, ModelConfig, Mode};
use seldlab::{Result, Tensor};

use super::{away_from_zero, contract, grad_check, hvp_check, rel_err, rng, FD_STEP};

pub type BoxedFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

/// A named scalar function and the point to check it at.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: BoxedFn,
}

impl Case {
    pub fn first_order(&self) -> f64 {
        grad_check(&self.inputs, |t, v| (self.f)(t, v))
    }

    pub fn second_order(&self) -> f64 {
        hvp_check(&self.inputs, |t, v| (self.f)(t, v))
    }
}

pub fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
    away_from_zero(shape, &mut rng(seed))
}

fn case<F>(name: &'static str, shapes: &[&[usize]], f: F) -> Case
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
{
    let inputs = shapes.iter().enumerate().map(|(i, s)| t(s, 17 + i as u64)).collect();
    Case { name, inputs, f: Box::new(f) }
}

pub fn gru_inputs(d: usize, h: usize) -> Vec<Tensor<f64>> {
    vec![
        t(&[2, 4, d], 5).map(|x| 0.5 * x),
        t(&[d, 3 * h], 6).map(|x| 0.5 * x),
        t(&[h, 3 * h], 7).map(|x| 0.5 * x),
        t(&[3 * h], 8).map(|x| 0.2 * x),
        t(&[3 * h], 9).map(|x| 0.2 * x),
    ]
}

pub fn gru_fn(reverse: bool) -> impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
    move |_, v| {
        let w = GruWeights {
            w_ih: v[1],
            w_hh: v[2],
            b_ih: v[3],
            b_hh: v[4],
        };
        contract(gru(v[0], &w, reverse)?)
    }
}

/// Every differentiable op, each wrapped into a scalar by a fixed probe.
pub fn op_cases() -> Vec<Case> {
    let mut cases = vec![
        case("add", &[&[3, 4], &[3, 4]], |_, v| contract(v[0].add(v[1])?)),
        case("sub", &[&[3, 4], &[3, 4]], |_, v| contract(v[0].sub(v[1])?)),
        case("mul", &[&[3, 4], &[3, 4]], |_, v| contract(v[0].mul(v[1])?)),
        case("neg", &[&[5]], |_, v| contract(v[0].neg())),
        case("scale", &[&[2, 3]], |_, v| contract(v[0].scale(-1.7))),
        case("add_scalar", &[&[2, 3]], |_, v| contract(v[0].add_scalar(0.4).mul(v[0])?)),
        case("square", &[&[2, 3]], |_, v| contract(v[0].square()?)),
        case("matmul", &[&[3, 4], &[4, 2]], |_, v| contract(v[0].matmul(v[1])?)),
        case("transpose", &[&[3, 4]], |_, v| contract(v[0].transpose()?)),
        case("reshape", &[&[3, 4]], |_, v| contract(v[0].reshape(&[2, 6])?.mul(v[0].reshape(&[2, 6])?)?)),
        case("swap12", &[&[2, 3, 4]], |_, v| contract(v[0].swap12()?)),
        case("sigmoid", &[&[2, 5]], |_, v| contract(v[0].sigmoid())),
        case("tanh", &[&[2, 5]], |_, v| contract(v[0].tanh())),
        case("relu", &[&[2, 5]], |_, v| contract(v[0].relu().mul(v[0])?)),
        case("sum", &[&[2, 5]], |tape, v| contract(v[0].sum().expand(vec![2]).mul(tape.constant(Tensor::from_f64(&[2], &[1.0, 2.0])?))?)),
        case("mean", &[&[2, 5]], |_, v| contract(v[0].mean().square()?)),
        case("sum_rows", &[&[2, 3, 4]], |_, v| contract(v[0].sum_rows())),
        case("expand", &[&[1]], |_, v| contract(v[0].expand(vec![3, 2]).mul(v[0].expand(vec![3, 2]))?)),
        case("add_row", &[&[3, 4], &[4]], |_, v| contract(v[0].add_row(v[1])?)),
        case("slice_last", &[&[2, 6]], |_, v| contract(v[0].slice_last(1, 3)?)),
        case("pad_last", &[&[2, 3]], |_, v| contract(v[0].pad_last(2, 7)?)),
        case("concat_last", &[&[2, 3], &[2, 2]], |_, v| contract(Var::concat_last(&[v[0], v[1], v[0]])?)),
        case("select_axis1", &[&[2, 4, 3]], |_, v| contract(v[0].select_axis1(2)?)),
        case("scatter_axis1", &[&[2, 3]], |_, v| contract(v[0].scatter_axis1(1, 4)?)),
        case("stack_axis1", &[&[2, 3], &[2, 3]], |_, v| contract(Var::stack_axis1(&[v[1], v[0], v[1]])?)),
        case("conv2d", &[&[2, 3, 5, 4], &[2, 3, 3, 3], &[2]], |_, v| contract(v[0].conv2d(v[1], v[2])?)),
        case("batch_norm_train", &[&[3, 2, 4, 3], &[2], &[2]], |_, v| contract(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0)),
        case("avg_pool", &[&[2, 2, 5, 4]], |_, v| contract(v[0].avg_pool(2, 2)?.square()?)),
        case("mean_last", &[&[2, 2, 3, 4]], |_, v| contract(v[0].mean_last()?)),
        case("mse", &[&[3, 4], &[3, 4]], |_, v| contract(v[0].mse(v[1])?.expand(vec![1]))),    ];
    let stats = BatchStats {
        mean: vec![0.3, -0.2],
        var: vec![1.4, 0.6],
    };
    cases.push(Case {
        name: "batch_norm_eval",
        inputs: vec![t(&[2, 2, 3, 3], 1), t(&[2], 2), t(&[2], 3)],
        f: Box::new(move |_, v| contract(v[0].batch_norm_eval(v[1], v[2], &stats, 1e-5)?)),
    });
    cases.push(Case { name: "gru", inputs: gru_inputs(3, 2), f: Box::new(gru_fn(false)) });
    cases.push(Case { name: "gru_reverse", inputs: gru_inputs(3, 2), f: Box::new(gru_fn(true)) });
    cases
}

/// Compositions whose double-backward rules are checked against differences
/// of first-order gradients.
pub fn double_backward_cases() -> Vec<Case> {
    vec![
        case("mul", &[&[2, 3], &[2, 3]], |_, v| contract(v[0].mul(v[1])?.mul(v[0])?)),
        case("matmul", &[&[2, 3], &[3, 2]], |_, v| contract(v[0].matmul(v[1])?.square()?)),
        case("sigmoid", &[&[2, 3]], |_, v| contract(v[0].sigmoid())),
        case("tanh", &[&[2, 3]], |_, v| contract(v[0].tanh())),
        case("relu", &[&[2, 3]], |_, v| contract(v[0].relu().square()?)),
        case("add_row", &[&[2, 3], &[3]], |_, v| contract(v[0].add_row(v[1])?.tanh())),
        case("transpose", &[&[2, 3]], |_, v| contract(v[0].transpose()?.square()?)),
        case("swap12", &[&[2, 2, 3]], |_, v| contract(v[0].swap12()?.sigmoid())),
        case("sum_rows", &[&[2, 3]], |_, v| contract(v[0].sum_rows().square()?)),
        case("mean", &[&[2, 3]], |_, v| v[0].tanh().mean().square()),
        case("slice_concat", &[&[2, 4]], |_, v| contract(Var::concat_last(&[v[0].slice_last(1, 2)?.tanh(), v[0].square()?])?)),
        case("pad", &[&[2, 2]], |_, v| contract(v[0].pad_last(1, 4)?.sigmoid())),
        case("select_stack", &[&[2, 3, 2]], |_, v| contract(Var::stack_axis1(&[v[0].select_axis1(2)?.tanh(), v[0].select_axis1(0)?])?)),
        case("scatter", &[&[2, 2]], |_, v| contract(v[0].scatter_axis1(1, 3)?.tanh())),
        case("expand", &[&[1]], |_, v| contract(v[0].expand(vec![2, 2]).tanh())),
        Case { name: "gru", inputs: gru_inputs(2, 2), f: Box::new(gru_fn(false)) },
    ]
}

pub fn tiny_crnn_setup() -> (ModelConfig, ParamSet<f64>, Tensor<f64>, Tensor<f64>) {
    let cfg = ModelConfig::tiny();
    let mut r = rng(3);
    let params = init_params(&cfg, &mut r).unwrap().cast::<f64>();
    let feats: Vec<_> = (0..2).map(|_| random_features(&cfg, &mut r)).collect();
    let x = seldlab::model::batch_features::<f64>(&feats.iter().collect::<Vec<_>>()).unwrap();
    let tgt_t = cfg.out_frames();
    let y32 = Tensor::<f32>::from_f64(&[tgt_t, cfg.n_classes, 3], &super::probe(&[tgt_t * cfg.n_classes * 3]).map(|v| 0.5 * v.tanh()).to_vec()).unwrap();
    let y = batch_targets::<f64>(&[&y32, &y32]).unwrap();
    (cfg, params, x, y)
}

/// Loss of the tiny CRNN in training mode, w.r.t. every parameter.
pub fn crnn_train_error() -> f64 {
    let (cfg, params, x, y) = tiny_crnn_setup();
    let inputs: Vec<Tensor<f64>> = params.tensors().cloned().collect();
    grad_check(&inputs, |tape, v| {
        let (pred, _) = forward(&cfg, &params, v, tape.constant(x.clone()), Mode::Train)?;
        seld_loss(pred, tape.constant(y.clone()))
    })
}

/// Loss of the tiny CRNN in eval mode, w.r.t. every parameter and the input.
pub fn crnn_eval_error() -> f64 {
    let (cfg, params, x, y) = tiny_crnn_setup();
    let bn: Vec<BatchStats<f64>> = BnState::new(&cfg).cast();
    let mut inputs: Vec<Tensor<f64>> = params.tensors().cloned().collect();
    inputs.push(x.clone());
    let n = params.len();
    grad_check(&inputs, |tape, v| {
        let (pred, _) = forward(&cfg, &params, &v[..n], v[n], Mode::Eval(&bn))?;
        seld_loss(pred, tape.constant(y.clone()))
    })
}

pub fn mlp_task(seed: u64, k: usize) -> (RegressionBatch<f64>, RegressionBatch<f64>) {
    let mut r = rng(seed);
    let mk = |r: &mut seldlab::rng::Rng| {
        let x = away_from_zero(&[k, 1], r);
        let y = x.map(|v| 1.3 * (v - 0.4).sin());
        RegressionBatch { x, y }
    };
    (mk(&mut r), mk(&mut r))
}

pub const MAML_ALPHA: f64 = 0.3;
pub const MAML_STEPS: usize = 3;

/// Query loss after `steps` inner SGD steps, as a plain function of θ.
pub fn post_adaptation_loss(mlp: &Mlp, theta: &ParamSet<f64>, s: &RegressionBatch<f64>, q: &RegressionBatch<f64>, alpha: f64, steps: usize) -> f64 {
    let adapted = inner_adapt(mlp, theta, s, alpha, steps).unwrap().params;
    seldlab::meta::eval_loss(mlp, &adapted, q).unwrap()
}

/// Exact meta-gradient of a 2-layer tanh MLP against central differences of
/// the whole inner-loop-plus-query computation.
pub fn maml_second_order_error() -> f64 {
    let mlp = Mlp::new(&[1, 8, 1], Activation::Tanh);
    let theta = mlp.init::<f64>(&mut rng(9)).unwrap();
    let (s, q) = mlp_task(10, 6);
    let exact = task_second_order(&mlp, &theta, &s, &q, MAML_ALPHA, MAML_STEPS).unwrap().grad;
    let mut worst: f64 = 0.0;
    for (pi, (name, tensor)) in theta.iter().enumerate() {
        for j in 0..tensor.len() {
            let at = |d: f64| {
                let mut vals: Vec<Tensor<f64>> = theta.tensors().cloned().collect();
                let mut v = vals[pi].to_vec();
                v[j] += d;
                vals[pi] = Tensor::new(vals[pi].shape().to_vec(), v).unwrap();
                post_adaptation_loss(&mlp, &theta.with_values(vals).unwrap(), &s, &q, MAML_ALPHA, MAML_STEPS)
            };
            let n = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(exact.get(name).unwrap().data()[j], n));
        }
    }
    worst
}
