//! Sinusoid regression: the classic few-shot sanity check for meta-learning.
//!
//! Each task is `y = A·sin(x - φ)` with `A ∈ [0.1, 5]`, `φ ∈ [0, π]`,
//! `x ∈ [-5, 5]`. A meta-trained MLP and a jointly trained MLP are both
//! adapted with the same few SGD steps on `K` points of a held-out task and
//! scored on fresh points of that task.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adamw_step, AdamState, AdamWConfig, ParamSet};
use crate::error::Result;
use crate::meta::{eval_loss, inner_adapt, loss_and_grad, meta_step, Activation, MetaStepConfig, Mlp, RegressionBatch};
use crate::rng::{substream, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl SineTask {
    pub fn sample(rng: &mut Rng) -> Self {
        SineTask {
            amplitude: rng.random_range(0.1..=5.0),
            phase: rng.random_range(0.0..=std::f64::consts::PI),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (x - self.phase).sin()
    }

    pub fn batch(&self, n: usize, rng: &mut Rng) -> RegressionBatch<f64> {
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..=5.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| self.eval(x)).collect();
        RegressionBatch {
            x: Tensor::from_f64(&[n, 1], &xs).expect("shape matches"),
            y: Tensor::from_f64(&[n, 1], &ys).expect("shape matches"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SineConfig {
    pub hidden: usize,
    pub k_shot: usize,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub meta_batch: usize,
    pub iterations: usize,
    pub meta_lr: f64,
    pub second_order: bool,
    pub eval_tasks: usize,
    pub eval_points: usize,
    pub seed: u64,
}

impl Default for SineConfig {
    fn default() -> Self {
        SineConfig {
            hidden: 40,
            k_shot: 10,
            inner_lr: 0.01,
            inner_steps: 5,
            meta_batch: 10,
            iterations: 4000,
            meta_lr: 0.001,
            second_order: true,
            eval_tasks: 100,
            eval_points: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineReport {
    pub meta_mse: f64,
    pub baseline_mse: f64,
    /// `meta_mse / baseline_mse`.
    pub ratio: f64,
    pub meta_curve: Vec<f64>,
}

fn adamw(lr_free: bool) -> AdamWConfig {
    AdamWConfig {
        weight_decay: if lr_free { 0.0 } else { 0.01 },
        ..Default::default()
    }
}

/// Meta-train with MAML, jointly train a baseline with the same number of
/// updates, then compare post-adaptation MSE on held-out tasks.
pub fn run(cfg: &SineConfig) -> Result<SineReport> {
    let mlp = Mlp::new(&[1, cfg.hidden, cfg.hidden, 1], Activation::Relu);
    let mut init_rng = substream(cfg.seed, "init");
    let init = mlp.init::<f64>(&mut init_rng)?;

    let step_cfg = MetaStepConfig {
        inner_lr: cfg.inner_lr,
        inner_steps: cfg.inner_steps,
        meta_lr: cfg.meta_lr,
        second_order: cfg.second_order,
        adamw: adamw(true),
        workers: 1,
    };
    let mut rng = substream(cfg.seed, "task-sampling");
    let mut theta = init.clone();
    let mut opt = AdamState::new(&theta);
    let mut meta_curve = Vec::new();
    for it in 0..cfg.iterations {
        let data: Vec<(RegressionBatch<f64>, RegressionBatch<f64>)> = (0..cfg.meta_batch)
            .map(|_| {
                let t = SineTask::sample(&mut rng);
                (t.batch(cfg.k_shot, &mut rng), t.batch(cfg.k_shot, &mut rng))
            })
            .collect();
        let tasks: Vec<_> = data.iter().map(|(s, q)| (s, q)).collect();
        let (next, next_opt, log) = meta_step(&mlp, &theta, &opt, &tasks, &step_cfg)?;
        theta = next;
        opt = next_opt;
        if it % 100 == 0 {
            meta_curve.push(log.meta_loss / cfg.meta_batch as f64);
        }
    }

    let mut rng = substream(cfg.seed, "baseline");
    let mut base = init;
    let mut base_opt = AdamState::new(&base);
    for _ in 0..cfg.iterations {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..cfg.meta_batch {
            let b = SineTask::sample(&mut rng).batch(2 * cfg.k_shot, &mut rng);
            xs.extend(b.x.to_vec());
            ys.extend(b.y.to_vec());
        }
        let n = xs.len();
        let pooled = RegressionBatch {
            x: Tensor::new(vec![n, 1], xs)?,
            y: Tensor::new(vec![n, 1], ys)?,
        };
        let (_, g, _) = loss_and_grad(&mlp, &base, &pooled)?;
        let (o, p) = adamw_step(&base_opt, &base, &g, cfg.meta_lr, &adamw(true))?;
        base_opt = o;
        base = p;
    }

    let mut rng = substream(cfg.seed, "held-out");
    let (mut meta_total, mut base_total) = (0.0, 0.0);
    for _ in 0..cfg.eval_tasks {
        let t = SineTask::sample(&mut rng);
        let support = t.batch(cfg.k_shot, &mut rng);
        let query = t.batch(cfg.eval_points, &mut rng);
        meta_total += adapted_mse(&mlp, &theta, &support, &query, cfg)?;
        base_total += adapted_mse(&mlp, &base, &support, &query, cfg)?;
    }
    let meta_mse = meta_total / cfg.eval_tasks as f64;
    let baseline_mse = base_total / cfg.eval_tasks as f64;
    Ok(SineReport {
        meta_mse,
        baseline_mse,
        ratio: meta_mse / baseline_mse,
        meta_curve,
    })
}

fn adapted_mse(
    mlp: &Mlp,
    theta: &ParamSet<f64>,
    support: &RegressionBatch<f64>,
    query: &RegressionBatch<f64>,
    cfg: &SineConfig,
) -> Result<f64> {
    let adapted = inner_adapt(mlp, theta, support, cfg.inner_lr, cfg.inner_steps)?;
    eval_loss(mlp, &adapted.params, query)
}
