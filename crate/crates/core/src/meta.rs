//! Model-agnostic meta-learning over arbitrary learners.
//!
//! A [`Learner`] turns parameters (as tape variables) and a batch into a
//! scalar loss. [`inner_adapt`] runs plain SGD on a support batch and never
//! touches its input parameters. [`meta_step`] adapts to each task, sums the
//! query losses in task order and applies one AdamW update. The meta-gradient
//! is either first-order (query gradient taken at the adapted parameters) or
//! exact, by differentiating through the recorded inner loop.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adamw_step, sgd_step, AdamState, AdamWConfig, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

/// A differentiable model plus its loss.
pub trait Learner<T: Float>: Sync {
    type Batch: Sync;
    /// Side output of a loss evaluation (e.g. batch-norm statistics).
    type Aux: Send;

    fn loss<'t>(&self, params: &ParamSet<T>, vars: &[Var<'t, T>], batch: &Self::Batch) -> Result<(Var<'t, T>, Self::Aux)>;
}

fn finite_scalar<T: Float>(v: T, what: impl FnOnce() -> String) -> Result<f64> {
    let x = v.to_f64().unwrap_or(f64::NAN);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("{} = {x}", what())))
    }
}

/// Loss and gradient at `params`.
pub fn loss_and_grad<T: Float, L: Learner<T>>(
    learner: &L,
    params: &ParamSet<T>,
    batch: &L::Batch,
) -> Result<(f64, ParamSet<T>, L::Aux)> {
    let tape = Tape::new();
    let vars = params.vars(&tape);
    let (loss, aux) = learner.loss(params, &vars, batch)?;
    let value = finite_scalar(loss.value().item(), || "loss".into())?;
    let grads = tape.grad(loss, &vars)?;
    Ok((value, params.with_values(grads)?, aux))
}

/// Loss only (no tape kept beyond the call).
pub fn eval_loss<T: Float, L: Learner<T>>(learner: &L, params: &ParamSet<T>, batch: &L::Batch) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = params.tensors().map(|t| tape.constant(t.clone())).collect();
    let (loss, _) = learner.loss(params, &vars, batch)?;
    finite_scalar(loss.value().item(), || "loss".into())
}

#[derive(Debug, Clone)]
pub struct Adapted<T> {
    pub params: ParamSet<T>,
    /// Support loss before each step.
    pub losses: Vec<f64>,
}

/// `steps` full-batch SGD steps of size `alpha` on `support`, starting at
/// `theta`. The input set is only read.
pub fn inner_adapt<T: Float, L: Learner<T>>(
    learner: &L,
    theta: &ParamSet<T>,
    support: &L::Batch,
    alpha: f64,
    steps: usize,
) -> Result<Adapted<T>> {
    let mut params = theta.clone();
    let mut losses = Vec::with_capacity(steps);
    for k in 0..steps {
        let (loss, grads, _) = loss_and_grad(learner, &params, support)
            .map_err(|e| annotate_non_finite(e, || format!("inner step {k} of {steps}")))?;
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("support gradient at inner step {k} (loss {loss})")));
        }
        losses.push(loss);
        params = sgd_step(&params, &grads, T::lit(alpha))?;
    }
    Ok(Adapted { params, losses })
}

fn annotate_non_finite(e: Error, ctx: impl FnOnce() -> String) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} ({})", ctx())),
        other => other,
    }
}

/// Everything a meta-update needs besides data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaStepConfig {
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub meta_lr: f64,
    pub second_order: bool,
    pub adamw: AdamWConfig,
    /// Run per-task work on this many threads (1 = serial).
    pub workers: usize,
}

#[derive(Debug)]
pub struct TaskOutcome<T, A> {
    pub query_loss: f64,
    pub grad: ParamSet<T>,
    pub support_losses: Vec<f64>,
    pub query_aux: A,
}

#[derive(Debug)]
pub struct MetaStepLog<A> {
    /// Sum of query losses over the tasks of the batch.
    pub meta_loss: f64,
    pub task_losses: Vec<f64>,
    pub query_aux: Vec<A>,
}

/// First-order task gradient: adapt, then differentiate the query loss at
/// the adapted parameters.
fn task_first_order<T: Float, L: Learner<T>>(
    learner: &L,
    theta: &ParamSet<T>,
    support: &L::Batch,
    query: &L::Batch,
    cfg: &MetaStepConfig,
) -> Result<TaskOutcome<T, L::Aux>> {
    let adapted = inner_adapt(learner, theta, support, cfg.inner_lr, cfg.inner_steps)?;
    let (query_loss, grad, aux) = loss_and_grad(learner, &adapted.params, query)?;
    Ok(TaskOutcome {
        query_loss,
        grad,
        support_losses: adapted.losses,
        query_aux: aux,
    })
}

/// Exact task gradient: the inner loop is recorded on one tape and the query
/// loss is differentiated with respect to the initial parameters.
pub fn task_second_order<T: Float, L: Learner<T>>(
    learner: &L,
    theta: &ParamSet<T>,
    support: &L::Batch,
    query: &L::Batch,
    inner_lr: f64,
    inner_steps: usize,
) -> Result<TaskOutcome<T, L::Aux>> {
    let tape = Tape::new();
    let init = theta.vars(&tape);
    let mut cur = init.clone();
    let mut support_losses = Vec::with_capacity(inner_steps);
    for k in 0..inner_steps {
        let (loss, _) = learner.loss(theta, &cur, support)?;
        support_losses.push(finite_scalar(loss.value().item(), || format!("support loss at inner step {k}"))?);
        let grads = tape.grad_graph(loss, &cur)?;
        cur = cur
            .iter()
            .zip(&grads)
            .map(|(p, g)| p.sub(g.scale(T::lit(inner_lr))))
            .collect::<Result<_>>()?;
    }
    let (q, aux) = learner.loss(theta, &cur, query)?;
    let query_loss = finite_scalar(q.value().item(), || "query loss".into())?;
    let grads = tape.grad(q, &init)?;
    Ok(TaskOutcome {
        query_loss,
        grad: theta.with_values(grads)?,
        support_losses,
        query_aux: aux,
    })
}

fn run_task<T: Float, L: Learner<T>>(
    learner: &L,
    theta: &ParamSet<T>,
    support: &L::Batch,
    query: &L::Batch,
    cfg: &MetaStepConfig,
) -> Result<TaskOutcome<T, L::Aux>> {
    if cfg.second_order {
        task_second_order(learner, theta, support, query, cfg.inner_lr, cfg.inner_steps)
    } else {
        task_first_order(learner, theta, support, query, cfg)
    }
}

/// Meta-gradient summed over `tasks` in order, without applying it.
pub fn meta_gradient<T: Float, L: Learner<T>>(
    learner: &L,
    theta: &ParamSet<T>,
    tasks: &[(&L::Batch, &L::Batch)],
    cfg: &MetaStepConfig,
) -> Result<(ParamSet<T>, MetaStepLog<L::Aux>)>
where
    T: Send,
{
    if tasks.is_empty() {
        return Err(Error::Invalid("meta step without tasks".into()));
    }
    let outcomes: Vec<Result<TaskOutcome<T, L::Aux>>> = if cfg.workers > 1 && tasks.len() > 1 {
        let chunk = tasks.len().div_ceil(cfg.workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = tasks
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|(sup, qry)| run_task(learner, theta, sup, qry, cfg))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("meta worker panicked"))
                .collect()
        })
    } else {
        tasks.iter().map(|(sup, qry)| run_task(learner, theta, sup, qry, cfg)).collect()
    };
    let mut total = theta.zeros_like();
    let mut task_losses = Vec::with_capacity(tasks.len());
    let mut query_aux = Vec::with_capacity(tasks.len());
    for o in outcomes {
        let o = o?;
        total = total.zip_with(&o.grad, |a, b| a + b)?;
        task_losses.push(o.query_loss);
        query_aux.push(o.query_aux);
    }
    Ok((
        total,
        MetaStepLog {
            meta_loss: task_losses.iter().sum(),
            task_losses,
            query_aux,
        },
    ))
}

/// One outer update: meta-gradient over the task batch, then AdamW.
pub fn meta_step<T: Float + Send, L: Learner<T>>(
    learner: &L,
    theta: &ParamSet<T>,
    opt: &AdamState<T>,
    tasks: &[(&L::Batch, &L::Batch)],
    cfg: &MetaStepConfig,
) -> Result<(ParamSet<T>, AdamState<T>, MetaStepLog<L::Aux>)> {
    let (grad, log) = meta_gradient(learner, theta, tasks, cfg)?;
    if !grad.all_finite() {
        return Err(Error::NonFinite(format!("meta-gradient (meta loss {})", log.meta_loss)));
    }
    let (opt, theta) = adamw_step(opt, theta, &grad, cfg.meta_lr, &cfg.adamw)?;
    Ok((theta, opt, log))
}

/// Hyperparameters of meta-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub rooms_per_batch: usize,
    pub samples_per_room: usize,
    pub k_support: usize,
    pub q_query: usize,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub meta_lr: f64,
    pub epochs: usize,
    /// Epoch at which the meta learning rate starts decaying.
    pub lr_decay_start: usize,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// Meta-updates per epoch; `0` derives it from the training set size.
    pub steps_per_epoch: usize,
    pub second_order: bool,
    pub adamw: AdamWConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            rooms_per_batch: 4,
            samples_per_room: 64,
            k_support: 30,
            q_query: 34,
            inner_lr: 0.01,
            inner_steps: 5,
            meta_lr: 0.001,
            epochs: 150,
            lr_decay_start: 100,
            lr_decay_every: 20,
            lr_decay_factor: 0.9,
            steps_per_epoch: 0,
            second_order: false,
            adamw: AdamWConfig::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_support + self.q_query != self.samples_per_room {
            return Err(Error::Config(format!(
                "k_support ({}) + q_query ({}) must equal samples_per_room ({})",
                self.k_support, self.q_query, self.samples_per_room
            )));
        }
        if self.k_support == 0 || self.q_query == 0 || self.rooms_per_batch == 0 {
            return Err(Error::Config("task sizes must be positive".into()));
        }
        if !(self.inner_lr > 0.0 && self.meta_lr > 0.0 && self.lr_decay_factor > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be positive".into()));
        }
        Ok(())
    }

    /// Constant until `lr_decay_start`, then multiplied by the factor at the
    /// start and every `lr_decay_every` epochs after.
    pub fn meta_lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_decay_start {
            self.meta_lr
        } else {
            let k = (epoch - self.lr_decay_start) / self.lr_decay_every + 1;
            self.meta_lr * self.lr_decay_factor.powi(k as i32)
        }
    }

    pub fn step_config(&self, epoch: usize, workers: usize) -> MetaStepConfig {
        MetaStepConfig {
            inner_lr: self.inner_lr,
            inner_steps: self.inner_steps,
            meta_lr: self.meta_lr_at(epoch),
            second_order: self.second_order,
            adamw: self.adamw,
            workers,
        }
    }
}

/// Two-stage step schedule for supervised pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_after: f64,
    pub switch_epoch: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 90,
            lr: 3e-4,
            lr_after: 3e-5,
            switch_epoch: 70,
            batch_size: 32,
            adamw: AdamWConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.switch_epoch {
            self.lr
        } else {
            self.lr_after
        }
    }
}

/// Indices of one sampled task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDraw {
    pub room: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Sample `rooms_per_batch` distinct rooms and, per room, `samples_per_room`
/// distinct items; the first `k_support` become support, the rest query.
pub fn sample_task_batch(rooms: &[(String, usize)], cfg: &MetaConfig, rng: &mut Rng) -> Result<Vec<TaskDraw>> {
    cfg.validate()?;
    if rooms.len() < cfg.rooms_per_batch {
        return Err(Error::Config(format!(
            "{} rooms available, {} per batch requested",
            rooms.len(),
            cfg.rooms_per_batch
        )));
    }
    for (name, n) in rooms {
        if *n < cfg.samples_per_room {
            return Err(Error::RoomTooSmall {
                room: name.clone(),
                have: *n,
                need: cfg.samples_per_room,
            });
        }
    }
    let picked = index::sample(rng, rooms.len(), cfg.rooms_per_batch).into_vec();
    Ok(picked
        .into_iter()
        .map(|room| {
            let items = index::sample(rng, rooms[room].1, cfg.samples_per_room).into_vec();
            TaskDraw {
                room,
                support: items[..cfg.k_support].to_vec(),
                query: items[cfg.k_support..].to_vec(),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Small learners used by the sine benchmark and the second-order checks.

/// Activation of [`Mlp`] hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Fully connected regression network with MSE loss.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

/// Inputs `[K, d_in]` and targets `[K, d_out]`.
#[derive(Debug, Clone)]
pub struct RegressionBatch<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
}

impl Mlp {
    pub fn new(sizes: &[usize], activation: Activation) -> Self {
        Mlp {
            sizes: sizes.to_vec(),
            activation,
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init<T: Float>(&self, rng: &mut Rng) -> Result<ParamSet<T>> {
        let mut entries = Vec::new();
        for (i, w) in self.sizes.windows(2).enumerate() {
            let a = (6.0 / (w[0] + w[1]) as f64).sqrt();
            entries.push((format!("l{i}.w"), Tensor::uniform(&[w[0], w[1]], -a, a, rng)));
            entries.push((format!("l{i}.b"), Tensor::zeros(&[w[1]])));
        }
        ParamSet::new(entries)
    }

    pub fn forward<'t, T: Float>(&self, vars: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        let layers = self.sizes.len() - 1;
        if vars.len() != 2 * layers {
            return Err(Error::Misaligned(format!("{} vars for {layers} layers", vars.len())));
        }
        let mut h = x;
        for i in 0..layers {
            h = h.matmul(vars[2 * i])?.add_row(vars[2 * i + 1])?;
            if i + 1 < layers {
                h = match self.activation {
                    Activation::Relu => h.relu(),
                    Activation::Tanh => h.tanh(),
                };
            }
        }
        Ok(h)
    }

    pub fn predict<T: Float>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars: Vec<_> = params.tensors().map(|t| tape.constant(t.clone())).collect();
        Ok(self.forward(&vars, tape.constant(x.clone()))?.value())
    }
}

impl<T: Float> Learner<T> for Mlp {
    type Batch = RegressionBatch<T>;
    type Aux = ();

    fn loss<'t>(&self, _params: &ParamSet<T>, vars: &[Var<'t, T>], batch: &Self::Batch) -> Result<(Var<'t, T>, ())> {
        let tape = vars.first().ok_or_else(|| Error::Invalid("MLP without parameters".into()))?.tape();
        let pred = self.forward(vars, tape.constant(batch.x.clone()))?;
        Ok((pred.mse(tape.constant(batch.y.clone()))?, ()))
    }
}

/// `L(θ) = ½ (θ - c)ᵀ A (θ - c)` over a single parameter vector `θ ∈ ℝⁿ`
/// named `"theta"` (shape `[1, n]`). `A` must be symmetric.
#[derive(Debug, Clone, Copy, Default)]
pub struct Quadratic;

#[derive(Debug, Clone)]
pub struct QuadraticTask {
    /// `[n, n]`.
    pub a: Tensor<f64>,
    /// `[1, n]`.
    pub c: Tensor<f64>,
}

impl Learner<f64> for Quadratic {
    type Batch = QuadraticTask;
    type Aux = ();

    fn loss<'t>(&self, _params: &ParamSet<f64>, vars: &[Var<'t, f64>], task: &QuadraticTask) -> Result<(Var<'t, f64>, ())> {
        let theta = *vars.first().ok_or_else(|| Error::Invalid("quadratic without theta".into()))?;
        let tape = theta.tape();
        let d = theta.sub(tape.constant(task.c.clone()))?;
        let ad = d.matmul(tape.constant(task.a.clone()))?;
        Ok((ad.mul(d)?.sum().scale(0.5), ()))
    }
}
