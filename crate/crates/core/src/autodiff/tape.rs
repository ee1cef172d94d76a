use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::layers::{self, BatchStats, BnSaved};

/// Recorded operation of a tape node; parents are node ids.
#[derive(Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Swap12(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Sum(usize),
    SumRows(usize),
    Expand(usize),
    AddRow(usize, usize),
    SliceLast { src: usize, start: usize },
    PadLast { src: usize, start: usize },
    ConcatLast(Vec<usize>),
    SelectAxis1 { src: usize, t: usize },
    ScatterAxis1 { src: usize, t: usize },
    StackAxis1(Vec<usize>),
    Conv2d { x: usize, w: usize, b: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, saved: Arc<BnSaved<T>> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, saved: Arc<BnSaved<T>> },
    AvgPool { x: usize, kt: usize, kf: usize },
    MeanLast(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Swap12(_) => "swap12",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::Expand(_) => "expand",
            Op::AddRow(..) => "add_row",
            Op::SliceLast { .. } => "slice_last",
            Op::PadLast { .. } => "pad_last",
            Op::ConcatLast(_) => "concat_last",
            Op::SelectAxis1 { .. } => "select_axis1",
            Op::ScatterAxis1 { .. } => "scatter_axis1",
            Op::StackAxis1(_) => "stack_axis1",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } | Op::BatchNormEval { .. } => "batchnorm2d",
            Op::AvgPool { .. } => "avgpool2d",
            Op::MeanLast(_) => "global_avgpool_freq",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a computation.
///
/// Node ids are assigned in creation order, so reverse id order is a valid
/// reverse topological order. The graph is retained until the tape is
/// dropped, which is what lets [`Tape::grad_graph`] differentiate a
/// gradient a second time.
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: bool,
    non_finite: Cell<Option<(usize, &'static str)>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tape node. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: cfg!(debug_assertions),
            non_finite: Cell::new(None),
        }
    }

    /// Enable or disable the per-op finiteness check (on by default in debug builds).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; gradients never flow into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        if self.check_finite && self.non_finite.get().is_none() && !value.all_finite() {
            let id = self.len();
            self.non_finite.set(Some((id, op.name())));
        }
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Error if any recorded value was non-finite (only tracked with checks enabled).
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.get() {
            Some((id, op)) => Err(Error::NonFinite(format!("tape node {id} ({op})"))),
            None => Ok(()),
        }
    }

    fn seed(&self, loss: Var<'_, T>) -> Result<Tensor<T>> {
        let v = loss.value();
        if v.len() != 1 {
            return Err(Error::Shape {
                op: "grad",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(Tensor::full(v.shape(), T::one()))
    }

    /// Reverse sweep producing plain gradient tensors for `wrt`.
    ///
    /// A parameter that does not influence `loss` receives a zero gradient.
    pub fn grad(&self, loss: Var<'_, T>, wrt: &[Var<'_, T>]) -> Result<Vec<Tensor<T>>> {
        self.check_finite()?;
        let keep: std::collections::HashSet<usize> = wrt.iter().map(|v| v.id).collect();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(self.seed(loss)?);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let (op, rg) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].requires_grad)
            };
            if !rg || matches!(op, Op::Leaf) {
                if keep.contains(&id) {
                    grads[id] = Some(g);
                }
                continue;
            }
            for (pid, pg) in self.backward_tensor(id, &op, &g)? {
                if !self.rg(pid) {
                    continue;
                }
                grads[pid] = Some(match grads[pid].take() {
                    Some(acc) => acc.add(&pg)?,
                    None => pg,
                });
            }
            if keep.contains(&id) {
                grads[id] = Some(g);
            }
        }
        Ok(wrt
            .iter()
            .map(|v| {
                grads
                    .get(v.id)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
            })
            .collect())
    }

    /// Reverse sweep that records the gradient computation itself, so the
    /// returned gradients can be differentiated again.
    pub fn grad_graph<'t>(&'t self, loss: Var<'t, T>, wrt: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        self.check_finite()?;
        let mut grads: Vec<Option<Var<'t, T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(self.constant(self.seed(loss)?));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id] else { continue };
            let (op, rg) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].requires_grad)
            };
            if !rg || matches!(op, Op::Leaf) {
                continue;
            }
            let node = Var { tape: self, id };
            for (pid, pg) in self.backward_var(node, &op, g)? {
                if !self.rg(pid) {
                    continue;
                }
                grads[pid] = Some(match grads[pid] {
                    Some(acc) => acc.add(pg)?,
                    None => pg,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|v| match grads.get(v.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(v.value().shape())),
            })
            .collect())
    }

    fn backward_tensor(&self, id: usize, op: &Op<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let val = |i: usize| self.value_of(i);
        Ok(match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.scale(-T::one()))],
            Op::Mul(a, b) => vec![(a, g.mul(&val(b))?), (b, g.mul(&val(a))?)],
            Op::Neg(a) => vec![(a, g.scale(-T::one()))],
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::AddScalar(a) => vec![(a, g.clone())],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g.data(), (n as isize, 1), bv.data(), (1, n as isize), T::zero(), &mut ga, (k as isize, 1));
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), av.data(), (1, k as isize), g.data(), (n as isize, 1), T::zero(), &mut gb, (n as isize, 1));
                vec![
                    (a, Tensor::from_parts(vec![m, k], ga)),
                    (b, Tensor::from_parts(vec![k, n], gb)),
                ]
            }
            Op::Transpose(a) => vec![(a, g.transpose()?)],
            Op::Reshape(a) => vec![(a, g.reshape(val(a).shape())?)],
            Op::Swap12(a) => vec![(a, g.swap12()?)],
            Op::Sigmoid(a) => {
                let y = val(id);
                vec![(a, g.zip_map(&y, "sigmoid", |g, y| g * y * (T::one() - y))?)]
            }
            Op::Tanh(a) => {
                let y = val(id);
                vec![(a, g.zip_map(&y, "tanh", |g, y| g * (T::one() - y * y))?)]
            }
            Op::Relu(a) => {
                let x = val(a);
                vec![(a, g.zip_map(&x, "relu", |g, x| if x > T::zero() { g } else { T::zero() })?)]
            }
            Op::Sum(a) => vec![(a, Tensor::full(val(a).shape(), g.item()))],
            Op::SumRows(a) => vec![(a, Tensor::zeros(val(a).shape()).add_row(g)?)],
            Op::Expand(a) => vec![(a, Tensor::full(val(a).shape(), g.sum()))],
            Op::AddRow(x, b) => vec![(x, g.clone()), (b, g.sum_rows())],
            Op::SliceLast { src, start } => {
                let total = *val(src).shape().last().expect("rank >= 1");
                vec![(src, g.pad_last(start, total)?)]
            }
            Op::PadLast { src, start } => {
                let len = *val(src).shape().last().expect("rank >= 1");
                vec![(src, g.slice_last(start, len)?)]
            }
            Op::ConcatLast(ref parts) => {
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = *val(p).shape().last().expect("rank >= 1");
                    out.push((p, g.slice_last(off, w)?));
                    off += w;
                }
                out
            }
            Op::SelectAxis1 { src, t } => {
                let len = val(src).shape()[1];
                vec![(src, layers::scatter_axis1(g, t, len)?)]
            }
            Op::ScatterAxis1 { src, t } => vec![(src, g.select_axis1(t)?)],
            Op::StackAxis1(ref parts) => parts
                .iter()
                .enumerate()
                .map(|(t, &p)| Ok((p, g.select_axis1(t)?)))
                .collect::<Result<_>>()?,
            Op::Conv2d { x, w, b } => {
                let (gx, gw, gb) = layers::conv2d_backward(&val(x), &val(w), g)?;
                vec![(x, gx), (w, gw), (b, gb)]
            }
            Op::BatchNorm { x, gamma, beta, ref saved } => {
                let (gx, gg, gbeta) = layers::batch_norm_backward(&val(gamma), saved, g)?;
                vec![(x, gx), (gamma, gg), (beta, gbeta)]
            }
            Op::BatchNormEval { x, gamma, beta, ref saved } => {
                let (gx, gg, gbeta) = layers::batch_norm_eval_backward(&val(gamma), saved, g)?;
                vec![(x, gx), (gamma, gg), (beta, gbeta)]
            }
            Op::AvgPool { x, kt, kf } => vec![(x, layers::avg_pool_backward(val(x).shape(), kt, kf, g)?)],
            Op::MeanLast(x) => vec![(x, layers::mean_last_backward(val(x).shape(), g)?)],
        })
    }

    fn backward_var<'t>(&'t self, node: Var<'t, T>, op: &Op<T>, g: Var<'t, T>) -> Result<Vec<(usize, Var<'t, T>)>> {
        let v = |i: usize| Var { tape: self, id: i };
        Ok(match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, g.neg())],
            Op::Mul(a, b) => vec![(a, g.mul(v(b))?), (b, g.mul(v(a))?)],
            Op::Neg(a) => vec![(a, g.neg())],
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::AddScalar(a) => vec![(a, g)],
            Op::MatMul(a, b) => vec![
                (a, g.matmul(v(b).transpose()?)?),
                (b, v(a).transpose()?.matmul(g)?),
            ],
            Op::Transpose(a) => vec![(a, g.transpose()?)],
            Op::Reshape(a) => vec![(a, g.reshape(&v(a).shape())?)],
            Op::Swap12(a) => vec![(a, g.swap12()?)],
            Op::Sigmoid(a) => {
                let dy = node.mul(node.neg().add_scalar(T::one()))?;
                vec![(a, g.mul(dy)?)]
            }
            Op::Tanh(a) => {
                let dy = node.mul(node)?.neg().add_scalar(T::one());
                vec![(a, g.mul(dy)?)]
            }
            Op::Relu(a) => {
                let mask = v(a).value().map(|x| if x > T::zero() { T::one() } else { T::zero() });
                vec![(a, g.mul(self.constant(mask))?)]
            }
            Op::Sum(a) => vec![(a, g.expand(v(a).shape()))],
            Op::SumRows(a) => {
                let zeros = self.constant(Tensor::zeros(&v(a).shape()));
                vec![(a, zeros.add_row(g)?)]
            }
            Op::Expand(a) => vec![(a, g.sum())],
            Op::AddRow(x, b) => vec![(x, g), (b, g.sum_rows())],
            Op::SliceLast { src, start } => {
                let total = *v(src).shape().last().expect("rank >= 1");
                vec![(src, g.pad_last(start, total)?)]
            }
            Op::PadLast { src, start } => {
                let len = *v(src).shape().last().expect("rank >= 1");
                vec![(src, g.slice_last(start, len)?)]
            }
            Op::ConcatLast(ref parts) => {
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = *v(p).shape().last().expect("rank >= 1");
                    out.push((p, g.slice_last(off, w)?));
                    off += w;
                }
                out
            }
            Op::SelectAxis1 { src, t } => {
                let len = v(src).shape()[1];
                vec![(src, g.scatter_axis1(t, len)?)]
            }
            Op::ScatterAxis1 { src, t } => vec![(src, g.select_axis1(t)?)],
            Op::StackAxis1(ref parts) => parts
                .iter()
                .enumerate()
                .map(|(t, &p)| Ok((p, g.select_axis1(t)?)))
                .collect::<Result<_>>()?,
            ref other => return Err(Error::SecondOrderUnsupported(other.name())),
        })
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// Constant copy of this value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn nary(tape: &'t Tape<T>, parts: &[Var<'t, T>], value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(value, op, rg)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().add(&other.value())?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().sub(&other.value())?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().mul(&other.value())?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn neg(self) -> Var<'t, T> {
        let v = self.value().scale(-T::one());
        self.unary(v, Op::Neg(self.id))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.value().scale(c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.mul(self)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn swap12(self) -> Result<Var<'t, T>> {
        let v = self.value().swap12()?;
        Ok(self.unary(v, Op::Swap12(self.id)))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.value().map(|x| T::one() / (T::one() + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sum(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::from_usize(n).expect("count fits float"))
    }

    /// Sum over all leading axes; result is a vector over the last axis.
    pub fn sum_rows(self) -> Var<'t, T> {
        let v = self.value().sum_rows();
        self.unary(v, Op::SumRows(self.id))
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn expand(self, shape: Vec<usize>) -> Var<'t, T> {
        let v = Tensor::full(&shape, self.value().item());
        self.unary(v, Op::Expand(self.id))
    }

    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().add_row(&row.value())?;
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value().slice_last(start, len)?;
        Ok(self.unary(v, Op::SliceLast { src: self.id, start }))
    }

    pub fn pad_last(self, start: usize, total: usize) -> Result<Var<'t, T>> {
        let v = self.value().pad_last(start, total)?;
        Ok(self.unary(v, Op::PadLast { src: self.id, start }))
    }

    pub fn concat_last(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let tape = parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?.tape;
        let vals: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let v = Tensor::concat_last(&vals.iter().collect::<Vec<_>>())?;
        Ok(Self::nary(tape, parts, v, Op::ConcatLast(parts.iter().map(|p| p.id).collect())))
    }

    pub fn select_axis1(self, t: usize) -> Result<Var<'t, T>> {
        let v = self.value().select_axis1(t)?;
        Ok(self.unary(v, Op::SelectAxis1 { src: self.id, t }))
    }

    pub fn scatter_axis1(self, t: usize, len: usize) -> Result<Var<'t, T>> {
        let v = layers::scatter_axis1(&self.value(), t, len)?;
        Ok(self.unary(v, Op::ScatterAxis1 { src: self.id, t }))
    }

    pub fn stack_axis1(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let tape = parts.first().ok_or_else(|| Error::Invalid("stack of nothing".into()))?.tape;
        let vals: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let v = Tensor::stack_axis1(&vals.iter().collect::<Vec<_>>())?;
        Ok(Self::nary(tape, parts, v, Op::StackAxis1(parts.iter().map(|p| p.id).collect())))
    }

    /// 3×3 convolution, stride 1, zero padding 1. `self`: `[B, Cin, H, W]`,
    /// `w`: `[Cout, Cin, 3, 3]`, `b`: `[Cout]`.
    pub fn conv2d(self, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = layers::conv2d_forward(&self.value(), &w.value(), &b.value())?;
        Ok(Self::nary(self.tape, &[self, w, b], v, Op::Conv2d { x: self.id, w: w.id, b: b.id }))
    }

    /// Batch normalization using batch statistics over (B, H, W) per channel.
    pub fn batch_norm_train(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let (v, saved, stats) = layers::batch_norm_forward(&self.value(), &gamma.value(), &beta.value(), eps)?;
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            saved: Arc::new(saved),
        };
        Ok((Self::nary(self.tape, &[self, gamma, beta], v, op), stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(self, gamma: Var<'t, T>, beta: Var<'t, T>, stats: &BatchStats<T>, eps: T) -> Result<Var<'t, T>> {
        let (v, saved) = layers::batch_norm_eval_forward(&self.value(), &gamma.value(), &beta.value(), stats, eps)?;
        let op = Op::BatchNormEval {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            saved: Arc::new(saved),
        };
        Ok(Self::nary(self.tape, &[self, gamma, beta], v, op))
    }

    /// Average pooling with kernel = stride = `(kt, kf)` over the last two axes (floor).
    pub fn avg_pool(self, kt: usize, kf: usize) -> Result<Var<'t, T>> {
        let v = layers::avg_pool_forward(&self.value(), kt, kf)?;
        Ok(self.unary(v, Op::AvgPool { x: self.id, kt, kf }))
    }

    /// Mean over the last axis: `[B, C, T, F]` → `[B, C, T]`.
    pub fn mean_last(self) -> Result<Var<'t, T>> {
        let v = layers::mean_last_forward(&self.value())?;
        Ok(self.unary(v, Op::MeanLast(self.id)))
    }

    /// Mean squared error against `target` (mean over every element).
    pub fn mse(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.sub(target)?.square()?.mean())
    }
}
