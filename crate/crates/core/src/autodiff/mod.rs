//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every op records its inputs on a [`Tape`]; [`Tape::grad`] sweeps the tape
//! backwards with analytic per-op rules. [`Tape::grad_graph`] records the
//! sweep itself, so a gradient can be differentiated again: that is what
//! exact second-order MAML needs. Double-backward is available for the
//! elementwise, matrix and shape ops (everything an MLP or GRU is built
//! from); convolution, batch norm and pooling support first order only.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::BatchStats;
pub use optim::{adamw_step, sgd_step, AdamState, AdamWConfig};
pub use params::ParamSet;
pub use tape::{Tape, Var};
