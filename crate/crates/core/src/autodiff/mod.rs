//! Minimal reverse-mode automatic differentiation over dense tensors.

pub mod graph;
pub mod nn;
pub mod params;

pub use graph::{Activation, BatchStats, Gradients, Graph, Var};
pub use nn::{BatchNorm, BnPosition, Linear, Mlp, Mode, PendingStats, Session};
pub use params::{ParamId, ParamKind, Parameter, ParameterStore};
