//! Dense 2-D `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every binary op requires exactly equal shapes; there is no implicit
//! broadcasting. Row-vector biases go through [`Var::tile_rows`].

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig};
pub use params::{Bound, NamedTensor, ParamSet, ParamsFile, PARAMS_VERSION};
pub use tape::{BinaryOp, Gradients, ReduceOp, Tape, UnaryOp, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("invalid argument to {op}: {msg}")]
    Argument { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("{op}: variable belongs to a different tape")]
    ForeignVar { op: &'static str },
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("no parameter named `{0}`")]
    MissingParam(String),
}

#[cfg(test)]
mod tests;
