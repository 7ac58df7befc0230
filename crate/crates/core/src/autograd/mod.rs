//! Reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor) values.

mod param;
mod tape;

pub use param::{Adam, ParamId, ParamStore, Parameter};
pub use tape::{LinearMap, Tape, Var};
