//! Reverse-mode differentiation over small dense networks.
//!
//! Values live on a [`Tape`]; gradients are computed by appending
//! vector-Jacobian products to the same tape. Because those products are
//! ordinary recorded primitives, a loss built from a gradient can be
//! differentiated again, which is how the score-matching objective obtains
//! `∂/∂θ` of `∇_v E` ("double backprop").

mod activation;
mod array;
mod grad;
mod params;
mod tape;

pub use activation::{Activation, MAX_ACTIVATION_ORDER};
pub use array::Array;
pub use grad::{grad_input, grad_params, grad_params_of_input_grad, score_matching_objective, ParamVars};
pub use params::ParameterSet;
pub use tape::{CheckMode, Tape, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    ShapeMismatch { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("non-finite input value at flat index {index}")]
    NonFiniteInput { index: usize },
    #[error("non-finite value produced by primitive `{primitive}`")]
    NonFinite { primitive: &'static str },
    #[error("`{primitive}` has no derivative of order {order}; differentiated gradient traces need smooth activations")]
    NonSmooth { primitive: &'static str, order: u8 },
    #[error("derivative order {order} exceeds the supported maximum {max}")]
    OrderExceeded { order: u8, max: u8 },
    #[error("expected a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
}

#[cfg(test)]
mod tests;
