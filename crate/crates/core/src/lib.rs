//! Few-shot multi-domain text classification with prototype-based meta-learning
//! and label-definition fusion.
//!
//! Numeric code is generic over [`Scalar`]; the aliases at the crate root fix
//! the element type to `f64`, which is what the CLI and the reference tests use.

pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod fusion;
pub mod metalearn;
pub mod model;
pub mod params;
pub mod scalar;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = tensor::Matrix<f64>;
pub type ParamSet = params::ParamSet<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type HiddenStates = encoder::HiddenStates<f64>;
pub type Model = model::Model<f64>;
pub type Prototypes = metalearn::Prototypes<f64>;
pub type LearnerState = metalearn::LearnerState<f64>;
pub type FineTuned = metalearn::FineTuned<f64>;
