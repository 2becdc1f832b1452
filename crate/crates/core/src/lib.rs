//! Domain reweighting for language-model pretraining.
//!
//! A small proxy transformer is trained while the domain sampling weights are
//! moved by an entropic mirror-descent step on gradient-alignment scores; the
//! averaged weights (or a stage-wise schedule of them) then drive sampling for
//! a larger base model.

pub mod cancellation;
pub mod data;
pub mod doge;
pub mod error;
pub mod harness;
pub mod model;
pub mod tensor;

pub use doge::{DogeHyperparams, DomainWeights, WeightTrajectory};
pub use error::{DogeError, Result};
pub use tensor::{flatten_gradients, FlatGradient, NodeId, Tape, Tensor};
