//! Minimal reverse-mode automatic differentiation for the convolutional
//! variational auto-encoders in this workspace.
//!
//! The operator set is deliberately small: 2-D convolution and its transpose,
//! dense layers, leaky ReLU, batch normalization, mean squared error, the
//! Gaussian KL term, the reparameterization step and softmax cross-entropy,
//! plus the shape plumbing needed to wire them together. Every rule is
//! checked against central finite differences by [`check::grad_check`].

pub mod check;
pub mod conv;
pub mod error;
pub mod graph;
pub mod params;
pub mod real;
pub mod tensor;

pub use check::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use conv::Padding;
pub use error::{GradError, Result};
pub use graph::{log_softmax, Fault, Graph, Mode, Var};
pub use params::{BnStates, ParamSet, RunningStats};
pub use real::Real;
pub use tensor::{Shape, Tensor};
