//! A small CPU deep-learning engine for ablating batch normalization.
//!
//! BatchNorm is split into its two halves: learnable re-parameterization
//! (`AffineLayer`) and batch standardization (`BatchNormMinus`). Each can be
//! swapped into every normalization site of a ResNet, and the effect measured
//! with reproducible training runs and weight/gradient histograms.

pub mod data;
pub mod error;
pub mod harness;
pub mod instrument;
pub mod kernels;
pub mod norm;
pub mod optim;
pub mod resnet;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use norm::{make_norm_layer, Mode, NormScheme, NormState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
