//! Low-cost multi-branch self-ensembles.
//!
//! A single-path residual network is turned into a shared trunk followed by
//! several grouped-convolution branches whose widths keep the total cost close
//! to the original. The branches are trained jointly with cross-entropy plus
//! distillation from their averaged logits.

pub mod arch;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
