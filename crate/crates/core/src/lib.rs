//! Numerical kernels for 3D segmentation networks built from high-order gated
//! convolution and selective state-space blocks, with a tape-based reverse
//! mode differentiator, region-weighted overlap losses and a small training
//! harness.

pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod ssm;
pub mod tensor;

pub use autodiff::{GradMap, Tape, Var};
pub use error::{Error, Result};
pub use gradcheck::finite_difference_grad;
pub use ssm::{ScanElement, ScanMode, SelectiveSsm};
pub use tensor::Tensor;
