//! Margin-distribution experiments: a small reverse-mode tensor engine, the
//! Halfway loss and its baselines, margin statistics, a mini-batch trainer
//! and an explicit-feature RBF SVM sweep.

pub mod autodiff;
pub mod data;
mod error;
pub mod losses;
pub mod margin;
pub mod nn;
pub mod report;
pub mod svm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
