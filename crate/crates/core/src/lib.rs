//! Desk-scale selective state-space classifiers and the machinery to probe
//! their robustness: white-box and transfer attacks, gradient-stream masking,
//! occlusion, shuffling and common corruptions.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod model;
pub mod oracle;
pub mod perturb;
pub mod report;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
