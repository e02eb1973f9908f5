//! Few-shot hypothesis adaptation with diversity-enhanced generators, at desk
//! scale: a small autodiff engine, HSIC-based diversity, the dependency
//! calculators, and the full training protocol with its baselines.

// Validation is written as `!(x >= lo)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod dependency;
pub mod error;
pub mod hsic;
pub mod kernels;
pub mod losses;
pub mod models;
pub mod training;

pub use error::{Error, Result};
