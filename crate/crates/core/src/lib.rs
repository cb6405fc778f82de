//! Transfer component analysis for domain adaptation, solved classically and
//! through exact density-matrix simulations of its quantum formulations.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod random;
pub mod qlinear;
pub mod qsim;
pub mod qsvm;
pub mod tca;
pub mod vqd;

pub use error::{Error, Result};
