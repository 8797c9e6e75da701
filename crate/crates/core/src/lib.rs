//! Distributionally robust PAC-Bayesian synthesis of finite-horizon linear
//! controllers in System Level Synthesis form.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bound;
pub mod certificates;
pub mod error;
pub mod experiment;
pub mod lab;
pub mod linalg;
pub mod lti;
pub mod optimizer;
pub mod sls;

pub use error::{Error, Result};
