//! Reverse stress testing for corporate credit portfolios.
//!
//! Finds the most plausible scenario under a reference distribution that
//! drives the CET1 ratio below a threshold, and builds finite, diverse lists of
//! near-optimal breaching scenarios around it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod capital;
pub mod error;
pub mod io;
pub mod loss;
mod random;
pub mod reference;
pub mod run;
pub mod sector;
pub mod sets;
pub mod solver;
pub mod special;
pub mod transmission;

pub use error::{Error, Result};
