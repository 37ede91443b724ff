//! Condition-number attacks on, and defenses for, neural networks whose last
//! layer solves an equality-constrained quadratic program.

// `!(x > 0.0)` rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod condgrad;
pub mod defense;
pub mod densela;
pub mod diffgraph;
pub mod error;
pub mod farkas;
pub mod harness;
pub mod qplayer;
pub mod rng;

pub use densela::Matrix;
pub use error::{Error, Result};
