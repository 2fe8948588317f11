//! Low-light image enhancement as a pixel-wise Markov decision process.
//!
//! A small fully-convolutional actor-critic picks, for every pixel and colour
//! channel, the coefficient of a quadratic brightening curve. The curve is
//! applied step after step, and the agent is rewarded with the negative of
//! four non-reference image losses.

// `!(x >= 0.0)` is how parameter checks reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod checkpoint;
pub mod curve;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod reward;
pub mod trainer;

pub use error::{Error, Result};
