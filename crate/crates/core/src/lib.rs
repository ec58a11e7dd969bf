//! Counterfactual explanations for black-box tabular predictors.
//!
//! A parameterized-action Q-learning agent edits one actionable feature per
//! step until the predictor's output satisfies a goal, paying an L1 distance
//! penalty along the way.

// Negated comparisons are how range checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
mod container;
pub mod curiosity;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod predictor;
pub mod protocol;
pub mod replay;

pub use error::{Error, Result};
