//! Cost-aware multi-agent routing: per-turn role selection, per-call model
//! selection, confidence-weighted cost accounting and policy-gradient training.

// `!(x >= 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arith;
pub mod backend;
pub mod checkpoint;
pub mod conductor;
pub mod confidence;
pub mod config;
pub mod cost;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model_router;
pub mod policy;
pub mod role_router;
pub mod roles;
pub mod seeding;
pub mod state;
pub mod trainer;

pub use error::{Error, Result};
