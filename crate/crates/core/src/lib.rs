//! Safety-aware model merging.
//!
//! Combines expert checkpoints with task-vector merges (task arithmetic,
//! linear soup, SLERP, TIES, DARE, DARE-TIES) and picks the task weights
//! from data: a closed-form softmax weighting over per-model losses, or a
//! CMA-ES search that minimizes `L_safety + α·L_expert` so that the merged
//! model keeps its refusals while gaining domain skill. A tiny causal
//! transformer and synthetic datasets make the whole loop runnable on a
//! laptop.

pub mod cli;
pub mod criterion;
pub mod data;
pub mod error;
pub mod merge;
pub mod optimize;
pub mod rng;
pub mod tensor_store;
pub mod toy_lm;

pub use error::{Error, Result};
