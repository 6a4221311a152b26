//! Deterministic simulator of a recommender feedback loop.
//!
//! A hidden binary relevance matrix drives position-biased clicks on ranked
//! lists; the ranking model retrains periodically on its own click log. The
//! crate measures how popularity bias (the Gini of per-item true positive
//! rates) evolves under that loop and implements rankers that compensate
//! for accumulated click-count advantages.

pub mod bits;
pub mod chart;
pub mod click_model;
pub mod config;
pub mod debias;
pub mod error;
pub mod ground_truth;
pub mod interactions;
pub mod metrics;
pub mod mf;
pub mod par;
pub mod rng;
pub mod runner;
pub mod sim;

pub use error::{Error, Result};
