//! Position-biased click simulation.
//!
//! A shown item is clicked iff the user examines the position (probability
//! decays with rank) and truly likes the item.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ground_truth::GroundTruth;

/// Which stage of a run produced an exposure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Bootstrap,
    Personalized,
    RandomProbe,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Bootstrap => "bootstrap",
            Phase::Personalized => "personalized",
            Phase::RandomProbe => "random_probe",
        }
    }
}

/// One shown (user, item) slot and its outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExposureRecord {
    pub user: u32,
    pub item: u32,
    /// 1-based rank position in the shown list.
    pub position: u32,
    pub clicked: bool,
    pub iteration: u32,
    pub phase: Phase,
}

/// Probability that a user examines rank `k`: 1 / log2(1 + k).
pub fn examination_prob(k: u32) -> Result<f64> {
    if k < 1 {
        return Err(Error::invalid("position must be >= 1"));
    }
    Ok(1.0 / (1.0 + k as f64).log2())
}

/// Simulate click outcomes for a ranked list shown to `user`.
///
/// Examinations are independent across positions; a click requires both
/// examination and true relevance.
pub fn simulate_clicks(
    user: u32,
    ranked_items: &[u32],
    gt: &GroundTruth,
    rng: &mut impl Rng,
    iteration: u32,
    phase: Phase,
) -> Result<Vec<ExposureRecord>> {
    if ranked_items.is_empty() {
        return Err(Error::invalid("ranked list is empty"));
    }
    for (i, &a) in ranked_items.iter().enumerate() {
        if ranked_items[i + 1..].contains(&a) {
            return Err(Error::invalid(format!(
                "duplicate item {a} in ranked list"
            )));
        }
    }
    let mut records = Vec::with_capacity(ranked_items.len());
    for (idx, &item) in ranked_items.iter().enumerate() {
        let k = idx as u32 + 1;
        let examined = rng.random::<f64>() < examination_prob(k)?;
        let clicked = examined && gt.likes(user, item);
        records.push(ExposureRecord {
            user,
            item,
            position: k,
            clicked,
            iteration,
            phase,
        });
    }
    Ok(records)
}
