//! Baseline rankers and debiasing corrections layered on model scores.
//!
//! Scale divides each score by the item's accumulated click count raised to
//! a strength exponent; DScale grows that exponent linearly with the number
//! of retrains. FPC turns the model score into the probability that the user
//! likes the item conditioned on having ignored it at known ranks before:
//! theta -> 1 - (1 - theta) / prod_f(1 - delta_{k_f} * theta).

use serde::{Deserialize, Serialize};

use crate::click_model::examination_prob;
use crate::error::{Error, Result};
use crate::interactions::{ClickCounts, FalsePositiveIndex};
use crate::mf::{top_k_by_score, ModelParams};
use crate::par;
use rand::Rng;

/// How false-positive evidence folds into the corrected probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpcForm {
    /// Treat each skipped exposure as an independent miss (the primary form).
    #[default]
    Independent,
    /// Condition all skips on one latent relevance event:
    /// theta * prod(1-delta_f) / (theta * prod(1-delta_f) + 1 - theta).
    Conditional,
}

/// Ranking-time correction applied on top of model predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    None,
    Scale,
    Dscale,
    Fpc,
    FpcDscale,
}

/// A fully specified debiasing policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DebiasPolicy {
    pub kind: PolicyKind,
    /// Fixed strength for `scale`; ignored by the schedule-based kinds.
    pub alpha: f64,
    /// Per-retrain strength increment for `dscale` and `fpc_dscale`.
    pub delta: f64,
    pub fpc_form: FpcForm,
}

impl DebiasPolicy {
    pub fn none() -> Self {
        DebiasPolicy::default()
    }

    pub fn scale(alpha: f64) -> Self {
        DebiasPolicy { kind: PolicyKind::Scale, alpha, ..Default::default() }
    }

    pub fn dscale(delta: f64) -> Self {
        DebiasPolicy { kind: PolicyKind::Dscale, delta, ..Default::default() }
    }

    pub fn fpc() -> Self {
        DebiasPolicy { kind: PolicyKind::Fpc, ..Default::default() }
    }

    pub fn fpc_dscale(delta: f64) -> Self {
        DebiasPolicy { kind: PolicyKind::FpcDscale, delta, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be finite and non-negative"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid("delta must be finite and non-negative"));
        }
        Ok(())
    }

    /// Compensation exponent this policy applies after `retrain_index`
    /// retrains (reported alongside metrics).
    pub fn alpha_in_effect(&self, retrain_index: u32) -> f64 {
        match self.kind {
            PolicyKind::None | PolicyKind::Fpc => 0.0,
            PolicyKind::Scale => self.alpha,
            PolicyKind::Dscale | PolicyKind::FpcDscale => dscale_alpha(retrain_index, self.delta),
        }
    }
}

/// Uniformly random K-permutation of the candidates.
pub fn rank_random<R: Rng>(candidates: &[u32], k: usize, rng: &mut R) -> Result<Vec<u32>> {
    if candidates.len() < k {
        return Err(Error::invalid(format!(
            "need at least {k} candidates, got {}",
            candidates.len()
        )));
    }
    // partial Fisher-Yates: the first k slots are a uniform k-permutation
    let mut pool = candidates.to_vec();
    for slot in 0..k {
        let pick = slot + rng.random_range(0..pool.len() - slot);
        pool.swap(slot, pick);
    }
    pool.truncate(k);
    Ok(pool)
}

/// Top-K candidates by accumulated clicks, ties by ascending item index.
pub fn rank_popular(counts: &ClickCounts, candidates: &[u32], k: usize) -> Result<Vec<u32>> {
    if candidates.len() < k {
        return Err(Error::invalid(format!(
            "need at least {k} candidates, got {}",
            candidates.len()
        )));
    }
    let scores: Vec<f64> = candidates.iter().map(|&i| counts.get(i) as f64).collect();
    Ok(top_k_by_score(candidates, &scores, k))
}

/// Divide each score by max(C_i, 1)^alpha; cold items are unpenalized.
pub fn scale_scores(scores: &[f64], counts: &[u64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha must be finite and non-negative"));
    }
    if scores.len() != counts.len() {
        return Err(Error::invalid("scores and counts differ in length"));
    }
    Ok(scores
        .iter()
        .zip(counts)
        .map(|(&s, &c)| s / (c.max(1) as f64).powf(alpha))
        .collect())
}

/// Linear compensation schedule: alpha grows by `delta` per retrain.
pub fn dscale_alpha(retrain_index: u32, delta: f64) -> f64 {
    retrain_index as f64 * delta
}

fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid(format!("theta {theta} outside [0, 1]")));
    }
    Ok(())
}

/// Probability the user likes the item given it was skipped at each of the
/// given ranks, treating the skips as independent misses.
pub fn fpc_correct(theta: f64, exposure_positions: &[u32]) -> Result<f64> {
    check_theta(theta)?;
    if theta == 0.0 || theta == 1.0 {
        // boundary fixed points (theta = 1 also dodges a 0/0 at delta = 1)
        for &k in exposure_positions {
            examination_prob(k)?;
        }
        return Ok(theta);
    }
    let mut denom = 1.0;
    for &k in exposure_positions {
        denom *= 1.0 - examination_prob(k)? * theta;
    }
    Ok((1.0 - (1.0 - theta) / denom).clamp(0.0, 1.0))
}

/// Alternative correction conditioning every skip on one latent relevance
/// event instead of treating skips independently.
pub fn fpc_correct_conditional(theta: f64, exposure_positions: &[u32]) -> Result<f64> {
    check_theta(theta)?;
    let mut still_unseen = 1.0;
    for &k in exposure_positions {
        still_unseen *= 1.0 - examination_prob(k)?;
    }
    let liked_and_skipped = theta * still_unseen;
    if liked_and_skipped + (1.0 - theta) == 0.0 {
        return Ok(1.0);
    }
    Ok((liked_and_skipped / (liked_and_skipped + (1.0 - theta))).clamp(0.0, 1.0))
}

fn fpc_by_form(form: FpcForm, theta: f64, positions: &[u32]) -> Result<f64> {
    match form {
        FpcForm::Independent => fpc_correct(theta, positions),
        FpcForm::Conditional => fpc_correct_conditional(theta, positions),
    }
}

/// Rank top-K candidates for `user` under `policy`.
#[allow(clippy::too_many_arguments)]
pub fn apply_policy(
    policy: &DebiasPolicy,
    params: &ModelParams,
    user: u32,
    candidates: &[u32],
    counts: &ClickCounts,
    fp_index: &FalsePositiveIndex,
    retrain_index: u32,
    k: usize,
) -> Result<Vec<u32>> {
    policy.validate()?;
    if candidates.len() < k {
        return Err(Error::invalid(format!(
            "need at least {k} candidates, got {}",
            candidates.len()
        )));
    }
    if user as usize >= params.n_users() {
        return Err(Error::invalid("user index out of range"));
    }
    if counts.len() != params.n_items() {
        return Err(Error::invalid("click counts do not cover the item space"));
    }
    if let Some(&bad) = candidates.iter().find(|&&i| (i as usize) >= params.n_items()) {
        return Err(Error::invalid(format!("candidate item {bad} out of range")));
    }
    let raw = par::map_indexed(candidates.len(), 256, |j| {
        params.predict_unchecked(user, candidates[j])
    });
    let candidate_counts: Vec<u64> = candidates.iter().map(|&i| counts.get(i)).collect();
    let scores = match policy.kind {
        PolicyKind::None => raw,
        PolicyKind::Scale => scale_scores(&raw, &candidate_counts, policy.alpha)?,
        PolicyKind::Dscale => scale_scores(
            &raw,
            &candidate_counts,
            dscale_alpha(retrain_index, policy.delta),
        )?,
        PolicyKind::Fpc => {
            let mut out = Vec::with_capacity(raw.len());
            for (j, &theta) in raw.iter().enumerate() {
                out.push(fpc_by_form(
                    policy.fpc_form,
                    theta,
                    fp_index.positions(user, candidates[j]),
                )?);
            }
            out
        }
        PolicyKind::FpcDscale => {
            let alpha = dscale_alpha(retrain_index, policy.delta);
            let scaled = scale_scores(&raw, &candidate_counts, alpha)?;
            let mut out = Vec::with_capacity(scaled.len());
            for (j, &s) in scaled.iter().enumerate() {
                // max(C,1)^alpha >= 1 keeps s inside (0, 1); clamp anyway
                out.push(fpc_by_form(
                    policy.fpc_form,
                    s.clamp(0.0, 1.0),
                    fp_index.positions(user, candidates[j]),
                )?);
            }
            out
        }
    };
    Ok(top_k_by_score(candidates, &scores, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mf::rank_topk;
    use crate::rng::{stream_rng, StreamKind};
    use proptest::prelude::*;

    #[test]
    fn rank_random_full_k_is_a_permutation() {
        let candidates = [3u32, 1, 4, 1 + 4, 9];
        let mut rng = stream_rng(1, StreamKind::Rank, 0);
        let mut ranked = rank_random(&candidates, 5, &mut rng).unwrap();
        ranked.sort_unstable();
        let mut expect = candidates.to_vec();
        expect.sort_unstable();
        assert_eq!(ranked, expect);
    }

    #[test]
    fn rank_random_is_uniform_over_top_slot() {
        let candidates = [0u32, 1, 2, 3, 4];
        let trials = 100_000u64;
        let mut firsts = [0u64; 5];
        for t in 0..trials {
            let mut rng = stream_rng(7, StreamKind::Rank, t);
            let ranked = rank_random(&candidates, 3, &mut rng).unwrap();
            firsts[ranked[0] as usize] += 1;
        }
        let p = 1.0 / 5.0;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for (item, &count) in firsts.iter().enumerate() {
            let freq = count as f64 / trials as f64;
            assert!(
                (freq - p).abs() < 3.0 * sigma + 1e-9,
                "item {item} top-1 frequency {freq} strays from {p}"
            );
        }
    }

    #[test]
    fn rank_random_deterministic_and_validates() {
        let candidates = [5u32, 6, 7, 8];
        let a = rank_random(&candidates, 2, &mut stream_rng(3, StreamKind::Rank, 9)).unwrap();
        let b = rank_random(&candidates, 2, &mut stream_rng(3, StreamKind::Rank, 9)).unwrap();
        assert_eq!(a, b);
        assert!(rank_random(&candidates, 5, &mut stream_rng(3, StreamKind::Rank, 0)).is_err());
    }

    #[test]
    fn rank_popular_orders_by_count_then_index() {
        // counts: item0=5, item1=9, item2=1
        let counts = ClickCounts::from_counts(vec![5, 9, 1]);
        assert_eq!(rank_popular(&counts, &[0, 1, 2], 2).unwrap(), vec![1, 0]);

        let zeros = ClickCounts::zeros(4);
        assert_eq!(rank_popular(&zeros, &[3, 1, 2, 0], 3).unwrap(), vec![0, 1, 2]);

        let mut bumped = ClickCounts::from_counts(vec![5, 9, 1]);
        bumped.bump(2);
        assert_eq!(rank_popular(&bumped, &[0, 1, 2], 3).unwrap(), vec![1, 0, 2]);
        assert!(rank_popular(&bumped, &[0], 2).is_err());
    }

    #[test]
    fn scale_scores_examples() {
        assert_eq!(
            scale_scores(&[0.3, 0.9], &[4, 100], 0.0).unwrap(),
            vec![0.3, 0.9]
        );
        let scaled = scale_scores(&[0.8], &[16], 0.5).unwrap();
        assert!((scaled[0] - 0.2).abs() < 1e-12);
        assert_eq!(scale_scores(&[0.8], &[0], 2.0).unwrap(), vec![0.8]);
        assert!(scale_scores(&[0.8], &[1], -0.1).is_err());
        assert!(scale_scores(&[0.8, 0.1], &[1], 0.5).is_err());
    }

    #[test]
    fn dscale_alpha_is_linear_from_zero() {
        assert_eq!(dscale_alpha(0, 0.01), 0.0);
        assert!((dscale_alpha(10, 0.01) - 0.1).abs() < 1e-15);
        assert_eq!(dscale_alpha(25, 0.0), 0.0);
    }

    #[test]
    fn fpc_hand_evaluations() {
        assert_eq!(fpc_correct(0.7, &[]).unwrap(), 0.7);
        // one skip at rank 1: full examination, so the skip kills the score
        assert_eq!(fpc_correct(0.5, &[1]).unwrap(), 0.0);
        // one skip at rank 3: delta = 0.5 -> 1 - 0.5/0.75 = 1/3
        assert!((fpc_correct(0.5, &[3]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(fpc_correct(0.0, &[3, 7]).unwrap(), 0.0);
        assert_eq!(fpc_correct(1.0, &[1, 1, 1]).unwrap(), 1.0);
        assert!(fpc_correct(1.2, &[1]).is_err());
        assert!(fpc_correct(0.5, &[0]).is_err());
    }

    #[test]
    fn fpc_conditional_boundaries_and_shrinkage() {
        assert_eq!(fpc_correct_conditional(0.7, &[]).unwrap(), 0.7);
        assert_eq!(fpc_correct_conditional(0.0, &[3]).unwrap(), 0.0);
        assert_eq!(fpc_correct_conditional(1.0, &[3]).unwrap(), 1.0);
        // rank-1 skip: an examined item was not clicked, so relevance is out
        assert_eq!(fpc_correct_conditional(0.5, &[1]).unwrap(), 0.0);
        // rank-3 skip: 0.5*0.5 / (0.25 + 0.5) = 1/3
        assert!((fpc_correct_conditional(0.5, &[3]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn fpc_never_rises_with_more_skips(
            theta in 0.0f64..=1.0,
            positions in proptest::collection::vec(1u32..50, 0..8),
            extra in 1u32..50
        ) {
            let before = fpc_correct(theta, &positions).unwrap();
            let mut more = positions.clone();
            more.push(extra);
            let after = fpc_correct(theta, &more).unwrap();
            prop_assert!(after <= before + 1e-12);

            let cond_before = fpc_correct_conditional(theta, &positions).unwrap();
            let cond_after = fpc_correct_conditional(theta, &more).unwrap();
            prop_assert!(cond_after <= cond_before + 1e-12);
        }

        #[test]
        fn fpc_monotone_in_theta(
            lo in 0.0f64..=1.0,
            hi in 0.0f64..=1.0,
            positions in proptest::collection::vec(1u32..50, 0..8)
        ) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            prop_assert!(
                fpc_correct(lo, &positions).unwrap()
                    <= fpc_correct(hi, &positions).unwrap() + 1e-12
            );
            prop_assert!(
                fpc_correct_conditional(lo, &positions).unwrap()
                    <= fpc_correct_conditional(hi, &positions).unwrap() + 1e-12
            );
        }

        #[test]
        fn scale_preserves_order_at_equal_counts(
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
            count in 0u64..1000,
            alpha in 0.0f64..3.0
        ) {
            let scaled = scale_scores(&[a, b], &[count, count], alpha).unwrap();
            prop_assert_eq!(a >= b, scaled[0] >= scaled[1]);
        }

        #[test]
        fn scale_penalizes_the_more_clicked_item(
            score in 0.01f64..1.0,
            low in 1u64..100,
            extra in 1u64..100,
            alpha in 0.01f64..3.0
        ) {
            let scaled = scale_scores(&[score, score], &[low, low + extra], alpha).unwrap();
            prop_assert!(scaled[0] > scaled[1]);
        }
    }

    fn fixture() -> (ModelParams, ClickCounts, FalsePositiveIndex) {
        let params = ModelParams::init(3, 8, 4, 17);
        let counts = ClickCounts::from_counts(vec![40, 2, 0, 9, 9, 1, 30, 5]);
        let fp = FalsePositiveIndex::new(8);
        (params, counts, fp)
    }

    #[test]
    fn policy_none_matches_plain_ranking() {
        let (params, counts, fp) = fixture();
        let candidates: Vec<u32> = (0..8).collect();
        let via_policy = apply_policy(
            &DebiasPolicy::none(), &params, 1, &candidates, &counts, &fp, 3, 5,
        )
        .unwrap();
        assert_eq!(via_policy, rank_topk(&params, 1, &candidates, 5).unwrap());
    }

    #[test]
    fn fpc_without_history_matches_plain_ranking() {
        let (params, counts, fp) = fixture();
        let candidates: Vec<u32> = (0..8).collect();
        let fpc = apply_policy(
            &DebiasPolicy::fpc(), &params, 0, &candidates, &counts, &fp, 3, 8,
        )
        .unwrap();
        let none = apply_policy(
            &DebiasPolicy::none(), &params, 0, &candidates, &counts, &fp, 3, 8,
        )
        .unwrap();
        assert_eq!(fpc, none);
    }

    #[test]
    fn dscale_before_first_retrain_matches_plain_ranking() {
        let (params, counts, fp) = fixture();
        let candidates: Vec<u32> = (0..8).collect();
        let dscale = apply_policy(
            &DebiasPolicy::dscale(0.3), &params, 2, &candidates, &counts, &fp, 0, 6,
        )
        .unwrap();
        let none = apply_policy(
            &DebiasPolicy::none(), &params, 2, &candidates, &counts, &fp, 0, 6,
        )
        .unwrap();
        assert_eq!(dscale, none);
    }

    #[test]
    fn scale_demotes_heavily_clicked_items() {
        // equal model scores: zero factors make every prediction 0.5
        let params = ModelParams::zeros(2, 4, 2);
        let counts = ClickCounts::from_counts(vec![100, 1, 10, 0]);
        let fp = FalsePositiveIndex::new(4);
        let ranked = apply_policy(
            &DebiasPolicy::scale(1.0), &params, 0, &[0, 1, 2, 3], &counts, &fp, 5, 4,
        )
        .unwrap();
        // scaled scores 0.005, 0.5, 0.05, 0.5: items 1 and 3 tie and fall
        // back to index order
        assert_eq!(ranked, vec![1, 3, 2, 0]);
    }

    #[test]
    fn fpc_uses_recorded_skips() {
        let params = ModelParams::zeros(1, 3, 2);
        let counts = ClickCounts::zeros(3);
        let mut log = crate::interactions::InteractionLog::new(1, 3);
        // item 0 skipped twice at rank 1; the others never shown
        for t in 0..2 {
            log.append(crate::click_model::ExposureRecord {
                user: 0,
                item: 0,
                position: 1,
                clicked: false,
                iteration: t,
                phase: crate::click_model::Phase::Personalized,
            });
        }
        let ranked = apply_policy(
            &DebiasPolicy::fpc(), &params, 0, &[0, 1, 2], &counts,
            log.false_positives(), 0, 3,
        )
        .unwrap();
        // the twice-skipped item falls to the bottom
        assert_eq!(ranked, vec![1, 2, 0]);
    }

    #[test]
    fn alpha_in_effect_reports_the_schedule() {
        assert_eq!(DebiasPolicy::none().alpha_in_effect(7), 0.0);
        assert_eq!(DebiasPolicy::fpc().alpha_in_effect(7), 0.0);
        assert_eq!(DebiasPolicy::scale(0.4).alpha_in_effect(7), 0.4);
        assert!((DebiasPolicy::dscale(0.05).alpha_in_effect(7) - 0.35).abs() < 1e-12);
        assert!((DebiasPolicy::fpc_dscale(0.1).alpha_in_effect(3) - 0.3).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn apply_policy_yields_distinct_candidates(
            kind_sel in 0usize..5,
            k in 1usize..6,
            seed in 0u64..50
        ) {
            let params = ModelParams::init(2, 10, 3, seed);
            let counts = ClickCounts::from_counts((0..10).map(|i| i * 3 % 7).collect());
            let fp = FalsePositiveIndex::new(10);
            let candidates: Vec<u32> = (0..10).collect();
            let policy = match kind_sel {
                0 => DebiasPolicy::none(),
                1 => DebiasPolicy::scale(0.7),
                2 => DebiasPolicy::dscale(0.05),
                3 => DebiasPolicy::fpc(),
                _ => DebiasPolicy::fpc_dscale(0.05),
            };
            let ranked = apply_policy(
                &policy, &params, 1, &candidates, &counts, &fp, 4, k,
            ).unwrap();
            prop_assert_eq!(ranked.len(), k);
            let mut sorted = ranked.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), k);
            prop_assert!(ranked.iter().all(|i| candidates.contains(i)));
            let again = apply_policy(
                &policy, &params, 1, &candidates, &counts, &fp, 4, k,
            ).unwrap();
            prop_assert_eq!(ranked, again);
        }
    }
}
