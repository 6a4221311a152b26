//! Utility and bias metrics over a run.
//!
//! Popularity bias is the Gini coefficient of per-item true positive rates
//! TPR_i = C_i / A_i, with items ordered by audience size: positive values
//! mean high-audience items convert a larger share of their audience than
//! low-audience items do.

use serde::{Deserialize, Serialize};

use crate::click_model::Phase;
use crate::error::{Error, Result};
use crate::ground_truth::GroundTruth;
use crate::interactions::{ClickCounts, InteractionLog};

/// Gini coefficient of `values`, with items ranked by `order_keys` ascending
/// (ties by item index): sum of (2i - M - 1) * v_i over M * sum(v), 1-based.
///
/// Zero-sum inputs return 0. Range is [-(M-1)/M, (M-1)/M].
pub fn gini_of(values: &[f64], order_keys: &[f64]) -> Result<f64> {
    let m = values.len();
    if m == 0 {
        return Err(Error::invalid("gini over an empty vector"));
    }
    if order_keys.len() != m {
        return Err(Error::invalid("values and order keys differ in length"));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("gini values must be finite and non-negative"));
    }
    if order_keys.iter().any(|k| !k.is_finite()) {
        return Err(Error::invalid("gini order keys must be finite"));
    }
    let total: f64 = values.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        order_keys[a]
            .partial_cmp(&order_keys[b])
            .expect("finite keys")
            .then(a.cmp(&b))
    });
    let mut acc = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        let i = (rank0 + 1) as f64;
        acc += (2.0 * i - m as f64 - 1.0) * values[idx];
    }
    Ok(acc / (m as f64 * total))
}

/// Per-item TPR_i = C_i / A_i.
pub fn true_positive_rates(counts: &ClickCounts, gt: &GroundTruth) -> Result<Vec<f64>> {
    if counts.len() != gt.n_items() {
        return Err(Error::invalid(format!(
            "click counts cover {} items but ground truth has {}",
            counts.len(),
            gt.n_items()
        )));
    }
    Ok(counts
        .as_slice()
        .iter()
        .zip(gt.audience_sizes())
        .map(|(&c, &a)| c as f64 / a as f64)
        .collect())
}

/// TPR Gini of the clicks in `phases` up to and including iteration `t`.
pub fn gini_tpr_at(
    log: &InteractionLog,
    gt: &GroundTruth,
    t: u32,
    phases: &[Phase],
) -> Result<f64> {
    let mut counts = ClickCounts::zeros(gt.n_items());
    for rec in log.records() {
        if rec.clicked && rec.iteration <= t && phases.contains(&rec.phase) {
            counts.bump(rec.item);
        }
    }
    let tpr = true_positive_rates(&counts, gt)?;
    let keys: Vec<f64> = gt.audience_sizes().iter().map(|&a| a as f64).collect();
    gini_of(&tpr, &keys)
}

/// Clicks in `phases` up to and including iteration `t`.
pub fn cumulative_clicks_in(log: &InteractionLog, t: u32, phases: &[Phase]) -> u64 {
    log.records()
        .iter()
        .filter(|r| r.clicked && r.iteration <= t && phases.contains(&r.phase))
        .count() as u64
}

/// Clicks up to iteration `t` in the normally counted phases (bootstrap and
/// personalized; random probes are never counted as utility).
pub fn cumulative_clicks(log: &InteractionLog, t: u32) -> u64 {
    cumulative_clicks_in(log, t, &[Phase::Bootstrap, Phase::Personalized])
}

/// One measured point along a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: u32,
    pub cumulative_clicks: u64,
    pub gini_tpr: f64,
    /// Popularity-compensation exponent in effect at this point (0 when the
    /// ranker does not compensate).
    pub alpha: f64,
}

/// Checkpoints over a run, strictly ordered by iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub checkpoints: Vec<Checkpoint>,
}

impl MetricSeries {
    pub fn validate(&self) -> Result<()> {
        for pair in self.checkpoints.windows(2) {
            if pair[1].iteration <= pair[0].iteration {
                return Err(Error::invalid("checkpoint iterations must strictly increase"));
            }
            if pair[1].cumulative_clicks < pair[0].cumulative_clicks {
                return Err(Error::invalid("cumulative clicks must not decrease"));
            }
        }
        if let Some(c) = self
            .checkpoints
            .iter()
            .find(|c| !(-1.0..=1.0).contains(&c.gini_tpr))
        {
            return Err(Error::invalid(format!(
                "gini {} at iteration {} outside [-1, 1]",
                c.gini_tpr, c.iteration
            )));
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ties share the mean of the 1-based ranks they span
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid("spearman inputs differ in length"));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("spearman needs at least two points"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("spearman inputs must be finite"));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let (mut vx, mut vy) = (0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        vx += (a - mean).powi(2);
        vy += (b - mean).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::invalid("spearman undefined for a constant input"));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// 3-point moving average with clamped ends.
pub fn smooth3(values: &[f64]) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(values.len().saturating_sub(1));
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// True when the sequence rises to an interior peak and falls afterwards.
/// Flat steps are tolerated on both flanks; a peak at either end fails.
pub fn unimodal_up_down(values: &[f64]) -> bool {
    if values.len() < 3 {
        return false;
    }
    let peak = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty");
    if peak == 0 || peak == values.len() - 1 {
        return false;
    }
    let rising = values[..=peak].windows(2).all(|w| w[1] >= w[0]);
    let falling = values[peak..].windows(2).all(|w| w[1] <= w[0]);
    rising && falling && values[peak] > values[0] && values[peak] > values[values.len() - 1]
}

/// Exact one-sided paired sign-permutation test for H1: mean(diffs) > 0.
///
/// Enumerates all 2^n sign assignments, so n is capped at 20. Returns the
/// fraction of assignments whose mean is at least the observed mean.
pub fn paired_one_sided_p(diffs: &[f64]) -> Result<f64> {
    let n = diffs.len();
    if n == 0 {
        return Err(Error::invalid("paired test needs at least one pair"));
    }
    if n > 20 {
        return Err(Error::invalid("paired test capped at 20 pairs"));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("paired test inputs must be finite"));
    }
    let observed: f64 = diffs.iter().sum();
    let mut at_least = 0u64;
    for mask in 0u64..(1 << n) {
        let mut sum = 0.0;
        for (i, &d) in diffs.iter().enumerate() {
            sum += if mask >> i & 1 == 1 { -d } else { d };
        }
        if sum >= observed - 1e-12 {
            at_least += 1;
        }
    }
    Ok(at_least as f64 / (1u64 << n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::click_model::ExposureRecord;
    use crate::rng::{stream_rng, StreamKind};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn equal_values_have_zero_gini() {
        assert_eq!(gini_of(&[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn two_item_extremes() {
        // all value on the high-audience item
        assert_eq!(gini_of(&[0.0, 1.0], &[1.0, 2.0]).unwrap(), 0.5);
        // all value on the low-audience item
        assert_eq!(gini_of(&[1.0, 0.0], &[1.0, 2.0]).unwrap(), -0.5);
    }

    #[test]
    fn zero_sum_is_unbiased() {
        assert_eq!(gini_of(&[0.0, 0.0, 0.0], &[5.0, 1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn order_keys_decide_the_sign() {
        // same values, opposite audience order flips the sign
        let v = [1.0, 0.0, 3.0];
        let up = gini_of(&v, &[1.0, 2.0, 3.0]).unwrap();
        let down = gini_of(&v, &[3.0, 2.0, 1.0]).unwrap();
        assert!((up + down).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_item_index() {
        // equal keys: order is item index, so the value vector is used as-is
        let g = gini_of(&[0.0, 1.0], &[7.0, 7.0]).unwrap();
        assert_eq!(g, 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(gini_of(&[], &[]).is_err());
        assert!(gini_of(&[1.0], &[1.0, 2.0]).is_err());
        assert!(gini_of(&[-0.1, 1.0], &[1.0, 2.0]).is_err());
        assert!(gini_of(&[f64::NAN, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spearman_hand_values() {
        let one = spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap();
        assert!((one - 1.0).abs() < 1e-12);
        let neg = spearman_rho(&[1.0, 2.0, 3.0], &[5.0, 4.0, 3.0]).unwrap();
        assert!((neg + 1.0).abs() < 1e-12);
        // tied pair in x shares rank 1.5: rho = 1.5 / sqrt(1.5 * 2)
        let tied = spearman_rho(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((tied - 1.5 / 3.0f64.sqrt()).abs() < 1e-12);
        assert!(spearman_rho(&[1.0], &[1.0]).is_err());
        assert!(spearman_rho(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn smoothing_window_clamps_at_the_ends() {
        assert_eq!(smooth3(&[0.0, 3.0, 0.0]), vec![1.5, 1.0, 1.5]);
        assert_eq!(smooth3(&[1.0, 2.0, 3.0, 4.0]), vec![1.5, 2.0, 3.0, 3.5]);
    }

    #[test]
    fn unimodality_requires_an_interior_peak() {
        assert!(unimodal_up_down(&[1.0, 2.0, 3.0, 2.0, 1.0]));
        assert!(unimodal_up_down(&[0.0, 2.0, 2.0, 1.0])); // flat peak ok
        assert!(!unimodal_up_down(&[1.0, 2.0, 3.0, 4.0])); // peak at end
        assert!(!unimodal_up_down(&[3.0, 1.0, 2.0])); // peak at start
        assert!(!unimodal_up_down(&[1.0, 3.0, 2.0, 4.0, 1.0])); // two humps
        assert!(!unimodal_up_down(&[1.0, 2.0]));
    }

    #[test]
    fn paired_test_matches_enumeration() {
        let all_positive = vec![1.0; 10];
        let p = paired_one_sided_p(&all_positive).unwrap();
        assert!((p - 1.0 / 1024.0).abs() < 1e-15);
        // masks {00, 10, 11} reach the observed sum of 0
        let split = paired_one_sided_p(&[1.0, -1.0]).unwrap();
        assert!((split - 0.75).abs() < 1e-15);
        assert!(paired_one_sided_p(&[]).is_err());
        assert!(paired_one_sided_p(&vec![0.5; 21]).is_err());
    }

    #[test]
    fn random_values_with_random_order_are_near_zero_on_average() {
        let m = 200;
        let mut total_abs = 0.0;
        for seed in 0..100u64 {
            let mut rng = stream_rng(seed, StreamKind::Click, 999);
            let values: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let keys: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            total_abs += gini_of(&values, &keys).unwrap().abs();
        }
        let mean_abs = total_abs / 100.0;
        assert!(mean_abs < 0.1, "mean |gini| {mean_abs} should be near zero");
    }

    /// Naive mean-absolute-difference Gini, valid when ranked by value.
    fn gini_mad(values: &[f64]) -> f64 {
        let m = values.len() as f64;
        let total: f64 = values.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut mad = 0.0;
        for a in values {
            for b in values {
                mad += (a - b).abs();
            }
        }
        mad / (2.0 * m * total)
    }

    proptest! {
        #[test]
        fn matches_mean_absolute_difference_oracle(
            values in proptest::collection::vec(0.0f64..10.0, 1..40)
        ) {
            // ordering by value makes Eq-style and MAD-style Gini agree
            let g = gini_of(&values, &values).unwrap();
            prop_assert!((g - gini_mad(&values)).abs() < 1e-9);
        }

        #[test]
        fn scale_invariant(
            values in proptest::collection::vec(0.0f64..10.0, 1..40),
            keys in proptest::collection::vec(0.0f64..10.0, 40),
            scale in 0.001f64..1000.0
        ) {
            let keys = &keys[..values.len()];
            let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
            let a = gini_of(&values, keys).unwrap();
            let b = gini_of(&scaled, keys).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn bounded_by_m_minus_one_over_m(
            values in proptest::collection::vec(0.0f64..10.0, 1..40),
            keys in proptest::collection::vec(0.0f64..10.0, 40)
        ) {
            let m = values.len() as f64;
            let g = gini_of(&values, &keys[..values.len()]).unwrap();
            prop_assert!(g.abs() <= (m - 1.0) / m + 1e-12);
        }
    }

    #[test]
    fn tpr_is_elementwise_division() {
        let gt = GroundTruth::from_rows(4, 2, &[vec![0], vec![0], vec![0, 1], vec![0, 1]])
            .unwrap();
        assert_eq!(gt.audience_sizes(), &[4, 2]);
        let counts = ClickCounts::from_counts(vec![2, 1]);
        assert_eq!(true_positive_rates(&counts, &gt).unwrap(), vec![0.5, 0.5]);

        let zero = ClickCounts::zeros(2);
        assert_eq!(true_positive_rates(&zero, &gt).unwrap(), vec![0.0, 0.0]);

        let full = ClickCounts::from_counts(vec![4, 2]);
        assert_eq!(true_positive_rates(&full, &gt).unwrap(), vec![1.0, 1.0]);

        let wrong = ClickCounts::zeros(3);
        assert!(true_positive_rates(&wrong, &gt).is_err());
    }

    fn click_at(t: u32, phase: Phase) -> ExposureRecord {
        ExposureRecord { user: 0, item: 0, position: 1, clicked: true, iteration: t, phase }
    }

    #[test]
    fn cumulative_clicks_inclusive_boundary() {
        let mut log = InteractionLog::new(1, 1);
        for t in [1, 5, 9] {
            log.append(click_at(t, Phase::Personalized));
        }
        assert_eq!(cumulative_clicks(&log, 0), 0);
        assert_eq!(cumulative_clicks(&log, 5), 2);
        assert_eq!(cumulative_clicks(&log, u32::MAX), 3);
    }

    #[test]
    fn probe_clicks_never_count_as_utility() {
        let mut log = InteractionLog::new(1, 1);
        log.append(click_at(1, Phase::Bootstrap));
        log.append(click_at(2, Phase::RandomProbe));
        log.append(click_at(3, Phase::Personalized));
        assert_eq!(cumulative_clicks(&log, 10), 2);
        assert_eq!(
            cumulative_clicks_in(&log, 10, &[Phase::Personalized]),
            1
        );
    }

    #[test]
    fn empty_log_has_no_clicks() {
        let log = InteractionLog::new(1, 1);
        assert_eq!(cumulative_clicks(&log, 100), 0);
    }

    #[test]
    fn gini_tpr_at_respects_phase_filter() {
        // item 0 has audience {0}, item 1 audience {0,1}
        let gt = GroundTruth::from_rows(2, 2, &[vec![0, 1], vec![1]]).unwrap();
        let mut log = InteractionLog::new(2, 2);
        log.append(ExposureRecord {
            user: 0, item: 0, position: 1, clicked: true, iteration: 1,
            phase: Phase::Personalized,
        });
        log.append(ExposureRecord {
            user: 0, item: 1, position: 1, clicked: true, iteration: 2,
            phase: Phase::RandomProbe,
        });
        // personalized only: TPR = [1, 0] over audiences [1, 2] -> -0.5
        let g = gini_tpr_at(&log, &gt, 10, &[Phase::Personalized]).unwrap();
        assert_eq!(g, -0.5);
        // include the probe: TPR = [1, 0.5], audience order [1, 2]
        let g2 = gini_tpr_at(
            &log,
            &gt,
            10,
            &[Phase::Personalized, Phase::RandomProbe],
        )
        .unwrap();
        assert!((g2 - (-1.0 / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn series_validation_catches_violations() {
        let good = MetricSeries {
            checkpoints: vec![
                Checkpoint { iteration: 1, cumulative_clicks: 2, gini_tpr: 0.1, alpha: 0.0 },
                Checkpoint { iteration: 5, cumulative_clicks: 4, gini_tpr: 0.2, alpha: 0.1 },
            ],
        };
        good.validate().unwrap();

        let bad_iter = MetricSeries {
            checkpoints: vec![
                Checkpoint { iteration: 5, cumulative_clicks: 2, gini_tpr: 0.1, alpha: 0.0 },
                Checkpoint { iteration: 5, cumulative_clicks: 4, gini_tpr: 0.2, alpha: 0.0 },
            ],
        };
        assert!(bad_iter.validate().is_err());

        let bad_clicks = MetricSeries {
            checkpoints: vec![
                Checkpoint { iteration: 1, cumulative_clicks: 5, gini_tpr: 0.1, alpha: 0.0 },
                Checkpoint { iteration: 2, cumulative_clicks: 4, gini_tpr: 0.2, alpha: 0.0 },
            ],
        };
        assert!(bad_clicks.validate().is_err());
    }
}
