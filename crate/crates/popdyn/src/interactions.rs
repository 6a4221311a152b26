//! Append-only exposure log and its derived views.
//!
//! The simulator is the single writer. Views (click counts, clicked pairs,
//! false-positive exposure positions) are maintained incrementally on append
//! and can always be recomputed from scratch with identical results.

use std::collections::HashMap;

use crate::bits::BitGrid;
use crate::click_model::{ExposureRecord, Phase};

/// Per-item cumulative click counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClickCounts {
    per_item: Vec<u64>,
}

impl ClickCounts {
    pub fn zeros(n_items: usize) -> Self {
        ClickCounts {
            per_item: vec![0; n_items],
        }
    }

    pub fn from_counts(per_item: Vec<u64>) -> Self {
        ClickCounts { per_item }
    }

    #[inline]
    pub fn get(&self, item: u32) -> u64 {
        self.per_item[item as usize]
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.per_item
    }

    pub fn len(&self) -> usize {
        self.per_item.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_item.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.per_item.iter().sum()
    }

    pub(crate) fn bump(&mut self, item: u32) {
        self.per_item[item as usize] += 1;
    }
}

/// Ranking positions of past unclicked exposures, per (user, item) pair.
/// A pair's history is discarded once the user clicks the item.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FalsePositiveIndex {
    positions: HashMap<u64, Vec<u32>>,
    n_items: u64,
}

impl FalsePositiveIndex {
    pub fn new(n_items: usize) -> Self {
        FalsePositiveIndex {
            positions: HashMap::new(),
            n_items: n_items as u64,
        }
    }

    #[inline]
    fn key(&self, user: u32, item: u32) -> u64 {
        user as u64 * self.n_items + item as u64
    }

    /// Positions at which `item` was shown to `user` without a click.
    pub fn positions(&self, user: u32, item: u32) -> &[u32] {
        self.positions
            .get(&self.key(user, item))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn pair_count(&self) -> usize {
        self.positions.len()
    }

    fn record_miss(&mut self, user: u32, item: u32, position: u32) {
        self.positions
            .entry(self.key(user, item))
            .or_default()
            .push(position);
    }

    fn clear_pair(&mut self, user: u32, item: u32) {
        self.positions.remove(&self.key(user, item));
    }
}

/// Append-only record of every exposure in a run.
#[derive(Clone, Debug)]
pub struct InteractionLog {
    n_users: usize,
    n_items: usize,
    records: Vec<ExposureRecord>,
    counts_total: ClickCounts,
    counts_by_phase: HashMap<Phase, ClickCounts>,
    clicked: BitGrid,
    fp_index: FalsePositiveIndex,
}

impl InteractionLog {
    pub fn new(n_users: usize, n_items: usize) -> Self {
        InteractionLog {
            n_users,
            n_items,
            records: Vec::new(),
            counts_total: ClickCounts::zeros(n_items),
            counts_by_phase: HashMap::new(),
            clicked: BitGrid::new(n_users, n_items),
            fp_index: FalsePositiveIndex::new(n_items),
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn records(&self) -> &[ExposureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn append(&mut self, record: ExposureRecord) {
        let (u, i) = (record.user, record.item);
        debug_assert!((u as usize) < self.n_users && (i as usize) < self.n_items);
        if record.clicked {
            self.counts_total.bump(i);
            self.counts_by_phase
                .entry(record.phase)
                .or_insert_with(|| ClickCounts::zeros(self.n_items))
                .bump(i);
            self.clicked.set(u as usize, i as usize, true);
            self.fp_index.clear_pair(u, i);
        } else if !self.clicked.get(u as usize, i as usize) {
            self.fp_index.record_miss(u, i, record.position);
        }
        self.records.push(record);
    }

    /// Clicks per item over all phases.
    pub fn click_counts(&self) -> &ClickCounts {
        &self.counts_total
    }

    /// Clicks per item restricted to the given phases.
    pub fn click_counts_for(&self, phases: &[Phase]) -> ClickCounts {
        let mut out = ClickCounts::zeros(self.n_items);
        for phase in phases {
            if let Some(counts) = self.counts_by_phase.get(phase) {
                for (acc, c) in out.per_item.iter_mut().zip(counts.as_slice()) {
                    *acc += c;
                }
            }
        }
        out
    }

    pub fn clicked(&self, user: u32, item: u32) -> bool {
        self.clicked.get(user as usize, item as usize)
    }

    pub fn false_positives(&self) -> &FalsePositiveIndex {
        &self.fp_index
    }

    pub fn total_clicks(&self) -> u64 {
        self.counts_total.total()
    }

    /// A copy holding only records from the given phases, views rebuilt.
    pub fn filtered(&self, phases: &[Phase]) -> InteractionLog {
        let mut out = InteractionLog::new(self.n_users, self.n_items);
        for rec in &self.records {
            if phases.contains(&rec.phase) {
                out.append(*rec);
            }
        }
        out
    }

    /// Recompute all derived views from the raw records. Used to check that
    /// incremental maintenance never drifts.
    pub fn recomputed_views(&self) -> (ClickCounts, BitGrid, FalsePositiveIndex) {
        let mut counts = ClickCounts::zeros(self.n_items);
        let mut clicked = BitGrid::new(self.n_users, self.n_items);
        let mut fp = FalsePositiveIndex::new(self.n_items);
        for rec in &self.records {
            if rec.clicked {
                counts.bump(rec.item);
                clicked.set(rec.user as usize, rec.item as usize, true);
                fp.clear_pair(rec.user, rec.item);
            } else if !clicked.get(rec.user as usize, rec.item as usize) {
                fp.record_miss(rec.user, rec.item, rec.position);
            }
        }
        (counts, clicked, fp)
    }

    pub(crate) fn views_consistent(&self) -> bool {
        let (counts, clicked, fp) = self.recomputed_views();
        counts == self.counts_total && clicked == self.clicked && fp == self.fp_index
    }
}
