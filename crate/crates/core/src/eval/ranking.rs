//! Ranked predictions and per-query metrics.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::data::QueryId;
use crate::graph::{Direction, EntityId};

/// Candidates of one query sorted by descending score, ties broken by
/// ascending entity id, with the query's ground-truth set attached.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedPrediction {
    pub query: QueryId,
    pub direction: Direction,
    pub candidates: Vec<(EntityId, f64)>,
    pub ground_truth: BTreeSet<EntityId>,
}

impl RankedPrediction {
    pub fn new(
        query: QueryId,
        direction: Direction,
        mut candidates: Vec<(EntityId, f64)>,
        ground_truth: BTreeSet<EntityId>,
    ) -> Self {
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        RankedPrediction { query, direction, candidates, ground_truth }
    }

    /// One-based ranks of the ground-truth entities present among the
    /// candidates, ascending.
    pub fn gt_ranks(&self) -> Vec<usize> {
        self.candidates
            .iter()
            .enumerate()
            .filter(|(_, (id, _))| self.ground_truth.contains(id))
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Ground-truth entities excluded from the candidate set.
    pub fn missing_ground_truth(&self) -> usize {
        self.ground_truth.len() - self.gt_ranks().len()
    }

    pub fn top(&self, k: usize) -> impl Iterator<Item = EntityId> + '_ {
        self.candidates.iter().take(k).map(|c| c.0)
    }
}

/// 1 when at least one ground-truth entity is in the top `k`.
pub fn hit_at_k(pred: &RankedPrediction, k: usize) -> f64 {
    match pred.gt_ranks().first() {
        Some(&r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// `|GT ∩ top-k| / |GT|`; `None` when the ground truth is empty, which
/// excludes the query rather than scoring it.
pub fn recall_at_k(pred: &RankedPrediction, k: usize) -> Option<f64> {
    if pred.ground_truth.is_empty() {
        return None;
    }
    let found = pred.gt_ranks().iter().filter(|&&r| r <= k).count();
    Some(found as f64 / pred.ground_truth.len() as f64)
}

/// Reciprocal rank of the best-ranked ground-truth entity; 0 when none is a
/// candidate, `None` for an empty ground truth.
pub fn mrr(pred: &RankedPrediction) -> Option<f64> {
    if pred.ground_truth.is_empty() {
        return None;
    }
    Some(pred.gt_ranks().first().map_or(0.0, |&r| 1.0 / r as f64))
}
