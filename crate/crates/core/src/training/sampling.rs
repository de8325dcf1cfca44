//! Positive and negative sampling for the multi-positive objective.
//!
//! A training example is one train-split anchor pair `(v, u)` seen through
//! one query instance of `v` whose context admits `u`. Its positives are `u`
//! plus up to `P - 1` further train-split counterparts; its negatives are
//! drawn from target entities outside the global pool of `v`, so valid but
//! held-out counterparts are never pushed away.

use std::cell::Cell;
use std::collections::BTreeSet;

use rand::seq::index::sample;

use crate::data::{DatasetBundle, QueryId, Split};
use crate::error::{Error, Result};
use crate::graph::{AnchorSet, Direction, EntityId};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TrainExample {
    pub query: QueryId,
    pub direction: Direction,
    pub source: EntityId,
    pub target: EntityId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    pub query: QueryId,
    pub source: EntityId,
    /// The driving target first, then sampled extra positives.
    pub positives: Vec<EntityId>,
    pub negatives: Vec<EntityId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub direction: Direction,
    pub items: Vec<BatchItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingConfig {
    pub positives: usize,
    pub negatives: usize,
}

/// Every training example for `dir`, sorted. `allowed` restricts the train
/// pairs (seed-ratio subsampling); `None` keeps all of them.
pub fn training_examples(
    bundle: &DatasetBundle,
    dir: Direction,
    allowed: Option<&BTreeSet<(EntityId, EntityId)>>,
) -> Vec<TrainExample> {
    let mut out = Vec::new();
    for pair in bundle.splits().pairs_in(Split::Train) {
        if allowed.is_some_and(|a| !a.contains(&pair)) {
            continue;
        }
        let (v, u) = AnchorSet::orient(pair, dir);
        for q in bundle.queries_for(dir).filter(|q| q.entity == v && q.admits(u)) {
            out.push(TrainExample { query: q.id, direction: dir, source: v, target: u });
        }
    }
    out.sort();
    out
}

pub struct Sampler<'b> {
    bundle: &'b DatasetBundle,
    config: SamplingConfig,
    allowed: Option<&'b BTreeSet<(EntityId, EntityId)>>,
    warned: Cell<bool>,
}

impl<'b> Sampler<'b> {
    pub fn new(
        bundle: &'b DatasetBundle,
        config: SamplingConfig,
        allowed: Option<&'b BTreeSet<(EntityId, EntityId)>>,
    ) -> Result<Self> {
        if config.positives == 0 || config.negatives == 0 {
            return Err(Error::InvalidArgument("positives and negatives per query must be at least 1".into()));
        }
        Ok(Sampler { bundle, config, allowed, warned: Cell::new(false) })
    }

    /// True once some query had fewer feasible negatives than requested.
    pub fn negatives_reduced(&self) -> bool {
        self.warned.get()
    }

    fn train_pool(&self, ex: &TrainExample) -> Vec<EntityId> {
        let q = self.bundle.query(ex.query).expect("example query exists");
        self.bundle
            .split_pool(ex.source, ex.direction, Split::Train)
            .into_iter()
            .filter(|&u| q.admits(u))
            .filter(|&u| {
                let pair = AnchorSet::orient((ex.source, u), ex.direction);
                self.allowed.is_none_or(|a| a.contains(&pair))
            })
            .collect()
    }

    pub fn sample_item(&self, ex: &TrainExample, rng: &mut Rng) -> BatchItem {
        let others: Vec<EntityId> = self.train_pool(ex).into_iter().filter(|&u| u != ex.target).collect();
        let extra = (self.config.positives - 1).min(others.len());
        let mut positives = vec![ex.target];
        positives.extend(sample(rng, others.len(), extra).into_iter().map(|i| others[i]));

        let global = self.bundle.pool(ex.source, ex.direction);
        let feasible: Vec<EntityId> = self
            .bundle
            .target_graph(ex.direction)
            .entities()
            .iter()
            .map(|e| e.id)
            .filter(|id| !global.contains(id))
            .collect();
        let k = self.config.negatives.min(feasible.len());
        if k < self.config.negatives && !self.warned.replace(true) {
            log::warn!(
                "only {} feasible negatives for query {} (requested {}); sampling all of them",
                feasible.len(),
                ex.query,
                self.config.negatives
            );
        }
        let negatives = sample(rng, feasible.len(), k).into_iter().map(|i| feasible[i]).collect();
        BatchItem { query: ex.query, source: ex.source, positives, negatives }
    }

    pub fn sample_batch(&self, dir: Direction, examples: &[TrainExample], rng: &mut Rng) -> Result<TrainBatch> {
        if examples.is_empty() {
            return Err(Error::InsufficientData(format!("no training examples for {dir}")));
        }
        let items = examples.iter().map(|ex| self.sample_item(ex, rng)).collect();
        Ok(TrainBatch { direction: dir, items })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SplitAssignment, SyntheticSpec};
    use crate::rng::{substream, Stream};
    use std::collections::BTreeMap;

    fn bundle() -> DatasetBundle {
        let spec = SyntheticSpec {
            tcm_entities: 30,
            wm_entities: 30,
            anchor_pairs: 24,
            many_to_many_fraction: 0.5,
            context_split_sources: 2,
            latent_dim: 6,
            query_dim: 6,
            tcm_dim: 6,
            wm_dim: 6,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, 4).unwrap()
    }

    #[test]
    fn negatives_never_hit_global_pool() {
        let b = bundle();
        let cfg = SamplingConfig { positives: 3, negatives: 8 };
        let s = Sampler::new(&b, cfg, None).unwrap();
        let mut rng = substream(0, Stream::Test);
        for dir in [Direction::TcmToWm, Direction::WmToTcm] {
            let ex = training_examples(&b, dir, None);
            for _ in 0..10_000 / 2 {
                let batch = s.sample_batch(dir, &ex[..1.max(ex.len() / 8)], &mut rng).unwrap();
                for item in &batch.items {
                    let global = b.pool(item.source, dir);
                    assert!(item.negatives.iter().all(|n| !global.contains(n)));
                    assert_eq!(item.negatives.len(), 8);
                }
            }
        }
    }

    #[test]
    fn forced_ground_truth_and_pool_limits() {
        let b = bundle();
        // Put every anchor in train so pools are as large as possible.
        let all: BTreeMap<_, _> = b.anchors().pairs().iter().map(|&p| (p, Split::Train)).collect();
        let b = b.with_splits(SplitAssignment::from_labels(all)).unwrap();
        let s = Sampler::new(&b, SamplingConfig { positives: 2, negatives: 1000 }, None).unwrap();
        let mut rng = substream(1, Stream::Test);
        let ex = training_examples(&b, Direction::TcmToWm, None);
        let multi = ex.iter().find(|e| s.train_pool(e).len() >= 2).expect("a multi-target pool");
        for _ in 0..100 {
            let item = s.sample_item(multi, &mut rng);
            assert_eq!(item.positives[0], multi.target);
            assert_eq!(item.positives.len(), 2);
            assert!(item.positives.iter().all(|p| b.pool(multi.source, Direction::TcmToWm).contains(p)));
        }
        assert!(s.negatives_reduced());
        let single = ex.iter().find(|e| s.train_pool(e).len() == 1).expect("a singleton pool");
        let s4 = Sampler::new(&b, SamplingConfig { positives: 4, negatives: 3 }, None).unwrap();
        assert_eq!(s4.sample_item(single, &mut rng).positives, vec![single.target]);
    }

    #[test]
    fn context_queries_only_drive_their_target() {
        let b = bundle();
        let all: BTreeMap<_, _> = b.anchors().pairs().iter().map(|&p| (p, Split::Train)).collect();
        let b = b.with_splits(SplitAssignment::from_labels(all)).unwrap();
        for ex in training_examples(&b, Direction::TcmToWm, None) {
            let q = b.query(ex.query).unwrap();
            if let Some(ctx) = &q.context_targets {
                assert_eq!(ctx, &BTreeSet::from([ex.target]));
            }
        }
    }

    #[test]
    fn deterministic_given_rng() {
        let b = bundle();
        let s = Sampler::new(&b, SamplingConfig { positives: 4, negatives: 5 }, None).unwrap();
        let ex = training_examples(&b, Direction::WmToTcm, None);
        let a = s.sample_batch(Direction::WmToTcm, &ex, &mut substream(3, Stream::Sampling)).unwrap();
        let c = s.sample_batch(Direction::WmToTcm, &ex, &mut substream(3, Stream::Sampling)).unwrap();
        assert_eq!(a, c);
    }
}
