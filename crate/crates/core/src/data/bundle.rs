use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::{
    build_adjacency, AnchorSet, CompatTable, Direction, EntityId, EntityKey, Graph, NormalizedAdjacency, Side,
};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryId(pub u32);

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One textual description of a source entity, used as a ranking query.
///
/// `context_targets`, when present, narrows which of the entity's
/// counterparts this particular description refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryInstance {
    pub id: QueryId,
    pub entity: EntityId,
    pub direction: Direction,
    pub description: String,
    pub context_targets: Option<BTreeSet<EntityId>>,
}

impl QueryInstance {
    pub fn source(&self) -> EntityKey {
        EntityKey::new(self.direction.source_side(), self.entity)
    }

    pub fn admits(&self, target: EntityId) -> bool {
        self.context_targets.as_ref().is_none_or(|c| c.contains(&target))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "test")]
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pair-level split labels; keys are `(tcm_id, wm_id)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    labels: BTreeMap<(EntityId, EntityId), Split>,
}

impl SplitAssignment {
    pub fn from_labels(labels: BTreeMap<(EntityId, EntityId), Split>) -> Self {
        Self { labels }
    }

    pub fn get(&self, pair: (EntityId, EntityId)) -> Option<Split> {
        self.labels.get(&pair).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((EntityId, EntityId), Split)> + '_ {
        self.labels.iter().map(|(&p, &s)| (p, s))
    }

    pub fn pairs_in(&self, split: Split) -> impl Iterator<Item = (EntityId, EntityId)> + '_ {
        self.labels.iter().filter(move |(_, &s)| s == split).map(|(&p, _)| p)
    }

    pub fn count(&self, split: Split) -> usize {
        self.labels.values().filter(|&&s| s == split).count()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Partition anchor pairs into train/val/test at the pair level.
///
/// Counts are `⌊ratio·N⌋` with the leftover pairs handed out by largest
/// fractional remainder, so each count is within one pair of its ratio.
pub fn split_anchors(anchors: &AnchorSet, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = anchors.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("need at least 3 anchor pairs to split, have {n}")));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut leftover = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }

    let mut pairs = anchors.pairs().to_vec();
    pairs.shuffle(&mut substream(seed, Stream::Split));
    let mut labels = BTreeMap::new();
    for (i, p) in pairs.into_iter().enumerate() {
        let split = if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        labels.insert(p, split);
    }
    Ok(SplitAssignment { labels })
}

/// Everything one experiment consumes: both graphs, anchors, embeddings,
/// query instances, type compatibility and the split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    tcm: Graph,
    wm: Graph,
    anchors: AnchorSet,
    compat: CompatTable,
    queries: Vec<QueryInstance>,
    query_emb: EmbeddingTable,
    tcm_emb: EmbeddingTable,
    wm_emb: EmbeddingTable,
    splits: SplitAssignment,
    derived: Derived,
}

#[derive(Debug, Clone, PartialEq)]
struct Derived {
    adjacency: [NormalizedAdjacency; 2],
    features: [DMatrix<f64>; 2],
    query_index: BTreeMap<QueryId, usize>,
}

fn side_slot(side: Side) -> usize {
    match side {
        Side::Tcm => 0,
        Side::Wm => 1,
    }
}

impl DatasetBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tcm: Graph,
        wm: Graph,
        anchors: AnchorSet,
        compat: CompatTable,
        mut queries: Vec<QueryInstance>,
        query_emb: EmbeddingTable,
        tcm_emb: EmbeddingTable,
        wm_emb: EmbeddingTable,
        splits: SplitAssignment,
    ) -> Result<Self> {
        if tcm.side() != Side::Tcm || wm.side() != Side::Wm {
            return Err(Error::InvalidArgument("graphs passed in the wrong slots".into()));
        }
        for &(t, w) in anchors.pairs() {
            if !tcm.contains(t) {
                return Err(Error::UnknownEntity { side: Side::Tcm, id: t, context: "anchor".into() });
            }
            if !wm.contains(w) {
                return Err(Error::UnknownEntity { side: Side::Wm, id: w, context: "anchor".into() });
            }
        }

        for (graph, table) in [(&tcm, &tcm_emb), (&wm, &wm_emb)] {
            for e in graph.entities() {
                table.require(e.id.0 as u64)?;
            }
            for id in table.ids() {
                if id > u32::MAX as u64 || !graph.contains(EntityId(id as u32)) {
                    return Err(Error::OrphanEmbeddingRow { table: table.name().to_string(), id });
                }
            }
        }

        queries.sort_by_key(|q| q.id);
        let mut query_index = BTreeMap::new();
        for (i, q) in queries.iter().enumerate() {
            if query_index.insert(q.id, i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate query instance id {}", q.id)));
            }
            let src = match q.direction.source_side() {
                Side::Tcm => &tcm,
                Side::Wm => &wm,
            };
            if !src.contains(q.entity) {
                return Err(Error::UnknownEntity {
                    side: q.direction.source_side(),
                    id: q.entity,
                    context: format!("query instance {}", q.id),
                });
            }
            if q.description.trim().is_empty() || q.description.contains(['\t', '\n']) {
                return Err(Error::InvalidArgument(format!("query instance {} has an invalid description", q.id)));
            }
            query_emb.require(q.id.0 as u64)?;
            if let Some(ctx) = &q.context_targets {
                let pool = anchors.positive_pool(q.source(), q.direction)?;
                if let Some(bad) = ctx.iter().find(|t| !pool.contains(t)) {
                    return Err(Error::UnknownEntity {
                        side: q.direction.target_side(),
                        id: *bad,
                        context: format!("context target of query {} is not a counterpart", q.id),
                    });
                }
            }
        }
        for id in query_emb.ids() {
            if id > u32::MAX as u64 || !query_index.contains_key(&QueryId(id as u32)) {
                return Err(Error::OrphanEmbeddingRow { table: query_emb.name().to_string(), id });
            }
        }

        if splits.len() != anchors.len() {
            if let Some(&(t, w)) = anchors.pairs().iter().find(|&&p| splits.get(p).is_none()) {
                return Err(Error::SplitMismatch { tcm: t, wm: w });
            }
            let (t, w) = splits.iter().map(|(p, _)| p).find(|&(t, w)| !anchors.contains(t, w)).unwrap();
            return Err(Error::SplitMismatch { tcm: t, wm: w });
        }
        for &p in anchors.pairs() {
            if splits.get(p).is_none() {
                return Err(Error::SplitMismatch { tcm: p.0, wm: p.1 });
            }
        }

        let adjacency = [build_adjacency(&tcm)?, build_adjacency(&wm)?];
        let features = [
            tcm_emb.matrix(tcm.entities().iter().map(|e| e.id.0 as u64))?,
            wm_emb.matrix(wm.entities().iter().map(|e| e.id.0 as u64))?,
        ];

        Ok(DatasetBundle {
            tcm,
            wm,
            anchors,
            compat,
            queries,
            query_emb,
            tcm_emb,
            wm_emb,
            splits,
            derived: Derived { adjacency, features, query_index },
        })
    }

    /// Same data with a different split assignment.
    pub fn with_splits(&self, splits: SplitAssignment) -> Result<Self> {
        DatasetBundle::new(
            self.tcm.clone(),
            self.wm.clone(),
            self.anchors.clone(),
            self.compat.clone(),
            self.queries.clone(),
            self.query_emb.clone(),
            self.tcm_emb.clone(),
            self.wm_emb.clone(),
            splits,
        )
    }

    pub fn graph(&self, side: Side) -> &Graph {
        match side {
            Side::Tcm => &self.tcm,
            Side::Wm => &self.wm,
        }
    }

    pub fn source_graph(&self, dir: Direction) -> &Graph {
        self.graph(dir.source_side())
    }

    pub fn target_graph(&self, dir: Direction) -> &Graph {
        self.graph(dir.target_side())
    }

    pub fn embeddings(&self, side: Side) -> &EmbeddingTable {
        match side {
            Side::Tcm => &self.tcm_emb,
            Side::Wm => &self.wm_emb,
        }
    }

    pub fn query_embeddings(&self) -> &EmbeddingTable {
        &self.query_emb
    }

    /// Entity features for `side`, one row per entity in graph order.
    pub fn features(&self, side: Side) -> &DMatrix<f64> {
        &self.derived.features[side_slot(side)]
    }

    pub fn adjacency(&self, side: Side) -> &NormalizedAdjacency {
        &self.derived.adjacency[side_slot(side)]
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn compat(&self) -> &CompatTable {
        &self.compat
    }

    pub fn splits(&self) -> &SplitAssignment {
        &self.splits
    }

    /// Query instances sorted by id.
    pub fn queries(&self) -> &[QueryInstance] {
        &self.queries
    }

    pub fn query(&self, id: QueryId) -> Option<&QueryInstance> {
        self.derived.query_index.get(&id).map(|&i| &self.queries[i])
    }

    pub fn queries_for(&self, dir: Direction) -> impl Iterator<Item = &QueryInstance> + '_ {
        self.queries.iter().filter(move |q| q.direction == dir)
    }

    /// Stacked query embeddings for `queries`, in that order.
    pub fn query_matrix(&self, queries: &[&QueryInstance]) -> Result<DMatrix<f64>> {
        self.query_emb.matrix(queries.iter().map(|q| q.id.0 as u64))
    }

    /// Stacked entity features of the queries' source entities.
    pub fn source_entity_matrix(&self, queries: &[&QueryInstance], dir: Direction) -> Result<DMatrix<f64>> {
        let side = dir.source_side();
        self.embeddings(side).matrix(queries.iter().map(|q| q.entity.0 as u64))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.query_emb.dim(), self.tcm_emb.dim(), self.wm_emb.dim())
    }

    /// Global positive pool of source entity `v` under `dir`.
    pub fn pool(&self, v: EntityId, dir: Direction) -> &std::collections::BTreeSet<EntityId> {
        self.anchors
            .positive_pool(EntityKey::new(dir.source_side(), v), dir)
            .expect("source side implied by direction")
    }

    /// Counterparts of `v` whose anchor pair lies in `split`.
    pub fn split_pool(&self, v: EntityId, dir: Direction, split: Split) -> BTreeSet<EntityId> {
        self.pool(v, dir)
            .iter()
            .copied()
            .filter(|&u| {
                let pair = match dir {
                    Direction::TcmToWm => (v, u),
                    Direction::WmToTcm => (u, v),
                };
                self.splits.get(pair) == Some(split)
            })
            .collect()
    }

    /// Ground-truth targets of a query when evaluating `split`.
    pub fn ground_truth(&self, q: &QueryInstance, split: Split) -> BTreeSet<EntityId> {
        let mut gt = self.split_pool(q.entity, q.direction, split);
        if let Some(ctx) = &q.context_targets {
            gt.retain(|u| ctx.contains(u));
        }
        gt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchors(n: u32) -> AnchorSet {
        AnchorSet::new((0..n).map(|i| (EntityId(i), EntityId(i % 4))).collect()).unwrap()
    }

    #[test]
    fn ten_pairs_split_six_two_two() {
        let s = split_anchors(&anchors(10), [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!((s.count(Split::Train), s.count(Split::Val), s.count(Split::Test)), (6, 2, 2));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let a = anchors(37);
        let s1 = split_anchors(&a, [0.6, 0.2, 0.2], 9).unwrap();
        let s2 = split_anchors(&a, [0.6, 0.2, 0.2], 9).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 37);
        for &p in a.pairs() {
            assert!(s1.get(p).is_some());
        }
        let counts = [s1.count(Split::Train), s1.count(Split::Val), s1.count(Split::Test)];
        for (c, r) in counts.iter().zip([0.6, 0.2, 0.2]) {
            assert!((*c as f64 - r * 37.0).abs() <= 1.0);
        }
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_anchors(&anchors(2), [0.6, 0.2, 0.2], 0), Err(Error::InsufficientData(_))));
        assert!(matches!(split_anchors(&anchors(5), [0.6, 0.2, 0.3], 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn many_counterparts_spread_across_splits() {
        // entity 0 has five counterparts among twenty pairs
        let mut pairs: Vec<_> = (0..5).map(|w| (EntityId(0), EntityId(w))).collect();
        pairs.extend((1..16).map(|t| (EntityId(t), EntityId(100 + t))));
        let a = AnchorSet::new(pairs).unwrap();
        let spread = (0..20).any(|seed| {
            let s = split_anchors(&a, [0.6, 0.2, 0.2], seed).unwrap();
            let used: BTreeSet<Split> = (0..5).map(|w| s.get((EntityId(0), EntityId(w))).unwrap()).collect();
            used.len() > 1
        });
        assert!(spread);
    }
}
