//! The two knowledge graphs, anchor correspondences, alignment direction and
//! the normalized adjacency used by graph propagation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "TCM")]
    Tcm,
    #[serde(rename = "WM")]
    Wm,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Tcm, Side::Wm];

    pub fn other(self) -> Side {
        match self {
            Side::Tcm => Side::Wm,
            Side::Wm => Side::Tcm,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Tcm => "TCM",
            Side::Wm => "WM",
        }
    }

    pub fn parse(s: &str) -> Option<Side> {
        match s {
            "TCM" => Some(Side::Tcm),
            "WM" => Some(Side::Wm),
            _ => None,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Entity identifier, unique within one side only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An entity id qualified by its side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityKey {
    pub side: Side,
    pub id: EntityId,
}

impl EntityKey {
    pub fn new(side: Side, id: EntityId) -> Self {
        Self { side, id }
    }
}

/// Alignment direction: bit 0 is TCM→WM, bit 1 is WM→TCM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "tcm2wm")]
    TcmToWm,
    #[serde(rename = "wm2tcm")]
    WmToTcm,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::TcmToWm, Direction::WmToTcm];

    pub fn bit(self) -> usize {
        match self {
            Direction::TcmToWm => 0,
            Direction::WmToTcm => 1,
        }
    }

    pub fn from_bit(bit: usize) -> Option<Direction> {
        match bit {
            0 => Some(Direction::TcmToWm),
            1 => Some(Direction::WmToTcm),
            _ => None,
        }
    }

    pub fn source_side(self) -> Side {
        match self {
            Direction::TcmToWm => Side::Tcm,
            Direction::WmToTcm => Side::Wm,
        }
    }

    pub fn target_side(self) -> Side {
        self.source_side().other()
    }

    pub fn reverse(self) -> Direction {
        match self {
            Direction::TcmToWm => Direction::WmToTcm,
            Direction::WmToTcm => Direction::TcmToWm,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::TcmToWm => "tcm2wm",
            Direction::WmToTcm => "wm2tcm",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub side: Side,
    pub type_tag: String,
    pub name: String,
    /// Name and definition concatenated; seeds the entity's query instances.
    pub description: String,
}

/// One side's knowledge graph with undirected, relation-agnostic edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    side: Side,
    entities: Vec<Entity>,
    edges: Vec<(EntityId, EntityId)>,
    index: HashMap<EntityId, usize>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Validates and builds a graph. Edges are stored with the smaller
    /// endpoint first; input order is otherwise preserved.
    pub fn new(side: Side, entities: Vec<Entity>, edges: Vec<(EntityId, EntityId)>) -> Result<Graph> {
        let mut index = HashMap::with_capacity(entities.len());
        for (pos, e) in entities.iter().enumerate() {
            if e.side != side {
                return Err(Error::InvalidArgument(format!(
                    "entity {} declares side {} inside the {} graph",
                    e.id, e.side, side
                )));
            }
            if e.type_tag.trim().is_empty() {
                return Err(Error::EmptyField { side, id: e.id, field: "type_tag" });
            }
            if e.description.trim().is_empty() {
                return Err(Error::EmptyField { side, id: e.id, field: "description" });
            }
            if index.insert(e.id, pos).is_some() {
                return Err(Error::DuplicateEntity { side, id: e.id });
            }
        }

        let mut seen = BTreeSet::new();
        let mut neighbors = vec![Vec::new(); entities.len()];
        let mut stored = Vec::with_capacity(edges.len());
        for &(a, b) in &edges {
            let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) else {
                return Err(Error::DanglingEdge { side, a, b });
            };
            if a == b {
                return Err(Error::SelfEdge { side, id: a });
            }
            let key = if a < b { (a, b) } else { (b, a) };
            if !seen.insert(key) {
                return Err(Error::DuplicateEdge { side, a, b });
            }
            neighbors[ia].push(ib);
            neighbors[ib].push(ia);
            stored.push(key);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        Ok(Graph { side, entities, edges: stored, index, neighbors })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn edges(&self) -> &[(EntityId, EntityId)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn index_of(&self, id: EntityId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn entity(&self, id: EntityId) -> Option<&Entity> {
        self.index_of(id).map(|i| &self.entities[i])
    }

    pub fn contains(&self, id: EntityId) -> bool {
        self.index.contains_key(&id)
    }

    /// Positions (not ids) of the intra-graph neighbors of the entity at `pos`.
    pub fn neighbor_positions(&self, pos: usize) -> &[usize] {
        &self.neighbors[pos]
    }

    pub fn neighbors(&self, id: EntityId) -> Vec<EntityId> {
        match self.index_of(id) {
            Some(pos) => self.neighbors[pos].iter().map(|&j| self.entities[j].id).collect(),
            None => Vec::new(),
        }
    }

    pub fn degree(&self, pos: usize) -> usize {
        self.neighbors[pos].len()
    }
}

/// Anchor correspondences with per-entity positive pools in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    pairs: Vec<(EntityId, EntityId)>,
    forward: BTreeMap<EntityId, BTreeSet<EntityId>>,
    reverse: BTreeMap<EntityId, BTreeSet<EntityId>>,
}

static EMPTY_POOL: BTreeSet<EntityId> = BTreeSet::new();

impl AnchorSet {
    /// Pairs are `(tcm_id, wm_id)`; they are stored sorted.
    pub fn new(pairs: Vec<(EntityId, EntityId)>) -> Result<AnchorSet> {
        let mut sorted = pairs;
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateAnchor { tcm: w[0].0, wm: w[0].1 });
            }
        }
        let mut forward: BTreeMap<EntityId, BTreeSet<EntityId>> = BTreeMap::new();
        let mut reverse: BTreeMap<EntityId, BTreeSet<EntityId>> = BTreeMap::new();
        for &(t, w) in &sorted {
            forward.entry(t).or_default().insert(w);
            reverse.entry(w).or_default().insert(t);
        }
        Ok(AnchorSet { pairs: sorted, forward, reverse })
    }

    pub fn pairs(&self) -> &[(EntityId, EntityId)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, tcm: EntityId, wm: EntityId) -> bool {
        self.forward.get(&tcm).is_some_and(|s| s.contains(&wm))
    }

    /// The positive pool of `v` under direction `dir`: every counterpart of
    /// `v` in the opposite graph. Empty for unanchored entities.
    pub fn positive_pool(&self, v: EntityKey, dir: Direction) -> Result<&BTreeSet<EntityId>> {
        if v.side != dir.source_side() {
            return Err(Error::DirectionMismatch {
                id: v.id,
                side: v.side,
                direction: dir,
                expected: dir.source_side(),
            });
        }
        let map = match dir {
            Direction::TcmToWm => &self.forward,
            Direction::WmToTcm => &self.reverse,
        };
        Ok(map.get(&v.id).unwrap_or(&EMPTY_POOL))
    }

    /// Source entities (ids on `dir`'s source side) with a non-empty pool.
    pub fn sources(&self, dir: Direction) -> impl Iterator<Item = EntityId> + '_ {
        let map = match dir {
            Direction::TcmToWm => &self.forward,
            Direction::WmToTcm => &self.reverse,
        };
        map.keys().copied()
    }

    /// Orient a stored `(tcm, wm)` pair as `(source, target)` for `dir`.
    pub fn orient(pair: (EntityId, EntityId), dir: Direction) -> (EntityId, EntityId) {
        match dir {
            Direction::TcmToWm => pair,
            Direction::WmToTcm => (pair.1, pair.0),
        }
    }
}

/// Compressed sparse row form of `D^{-1/2} (A + I) D^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterate `(col, value)` over row `i`, in ascending column order.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// `self · h`, where `h` has one row per node.
    pub fn matmul(&self, h: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
        assert_eq!(h.nrows(), self.n, "adjacency/feature row mismatch");
        let cols = h.ncols();
        let mut out = nalgebra::DMatrix::zeros(self.n, cols);
        for c in 0..cols {
            let src = h.column(c);
            let mut dst = out.column_mut(c);
            for i in 0..self.n {
                let mut acc = 0.0;
                for (j, v) in self.row(i) {
                    acc += v * src[j];
                }
                dst[i] = acc;
            }
        }
        out
    }
}

/// Symmetric-normalized adjacency with self-loops for one graph.
pub fn build_adjacency(graph: &Graph) -> Result<NormalizedAdjacency> {
    let n = graph.len();
    for &(a, b) in graph.edges() {
        if !graph.contains(a) || !graph.contains(b) {
            return Err(Error::DanglingEdge { side: graph.side(), a, b });
        }
    }
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / ((graph.degree(i) + 1) as f64).sqrt()).collect();

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for i in 0..n {
        let mut cols: Vec<usize> = graph.neighbor_positions(i).to_vec();
        cols.push(i);
        cols.sort_unstable();
        for j in cols {
            col_idx.push(j);
            values.push(inv_sqrt[i] * inv_sqrt[j]);
        }
        row_ptr.push(col_idx.len());
    }
    Ok(NormalizedAdjacency { n, row_ptr, col_idx, values })
}

/// Dataset-supplied compatibility between TCM type tags and WM type tags.
///
/// Each entry `(tcm_type, wm_type)` is usable in both directions: a TCM query
/// of `tcm_type` may retrieve WM entities of `wm_type`, and vice versa.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompatTable {
    pairs: BTreeSet<(String, String)>,
}

impl CompatTable {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> CompatTable {
        CompatTable { pairs: pairs.into_iter().collect() }
    }

    pub fn pairs(&self) -> impl Iterator<Item = &(String, String)> {
        self.pairs.iter()
    }

    pub fn allowed_targets(&self, query_type: &str, dir: Direction) -> Result<BTreeSet<&str>> {
        let allowed: BTreeSet<&str> = match dir {
            Direction::TcmToWm => self
                .pairs
                .iter()
                .filter(|(t, _)| t == query_type)
                .map(|(_, w)| w.as_str())
                .collect(),
            Direction::WmToTcm => self
                .pairs
                .iter()
                .filter(|(_, w)| w == query_type)
                .map(|(t, _)| t.as_str())
                .collect(),
        };
        if allowed.is_empty() {
            return Err(Error::UnknownTypeTag { tag: query_type.to_string(), direction: dir });
        }
        Ok(allowed)
    }

    pub fn compatible(&self, tcm_type: &str, wm_type: &str) -> bool {
        self.pairs.iter().any(|(t, w)| t == tcm_type && w == wm_type)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RetrievalMode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "type")]
    TypeConstrained,
}

impl RetrievalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMode::Full => "full",
            RetrievalMode::TypeConstrained => "type",
        }
    }

    pub fn parse(s: &str) -> Option<RetrievalMode> {
        match s {
            "full" => Some(RetrievalMode::Full),
            "type" | "type-constrained" => Some(RetrievalMode::TypeConstrained),
            _ => None,
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Positions in `target` of the candidates a query of `query_type` may rank.
pub fn candidate_positions(
    target: &Graph,
    compat: &CompatTable,
    query_type: &str,
    dir: Direction,
    mode: RetrievalMode,
) -> Result<Vec<usize>> {
    if target.side() != dir.target_side() {
        return Err(Error::InvalidArgument(format!(
            "candidate graph is {} but direction {} targets {}",
            target.side(),
            dir,
            dir.target_side()
        )));
    }
    let allowed = compat.allowed_targets(query_type, dir)?;
    Ok(match mode {
        RetrievalMode::Full => (0..target.len()).collect(),
        RetrievalMode::TypeConstrained => target
            .entities()
            .iter()
            .enumerate()
            .filter(|(_, e)| allowed.contains(e.type_tag.as_str()))
            .map(|(i, _)| i)
            .collect(),
    })
}

/// Candidate entity ids, in graph order.
pub fn restrict_candidates(
    target: &Graph,
    compat: &CompatTable,
    query_type: &str,
    dir: Direction,
    mode: RetrievalMode,
) -> Result<Vec<EntityId>> {
    let pos = candidate_positions(target, compat, query_type, dir, mode)?;
    Ok(pos.into_iter().map(|i| target.entities()[i].id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn ent(side: Side, id: u32, tag: &str) -> Entity {
        Entity {
            id: EntityId(id),
            side,
            type_tag: tag.into(),
            name: format!("e{id}"),
            description: format!("entity {id}"),
        }
    }

    fn path3() -> Graph {
        let es = (0..3).map(|i| ent(Side::Tcm, i, "symptom")).collect();
        Graph::new(Side::Tcm, es, vec![(EntityId(0), EntityId(1)), (EntityId(1), EntityId(2))]).unwrap()
    }

    #[test]
    fn single_node_adjacency_is_one() {
        let g = Graph::new(Side::Wm, vec![ent(Side::Wm, 5, "s")], vec![]).unwrap();
        let a = build_adjacency(&g).unwrap();
        assert_eq!(a.to_dense(), nalgebra::DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn two_nodes_one_edge_all_half() {
        let es = vec![ent(Side::Tcm, 0, "s"), ent(Side::Tcm, 1, "s")];
        let g = Graph::new(Side::Tcm, es, vec![(EntityId(1), EntityId(0))]).unwrap();
        let a = build_adjacency(&g).unwrap().to_dense();
        for v in a.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn path_graph_matches_dense_formula() {
        let g = path3();
        let a = build_adjacency(&g).unwrap().to_dense();
        // dense oracle: D^{-1/2} (A + I) D^{-1/2}
        let mut ai = nalgebra::DMatrix::<f64>::identity(3, 3);
        ai[(0, 1)] = 1.0;
        ai[(1, 0)] = 1.0;
        ai[(1, 2)] = 1.0;
        ai[(2, 1)] = 1.0;
        let deg: Vec<f64> = (0..3).map(|i| ai.row(i).sum()).collect();
        let d = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            3,
            deg.iter().map(|x| 1.0 / x.sqrt()),
        ));
        let expected = &d * ai * &d;
        assert!((a - expected).abs().max() < 1e-15);
    }

    #[test]
    fn random_graph_adjacency_symmetric_positive_diag() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(1..30u32);
            let es = (0..n).map(|i| ent(Side::Wm, i * 3, "x")).collect();
            let mut edges = BTreeSet::new();
            for _ in 0..n * 2 {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                if a != b {
                    edges.insert((a.min(b) * 3, a.max(b) * 3));
                }
            }
            let edges = edges.into_iter().map(|(a, b)| (EntityId(a), EntityId(b))).collect();
            let g = Graph::new(Side::Wm, es, edges).unwrap();
            let a = build_adjacency(&g).unwrap();
            let d = a.to_dense();
            assert!((&d - d.transpose()).abs().max() < 1e-12);
            for i in 0..g.len() {
                assert!(d[(i, i)] > 0.0);
                let s: f64 = d.row(i).sum();
                assert!(s.is_finite() && s > 0.0);
            }
        }
    }

    #[test]
    fn graph_rejects_bad_edges() {
        let es = || vec![ent(Side::Tcm, 0, "s"), ent(Side::Tcm, 1, "s")];
        let err = Graph::new(Side::Tcm, es(), vec![(EntityId(0), EntityId(9))]).unwrap_err();
        assert!(matches!(err, Error::DanglingEdge { b: EntityId(9), .. }), "{err}");
        let err = Graph::new(Side::Tcm, es(), vec![(EntityId(1), EntityId(1))]).unwrap_err();
        assert!(matches!(err, Error::SelfEdge { .. }));
        let err = Graph::new(
            Side::Tcm,
            es(),
            vec![(EntityId(0), EntityId(1)), (EntityId(1), EntityId(0))],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateEdge { .. }));
        let mut bad = es();
        bad[1].type_tag = String::new();
        assert!(matches!(Graph::new(Side::Tcm, bad, vec![]), Err(Error::EmptyField { .. })));
    }

    #[test]
    fn pools_read_and_reverse() {
        let (a, x, y) = (EntityId(0), EntityId(10), EntityId(11));
        let anchors = AnchorSet::new(vec![(a, x), (a, y)]).unwrap();
        let pool = anchors.positive_pool(EntityKey::new(Side::Tcm, a), Direction::TcmToWm).unwrap();
        assert_eq!(pool.iter().copied().collect::<Vec<_>>(), vec![x, y]);
        let pool = anchors.positive_pool(EntityKey::new(Side::Wm, x), Direction::WmToTcm).unwrap();
        assert_eq!(pool.iter().copied().collect::<Vec<_>>(), vec![a]);
        let err = anchors.positive_pool(EntityKey::new(Side::Wm, x), Direction::TcmToWm).unwrap_err();
        assert!(matches!(err, Error::DirectionMismatch { .. }));
        assert!(anchors.positive_pool(EntityKey::new(Side::Tcm, EntityId(7)), Direction::TcmToWm).unwrap().is_empty());
    }

    #[test]
    fn duplicate_anchor_rejected() {
        let p = (EntityId(1), EntityId(2));
        assert!(matches!(AnchorSet::new(vec![p, p]), Err(Error::DuplicateAnchor { .. })));
    }

    #[test]
    fn pools_cross_consistent_on_random_anchor_sets() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut pairs = BTreeSet::new();
        while pairs.len() < 50 {
            pairs.insert((EntityId(rng.random_range(0..20)), EntityId(rng.random_range(0..20))));
        }
        let anchors = AnchorSet::new(pairs.iter().copied().collect()).unwrap();
        for t in 0..20 {
            for w in 0..20 {
                let (t, w) = (EntityId(t), EntityId(w));
                let fwd = anchors.positive_pool(EntityKey::new(Side::Tcm, t), Direction::TcmToWm).unwrap();
                let rev = anchors.positive_pool(EntityKey::new(Side::Wm, w), Direction::WmToTcm).unwrap();
                assert_eq!(fwd.contains(&w), rev.contains(&t));
                assert_eq!(fwd.contains(&w), pairs.contains(&(t, w)));
            }
        }
    }

    #[test]
    fn candidates_full_and_typed() {
        let es = vec![ent(Side::Wm, 0, "symptom"), ent(Side::Wm, 1, "molecule"), ent(Side::Wm, 2, "symptom")];
        let g = Graph::new(Side::Wm, es, vec![]).unwrap();
        let compat = CompatTable::new([("symptom".into(), "symptom".into()), ("herb".into(), "molecule".into())]);
        let full = restrict_candidates(&g, &compat, "symptom", Direction::TcmToWm, RetrievalMode::Full).unwrap();
        assert_eq!(full.len(), 3);
        let typed =
            restrict_candidates(&g, &compat, "symptom", Direction::TcmToWm, RetrievalMode::TypeConstrained).unwrap();
        assert_eq!(typed, vec![EntityId(0), EntityId(2)]);
        let herb = restrict_candidates(&g, &compat, "herb", Direction::TcmToWm, RetrievalMode::TypeConstrained).unwrap();
        assert_eq!(herb, vec![EntityId(1)]);
        let err = restrict_candidates(&g, &compat, "organ", Direction::TcmToWm, RetrievalMode::Full).unwrap_err();
        assert!(matches!(err, Error::UnknownTypeTag { .. }));
    }
}
