//! Planted-structure benchmark generator.
//!
//! Entities carry hidden unit latent vectors. Each side (and the query
//! encoder) observes latents through its own random orthonormal embedding
//! plus isotropic noise, so the sides live in different spaces with different
//! dimensions. Anchored entities share a latent with their counterparts (up
//! to a small group jitter for many-to-many groups). A context-split source
//! has one query instance per counterpart, each a noisy view of that
//! counterpart's own latent: the description, not the entity, decides which
//! target is right. Edges join each entity to its nearest latents on the same
//! side.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{split_anchors, DatasetBundle, EmbeddingTable, QueryId, QueryInstance};
use crate::error::{Error, Result};
use crate::graph::{AnchorSet, CompatTable, Direction, Entity, EntityId, Graph, Side};
use crate::rng::{substream, Rng, Stream};

/// A pair of compatible type tags, one per side (e.g. herb ↔ molecule).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeFamily {
    pub tcm_type: String,
    pub wm_type: String,
}

impl TypeFamily {
    pub fn new(tcm_type: &str, wm_type: &str) -> Self {
        Self { tcm_type: tcm_type.into(), wm_type: wm_type.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub tcm_entities: usize,
    pub wm_entities: usize,
    pub families: Vec<TypeFamily>,
    /// Total anchor pairs, context-split pairs included.
    pub anchor_pairs: usize,
    /// Share of the non-context pairs that belong to many-to-many groups.
    pub many_to_many_fraction: f64,
    pub context_split_sources: usize,
    pub descriptions_per_split: usize,
    /// Each entity links to this many nearest same-side latents.
    pub neighbors_per_entity: usize,
    pub latent_dim: usize,
    pub query_dim: usize,
    pub tcm_dim: usize,
    pub wm_dim: usize,
    /// Standard deviation scale σ of the embedding noise (expected noise norm).
    pub noise: f64,
    pub group_jitter: f64,
    /// Use `[I; 0]` instead of random orthonormal maps, so every side shares
    /// the latent coordinates directly.
    pub identity_mixing: bool,
    pub split_ratios: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            tcm_entities: 200,
            wm_entities: 200,
            families: vec![TypeFamily::new("symptom", "symptom"), TypeFamily::new("herb", "molecule")],
            anchor_pairs: 160,
            many_to_many_fraction: 0.2,
            context_split_sources: 0,
            descriptions_per_split: 2,
            neighbors_per_entity: 2,
            latent_dim: 256,
            query_dim: 256,
            tcm_dim: 256,
            wm_dim: 256,
            noise: 0.05,
            group_jitter: 0.1,
            identity_mixing: false,
            split_ratios: [0.6, 0.2, 0.2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GroupKind {
    OneToOne,
    ManyToMany,
    ContextSplit,
}

struct Group {
    kind: GroupKind,
    tcm: Vec<usize>,
    wm: Vec<usize>,
}

struct FamilyPools {
    tcm: Vec<Vec<usize>>,
    wm: Vec<Vec<usize>>,
    next: usize,
}

impl FamilyPools {
    /// Take `nt` TCM and `nw` WM entities from the next family that can
    /// supply them, cycling through families.
    fn take(&mut self, nt: usize, nw: usize) -> Option<(Vec<usize>, Vec<usize>)> {
        let nf = self.tcm.len();
        for step in 0..nf {
            let f = (self.next + step) % nf;
            if self.tcm[f].len() >= nt && self.wm[f].len() >= nw {
                let at = self.tcm[f].len() - nt;
                let t = self.tcm[f].split_off(at);
                let at = self.wm[f].len() - nw;
                let w = self.wm[f].split_off(at);
                self.next = (f + 1) % nf;
                return Some((t, w));
            }
        }
        None
    }
}

fn random_unit(rng: &mut Rng, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn mixing(rng: &mut Rng, rows: usize, latent: usize, identity: bool) -> DMatrix<f64> {
    if identity {
        return DMatrix::from_fn(rows, latent, |i, j| if i == j { 1.0 } else { 0.0 });
    }
    let g = DMatrix::from_fn(rows, latent, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

fn observe(rng: &mut Rng, map: &DMatrix<f64>, latent: &DVector<f64>, noise: f64) -> Vec<f64> {
    let dim = map.nrows();
    let scale = noise / (dim as f64).sqrt();
    let clean = map * latent;
    clean.iter().map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn knn_edges(latents: &[DVector<f64>], k: usize) -> Vec<(EntityId, EntityId)> {
    let n = latents.len();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut sims: Vec<(f64, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (latents[i].dot(&latents[j]), j)).collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, j) in sims.iter().take(k) {
            edges.insert((i.min(j) as u32, i.max(j) as u32));
        }
    }
    edges.into_iter().map(|(a, b)| (EntityId(a), EntityId(b))).collect()
}

fn validate(spec: &SyntheticSpec) -> Result<()> {
    let bad = |m: String| Err(Error::InfeasibleSpec(m));
    if spec.families.is_empty() {
        return bad("at least one type family is required".into());
    }
    if spec.latent_dim == 0 {
        return bad("latent_dim must be positive".into());
    }
    for (name, d) in [("query_dim", spec.query_dim), ("tcm_dim", spec.tcm_dim), ("wm_dim", spec.wm_dim)] {
        if d < spec.latent_dim {
            return bad(format!("{name} {d} is smaller than latent_dim {}", spec.latent_dim));
        }
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) || !(spec.group_jitter >= 0.0) {
        return bad("noise and group_jitter must be finite and non-negative".into());
    }
    if !(0.0..=1.0).contains(&spec.many_to_many_fraction) {
        return bad("many_to_many_fraction must lie in [0, 1]".into());
    }
    if spec.context_split_sources > 0 && spec.descriptions_per_split < 2 {
        return bad("context-split sources need at least two descriptions".into());
    }
    let ctx_pairs = spec.context_split_sources * spec.descriptions_per_split;
    if ctx_pairs > spec.anchor_pairs {
        return bad(format!("{ctx_pairs} context-split pairs exceed the {} requested anchors", spec.anchor_pairs));
    }
    if spec.anchor_pairs > spec.tcm_entities * spec.wm_entities {
        return bad("more anchors than entity pairs".into());
    }
    Ok(())
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<DatasetBundle> {
    validate(spec)?;
    let mut rng = substream(seed, Stream::Generate);
    let nf = spec.families.len();

    let mut pools = FamilyPools {
        tcm: vec![Vec::new(); nf],
        wm: vec![Vec::new(); nf],
        next: 0,
    };
    for i in 0..spec.tcm_entities {
        pools.tcm[i % nf].push(i);
    }
    for i in 0..spec.wm_entities {
        pools.wm[i % nf].push(i);
    }
    for p in pools.tcm.iter_mut().chain(pools.wm.iter_mut()) {
        p.shuffle(&mut rng);
    }

    let exhausted = || Error::InfeasibleSpec("not enough entities of a compatible type for the requested anchors".into());
    let mut groups = Vec::new();
    for _ in 0..spec.context_split_sources {
        let (t, w) = pools.take(1, spec.descriptions_per_split).ok_or_else(exhausted)?;
        groups.push(Group { kind: GroupKind::ContextSplit, tcm: t, wm: w });
    }
    let remaining = spec.anchor_pairs - spec.context_split_sources * spec.descriptions_per_split;
    let m2m_target = (spec.many_to_many_fraction * remaining as f64).round() as usize;
    let shapes = [(1usize, 2usize), (2, 1), (2, 2)];
    let mut m2m_pairs = 0;
    let mut shape_idx = 0;
    'm2m: while m2m_pairs < m2m_target {
        for attempt in 0..shapes.len() {
            let (nt, nw) = shapes[(shape_idx + attempt) % shapes.len()];
            if m2m_pairs + nt * nw <= m2m_target {
                if let Some((t, w)) = pools.take(nt, nw) {
                    m2m_pairs += nt * nw;
                    shape_idx = (shape_idx + attempt + 1) % shapes.len();
                    groups.push(Group { kind: GroupKind::ManyToMany, tcm: t, wm: w });
                    continue 'm2m;
                }
            }
        }
        break;
    }
    for _ in 0..remaining - m2m_pairs {
        let (t, w) = pools.take(1, 1).ok_or_else(exhausted)?;
        groups.push(Group { kind: GroupKind::OneToOne, tcm: t, wm: w });
    }

    // latents
    let dim = spec.latent_dim;
    let mut tcm_lat: Vec<Option<DVector<f64>>> = vec![None; spec.tcm_entities];
    let mut wm_lat: Vec<Option<DVector<f64>>> = vec![None; spec.wm_entities];
    let mut pairs = Vec::new();
    let mut context_sources: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (gi, g) in groups.iter().enumerate() {
        match g.kind {
            GroupKind::ContextSplit => {
                let mut sum = DVector::zeros(dim);
                for &w in &g.wm {
                    let l = random_unit(&mut rng, dim);
                    sum += &l;
                    wm_lat[w] = Some(l);
                }
                tcm_lat[g.tcm[0]] = Some(sum.normalize());
                context_sources.insert(g.tcm[0], g.wm.clone());
            }
            GroupKind::OneToOne | GroupKind::ManyToMany => {
                let center = random_unit(&mut rng, dim);
                let jitter = if g.kind == GroupKind::ManyToMany { spec.group_jitter } else { 0.0 };
                let member = |rng: &mut Rng| {
                    if jitter == 0.0 {
                        center.clone()
                    } else {
                        (&center + random_unit(rng, dim) * jitter).normalize()
                    }
                };
                for &t in &g.tcm {
                    tcm_lat[t] = Some(member(&mut rng));
                }
                for &w in &g.wm {
                    wm_lat[w] = Some(member(&mut rng));
                }
            }
        }
        for &t in &g.tcm {
            for &w in &g.wm {
                pairs.push((EntityId(t as u32), EntityId(w as u32)));
            }
        }
        let _ = gi;
    }
    let tcm_lat: Vec<DVector<f64>> =
        tcm_lat.into_iter().map(|l| l.unwrap_or_else(|| random_unit(&mut rng, dim))).collect();
    let wm_lat: Vec<DVector<f64>> = wm_lat.into_iter().map(|l| l.unwrap_or_else(|| random_unit(&mut rng, dim))).collect();

    let a_q = mixing(&mut rng, spec.query_dim, dim, spec.identity_mixing);
    let a_t = mixing(&mut rng, spec.tcm_dim, dim, spec.identity_mixing);
    let a_w = mixing(&mut rng, spec.wm_dim, dim, spec.identity_mixing);

    let make_entities = |side: Side, n: usize| -> Vec<Entity> {
        (0..n)
            .map(|i| {
                let fam = &spec.families[i % nf];
                let tag = match side {
                    Side::Tcm => &fam.tcm_type,
                    Side::Wm => &fam.wm_type,
                };
                let name = format!("{}_{tag}_{i}", side.as_str().to_lowercase());
                Entity {
                    id: EntityId(i as u32),
                    side,
                    type_tag: tag.clone(),
                    description: format!("{name}: synthetic {tag} concept"),
                    name,
                }
            })
            .collect()
    };
    let tcm_entities = make_entities(Side::Tcm, spec.tcm_entities);
    let wm_entities = make_entities(Side::Wm, spec.wm_entities);

    let mut tcm_emb = EmbeddingTable::new("tcm", spec.tcm_dim)?;
    for (i, l) in tcm_lat.iter().enumerate() {
        tcm_emb.insert(i as u64, observe(&mut rng, &a_t, l, spec.noise))?;
    }
    let mut wm_emb = EmbeddingTable::new("wm", spec.wm_dim)?;
    for (i, l) in wm_lat.iter().enumerate() {
        wm_emb.insert(i as u64, observe(&mut rng, &a_w, l, spec.noise))?;
    }

    let anchors = AnchorSet::new(pairs)?;
    let mut queries = Vec::new();
    let mut query_emb = EmbeddingTable::new("query", spec.query_dim)?;
    let mut next_id = 0u32;
    let mut push_query = |rng: &mut Rng,
                          queries: &mut Vec<QueryInstance>,
                          entity: &Entity,
                          dir: Direction,
                          latent: &DVector<f64>,
                          context: Option<(usize, EntityId)>|
     -> Result<()> {
        let id = QueryId(next_id);
        next_id += 1;
        query_emb.insert(id.0 as u64, observe(rng, &a_q, latent, spec.noise))?;
        let (description, context_targets) = match context {
            Some((j, target)) => (format!("{} (context {j})", entity.description), Some(BTreeSet::from([target]))),
            None => (entity.description.clone(), None),
        };
        queries.push(QueryInstance { id, entity: entity.id, direction: dir, description, context_targets });
        Ok(())
    };
    for (i, e) in tcm_entities.iter().enumerate() {
        if let Some(targets) = context_sources.get(&i) {
            for (j, &w) in targets.iter().enumerate() {
                push_query(&mut rng, &mut queries, e, Direction::TcmToWm, &wm_lat[w], Some((j, EntityId(w as u32))))?;
            }
        } else if anchors.sources(Direction::TcmToWm).any(|s| s == e.id) {
            push_query(&mut rng, &mut queries, e, Direction::TcmToWm, &tcm_lat[i], None)?;
        }
    }
    let wm_sources: BTreeSet<EntityId> = anchors.sources(Direction::WmToTcm).collect();
    for (i, e) in wm_entities.iter().enumerate() {
        if wm_sources.contains(&e.id) {
            push_query(&mut rng, &mut queries, e, Direction::WmToTcm, &wm_lat[i], None)?;
        }
    }

    let tcm = Graph::new(Side::Tcm, tcm_entities, knn_edges(&tcm_lat, spec.neighbors_per_entity))?;
    let wm = Graph::new(Side::Wm, wm_entities, knn_edges(&wm_lat, spec.neighbors_per_entity))?;
    let compat = CompatTable::new(spec.families.iter().map(|f| (f.tcm_type.clone(), f.wm_type.clone())));
    let splits = split_anchors(&anchors, spec.split_ratios, seed)?;
    DatasetBundle::new(tcm, wm, anchors, compat, queries, query_emb, tcm_emb, wm_emb, splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_bundle, save_bundle, EmbeddingFormat};

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            tcm_entities: 40,
            wm_entities: 44,
            anchor_pairs: 30,
            latent_dim: 8,
            query_dim: 10,
            tcm_dim: 9,
            wm_dim: 12,
            ..SyntheticSpec::default()
        }
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn noiseless_planted_matching_is_nearest_neighbor() {
        let spec = SyntheticSpec { noise: 0.0, identity_mixing: true, tcm_dim: 8, wm_dim: 8, query_dim: 8, ..small_spec() };
        let b = generate_synthetic(&spec, 3).unwrap();
        let wm = b.graph(Side::Wm);
        let mut hits = 0;
        let sources: Vec<EntityId> = b.anchors().sources(Direction::TcmToWm).collect();
        for &t in &sources {
            let x = b.embeddings(Side::Tcm).get(t.0 as u64).unwrap();
            let best = wm
                .entities()
                .iter()
                .max_by(|a, c| {
                    let sa = cosine(x, b.embeddings(Side::Wm).get(a.id.0 as u64).unwrap());
                    let sc = cosine(x, b.embeddings(Side::Wm).get(c.id.0 as u64).unwrap());
                    sa.total_cmp(&sc).then(c.id.cmp(&a.id))
                })
                .unwrap();
            hits += b.pool(t, Direction::TcmToWm).contains(&best.id) as usize;
        }
        assert_eq!(hits, sources.len());
    }

    #[test]
    fn context_split_sources_get_one_query_per_description() {
        let k = 5;
        let spec = SyntheticSpec { context_split_sources: k, descriptions_per_split: 2, ..small_spec() };
        let b = generate_synthetic(&spec, 1).unwrap();
        let ctx: Vec<&QueryInstance> = b.queries().iter().filter(|q| q.context_targets.is_some()).collect();
        assert_eq!(ctx.len(), 2 * k);
        let by_entity: BTreeSet<EntityId> = ctx.iter().map(|q| q.entity).collect();
        assert_eq!(by_entity.len(), k);
        for e in by_entity {
            let qs: Vec<_> = b.queries().iter().filter(|q| q.entity == e && q.direction == Direction::TcmToWm).collect();
            assert_eq!(qs.len(), 2);
            assert_ne!(qs[0].context_targets, qs[1].context_targets);
        }
    }

    #[test]
    fn many_to_many_share_is_respected() {
        let b = generate_synthetic(&SyntheticSpec { anchor_pairs: 40, many_to_many_fraction: 0.5, ..small_spec() }, 5).unwrap();
        assert_eq!(b.anchors().len(), 40);
        let m2m = b
            .anchors()
            .pairs()
            .iter()
            .filter(|(t, w)| b.pool(*t, Direction::TcmToWm).len() > 1 || b.pool(*w, Direction::WmToTcm).len() > 1)
            .count();
        assert!((m2m as i64 - 20).abs() <= 3, "m2m pairs {m2m}");
    }

    #[test]
    fn generated_bundle_round_trips_and_is_deterministic() {
        let spec = SyntheticSpec { context_split_sources: 3, ..small_spec() };
        let b = generate_synthetic(&spec, 42).unwrap();
        assert_eq!(b, generate_synthetic(&spec, 42).unwrap());
        let tmp = tempfile::tempdir().unwrap();
        let files = save_bundle(&b, tmp.path(), EmbeddingFormat::Binary).unwrap();
        assert_eq!(load_bundle(&files).unwrap(), b);
    }

    #[test]
    fn infeasible_specs_rejected() {
        let too_many = SyntheticSpec { anchor_pairs: 10_000, ..small_spec() };
        assert!(matches!(generate_synthetic(&too_many, 0), Err(Error::InfeasibleSpec(_))));
        let exhausted = SyntheticSpec { anchor_pairs: 41, many_to_many_fraction: 0.0, ..small_spec() };
        assert!(matches!(generate_synthetic(&exhausted, 0), Err(Error::InfeasibleSpec(_))));
        let small_dim = SyntheticSpec { tcm_dim: 4, ..small_spec() };
        assert!(matches!(generate_synthetic(&small_dim, 0), Err(Error::InfeasibleSpec(_))));
    }
}
