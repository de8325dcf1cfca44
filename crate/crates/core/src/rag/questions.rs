//! Structural question generator: single-hop questions ask for a source
//! entity's counterparts, two-hop questions for the intra-graph neighbors of
//! those counterparts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, QueryId, Split};
use crate::error::{Error, Result};
use crate::graph::{Direction, EntityId};
use crate::rng::{substream, Stream};

/// Direction × hop depth × source type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Category {
    pub direction: Direction,
    pub hops: u8,
    pub source_type: String,
}

impl Category {
    pub fn label(&self) -> String {
        format!("{}/{}hop/{}", self.direction, self.hops, self.source_type)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: u32,
    pub category: Category,
    pub source_id: EntityId,
    /// Description through which the predicted alignment is looked up.
    pub query_id: QueryId,
    pub hops: u8,
    pub gold_ids: BTreeSet<EntityId>,
}

/// Gold evidence of a question about `source`: its counterparts, or for two
/// hops the union of their target-side neighbors.
pub fn gold_evidence(bundle: &DatasetBundle, source: EntityId, dir: Direction, hops: u8) -> BTreeSet<EntityId> {
    let pool = bundle.pool(source, dir);
    if hops == 1 {
        return pool.clone();
    }
    let target = bundle.target_graph(dir);
    pool.iter().flat_map(|&c| target.neighbors(c)).collect()
}

/// Up to `per_category` questions per category, drawn from sources that have
/// an anchor in `split` and a plain (not context-split) description. Short
/// categories are filled as far as the structure allows, with a warning.
pub fn generate_questions(bundle: &DatasetBundle, per_category: usize, split: Split, seed: u64) -> Result<Vec<Question>> {
    if per_category == 0 {
        return Err(Error::InvalidArgument("questions per category must be positive".into()));
    }
    let mut rng = substream(seed, Stream::Questions);
    let mut out = Vec::new();
    for dir in [Direction::TcmToWm, Direction::WmToTcm] {
        let source_graph = bundle.source_graph(dir);
        let mut by_type: BTreeMap<&str, Vec<(EntityId, QueryId)>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for q in bundle.queries_for(dir) {
            if q.context_targets.is_some() || bundle.split_pool(q.entity, dir, split).is_empty() || !seen.insert(q.entity) {
                continue;
            }
            let tag = source_graph.entity(q.entity).expect("validated query").type_tag.as_str();
            by_type.entry(tag).or_default().push((q.entity, q.id));
        }
        for (tag, sources) in by_type {
            for hops in [1u8, 2] {
                let category = Category { direction: dir, hops, source_type: tag.to_string() };
                let mut eligible: Vec<_> =
                    sources.iter().filter(|(e, _)| !gold_evidence(bundle, *e, dir, hops).is_empty()).copied().collect();
                eligible.shuffle(&mut rng);
                if eligible.len() < per_category {
                    log::warn!("category {} has {} eligible sources, wanted {per_category}", category.label(), eligible.len());
                }
                let mut chosen: Vec<_> = eligible.into_iter().take(per_category).collect();
                chosen.sort();
                for (source_id, query_id) in chosen {
                    out.push(Question {
                        id: out.len() as u32,
                        category: category.clone(),
                        source_id,
                        query_id,
                        hops,
                        gold_ids: gold_evidence(bundle, source_id, dir, hops),
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InsufficientData(format!("no question sources in the {split} split")));
    }
    Ok(out)
}

pub fn write_questions(questions: &[Question], mut w: impl Write) -> std::io::Result<()> {
    for q in questions {
        serde_json::to_writer(&mut w, q)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_questions(r: impl BufRead) -> Result<Vec<Question>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::parse("questions", i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse("questions", i + 1, e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn bundle() -> DatasetBundle {
        let spec = SyntheticSpec {
            tcm_entities: 60,
            wm_entities: 60,
            anchor_pairs: 50,
            context_split_sources: 3,
            latent_dim: 6,
            query_dim: 6,
            tcm_dim: 6,
            wm_dim: 6,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, 3).unwrap()
    }

    #[test]
    fn gold_is_nonempty_and_follows_definitions() {
        let b = bundle();
        let qs = generate_questions(&b, 3, Split::Test, 1).unwrap();
        assert!(!qs.is_empty());
        for q in &qs {
            let dir = q.category.direction;
            assert!(!q.gold_ids.is_empty());
            let pool = b.pool(q.source_id, dir);
            if q.hops == 1 {
                assert_eq!(&q.gold_ids, pool);
            } else {
                let target = b.target_graph(dir);
                for g in &q.gold_ids {
                    assert!(pool.iter().any(|c| target.neighbors(*c).contains(g)));
                }
            }
            assert!(b.query(q.query_id).unwrap().context_targets.is_none());
        }
    }

    #[test]
    fn categories_partition_and_respect_counts() {
        let b = bundle();
        let qs = generate_questions(&b, 2, Split::Train, 5).unwrap();
        let mut counts: BTreeMap<&Category, usize> = BTreeMap::new();
        for q in &qs {
            *counts.entry(&q.category).or_default() += 1;
            assert_eq!(q.hops, q.category.hops);
        }
        assert_eq!(counts.len(), 8);
        assert!(counts.values().all(|&c| c == 2));
        let ids: BTreeSet<u32> = qs.iter().map(|q| q.id).collect();
        assert_eq!(ids.len(), qs.len());
    }

    #[test]
    fn deterministic_and_round_trips() {
        let b = bundle();
        let a = generate_questions(&b, 4, Split::Test, 9).unwrap();
        assert_eq!(a, generate_questions(&b, 4, Split::Test, 9).unwrap());
        let mut buf = Vec::new();
        write_questions(&a, &mut buf).unwrap();
        assert_eq!(read_questions(buf.as_slice()).unwrap(), a);
    }
}
