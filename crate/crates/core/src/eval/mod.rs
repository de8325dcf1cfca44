//! Grouped multi-positive ranking evaluation.
//!
//! Every query is ranked against the candidate set of a retrieval mode and
//! judged against all of its ground-truth targets at once. Metrics are macro
//! averages over queries, summed in ascending query-id order so that reports
//! are bit-reproducible regardless of thread count.

mod ranking;
mod report;
mod sweep;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ranking::{hit_at_k, mrr, recall_at_k, RankedPrediction};
pub use report::{MetricReport, Stratum, StratumMetrics};
pub use sweep::{seed_ratio_sweep, subsample_train_pairs, RatioResult};

use crate::data::{DatasetBundle, QueryInstance, Split};
use crate::error::{Error, Result};
use crate::graph::{candidate_positions, Direction, RetrievalMode};

/// Anything that can score queries against target entities.
pub trait Scorer: Sync {
    /// Scores for `queries` (all of direction `dir`) against every entity of
    /// the target graph: one row per query, one column per target entity in
    /// graph order.
    fn score_matrix(&self, bundle: &DatasetBundle, dir: Direction, queries: &[&QueryInstance]) -> Result<DMatrix<f64>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub split: Split,
    pub modes: Vec<RetrievalMode>,
    pub k_list: Vec<usize>,
    /// Drop the query entity's other known counterparts from its candidates.
    pub filtered: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            modes: vec![RetrievalMode::Full, RetrievalMode::TypeConstrained],
            k_list: vec![1, 10, 100],
            filtered: false,
        }
    }
}

/// Queries of `dir` with a non-empty ground truth in `split`, by id.
pub fn evaluable_queries(bundle: &DatasetBundle, dir: Direction, split: Split) -> Vec<&QueryInstance> {
    bundle.queries_for(dir).filter(|q| !bundle.ground_truth(q, split).is_empty()).collect()
}

/// Ranked predictions for every evaluable query of `split`, per mode, in
/// ascending query-id order.
pub fn predict(
    scorer: &dyn Scorer,
    bundle: &DatasetBundle,
    split: Split,
    modes: &[RetrievalMode],
    filtered: bool,
) -> Result<BTreeMap<RetrievalMode, Vec<RankedPrediction>>> {
    let mut out: BTreeMap<RetrievalMode, Vec<RankedPrediction>> = modes.iter().map(|&m| (m, Vec::new())).collect();
    for dir in [Direction::TcmToWm, Direction::WmToTcm] {
        let queries = evaluable_queries(bundle, dir, split);
        if queries.is_empty() {
            continue;
        }
        let scores = scorer.score_matrix(bundle, dir, &queries)?;
        let target = bundle.target_graph(dir);
        if scores.shape() != (queries.len(), target.len()) {
            return Err(Error::Shape(format!(
                "scorer returned {:?} for {} queries and {} targets",
                scores.shape(),
                queries.len(),
                target.len()
            )));
        }
        let source = bundle.source_graph(dir);
        for &mode in modes {
            let mut cache: HashMap<&str, Vec<usize>> = HashMap::new();
            for q in &queries {
                let tag = source.entity(q.entity).expect("validated query").type_tag.as_str();
                if !cache.contains_key(tag) {
                    cache.insert(tag, candidate_positions(target, bundle.compat(), tag, dir, mode)?);
                }
            }
            let preds: Vec<RankedPrediction> = queries
                .par_iter()
                .enumerate()
                .map(|(row, q)| {
                    let tag = source.entity(q.entity).expect("validated query").type_tag.as_str();
                    let gt = bundle.ground_truth(q, split);
                    let known = bundle.pool(q.entity, dir);
                    let cands = cache[tag]
                        .iter()
                        .map(|&p| (target.entities()[p].id, scores[(row, p)]))
                        .filter(|(id, _)| !filtered || gt.contains(id) || !known.contains(id))
                        .collect();
                    RankedPrediction::new(q.id, dir, cands, gt)
                })
                .collect();
            out.get_mut(&mode).unwrap().extend(preds);
        }
    }
    for preds in out.values_mut() {
        preds.sort_by_key(|p| p.query);
    }
    for (mode, preds) in &out {
        let missing: usize = preds.iter().map(RankedPrediction::missing_ground_truth).sum();
        if missing > 0 {
            log::warn!("{mode} retrieval: {missing} ground-truth targets are outside the candidate sets");
        }
    }
    Ok(out)
}

pub fn evaluate(scorer: &dyn Scorer, bundle: &DatasetBundle, config: &EvalConfig) -> Result<MetricReport> {
    if config.k_list.is_empty() || config.k_list.contains(&0) {
        return Err(Error::InvalidArgument("k list must be non-empty with every k ≥ 1".into()));
    }
    let preds = predict(scorer, bundle, config.split, &config.modes, config.filtered)?;
    if preds.values().all(Vec::is_empty) {
        return Err(Error::InsufficientData(format!("no evaluable queries in the {} split", config.split)));
    }
    Ok(MetricReport::from_predictions(config.split, &preds, &config.k_list))
}

/// Model-selection signal: overall Hit@10 with MRR as tie-breaker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValScore {
    pub hit10: f64,
    pub mrr: f64,
}

impl ValScore {
    pub fn beats(&self, other: &ValScore) -> bool {
        self.hit10 > other.hit10 || (self.hit10 == other.hit10 && self.mrr > other.mrr)
    }
}

pub fn validation_score(scorer: &dyn Scorer, bundle: &DatasetBundle, mode: RetrievalMode) -> Result<ValScore> {
    let cfg = EvalConfig { split: Split::Val, modes: vec![mode], k_list: vec![10], filtered: false };
    let report = evaluate(scorer, bundle, &cfg)?;
    let row = report.get(mode, Stratum::Overall).expect("overall row present");
    Ok(ValScore { hit10: row.hit(10).unwrap(), mrr: row.mrr })
}

/// Queries of `split` whose source entity owns more than one query
/// instance in the same direction (context-split sources).
pub fn context_split_queries(bundle: &DatasetBundle, split: Split) -> BTreeSet<crate::data::QueryId> {
    let mut per_entity: BTreeMap<(Direction, crate::graph::EntityId), usize> = BTreeMap::new();
    for q in bundle.queries() {
        *per_entity.entry((q.direction, q.entity)).or_default() += 1;
    }
    bundle
        .queries()
        .iter()
        .filter(|q| per_entity[&(q.direction, q.entity)] > 1 && !bundle.ground_truth(q, split).is_empty())
        .map(|q| q.id)
        .collect()
}
