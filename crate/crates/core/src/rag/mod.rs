//! Evidence-retrieval simulator downstream of alignment.
//!
//! A question starts at a source entity, crosses to the other graph through
//! an alignment setting's candidate list, and (for two-hop questions) expands
//! to every intra-graph neighbor of the surviving candidates. Only retrieval
//! is simulated; there is no answer generation.

mod questions;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use questions::{generate_questions, gold_evidence, read_questions, write_questions, Category, Question};

use crate::data::{DatasetBundle, QueryId};
use crate::error::{Error, Result};
use crate::eval::RankedPrediction;
use crate::graph::EntityId;
use crate::rng::{keyed_substream, Stream};

/// Default first-hop candidate cap.
pub const DEFAULT_K: usize = 10;
/// Default number of removal seeds averaged for DropX.
pub const DEFAULT_DROP_TRIALS: u32 = 5;

/// Ranked target lists per query, best first.
pub type Predictions = BTreeMap<QueryId, Vec<EntityId>>;

pub fn predictions_from(preds: &[RankedPrediction]) -> Predictions {
    preds.iter().map(|p| (p.query, p.candidates.iter().map(|c| c.0).collect())).collect()
}

/// Source of first-hop cross-system links.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentSetting {
    /// Gold counterparts.
    Oracle,
    /// The model's ranking.
    Predicted,
    /// The model's top `x` only.
    TopX(usize),
    /// The model's list with `⌊ratio·n⌋` candidates removed at random.
    DropX(f64),
    /// No cross-system links at all.
    NoAlign,
}

impl AlignmentSetting {
    pub fn parse(s: &str) -> Result<AlignmentSetting> {
        let bad = || Error::InvalidArgument(format!("unknown alignment setting {s:?}"));
        let s = s.trim();
        Ok(match s {
            "oracle" => AlignmentSetting::Oracle,
            "predicted" => AlignmentSetting::Predicted,
            "noalign" => AlignmentSetting::NoAlign,
            _ => match s.split_once('=') {
                Some(("topx", x)) => AlignmentSetting::TopX(x.parse().map_err(|_| bad())?),
                Some(("dropx", r)) => {
                    let r: f64 = r.parse().map_err(|_| bad())?;
                    if !(0.0..=1.0).contains(&r) {
                        return Err(Error::InvalidArgument(format!("drop ratio {r} outside [0, 1]")));
                    }
                    AlignmentSetting::DropX(r)
                }
                _ => return Err(bad()),
            },
        })
    }

    pub fn parse_list(s: &str) -> Result<Vec<AlignmentSetting>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(AlignmentSetting::parse).collect()
    }

    fn uses_predictions(self) -> bool {
        matches!(self, AlignmentSetting::Predicted | AlignmentSetting::TopX(_) | AlignmentSetting::DropX(_))
    }
}

impl fmt::Display for AlignmentSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignmentSetting::Oracle => f.write_str("oracle"),
            AlignmentSetting::Predicted => f.write_str("predicted"),
            AlignmentSetting::TopX(x) => write!(f, "topx={x}"),
            AlignmentSetting::DropX(r) => write!(f, "dropx={r}"),
            AlignmentSetting::NoAlign => f.write_str("noalign"),
        }
    }
}

/// Oracle, Predicted, TopX for each `x`, DropX for each ratio, NoAlign.
pub fn standard_settings(x_values: &[usize], drop_ratios: &[f64]) -> Vec<AlignmentSetting> {
    let mut out = vec![AlignmentSetting::Oracle, AlignmentSetting::Predicted];
    out.extend(x_values.iter().map(|&x| AlignmentSetting::TopX(x)));
    out.extend(drop_ratios.iter().map(|&r| AlignmentSetting::DropX(r)));
    out.push(AlignmentSetting::NoAlign);
    out
}

/// What one question retrieved under one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagTrace {
    pub question: u32,
    pub category: Category,
    pub setting: String,
    pub trial: u32,
    /// Retrieved entities with the hop that first reached them.
    pub evidence: Vec<(EntityId, u8)>,
    pub cross_system_hit: bool,
    pub evidence_recall: f64,
}

/// Retrieves evidence for `question`. `trial` selects the DropX removal
/// draw; other settings ignore it.
pub fn retrieve(
    question: &Question,
    setting: AlignmentSetting,
    bundle: &DatasetBundle,
    predictions: &Predictions,
    k: usize,
    seed: u64,
    trial: u32,
) -> Result<RagTrace> {
    let dir = question.category.direction;
    let pool = bundle.pool(question.source_id, dir);
    let ranked = || {
        predictions
            .get(&question.query_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no prediction for query {}", question.query_id)))
    };
    let first: Vec<EntityId> = match setting {
        AlignmentSetting::Oracle => pool.iter().copied().take(k).collect(),
        AlignmentSetting::Predicted => ranked()?.iter().copied().take(k).collect(),
        AlignmentSetting::TopX(x) => ranked()?.iter().copied().take(x.min(k)).collect(),
        AlignmentSetting::DropX(ratio) => {
            let list: Vec<EntityId> = ranked()?.iter().copied().take(k).collect();
            let n = list.len();
            let removed = ((ratio * n as f64) + 1e-9).floor() as usize;
            let mut rng = keyed_substream(seed, Stream::DropX, ((question.id as u64) << 32) | trial as u64);
            // A full permutation is drawn so that larger ratios remove a
            // superset of what smaller ratios remove for the same trial.
            let order = sample(&mut rng, n, n).into_vec();
            let gone: BTreeSet<usize> = order[..removed.min(n)].iter().copied().collect();
            list.into_iter().enumerate().filter(|(i, _)| !gone.contains(i)).map(|(_, e)| e).collect()
        }
        AlignmentSetting::NoAlign => Vec::new(),
    };

    let mut evidence: Vec<(EntityId, u8)> = Vec::new();
    let mut seen = BTreeSet::new();
    for &e in &first {
        if seen.insert(e) {
            evidence.push((e, 1));
        }
    }
    if question.hops >= 2 {
        let target = bundle.target_graph(dir);
        let second: BTreeSet<EntityId> = first.iter().flat_map(|&e| target.neighbors(e)).collect();
        for e in second {
            if seen.insert(e) {
                evidence.push((e, 2));
            }
        }
    }
    let found = question.gold_ids.iter().filter(|g| seen.contains(g)).count();
    Ok(RagTrace {
        question: question.id,
        category: question.category.clone(),
        setting: setting.to_string(),
        trial,
        evidence,
        cross_system_hit: first.iter().any(|e| pool.contains(e)),
        evidence_recall: found as f64 / question.gold_ids.len() as f64,
    })
}

/// Traces of every question under `setting`; DropX repeats each question
/// over `trials` removal draws.
pub fn run_setting(
    questions: &[Question],
    setting: AlignmentSetting,
    bundle: &DatasetBundle,
    predictions: &Predictions,
    k: usize,
    seed: u64,
    trials: u32,
) -> Result<Vec<RagTrace>> {
    if k == 0 {
        return Err(Error::InvalidArgument("first-hop cap k must be positive".into()));
    }
    let trials = if matches!(setting, AlignmentSetting::DropX(_)) { trials.max(1) } else { 1 };
    if setting.uses_predictions() {
        if let Some(q) = questions.iter().find(|q| !predictions.contains_key(&q.query_id)) {
            return Err(Error::InvalidArgument(format!("no prediction for query {} of question {}", q.query_id, q.id)));
        }
    }
    let jobs: Vec<(&Question, u32)> = questions.iter().flat_map(|q| (0..trials).map(move |t| (q, t))).collect();
    jobs.par_iter().map(|&(q, t)| retrieve(q, setting, bundle, predictions, k, seed, t)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagRow {
    pub setting: String,
    /// Category label, or `overall` for the macro average over categories.
    pub category: String,
    /// Traces aggregated (questions × trials).
    pub traces: usize,
    pub evidence_recall: f64,
    pub cross_system_hit_rate: f64,
}

/// Per-category means plus their macro average, in category order with the
/// overall row first. Traces are assumed to come from a single setting.
pub fn rag_metrics(traces: &[RagTrace]) -> Result<Vec<RagRow>> {
    let first = traces.first().ok_or_else(|| Error::InsufficientData("no traces to aggregate".into()))?;
    let mut by_cat: BTreeMap<&Category, (usize, f64, f64)> = BTreeMap::new();
    for t in traces {
        let e = by_cat.entry(&t.category).or_default();
        e.0 += 1;
        e.1 += t.evidence_recall;
        e.2 += if t.cross_system_hit { 1.0 } else { 0.0 };
    }
    let rows: Vec<RagRow> = by_cat
        .iter()
        .map(|(c, &(n, er, hit))| RagRow {
            setting: first.setting.clone(),
            category: c.label(),
            traces: n,
            evidence_recall: er / n as f64,
            cross_system_hit_rate: hit / n as f64,
        })
        .collect();
    let m = rows.len() as f64;
    let overall = RagRow {
        setting: first.setting.clone(),
        category: "overall".into(),
        traces: traces.len(),
        evidence_recall: rows.iter().map(|r| r.evidence_recall).sum::<f64>() / m,
        cross_system_hit_rate: rows.iter().map(|r| r.cross_system_hit_rate).sum::<f64>() / m,
    };
    Ok(std::iter::once(overall).chain(rows).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagReport {
    pub k: usize,
    pub rows: Vec<RagRow>,
}

impl RagReport {
    pub fn overall(&self, setting: AlignmentSetting) -> Option<&RagRow> {
        let label = setting.to_string();
        self.rows.iter().find(|r| r.setting == label && r.category == "overall")
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("setting\tcategory\ttraces\tEvidenceRecall@{}\tCrossSystemHitRate\n", self.k);
        for r in &self.rows {
            s += &format!(
                "{}\t{}\t{}\t{:.4}\t{:.4}\n",
                r.setting, r.category, r.traces, r.evidence_recall, r.cross_system_hit_rate
            );
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                let v = serde_json::json!({
                    "setting": r.setting,
                    "category": r.category,
                    "traces": r.traces,
                    format!("evidence_recall@{}", self.k): r.evidence_recall,
                    "cross_system_hit_rate": r.cross_system_hit_rate,
                });
                v.to_string() + "\n"
            })
            .collect()
    }
}

/// One block of rows per setting, in the order given.
pub fn sweep_settings(
    bundle: &DatasetBundle,
    questions: &[Question],
    predictions: &Predictions,
    settings: &[AlignmentSetting],
    k: usize,
    seed: u64,
    trials: u32,
) -> Result<RagReport> {
    let mut rows = Vec::new();
    for &s in settings {
        let traces = run_setting(questions, s, bundle, predictions, k, seed, trials)?;
        rows.extend(rag_metrics(&traces)?);
    }
    Ok(RagReport { k, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Split, SyntheticSpec};
    use crate::graph::Direction;

    fn bundle() -> DatasetBundle {
        let spec = SyntheticSpec {
            tcm_entities: 20,
            wm_entities: 20,
            anchor_pairs: 16,
            many_to_many_fraction: 0.4,
            neighbors_per_entity: 2,
            latent_dim: 5,
            query_dim: 5,
            tcm_dim: 5,
            wm_dim: 5,
            split_ratios: [0.4, 0.2, 0.4],
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, 11).unwrap()
    }

    /// Deterministic pseudo-ranking over the whole target graph.
    fn fake_predictions(b: &DatasetBundle, qs: &[Question]) -> Predictions {
        qs.iter()
            .map(|q| {
                let mut ids: Vec<EntityId> = b.target_graph(q.category.direction).entities().iter().map(|e| e.id).collect();
                ids.sort_by_key(|e| (e.0 * 7 + q.query_id.0 * 3) % 11);
                (q.query_id, ids)
            })
            .collect()
    }

    fn neighbors_by_edge_list(b: &DatasetBundle, dir: Direction, e: EntityId) -> BTreeSet<EntityId> {
        b.target_graph(dir)
            .edges()
            .iter()
            .filter_map(|&(a, c)| if a == e { Some(c) } else if c == e { Some(a) } else { None })
            .collect()
    }

    #[test]
    fn settings_parse_and_print() {
        let s = AlignmentSetting::parse_list("oracle,predicted,topx=3,dropx=0.5,noalign").unwrap();
        assert_eq!(
            s,
            vec![
                AlignmentSetting::Oracle,
                AlignmentSetting::Predicted,
                AlignmentSetting::TopX(3),
                AlignmentSetting::DropX(0.5),
                AlignmentSetting::NoAlign
            ]
        );
        let printed: Vec<String> = s.iter().map(ToString::to_string).collect();
        assert_eq!(printed.join(","), "oracle,predicted,topx=3,dropx=0.5,noalign");
        assert!(AlignmentSetting::parse("dropx=1.5").is_err());
        assert!(AlignmentSetting::parse("topk=2").is_err());
    }

    #[test]
    fn predicted_trace_matches_graph_walk() {
        let b = bundle();
        let qs = generate_questions(&b, 5, Split::Train, 2).unwrap();
        let preds = fake_predictions(&b, &qs);
        let k = 4;
        for q in &qs {
            let dir = q.category.direction;
            let t = retrieve(q, AlignmentSetting::Predicted, &b, &preds, k, 0, 0).unwrap();
            let first: BTreeSet<EntityId> = preds[&q.query_id].iter().take(k).copied().collect();
            let mut expected = first.clone();
            if q.hops == 2 {
                for &e in &first {
                    expected.extend(neighbors_by_edge_list(&b, dir, e));
                }
            }
            let got: BTreeSet<EntityId> = t.evidence.iter().map(|e| e.0).collect();
            assert_eq!(got, expected);
            let pool = b.pool(q.source_id, dir);
            assert_eq!(t.cross_system_hit, first.iter().any(|e| pool.contains(e)));
            let hit = q.gold_ids.iter().filter(|g| expected.contains(g)).count();
            assert_eq!(t.evidence_recall, hit as f64 / q.gold_ids.len() as f64);
        }
    }

    #[test]
    fn oracle_and_noalign_extremes() {
        let b = bundle();
        let qs = generate_questions(&b, 5, Split::Train, 2).unwrap();
        let preds = fake_predictions(&b, &qs);
        let oracle = sweep_settings(&b, &qs, &preds, &[AlignmentSetting::Oracle], 10, 0, 1).unwrap();
        assert!(oracle.rows.iter().all(|r| r.evidence_recall == 1.0 && r.cross_system_hit_rate == 1.0));
        let none = run_setting(&qs, AlignmentSetting::NoAlign, &b, &Predictions::new(), 10, 0, 1).unwrap();
        assert!(none.iter().all(|t| t.evidence.is_empty() && !t.cross_system_hit));
        let rows = rag_metrics(&none).unwrap();
        assert!(rows.iter().all(|r| r.evidence_recall == 0.0 && r.cross_system_hit_rate == 0.0));
    }

    #[test]
    fn truncation_and_removal_laws() {
        let b = bundle();
        let qs = generate_questions(&b, 5, Split::Train, 2).unwrap();
        let preds = fake_predictions(&b, &qs);
        let k = 10;
        let mut settings: Vec<_> = (1..=10).map(AlignmentSetting::TopX).collect();
        settings.push(AlignmentSetting::Predicted);
        for r in [0.0, 0.25, 0.5, 0.75, 1.0] {
            settings.push(AlignmentSetting::DropX(r));
        }
        let report = sweep_settings(&b, &qs, &preds, &settings, k, 3, 5).unwrap();
        let overall = |s| report.overall(s).unwrap().clone();
        for x in 1..10 {
            let (a, c) = (overall(AlignmentSetting::TopX(x)), overall(AlignmentSetting::TopX(x + 1)));
            assert!(a.evidence_recall <= c.evidence_recall && a.cross_system_hit_rate <= c.cross_system_hit_rate);
        }
        let full = overall(AlignmentSetting::TopX(10));
        let pred = overall(AlignmentSetting::Predicted);
        assert_eq!((full.evidence_recall, full.cross_system_hit_rate), (pred.evidence_recall, pred.cross_system_hit_rate));
        let zero = overall(AlignmentSetting::DropX(0.0));
        assert_eq!((zero.evidence_recall, zero.cross_system_hit_rate), (pred.evidence_recall, pred.cross_system_hit_rate));
        let drops: Vec<f64> =
            [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&r| overall(AlignmentSetting::DropX(r)).evidence_recall).collect();
        assert!(drops.windows(2).all(|w| w[1] <= w[0]), "{drops:?}");
        assert_eq!(*drops.last().unwrap(), 0.0);
    }

    #[test]
    fn dropx_removes_exact_count_and_nests() {
        let b = bundle();
        let qs = generate_questions(&b, 5, Split::Train, 2).unwrap();
        let preds = fake_predictions(&b, &qs);
        let q = &qs[0];
        let mut prev: Option<BTreeSet<EntityId>> = None;
        for r in [0.0, 0.3, 0.5, 0.9] {
            let t = retrieve(&Question { hops: 1, ..q.clone() }, AlignmentSetting::DropX(r), &b, &preds, 10, 4, 2).unwrap();
            assert_eq!(t.evidence.len(), 10 - (r * 10.0 + 1e-9).floor() as usize);
            let kept: BTreeSet<_> = t.evidence.iter().map(|e| e.0).collect();
            if let Some(p) = &prev {
                assert!(kept.is_subset(p));
            }
            prev = Some(kept);
        }
    }

    #[test]
    fn metrics_match_hand_computation() {
        let cat = |hops, t: &str| Category { direction: Direction::TcmToWm, hops, source_type: t.into() };
        let trace = |c: Category, recall, hit| RagTrace {
            question: 0,
            category: c,
            setting: "predicted".into(),
            trial: 0,
            evidence: Vec::new(),
            cross_system_hit: hit,
            evidence_recall: recall,
        };
        let traces = vec![
            trace(cat(1, "a"), 1.0, true),
            trace(cat(1, "a"), 0.5, true),
            trace(cat(1, "a"), 0.0, false),
            trace(cat(2, "a"), 0.25, true),
        ];
        let rows = rag_metrics(&traces).unwrap();
        assert_eq!(rows[0].category, "overall");
        assert!((rows[1].evidence_recall - 0.5).abs() < 1e-15);
        assert!((rows[1].cross_system_hit_rate - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rows[2].evidence_recall, 0.25);
        assert!((rows[0].evidence_recall - 0.375).abs() < 1e-15);
        assert!((rows[0].cross_system_hit_rate - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        assert!(rag_metrics(&[]).is_err());
    }
}
