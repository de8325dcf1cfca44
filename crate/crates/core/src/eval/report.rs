//! Stratified metric tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ranking::{hit_at_k, mrr, recall_at_k, RankedPrediction};
use crate::data::Split;
use crate::graph::{Direction, RetrievalMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stratum {
    #[serde(rename = "overall")]
    Overall,
    #[serde(rename = "tcm2wm")]
    TcmToWm,
    #[serde(rename = "wm2tcm")]
    WmToTcm,
    #[serde(rename = "gt=1")]
    Gt1,
    #[serde(rename = "gt>1")]
    GtMany,
}

impl Stratum {
    pub const ALL: [Stratum; 5] = [Stratum::Overall, Stratum::TcmToWm, Stratum::WmToTcm, Stratum::Gt1, Stratum::GtMany];

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::Overall => "overall",
            Stratum::TcmToWm => "tcm2wm",
            Stratum::WmToTcm => "wm2tcm",
            Stratum::Gt1 => "gt=1",
            Stratum::GtMany => "gt>1",
        }
    }

    pub fn contains(self, pred: &RankedPrediction) -> bool {
        match self {
            Stratum::Overall => true,
            Stratum::TcmToWm => pred.direction == Direction::TcmToWm,
            Stratum::WmToTcm => pred.direction == Direction::WmToTcm,
            Stratum::Gt1 => pred.ground_truth.len() == 1,
            Stratum::GtMany => pred.ground_truth.len() > 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMetrics {
    pub mode: RetrievalMode,
    pub stratum: Stratum,
    pub queries: usize,
    /// `(k, Hit@k)` in k-list order.
    pub hit: Vec<(usize, f64)>,
    /// `(k, Recall@k)` in k-list order.
    pub recall: Vec<(usize, f64)>,
    pub mrr: f64,
}

impl StratumMetrics {
    pub fn hit(&self, k: usize) -> Option<f64> {
        self.hit.iter().find(|(kk, _)| *kk == k).map(|p| p.1)
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|p| p.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: Split,
    pub k_list: Vec<usize>,
    pub rows: Vec<StratumMetrics>,
}

/// Macro average of `preds` (already in ascending query order).
fn aggregate(mode: RetrievalMode, stratum: Stratum, preds: &[&RankedPrediction], k_list: &[usize]) -> StratumMetrics {
    let n = preds.len() as f64;
    let mut hit = vec![0.0; k_list.len()];
    let mut recall = vec![0.0; k_list.len()];
    let mut rr = 0.0;
    for p in preds {
        for (i, &k) in k_list.iter().enumerate() {
            hit[i] += hit_at_k(p, k);
            recall[i] += recall_at_k(p, k).expect("evaluated queries have ground truth");
        }
        rr += mrr(p).expect("evaluated queries have ground truth");
    }
    StratumMetrics {
        mode,
        stratum,
        queries: preds.len(),
        hit: k_list.iter().zip(&hit).map(|(&k, &h)| (k, h / n)).collect(),
        recall: k_list.iter().zip(&recall).map(|(&k, &r)| (k, r / n)).collect(),
        mrr: rr / n,
    }
}

impl MetricReport {
    /// Builds every non-empty (mode, stratum) row.
    pub fn from_predictions(
        split: Split,
        preds: &BTreeMap<RetrievalMode, Vec<RankedPrediction>>,
        k_list: &[usize],
    ) -> MetricReport {
        let mut rows = Vec::new();
        for (&mode, list) in preds {
            let mut sorted: Vec<&RankedPrediction> = list.iter().filter(|p| !p.ground_truth.is_empty()).collect();
            sorted.sort_by_key(|p| p.query);
            for stratum in Stratum::ALL {
                let members: Vec<&RankedPrediction> = sorted.iter().copied().filter(|p| stratum.contains(p)).collect();
                if !members.is_empty() {
                    rows.push(aggregate(mode, stratum, &members, k_list));
                }
            }
        }
        MetricReport { split, k_list: k_list.to_vec(), rows }
    }

    pub fn get(&self, mode: RetrievalMode, stratum: Stratum) -> Option<&StratumMetrics> {
        self.rows.iter().find(|r| r.mode == mode && r.stratum == stratum)
    }

    /// Tab-separated table: mode, stratum, query count, Hit@k…, Recall@k…, MRR.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("mode\tstratum\tqueries");
        for k in &self.k_list {
            write!(out, "\tHit@{k}").unwrap();
        }
        for k in &self.k_list {
            write!(out, "\tRecall@{k}").unwrap();
        }
        out.push_str("\tMRR\n");
        for r in &self.rows {
            write!(out, "{}\t{}\t{}", r.mode, r.stratum.as_str(), r.queries).unwrap();
            for (_, v) in r.hit.iter().chain(&r.recall) {
                write!(out, "\t{v:.4}").unwrap();
            }
            writeln!(out, "\t{:.4}", r.mrr).unwrap();
        }
        out
    }

    /// One JSON object per row with full-precision values.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let mut obj = serde_json::Map::new();
            obj.insert("split".into(), self.split.as_str().into());
            obj.insert("mode".into(), r.mode.as_str().into());
            obj.insert("stratum".into(), r.stratum.as_str().into());
            obj.insert("queries".into(), r.queries.into());
            for (k, v) in &r.hit {
                obj.insert(format!("hit@{k}"), (*v).into());
            }
            for (k, v) in &r.recall {
                obj.insert(format!("recall@{k}"), (*v).into());
            }
            obj.insert("mrr".into(), r.mrr.into());
            out.push_str(&serde_json::Value::Object(obj).to_string());
            out.push('\n');
        }
        out
    }
}
