//! Seed-ratio sweeps: retrain on nested fractions of the training anchors.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::{evaluate, EvalConfig, MetricReport, Scorer};
use crate::data::{DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::graph::EntityId;
use crate::rng::{substream, Stream};

pub type PairSet = BTreeSet<(EntityId, EntityId)>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioResult {
    pub ratio: f64,
    pub train_pairs: usize,
    pub report: MetricReport,
}

/// The first `⌊ratio·n⌋` train pairs of one seeded permutation, so the
/// subsets for increasing ratios are nested. Val and test are untouched.
pub fn subsample_train_pairs(bundle: &DatasetBundle, ratio: f64, seed: u64) -> Result<PairSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("seed ratio must lie in (0, 1], got {ratio}")));
    }
    let mut pairs: Vec<_> = bundle.splits().pairs_in(Split::Train).collect();
    pairs.sort();
    pairs.shuffle(&mut substream(seed, Stream::SeedRatio));
    let keep = (ratio * pairs.len() as f64 + 1e-9).floor() as usize;
    Ok(pairs.into_iter().take(keep).collect())
}

/// For each ratio, fits a fresh model on the subsampled train pairs via
/// `fit` and evaluates it. Ratios that leave no train pair are skipped with
/// a warning.
pub fn seed_ratio_sweep<S: Scorer>(
    bundle: &DatasetBundle,
    ratios: &[f64],
    seed: u64,
    eval: &EvalConfig,
    mut fit: impl FnMut(&PairSet) -> Result<S>,
) -> Result<Vec<RatioResult>> {
    let mut out = Vec::new();
    for &ratio in ratios {
        let pairs = subsample_train_pairs(bundle, ratio, seed)?;
        if pairs.is_empty() {
            log::warn!("seed ratio {ratio} leaves no training pairs; skipped");
            continue;
        }
        let model = fit(&pairs)?;
        let report = evaluate(&model, bundle, eval)?;
        out.push(RatioResult { ratio, train_pairs: pairs.len(), report });
    }
    Ok(out)
}
