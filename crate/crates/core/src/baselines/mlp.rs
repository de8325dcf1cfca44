//! Feed-forward matcher over concatenated source and target embeddings.
//!
//! One network per direction: `[src; tgt] → ReLU(h) → ReLU(h) → scalar`.
//! The first layer is split into a source part and a target part, so target
//! projections are computed once and shared by every pair.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SourceInput;
use crate::autodiff::{LossGroup, NodeId, Tape};
use crate::data::{DatasetBundle, QueryInstance};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::graph::{Direction, Side};
use crate::model::{init_store, ParamStore, TensorSpec};
use crate::rng::{substream, Stream};
use crate::training::{TrainBatch, Trainable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: usize,
    pub input: SourceInput,
    pub d_q: usize,
    pub d_t: usize,
    pub d_w: usize,
}

impl MlpConfig {
    fn side_dim(&self, side: Side) -> usize {
        match side {
            Side::Tcm => self.d_t,
            Side::Wm => self.d_w,
        }
    }

    fn source_dim(&self, dir: Direction) -> usize {
        match self.input {
            SourceInput::Query => self.d_q,
            SourceInput::Entity => self.side_dim(dir.source_side()),
        }
    }

    pub fn layout(&self) -> Vec<(String, TensorSpec)> {
        let h = self.hidden;
        let bias = |c| TensorSpec { rows: 1, cols: c, fan_in: 0, fan_out: 0 };
        let mut out = Vec::new();
        for dir in [Direction::TcmToWm, Direction::WmToTcm] {
            let s = dir.bit();
            let d_src = self.source_dim(dir);
            let d_tgt = self.side_dim(dir.target_side());
            let fan_in = d_src + d_tgt;
            out.extend([
                (format!("mlp{s}_W1s"), TensorSpec { rows: h, cols: d_src, fan_in, fan_out: h }),
                (format!("mlp{s}_W1t"), TensorSpec { rows: h, cols: d_tgt, fan_in, fan_out: h }),
                (format!("mlp{s}_b1"), bias(h)),
                (format!("mlp{s}_W2"), TensorSpec::matrix(h, h)),
                (format!("mlp{s}_b2"), bias(h)),
                (format!("mlp{s}_w3"), TensorSpec::matrix(1, h)),
                (format!("mlp{s}_b3"), bias(1)),
            ]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpMatcher {
    pub config: MlpConfig,
    pub params: ParamStore,
}

fn source_rows(input: SourceInput, bundle: &DatasetBundle, dir: Direction, queries: &[&QueryInstance]) -> Result<DMatrix<f64>> {
    match input {
        SourceInput::Query => bundle.query_matrix(queries),
        SourceInput::Entity => bundle.source_entity_matrix(queries, dir),
    }
}

impl MlpMatcher {
    pub fn new(config: MlpConfig, seed: u64) -> Result<MlpMatcher> {
        if config.hidden == 0 {
            return Err(Error::InvalidArgument("hidden width must be positive".into()));
        }
        let params = init_store(&mut substream(seed, Stream::Init), &config.layout());
        Ok(MlpMatcher { config, params })
    }

    pub fn from_params(config: MlpConfig, params: ParamStore) -> Result<MlpMatcher> {
        for (name, spec) in config.layout() {
            match params.by_name(&name) {
                Some(p) if p.shape() == (spec.rows, spec.cols) => {}
                _ => return Err(Error::Checkpoint(format!("tensor {name} missing or misshapen"))),
            }
        }
        Ok(MlpMatcher { config, params })
    }

    fn slot(&self, dir: Direction, name: &str) -> usize {
        self.params.index_of(&format!("mlp{}_{name}", dir.bit())).expect("layout tensor")
    }

    fn get(&self, dir: Direction, name: &str) -> &DMatrix<f64> {
        self.params.get(self.slot(dir, name))
    }
}

impl Scorer for MlpMatcher {
    fn score_matrix(&self, bundle: &DatasetBundle, dir: Direction, queries: &[&QueryInstance]) -> Result<DMatrix<f64>> {
        let src = source_rows(self.config.input, bundle, dir, queries)? * self.get(dir, "W1s").transpose();
        let tgt = bundle.features(dir.target_side()) * self.get(dir, "W1t").transpose();
        let (b1, w2, b2, w3) = (self.get(dir, "b1"), self.get(dir, "W2"), self.get(dir, "b2"), self.get(dir, "w3"));
        let b3 = self.get(dir, "b3")[(0, 0)];
        let n = tgt.nrows();
        let rows: Vec<Vec<f64>> = (0..queries.len())
            .into_par_iter()
            .map(|i| {
                let mut h1 = tgt.clone();
                let shift = src.row(i) + b1;
                for mut row in h1.row_iter_mut() {
                    row += &shift;
                }
                let h1 = h1.map(|x| x.max(0.0));
                let mut h2 = h1 * w2.transpose();
                for mut row in h2.row_iter_mut() {
                    row += b2;
                }
                let h2 = h2.map(|x| x.max(0.0));
                (h2 * w3.transpose()).iter().map(|v| v + b3).collect()
            })
            .collect();
        Ok(DMatrix::from_fn(queries.len(), n, |i, j| rows[i][j]))
    }
}

impl Trainable for MlpMatcher {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn record_batch<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bundle: &'a DatasetBundle,
        batch: &TrainBatch,
    ) -> Result<(NodeId, Vec<LossGroup>)> {
        let dir = batch.direction;
        let queries = batch
            .items
            .iter()
            .map(|it| bundle.query(it.query).ok_or_else(|| Error::InvalidArgument(format!("unknown query {}", it.query))))
            .collect::<Result<Vec<_>>>()?;
        let target = bundle.target_graph(dir);
        let mut pairs = Vec::new();
        let mut groups = Vec::with_capacity(batch.items.len());
        for (k, item) in batch.items.iter().enumerate() {
            let mut span = |ids: &[crate::graph::EntityId]| {
                let start = pairs.len();
                pairs.extend(ids.iter().map(|id| (k, target.index_of(*id).expect("sampled ids exist"))));
                (start..pairs.len()).collect::<Vec<_>>()
            };
            let pos = span(&item.positives);
            let neg = span(&item.negatives);
            groups.push(LossGroup { pos, neg });
        }

        let src = tape.constant(source_rows(self.config.input, bundle, dir, &queries)?);
        let tgt = tape.constant(bundle.features(dir.target_side()).clone());
        let w1s = tape.param(self.slot(dir, "W1s"));
        let w1t = tape.param(self.slot(dir, "W1t"));
        let a = tape.matmul_bt(src, w1s)?;
        let t = tape.matmul_bt(tgt, w1t)?;
        let pre = tape.pairwise_add(a, t, pairs)?;
        let b1 = tape.param(self.slot(dir, "b1"));
        let pre = tape.add_row_bias(pre, b1)?;
        let h1 = tape.relu(pre);
        let w2 = tape.param(self.slot(dir, "W2"));
        let pre2 = tape.matmul_bt(h1, w2)?;
        let b2 = tape.param(self.slot(dir, "b2"));
        let pre2 = tape.add_row_bias(pre2, b2)?;
        let h2 = tape.relu(pre2);
        let w3 = tape.param(self.slot(dir, "w3"));
        let out = tape.matmul_bt(h2, w3)?;
        let b3 = tape.param(self.slot(dir, "b3"));
        let scores = tape.add_row_bias(out, b3)?;
        Ok((scores, groups))
    }
}
