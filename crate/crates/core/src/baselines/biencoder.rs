//! Text-only bi-encoder: independent linear encoders per input kind, cosine
//! similarity, no graph and no direction conditioning.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::SourceInput;
use crate::autodiff::{LossGroup, NodeId, Tape};
use crate::data::{DatasetBundle, QueryInstance};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::graph::{Direction, Side};
use crate::model::{init_store, ParamStore, TensorSpec};
use crate::rng::{substream, Stream};
use crate::training::{dense_groups, TrainBatch, Trainable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiEncoderConfig {
    pub d: usize,
    pub input: SourceInput,
    pub d_q: usize,
    pub d_t: usize,
    pub d_w: usize,
}

impl BiEncoderConfig {
    pub fn layout(&self) -> Vec<(String, TensorSpec)> {
        let mut out = Vec::new();
        if self.input == SourceInput::Query {
            out.push(("enc_query".to_string(), TensorSpec::matrix(self.d, self.d_q)));
        }
        out.push(("enc_tcm".to_string(), TensorSpec::matrix(self.d, self.d_t)));
        out.push(("enc_wm".to_string(), TensorSpec::matrix(self.d, self.d_w)));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoder {
    pub config: BiEncoderConfig,
    pub params: ParamStore,
}

fn side_encoder(side: Side) -> &'static str {
    match side {
        Side::Tcm => "enc_tcm",
        Side::Wm => "enc_wm",
    }
}

fn unit_rows(mut m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        if !(n > 0.0) {
            return Err(Error::DegenerateNorm("bi-encoder representation"));
        }
        row /= n;
    }
    Ok(m)
}

impl BiEncoder {
    pub fn new(config: BiEncoderConfig, seed: u64) -> Result<BiEncoder> {
        if config.d == 0 {
            return Err(Error::InvalidArgument("encoder dimension must be positive".into()));
        }
        let params = init_store(&mut substream(seed, Stream::Init), &config.layout());
        Ok(BiEncoder { config, params })
    }

    pub fn from_params(config: BiEncoderConfig, params: ParamStore) -> Result<BiEncoder> {
        for (name, spec) in config.layout() {
            match params.by_name(&name) {
                Some(p) if p.shape() == (spec.rows, spec.cols) => {}
                _ => return Err(Error::Checkpoint(format!("tensor {name} missing or misshapen"))),
            }
        }
        Ok(BiEncoder { config, params })
    }

    fn source_encoder(&self, dir: Direction) -> &'static str {
        match self.config.input {
            SourceInput::Query => "enc_query",
            SourceInput::Entity => side_encoder(dir.source_side()),
        }
    }

    fn source_rows(&self, bundle: &DatasetBundle, dir: Direction, queries: &[&QueryInstance]) -> Result<DMatrix<f64>> {
        match self.config.input {
            SourceInput::Query => bundle.query_matrix(queries),
            SourceInput::Entity => bundle.source_entity_matrix(queries, dir),
        }
    }

    fn encoder(&self, name: &str) -> &DMatrix<f64> {
        self.params.by_name(name).expect("layout tensor")
    }
}

impl Scorer for BiEncoder {
    fn score_matrix(&self, bundle: &DatasetBundle, dir: Direction, queries: &[&QueryInstance]) -> Result<DMatrix<f64>> {
        let src = unit_rows(self.source_rows(bundle, dir, queries)? * self.encoder(self.source_encoder(dir)).transpose())?;
        let side = dir.target_side();
        let tgt = unit_rows(bundle.features(side) * self.encoder(side_encoder(side)).transpose())?;
        Ok(src * tgt.transpose())
    }
}

impl Trainable for BiEncoder {
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
        let src = tape.constant(self.source_rows(bundle, dir, &queries)?);
        let enc_src = tape.param_named(self.source_encoder(dir))?;
        let s = tape.matmul_bt(src, enc_src)?;
        let s = tape.row_normalize(s, "bi-encoder representation")?;
        let side = dir.target_side();
        let tgt = tape.constant(bundle.features(side).clone());
        let enc_tgt = tape.param_named(side_encoder(side))?;
        let t = tape.matmul_bt(tgt, enc_tgt)?;
        let t = tape.row_normalize(t, "bi-encoder representation")?;
        let scores = tape.matmul_bt(s, t)?;
        Ok((scores, dense_groups(bundle, batch)))
    }
}
