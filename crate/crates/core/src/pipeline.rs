//! Method selection, fitting and checkpoint envelopes shared by the CLI and
//! the experiment harnesses.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::AdamState;
use crate::baselines::{BiEncoder, BiEncoderConfig, MlpConfig, MlpMatcher, ProcrustesModel, SourceInput};
use crate::data::{DatasetBundle, QueryInstance, Split};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::graph::{Direction, EntityId};
use crate::model::{init_params, Checkpoint, ModelConfig, QceaModel, TuckerRanks};
use crate::training::{fit, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Qcea,
    Procrustes,
    Mlp,
    BiEncoder,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Qcea, Method::Procrustes, Method::Mlp, Method::BiEncoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Qcea => "qcea",
            Method::Procrustes => "procrustes",
            Method::Mlp => "mlp",
            Method::BiEncoder => "biencoder",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Architecture choices for any method; fields a method does not use are
/// ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub dim: usize,
    pub ranks: TuckerRanks,
    pub gcn_layers: usize,
    /// Source input of the MLP and bi-encoder baselines.
    pub source_input: SourceInput,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            method: Method::Qcea,
            dim: 256,
            ranks: TuckerRanks::new(16, 128, 128),
            gcn_layers: 2,
            source_input: SourceInput::Query,
        }
    }
}

/// A fitted model of any method.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Qcea(QceaModel),
    Procrustes(ProcrustesModel),
    Mlp(MlpMatcher),
    BiEncoder(BiEncoder),
}

impl FittedModel {
    pub fn method(&self) -> Method {
        match self {
            FittedModel::Qcea(_) => Method::Qcea,
            FittedModel::Procrustes(_) => Method::Procrustes,
            FittedModel::Mlp(_) => Method::Mlp,
            FittedModel::BiEncoder(_) => Method::BiEncoder,
        }
    }

    /// Whether every description of one source entity receives the same
    /// ranking by construction.
    pub fn is_entity_level(&self) -> bool {
        match self {
            FittedModel::Qcea(_) => false,
            FittedModel::Procrustes(_) => true,
            FittedModel::Mlp(m) => m.config.input == SourceInput::Entity,
            FittedModel::BiEncoder(m) => m.config.input == SourceInput::Entity,
        }
    }

    pub fn to_checkpoint(&self, adam: Option<AdamState>) -> Checkpoint {
        let (config_json, params) = match self {
            FittedModel::Qcea(m) => (serde_json::to_string(&m.config), m.params.clone()),
            FittedModel::Procrustes(m) => (Ok("{}".to_string()), m.to_params()),
            FittedModel::Mlp(m) => (serde_json::to_string(&m.config), m.params.clone()),
            FittedModel::BiEncoder(m) => (serde_json::to_string(&m.config), m.params.clone()),
        };
        Checkpoint {
            method: self.method().as_str().to_string(),
            config_json: config_json.expect("configs serialize"),
            params,
            adam,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<FittedModel> {
        let method: Method = ckpt.method.parse().map_err(|_| Error::Checkpoint(format!("unknown method tag {:?}", ckpt.method)))?;
        let bad = |e: serde_json::Error| Error::Checkpoint(format!("config: {e}"));
        let params = ckpt.params.clone();
        Ok(match method {
            Method::Qcea => {
                FittedModel::Qcea(QceaModel::from_params(serde_json::from_str(&ckpt.config_json).map_err(bad)?, params)?)
            }
            Method::Procrustes => FittedModel::Procrustes(ProcrustesModel::from_params(&params)?),
            Method::Mlp => FittedModel::Mlp(MlpMatcher::from_params(serde_json::from_str(&ckpt.config_json).map_err(bad)?, params)?),
            Method::BiEncoder => {
                FittedModel::BiEncoder(BiEncoder::from_params(serde_json::from_str(&ckpt.config_json).map_err(bad)?, params)?)
            }
        })
    }

    /// Rejects a model whose input dimensions differ from the bundle's.
    pub fn check_bundle(&self, bundle: &DatasetBundle) -> Result<()> {
        let (d_q, d_t, d_w) = bundle.dims();
        let expected = match self {
            FittedModel::Qcea(m) => return m.config.check_bundle(bundle),
            FittedModel::Procrustes(m) => {
                let k = m.map.nrows();
                let ok = match &m.pca {
                    None => d_t == k && d_w == k,
                    Some([t, w]) => t.components.nrows() == d_t && w.components.nrows() == d_w,
                };
                if ok {
                    return Ok(());
                }
                return Err(Error::Shape(format!("procrustes map of size {k} does not fit dims ({d_t}, {d_w})")));
            }
            FittedModel::Mlp(m) => (m.config.d_q, m.config.d_t, m.config.d_w),
            FittedModel::BiEncoder(m) => (m.config.d_q, m.config.d_t, m.config.d_w),
        };
        if expected != (d_q, d_t, d_w) {
            return Err(Error::Shape(format!("model expects input dims {expected:?}, bundle has {:?}", (d_q, d_t, d_w))));
        }
        Ok(())
    }
}

impl Scorer for FittedModel {
    fn score_matrix(&self, bundle: &DatasetBundle, dir: Direction, queries: &[&QueryInstance]) -> Result<DMatrix<f64>> {
        match self {
            FittedModel::Qcea(m) => m.score_matrix(bundle, dir, queries),
            FittedModel::Procrustes(m) => m.score_matrix(bundle, dir, queries),
            FittedModel::Mlp(m) => m.score_matrix(bundle, dir, queries),
            FittedModel::BiEncoder(m) => m.score_matrix(bundle, dir, queries),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: FittedModel,
    /// Absent for closed-form methods.
    pub outcome: Option<TrainOutcome>,
}

/// Fits `config.method` on the train split (optionally restricted to
/// `allowed` pairs). Initialization uses `train.seed`.
pub fn fit_method(
    bundle: &DatasetBundle,
    config: &MethodConfig,
    train: &TrainConfig,
    allowed: Option<&BTreeSet<(EntityId, EntityId)>>,
) -> Result<FitResult> {
    let (d_q, d_t, d_w) = bundle.dims();
    let trained = |model: FittedModel| -> Result<FitResult> {
        let mut model = model;
        let outcome = match &mut model {
            FittedModel::Qcea(m) => fit(m, bundle, train, allowed)?,
            FittedModel::Mlp(m) => fit(m, bundle, train, allowed)?,
            FittedModel::BiEncoder(m) => fit(m, bundle, train, allowed)?,
            FittedModel::Procrustes(_) => unreachable!("closed form"),
        };
        Ok(FitResult { model, outcome: Some(outcome) })
    };
    match config.method {
        Method::Qcea => {
            let mc = ModelConfig { gcn_layers: config.gcn_layers, ..ModelConfig::for_bundle(bundle, config.dim, config.ranks) };
            trained(FittedModel::Qcea(init_params(&mc, train.seed)?))
        }
        Method::Mlp => {
            let mc = MlpConfig { hidden: config.dim, input: config.source_input, d_q, d_t, d_w };
            trained(FittedModel::Mlp(MlpMatcher::new(mc, train.seed)?))
        }
        Method::BiEncoder => {
            let bc = BiEncoderConfig { d: config.dim, input: config.source_input, d_q, d_t, d_w };
            trained(FittedModel::BiEncoder(BiEncoder::new(bc, train.seed)?))
        }
        Method::Procrustes => {
            let pairs: Vec<_> = bundle
                .splits()
                .pairs_in(Split::Train)
                .filter(|p| allowed.is_none_or(|a| a.contains(p)))
                .collect();
            Ok(FitResult { model: FittedModel::Procrustes(ProcrustesModel::fit(bundle, &pairs)?), outcome: None })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn bundle() -> DatasetBundle {
        let spec = SyntheticSpec {
            tcm_entities: 24,
            wm_entities: 24,
            anchor_pairs: 20,
            latent_dim: 4,
            query_dim: 5,
            tcm_dim: 6,
            wm_dim: 7,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, 1).unwrap()
    }

    #[test]
    fn checkpoints_round_trip_for_every_method() {
        let b = bundle();
        let train = TrainConfig { epochs: 2, negatives: 8, batch_size: 8, ..TrainConfig::default() };
        for method in Method::ALL {
            let cfg = MethodConfig { method, dim: 4, ranks: TuckerRanks::new(2, 3, 3), ..MethodConfig::default() };
            let fitted = fit_method(&b, &cfg, &train, None).unwrap();
            assert_eq!(fitted.outcome.is_none(), method == Method::Procrustes);
            let ckpt = fitted.model.to_checkpoint(None);
            let mut buf = Vec::new();
            ckpt.write_to(&mut buf).unwrap();
            let back = FittedModel::from_checkpoint(&Checkpoint::read_from(buf.as_slice()).unwrap()).unwrap();
            assert_eq!(back, fitted.model);
            back.check_bundle(&b).unwrap();
        }
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("transe".parse::<Method>().is_err());
    }
}
