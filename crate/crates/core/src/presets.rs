//! Named bundles of generator, architecture and training defaults.

use serde::{Deserialize, Serialize};

use crate::baselines::SourceInput;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::TuckerRanks;
use crate::pipeline::{Method, MethodConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub synthetic: SyntheticSpec,
    pub model: MethodConfig,
    pub train: TrainConfig,
    pub questions_per_category: usize,
}

pub const PRESET_NAMES: [&str; 5] = ["tiny", "small", "context", "rotation", "paper-scale-synthetic"];

fn method(dim: usize, ranks: TuckerRanks) -> MethodConfig {
    MethodConfig { method: Method::Qcea, dim, ranks, gcn_layers: 2, source_input: SourceInput::Query }
}

/// 200 entities per side, σ = 0.05, 20% many-to-many anchors.
fn small() -> Preset {
    Preset {
        name: "small".into(),
        synthetic: SyntheticSpec {
            tcm_entities: 200,
            wm_entities: 200,
            anchor_pairs: 160,
            many_to_many_fraction: 0.2,
            latent_dim: 16,
            query_dim: 48,
            tcm_dim: 48,
            wm_dim: 64,
            noise: 0.05,
            ..SyntheticSpec::default()
        },
        model: method(64, TuckerRanks::new(4, 32, 32)),
        train: TrainConfig { epochs: 300, batch_size: 32, negatives: 256, lr: 5e-3, ..TrainConfig::default() },
        questions_per_category: 10,
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    Ok(match name {
        "tiny" => Preset {
            name: name.into(),
            synthetic: SyntheticSpec {
                tcm_entities: 30,
                wm_entities: 30,
                anchor_pairs: 24,
                many_to_many_fraction: 0.2,
                latent_dim: 8,
                query_dim: 12,
                tcm_dim: 12,
                wm_dim: 16,
                noise: 0.0,
                ..SyntheticSpec::default()
            },
            model: method(16, TuckerRanks::new(2, 8, 8)),
            train: TrainConfig { epochs: 60, batch_size: 16, negatives: 64, lr: 1e-2, patience: 20, ..TrainConfig::default() },
            questions_per_category: 2,
        },
        "small" => small(),
        "context" => {
            let base = small();
            Preset {
                name: name.into(),
                synthetic: SyntheticSpec { context_split_sources: 40, descriptions_per_split: 2, ..base.synthetic },
                ..base
            }
        }
        "rotation" => Preset {
            name: name.into(),
            synthetic: SyntheticSpec {
                tcm_entities: 60,
                wm_entities: 60,
                anchor_pairs: 50,
                many_to_many_fraction: 0.0,
                latent_dim: 16,
                query_dim: 16,
                tcm_dim: 16,
                wm_dim: 16,
                noise: 0.0,
                group_jitter: 0.0,
                ..SyntheticSpec::default()
            },
            model: method(16, TuckerRanks::new(2, 8, 8)),
            train: TrainConfig { epochs: 60, batch_size: 16, negatives: 64, lr: 1e-2, ..TrainConfig::default() },
            questions_per_category: 5,
        },
        "paper-scale-synthetic" => Preset {
            name: name.into(),
            synthetic: SyntheticSpec {
                tcm_entities: 2000,
                wm_entities: 2000,
                anchor_pairs: 1600,
                context_split_sources: 100,
                latent_dim: 64,
                query_dim: 256,
                tcm_dim: 256,
                wm_dim: 256,
                ..SyntheticSpec::default()
            },
            model: method(256, TuckerRanks::new(16, 128, 128)),
            train: TrainConfig::default(),
            questions_per_category: 50,
        },
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset {name:?}; expected one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    })
}
