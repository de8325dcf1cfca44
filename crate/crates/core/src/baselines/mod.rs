//! Comparison methods sharing the dataset, sampling and evaluation protocol.
//!
//! [`ProcrustesModel`] only sees entity embeddings. [`MlpMatcher`] and
//! [`BiEncoder`] read either query-instance embeddings or, in
//! [`SourceInput::Entity`] mode, the source entity's own embedding; the entity
//! variants rank every description of one entity identically.

mod biencoder;
mod mlp;
mod procrustes;

use serde::{Deserialize, Serialize};

pub use biencoder::{BiEncoder, BiEncoderConfig};
pub use mlp::{MlpConfig, MlpMatcher};
pub use procrustes::{orthogonal_procrustes, Pca, ProcrustesModel};

/// What the source side of a baseline reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceInput {
    Query,
    Entity,
}
