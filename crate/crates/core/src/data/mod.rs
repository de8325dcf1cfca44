//! Precomputed embeddings, dataset bundles, splits and the synthetic
//! benchmark generator.

mod bundle;
mod embedding;
mod io;
mod synth;

pub use bundle::{split_anchors, DatasetBundle, QueryId, QueryInstance, Split, SplitAssignment};
pub use embedding::EmbeddingTable;
pub use io::{load_bundle, save_bundle, BundleFiles, EmbeddingFormat};
pub use synth::{generate_synthetic, TypeFamily, SyntheticSpec};
