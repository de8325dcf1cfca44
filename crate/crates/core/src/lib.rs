//! Query-conditioned entity alignment between two heterogeneous knowledge graphs.
//!
//! The crate trains a direction-aware ranking model that scores candidate
//! target entities against a textual query describing a source entity, using
//! precomputed text embeddings, a shared graph encoder, and a Tucker-factorized
//! target projection. It also ships the grouped multi-positive evaluation
//! protocol, classical baselines, and a deterministic evidence-retrieval
//! simulator that measures how alignment quality propagates downstream.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`graph`] | entities, graphs, anchors, directions, normalized adjacency |
//! | [`data`] | embedding tables, dataset bundles, splits, synthetic generator |
//! | [`model`] | parameters and forward passes, checkpoints |
//! | [`autodiff`] | matrix tape, Adam, finite-difference checks |
//! | [`training`] | sampling, multi-positive loss, training loop |
//! | [`eval`] | ranking, Hit@K / Recall@K / MRR, stratified reports, sweeps |
//! | [`baselines`] | Procrustes, MLP matcher, bi-encoder |
//! | [`rag`] | question generation, evidence retrieval, retrieval metrics |
//! | [`pipeline`] | method selection, fitting, checkpoint envelopes |
//! | [`presets`] | named generator, architecture and training defaults |
//! | [`rng`] | seeded random substreams |

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod presets;
pub mod rag;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Direction, EntityId, EntityKey, Side};
