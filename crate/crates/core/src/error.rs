use std::path::PathBuf;

use thiserror::Error;

use crate::graph::{Direction, EntityId, Side};
use crate::model::ParamStore;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} line {line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("{side} graph: edge ({a}, {b}) references an entity that does not exist")]
    DanglingEdge { side: Side, a: EntityId, b: EntityId },

    #[error("{side} graph: self-edge on entity {id}")]
    SelfEdge { side: Side, id: EntityId },

    #[error("{side} graph: duplicate edge ({a}, {b})")]
    DuplicateEdge { side: Side, a: EntityId, b: EntityId },

    #[error("{side} graph: duplicate entity id {id}")]
    DuplicateEntity { side: Side, id: EntityId },

    #[error("{side} graph: entity {id} has an empty {field}")]
    EmptyField { side: Side, id: EntityId, field: &'static str },

    #[error("duplicate anchor pair ({tcm}, {wm})")]
    DuplicateAnchor { tcm: EntityId, wm: EntityId },

    #[error("entity {id} is on the {side} side, but direction {direction} expects a {expected} source")]
    DirectionMismatch { id: EntityId, side: Side, direction: Direction, expected: Side },

    #[error("unknown type tag {tag:?} for direction {direction}")]
    UnknownTypeTag { tag: String, direction: Direction },

    #[error("unknown {side} entity id {id} ({context})")]
    UnknownEntity { side: Side, id: EntityId, context: String },

    #[error("{table} embedding table: expected dim {expected}, found {found} (row {id})")]
    DimensionMismatch { table: String, expected: usize, found: usize, id: u64 },

    #[error("{table} embedding table: missing row for id {id}")]
    MissingEmbeddingRow { table: String, id: u64 },

    #[error("{table} embedding table: row {id} is not referenced by any entity or query")]
    OrphanEmbeddingRow { table: String, id: u64 },

    #[error("{table} embedding table: row {id} has a non-finite component")]
    NonFiniteEmbedding { table: String, id: u64 },

    #[error("split assignment does not cover anchor pair ({tcm}, {wm})")]
    SplitMismatch { tcm: EntityId, wm: EntityId },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate vector norm in {0}")]
    DegenerateNorm(&'static str),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String, params: Box<ParamStore> },

    #[error("model too large for exhaustive finite differences: {count} parameters (limit {limit})")]
    TooLarge { count: usize, limit: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(file: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { file: file.into(), line, msg: msg.into() }
    }
}
