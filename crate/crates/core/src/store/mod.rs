//! Server-side distributed dense matrices: block-row layouts, per-worker
//! shards and the driver's handle registry.

mod layout;
mod registry;
mod shard;

pub use layout::{plan_layout, route_rows, Layout};
pub use registry::{HandleRegistry, MatrixRecord, MatrixState};
pub use shard::Shard;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("row {row} is outside a matrix of {rows} rows")]
    RowOutOfBounds { row: u64, rows: u64 },
    #[error("row {row} is not in this shard's range [{owned_start}, {owned_end})")]
    RowNotOwned { row: u64, owned_start: u64, owned_end: u64 },
    #[error("rows [{row_start}, +{row_count}) are not within [{owned_start}, {owned_end})")]
    NotOwned {
        row_start: u64,
        row_count: usize,
        owned_start: u64,
        owned_end: u64,
    },
    #[error("row {row} has {got} values, expected {expected}")]
    WrongWidth { row: u64, expected: usize, got: usize },
    #[error("row {0} was already received")]
    DuplicateRow(u64),
    #[error("matrix {matrix_id} is incomplete: {missing} row(s) missing")]
    Incomplete { matrix_id: u64, missing: usize },
    #[error("unknown matrix {0}")]
    UnknownMatrix(u64),
    #[error("matrix {0} is not ready")]
    NotReady(u64),
    #[error("not enough memory: {required} bytes required, {available} available")]
    Exhausted { required: u64, available: u64 },
    #[error("invalid layout: {0}")]
    BadLayout(String),
}
