//! Distributed numerical routines over block-row matrices.
//!
//! Each routine runs SPMD: every rank calls it with its own [`LocalBlock`]
//! and the group's [`Comm`]. Communication is limited to all-reduce,
//! broadcast, all-gather and barrier. Small replicated state (d- or
//! n-vectors, the CG solution, Lanczos basis) lives on every rank and stays
//! bit-identical across ranks.

mod cg;
mod features;
mod svd;
mod tsqr;

pub use cg::{cg_solve, CgReport, RidgeParams};
pub use features::{random_features, RandomFeatureMap, RandomFeatureParams};
pub use svd::{truncated_svd, SvdOutput, SvdParams};
pub use tsqr::{tsqr, TsqrOutput};

use thiserror::Error;

use crate::collective::CollectiveError;

#[derive(Debug, Error)]
pub enum SolverError {
    /// Bad parameters or input shapes; reported as a schema violation.
    #[error("invalid arguments: {0}")]
    InvalidArguments(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("resource exhausted: {0}")]
    Resource(String),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
}

/// One rank's rows of a distributed matrix.
#[derive(Debug, Clone, Copy)]
pub struct LocalBlock<'a> {
    /// Global index of the first local row.
    pub row_start: u64,
    /// Global row count of the distributed matrix.
    pub global_rows: u64,
    pub cols: usize,
    /// Row-major `rows() × cols` values.
    pub data: &'a [f64],
}

impl<'a> LocalBlock<'a> {
    pub fn new(row_start: u64, global_rows: u64, cols: usize, data: &'a [f64]) -> Self {
        assert!(cols > 0 && data.len().is_multiple_of(cols));
        LocalBlock {
            row_start,
            global_rows,
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

/// Local half of the Gram product: `out = Xᵀ (X P)` for this rank's rows.
///
/// `p` is `d × a` row-major, `out` is `d × a`; `scratch` holds one row of
/// `X P`. Each output column only depends on the matching column of `p`, so
/// results do not change with how columns are packed.
pub(crate) fn local_gram_apply(x: &LocalBlock<'_>, p: &[f64], a: usize, out: &mut [f64], scratch: &mut Vec<f64>) {
    let d = x.cols;
    debug_assert_eq!(p.len(), d * a);
    out.fill(0.0);
    scratch.resize(a, 0.0);
    for i in 0..x.rows() {
        let row = x.row(i);
        let t = &mut scratch[..];
        t.fill(0.0);
        for (k, &xik) in row.iter().enumerate() {
            if xik != 0.0 {
                crate::linalg::axpy(xik, &p[k * a..(k + 1) * a], t);
            }
        }
        for (k, &xik) in row.iter().enumerate() {
            if xik != 0.0 {
                crate::linalg::axpy(xik, t, &mut out[k * a..(k + 1) * a]);
            }
        }
    }
}

/// Slices rows `[start, end)` out of a replicated row-major matrix.
pub(crate) fn slice_rows(full: &[f64], cols: usize, start: u64, end: u64) -> Vec<f64> {
    full[start as usize * cols..end as usize * cols].to_vec()
}
