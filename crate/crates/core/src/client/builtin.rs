use super::{ClientError, LibraryRef, MatrixHandle, Session, TaskOutput};
use crate::protocol::ParamMap;

/// Typed stubs for the server's built-in routines.
pub struct Builtin<'s> {
    session: &'s Session,
    lib: LibraryRef,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: i64,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            lambda: 1e-5,
            tol: 1e-12,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSummary {
    /// Shared blocked iterations.
    pub iterations: i64,
    pub column_iterations: Vec<i64>,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub iter_time_mean: f64,
    pub iter_time_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SvdOptions {
    pub tol: Option<f64>,
    pub max_subspace: Option<i64>,
    pub seed: i64,
}

#[derive(Debug)]
pub struct SvdResult {
    pub u: MatrixHandle,
    pub s: Vec<f64>,
    pub v: MatrixHandle,
    pub unreliable: Vec<bool>,
    pub ritz_residuals: Vec<f64>,
    pub basis_size: i64,
}

fn missing(key: &str) -> ClientError {
    ClientError::BadReply(format!("result is missing scalar {key:?}"))
}

fn two(out: TaskOutput) -> Result<(MatrixHandle, MatrixHandle, ParamMap), ClientError> {
    let mut it = out.outputs.into_iter();
    match (it.next(), it.next(), it.next()) {
        (Some(a), Some(b), None) => Ok((a, b, out.scalars)),
        _ => Err(ClientError::BadReply("expected two outputs".into())),
    }
}

fn one(out: TaskOutput) -> Result<(MatrixHandle, ParamMap), ClientError> {
    let mut it = out.outputs.into_iter();
    match (it.next(), it.next()) {
        (Some(a), None) => Ok((a, out.scalars)),
        _ => Err(ClientError::BadReply("expected one output".into())),
    }
}

impl<'s> Builtin<'s> {
    pub fn new(session: &'s Session, lib: LibraryRef) -> Self {
        Builtin { session, lib }
    }

    pub fn library(&self) -> LibraryRef {
        self.lib
    }

    /// `A = QR`; returns `(Q, R)`.
    pub fn qr(&self, a: &MatrixHandle) -> Result<(MatrixHandle, MatrixHandle), ClientError> {
        let (q, r, _) = two(self.session.run(self.lib, "tsqr", &[a], ParamMap::new())?)?;
        Ok((q, r))
    }

    /// Solves `(XᵀX + nλI) W = XᵀY`.
    pub fn cg(
        &self,
        x: &MatrixHandle,
        y: &MatrixHandle,
        opts: CgOptions,
    ) -> Result<(MatrixHandle, CgSummary), ClientError> {
        let params = ParamMap::new()
            .with("lambda", opts.lambda)
            .with("tol", opts.tol)
            .with("max_iter", opts.max_iter);
        let (w, s) = one(self.session.run(self.lib, "cg_solve", &[x, y], params)?)?;
        let c = y.cols() as usize;
        let summary = CgSummary {
            iterations: s.i64("iterations").ok_or_else(|| missing("iterations"))?,
            column_iterations: (0..c)
                .map(|j| s.i64(&format!("iters_{j}")).ok_or_else(|| missing("iters_j")))
                .collect::<Result<_, _>>()?,
            residuals: s.f64_series("residual_"),
            converged: s.bool("converged").ok_or_else(|| missing("converged"))?,
            iter_time_mean: s.f64("iter_time_mean").unwrap_or(0.0),
            iter_time_std: s.f64("iter_time_std").unwrap_or(0.0),
        };
        Ok((w, summary))
    }

    /// Rank-`k` truncated SVD.
    pub fn svd(&self, a: &MatrixHandle, k: usize, opts: SvdOptions) -> Result<SvdResult, ClientError> {
        let mut params = ParamMap::new().with("k", k as i64).with("seed", opts.seed);
        if let Some(tol) = opts.tol {
            params.insert("tol", tol);
        }
        if let Some(m) = opts.max_subspace {
            params.insert("max_subspace", m);
        }
        let (u, v, s) = two(self.session.run(self.lib, "truncated_svd", &[a], params)?)?;
        let values = s.f64_series("s_");
        if values.len() != k {
            return Err(ClientError::BadReply(format!(
                "expected {k} singular values, got {}",
                values.len()
            )));
        }
        Ok(SvdResult {
            u,
            s: values,
            v,
            unreliable: (0..k)
                .map(|j| s.bool(&format!("unreliable_{j}")).unwrap_or(false))
                .collect(),
            ritz_residuals: s.f64_series("ritz_residual_"),
            basis_size: s.i64("basis_size").unwrap_or(0),
        })
    }

    /// Random Fourier features `n × D` of X.
    pub fn random_features(
        &self,
        x: &MatrixHandle,
        d: usize,
        sigma: f64,
        seed: i64,
    ) -> Result<MatrixHandle, ClientError> {
        let params = ParamMap::new()
            .with("D", d as i64)
            .with("sigma", sigma)
            .with("seed", seed);
        Ok(one(self.session.run(self.lib, "random_features", &[x], params)?)?.0)
    }

    /// Has the server read a binary matrix file directly into its workers.
    pub fn load(&self, path: &str) -> Result<MatrixHandle, ClientError> {
        let params = ParamMap::new().with("path", path);
        Ok(one(self.session.run(self.lib, "load_matrix", &[], params)?)?.0)
    }

    /// `[A A … A]` with `replicas` copies side by side.
    pub fn tile_columns(&self, a: &MatrixHandle, replicas: usize) -> Result<MatrixHandle, ClientError> {
        let params = ParamMap::new().with("replicas", replicas as i64);
        Ok(one(self.session.run(self.lib, "tile_columns", &[a], params)?)?.0)
    }
}
