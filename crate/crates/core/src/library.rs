//! Routine libraries the server can dispatch to by name.
//!
//! A library is a named table of [`Routine`]s. Each routine declares its
//! input count and parameter schema, plans its output shapes on the driver,
//! and then runs SPMD on every worker of the session.
//!
//! Parameter schemas of the `builtin` library (tags: f64, i64, string):
//!
//! | routine           | inputs | params (default)                                                       | outputs | scalars |
//! |-------------------|--------|-------------------------------------------------------------------------|---------|---------|
//! | `tsqr`            | A      | none                                                                    | Q, R    | none |
//! | `cg_solve`        | X, Y   | `lambda` f64 (1e-5), `tol` f64 (1e-12), `max_iter` i64 (1000), `n` i64 (rows of X) | W | `iterations`, `iters_j`, `residual_j`, `converged_j`, `converged`, `iter_time_mean`, `iter_time_std` |
//! | `random_features` | X      | `D` i64 (required), `sigma` f64 (10), `seed` i64 (0)                    | Z       | none |
//! | `truncated_svd`   | A      | `k` i64 (20), `tol` f64 (1e-10), `max_subspace` i64, `seed` i64 (0)     | U, V    | `k`, `s_j`, `unreliable_j`, `ritz_residual_j`, `basis_size` |
//! | `load_matrix`     | none   | `path` string (required)                                                | A       | none |
//! | `tile_columns`    | A      | `replicas` i64 (required)                                               | [A … A] | none |

use std::sync::Arc;

use crate::binfile;
use crate::collective::Comm;
use crate::protocol::{ParamMap, ParamValue, RowRange};
use crate::solver::{self, LocalBlock, RandomFeatureParams, RidgeParams, SolverError, SvdParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    F64,
    I64,
    Str,
    Bool,
}

impl ParamKind {
    fn matches(&self, v: &ParamValue) -> bool {
        matches!(
            (self, v),
            (ParamKind::F64, ParamValue::F64(_))
                | (ParamKind::I64, ParamValue::I64(_))
                | (ParamKind::Str, ParamValue::Str(_))
                | (ParamKind::Bool, ParamValue::Bool(_))
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParamSpec {
    pub name: &'static str,
    pub kind: ParamKind,
    pub required: bool,
}

const fn opt(name: &'static str, kind: ParamKind) -> ParamSpec {
    ParamSpec {
        name,
        kind,
        required: false,
    }
}

const fn req(name: &'static str, kind: ParamKind) -> ParamSpec {
    ParamSpec {
        name,
        kind,
        required: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputMeta {
    pub matrix_id: u64,
    pub rows: u64,
    pub cols: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputShape {
    pub rows: u64,
    pub cols: u64,
}

/// What one rank sees while running a routine.
pub struct TaskContext<'a> {
    pub comm: &'a Comm,
    pub inputs: &'a [LocalBlock<'a>],
    pub params: &'a ParamMap,
    /// This rank's row range of each planned output.
    pub outputs: &'a [RowRange],
}

/// One rank's contribution: its rows of each output, and the scalar results
/// (identical on every rank).
#[derive(Debug, Default)]
pub struct RankOutput {
    pub blocks: Vec<Vec<f64>>,
    pub scalars: ParamMap,
}

pub trait Routine: Send + Sync {
    fn name(&self) -> &'static str;
    fn input_count(&self) -> usize;
    fn params(&self) -> &'static [ParamSpec];
    /// Checks inputs and parameters and returns the output shapes.
    fn plan(&self, inputs: &[InputMeta], params: &ParamMap) -> Result<Vec<OutputShape>, SolverError>;
    fn run(&self, ctx: &TaskContext<'_>) -> Result<RankOutput, SolverError>;
}

/// Type-checks `params` against the routine's schema.
pub fn check_schema(routine: &dyn Routine, inputs: usize, params: &ParamMap) -> Result<(), SolverError> {
    let bad = |msg: String| Err(SolverError::InvalidArguments(format!("{}: {msg}", routine.name())));
    if inputs != routine.input_count() {
        return bad(format!(
            "expects {} input matrices, got {inputs}",
            routine.input_count()
        ));
    }
    let schema = routine.params();
    for (key, value) in params.iter() {
        match schema.iter().find(|s| s.name == key) {
            None => return bad(format!("unknown parameter {key:?}")),
            Some(spec) if !spec.kind.matches(value) => {
                return bad(format!(
                    "parameter {key:?} must be {:?}, got {}",
                    spec.kind,
                    value.type_name()
                ))
            }
            Some(_) => {}
        }
    }
    if let Some(missing) = schema.iter().find(|s| s.required && !params.contains_key(s.name)) {
        return bad(format!("missing required parameter {:?}", missing.name));
    }
    Ok(())
}

pub struct Library {
    pub name: String,
    pub path: String,
    routines: Vec<Arc<dyn Routine>>,
}

impl Library {
    pub fn new(name: impl Into<String>, path: impl Into<String>) -> Self {
        Library {
            name: name.into(),
            path: path.into(),
            routines: Vec::new(),
        }
    }

    pub fn with_routine(mut self, routine: Arc<dyn Routine>) -> Self {
        assert!(
            self.routine(routine.name()).is_none(),
            "duplicate routine {}",
            routine.name()
        );
        self.routines.push(routine);
        self
    }

    pub fn routine(&self, name: &str) -> Option<Arc<dyn Routine>> {
        self.routines.iter().find(|r| r.name() == name).cloned()
    }

    pub fn routine_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.routines.iter().map(|r| r.name())
    }
}

pub const BUILTIN_NAME: &str = "builtin";
pub const BUILTIN_PATH: &str = "builtin";

/// The library compiled into the server.
pub fn builtin() -> Library {
    Library::new(BUILTIN_NAME, BUILTIN_PATH)
        .with_routine(Arc::new(Tsqr))
        .with_routine(Arc::new(CgSolve))
        .with_routine(Arc::new(RandomFeatures))
        .with_routine(Arc::new(TruncatedSvd))
        .with_routine(Arc::new(LoadMatrix))
        .with_routine(Arc::new(TileColumns))
}

fn invalid(msg: impl Into<String>) -> SolverError {
    SolverError::InvalidArguments(msg.into())
}

fn positive_i64(params: &ParamMap, key: &str, default: Option<i64>) -> Result<usize, SolverError> {
    let v = params
        .i64(key)
        .or(default)
        .ok_or_else(|| invalid(format!("missing {key}")))?;
    if v < 1 {
        return Err(invalid(format!("{key} must be >= 1, got {v}")));
    }
    Ok(v as usize)
}

fn seed(params: &ParamMap) -> u64 {
    params.i64("seed").unwrap_or(0) as u64
}

fn slice_output(full: &[f64], cols: usize, range: &RowRange) -> Vec<f64> {
    solver::slice_rows(full, cols, range.row_start, range.row_end)
}

struct Tsqr;

impl Routine for Tsqr {
    fn name(&self) -> &'static str {
        "tsqr"
    }

    fn input_count(&self) -> usize {
        1
    }

    fn params(&self) -> &'static [ParamSpec] {
        &[]
    }

    fn plan(&self, inputs: &[InputMeta], _: &ParamMap) -> Result<Vec<OutputShape>, SolverError> {
        let a = inputs[0];
        if a.rows < a.cols {
            return Err(invalid(format!("tsqr needs rows >= cols, got {} × {}", a.rows, a.cols)));
        }
        Ok(vec![
            OutputShape {
                rows: a.rows,
                cols: a.cols,
            },
            OutputShape {
                rows: a.cols,
                cols: a.cols,
            },
        ])
    }

    fn run(&self, ctx: &TaskContext<'_>) -> Result<RankOutput, SolverError> {
        let a = &ctx.inputs[0];
        let out = solver::tsqr(ctx.comm, a)?;
        Ok(RankOutput {
            blocks: vec![out.q_local, slice_output(&out.r, a.cols, &ctx.outputs[1])],
            scalars: ParamMap::new(),
        })
    }
}

struct CgSolve;

impl CgSolve {
    fn ridge_params(inputs_rows: u64, params: &ParamMap) -> Result<RidgeParams, SolverError> {
        let n = match params.i64("n") {
            Some(n) if n < 0 || n as u64 != inputs_rows => {
                return Err(invalid(format!("n = {n} does not match the {inputs_rows} rows of X")))
            }
            _ => inputs_rows,
        };
        let ridge = RidgeParams {
            lambda: params.f64("lambda").unwrap_or(1e-5),
            n,
            tol: params.f64("tol").unwrap_or(1e-12),
            max_iter: positive_i64(params, "max_iter", Some(1000))?,
        };
        ridge.validate()?;
        Ok(ridge)
    }
}

impl Routine for CgSolve {
    fn name(&self) -> &'static str {
        "cg_solve"
    }

    fn input_count(&self) -> usize {
        2
    }

    fn params(&self) -> &'static [ParamSpec] {
        const P: &[ParamSpec] = &[
            opt("lambda", ParamKind::F64),
            opt("tol", ParamKind::F64),
            opt("max_iter", ParamKind::I64),
            opt("n", ParamKind::I64),
        ];
        P
    }

    fn plan(&self, inputs: &[InputMeta], params: &ParamMap) -> Result<Vec<OutputShape>, SolverError> {
        let (x, y) = (inputs[0], inputs[1]);
        if x.rows != y.rows {
            return Err(invalid(format!("X has {} rows but Y has {}", x.rows, y.rows)));
        }
        Self::ridge_params(x.rows, params)?;
        Ok(vec![OutputShape {
            rows: x.cols,
            cols: y.cols,
        }])
    }

    fn run(&self, ctx: &TaskContext<'_>) -> Result<RankOutput, SolverError> {
        let (x, y) = (&ctx.inputs[0], &ctx.inputs[1]);
        let ridge = Self::ridge_params(x.global_rows, ctx.params)?;
        let (w, report) = solver::cg_solve(ctx.comm, x, y, &ridge)?;
        let mut scalars = ParamMap::new();
        scalars
            .insert("iterations", report.total_iterations as i64)
            .insert("converged", report.all_converged())
            .insert("iter_time_mean", report.iter_time_mean)
            .insert("iter_time_std", report.iter_time_std);
        for j in 0..y.cols {
            scalars
                .insert(format!("iters_{j}"), report.iterations[j] as i64)
                .insert(format!("residual_{j}"), report.residuals[j])
                .insert(format!("converged_{j}"), report.converged[j]);
        }
        Ok(RankOutput {
            blocks: vec![slice_output(&w, y.cols, &ctx.outputs[0])],
            scalars,
        })
    }
}

struct RandomFeatures;

impl RandomFeatures {
    fn feature_params(params: &ParamMap) -> Result<RandomFeatureParams, SolverError> {
        let p = RandomFeatureParams {
            features: positive_i64(params, "D", None)?,
            sigma: params.f64("sigma").unwrap_or(10.0),
            seed: seed(params),
        };
        p.validate()?;
        Ok(p)
    }
}

impl Routine for RandomFeatures {
    fn name(&self) -> &'static str {
        "random_features"
    }

    fn input_count(&self) -> usize {
        1
    }

    fn params(&self) -> &'static [ParamSpec] {
        const P: &[ParamSpec] = &[
            req("D", ParamKind::I64),
            opt("sigma", ParamKind::F64),
            opt("seed", ParamKind::I64),
        ];
        P
    }

    fn plan(&self, inputs: &[InputMeta], params: &ParamMap) -> Result<Vec<OutputShape>, SolverError> {
        let p = Self::feature_params(params)?;
        Ok(vec![OutputShape {
            rows: inputs[0].rows,
            cols: p.features as u64,
        }])
    }

    fn run(&self, ctx: &TaskContext<'_>) -> Result<RankOutput, SolverError> {
        let p = Self::feature_params(ctx.params)?;
        Ok(RankOutput {
            blocks: vec![solver::random_features(&ctx.inputs[0], &p)?],
            scalars: ParamMap::new(),
        })
    }
}

struct TruncatedSvd;

impl TruncatedSvd {
    fn svd_params(params: &ParamMap) -> Result<SvdParams, SolverError> {
        Ok(SvdParams {
            k: positive_i64(params, "k", Some(20))?,
            tol: params.f64("tol").unwrap_or(1e-10),
            max_subspace: match params.i64("max_subspace") {
                Some(_) => Some(positive_i64(params, "max_subspace", None)?),
                None => None,
            },
            seed: seed(params),
        })
    }
}

impl Routine for TruncatedSvd {
    fn name(&self) -> &'static str {
        "truncated_svd"
    }

    fn input_count(&self) -> usize {
        1
    }

    fn params(&self) -> &'static [ParamSpec] {
        const P: &[ParamSpec] = &[
            opt("k", ParamKind::I64),
            opt("tol", ParamKind::F64),
            opt("max_subspace", ParamKind::I64),
            opt("seed", ParamKind::I64),
        ];
        P
    }

    fn plan(&self, inputs: &[InputMeta], params: &ParamMap) -> Result<Vec<OutputShape>, SolverError> {
        let a = inputs[0];
        let p = Self::svd_params(params)?;
        p.resolve(a.rows, a.cols as usize)?;
        let k = p.k as u64;
        Ok(vec![
            OutputShape { rows: a.rows, cols: k },
            OutputShape { rows: a.cols, cols: k },
        ])
    }

    fn run(&self, ctx: &TaskContext<'_>) -> Result<RankOutput, SolverError> {
        let p = Self::svd_params(ctx.params)?;
        let out = solver::truncated_svd(ctx.comm, &ctx.inputs[0], &p)?;
        let mut scalars = ParamMap::new();
        scalars
            .insert("k", p.k as i64)
            .insert("basis_size", out.basis_size as i64);
        for j in 0..p.k {
            scalars
                .insert(format!("s_{j}"), out.singular_values[j])
                .insert(format!("unreliable_{j}"), out.unreliable[j])
                .insert(format!("ritz_residual_{j}"), out.ritz_residuals[j]);
        }
        Ok(RankOutput {
            blocks: vec![out.u_local, slice_output(&out.v, p.k, &ctx.outputs[1])],
            scalars,
        })
    }
}

/// Reads a binary matrix file straight into the session's workers; each
/// rank reads only its own rows.
struct LoadMatrix;

impl Routine for LoadMatrix {
    fn name(&self) -> &'static str {
        "load_matrix"
    }

    fn input_count(&self) -> usize {
        0
    }

    fn params(&self) -> &'static [ParamSpec] {
        const P: &[ParamSpec] = &[req("path", ParamKind::Str)];
        P
    }

    fn plan(&self, _: &[InputMeta], params: &ParamMap) -> Result<Vec<OutputShape>, SolverError> {
        let path = params.str("path").unwrap_or_default();
        let h = binfile::read_header(path).map_err(|e| invalid(format!("cannot load {path:?}: {e}")))?;
        if h.rows == 0 || h.cols == 0 {
            return Err(invalid(format!(
                "{path:?} holds an empty {} × {} matrix",
                h.rows, h.cols
            )));
        }
        Ok(vec![OutputShape {
            rows: h.rows,
            cols: h.cols,
        }])
    }

    fn run(&self, ctx: &TaskContext<'_>) -> Result<RankOutput, SolverError> {
        let path = ctx.params.str("path").unwrap_or_default();
        let range = ctx.outputs[0];
        let local = binfile::read_rows(path, range.row_start, range.row_end)
            .map(|(_, data)| data)
            .map_err(|e| e.to_string());
        // Keep ranks in step even if only one of them failed to read.
        if ctx.comm.any(local.is_err())? {
            return Err(SolverError::Numerical(format!(
                "reading {path:?} failed: {}",
                local.err().unwrap_or_else(|| "on another worker".into())
            )));
        }
        Ok(RankOutput {
            blocks: vec![local.unwrap()],
            scalars: ParamMap::new(),
        })
    }
}

/// `[A A … A]`: column-wise replication, done locally on every rank.
struct TileColumns;

impl Routine for TileColumns {
    fn name(&self) -> &'static str {
        "tile_columns"
    }

    fn input_count(&self) -> usize {
        1
    }

    fn params(&self) -> &'static [ParamSpec] {
        const P: &[ParamSpec] = &[req("replicas", ParamKind::I64)];
        P
    }

    fn plan(&self, inputs: &[InputMeta], params: &ParamMap) -> Result<Vec<OutputShape>, SolverError> {
        let r = positive_i64(params, "replicas", None)? as u64;
        let a = inputs[0];
        let cols = a
            .cols
            .checked_mul(r)
            .ok_or_else(|| SolverError::Resource("tiled width overflows".into()))?;
        Ok(vec![OutputShape { rows: a.rows, cols }])
    }

    fn run(&self, ctx: &TaskContext<'_>) -> Result<RankOutput, SolverError> {
        let r = positive_i64(ctx.params, "replicas", None)?;
        let a = &ctx.inputs[0];
        let mut out = Vec::with_capacity(a.data.len() * r);
        for i in 0..a.rows() {
            for _ in 0..r {
                out.extend_from_slice(a.row(i));
            }
        }
        Ok(RankOutput {
            blocks: vec![out],
            scalars: ParamMap::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_has_every_routine() {
        let lib = builtin();
        let names: Vec<_> = lib.routine_names().collect();
        assert_eq!(
            names,
            [
                "tsqr",
                "cg_solve",
                "random_features",
                "truncated_svd",
                "load_matrix",
                "tile_columns"
            ]
        );
        assert!(lib.routine("foo").is_none());
    }

    #[test]
    fn schema_checks() {
        let lib = builtin();
        let cg = lib.routine("cg_solve").unwrap();
        assert!(check_schema(&*cg, 2, &ParamMap::new()).is_ok());
        assert!(check_schema(&*cg, 1, &ParamMap::new()).is_err());
        assert!(check_schema(&*cg, 2, &ParamMap::new().with("lambda", 1i64)).is_err());
        assert!(check_schema(&*cg, 2, &ParamMap::new().with("bogus", 1.0)).is_err());
        let rf = lib.routine("random_features").unwrap();
        assert!(check_schema(&*rf, 1, &ParamMap::new()).is_err());
    }

    #[test]
    fn cg_plan_rejects_negative_lambda() {
        let cg = builtin().routine("cg_solve").unwrap();
        let x = InputMeta {
            matrix_id: 1,
            rows: 10,
            cols: 3,
        };
        let y = InputMeta {
            matrix_id: 2,
            rows: 10,
            cols: 2,
        };
        assert_eq!(
            cg.plan(&[x, y], &ParamMap::new()).unwrap(),
            vec![OutputShape { rows: 3, cols: 2 }]
        );
        assert!(cg.plan(&[x, y], &ParamMap::new().with("lambda", -1.0)).is_err());
        assert!(cg.plan(&[x, y], &ParamMap::new().with("n", 9i64)).is_err());
    }

    #[test]
    fn svd_and_tsqr_plans() {
        let lib = builtin();
        let a = InputMeta {
            matrix_id: 1,
            rows: 50,
            cols: 8,
        };
        let svd = lib.routine("truncated_svd").unwrap();
        assert_eq!(
            svd.plan(&[a], &ParamMap::new().with("k", 3i64)).unwrap(),
            vec![OutputShape { rows: 50, cols: 3 }, OutputShape { rows: 8, cols: 3 }]
        );
        assert!(svd.plan(&[a], &ParamMap::new().with("k", 9i64)).is_err());
        let qr = lib.routine("tsqr").unwrap();
        assert!(qr
            .plan(
                &[InputMeta {
                    matrix_id: 1,
                    rows: 2,
                    cols: 3
                }],
                &ParamMap::new()
            )
            .is_err());
    }
}
