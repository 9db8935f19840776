//! Conjugate gradient on the ridge normal equations `(XᵀX + nλI) W = XᵀY`.
//!
//! The operator is applied matrix-free, `v ↦ Xᵀ(Xv) + nλv`: each rank forms
//! `Xᵢᵀ(Xᵢ v)` for its rows and the partial products are summed with one
//! all-reduce per iteration. `XᵀX` is never formed; that costs `O(nd)` per
//! iteration instead of `O(nd²)` once plus `O(d²)` per iteration.
//!
//! The `c` right-hand sides run independent recurrences that share one
//! blocked operator application per iteration. A column stops once its
//! recursive residual meets the tolerance and a recomputed true residual
//! confirms it; otherwise the column restarts from its true residual.

use std::time::Instant;

use super::{local_gram_apply, LocalBlock, SolverError};
use crate::collective::Comm;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeParams {
    /// Regularization λ ≥ 0.
    pub lambda: f64,
    /// Training-example count; must equal the rows of X.
    pub n: u64,
    /// Relative residual threshold per column.
    pub tol: f64,
    pub max_iter: usize,
}

impl RidgeParams {
    pub fn new(n: u64, lambda: f64) -> Self {
        RidgeParams {
            lambda,
            n,
            tol: 1e-12,
            max_iter: 1000,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(SolverError::InvalidArguments(format!(
                "lambda must be a finite value >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.tol > 0.0) {
            return Err(SolverError::InvalidArguments(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        if self.max_iter < 1 {
            return Err(SolverError::InvalidArguments("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgReport {
    /// Iterations performed per right-hand side.
    pub iterations: Vec<usize>,
    /// Final `‖b − Aw‖ / ‖b‖` per column, recomputed from the returned W.
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
    /// Shared blocked iterations (the maximum over columns).
    pub total_iterations: usize,
    /// Wall time per shared iteration, seconds.
    pub iter_time_mean: f64,
    pub iter_time_std: f64,
}

impl CgReport {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

struct Operator<'a, 'b> {
    comm: &'a Comm,
    x: &'a LocalBlock<'b>,
    shift: f64,
    scratch: Vec<f64>,
}

impl Operator<'_, '_> {
    /// `out = (XᵀX + shift·I) p` for a packed `d × a` block.
    fn apply(&mut self, p: &[f64], a: usize, out: &mut [f64]) -> Result<(), SolverError> {
        local_gram_apply(self.x, p, a, out, &mut self.scratch);
        self.comm.all_reduce_sum(out)?;
        if self.shift != 0.0 {
            for (o, v) in out.iter_mut().zip(p) {
                *o += self.shift * v;
            }
        }
        Ok(())
    }
}

fn column(m: &[f64], cols: usize, j: usize) -> impl Iterator<Item = f64> + '_ {
    m.iter().skip(j).step_by(cols).copied()
}

fn pack(m: &[f64], cols: usize, which: &[usize]) -> Vec<f64> {
    let d = m.len() / cols;
    let mut out = Vec::with_capacity(d * which.len());
    for k in 0..d {
        for &j in which {
            out.push(m[k * cols + j]);
        }
    }
    out
}

/// Solves the ridge normal equations for every column of Y.
///
/// `x` and `y` are this rank's rows of X (n × d) and Y (n × c) under the
/// same layout. Returns the replicated solution `W` (d × c, row-major) and
/// the convergence report; every rank returns identical values.
pub fn cg_solve(
    comm: &Comm,
    x: &LocalBlock<'_>,
    y: &LocalBlock<'_>,
    params: &RidgeParams,
) -> Result<(Vec<f64>, CgReport), SolverError> {
    params.validate()?;
    if x.global_rows != y.global_rows || x.rows() != y.rows() || x.row_start != y.row_start {
        return Err(SolverError::InvalidArguments(format!(
            "X has {} rows but Y has {}",
            x.global_rows, y.global_rows
        )));
    }
    if params.n != x.global_rows {
        return Err(SolverError::InvalidArguments(format!(
            "n = {} does not match the {} rows of X",
            params.n, x.global_rows
        )));
    }
    if comm.any(x.has_non_finite() || y.has_non_finite())? {
        return Err(SolverError::Numerical("non-finite values in X or Y".into()));
    }

    let d = x.cols;
    let c = y.cols;
    let mut op = Operator {
        comm,
        x,
        shift: params.n as f64 * params.lambda,
        scratch: Vec::new(),
    };

    // B = XᵀY
    let mut b = vec![0.0; d * c];
    for i in 0..x.rows() {
        let yi = y.row(i);
        for (k, &xik) in x.row(i).iter().enumerate() {
            crate::linalg::axpy(xik, yi, &mut b[k * c..(k + 1) * c]);
        }
    }
    comm.all_reduce_sum(&mut b)?;
    let b_norm: Vec<f64> = (0..c)
        .map(|j| column(&b, c, j).map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    let mut w = vec![0.0; d * c];
    let mut r = b.clone();
    let mut p = b.clone();
    let mut rr: Vec<f64> = (0..c).map(|j| column(&r, c, j).map(|v| v * v).sum()).collect();
    let mut iterations = vec![0usize; c];
    let mut done: Vec<bool> = b_norm.iter().map(|&n| n == 0.0).collect();
    let mut iter_times = Vec::new();

    let mut active: Vec<usize> = (0..c).filter(|&j| !done[j]).collect();
    while !active.is_empty() {
        let started = Instant::now();
        let a = active.len();
        let p_packed = pack(&p, c, &active);
        let mut ap = vec![0.0; d * a];
        op.apply(&p_packed, a, &mut ap)?;

        let mut check = Vec::new();
        for (slot, &j) in active.iter().enumerate() {
            let p_ap: f64 = (0..d).map(|k| p_packed[k * a + slot] * ap[k * a + slot]).sum();
            if !(p_ap > 0.0) || !p_ap.is_finite() {
                return Err(SolverError::Numerical(format!(
                    "CG breakdown in column {j}: pᵀAp = {p_ap:e}"
                )));
            }
            let alpha = rr[j] / p_ap;
            let mut rr_new = 0.0;
            for k in 0..d {
                w[k * c + j] += alpha * p[k * c + j];
                let rk = r[k * c + j] - alpha * ap[k * a + slot];
                r[k * c + j] = rk;
                rr_new += rk * rk;
            }
            iterations[j] += 1;
            if rr_new.sqrt() <= params.tol * b_norm[j] {
                check.push(j);
            } else if iterations[j] >= params.max_iter {
                done[j] = true;
            } else {
                let beta = rr_new / rr[j];
                for k in 0..d {
                    p[k * c + j] = r[k * c + j] + beta * p[k * c + j];
                }
            }
            rr[j] = rr_new;
        }

        if !check.is_empty() {
            let true_r = true_residuals(&mut op, &b, &w, c, &check)?;
            let m = check.len();
            for (slot, &j) in check.iter().enumerate() {
                let res_sq: f64 = (0..d).map(|k| true_r[k * m + slot].powi(2)).sum();
                if res_sq.sqrt() <= params.tol * b_norm[j] || iterations[j] >= params.max_iter {
                    done[j] = true;
                } else {
                    // Recursive residual drifted; restart from the true one.
                    for k in 0..d {
                        r[k * c + j] = true_r[k * m + slot];
                        p[k * c + j] = true_r[k * m + slot];
                    }
                    rr[j] = res_sq;
                }
            }
        }

        iter_times.push(started.elapsed().as_secs_f64());
        active.retain(|&j| !done[j]);
    }

    let all: Vec<usize> = (0..c).collect();
    let final_r = true_residuals(&mut op, &b, &w, c, &all)?;
    let residuals: Vec<f64> = (0..c)
        .map(|j| {
            if b_norm[j] == 0.0 {
                0.0
            } else {
                column(&final_r, c, j).map(|v| v * v).sum::<f64>().sqrt() / b_norm[j]
            }
        })
        .collect();
    let converged = residuals.iter().map(|&res| res <= params.tol).collect();

    let (mean, std) = mean_std(&iter_times);
    let report = CgReport {
        total_iterations: iterations.iter().copied().max().unwrap_or(0),
        iterations,
        residuals,
        converged,
        iter_time_mean: mean,
        iter_time_std: std,
    };
    Ok((w, report))
}

/// `b − A w` for the listed columns, packed `d × cols.len()`.
fn true_residuals(
    op: &mut Operator<'_, '_>,
    b: &[f64],
    w: &[f64],
    c: usize,
    cols: &[usize],
) -> Result<Vec<f64>, SolverError> {
    let m = cols.len();
    let d = b.len() / c;
    let w_packed = pack(w, c, cols);
    let mut aw = vec![0.0; d * m];
    op.apply(&w_packed, m, &mut aw)?;
    let b_packed = pack(b, c, cols);
    Ok(b_packed.iter().zip(&aw).map(|(bv, av)| bv - av).collect())
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collective::run_spmd;
    use crate::solver::testutil::{block_of, gaussian};
    use nalgebra::DMatrix;

    /// Dense oracle: Cholesky solve of the assembled normal equations.
    fn oracle(x: &[f64], y: &[f64], n: usize, d: usize, c: usize, lambda: f64) -> Vec<f64> {
        let xm = DMatrix::from_row_slice(n, d, x);
        let ym = DMatrix::from_row_slice(n, c, y);
        let a = xm.transpose() * &xm + DMatrix::identity(d, d) * (n as f64 * lambda);
        let rhs = xm.transpose() * ym;
        let sol = a.cholesky().expect("SPD").solve(&rhs);
        let mut out = vec![0.0; d * c];
        for i in 0..d {
            for j in 0..c {
                out[i * c + j] = sol[(i, j)];
            }
        }
        out
    }

    fn solve(
        x: &[f64],
        y: &[f64],
        n: usize,
        d: usize,
        c: usize,
        p: usize,
        params: RidgeParams,
    ) -> Vec<(Vec<f64>, CgReport)> {
        run_spmd(p, |comm| {
            let (start, xb) = block_of(x, n, d, p, comm.rank());
            let (_, yb) = block_of(y, n, c, p, comm.rank());
            let xl = LocalBlock::new(start, n as u64, d, &xb);
            let yl = LocalBlock::new(start, n as u64, c, &yb);
            cg_solve(comm, &xl, &yl, &params).unwrap()
        })
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        num / b.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn identity_system_converges_in_one_iteration() {
        let mut x = vec![0.0; 16];
        for i in 0..4 {
            x[i * 4 + i] = 1.0;
        }
        let y = [1.0, 2.0, 3.0, 4.0];
        let out = solve(&x, &y, 4, 4, 1, 2, RidgeParams::new(4, 0.0));
        let (w, report) = &out[0];
        assert_eq!(w, &vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(report.iterations, vec![1]);
        assert!(report.all_converged());
    }

    #[test]
    fn diagonal_system_matches_closed_form() {
        // X = diag(1,2,3), Y = 1: w_i = x_ii / (x_ii² + nλ)
        let x = [1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0];
        let y = [1.0, 1.0, 1.0];
        let out = solve(&x, &y, 3, 3, 1, 1, RidgeParams::new(3, 1e-2));
        let want = oracle(&x, &y, 3, 3, 1, 1e-2);
        let closed = [1.0 / 1.03, 2.0 / 4.03, 3.0 / 9.03];
        for i in 0..3 {
            assert!((want[i] - closed[i]).abs() < 1e-15);
            assert!((out[0].0[i] - closed[i]).abs() < 1e-13, "{:?}", out[0].0);
        }
    }

    #[test]
    fn lambda_shift_identity_for_diagonal_inputs() {
        let diag = [0.5, 1.5, 2.0, 3.0, 4.5];
        let d = diag.len();
        let mut x = vec![0.0; d * d];
        for i in 0..d {
            x[i * d + i] = diag[i];
        }
        let y: Vec<f64> = (0..d).map(|i| i as f64 - 1.5).collect();
        for lambda in [0.0, 1e-5, 1e-1] {
            let out = solve(&x, &y, d, d, 1, 2, RidgeParams::new(d as u64, lambda));
            for i in 0..d {
                let want = diag[i] * y[i] / (diag[i] * diag[i] + d as f64 * lambda);
                assert!((out[0].0[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn random_system_matches_dense_oracle() {
        let (n, d, c) = (200, 30, 5);
        let x = gaussian(n, d, 11);
        let y = gaussian(n, c, 12);
        let mut params = RidgeParams::new(n as u64, 1e-5);
        params.tol = 1e-12;
        let want = oracle(&x, &y, n, d, c, 1e-5);
        let mut iters = None;
        for p in [1, 2, 4, 8] {
            let out = solve(&x, &y, n, d, c, p, params);
            let (w, report) = &out[0];
            assert!(rel_err(w, &want) < 1e-8, "p={p}");
            assert!(report.all_converged());
            for (_, other) in &out[1..] {
                assert_eq!(other.iterations, report.iterations);
            }
            match &iters {
                None => iters = Some(report.iterations.clone()),
                Some(it) => assert_eq!(it, &report.iterations, "iteration counts differ at p={p}"),
            }
        }
    }

    #[test]
    fn reported_residual_matches_recomputed() {
        let (n, d, c) = (150, 20, 3);
        let x = gaussian(n, d, 3);
        let y = gaussian(n, c, 4);
        let out = solve(&x, &y, n, d, c, 3, RidgeParams::new(n as u64, 1e-3));
        let (w, report) = &out[0];
        let xm = DMatrix::from_row_slice(n, d, &x);
        let ym = DMatrix::from_row_slice(n, c, &y);
        let wm = DMatrix::from_row_slice(d, c, w);
        let a = xm.transpose() * &xm + DMatrix::identity(d, d) * (n as f64 * 1e-3);
        let b = xm.transpose() * ym;
        let r = &b - a * wm;
        for j in 0..c {
            let rel = r.column(j).norm() / b.column(j).norm();
            assert!((rel - report.residuals[j]).abs() < 1e-10);
            assert!(report.residuals[j] <= 1e-12);
        }
    }

    #[test]
    fn iteration_cap_is_flagged() {
        let (n, d) = (100, 20);
        let x = gaussian(n, d, 5);
        let y = gaussian(n, 1, 6);
        let mut params = RidgeParams::new(n as u64, 0.0);
        params.max_iter = 2;
        let out = solve(&x, &y, n, d, 1, 2, params);
        assert_eq!(out[0].1.iterations, vec![2]);
        assert!(!out[0].1.all_converged());
    }

    #[test]
    fn zero_rhs_column_is_trivially_solved() {
        let (n, d) = (20, 4);
        let x = gaussian(n, d, 5);
        let mut y = vec![0.0; n * 2];
        for i in 0..n {
            y[i * 2] = i as f64;
        }
        let out = solve(&x, &y, n, d, 2, 2, RidgeParams::new(n as u64, 1e-2));
        let (w, report) = &out[0];
        assert_eq!(report.iterations[1], 0);
        assert!((0..d).all(|k| w[k * 2 + 1] == 0.0));
        assert!(report.all_converged());
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = vec![1.0; 4];
        let y = vec![1.0; 2];
        let run = |params: RidgeParams, x: Vec<f64>| {
            run_spmd(1, |comm| {
                let xl = LocalBlock::new(0, 2, 2, &x);
                let yl = LocalBlock::new(0, 2, 1, &y);
                cg_solve(comm, &xl, &yl, &params).err().unwrap()
            })
            .pop()
            .unwrap()
        };
        assert!(matches!(
            run(RidgeParams::new(2, -1.0), x.clone()),
            SolverError::InvalidArguments(_)
        ));
        assert!(matches!(
            run(RidgeParams::new(3, 0.0), x.clone()),
            SolverError::InvalidArguments(_)
        ));
        let mut nan = x.clone();
        nan[1] = f64::NAN;
        assert!(matches!(run(RidgeParams::new(2, 0.1), nan), SolverError::Numerical(_)));
    }

    #[test]
    fn bit_reproducible_for_fixed_p() {
        let (n, d, c) = (120, 15, 2);
        let x = gaussian(n, d, 21);
        let y = gaussian(n, c, 22);
        let a = solve(&x, &y, n, d, c, 4, RidgeParams::new(n as u64, 1e-5));
        let b = solve(&x, &y, n, d, c, 4, RidgeParams::new(n as u64, 1e-5));
        let bits = |w: &Vec<f64>| w.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a[0].0), bits(&b[0].0));
        assert_eq!(a[0].1.iterations, b[0].1.iterations);
    }
}
