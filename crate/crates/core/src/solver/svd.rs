//! Truncated SVD of a tall block-row matrix through Lanczos on its Gram
//! operator `G v = Aᵀ(A v)`.
//!
//! The Lanczos basis (n-vectors) is replicated on every rank and fully
//! reorthogonalized at each step. Ritz pairs of the tridiagonal projection
//! give `θⱼ = σⱼ²` and the right singular vectors; the left singular vectors
//! are formed locally as `A vⱼ / σⱼ`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LocalBlock, SolverError};
use crate::collective::Comm;
use crate::linalg::{axpy, dot, norm2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdParams {
    pub k: usize,
    /// Ritz residual threshold, relative to the largest Ritz value.
    pub tol: f64,
    /// Lanczos basis cap; `None` picks `min(n, max(2k, k + 10))`.
    pub max_subspace: Option<usize>,
    pub seed: u64,
}

impl SvdParams {
    pub fn new(k: usize) -> Self {
        SvdParams {
            k,
            tol: 1e-10,
            max_subspace: None,
            seed: 0,
        }
    }

    /// Checks the parameters against an `m × n` input and returns the basis cap.
    pub fn resolve(&self, m: u64, n: usize) -> Result<usize, SolverError> {
        let limit = (m.min(n as u64)) as usize;
        if self.k < 1 || self.k > limit {
            return Err(SolverError::InvalidArguments(format!(
                "k = {} must be in [1, {limit}] for a {m} × {n} matrix",
                self.k
            )));
        }
        if !(self.tol > 0.0) {
            return Err(SolverError::InvalidArguments(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        let default = n.min((2 * self.k).max(self.k + 10));
        let cap = self.max_subspace.unwrap_or(default).min(n);
        if cap < n.min(2 * self.k) {
            return Err(SolverError::InvalidArguments(format!(
                "max_subspace = {cap} must be at least {}",
                n.min(2 * self.k)
            )));
        }
        Ok(cap)
    }
}

#[derive(Debug, Clone)]
pub struct SvdOutput {
    /// Descending singular values.
    pub singular_values: Vec<f64>,
    /// Right singular vectors, `n × k` row-major, replicated.
    pub v: Vec<f64>,
    /// This rank's rows of U, `rows × k` row-major.
    pub u_local: Vec<f64>,
    /// Columns whose σ is below `√ε · σ₁`; their U column is unreliable.
    pub unreliable: Vec<bool>,
    /// Final Ritz residual estimates `|βⱼ sⱼ|` for the returned pairs.
    pub ritz_residuals: Vec<f64>,
    /// Size of the Lanczos basis when the iteration stopped.
    pub basis_size: usize,
}

struct Gram<'a, 'b> {
    comm: &'a Comm,
    a: &'a LocalBlock<'b>,
    t: Vec<f64>,
}

impl Gram<'_, '_> {
    fn apply(&mut self, v: &[f64], out: &mut [f64]) -> Result<(), SolverError> {
        let a = self.a;
        self.t.resize(a.rows(), 0.0);
        for (i, ti) in self.t.iter_mut().enumerate() {
            *ti = dot(a.row(i), v);
        }
        out.fill(0.0);
        for (i, &ti) in self.t.iter().enumerate() {
            axpy(ti, a.row(i), out);
        }
        self.comm.all_reduce_sum(out)?;
        Ok(())
    }
}

/// Eigenpairs of the symmetric tridiagonal matrix, sorted by descending
/// eigenvalue. Returns `(values, vectors)` with vectors as columns.
fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let j = alpha.len();
    let mut t = DMatrix::zeros(j, j);
    for i in 0..j {
        t[(i, i)] = alpha[i];
        if i + 1 < j {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(j, j, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let h = dot(q, w);
            axpy(-h, q, w);
        }
    }
}

/// Rank-k truncated SVD of the distributed matrix whose local rows are `a`.
pub fn truncated_svd(comm: &Comm, a: &LocalBlock<'_>, params: &SvdParams) -> Result<SvdOutput, SolverError> {
    let n = a.cols;
    let k = params.k;
    let cap = params.resolve(a.global_rows, n)?;
    if comm.any(a.has_non_finite())? {
        return Err(SolverError::Numerical("non-finite values in A".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut random_unit = |basis: &[Vec<f64>]| -> Option<Vec<f64>> {
        for _ in 0..4 {
            let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            orthogonalize(&mut v, basis);
            let norm = norm2(&v);
            if norm > 1e-8 {
                v.iter_mut().for_each(|x| *x /= norm);
                return Some(v);
            }
        }
        None
    };

    let mut gram = Gram { comm, a, t: Vec::new() };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cap);
    let mut alpha: Vec<f64> = Vec::with_capacity(cap);
    let mut beta: Vec<f64> = Vec::with_capacity(cap);
    let mut w = vec![0.0; n];
    let mut scale = 0.0f64;

    basis.push(random_unit(&[]).expect("n >= 1"));
    let (theta, s, residuals) = loop {
        let j = basis.len() - 1;
        gram.apply(&basis[j], &mut w)?;
        let a_j = dot(&basis[j], &w);
        axpy(-a_j, &basis[j], &mut w);
        if j > 0 {
            axpy(-beta[j - 1], &basis[j - 1], &mut w);
        }
        orthogonalize(&mut w, &basis);
        let b_j = norm2(&w);
        if !a_j.is_finite() || !b_j.is_finite() {
            return Err(SolverError::Numerical(
                "Lanczos produced non-finite coefficients".into(),
            ));
        }
        alpha.push(a_j);
        beta.push(b_j);
        scale = scale.max(a_j.abs() + b_j);

        let size = basis.len();
        let complete = size == n;
        let invariant = b_j <= 1e-14 * scale.max(f64::MIN_POSITIVE);
        if size >= k {
            let (theta, s) = tridiagonal_eigen(&alpha, &beta[..size - 1]);
            let theta_max = theta[0].abs();
            let residuals: Vec<f64> = (0..k).map(|i| (b_j * s[(size - 1, i)]).abs()).collect();
            let converged = residuals.iter().all(|&r| r <= params.tol * theta_max);
            if converged || complete || invariant && size >= k {
                break (theta, s, residuals);
            }
            if size >= cap {
                return Err(SolverError::Numerical(format!(
                    "Lanczos did not converge within a basis of {cap}: top-{k} Ritz residuals {:?} exceed {:e}",
                    residuals,
                    params.tol * theta_max
                )));
            }
        }

        if invariant {
            // Krylov space exhausted early: continue from a fresh direction.
            beta[size - 1] = 0.0;
            match random_unit(&basis) {
                Some(q) => basis.push(q),
                None => return Err(SolverError::Numerical("cannot extend the Lanczos basis".into())),
            }
        } else {
            basis.push(w.iter().map(|x| x / b_j).collect());
        }
    };

    let size = basis.len();
    let mut v = vec![0.0; n * k];
    for col in 0..k {
        let mut vec_col = vec![0.0; n];
        for (i, q) in basis.iter().enumerate() {
            axpy(s[(i, col)], q, &mut vec_col);
        }
        let norm = norm2(&vec_col);
        vec_col.iter_mut().for_each(|x| *x /= norm);
        // Sign convention: the largest-magnitude entry is positive.
        let pivot = vec_col
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > vec_col[best].abs() { i } else { best });
        if vec_col[pivot] < 0.0 {
            vec_col.iter_mut().for_each(|x| *x = -*x);
        }
        for r in 0..n {
            v[r * k + col] = vec_col[r];
        }
    }

    let singular_values: Vec<f64> = theta[..k].iter().map(|&t| t.max(0.0).sqrt()).collect();
    let floor = f64::EPSILON.sqrt() * singular_values[0];
    let unreliable: Vec<bool> = singular_values.iter().map(|&s| s < floor || s == 0.0).collect();

    let rows = a.rows();
    let mut u_local = vec![0.0; rows * k];
    for i in 0..rows {
        let ai = a.row(i);
        let ui = &mut u_local[i * k..(i + 1) * k];
        for (r, &air) in ai.iter().enumerate() {
            if air != 0.0 {
                axpy(air, &v[r * k..(r + 1) * k], ui);
            }
        }
        for (u, &sigma) in ui.iter_mut().zip(&singular_values) {
            *u = if sigma > 0.0 { *u / sigma } else { 0.0 };
        }
    }

    Ok(SvdOutput {
        singular_values,
        v,
        u_local,
        unreliable,
        ritz_residuals: residuals,
        basis_size: size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collective::run_spmd;
    use crate::solver::testutil::{block_of, gaussian};

    fn run(a: &[f64], m: usize, n: usize, p: usize, params: SvdParams) -> Vec<Result<SvdOutput, SolverError>> {
        run_spmd(p, |comm| {
            let (start, blk) = block_of(a, m, n, p, comm.rank());
            truncated_svd(comm, &LocalBlock::new(start, m as u64, n, &blk), &params)
        })
    }

    fn gather_u(outs: &[Result<SvdOutput, SolverError>]) -> Vec<f64> {
        outs.iter().flat_map(|o| o.as_ref().unwrap().u_local.clone()).collect()
    }

    #[test]
    fn embedded_diagonal() {
        let (m, n) = (10, 3);
        let mut a = vec![0.0; m * n];
        a[0] = 3.0;
        a[n + 1] = 2.0;
        a[2 * n + 2] = 1.0;
        let out = run(&a, m, n, 4, SvdParams::new(2));
        let s = &out[0].as_ref().unwrap().singular_values;
        assert!((s[0] - 3.0).abs() < 1e-12 && (s[1] - 2.0).abs() < 1e-12, "{s:?}");
    }

    #[test]
    fn rank_one() {
        let (m, n) = (40, 6);
        let u = gaussian(m, 1, 1);
        let v = gaussian(n, 1, 2);
        let a: Vec<f64> = (0..m * n).map(|i| u[i / n] * v[i % n]).collect();
        let out = run(&a, m, n, 3, SvdParams::new(1));
        let o = out[0].as_ref().unwrap();
        let expected = norm2(&u) * norm2(&v);
        assert!((o.singular_values[0] - expected).abs() < 1e-10 * expected);
        let vn = norm2(&v);
        let sign = o.v[0].signum() * v[0].signum();
        for r in 0..n {
            assert!((o.v[r] - sign * v[r] / vn).abs() < 1e-10);
        }
        let un = norm2(&u);
        let ufull = gather_u(&out);
        for r in 0..m {
            assert!((ufull[r] - sign * u[r] / un).abs() < 1e-10);
        }
    }

    #[test]
    fn random_matrix_matches_dense_svd() {
        let (m, n, k) = (500, 80, 20);
        let a = gaussian(m, n, 17);
        let mut params = SvdParams::new(k);
        params.max_subspace = Some(n);
        let out = run(&a, m, n, 4, params);
        let o = out[0].as_ref().unwrap();

        let dense = DMatrix::from_row_slice(m, n, &a);
        let mut oracle: Vec<f64> = dense
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .collect();
        oracle.sort_by(|x, y| y.total_cmp(x));
        for j in 0..k {
            assert!((o.singular_values[j] - oracle[j]).abs() <= 1e-8 * oracle[j], "σ{j}");
        }
        let v = DMatrix::from_row_slice(n, k, &o.v);
        let u = DMatrix::from_row_slice(m, k, &gather_u(&out));
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(o.singular_values.clone()));
        let resid = (&dense * &v - u * s).norm();
        assert!(resid <= 1e-8 * dense.norm());
        let vtv = v.transpose() * &v - DMatrix::identity(k, k);
        assert!(vtv.norm() <= 1e-8);
    }

    #[test]
    fn default_subspace_on_decaying_spectrum() {
        let (m, n, k) = (300, 60, 5);
        let mut a = gaussian(m, n, 5);
        for i in 0..m {
            for j in 0..n {
                a[i * n + j] *= 0.7f64.powi(j as i32);
            }
        }
        let out = run(&a, m, n, 2, SvdParams::new(k));
        assert!(out[0].is_ok(), "{:?}", out[0].as_ref().err());
    }

    #[test]
    fn worker_count_invariance() {
        let (m, n, k) = (200, 30, 6);
        let a = gaussian(m, n, 33);
        let mut params = SvdParams::new(k);
        params.max_subspace = Some(n);
        let base = run(&a, m, n, 1, params)[0].as_ref().unwrap().singular_values.clone();
        for p in [2, 4, 8] {
            let s = run(&a, m, n, p, params)[0].as_ref().unwrap().singular_values.clone();
            for j in 0..k {
                assert!((s[j] - base[j]).abs() <= 1e-8 * base[j]);
            }
        }
    }

    #[test]
    fn rank_deficient_columns_are_flagged() {
        let (m, n) = (20, 4);
        let u = gaussian(m, 1, 1);
        let a: Vec<f64> = (0..m * n).map(|i| u[i / n] * (1 + i % n) as f64).collect();
        let out = run(&a, m, n, 2, SvdParams::new(3));
        let o = out[0].as_ref().unwrap();
        assert_eq!(o.unreliable, vec![false, true, true]);
    }

    #[test]
    fn k_too_large_is_rejected() {
        let a = gaussian(10, 3, 1);
        let out = run(&a, 10, 3, 1, SvdParams::new(4));
        assert!(matches!(out[0], Err(SolverError::InvalidArguments(_))));
    }

    #[test]
    fn non_convergence_is_reported() {
        let (m, n, k) = (400, 100, 10);
        let a = gaussian(m, n, 9);
        let mut params = SvdParams::new(k);
        params.tol = 1e-14;
        params.max_subspace = Some(2 * k);
        let out = run(&a, m, n, 2, params);
        assert!(matches!(out[0], Err(SolverError::Numerical(_))));
    }

    #[test]
    fn outputs_are_bit_reproducible() {
        let a = gaussian(100, 12, 4);
        let p = SvdParams::new(3);
        let x = run(&a, 100, 12, 3, p);
        let y = run(&a, 100, 12, 3, p);
        let bits = |o: &SvdOutput| {
            o.singular_values
                .iter()
                .chain(&o.v)
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(x[0].as_ref().unwrap()), bits(y[0].as_ref().unwrap()));
    }
}
