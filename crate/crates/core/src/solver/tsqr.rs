//! Tall-skinny QR by a binary reduction tree of local R factors.
//!
//! Each rank factors its own rows with Householder QR. The small R factors
//! are all-gathered and every rank replays the same pairwise reduction tree,
//! so the tree is evaluated redundantly instead of with point-to-point
//! messages. Each rank then pushes the tree's Q factors back down its own
//! path to form its rows of the global Q.

use super::{LocalBlock, SolverError};
use crate::collective::Comm;
use crate::linalg::{householder_qr, identity, matmul};

#[derive(Debug, Clone)]
pub struct TsqrOutput {
    /// This rank's rows of Q, `rows × n` row-major.
    pub q_local: Vec<f64>,
    /// Upper triangular `n × n` factor with nonnegative diagonal, replicated.
    pub r: Vec<f64>,
}

enum Node {
    Leaf {
        rank: usize,
        rows: usize,
    },
    Pair {
        left: Box<Node>,
        right: Box<Node>,
        /// `(left.rows + right.rows) × rows` factor of the stacked R's.
        q: Vec<f64>,
        rows: usize,
    },
}

impl Node {
    fn rows(&self) -> usize {
        match self {
            Node::Leaf { rows, .. } | Node::Pair { rows, .. } => *rows,
        }
    }

    /// Multiplies `m` (this node's `rows × n` coefficient) down the tree and
    /// returns the coefficient for leaf `rank`, if it lies below this node.
    fn descend(&self, target: usize, m: Vec<f64>, n: usize) -> Option<Vec<f64>> {
        match self {
            Node::Leaf { rank, .. } => (*rank == target).then_some(m),
            Node::Pair { left, right, q, rows } => {
                let (lr, rr) = (left.rows(), right.rows());
                let all = matmul(q, lr + rr, *rows, &m, n);
                let (top, bottom) = all.split_at(lr * n);
                left.descend(target, top.to_vec(), n)
                    .or_else(|| right.descend(target, bottom.to_vec(), n))
            }
        }
    }
}

/// QR factorization of the distributed `m × n` matrix with `m ≥ n`.
pub fn tsqr(comm: &Comm, a: &LocalBlock<'_>) -> Result<TsqrOutput, SolverError> {
    let n = a.cols;
    if a.global_rows < n as u64 {
        return Err(SolverError::InvalidArguments(format!(
            "TSQR needs at least as many rows as columns, got {} × {n}",
            a.global_rows
        )));
    }
    if comm.any(a.has_non_finite())? {
        return Err(SolverError::Numerical("non-finite values in A".into()));
    }
    let frob = comm.sum(a.data.iter().map(|v| v * v).sum())?.sqrt();

    let m_local = a.rows();
    let (q_leaf, r_leaf, r_dim) = householder_qr(a.data, m_local, n);
    let gathered = comm.all_gather(&r_leaf)?;

    // Replay the reduction tree over ranks that hold at least one row.
    let mut level: Vec<(Node, Vec<f64>)> = gathered
        .into_iter()
        .enumerate()
        .filter(|(_, r)| !r.is_empty())
        .map(|(rank, r)| {
            (
                Node::Leaf {
                    rank,
                    rows: r.len() / n,
                },
                r,
            )
        })
        .collect();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some((left, r_left)) = it.next() {
            match it.next() {
                Some((right, r_right)) => {
                    let stacked_rows = left.rows() + right.rows();
                    let mut stacked = r_left;
                    stacked.extend_from_slice(&r_right);
                    let (q, r, rows) = householder_qr(&stacked, stacked_rows, n);
                    next.push((
                        Node::Pair {
                            left: Box::new(left),
                            right: Box::new(right),
                            q,
                            rows,
                        },
                        r,
                    ));
                }
                None => next.push((left, r_left)),
            }
        }
        level = next;
    }
    let (root, mut r) = level.pop().expect("m >= n >= 1 leaves at least one row");
    debug_assert_eq!(root.rows(), n);

    // Fix signs so that diag(R) >= 0.
    let mut signs = vec![1.0; n];
    for i in 0..n {
        if r[i * n + i] < 0.0 {
            signs[i] = -1.0;
            r[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = -*v);
        }
    }
    let min_diag = (0..n).map(|i| r[i * n + i]).fold(f64::INFINITY, f64::min);
    if min_diag < 1e-12 * frob {
        return Err(SolverError::Numerical(format!(
            "matrix is rank deficient: smallest |R_ii| = {min_diag:e}, ‖A‖_F = {frob:e}"
        )));
    }

    let q_local = if m_local == 0 {
        Vec::new()
    } else {
        let coeff = root
            .descend(comm.rank(), identity(n), n)
            .expect("every nonempty rank is a leaf");
        let mut q = matmul(&q_leaf, m_local, r_dim, &coeff, n);
        for row in q.chunks_exact_mut(n) {
            for (v, s) in row.iter_mut().zip(&signs) {
                *v *= s;
            }
        }
        q
    };
    Ok(TsqrOutput { q_local, r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collective::run_spmd;
    use crate::solver::testutil::{block_of, gaussian};
    use nalgebra::DMatrix;

    fn run(a: &[f64], m: usize, n: usize, p: usize) -> Vec<Result<TsqrOutput, SolverError>> {
        run_spmd(p, |comm| {
            let (start, blk) = block_of(a, m, n, p, comm.rank());
            tsqr(comm, &LocalBlock::new(start, m as u64, n, &blk))
        })
    }

    fn assemble(outs: &[Result<TsqrOutput, SolverError>]) -> (Vec<f64>, Vec<f64>) {
        let q = outs.iter().flat_map(|o| o.as_ref().unwrap().q_local.clone()).collect();
        (q, outs[0].as_ref().unwrap().r.clone())
    }

    #[test]
    fn identity_factors_trivially() {
        let a = identity(4);
        for p in [1, 2, 4] {
            let (q, r) = assemble(&run(&a, 4, 4, p));
            for (x, y) in q.iter().zip(&a) {
                assert!((x - y).abs() < 1e-15);
            }
            for (x, y) in r.iter().zip(&a) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn orthogonal_columns() {
        let a = [2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0];
        let (q, r) = assemble(&run(&a, 4, 2, 2));
        let want_r = [2.0, 0.0, 0.0, 3.0];
        let want_q = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        for (x, y) in r.iter().zip(&want_r) {
            assert!((x - y).abs() < 1e-15, "{r:?}");
        }
        for (x, y) in q.iter().zip(&want_q) {
            assert!((x - y).abs() < 1e-15, "{q:?}");
        }
    }

    #[test]
    fn matches_sequential_householder_oracle() {
        let (m, n) = (300, 12);
        let a = gaussian(m, n, 77);
        let (q, r) = assemble(&run(&a, m, n, 4));
        let am = DMatrix::from_row_slice(m, n, &a);
        let qm = DMatrix::from_row_slice(m, n, &q);
        let rm = DMatrix::from_row_slice(n, n, &r);
        assert!((&am - &qm * &rm).norm() <= 1e-10 * am.norm());
        assert!((qm.transpose() * &qm - DMatrix::identity(n, n)).norm() <= 1e-10);

        let oracle = am.clone().qr();
        let (mut oq, mut or) = (oracle.q(), oracle.r());
        for i in 0..n {
            if or[(i, i)] < 0.0 {
                or.row_mut(i).neg_mut();
                oq.column_mut(i).neg_mut();
            }
        }
        assert!((&rm - &or).norm() <= 1e-10 * am.norm());
        assert!((&qm - &oq).norm() <= 1e-10 * (n as f64).sqrt());
    }

    #[test]
    fn more_workers_than_rows_per_block() {
        let (m, n) = (10, 4);
        let a = gaussian(m, n, 1);
        // 8 workers: blocks of 2 rows, last three ranks empty.
        let (q, r) = assemble(&run(&a, m, n, 8));
        let am = DMatrix::from_row_slice(m, n, &a);
        let qm = DMatrix::from_row_slice(m, n, &q);
        let rm = DMatrix::from_row_slice(n, n, &r);
        assert!((&am - &qm * &rm).norm() <= 1e-12 * am.norm());
        for i in 0..n {
            assert!(rm[(i, i)] >= 0.0);
        }
    }

    #[test]
    fn r_agrees_across_worker_counts() {
        let (m, n) = (120, 8);
        let a = gaussian(m, n, 5);
        let base = assemble(&run(&a, m, n, 1)).1;
        for p in [2, 4, 8] {
            let r = assemble(&run(&a, m, n, p)).1;
            for (x, y) in r.iter().zip(&base) {
                assert!((x - y).abs() <= 1e-8 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn wide_input_is_rejected() {
        let a = gaussian(2, 3, 1);
        assert!(matches!(run(&a, 2, 3, 1)[0], Err(SolverError::InvalidArguments(_))));
    }

    #[test]
    fn rank_deficiency_is_detected() {
        let (m, n) = (20, 3);
        let mut a = gaussian(m, n, 2);
        for i in 0..m {
            a[i * n + 2] = a[i * n] + a[i * n + 1];
        }
        assert!(matches!(run(&a, m, n, 2)[0], Err(SolverError::Numerical(_))));
    }
}
