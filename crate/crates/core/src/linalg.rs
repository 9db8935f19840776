//! Small dense kernels on row-major `f64` buffers.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `(m × k) · (k × n)` product.
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for (l, &ail) in a[i * k..(i + 1) * k].iter().enumerate() {
            if ail != 0.0 {
                axpy(ail, &b[l * n..(l + 1) * n], ci);
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut e = vec![0.0; n * n];
    for i in 0..n {
        e[i * n + i] = 1.0;
    }
    e
}

/// Thin Householder QR of an `m × n` matrix.
///
/// Returns `(q, r, rank_dim)` with `rank_dim = min(m, n)`, `q` of shape
/// `m × rank_dim` with orthonormal columns and `r` upper trapezoidal of
/// shape `rank_dim × n`. Diagonal signs follow the reflector convention and
/// are not normalized.
pub fn householder_qr(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, usize) {
    assert_eq!(a.len(), m * n);
    let r_dim = m.min(n);
    let mut work = a.to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(r_dim);
    let mut w = vec![0.0; n];

    for k in 0..r_dim {
        let mut v: Vec<f64> = (k..m).map(|i| work[i * n + k]).collect();
        let x_norm = norm2(&v);
        if x_norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -x_norm } else { x_norm };
        v[0] -= alpha;
        let v_norm = norm2(&v);
        if v_norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|x| *x /= v_norm);

        // A[k.., k..] -= 2 v (vᵀ A[k.., k..])
        let w = &mut w[k..];
        w.fill(0.0);
        for (vi, i) in v.iter().zip(k..m) {
            axpy(*vi, &work[i * n + k..(i + 1) * n], w);
        }
        for (vi, i) in v.iter().zip(k..m) {
            axpy(-2.0 * vi, w, &mut work[i * n + k..(i + 1) * n]);
        }
        reflectors.push(v);
    }

    let mut r = vec![0.0; r_dim * n];
    for i in 0..r_dim {
        r[i * n + i..(i + 1) * n].copy_from_slice(&work[i * n + i..(i + 1) * n]);
    }

    // Q = H_0 H_1 ... H_{r-1} [I; 0], applied right to left.
    let mut q = vec![0.0; m * r_dim];
    for i in 0..r_dim {
        q[i * r_dim + i] = 1.0;
    }
    let mut w = vec![0.0; r_dim];
    for k in (0..r_dim).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        let w = &mut w[k..];
        w.fill(0.0);
        for (vi, i) in v.iter().zip(k..m) {
            axpy(*vi, &q[i * r_dim + k..(i + 1) * r_dim], w);
        }
        for (vi, i) in v.iter().zip(k..m) {
            axpy(-2.0 * vi, w, &mut q[i * r_dim + k..(i + 1) * r_dim]);
        }
    }
    (q, r, r_dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frob(a: &[f64]) -> f64 {
        norm2(a)
    }

    #[test]
    fn qr_reconstructs_and_is_orthonormal() {
        let (m, n) = (7, 4);
        let a: Vec<f64> = (0..m * n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let (q, r, k) = householder_qr(&a, m, n);
        assert_eq!(k, 4);
        let qr = matmul(&q, m, k, &r, n);
        let diff: Vec<f64> = qr.iter().zip(&a).map(|(x, y)| x - y).collect();
        assert!(frob(&diff) < 1e-13 * frob(&a));
        let qtq = matmul(&transpose(&q, m, k), k, m, &q, k);
        let diff: Vec<f64> = qtq.iter().zip(identity(k)).map(|(x, y)| x - y).collect();
        assert!(frob(&diff) < 1e-14);
        for i in 0..k {
            for j in 0..i {
                assert_eq!(r[i * n + j], 0.0);
            }
        }
    }

    #[test]
    fn qr_of_wide_block() {
        let (m, n) = (2, 5);
        let a: Vec<f64> = (0..m * n).map(|i| i as f64 + 1.0).collect();
        let (q, r, k) = householder_qr(&a, m, n);
        assert_eq!(k, 2);
        let qr = matmul(&q, m, k, &r, n);
        for (x, y) in qr.iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn qr_handles_zero_columns() {
        let a = vec![0.0, 1.0, 0.0, 2.0, 0.0, 0.0];
        let (q, r, k) = householder_qr(&a, 3, 2);
        let qr = matmul(&q, 3, k, &r, 2);
        for (x, y) in qr.iter().zip(&a) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, 2, 2, &b, 2), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(transpose(&[1.0, 2.0, 3.0], 1, 3), vec![1.0, 2.0, 3.0]);
    }
}
