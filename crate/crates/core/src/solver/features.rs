//! Random Fourier features for the Gaussian kernel.
//!
//! `z(x) = √(2/D) · cos(xΩ + b)` with `Ω` a `d × D` matrix of i.i.d.
//! `N(0, 1/σ²)` entries and `b` uniform on `[0, 2π)`, so that
//! `z(x)·z(y) ≈ exp(−‖x−y‖² / (2σ²))`.
//!
//! `Ω` and `b` are drawn from a ChaCha8 stream seeded with `seed`: first the
//! `d·D` entries of `Ω` in row-major order as standard normals divided by
//! `σ`, then the `D` phases as `2π·U[0,1)`. Every rank regenerates the same
//! map and expands only its own rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LocalBlock, SolverError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomFeatureParams {
    /// Output feature count D.
    pub features: usize,
    /// Gaussian bandwidth σ.
    pub sigma: f64,
    pub seed: u64,
}

impl RandomFeatureParams {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.features < 1 {
            return Err(SolverError::InvalidArguments("D must be >= 1".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(SolverError::InvalidArguments(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RandomFeatureMap {
    input_dim: usize,
    features: usize,
    /// `d × D`, row-major.
    omega: Vec<f64>,
    phase: Vec<f64>,
    scale: f64,
}

impl RandomFeatureMap {
    pub fn new(input_dim: usize, params: &RandomFeatureParams) -> Result<Self, SolverError> {
        params.validate()?;
        let len = input_dim
            .checked_mul(params.features)
            .ok_or_else(|| SolverError::Resource("d × D overflows".into()))?;
        let mut omega = Vec::new();
        omega.try_reserve_exact(len).map_err(|e| {
            SolverError::Resource(format!(
                "cannot allocate a {input_dim} × {} projection: {e}",
                params.features
            ))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        omega.extend((0..len).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / params.sigma
        }));
        let phase = (0..params.features)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        Ok(RandomFeatureMap {
            input_dim,
            features: params.features,
            omega,
            phase,
            scale: (2.0 / params.features as f64).sqrt(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    /// Writes the `D` features of one input row into `out`.
    pub fn transform_row(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input_dim);
        debug_assert_eq!(out.len(), self.features);
        out.copy_from_slice(&self.phase);
        for (k, &xk) in x.iter().enumerate() {
            if xk != 0.0 {
                crate::linalg::axpy(xk, &self.omega[k * self.features..(k + 1) * self.features], out);
            }
        }
        for v in out.iter_mut() {
            *v = self.scale * v.cos();
        }
    }
}

/// Expands this rank's rows of X into `rows × D` random features. No
/// communication is needed.
pub fn random_features(x: &LocalBlock<'_>, params: &RandomFeatureParams) -> Result<Vec<f64>, SolverError> {
    let map = RandomFeatureMap::new(x.cols, params)?;
    let len = x
        .rows()
        .checked_mul(params.features)
        .filter(|&n| n.checked_mul(8).is_some())
        .ok_or_else(|| SolverError::Resource(format!("{} × {} feature block overflows", x.rows(), params.features)))?;
    let mut z = Vec::new();
    z.try_reserve_exact(len)
        .map_err(|e| SolverError::Resource(format!("cannot allocate {len} features: {e}")))?;
    z.resize(len, 0.0);
    for (i, out) in z.chunks_exact_mut(params.features).enumerate() {
        map.transform_row(x.row(i), out);
    }
    Ok(z)
}
