//! Seeded synthetic datasets.
//!
//! Every generator draws from a ChaCha8 stream seeded with `seed`, so the
//! same arguments always give the same bytes.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binfile::{self, BinFileError};
use crate::linalg::{householder_qr, matmul};

/// Shape of the speech-like dataset: features, label classes.
pub const SPEECH_COLS: usize = 440;
pub const SPEECH_ROWS: usize = 100_000;
pub const SPEECH_CLASSES: usize = 147;

fn normals(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// `rows × cols` i.i.d. standard normal entries, row-major.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    normals(&mut ChaCha8Rng::seed_from_u64(seed), rows * cols)
}

/// Spectrum used by [`lowrank`]: `10 · 0.9^j`.
pub fn lowrank_spectrum(rank: usize) -> Vec<f64> {
    (0..rank).map(|j| 10.0 * 0.9f64.powi(j as i32)).collect()
}

/// `A = B · diag(s) · Cᵀ + noise · G` with orthonormal `B` (`rows × rank`)
/// and `C` (`cols × rank`), `s` from [`lowrank_spectrum`] and Gaussian `G`.
/// Returns the matrix and `s`.
pub fn lowrank(rows: usize, cols: usize, rank: usize, noise: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    assert!(
        rank >= 1 && rank <= rows.min(cols),
        "rank must be in [1, min(rows, cols)]"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, _, _) = householder_qr(&normals(&mut rng, rows * rank), rows, rank);
    let (c, _, _) = householder_qr(&normals(&mut rng, cols * rank), cols, rank);
    let s = lowrank_spectrum(rank);
    let mut bs = b;
    for row in bs.chunks_exact_mut(rank) {
        for (v, sj) in row.iter_mut().zip(&s) {
            *v *= sj;
        }
    }
    let ct = crate::linalg::transpose(&c, cols, rank);
    let mut a = matmul(&bs, rows, rank, &ct, cols);
    if noise > 0.0 {
        for v in a.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v += noise * g;
        }
    }
    (a, s)
}

/// Speech-like classification data: each row is its class centroid plus unit
/// Gaussian noise. Returns `(features rows × cols, labels)`.
pub fn speech_like(rows: usize, cols: usize, classes: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    assert!(classes >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<f64> = normals(&mut rng, classes * cols).into_iter().map(|v| 2.0 * v).collect();
    let mut features = Vec::with_capacity(rows * cols);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let label = rng.random_range(0..classes);
        labels.push(label);
        let centre = &centroids[label * cols..(label + 1) * cols];
        features.extend(centre.iter().map(|c| {
            let g: f64 = StandardNormal.sample(&mut rng);
            c + g
        }));
    }
    (features, labels)
}

/// One-hot `rows × classes` encoding of `labels`.
pub fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        y[i * classes + l] = 1.0;
    }
    y
}

/// Sidecar path for a generated file: `a.bin` + `spectrum` → `a.bin.spectrum`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `values`, one per line, in shortest round-trip form.
pub fn write_spectrum(path: &Path, values: &[f64]) -> std::io::Result<()> {
    let text: String = values.iter().map(|v| format!("{v:?}\n")).collect();
    std::fs::write(path, text)
}

pub fn read_spectrum(path: &Path) -> std::io::Result<Vec<f64>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{l:?}: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Gaussian,
    Lowrank,
    SpeechLike,
}

#[derive(Debug, Clone)]
pub struct DatagenSpec {
    pub kind: Kind,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub rank: usize,
    pub noise: f64,
    pub classes: usize,
}

/// Generates a dataset into `path`, plus sidecars: `.spectrum` for lowrank
/// and `.labels` (one-hot, matrix file) for speech-like. Returns every path
/// written.
pub fn generate(spec: &DatagenSpec, path: &Path) -> Result<Vec<PathBuf>, BinFileError> {
    let (r, c) = (spec.rows as u64, spec.cols as u64);
    match spec.kind {
        Kind::Gaussian => {
            binfile::write_matrix(path, r, c, &gaussian(spec.rows, spec.cols, spec.seed))?;
            Ok(vec![path.to_owned()])
        }
        Kind::Lowrank => {
            let (a, s) = lowrank(spec.rows, spec.cols, spec.rank, spec.noise, spec.seed);
            binfile::write_matrix(path, r, c, &a)?;
            let side = sidecar(path, "spectrum");
            write_spectrum(&side, &s)?;
            Ok(vec![path.to_owned(), side])
        }
        Kind::SpeechLike => {
            let (x, labels) = speech_like(spec.rows, spec.cols, spec.classes, spec.seed);
            binfile::write_matrix(path, r, c, &x)?;
            let side = sidecar(path, "labels");
            binfile::write_matrix(&side, r, spec.classes as u64, &one_hot(&labels, spec.classes))?;
            Ok(vec![path.to_owned(), side])
        }
    }
}
