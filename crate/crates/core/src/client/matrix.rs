use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ClientError;

/// Row-indexed local matrix. Rows may be stored in any order.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMatrix {
    rows: u64,
    cols: usize,
    indices: Vec<u64>,
    values: Vec<f64>,
}

impl LocalMatrix {
    /// An empty matrix of the given shape; add rows with [`push_row`](Self::push_row).
    pub fn new(rows: u64, cols: usize) -> Self {
        LocalMatrix {
            rows,
            cols,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Wraps a dense row-major buffer, rows indexed `0..rows`.
    pub fn from_row_major(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, ClientError> {
        if values.len() != rows * cols {
            return Err(ClientError::InvalidMatrix(format!(
                "{} values do not fill a {rows} × {cols} matrix",
                values.len()
            )));
        }
        Ok(LocalMatrix {
            rows: rows as u64,
            cols,
            indices: (0..rows as u64).collect(),
            values,
        })
    }

    pub fn push_row(&mut self, index: u64, values: &[f64]) -> Result<(), ClientError> {
        if index >= self.rows {
            return Err(ClientError::InvalidMatrix(format!(
                "row {index} is outside a matrix of {} rows",
                self.rows
            )));
        }
        if values.len() != self.cols {
            return Err(ClientError::InvalidMatrix(format!(
                "row {index} has {} values, expected {}",
                values.len(),
                self.cols
            )));
        }
        self.indices.push(index);
        self.values.extend_from_slice(values);
        Ok(())
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of stored rows.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f64])> + '_ {
        self.indices
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.cols.max(1)))
    }

    /// The same rows in a seeded random order.
    pub fn shuffled(&self, seed: u64) -> LocalMatrix {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut out = LocalMatrix::new(self.rows, self.cols);
        for i in order {
            out.indices.push(self.indices[i]);
            out.values
                .extend_from_slice(&self.values[i * self.cols..(i + 1) * self.cols]);
        }
        out
    }

    /// Dense row-major copy. Every row index must be present exactly once.
    pub fn to_row_major(&self) -> Result<Vec<f64>, ClientError> {
        let n = self.rows as usize;
        let mut seen = vec![false; n];
        let mut out = vec![0.0; n * self.cols];
        for (index, row) in self.iter() {
            let i = index as usize;
            if seen[i] {
                return Err(ClientError::InvalidMatrix(format!("row {index} appears twice")));
            }
            seen[i] = true;
            out[i * self.cols..(i + 1) * self.cols].copy_from_slice(row);
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(ClientError::InvalidMatrix(format!("row {missing} is missing")));
        }
        Ok(out)
    }

    /// Checks that every row index is present exactly once.
    pub(crate) fn check_complete(&self) -> Result<(), ClientError> {
        if self.len() as u64 != self.rows {
            return Err(ClientError::InvalidMatrix(format!(
                "{} rows stored for a matrix of {} rows",
                self.len(),
                self.rows
            )));
        }
        let mut seen = vec![false; self.rows as usize];
        for &i in &self.indices {
            if i >= self.rows || std::mem::replace(&mut seen[i as usize], true) {
                return Err(ClientError::InvalidMatrix(format!(
                    "row {i} is out of range or repeated"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_keeps_content() {
        let m = LocalMatrix::from_row_major(5, 2, (0..10).map(f64::from).collect()).unwrap();
        let s = m.shuffled(3);
        assert_ne!(s, m);
        assert_eq!(s.to_row_major().unwrap(), m.to_row_major().unwrap());
    }

    #[test]
    fn push_row_validates() {
        let mut m = LocalMatrix::new(2, 2);
        assert!(m.push_row(2, &[0.0, 0.0]).is_err());
        assert!(m.push_row(0, &[0.0]).is_err());
        m.push_row(1, &[1.0, 2.0]).unwrap();
        assert!(m.check_complete().is_err());
        assert!(m.to_row_major().is_err());
        m.push_row(1, &[1.0, 2.0]).unwrap();
        assert!(m.check_complete().is_err());
    }
}
