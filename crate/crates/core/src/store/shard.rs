use crate::protocol::RowBatch;

use super::StoreError;

/// One worker's slice of a distributed matrix.
///
/// Rows `[row_start, row_start + row_count)` are stored row-major in `data`;
/// local row `i` occupies `data[i * cols..(i + 1) * cols]`.
#[derive(Debug, Clone)]
pub struct Shard {
    matrix_id: u64,
    row_start: u64,
    row_count: usize,
    cols: usize,
    data: Vec<f64>,
    filled: Vec<bool>,
    received: usize,
}

impl Shard {
    /// Allocates an empty shard waiting for rows.
    pub fn allocate(matrix_id: u64, row_start: u64, row_count: usize, cols: usize) -> Self {
        Shard {
            matrix_id,
            row_start,
            row_count,
            cols,
            data: vec![0.0; row_count * cols],
            filled: vec![false; row_count],
            received: 0,
        }
    }

    /// Wraps an already computed block as a complete shard.
    pub fn from_block(matrix_id: u64, row_start: u64, cols: usize, data: Vec<f64>) -> Self {
        assert!(
            cols > 0 && data.len().is_multiple_of(cols),
            "block is not a whole number of rows"
        );
        let row_count = data.len() / cols;
        Shard {
            matrix_id,
            row_start,
            row_count,
            cols,
            data,
            filled: vec![true; row_count],
            received: row_count,
        }
    }

    pub fn matrix_id(&self) -> u64 {
        self.matrix_id
    }

    pub fn row_start(&self) -> u64 {
        self.row_start
    }

    pub fn row_end(&self) -> u64 {
        self.row_start + self.row_count as u64
    }

    pub fn row_count(&self) -> usize {
        self.row_count
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major local block.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, local: usize) -> &[f64] {
        &self.data[local * self.cols..(local + 1) * self.cols]
    }

    pub fn received(&self) -> usize {
        self.received
    }

    pub fn missing(&self) -> usize {
        self.row_count - self.received
    }

    pub fn is_complete(&self) -> bool {
        self.received == self.row_count
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    /// Stores every row of `batch`. The batch is checked as a whole first, so
    /// a rejected batch leaves the shard untouched.
    pub fn ingest(&mut self, batch: &RowBatch) -> Result<usize, StoreError> {
        if !batch.is_empty() && batch.cols() != self.cols || batch.values.len() != batch.len() * self.cols {
            return Err(StoreError::WrongWidth {
                row: batch.indices.first().copied().unwrap_or(0),
                expected: self.cols,
                got: batch.cols(),
            });
        }
        let mut seen = Vec::with_capacity(batch.len());
        for &index in &batch.indices {
            let local = self.local_index(index)?;
            if self.filled[local] || seen.contains(&local) {
                return Err(StoreError::DuplicateRow(index));
            }
            seen.push(local);
        }
        for (index, values) in batch.rows() {
            let local = (index - self.row_start) as usize;
            self.data[local * self.cols..(local + 1) * self.cols].copy_from_slice(values);
            self.filled[local] = true;
        }
        self.received += batch.len();
        Ok(self.received)
    }

    /// Copies out `row_count` rows starting at global row `row_start`.
    pub fn extract_rows(&self, row_start: u64, row_count: usize) -> Result<RowBatch, StoreError> {
        if !self.is_complete() {
            return Err(StoreError::Incomplete {
                matrix_id: self.matrix_id,
                missing: self.missing(),
            });
        }
        let mut batch = RowBatch::with_capacity(self.matrix_id, row_count, self.cols);
        if row_count == 0 {
            return Ok(batch);
        }
        let end = row_start.checked_add(row_count as u64);
        if row_start < self.row_start || end.is_none_or(|e| e > self.row_end()) {
            return Err(StoreError::NotOwned {
                row_start,
                row_count,
                owned_start: self.row_start,
                owned_end: self.row_end(),
            });
        }
        let first = (row_start - self.row_start) as usize;
        for local in first..first + row_count {
            batch.push_row(self.row_start + local as u64, self.row(local));
        }
        Ok(batch)
    }

    fn local_index(&self, row: u64) -> Result<usize, StoreError> {
        if row < self.row_start || row >= self.row_end() {
            return Err(StoreError::RowNotOwned {
                row,
                owned_start: self.row_start,
                owned_end: self.row_end(),
            });
        }
        Ok((row - self.row_start) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[(u64, &[f64])]) -> RowBatch {
        let mut b = RowBatch::new(1);
        for (i, v) in rows {
            b.push_row(*i, v);
        }
        b
    }

    #[test]
    fn stores_at_local_offset() {
        let mut s = Shard::allocate(1, 3, 3, 4);
        s.ingest(&batch(&[(4, &[1.0, 2.0, 3.0, 4.0])])).unwrap();
        assert_eq!(s.row(1), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.missing(), 2);
    }

    #[test]
    fn rejects_foreign_row() {
        let mut s = Shard::allocate(1, 3, 3, 4);
        assert!(matches!(
            s.ingest(&batch(&[(7, &[0.0; 4])])),
            Err(StoreError::RowNotOwned { row: 7, .. })
        ));
    }

    #[test]
    fn rejects_duplicates_across_and_within_batches() {
        let mut s = Shard::allocate(1, 3, 3, 4);
        s.ingest(&batch(&[(4, &[0.0; 4])])).unwrap();
        assert!(matches!(
            s.ingest(&batch(&[(4, &[0.0; 4])])),
            Err(StoreError::DuplicateRow(4))
        ));
        assert!(matches!(
            s.ingest(&batch(&[(5, &[0.0; 4]), (5, &[0.0; 4])])),
            Err(StoreError::DuplicateRow(5))
        ));
        // the rejected batch stored nothing
        assert_eq!(s.received(), 1);
    }

    #[test]
    fn rejects_wrong_width() {
        let mut s = Shard::allocate(1, 0, 2, 3);
        assert!(matches!(
            s.ingest(&batch(&[(0, &[1.0, 2.0])])),
            Err(StoreError::WrongWidth {
                expected: 3,
                got: 2,
                ..
            })
        ));
    }

    #[test]
    fn extract_round_trip_is_bit_exact() {
        let mut s = Shard::allocate(1, 3, 3, 2);
        let vals = [[-0.0, f64::MIN_POSITIVE / 4.0], [1e300, -1e-300], [f64::MAX, 3.5]];
        s.ingest(&batch(&[(5, &vals[2]), (3, &vals[0]), (4, &vals[1])]))
            .unwrap();
        let out = s.extract_rows(3, 3).unwrap();
        assert_eq!(out.indices, vec![3, 4, 5]);
        let bits: Vec<u64> = out.values.iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = vals.iter().flatten().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn extract_requires_complete_shard() {
        let s = Shard::allocate(1, 0, 2, 1);
        assert!(matches!(
            s.extract_rows(0, 1),
            Err(StoreError::Incomplete { missing: 2, .. })
        ));
    }

    #[test]
    fn extract_empty_and_out_of_range() {
        let s = Shard::from_block(1, 3, 1, vec![1.0, 2.0, 3.0]);
        assert!(s.extract_rows(4, 0).unwrap().is_empty());
        assert!(s.extract_rows(5, 2).is_err());
        assert!(s.extract_rows(2, 1).is_err());
    }
}
