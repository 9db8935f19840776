use crate::protocol::{MatrixInfo, RowBatch, RowRange};

use super::StoreError;

/// Block-row assignment of a matrix to `p` workers.
///
/// Worker `w` owns rows `[w·b, min((w+1)·b, rows))` with `b = ⌈rows/p⌉`, so
/// `owner(i) = i / b`. Trailing workers may own an empty range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub rows: u64,
    pub cols: u64,
    pub ranges: Vec<RowRange>,
}

/// Canonical block-row layout of a `rows × cols` matrix over `workers` workers.
pub fn plan_layout(rows: u64, cols: u64, workers: usize) -> Layout {
    assert!(workers >= 1, "a layout needs at least one worker");
    let block = rows.div_ceil(workers as u64);
    let ranges = (0..workers)
        .map(|w| {
            let start = (w as u64 * block).min(rows);
            let end = ((w as u64 + 1) * block).min(rows);
            RowRange {
                worker_id: w as u16,
                row_start: start,
                row_end: end,
            }
        })
        .collect();
    Layout { rows, cols, ranges }
}

impl Layout {
    pub fn workers(&self) -> usize {
        self.ranges.len()
    }

    fn block(&self) -> u64 {
        self.rows.div_ceil(self.ranges.len() as u64)
    }

    /// Position in `ranges` of the worker owning `row`.
    pub fn owner(&self, row: u64) -> Option<usize> {
        (row < self.rows).then(|| (row / self.block()) as usize)
    }

    pub fn range(&self, rank: usize) -> RowRange {
        self.ranges[rank]
    }

    pub fn to_info(&self, matrix_id: u64) -> MatrixInfo {
        MatrixInfo {
            matrix_id,
            rows: self.rows,
            cols: self.cols,
            ranges: self.ranges.clone(),
        }
    }

    /// Rebuilds a layout from a `MATRIX_INFO`, checking that its ranges are
    /// sorted, disjoint and cover `[0, rows)`.
    pub fn from_info(info: &MatrixInfo) -> Result<Layout, StoreError> {
        let mut next = 0;
        for r in &info.ranges {
            if r.row_start != next || r.row_end < r.row_start {
                return Err(StoreError::BadLayout(format!(
                    "range [{}, {}) does not continue at row {next}",
                    r.row_start, r.row_end
                )));
            }
            next = r.row_end;
        }
        if next != info.rows || info.ranges.is_empty() {
            return Err(StoreError::BadLayout(format!(
                "ranges cover [0, {next}) but the matrix has {} rows",
                info.rows
            )));
        }
        Ok(Layout {
            rows: info.rows,
            cols: info.cols,
            ranges: info.ranges.clone(),
        })
    }
}

/// Splits rows into one batch per worker, keeping input order within each
/// batch. Rows must all have width `layout.cols`.
pub fn route_rows<'a, I>(layout: &Layout, matrix_id: u64, rows: I) -> Result<Vec<RowBatch>, StoreError>
where
    I: IntoIterator<Item = (u64, &'a [f64])>,
{
    let mut batches: Vec<RowBatch> = (0..layout.workers()).map(|_| RowBatch::new(matrix_id)).collect();
    for (index, values) in rows {
        let owner = layout.owner(index).ok_or(StoreError::RowOutOfBounds {
            row: index,
            rows: layout.rows,
        })?;
        if values.len() as u64 != layout.cols {
            return Err(StoreError::WrongWidth {
                row: index,
                expected: layout.cols as usize,
                got: values.len(),
            });
        }
        batches[owner].push_row(index, values);
    }
    Ok(batches)
}
