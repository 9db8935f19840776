use std::collections::HashMap;
use std::sync::Mutex;

use super::{Layout, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixState {
    Filling,
    Ready,
    Released,
}

/// Driver-side metadata for one server-resident matrix.
#[derive(Debug, Clone)]
pub struct MatrixRecord {
    pub matrix_id: u64,
    pub session_id: u32,
    pub layout: Layout,
    pub state: MatrixState,
}

impl MatrixRecord {
    pub fn rows(&self) -> u64 {
        self.layout.rows
    }

    pub fn cols(&self) -> u64 {
        self.layout.cols
    }

    pub fn size_bytes(&self) -> u64 {
        self.layout.rows * self.layout.cols * 8
    }
}

struct Inner {
    next_id: u64,
    records: HashMap<u64, MatrixRecord>,
    used_bytes: u64,
}

/// Handle registry shared by every session on the driver.
///
/// Ids start at 1, increase strictly and are never reused. Matrix memory is
/// charged against a fixed byte budget when the handle is created.
pub struct HandleRegistry {
    inner: Mutex<Inner>,
    limit_bytes: u64,
}

impl HandleRegistry {
    pub fn new(limit_bytes: u64) -> Self {
        HandleRegistry {
            inner: Mutex::new(Inner {
                next_id: 1,
                records: HashMap::new(),
                used_bytes: 0,
            }),
            limit_bytes,
        }
    }

    pub fn limit_bytes(&self) -> u64 {
        self.limit_bytes
    }

    pub fn used_bytes(&self) -> u64 {
        self.inner.lock().unwrap().used_bytes
    }

    /// Registers a new matrix in the `filling` state.
    pub fn create(&self, session_id: u32, layout: Layout) -> Result<MatrixRecord, StoreError> {
        let required = layout
            .rows
            .checked_mul(layout.cols)
            .and_then(|n| n.checked_mul(8))
            .unwrap_or(u64::MAX);
        let mut inner = self.inner.lock().unwrap();
        let available = self.limit_bytes.saturating_sub(inner.used_bytes);
        if required > available {
            return Err(StoreError::Exhausted { required, available });
        }
        inner.used_bytes += required;
        let record = MatrixRecord {
            matrix_id: inner.next_id,
            session_id,
            layout,
            state: MatrixState::Filling,
        };
        inner.next_id += 1;
        inner.records.insert(record.matrix_id, record.clone());
        Ok(record)
    }

    /// Looks up a live matrix owned by `session_id`. Matrices of other
    /// sessions and released matrices are reported as unknown.
    pub fn get(&self, session_id: u32, matrix_id: u64) -> Result<MatrixRecord, StoreError> {
        let inner = self.inner.lock().unwrap();
        match inner.records.get(&matrix_id) {
            Some(r) if r.session_id == session_id && r.state != MatrixState::Released => Ok(r.clone()),
            _ => Err(StoreError::UnknownMatrix(matrix_id)),
        }
    }

    pub fn mark_ready(&self, matrix_id: u64) {
        if let Some(r) = self.inner.lock().unwrap().records.get_mut(&matrix_id) {
            if r.state == MatrixState::Filling {
                r.state = MatrixState::Ready;
            }
        }
    }

    /// Releases a matrix. Returns the record if it was live; releasing an
    /// already released matrix of the same session is a no-op.
    pub fn release(&self, session_id: u32, matrix_id: u64) -> Result<Option<MatrixRecord>, StoreError> {
        let mut inner = self.inner.lock().unwrap();
        let record = match inner.records.get_mut(&matrix_id) {
            Some(r) if r.session_id == session_id => r,
            _ => return Err(StoreError::UnknownMatrix(matrix_id)),
        };
        if record.state == MatrixState::Released {
            return Ok(None);
        }
        record.state = MatrixState::Released;
        let record = record.clone();
        inner.used_bytes -= record.size_bytes();
        Ok(Some(record))
    }

    /// Ids of all live matrices owned by a session.
    pub fn session_matrices(&self, session_id: u32) -> Vec<u64> {
        let inner = self.inner.lock().unwrap();
        let mut ids: Vec<u64> = inner
            .records
            .values()
            .filter(|r| r.session_id == session_id && r.state != MatrixState::Released)
            .map(|r| r.matrix_id)
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn live_count(&self) -> usize {
        let inner = self.inner.lock().unwrap();
        inner
            .records
            .values()
            .filter(|r| r.state != MatrixState::Released)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::plan_layout;

    #[test]
    fn ids_are_monotone_and_never_reused() {
        let reg = HandleRegistry::new(u64::MAX);
        let a = reg.create(1, plan_layout(10, 4, 4)).unwrap();
        let b = reg.create(1, plan_layout(10, 4, 4)).unwrap();
        assert_eq!((a.matrix_id, b.matrix_id), (1, 2));
        reg.release(1, 2).unwrap();
        assert_eq!(reg.create(2, plan_layout(1, 1, 1)).unwrap().matrix_id, 3);
    }

    #[test]
    fn budget_is_enforced_and_returned() {
        let reg = HandleRegistry::new(800);
        let a = reg.create(1, plan_layout(10, 10, 2)).unwrap();
        match reg.create(1, plan_layout(1, 1, 1)) {
            Err(StoreError::Exhausted {
                required: 8,
                available: 0,
            }) => {}
            other => panic!("{other:?}"),
        }
        reg.release(1, a.matrix_id).unwrap();
        assert_eq!(reg.used_bytes(), 0);
        assert!(reg.create(1, plan_layout(1, 1, 1)).is_ok());
    }

    #[test]
    fn sessions_are_isolated() {
        let reg = HandleRegistry::new(u64::MAX);
        let a = reg.create(1, plan_layout(2, 2, 1)).unwrap();
        assert!(reg.get(1, a.matrix_id).is_ok());
        assert!(matches!(reg.get(2, a.matrix_id), Err(StoreError::UnknownMatrix(_))));
        assert!(reg.release(2, a.matrix_id).is_err());
    }

    #[test]
    fn double_release_is_idempotent() {
        let reg = HandleRegistry::new(u64::MAX);
        let a = reg.create(1, plan_layout(2, 2, 1)).unwrap();
        assert!(reg.release(1, a.matrix_id).unwrap().is_some());
        assert!(reg.release(1, a.matrix_id).unwrap().is_none());
        assert!(reg.get(1, a.matrix_id).is_err());
        assert!(reg.session_matrices(1).is_empty());
    }
}
