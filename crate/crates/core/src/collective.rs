//! Collective operations for a fixed group of in-process participants.
//!
//! Routines are written SPMD-style: every rank runs the same code against its
//! own shard and meets the others only through [`Comm`]. Reductions sum the
//! contributions in rank order on every rank, so all ranks hold bit-identical
//! results and a run is reproducible for a fixed group size.

use std::sync::{Arc, Condvar, Mutex, RwLock};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CollectiveError {
    #[error("collective aborted by another participant")]
    Aborted,
    #[error("rank {rank} contributed {got} values, rank 0 contributed {expected}")]
    LengthMismatch { rank: usize, expected: usize, got: usize },
}

struct BarrierState {
    generation: u64,
    arrived: usize,
    aborted: bool,
}

struct Group {
    size: usize,
    state: Mutex<BarrierState>,
    cv: Condvar,
    slots: Vec<RwLock<Vec<f64>>>,
}

/// One participant's endpoint into its group.
#[derive(Clone)]
pub struct Comm {
    rank: usize,
    group: Arc<Group>,
}

/// Creates a group of `size` participants and returns their endpoints in
/// rank order.
pub fn group(size: usize) -> Vec<Comm> {
    assert!(size >= 1);
    let group = Arc::new(Group {
        size,
        state: Mutex::new(BarrierState {
            generation: 0,
            arrived: 0,
            aborted: false,
        }),
        cv: Condvar::new(),
        slots: (0..size).map(|_| RwLock::new(Vec::new())).collect(),
    });
    (0..size)
        .map(|rank| Comm {
            rank,
            group: group.clone(),
        })
        .collect()
}

/// Runs `f` on `size` scoped threads, one per rank, and returns the results
/// in rank order. A panicking rank aborts the group so the others unblock.
pub fn run_spmd<T, F>(size: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&Comm) -> T + Sync,
{
    let comms = group(size);
    std::thread::scope(|s| {
        let handles: Vec<_> = comms
            .iter()
            .map(|comm| {
                let f = &f;
                s.spawn(move || {
                    let guard = AbortOnUnwind(comm);
                    let out = f(comm);
                    std::mem::forget(guard);
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect()
    })
}

/// Aborts the group if dropped during unwinding.
pub struct AbortOnUnwind<'a>(pub &'a Comm);

impl Drop for AbortOnUnwind<'_> {
    fn drop(&mut self) {
        if std::thread::panicking() {
            self.0.abort();
        }
    }
}

impl Comm {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.group.size
    }

    pub fn is_root(&self) -> bool {
        self.rank == 0
    }

    /// Marks the group as failed and wakes every waiting participant.
    pub fn abort(&self) {
        let mut st = self.group.state.lock().unwrap();
        st.aborted = true;
        self.group.cv.notify_all();
    }

    pub fn barrier(&self) -> Result<(), CollectiveError> {
        let g = &*self.group;
        let mut st = g.state.lock().unwrap();
        if st.aborted {
            return Err(CollectiveError::Aborted);
        }
        st.arrived += 1;
        if st.arrived == g.size {
            st.arrived = 0;
            st.generation += 1;
            g.cv.notify_all();
            return Ok(());
        }
        let generation = st.generation;
        while st.generation == generation && !st.aborted {
            st = g.cv.wait(st).unwrap();
        }
        if st.generation == generation {
            Err(CollectiveError::Aborted)
        } else {
            Ok(())
        }
    }

    /// Element-wise sum over all ranks, written back into `buf` on every rank.
    pub fn all_reduce_sum(&self, buf: &mut [f64]) -> Result<(), CollectiveError> {
        if self.group.size == 1 {
            return Ok(());
        }
        {
            let mut slot = self.group.slots[self.rank].write().unwrap();
            slot.clear();
            slot.extend_from_slice(buf);
        }
        self.barrier()?;
        let result = self.sum_slots(buf);
        self.barrier()?;
        result
    }

    fn sum_slots(&self, buf: &mut [f64]) -> Result<(), CollectiveError> {
        let slots: Vec<_> = self.group.slots.iter().map(|s| s.read().unwrap()).collect();
        for (rank, slot) in slots.iter().enumerate() {
            if slot.len() != slots[0].len() {
                return Err(CollectiveError::LengthMismatch {
                    rank,
                    expected: slots[0].len(),
                    got: slot.len(),
                });
            }
        }
        buf.copy_from_slice(&slots[0]);
        for slot in &slots[1..] {
            for (b, v) in buf.iter_mut().zip(slot.iter()) {
                *b += v;
            }
        }
        Ok(())
    }

    /// Replaces `buf` on every rank with the root's contents.
    pub fn broadcast(&self, root: usize, buf: &mut Vec<f64>) -> Result<(), CollectiveError> {
        if self.group.size == 1 {
            return Ok(());
        }
        if self.rank == root {
            let mut slot = self.group.slots[root].write().unwrap();
            slot.clear();
            slot.extend_from_slice(buf);
        }
        self.barrier()?;
        if self.rank != root {
            let slot = self.group.slots[root].read().unwrap();
            buf.clear();
            buf.extend_from_slice(&slot);
        }
        self.barrier()
    }

    /// Concatenates every rank's contribution in rank order.
    pub fn all_gather(&self, local: &[f64]) -> Result<Vec<Vec<f64>>, CollectiveError> {
        if self.group.size == 1 {
            return Ok(vec![local.to_vec()]);
        }
        {
            let mut slot = self.group.slots[self.rank].write().unwrap();
            slot.clear();
            slot.extend_from_slice(local);
        }
        self.barrier()?;
        let gathered = self.group.slots.iter().map(|s| s.read().unwrap().clone()).collect();
        self.barrier()?;
        Ok(gathered)
    }

    /// True on every rank if any rank passed `true`.
    pub fn any(&self, flag: bool) -> Result<bool, CollectiveError> {
        let mut v = [flag as u8 as f64];
        self.all_reduce_sum(&mut v)?;
        Ok(v[0] > 0.0)
    }

    /// Sum of one scalar over all ranks.
    pub fn sum(&self, value: f64) -> Result<f64, CollectiveError> {
        let mut v = [value];
        self.all_reduce_sum(&mut v)?;
        Ok(v[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_reduce_sums_in_rank_order() {
        let out = run_spmd(4, |c| {
            let mut v = vec![c.rank() as f64, 1.0];
            c.all_reduce_sum(&mut v).unwrap();
            v
        });
        for v in out {
            assert_eq!(v, vec![6.0, 4.0]);
        }
    }

    #[test]
    fn results_identical_on_every_rank() {
        let out = run_spmd(8, |c| {
            let mut v: Vec<f64> = (0..100).map(|i| ((i * (c.rank() + 1)) as f64).sin() * 1e-3).collect();
            for _ in 0..5 {
                c.all_reduce_sum(&mut v).unwrap();
            }
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        });
        assert!(out.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn broadcast_and_gather() {
        let out = run_spmd(3, |c| {
            let mut v = if c.rank() == 2 { vec![7.0, 8.0] } else { vec![] };
            c.broadcast(2, &mut v).unwrap();
            let g = c.all_gather(&[c.rank() as f64]).unwrap();
            (v, g)
        });
        for (v, g) in out {
            assert_eq!(v, vec![7.0, 8.0]);
            assert_eq!(g, vec![vec![0.0], vec![1.0], vec![2.0]]);
        }
    }

    #[test]
    fn abort_unblocks_waiters() {
        let out = run_spmd(3, |c| {
            if c.rank() == 1 {
                c.abort();
                return Err(CollectiveError::Aborted);
            }
            c.barrier()
        });
        assert!(out.iter().all(|r| r.is_err()));
    }

    #[test]
    fn mismatched_lengths_are_reported() {
        let out = run_spmd(2, |c| {
            let mut v = vec![0.0; c.rank() + 1];
            c.all_reduce_sum(&mut v)
        });
        assert!(out
            .iter()
            .all(|r| matches!(r, Err(CollectiveError::LengthMismatch { .. }))));
    }
}
