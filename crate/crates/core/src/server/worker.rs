use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::net::TcpStream;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::Ordering;
use std::sync::{mpsc, Arc, Mutex};
use std::time::Instant;

use super::{send_reply, Shared};
use crate::collective::Comm;
use crate::library::{RankOutput, Routine, TaskContext};
use crate::protocol::{write_frame, ErrorCode, FrameReader, Message, ParamMap, ProtocolError, RowRange};
use crate::solver::{LocalBlock, SolverError};
use crate::store::{Shard, StoreError};

enum Slot {
    Filling { session: u32, shard: Arc<Mutex<Shard>> },
    Ready { session: u32, shard: Arc<Shard> },
}

/// Shards held by one worker, keyed by matrix id.
#[derive(Default)]
pub(crate) struct WorkerState {
    shards: Mutex<HashMap<u64, Slot>>,
}

impl WorkerState {
    pub fn allocate(&self, session: u32, matrix_id: u64, range: RowRange, cols: usize) {
        let shard = Shard::allocate(matrix_id, range.row_start, range.len() as usize, cols);
        self.shards.lock().unwrap().insert(
            matrix_id,
            Slot::Filling {
                session,
                shard: Arc::new(Mutex::new(shard)),
            },
        );
    }

    /// Rows still missing from a filling shard; 0 for a ready one.
    pub fn missing(&self, matrix_id: u64) -> Option<usize> {
        match self.shards.lock().unwrap().get(&matrix_id)? {
            Slot::Filling { shard, .. } => Some(shard.lock().unwrap().missing()),
            Slot::Ready { .. } => Some(0),
        }
    }

    /// Freezes a complete filling shard.
    pub fn seal(&self, matrix_id: u64) {
        let mut shards = self.shards.lock().unwrap();
        if let Some(Slot::Filling { session, shard }) = shards.get(&matrix_id) {
            let session = *session;
            let taken = std::mem::replace(&mut *shard.lock().unwrap(), Shard::allocate(matrix_id, 0, 0, 1));
            shards.insert(
                matrix_id,
                Slot::Ready {
                    session,
                    shard: Arc::new(taken),
                },
            );
        }
    }

    pub fn remove(&self, matrix_id: u64) {
        self.shards.lock().unwrap().remove(&matrix_id);
    }

    fn ready(&self, session: u32, matrix_id: u64) -> Result<Arc<Shard>, StoreError> {
        match self.shards.lock().unwrap().get(&matrix_id) {
            Some(Slot::Ready { session: s, shard }) if *s == session => Ok(shard.clone()),
            Some(Slot::Filling { session: s, .. }) if *s == session => Err(StoreError::NotReady(matrix_id)),
            _ => Err(StoreError::UnknownMatrix(matrix_id)),
        }
    }

    fn filling(&self, session: u32, matrix_id: u64) -> Result<Arc<Mutex<Shard>>, StoreError> {
        match self.shards.lock().unwrap().get(&matrix_id) {
            Some(Slot::Filling { session: s, shard }) if *s == session => Ok(shard.clone()),
            _ => Err(StoreError::UnknownMatrix(matrix_id)),
        }
    }

    fn insert_ready(&self, session: u32, shard: Shard) {
        self.shards.lock().unwrap().insert(
            shard.matrix_id(),
            Slot::Ready {
                session,
                shard: Arc::new(shard),
            },
        );
    }
}

pub(crate) struct OutputSlot {
    pub matrix_id: u64,
    pub range: RowRange,
    pub cols: usize,
}

pub(crate) struct TaskJob {
    pub comm: Comm,
    pub session: u32,
    pub routine: Arc<dyn Routine>,
    pub params: Arc<ParamMap>,
    /// `(matrix_id, global_rows)` per input.
    pub inputs: Vec<(u64, u64)>,
    /// This worker's slice of every output.
    pub outputs: Vec<OutputSlot>,
    pub reply: mpsc::Sender<RankResult>,
}

pub(crate) struct RankResult {
    pub rank: usize,
    pub result: Result<ParamMap, SolverError>,
    pub seconds: f64,
}

pub(crate) enum Job {
    Run(Box<TaskJob>),
    Stop,
}

pub(crate) fn job_loop(shared: Arc<Shared>, w: usize, jobs: mpsc::Receiver<Job>) {
    while let Ok(Job::Run(job)) = jobs.recv() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| run_job(&shared.workers[w], &job)))
            .unwrap_or_else(|_| Err(SolverError::Numerical("routine panicked".into())));
        if result.is_err() {
            // Release peers that may be waiting in a collective.
            job.comm.abort();
        }
        let _ = job.reply.send(RankResult {
            rank: job.comm.rank(),
            result,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
}

fn run_job(worker: &WorkerState, job: &TaskJob) -> Result<ParamMap, SolverError> {
    let shards = job
        .inputs
        .iter()
        .map(|&(id, _)| worker.ready(job.session, id))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| SolverError::InvalidArguments(e.to_string()))?;
    let blocks: Vec<LocalBlock<'_>> = shards
        .iter()
        .zip(&job.inputs)
        .map(|(s, &(_, rows))| LocalBlock::new(s.row_start(), rows, s.cols(), s.data()))
        .collect();
    let ranges: Vec<RowRange> = job.outputs.iter().map(|o| o.range).collect();
    let ctx = TaskContext {
        comm: &job.comm,
        inputs: &blocks,
        params: &job.params,
        outputs: &ranges,
    };
    let RankOutput { blocks: out, scalars } = job.routine.run(&ctx)?;
    if out.len() != job.outputs.len() {
        return Err(SolverError::Numerical(format!(
            "routine produced {} outputs, planned {}",
            out.len(),
            job.outputs.len()
        )));
    }
    for (data, slot) in out.iter().zip(&job.outputs) {
        let want = slot.range.len() as usize * slot.cols;
        if data.len() != want {
            return Err(SolverError::Numerical(format!(
                "output {} has {} values on this worker, expected {want}",
                slot.matrix_id,
                data.len()
            )));
        }
    }
    for (data, slot) in out.into_iter().zip(&job.outputs) {
        worker.insert_ready(
            job.session,
            Shard::from_block(slot.matrix_id, slot.range.row_start, slot.cols, data),
        );
    }
    Ok(scalars)
}

/// Serves one row-traffic connection to worker `w`.
pub(crate) fn serve_rows(shared: Arc<Shared>, w: usize, stream: TcpStream) {
    let Ok(write_half) = stream.try_clone() else { return };
    let mut out = BufWriter::new(write_half);
    let mut frames = FrameReader::new(stream);
    loop {
        let (session, msg) = match frames.read_frame() {
            Ok(Some(frame)) => frame,
            Ok(None) => return,
            Err(ProtocolError::Io(_)) | Err(ProtocolError::TruncatedStream { .. }) => return,
            Err(e) => {
                // Undecodable bytes: report once and drop the connection.
                let _ = write_frame(&mut out, &Message::error(ErrorCode::BadRequest, e.to_string()), 0);
                let _ = out.flush();
                return;
            }
        };
        let reply = handle_row_message(&shared, w, session, msg);
        if !send_reply(&mut out, &reply, session) {
            return;
        }
    }
}

fn handle_row_message(shared: &Shared, w: usize, session: u32, msg: Message) -> Message {
    let Some(entry) = shared.session(session) else {
        return Message::error(ErrorCode::BadRequest, format!("no active session {session}"));
    };
    if w >= entry.workers {
        return Message::error(
            ErrorCode::BadRequest,
            format!("worker {w} is not allocated to session {session}"),
        );
    }
    let worker = &shared.workers[w];
    match msg {
        Message::SendRows(batch) => {
            let shard = match worker.filling(session, batch.matrix_id) {
                Ok(s) => s,
                Err(_) => {
                    return match worker.ready(session, batch.matrix_id) {
                        Ok(_) => Message::error(
                            ErrorCode::BadRequest,
                            format!("matrix {} is already complete", batch.matrix_id),
                        ),
                        Err(e) => store_error(e),
                    }
                }
            };
            let result = shard.lock().unwrap().ingest(&batch);
            match result {
                Ok(_) => {
                    entry
                        .bytes_in
                        .fetch_add(8 * batch.values.len() as u64, Ordering::Relaxed);
                    Message::RowsAck {
                        matrix_id: batch.matrix_id,
                        rows_received: batch.len() as u32,
                    }
                }
                Err(e) => store_error(e),
            }
        }
        Message::FetchRows {
            matrix_id,
            row_start,
            row_count,
        } => match worker
            .ready(session, matrix_id)
            .and_then(|s| s.extract_rows(row_start, row_count as usize))
        {
            Ok(batch) => {
                entry
                    .bytes_out
                    .fetch_add(8 * batch.values.len() as u64, Ordering::Relaxed);
                Message::RowsData(batch)
            }
            Err(e) => store_error(e),
        },
        other => Message::error(
            ErrorCode::BadRequest,
            format!(
                "message type 0x{:02x} is not accepted on a worker channel",
                other.msg_type()
            ),
        ),
    }
}

pub(crate) fn store_error(e: StoreError) -> Message {
    let code = match e {
        StoreError::UnknownMatrix(_) => ErrorCode::UnknownMatrix,
        StoreError::Incomplete { .. } | StoreError::NotReady(_) => ErrorCode::IncompleteMatrix,
        StoreError::Exhausted { .. } => ErrorCode::ResourceExhausted,
        _ => ErrorCode::BadRequest,
    };
    Message::error(code, e.to_string())
}
