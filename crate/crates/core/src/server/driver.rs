use std::io::BufWriter;
use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};

use super::worker::{store_error, Job, OutputSlot, RankResult, TaskJob};
use super::{send_reply, SessionEntry, Shared, TaskRecord};
use crate::collective::{self, CollectiveError};
use crate::library::{check_schema, InputMeta, Library};
use crate::protocol::{ErrorCode, FrameReader, MatrixInfo, Message, ParamMap, TaskRequest, PROTOCOL_VERSION};
use crate::solver::SolverError;
use crate::store::{plan_layout, MatrixState};

struct Session<'a> {
    shared: &'a Shared,
    id: u32,
    workers: usize,
    /// Registered libraries; `lib_id` is the index plus one.
    libraries: Vec<&'a Library>,
}

/// Serves one client driver connection from handshake to close.
pub(crate) fn serve_client(shared: Arc<Shared>, stream: TcpStream) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let Ok(write_half) = stream.try_clone() else { return };
    let mut out = BufWriter::new(write_half);
    let mut frames = FrameReader::new(stream);

    let (requested, version) = match frames.read_frame() {
        Ok(Some((
            _,
            Message::Handshake {
                protocol_version,
                requested_workers,
            },
        ))) => (requested_workers as usize, protocol_version),
        Ok(Some((s, other))) => {
            let msg = format!("expected HANDSHAKE, got message type 0x{:02x}", other.msg_type());
            send_reply(&mut out, &Message::error(ErrorCode::BadRequest, msg), s);
            return;
        }
        _ => return,
    };
    let refusal = if version != PROTOCOL_VERSION {
        Some(Message::error(
            ErrorCode::VersionMismatch,
            format!("protocol version {version} is not supported (server speaks {PROTOCOL_VERSION})"),
        ))
    } else if requested == 0 {
        Some(Message::error(ErrorCode::BadRequest, "requested_workers must be >= 1"))
    } else if requested > shared.workers.len() {
        Some(Message::error(
            ErrorCode::InsufficientWorkers,
            format!("requested {requested} workers, the pool has {}", shared.workers.len()),
        ))
    } else {
        None
    };
    if let Some(err) = refusal {
        log::info!("refused handshake from {peer}: {err:?}");
        send_reply(&mut out, &err, 0);
        return;
    }

    let id = shared.next_session.fetch_add(1, Ordering::SeqCst);
    shared.sessions.lock().unwrap().insert(
        id,
        Arc::new(SessionEntry {
            workers: requested,
            bytes_in: AtomicU64::new(0),
            bytes_out: AtomicU64::new(0),
        }),
    );
    log::info!("session {id} opened from {peer} with {requested} workers");
    let ack = Message::HandshakeAck {
        session_id: id,
        workers: shared.endpoints[..requested].to_vec(),
    };
    let mut session = Session {
        shared: &shared,
        id,
        workers: requested,
        libraries: Vec::new(),
    };
    if send_reply(&mut out, &ack, id) {
        loop {
            let (frame_session, msg) = match frames.read_frame() {
                Ok(Some(frame)) => frame,
                Ok(None) => break,
                Err(e) => {
                    log::warn!("session {id}: connection error: {e}");
                    break;
                }
            };
            let closing = matches!(msg, Message::CloseSession);
            let reply = if frame_session != id {
                Message::error(
                    ErrorCode::BadRequest,
                    format!("frame carries session {frame_session}, connection belongs to {id}"),
                )
            } else {
                session.handle(msg)
            };
            if !send_reply(&mut out, &reply, id) || closing {
                break;
            }
        }
    }
    session.close();
}

impl Session<'_> {
    fn handle(&mut self, msg: Message) -> Message {
        match msg {
            Message::RegisterLibrary { name, path } => self.register(&name, &path),
            Message::CreateMatrix { rows, cols } => self.create(rows, cols),
            Message::SendComplete { matrix_id } => self.finalize(matrix_id),
            Message::RunTask(req) => self.run(req),
            Message::ReleaseMatrix { matrix_id } => match self.release(matrix_id) {
                Ok(()) => Message::ReleaseMatrix { matrix_id },
                Err(e) => e,
            },
            Message::CloseSession => Message::CloseSession,
            other => Message::error(
                ErrorCode::BadRequest,
                format!(
                    "message type 0x{:02x} is not accepted on the driver channel",
                    other.msg_type()
                ),
            ),
        }
    }

    fn register(&mut self, name: &str, path: &str) -> Message {
        let Some(lib) = self.shared.libraries.iter().find(|l| l.name == name) else {
            return Message::error(ErrorCode::UnknownLibrary, format!("no library named {name:?}"));
        };
        if lib.path != path {
            return Message::error(
                ErrorCode::UnknownLibrary,
                format!("library {name:?} is not available at {path:?}"),
            );
        }
        let pos = match self.libraries.iter().position(|l| l.name == name) {
            Some(pos) => pos,
            None => {
                self.libraries.push(lib);
                self.libraries.len() - 1
            }
        };
        Message::LibraryAck { lib_id: pos as u16 + 1 }
    }

    fn create(&mut self, rows: u64, cols: u64) -> Message {
        if rows == 0 || cols == 0 {
            return Message::error(
                ErrorCode::BadRequest,
                format!("cannot create an empty {rows} × {cols} matrix"),
            );
        }
        match self.allocate(rows, cols) {
            Ok(info) => Message::MatrixInfo(info),
            Err(e) => e,
        }
    }

    /// Registers a filling matrix and pre-allocates its shards.
    fn allocate(&self, rows: u64, cols: u64) -> Result<MatrixInfo, Message> {
        if cols > u32::MAX as u64 {
            return Err(Message::error(
                ErrorCode::BadRequest,
                format!("{cols} columns is too wide"),
            ));
        }
        let layout = plan_layout(rows, cols, self.workers);
        let record = self.shared.registry.create(self.id, layout).map_err(store_error)?;
        for (w, range) in record.layout.ranges.iter().enumerate() {
            self.shared.workers[w].allocate(self.id, record.matrix_id, *range, cols as usize);
        }
        Ok(record.layout.to_info(record.matrix_id))
    }

    fn finalize(&self, matrix_id: u64) -> Message {
        let record = match self.shared.registry.get(self.id, matrix_id) {
            Ok(r) => r,
            Err(e) => return store_error(e),
        };
        if record.state == MatrixState::Ready {
            return Message::MatrixReady { matrix_id };
        }
        let workers = &self.shared.workers[..record.layout.workers()];
        let missing: usize = workers.iter().map(|w| w.missing(matrix_id).unwrap_or(0)).sum();
        if missing > 0 {
            let noun = if missing == 1 { "row" } else { "rows" };
            return Message::error(
                ErrorCode::IncompleteMatrix,
                format!("matrix {matrix_id} is incomplete: {missing} {noun} missing"),
            );
        }
        workers.iter().for_each(|w| w.seal(matrix_id));
        self.shared.registry.mark_ready(matrix_id);
        Message::MatrixReady { matrix_id }
    }

    fn release(&self, matrix_id: u64) -> Result<(), Message> {
        if let Some(record) = self.shared.registry.release(self.id, matrix_id).map_err(store_error)? {
            for w in &self.shared.workers[..record.layout.workers()] {
                w.remove(matrix_id);
            }
        }
        Ok(())
    }

    fn run(&self, req: TaskRequest) -> Message {
        let lib = match self.libraries.get((req.lib_id as usize).wrapping_sub(1)) {
            Some(lib) => *lib,
            None => {
                return Message::error(
                    ErrorCode::UnknownLibrary,
                    format!("library id {} is not registered in this session", req.lib_id),
                )
            }
        };
        let Some(routine) = lib.routine(&req.routine) else {
            return Message::error(
                ErrorCode::UnknownRoutine,
                format!("library {:?} has no routine {:?}", lib.name, req.routine),
            );
        };
        if let Err(e) = check_schema(&*routine, req.inputs.len(), &req.params) {
            return solver_error(e);
        }
        let mut inputs = Vec::with_capacity(req.inputs.len());
        for &id in &req.inputs {
            match self.shared.registry.get(self.id, id) {
                Ok(r) if r.state == MatrixState::Ready => inputs.push(InputMeta {
                    matrix_id: id,
                    rows: r.rows(),
                    cols: r.cols(),
                }),
                Ok(_) => {
                    return Message::error(
                        ErrorCode::IncompleteMatrix,
                        format!("input matrix {id} is still filling"),
                    )
                }
                Err(e) => return store_error(e),
            }
        }
        let shapes = match routine.plan(&inputs, &req.params) {
            Ok(s) => s,
            Err(e) => return solver_error(e),
        };

        let mut outputs: Vec<MatrixInfo> = Vec::with_capacity(shapes.len());
        for shape in &shapes {
            let layout = plan_layout(shape.rows, shape.cols, self.workers);
            match self.shared.registry.create(self.id, layout) {
                Ok(r) => outputs.push(r.layout.to_info(r.matrix_id)),
                Err(e) => {
                    self.discard(&outputs);
                    return store_error(e);
                }
            }
        }

        let params = Arc::new(req.params);
        let (tx, rx) = mpsc::channel::<RankResult>();
        {
            let _order = self.shared.dispatch.lock().unwrap();
            for (w, comm) in collective::group(self.workers).into_iter().enumerate() {
                let job = TaskJob {
                    comm,
                    session: self.id,
                    routine: routine.clone(),
                    params: params.clone(),
                    inputs: inputs.iter().map(|i| (i.matrix_id, i.rows)).collect(),
                    outputs: outputs
                        .iter()
                        .map(|o| OutputSlot {
                            matrix_id: o.matrix_id,
                            range: o.ranges[w],
                            cols: o.cols as usize,
                        })
                        .collect(),
                    reply: tx.clone(),
                };
                let _ = self.shared.job_queues[w].lock().unwrap().send(Job::Run(Box::new(job)));
            }
        }
        drop(tx);
        let mut results: Vec<RankResult> = rx.iter().collect();
        results.sort_by_key(|r| r.rank);
        let compute_seconds = results.iter().map(|r| r.seconds).fold(0.0, f64::max);

        let outcome = if results.len() < self.workers {
            Err(SolverError::Numerical(
                "a worker stopped before finishing the task".into(),
            ))
        } else {
            first_error(&mut results).map_or_else(|| Ok(results.swap_remove(0).result.unwrap()), Err)
        };

        let input_bytes = inputs.iter().map(|i| i.rows * i.cols * 8).sum();
        let mut record = TaskRecord {
            session_id: self.id,
            routine: req.routine.clone(),
            inputs: inputs.iter().map(|i| (i.matrix_id, i.rows, i.cols)).collect(),
            outputs: Vec::new(),
            input_bytes,
            compute_seconds,
            scalars: ParamMap::new(),
            error: None,
        };
        let reply = match outcome {
            Ok(scalars) => {
                for o in &outputs {
                    self.shared.registry.mark_ready(o.matrix_id);
                }
                record.outputs = outputs.iter().map(|o| o.matrix_id).collect();
                record.scalars = scalars.clone();
                Message::TaskResult {
                    status: 0,
                    outputs,
                    scalars,
                }
            }
            Err(e) => {
                self.discard(&outputs);
                record.error = Some(e.to_string());
                solver_error(e)
            }
        };
        log::info!("{}", task_line(&record));
        self.shared.task_log.lock().unwrap().push(record);
        reply
    }

    /// Drops planned outputs of a failed or refused task.
    fn discard(&self, outputs: &[MatrixInfo]) {
        for o in outputs {
            let _ = self.release(o.matrix_id);
        }
    }

    fn close(&self) {
        let ids = self.shared.registry.session_matrices(self.id);
        for &id in &ids {
            let _ = self.release(id);
        }
        let entry = self.shared.sessions.lock().unwrap().remove(&self.id);
        let (bytes_in, bytes_out) = entry
            .map(|e| (e.bytes_in.load(Ordering::Relaxed), e.bytes_out.load(Ordering::Relaxed)))
            .unwrap_or_default();
        log::info!(
            "session {} closed: released={} bytes_in={bytes_in} bytes_out={bytes_out}",
            self.id,
            ids.len()
        );
    }
}

/// The most informative failure among the ranks: a routine's own error is
/// preferred over the aborts it caused on its peers.
fn first_error(results: &mut [RankResult]) -> Option<SolverError> {
    let pos = results
        .iter()
        .position(|r| matches!(&r.result, Err(e) if !matches!(e, SolverError::Collective(CollectiveError::Aborted))))
        .or_else(|| results.iter().position(|r| r.result.is_err()))?;
    std::mem::replace(&mut results[pos].result, Ok(ParamMap::new())).err()
}

fn solver_error(e: SolverError) -> Message {
    let code = match e {
        SolverError::InvalidArguments(_) => ErrorCode::SchemaViolation,
        SolverError::Resource(_) => ErrorCode::ResourceExhausted,
        SolverError::Numerical(_) | SolverError::Collective(_) => ErrorCode::NumericalFailure,
    };
    Message::error(code, e.to_string())
}

/// One `key=value` log line per task.
fn task_line(r: &TaskRecord) -> String {
    let inputs: Vec<String> = r.inputs.iter().map(|(id, m, n)| format!("{id}:{m}x{n}")).collect();
    let mut line = format!(
        "task session={} routine={} inputs={} input_bytes={} compute_s={:.6}",
        r.session_id,
        r.routine,
        inputs.join(","),
        r.input_bytes,
        r.compute_seconds
    );
    match &r.error {
        Some(e) => line.push_str(&format!(" status=error error={e:?}")),
        None => {
            line.push_str(" status=ok");
            for (k, v) in r.scalars.iter() {
                line.push_str(&format!(" {k}={v}"));
            }
        }
    }
    line
}
