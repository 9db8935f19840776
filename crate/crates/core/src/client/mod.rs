//! Client SDK: sessions, matrix handles and routine calls.
//!
//! A [`Session`] holds one driver connection and one socket per allocated
//! worker. Matrices are uploaded straight from a [`LocalMatrix`] to the
//! workers that own their rows, one batch in flight per worker socket.

mod builtin;
mod matrix;

pub use builtin::{Builtin, CgOptions, CgSummary, SvdOptions, SvdResult};
pub use matrix::LocalMatrix;

use std::io::{self, BufWriter, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::protocol::{
    write_frame, ErrorCode, FrameReader, MatrixInfo, Message, ParamMap, ProtocolError, RowBatch, TaskRequest,
    WorkerEndpoint, PROTOCOL_VERSION,
};
use crate::store::{Layout, StoreError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connection error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("server error {code}: {message}")]
    Server { code: u16, message: String },
    #[error("unexpected reply 0x{got:02x} to {request}")]
    UnexpectedReply { request: &'static str, got: u8 },
    #[error("server closed the connection")]
    Disconnected,
    #[error("matrix handle {0} is no longer valid")]
    InvalidHandle(u64),
    #[error("session is closed")]
    SessionClosed,
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("bad reply: {0}")]
    BadReply(String),
}

impl ClientError {
    /// The protocol error code, for server-side errors.
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Server { code, .. } => ErrorCode::from_u16(*code),
            _ => None,
        }
    }
}

impl From<StoreError> for ClientError {
    fn from(e: StoreError) -> Self {
        ClientError::BadReply(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Driver address, `host:port`.
    pub address: String,
    pub workers: u16,
    /// Rows per `SEND_ROWS` / `FETCH_ROWS` batch.
    pub batch_rows: usize,
    /// Socket read/write timeout; `None` waits indefinitely.
    pub timeout: Option<Duration>,
}

impl ClientConfig {
    pub fn new(address: impl Into<String>, workers: u16) -> Self {
        ClientConfig {
            address: address.into(),
            workers,
            batch_rows: 128,
            timeout: None,
        }
    }

    pub fn batch_rows(mut self, rows: usize) -> Self {
        self.batch_rows = rows.max(1);
        self
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }
}

/// A request-reply channel over one socket.
struct Channel {
    reader: FrameReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    session: u32,
}

impl Channel {
    fn open(addr: &str, timeout: Option<Duration>) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(timeout)?;
        stream.set_write_timeout(timeout)?;
        Ok(Channel {
            writer: BufWriter::with_capacity(256 * 1024, stream.try_clone()?),
            reader: FrameReader::new(stream),
            session: 0,
        })
    }

    fn call(&mut self, msg: &Message) -> Result<Message, ClientError> {
        write_frame(&mut self.writer, msg, self.session)?;
        self.writer.flush()?;
        match self.reader.read_frame()? {
            Some((_, Message::Error { code, message })) => Err(ClientError::Server { code, message }),
            Some((_, reply)) => Ok(reply),
            None => Err(ClientError::Disconnected),
        }
    }

    fn shutdown(&self) {
        let _ = self.reader.get_ref().shutdown(Shutdown::Both);
    }
}

fn unexpected(request: &'static str, got: &Message) -> ClientError {
    ClientError::UnexpectedReply {
        request,
        got: got.msg_type(),
    }
}

/// Proxy for a server-resident matrix.
#[derive(Debug, Clone)]
pub struct MatrixHandle {
    info: MatrixInfo,
    session_id: u32,
    valid: Arc<AtomicBool>,
}

impl MatrixHandle {
    fn new(info: MatrixInfo, session_id: u32) -> Self {
        MatrixHandle {
            info,
            session_id,
            valid: Arc::new(AtomicBool::new(true)),
        }
    }

    pub fn id(&self) -> u64 {
        self.info.matrix_id
    }

    pub fn rows(&self) -> u64 {
        self.info.rows
    }

    pub fn cols(&self) -> u64 {
        self.info.cols
    }

    pub fn info(&self) -> &MatrixInfo {
        &self.info
    }

    pub fn is_valid(&self) -> bool {
        self.valid.load(Ordering::SeqCst)
    }
}

/// Outputs of one routine call.
#[derive(Debug)]
pub struct TaskOutput {
    pub outputs: Vec<MatrixHandle>,
    pub scalars: ParamMap,
}

/// A library registered in a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LibraryRef {
    pub lib_id: u16,
    session_id: u32,
}

pub struct Session {
    id: u32,
    config: ClientConfig,
    endpoints: Vec<WorkerEndpoint>,
    driver: Mutex<Channel>,
    workers: Vec<Mutex<Channel>>,
    closed: AtomicBool,
    /// Validity flags of every handle handed out, cleared on close.
    handles: Mutex<Vec<Arc<AtomicBool>>>,
}

impl Session {
    /// Handshakes with the driver and opens one socket per allocated worker.
    pub fn connect(config: ClientConfig) -> Result<Session, ClientError> {
        let mut driver = Channel::open(&config.address, config.timeout)?;
        let reply = driver.call(&Message::Handshake {
            protocol_version: PROTOCOL_VERSION,
            requested_workers: config.workers,
        })?;
        let Message::HandshakeAck { session_id, workers } = reply else {
            return Err(unexpected("HANDSHAKE", &reply));
        };
        driver.session = session_id;
        let mut channels = Vec::with_capacity(workers.len());
        for ep in &workers {
            let mut ch = Channel::open(&ep.addr, config.timeout)?;
            ch.session = session_id;
            channels.push(Mutex::new(ch));
        }
        log::debug!(
            "session {session_id} connected to {} with {} workers",
            config.address,
            workers.len()
        );
        Ok(Session {
            id: session_id,
            config,
            endpoints: workers,
            driver: Mutex::new(driver),
            workers: channels,
            closed: AtomicBool::new(false),
            handles: Mutex::new(Vec::new()),
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn worker_endpoints(&self) -> &[WorkerEndpoint] {
        &self.endpoints
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    fn call(&self, msg: &Message) -> Result<Message, ClientError> {
        if self.is_closed() {
            return Err(ClientError::SessionClosed);
        }
        self.driver.lock().unwrap().call(msg)
    }

    fn check(&self, h: &MatrixHandle) -> Result<(), ClientError> {
        if self.is_closed() {
            return Err(ClientError::SessionClosed);
        }
        if h.session_id != self.id || !h.is_valid() {
            return Err(ClientError::InvalidHandle(h.id()));
        }
        Ok(())
    }

    fn adopt(&self, info: MatrixInfo) -> MatrixHandle {
        let h = MatrixHandle::new(info, self.id);
        self.handles.lock().unwrap().push(h.valid.clone());
        h
    }

    pub fn register_library(&self, name: &str, path: &str) -> Result<LibraryRef, ClientError> {
        match self.call(&Message::RegisterLibrary {
            name: name.into(),
            path: path.into(),
        })? {
            Message::LibraryAck { lib_id } => Ok(LibraryRef {
                lib_id,
                session_id: self.id,
            }),
            other => Err(unexpected("REGISTER_LIBRARY", &other)),
        }
    }

    /// Registers the server's built-in library and returns its typed wrapper.
    pub fn builtin(&self) -> Result<Builtin<'_>, ClientError> {
        let lib = self.register_library(crate::library::BUILTIN_NAME, crate::library::BUILTIN_PATH)?;
        Ok(Builtin::new(self, lib))
    }

    /// Uploads a matrix. Every row index must be present exactly once.
    pub fn send_matrix(&self, m: &LocalMatrix) -> Result<MatrixHandle, ClientError> {
        if m.rows() == 0 || m.cols() == 0 {
            return Err(ClientError::InvalidMatrix(format!(
                "cannot send an empty {} × {} matrix",
                m.rows(),
                m.cols()
            )));
        }
        m.check_complete()?;
        let info = match self.call(&Message::CreateMatrix {
            rows: m.rows(),
            cols: m.cols() as u64,
        })? {
            Message::MatrixInfo(info) => info,
            other => return Err(unexpected("CREATE_MATRIX", &other)),
        };
        let handle = self.adopt(info);
        match self.upload(m, &handle) {
            Ok(()) => Ok(handle),
            Err(e) => {
                let _ = self.release(&handle);
                Err(e)
            }
        }
    }

    fn upload(&self, m: &LocalMatrix, handle: &MatrixHandle) -> Result<(), ClientError> {
        let layout = Layout::from_info(handle.info())?;
        if layout.workers() > self.workers.len() {
            return Err(ClientError::BadReply(format!(
                "layout spans {} workers, session has {}",
                layout.workers(),
                self.workers.len()
            )));
        }
        let id = handle.id();
        let batch_rows = self.config.batch_rows;
        std::thread::scope(|s| {
            let tasks: Vec<_> = layout
                .ranges
                .iter()
                .enumerate()
                .filter(|(_, r)| !r.is_empty())
                .map(|(w, range)| {
                    let range = *range;
                    let chan = &self.workers[w];
                    s.spawn(move || -> Result<(), ClientError> {
                        let mut chan = chan.lock().unwrap();
                        let mut batch = RowBatch::with_capacity(id, batch_rows, m.cols());
                        let mut flush = |batch: &mut RowBatch| -> Result<(), ClientError> {
                            let sent = batch.len();
                            let msg = Message::SendRows(std::mem::replace(
                                batch,
                                RowBatch::with_capacity(id, batch_rows, m.cols()),
                            ));
                            match chan.call(&msg)? {
                                Message::RowsAck { rows_received, .. } if rows_received as usize == sent => Ok(()),
                                other => Err(unexpected("SEND_ROWS", &other)),
                            }
                        };
                        for (index, row) in m.iter().filter(|(i, _)| range.contains(*i)) {
                            batch.push_row(index, row);
                            if batch.len() == batch_rows {
                                flush(&mut batch)?;
                            }
                        }
                        if !batch.is_empty() {
                            flush(&mut batch)?;
                        }
                        Ok(())
                    })
                })
                .collect();
            tasks
                .into_iter().try_for_each(|t| t.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
        })?;
        match self.call(&Message::SendComplete { matrix_id: id })? {
            Message::MatrixReady { .. } => Ok(()),
            other => Err(unexpected("SEND_COMPLETE", &other)),
        }
    }

    /// Downloads a matrix, rows in index order.
    pub fn fetch_matrix(&self, h: &MatrixHandle) -> Result<LocalMatrix, ClientError> {
        let data = self.fetch_row_major(h)?;
        LocalMatrix::from_row_major(h.rows() as usize, h.cols() as usize, data)
    }

    /// Downloads a matrix as a dense row-major buffer.
    pub fn fetch_row_major(&self, h: &MatrixHandle) -> Result<Vec<f64>, ClientError> {
        self.check(h)?;
        let layout = Layout::from_info(h.info())?;
        let cols = h.cols() as usize;
        let mut out = vec![0.0; h.rows() as usize * cols];
        let mut pieces: Vec<&mut [f64]> = Vec::with_capacity(layout.workers());
        let mut rest = out.as_mut_slice();
        for r in &layout.ranges {
            let (head, tail) = rest.split_at_mut(r.len() as usize * cols);
            pieces.push(head);
            rest = tail;
        }
        let batch_rows = self.config.batch_rows as u64;
        std::thread::scope(|s| {
            let tasks: Vec<_> = layout
                .ranges
                .iter()
                .zip(pieces)
                .enumerate()
                .filter(|(_, (r, _))| !r.is_empty())
                .map(|(w, (range, piece))| {
                    let range = *range;
                    let chan = self.workers.get(w);
                    s.spawn(move || -> Result<(), ClientError> {
                        let chan = chan.ok_or_else(|| ClientError::BadReply(format!("no channel for worker {w}")))?;
                        let mut chan = chan.lock().unwrap();
                        let mut start = range.row_start;
                        while start < range.row_end {
                            let count = batch_rows.min(range.row_end - start);
                            let reply = chan.call(&Message::FetchRows {
                                matrix_id: h.id(),
                                row_start: start,
                                row_count: count as u32,
                            })?;
                            let Message::RowsData(batch) = reply else {
                                return Err(unexpected("FETCH_ROWS", &reply));
                            };
                            if batch.len() as u64 != count || batch.values.len() != count as usize * cols {
                                return Err(ClientError::BadReply(format!(
                                    "asked for {count} rows from {start}, got {}",
                                    batch.len()
                                )));
                            }
                            for (index, row) in batch.rows() {
                                if !range.contains(index) {
                                    return Err(ClientError::BadReply(format!("row {index} outside {range:?}")));
                                }
                                let local = (index - range.row_start) as usize;
                                piece[local * cols..(local + 1) * cols].copy_from_slice(row);
                            }
                            start += count;
                        }
                        Ok(())
                    })
                })
                .collect();
            tasks
                .into_iter().try_for_each(|t| t.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
        })?;
        Ok(out)
    }

    /// Runs `routine` from a registered library on the server.
    pub fn run(
        &self,
        lib: LibraryRef,
        routine: &str,
        inputs: &[&MatrixHandle],
        params: ParamMap,
    ) -> Result<TaskOutput, ClientError> {
        if lib.session_id != self.id {
            return Err(ClientError::InvalidMatrix("library belongs to another session".into()));
        }
        for h in inputs {
            self.check(h)?;
        }
        let reply = self.call(&Message::RunTask(TaskRequest {
            lib_id: lib.lib_id,
            routine: routine.into(),
            inputs: inputs.iter().map(|h| h.id()).collect(),
            params,
        }))?;
        match reply {
            Message::TaskResult {
                status: 0,
                outputs,
                scalars,
            } => Ok(TaskOutput {
                outputs: outputs.into_iter().map(|i| self.adopt(i)).collect(),
                scalars,
            }),
            Message::TaskResult { status, .. } => Err(ClientError::BadReply(format!("task status {status}"))),
            other => Err(unexpected("RUN_TASK", &other)),
        }
    }

    /// Frees a matrix on the server. Releasing twice is a no-op.
    pub fn release(&self, h: &MatrixHandle) -> Result<(), ClientError> {
        if h.session_id != self.id {
            return Err(ClientError::InvalidHandle(h.id()));
        }
        if !h.valid.swap(false, Ordering::SeqCst) || self.is_closed() {
            return Ok(());
        }
        match self.call(&Message::ReleaseMatrix { matrix_id: h.id() })? {
            Message::ReleaseMatrix { .. } => Ok(()),
            other => Err(unexpected("RELEASE_MATRIX", &other)),
        }
    }

    /// Ends the session and invalidates every handle. Closing twice is a no-op.
    pub fn close(&self) -> Result<(), ClientError> {
        if self.closed.load(Ordering::SeqCst) {
            return Ok(());
        }
        let result = self.driver.lock().unwrap().call(&Message::CloseSession);
        self.closed.store(true, Ordering::SeqCst);
        for flag in self.handles.lock().unwrap().drain(..) {
            flag.store(false, Ordering::SeqCst);
        }
        for w in &self.workers {
            w.lock().unwrap().shutdown();
        }
        self.driver.lock().unwrap().shutdown();
        match result? {
            Message::CloseSession => Ok(()),
            other => Err(unexpected("CLOSE_SESSION", &other)),
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.close();
    }
}
