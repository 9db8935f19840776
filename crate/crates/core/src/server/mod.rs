//! The offload server: a driver that accepts client sessions and a pool of
//! long-lived workers that hold matrix shards and run routines.
//!
//! Each worker has its own TCP listener for row traffic (`SEND_ROWS`,
//! `FETCH_ROWS`) and a job queue for routine execution. Tasks are enqueued on
//! every participating worker under one dispatch lock, so all workers see
//! tasks in the same order and collectives from different tasks never
//! interleave on a worker.

mod driver;
mod worker;

use std::collections::HashMap;
use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::library::{self, Library};
use crate::protocol::{write_frame, ErrorCode, Message, ParamMap, ProtocolError, WorkerEndpoint};
use crate::store::HandleRegistry;

use worker::{Job, WorkerState};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Driver listen address, e.g. `127.0.0.1:0`.
    pub bind: String,
    pub workers: usize,
    /// Total bytes of matrix data the server will hold at once.
    pub memory_limit: u64,
    /// Host written into worker endpoints; defaults to the bind host, or
    /// `127.0.0.1` for a wildcard bind.
    pub advertise_host: Option<String>,
}

impl ServerConfig {
    pub fn local(workers: usize) -> Self {
        ServerConfig {
            bind: "127.0.0.1:0".into(),
            workers,
            memory_limit: 4 << 30,
            advertise_host: None,
        }
    }
}

/// One executed (or failed) task, as recorded by the driver.
#[derive(Debug, Clone)]
pub struct TaskRecord {
    pub session_id: u32,
    pub routine: String,
    /// `(matrix_id, rows, cols)` of every input.
    pub inputs: Vec<(u64, u64, u64)>,
    pub outputs: Vec<u64>,
    /// Bytes of matrix data read by the routine.
    pub input_bytes: u64,
    pub compute_seconds: f64,
    pub scalars: ParamMap,
    pub error: Option<String>,
}

pub(crate) struct SessionEntry {
    pub workers: usize,
    pub bytes_in: AtomicU64,
    pub bytes_out: AtomicU64,
}

pub(crate) struct Shared {
    pub registry: HandleRegistry,
    pub workers: Vec<WorkerState>,
    pub job_queues: Vec<Mutex<mpsc::Sender<Job>>>,
    pub endpoints: Vec<WorkerEndpoint>,
    pub libraries: Vec<Library>,
    pub sessions: Mutex<HashMap<u32, Arc<SessionEntry>>>,
    pub next_session: AtomicU32,
    pub dispatch: Mutex<()>,
    pub task_log: Mutex<Vec<TaskRecord>>,
    pub shutting_down: AtomicBool,
    connections: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
}

impl Shared {
    pub fn session(&self, id: u32) -> Option<Arc<SessionEntry>> {
        self.sessions.lock().unwrap().get(&id).cloned()
    }

    /// Tracks a connection so shutdown can close it. Returns its key.
    fn track(&self, stream: &TcpStream) -> Option<u64> {
        let clone = stream.try_clone().ok()?;
        let key = self.next_conn.fetch_add(1, Ordering::Relaxed);
        self.connections.lock().unwrap().insert(key, clone);
        Some(key)
    }

    fn untrack(&self, key: Option<u64>) {
        if let Some(key) = key {
            self.connections.lock().unwrap().remove(&key);
        }
    }
}

pub struct Server;

impl Server {
    /// Binds the driver and worker listeners and starts serving.
    pub fn start(config: ServerConfig) -> io::Result<ServerHandle> {
        Self::start_with_libraries(config, vec![library::builtin()])
    }

    pub fn start_with_libraries(config: ServerConfig, libraries: Vec<Library>) -> io::Result<ServerHandle> {
        if config.workers == 0 || config.workers > u16::MAX as usize {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("worker count must be in [1, {}], got {}", u16::MAX, config.workers),
            ));
        }
        let driver = TcpListener::bind(&config.bind)?;
        let addr = driver.local_addr()?;
        let host = match &config.advertise_host {
            Some(h) => h.clone(),
            None if addr.ip().is_unspecified() => "127.0.0.1".into(),
            None => addr.ip().to_string(),
        };

        let mut worker_listeners = Vec::with_capacity(config.workers);
        let mut endpoints = Vec::with_capacity(config.workers);
        for w in 0..config.workers {
            let l = TcpListener::bind((addr.ip(), 0))?;
            endpoints.push(WorkerEndpoint {
                worker_id: w as u16,
                addr: format!("{host}:{}", l.local_addr()?.port()),
            });
            worker_listeners.push(l);
        }

        let mut receivers = Vec::with_capacity(config.workers);
        let mut job_queues = Vec::with_capacity(config.workers);
        for _ in 0..config.workers {
            let (tx, rx) = mpsc::channel();
            job_queues.push(Mutex::new(tx));
            receivers.push(rx);
        }

        let shared = Arc::new(Shared {
            registry: HandleRegistry::new(config.memory_limit),
            workers: (0..config.workers).map(|_| WorkerState::default()).collect(),
            job_queues,
            endpoints,
            libraries,
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU32::new(1),
            dispatch: Mutex::new(()),
            task_log: Mutex::new(Vec::new()),
            shutting_down: AtomicBool::new(false),
            connections: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(0),
        });

        let mut threads = Vec::new();
        let mut listen_addrs = vec![addr];
        for (w, rx) in receivers.into_iter().enumerate() {
            let sh = shared.clone();
            threads.push(spawn(format!("worker-{w}"), move || worker::job_loop(sh, w, rx))?);
        }
        for (w, l) in worker_listeners.into_iter().enumerate() {
            listen_addrs.push(l.local_addr()?);
            let sh = shared.clone();
            threads.push(spawn(format!("worker-{w}-accept"), move || {
                accept_loop(&sh, l, move |sh, stream| worker::serve_rows(sh, w, stream))
            })?);
        }
        let sh = shared.clone();
        threads.push(spawn("driver-accept".into(), move || {
            accept_loop(&sh, driver, driver::serve_client)
        })?);

        log::info!(
            "server listening on {addr} with {} workers, memory limit {} bytes",
            config.workers,
            config.memory_limit
        );
        Ok(ServerHandle {
            addr,
            listen_addrs,
            shared,
            threads,
        })
    }
}

fn spawn(name: String, f: impl FnOnce() + Send + 'static) -> io::Result<JoinHandle<()>> {
    std::thread::Builder::new().name(name).spawn(f)
}

fn accept_loop<F>(shared: &Arc<Shared>, listener: TcpListener, serve: F)
where
    F: Fn(Arc<Shared>, TcpStream) + Clone + Send + 'static,
{
    for stream in listener.incoming() {
        if shared.shutting_down.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let sh = shared.clone();
        let serve = serve.clone();
        let spawned = spawn("conn".into(), move || {
            let key = sh.track(&stream);
            serve(sh.clone(), stream);
            sh.untrack(key);
        });
        if let Err(e) = spawned {
            log::warn!("cannot spawn a connection thread: {e}");
        }
    }
}

/// A running server. Dropping it shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    listen_addrs: Vec<SocketAddr>,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    /// Driver address clients connect to.
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn worker_endpoints(&self) -> &[WorkerEndpoint] {
        &self.shared.endpoints
    }

    pub fn task_log(&self) -> Vec<TaskRecord> {
        self.shared.task_log.lock().unwrap().clone()
    }

    /// Matrices currently held (filling or ready) across all sessions.
    pub fn live_matrices(&self) -> usize {
        self.shared.registry.live_count()
    }

    pub fn used_bytes(&self) -> u64 {
        self.shared.registry.used_bytes()
    }

    pub fn active_sessions(&self) -> usize {
        self.shared.sessions.lock().unwrap().len()
    }

    /// Stops accepting, closes open connections and joins the server threads.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.shutting_down.swap(true, Ordering::SeqCst) {
            return;
        }
        for addr in &self.listen_addrs {
            wake(*addr);
        }
        for (_, conn) in self.shared.connections.lock().unwrap().drain() {
            let _ = conn.shutdown(Shutdown::Both);
        }
        for q in &self.shared.job_queues {
            let _ = q.lock().unwrap().send(Job::Stop);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        log::info!("server on {} stopped", self.addr);
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Writes one reply frame and flushes. A reply that cannot be encoded is
/// replaced by an ERROR frame so the peer still gets exactly one answer.
/// Returns false once the connection is unusable.
pub(crate) fn send_reply<W: Write>(out: &mut W, reply: &Message, session: u32) -> bool {
    let sent = match write_frame(out, reply, session) {
        Err(ProtocolError::Io(_)) => return false,
        Err(e) => write_frame(out, &Message::error(ErrorCode::BadRequest, e.to_string()), session),
        Ok(()) => Ok(()),
    };
    sent.is_ok() && out.flush().is_ok()
}

/// Unblocks a listener's `accept` by connecting to it.
fn wake(addr: SocketAddr) {
    let target = if addr.ip().is_unspecified() {
        SocketAddr::new([127, 0, 0, 1].into(), addr.port())
    } else {
        addr
    };
    if let Some(a) = target.to_socket_addrs().ok().and_then(|mut it| it.next()) {
        let _ = TcpStream::connect_timeout(&a, Duration::from_millis(500));
    }
}
