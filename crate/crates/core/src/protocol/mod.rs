//! Binary wire protocol spoken between clients, the driver and the workers.
//!
//! Every frame is a 13-byte header followed by a payload:
//!
//! ```text
//! offset  size  field
//! 0       1     msg_type
//! 1       4     session_id   (u32, little-endian)
//! 5       8     payload_len  (u64, little-endian)
//! 13      n     payload
//! ```
//!
//! All integers are little-endian and all floats are IEEE 754 binary64,
//! little-endian. The per-message payload layouts are documented on
//! [`Message`] and in `PROTOCOL.md` at the repository root.

mod codec;
mod params;
mod stream;

pub use codec::{decode, encode, encoded_len, Decoded};
pub use params::{ParamMap, ParamValue};
pub use stream::{write_frame, FrameReader};

use thiserror::Error;

/// Version carried in `HANDSHAKE`; the driver rejects anything else.
pub const PROTOCOL_VERSION: u16 = 1;

/// Size of the fixed frame header in bytes.
pub const HEADER_LEN: usize = 13;

/// Upper bound on a single frame payload. Larger announced lengths are
/// treated as corruption rather than buffered.
pub const MAX_PAYLOAD_LEN: u64 = 1 << 32;

/// One-byte message type codes.
pub mod msg_type {
    pub const HANDSHAKE: u8 = 0x01;
    pub const HANDSHAKE_ACK: u8 = 0x02;
    pub const REGISTER_LIBRARY: u8 = 0x03;
    pub const LIBRARY_ACK: u8 = 0x04;
    pub const CREATE_MATRIX: u8 = 0x05;
    pub const MATRIX_INFO: u8 = 0x06;
    pub const SEND_ROWS: u8 = 0x07;
    pub const ROWS_ACK: u8 = 0x08;
    pub const SEND_COMPLETE: u8 = 0x09;
    pub const MATRIX_READY: u8 = 0x0A;
    pub const RUN_TASK: u8 = 0x0B;
    pub const TASK_RESULT: u8 = 0x0C;
    pub const FETCH_ROWS: u8 = 0x0D;
    pub const ROWS_DATA: u8 = 0x0E;
    pub const RELEASE_MATRIX: u8 = 0x0F;
    pub const CLOSE_SESSION: u8 = 0x10;
    pub const ERROR: u8 = 0x7F;
}

/// Codes carried by `ERROR` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    VersionMismatch = 1,
    InsufficientWorkers = 2,
    ResourceExhausted = 3,
    IncompleteMatrix = 4,
    UnknownRoutine = 5,
    SchemaViolation = 6,
    NumericalFailure = 7,
    UnknownMatrix = 8,
    BadRequest = 9,
    UnknownLibrary = 10,
}

impl ErrorCode {
    pub fn from_u16(code: u16) -> Option<Self> {
        use ErrorCode::*;
        Some(match code {
            1 => VersionMismatch,
            2 => InsufficientWorkers,
            3 => ResourceExhausted,
            4 => IncompleteMatrix,
            5 => UnknownRoutine,
            6 => SchemaViolation,
            7 => NumericalFailure,
            8 => UnknownMatrix,
            9 => BadRequest,
            10 => UnknownLibrary,
            _ => return None,
        })
    }
}

/// Address of one worker as announced in `HANDSHAKE_ACK`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerEndpoint {
    pub worker_id: u16,
    pub addr: String,
}

/// Contiguous row range `[row_start, row_end)` owned by one worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowRange {
    pub worker_id: u16,
    pub row_start: u64,
    pub row_end: u64,
}

impl RowRange {
    pub fn len(&self) -> u64 {
        self.row_end - self.row_start
    }

    pub fn is_empty(&self) -> bool {
        self.row_end == self.row_start
    }

    pub fn contains(&self, row: u64) -> bool {
        row >= self.row_start && row < self.row_end
    }
}

/// Body of `MATRIX_INFO`, also embedded in `TASK_RESULT`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixInfo {
    pub matrix_id: u64,
    pub rows: u64,
    pub cols: u64,
    pub ranges: Vec<RowRange>,
}

/// A batch of indexed rows, used by both `SEND_ROWS` and `ROWS_DATA`.
///
/// Values are stored row-major; every row has the same width. The width is
/// not on the wire, it is recovered from the payload length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RowBatch {
    pub matrix_id: u64,
    pub indices: Vec<u64>,
    pub values: Vec<f64>,
}

impl RowBatch {
    pub fn new(matrix_id: u64) -> Self {
        RowBatch {
            matrix_id,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn with_capacity(matrix_id: u64, rows: usize, cols: usize) -> Self {
        RowBatch {
            matrix_id,
            indices: Vec::with_capacity(rows),
            values: Vec::with_capacity(rows * cols),
        }
    }

    pub fn push_row(&mut self, index: u64, values: &[f64]) {
        self.indices.push(index);
        self.values.extend_from_slice(values);
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Row width, or 0 for an empty batch.
    pub fn cols(&self) -> usize {
        if self.indices.is_empty() {
            0
        } else {
            self.values.len() / self.indices.len()
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = (u64, &[f64])> + '_ {
        let cols = self.cols().max(1);
        self.indices.iter().copied().zip(self.values.chunks_exact(cols))
    }
}

/// Body of `RUN_TASK`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRequest {
    pub lib_id: u16,
    pub routine: String,
    pub inputs: Vec<u64>,
    pub params: ParamMap,
}

/// Decoded frame body, tagged by message type.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// `0x01`: protocol_version u16, requested_workers u16.
    Handshake {
        protocol_version: u16,
        requested_workers: u16,
    },
    /// `0x02`: session_id u32, worker_count u16, per worker
    /// {worker_id u16, addr_len u16, addr}.
    HandshakeAck {
        session_id: u32,
        workers: Vec<WorkerEndpoint>,
    },
    /// `0x03`: name_len u16 + name, path_len u16 + path.
    RegisterLibrary { name: String, path: String },
    /// `0x04`: lib_id u16.
    LibraryAck { lib_id: u16 },
    /// `0x05`: rows u64, cols u64.
    CreateMatrix { rows: u64, cols: u64 },
    /// `0x06`: matrix_id u64, rows u64, cols u64, entry_count u16, per entry
    /// {worker_id u16, row_start u64, row_end_excl u64}.
    MatrixInfo(MatrixInfo),
    /// `0x07`: matrix_id u64, row_count u32, per row {row_index u64, cols × f64}.
    SendRows(RowBatch),
    /// `0x08`: matrix_id u64, rows_received u32.
    RowsAck { matrix_id: u64, rows_received: u32 },
    /// `0x09`: matrix_id u64.
    SendComplete { matrix_id: u64 },
    /// `0x0A`: matrix_id u64.
    MatrixReady { matrix_id: u64 },
    /// `0x0B`: lib_id u16, routine_len u16 + routine, input_count u8 +
    /// input ids u64, ParamMap.
    RunTask(TaskRequest),
    /// `0x0C`: status u8, output_count u8 + MATRIX_INFO bodies, ParamMap.
    TaskResult {
        status: u8,
        outputs: Vec<MatrixInfo>,
        scalars: ParamMap,
    },
    /// `0x0D`: matrix_id u64, row_start u64, row_count u32.
    FetchRows {
        matrix_id: u64,
        row_start: u64,
        row_count: u32,
    },
    /// `0x0E`: same layout as `SEND_ROWS`.
    RowsData(RowBatch),
    /// `0x0F`: matrix_id u64. The driver echoes it back as the acknowledgement.
    ReleaseMatrix { matrix_id: u64 },
    /// `0x10`: empty. The driver echoes it back before closing.
    CloseSession,
    /// `0x7F`: code u16, msg_len u16 + message.
    Error { code: u16, message: String },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Message::Handshake { .. } => HANDSHAKE,
            Message::HandshakeAck { .. } => HANDSHAKE_ACK,
            Message::RegisterLibrary { .. } => REGISTER_LIBRARY,
            Message::LibraryAck { .. } => LIBRARY_ACK,
            Message::CreateMatrix { .. } => CREATE_MATRIX,
            Message::MatrixInfo(_) => MATRIX_INFO,
            Message::SendRows(_) => SEND_ROWS,
            Message::RowsAck { .. } => ROWS_ACK,
            Message::SendComplete { .. } => SEND_COMPLETE,
            Message::MatrixReady { .. } => MATRIX_READY,
            Message::RunTask(_) => RUN_TASK,
            Message::TaskResult { .. } => TASK_RESULT,
            Message::FetchRows { .. } => FETCH_ROWS,
            Message::RowsData(_) => ROWS_DATA,
            Message::ReleaseMatrix { .. } => RELEASE_MATRIX,
            Message::CloseSession => CLOSE_SESSION,
            Message::Error { .. } => ERROR,
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Message::Error {
            code: code as u16,
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    /// Not enough bytes for a whole frame yet; nothing was consumed.
    #[error("incomplete frame: need {needed} more bytes")]
    Incomplete { needed: usize },
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("{field} does not fit in its {width}-bit length field ({len})")]
    Oversized {
        field: &'static str,
        width: u32,
        len: usize,
    },
    #[error("payload length {0} exceeds the frame limit")]
    PayloadTooLarge(u64),
    #[error("connection closed mid-frame ({buffered} bytes buffered)")]
    TruncatedStream { buffered: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ProtocolError {
    pub(crate) fn malformed(what: &'static str, detail: impl Into<String>) -> Self {
        ProtocolError::Malformed {
            what,
            detail: detail.into(),
        }
    }
}
