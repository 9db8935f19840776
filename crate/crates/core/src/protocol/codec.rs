use super::{
    msg_type, MatrixInfo, Message, ParamMap, ParamValue, ProtocolError, RowBatch, RowRange, TaskRequest,
    WorkerEndpoint, HEADER_LEN, MAX_PAYLOAD_LEN,
};

/// A successfully decoded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub message: Message,
    pub session_id: u32,
    /// Bytes consumed from the input: header plus payload.
    pub consumed: usize,
}

/// Encodes `message` as a complete frame (header + payload).
pub fn encode(message: &Message, session_id: u32) -> Result<Vec<u8>, ProtocolError> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload_hint(message));
    out.push(message.msg_type());
    out.extend_from_slice(&session_id.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    write_body(&mut out, message)?;
    let payload_len = (out.len() - HEADER_LEN) as u64;
    out[5..13].copy_from_slice(&payload_len.to_le_bytes());
    Ok(out)
}

/// Total frame size `encode` would produce.
pub fn encoded_len(message: &Message) -> Result<usize, ProtocolError> {
    let mut scratch = Vec::with_capacity(payload_hint(message));
    write_body(&mut scratch, message)?;
    Ok(HEADER_LEN + scratch.len())
}

/// Decodes the first frame in `bytes`.
///
/// Returns [`ProtocolError::Incomplete`] when the header or payload is not
/// fully present yet; trailing bytes after the frame are left untouched.
pub fn decode(bytes: &[u8]) -> Result<Decoded, ProtocolError> {
    if bytes.len() < HEADER_LEN {
        return Err(ProtocolError::Incomplete {
            needed: HEADER_LEN - bytes.len(),
        });
    }
    let kind = bytes[0];
    if !is_known_type(kind) {
        return Err(ProtocolError::UnknownType(kind));
    }
    let session_id = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
    let payload_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(ProtocolError::PayloadTooLarge(payload_len));
    }
    let payload_len = payload_len as usize;
    let available = bytes.len() - HEADER_LEN;
    if available < payload_len {
        return Err(ProtocolError::Incomplete {
            needed: payload_len - available,
        });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
    let message = read_body(kind, payload)?;
    Ok(Decoded {
        message,
        session_id,
        consumed: HEADER_LEN + payload_len,
    })
}

pub(crate) fn is_known_type(kind: u8) -> bool {
    matches!(kind, 0x01..=0x10 | msg_type::ERROR)
}

fn payload_hint(message: &Message) -> usize {
    match message {
        Message::SendRows(b) | Message::RowsData(b) => 12 + b.indices.len() * 8 + b.values.len() * 8,
        _ => 64,
    }
}

fn put_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn narrow<T: TryFrom<usize>>(len: usize, field: &'static str, width: u32) -> Result<T, ProtocolError> {
    T::try_from(len).map_err(|_| ProtocolError::Oversized { field, width, len })
}

fn put_str16(out: &mut Vec<u8>, s: &str, field: &'static str) -> Result<(), ProtocolError> {
    put_u16(out, narrow(s.len(), field, 16)?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_matrix_info(out: &mut Vec<u8>, info: &MatrixInfo) -> Result<(), ProtocolError> {
    put_u64(out, info.matrix_id);
    put_u64(out, info.rows);
    put_u64(out, info.cols);
    put_u16(out, narrow(info.ranges.len(), "matrix_info entries", 16)?);
    for r in &info.ranges {
        put_u16(out, r.worker_id);
        put_u64(out, r.row_start);
        put_u64(out, r.row_end);
    }
    Ok(())
}

fn put_rows(out: &mut Vec<u8>, batch: &RowBatch) -> Result<(), ProtocolError> {
    let n = batch.indices.len();
    if n == 0 && !batch.values.is_empty() || n > 0 && !batch.values.len().is_multiple_of(n) {
        return Err(ProtocolError::malformed(
            "row batch",
            format!("{} values do not split into {} rows", batch.values.len(), n),
        ));
    }
    put_u64(out, batch.matrix_id);
    put_u32(out, narrow(n, "row_count", 32)?);
    for (index, row) in batch.rows() {
        put_u64(out, index);
        for &v in row {
            put_f64(out, v);
        }
    }
    Ok(())
}

fn put_params(out: &mut Vec<u8>, params: &ParamMap) -> Result<(), ProtocolError> {
    put_u16(out, narrow(params.len(), "param count", 16)?);
    for (key, value) in params.iter() {
        put_str16(out, key, "param key")?;
        put_u8(out, value.tag());
        match value {
            ParamValue::F64(v) => put_f64(out, *v),
            ParamValue::I64(v) => out.extend_from_slice(&v.to_le_bytes()),
            ParamValue::Str(s) => put_str16(out, s, "param string")?,
            ParamValue::Bool(b) => put_u8(out, *b as u8),
            ParamValue::Matrix(id) => put_u64(out, *id),
        }
    }
    Ok(())
}

fn write_body(out: &mut Vec<u8>, message: &Message) -> Result<(), ProtocolError> {
    match message {
        Message::Handshake {
            protocol_version,
            requested_workers,
        } => {
            put_u16(out, *protocol_version);
            put_u16(out, *requested_workers);
        }
        Message::HandshakeAck { session_id, workers } => {
            put_u32(out, *session_id);
            put_u16(out, narrow(workers.len(), "worker_count", 16)?);
            for w in workers {
                put_u16(out, w.worker_id);
                put_str16(out, &w.addr, "worker addr")?;
            }
        }
        Message::RegisterLibrary { name, path } => {
            put_str16(out, name, "library name")?;
            put_str16(out, path, "library path")?;
        }
        Message::LibraryAck { lib_id } => put_u16(out, *lib_id),
        Message::CreateMatrix { rows, cols } => {
            put_u64(out, *rows);
            put_u64(out, *cols);
        }
        Message::MatrixInfo(info) => put_matrix_info(out, info)?,
        Message::SendRows(batch) | Message::RowsData(batch) => put_rows(out, batch)?,
        Message::RowsAck {
            matrix_id,
            rows_received,
        } => {
            put_u64(out, *matrix_id);
            put_u32(out, *rows_received);
        }
        Message::SendComplete { matrix_id }
        | Message::MatrixReady { matrix_id }
        | Message::ReleaseMatrix { matrix_id } => put_u64(out, *matrix_id),
        Message::RunTask(task) => {
            put_u16(out, task.lib_id);
            put_str16(out, &task.routine, "routine name")?;
            put_u8(out, narrow(task.inputs.len(), "input_count", 8)?);
            for &id in &task.inputs {
                put_u64(out, id);
            }
            put_params(out, &task.params)?;
        }
        Message::TaskResult {
            status,
            outputs,
            scalars,
        } => {
            put_u8(out, *status);
            put_u8(out, narrow(outputs.len(), "output_count", 8)?);
            for info in outputs {
                put_matrix_info(out, info)?;
            }
            put_params(out, scalars)?;
        }
        Message::FetchRows {
            matrix_id,
            row_start,
            row_count,
        } => {
            put_u64(out, *matrix_id);
            put_u64(out, *row_start);
            put_u32(out, *row_count);
        }
        Message::CloseSession => {}
        Message::Error { code, message } => {
            put_u16(out, *code);
            put_str16(out, message, "error message")?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.pos < n {
            return Err(ProtocolError::malformed(
                self.what,
                format!(
                    "body ends at byte {} but {} more bytes were expected",
                    self.buf.len(),
                    n - (self.buf.len() - self.pos)
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, ProtocolError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ProtocolError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str16(&mut self) -> Result<String, ProtocolError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| ProtocolError::malformed(self.what, format!("invalid UTF-8: {e}")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn finish(self) -> Result<(), ProtocolError> {
        if self.remaining() != 0 {
            return Err(ProtocolError::malformed(
                self.what,
                format!("{} trailing bytes in payload", self.remaining()),
            ));
        }
        Ok(())
    }
}

fn read_matrix_info(r: &mut Reader<'_>) -> Result<MatrixInfo, ProtocolError> {
    let matrix_id = r.u64()?;
    let rows = r.u64()?;
    let cols = r.u64()?;
    let count = r.u16()? as usize;
    let mut ranges = Vec::with_capacity(count);
    for _ in 0..count {
        let worker_id = r.u16()?;
        let row_start = r.u64()?;
        let row_end = r.u64()?;
        if row_end < row_start {
            return Err(ProtocolError::malformed(
                "matrix info",
                format!("range [{row_start}, {row_end}) is reversed"),
            ));
        }
        ranges.push(RowRange {
            worker_id,
            row_start,
            row_end,
        });
    }
    Ok(MatrixInfo {
        matrix_id,
        rows,
        cols,
        ranges,
    })
}

fn read_rows(r: &mut Reader<'_>) -> Result<RowBatch, ProtocolError> {
    let matrix_id = r.u64()?;
    let count = r.u32()? as usize;
    let body = r.remaining();
    if count == 0 {
        return Ok(RowBatch::new(matrix_id));
    }
    // Each row is 8 bytes of index plus 8 * cols bytes of values.
    if !body.is_multiple_of(count) || body / count < 16 || !(body / count).is_multiple_of(8) {
        return Err(ProtocolError::malformed(
            "row batch",
            format!("{body} bytes cannot hold {count} rows of equal nonzero width"),
        ));
    }
    let cols = body / count / 8 - 1;
    let mut batch = RowBatch::with_capacity(matrix_id, count, cols);
    for _ in 0..count {
        batch.indices.push(r.u64()?);
        let raw = r.take(cols * 8)?;
        batch
            .values
            .extend(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
    }
    Ok(batch)
}

fn read_params(r: &mut Reader<'_>) -> Result<ParamMap, ProtocolError> {
    let count = r.u16()?;
    let mut params = ParamMap::new();
    for _ in 0..count {
        let key = r.str16()?;
        let tag = r.u8()?;
        let value = match tag {
            0 => ParamValue::F64(r.f64()?),
            1 => ParamValue::I64(r.i64()?),
            2 => ParamValue::Str(r.str16()?),
            3 => match r.u8()? {
                0 => ParamValue::Bool(false),
                1 => ParamValue::Bool(true),
                b => {
                    return Err(ProtocolError::malformed(
                        "param map",
                        format!("bool byte {b} for key {key:?}"),
                    ))
                }
            },
            4 => ParamValue::Matrix(r.u64()?),
            t => {
                return Err(ProtocolError::malformed(
                    "param map",
                    format!("unknown type tag {t} for key {key:?}"),
                ))
            }
        };
        params
            .try_insert(key, value)
            .map_err(|k| ProtocolError::malformed("param map", format!("duplicate key {k:?}")))?;
    }
    Ok(params)
}

fn read_body(kind: u8, payload: &[u8]) -> Result<Message, ProtocolError> {
    use msg_type::*;
    let what = match kind {
        HANDSHAKE => "handshake",
        HANDSHAKE_ACK => "handshake ack",
        REGISTER_LIBRARY => "register library",
        RUN_TASK => "run task",
        TASK_RESULT => "task result",
        ERROR => "error",
        _ => "message body",
    };
    let mut r = Reader::new(payload, what);
    let message = match kind {
        HANDSHAKE => Message::Handshake {
            protocol_version: r.u16()?,
            requested_workers: r.u16()?,
        },
        HANDSHAKE_ACK => {
            let session_id = r.u32()?;
            let count = r.u16()? as usize;
            let mut workers = Vec::with_capacity(count);
            for _ in 0..count {
                let worker_id = r.u16()?;
                let addr = r.str16()?;
                workers.push(WorkerEndpoint { worker_id, addr });
            }
            Message::HandshakeAck { session_id, workers }
        }
        REGISTER_LIBRARY => Message::RegisterLibrary {
            name: r.str16()?,
            path: r.str16()?,
        },
        LIBRARY_ACK => Message::LibraryAck { lib_id: r.u16()? },
        CREATE_MATRIX => Message::CreateMatrix {
            rows: r.u64()?,
            cols: r.u64()?,
        },
        MATRIX_INFO => Message::MatrixInfo(read_matrix_info(&mut r)?),
        SEND_ROWS => Message::SendRows(read_rows(&mut r)?),
        ROWS_ACK => Message::RowsAck {
            matrix_id: r.u64()?,
            rows_received: r.u32()?,
        },
        SEND_COMPLETE => Message::SendComplete { matrix_id: r.u64()? },
        MATRIX_READY => Message::MatrixReady { matrix_id: r.u64()? },
        RUN_TASK => {
            let lib_id = r.u16()?;
            let routine = r.str16()?;
            let count = r.u8()? as usize;
            let inputs = (0..count).map(|_| r.u64()).collect::<Result<_, _>>()?;
            let params = read_params(&mut r)?;
            Message::RunTask(TaskRequest {
                lib_id,
                routine,
                inputs,
                params,
            })
        }
        TASK_RESULT => {
            let status = r.u8()?;
            let count = r.u8()? as usize;
            let outputs = (0..count).map(|_| read_matrix_info(&mut r)).collect::<Result<_, _>>()?;
            let scalars = read_params(&mut r)?;
            Message::TaskResult {
                status,
                outputs,
                scalars,
            }
        }
        FETCH_ROWS => Message::FetchRows {
            matrix_id: r.u64()?,
            row_start: r.u64()?,
            row_count: r.u32()?,
        },
        ROWS_DATA => Message::RowsData(read_rows(&mut r)?),
        RELEASE_MATRIX => Message::ReleaseMatrix { matrix_id: r.u64()? },
        CLOSE_SESSION => Message::CloseSession,
        ERROR => Message::Error {
            code: r.u16()?,
            message: r.str16()?,
        },
        other => return Err(ProtocolError::UnknownType(other)),
    };
    r.finish()?;
    Ok(message)
}
