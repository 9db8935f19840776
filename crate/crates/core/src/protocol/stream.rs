use std::io::{self, Read, Write};

use super::{decode, encode, Message, ProtocolError};

const READ_CHUNK: usize = 64 * 1024;
/// Largest single buffer growth; big frames arrive over several reads.
const MAX_GROWTH: usize = 1 << 20;

/// Buffers bytes from one connection and yields complete frames in order.
///
/// One reader per socket; it is not meant to be shared between connections.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
    start: usize,
    failed: bool,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader {
            inner,
            buf: Vec::new(),
            start: 0,
            failed: false,
        }
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }

    pub fn get_mut(&mut self) -> &mut R {
        &mut self.inner
    }

    /// Bytes received but not yet returned as part of a frame.
    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }

    /// Reads the next frame, returning `(session_id, message)`.
    ///
    /// `Ok(None)` means the peer closed the connection on a frame boundary.
    /// A close in the middle of a frame is [`ProtocolError::TruncatedStream`].
    pub fn read_frame(&mut self) -> Result<Option<(u32, Message)>, ProtocolError> {
        loop {
            match decode(&self.buf[self.start..]) {
                Ok(d) => {
                    self.start += d.consumed;
                    if self.start == self.buf.len() {
                        self.buf.clear();
                        self.start = 0;
                    }
                    return Ok(Some((d.session_id, d.message)));
                }
                Err(ProtocolError::Incomplete { needed }) => {
                    if self.fill(needed)? == 0 {
                        return match self.buffered() {
                            0 => Ok(None),
                            buffered => Err(ProtocolError::TruncatedStream { buffered }),
                        };
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn fill(&mut self, needed: usize) -> io::Result<usize> {
        if self.start > 0 {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        let old = self.buf.len();
        self.buf.resize(old + needed.clamp(READ_CHUNK, MAX_GROWTH), 0);
        let result = loop {
            match self.inner.read(&mut self.buf[old..]) {
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                other => break other,
            }
        };
        let n = *result.as_ref().unwrap_or(&0);
        self.buf.truncate(old + n);
        result
    }
}

impl<R: Read> Iterator for FrameReader<R> {
    type Item = Result<(u32, Message), ProtocolError>;

    /// Ends after the first error.
    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let item = self.read_frame().transpose();
        self.failed = matches!(item, Some(Err(_)));
        item
    }
}

/// Encodes and writes one frame.
pub fn write_frame<W: Write>(w: &mut W, message: &Message, session_id: u32) -> Result<(), ProtocolError> {
    let bytes = encode(message, session_id)?;
    w.write_all(&bytes)?;
    Ok(())
}
