//! Binary dense-matrix file.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "ALCH"
//! 4       2           version (u16 LE) = 1
//! 6       8           rows (u64 LE)
//! 14      8           cols (u64 LE)
//! 22      8·rows·cols row-major f64 LE payload
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ALCH";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 22;

#[derive(Debug, Error)]
pub enum BinFileError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("not a matrix file: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported matrix file version {0}")]
    BadVersion(u16),
    #[error("file size {actual} does not match {rows} × {cols} (expected {expected})")]
    SizeMismatch {
        rows: u64,
        cols: u64,
        expected: u64,
        actual: u64,
    },
    #[error("rows [{start}, {end}) are outside a matrix of {rows} rows")]
    OutOfRange { start: u64, end: u64, rows: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinHeader {
    pub rows: u64,
    pub cols: u64,
}

impl BinHeader {
    pub fn file_len(&self) -> u64 {
        HEADER_LEN + 8 * self.rows * self.cols
    }
}

/// Writes a whole row-major matrix.
pub fn write_matrix(path: impl AsRef<Path>, rows: u64, cols: u64, data: &[f64]) -> Result<(), BinFileError> {
    assert_eq!(data.len() as u64, rows * cols);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates the header, including the file length.
pub fn read_header(path: impl AsRef<Path>) -> Result<BinHeader, BinFileError> {
    let mut f = File::open(path)?;
    let header = parse_header(&mut f)?;
    let actual = f.metadata()?.len();
    if actual != header.file_len() {
        return Err(BinFileError::SizeMismatch {
            rows: header.rows,
            cols: header.cols,
            expected: header.file_len(),
            actual,
        });
    }
    Ok(header)
}

fn parse_header(r: &mut impl Read) -> Result<BinHeader, BinFileError> {
    let mut buf = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut buf)?;
    let magic: [u8; 4] = buf[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(BinFileError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(buf[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(BinFileError::BadVersion(version));
    }
    Ok(BinHeader {
        rows: u64::from_le_bytes(buf[6..14].try_into().unwrap()),
        cols: u64::from_le_bytes(buf[14..22].try_into().unwrap()),
    })
}

/// Reads rows `[start, end)` into a row-major buffer.
pub fn read_rows(path: impl AsRef<Path>, start: u64, end: u64) -> Result<(BinHeader, Vec<f64>), BinFileError> {
    let header = read_header(&path)?;
    if start > end || end > header.rows {
        return Err(BinFileError::OutOfRange {
            start,
            end,
            rows: header.rows,
        });
    }
    let mut f = BufReader::new(File::open(path)?);
    f.seek(SeekFrom::Start(HEADER_LEN + 8 * start * header.cols))?;
    let count = ((end - start) * header.cols) as usize;
    let mut raw = vec![0u8; count * 8];
    f.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

/// Reads the whole matrix.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<(BinHeader, Vec<f64>), BinFileError> {
    let header = read_header(&path)?;
    read_rows(path, 0, header.rows)
}
