//! Little-endian binary helpers and JSON-lines readers shared by the file formats.

use std::fs::File;
use std::io::{BufRead, BufReader, ErrorKind, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, FormatError, Result};
use crate::tensor::{Matrix, Scalar};

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => FormatError::Truncated { what }.into(),
        _ => Error::io("<stream>", e),
    })
}

pub(crate) fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn expect_magic(r: &mut impl Read, expected: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    read_exact(r, &mut found, "magic")?;
    if found != expected {
        return Err(FormatError::BadMagic { expected, found }.into());
    }
    Ok(())
}

pub(crate) fn expect_version(r: &mut impl Read, expected: u32) -> Result<()> {
    let found = read_u32(r, "version")?;
    if found != expected {
        return Err(FormatError::UnsupportedVersion { expected, found }.into());
    }
    Ok(())
}

/// Writes the matrix body as row-major `f32` values.
pub(crate) fn write_f32_matrix<T: Scalar>(w: &mut impl Write, m: &Matrix<T>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(m.as_slice().len() * 4);
    for v in m.as_slice() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_f32_matrix(
    r: &mut impl Read,
    rows: usize,
    cols: usize,
    what: &'static str,
) -> Result<Matrix<f32>> {
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::Corrupt(format!("{what}: {rows}x{cols} overflows")))?;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::from_vec(rows, cols, data)
        .map_err(|_| FormatError::Corrupt(format!("{what}: non-finite values")).into())
}

/// Reads a JSON-lines file. Blank lines are skipped; a line that fails to parse
/// is reported with its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("serializable");
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}
