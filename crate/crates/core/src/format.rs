//! Shared plumbing for the text-header-plus-payload file formats.
//!
//! Every file starts with newline-terminated UTF-8 header lines, ends its
//! header with a line `end`, and is followed by little-endian `f64` values.
//! Parse failures report the byte offset where reading stopped.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct FormatError {
    pub offset: u64,
    pub message: String,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "format error at byte {}: {}", self.offset, self.message)
    }
}

impl FormatError {
    pub fn new(offset: usize, message: impl Into<String>) -> Self {
        FormatError { offset: offset as u64, message: message.into() }
    }
}

pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn error(&self, message: impl Into<String>) -> FormatError {
        FormatError::new(self.pos, message)
    }

    /// Next header line without its newline.
    pub fn line(&mut self) -> Result<&'a str, FormatError> {
        let rest = &self.bytes[self.pos..];
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return Err(self.error("unterminated header line"));
        };
        let s = std::str::from_utf8(&rest[..end]).map_err(|e| FormatError::new(self.pos + e.valid_up_to(), "invalid UTF-8"))?;
        self.pos += end + 1;
        Ok(s)
    }

    /// Reads a header line and splits it into whitespace-separated fields,
    /// requiring the first to be `key` and the total count to be `n`.
    pub fn fields(&mut self, key: &str, n: usize) -> Result<Vec<&'a str>, FormatError> {
        let at = self.pos;
        let line = self.line()?;
        let f: Vec<&str> = line.split(' ').collect();
        if f[0] != key || f.len() != n {
            return Err(FormatError::new(at, format!("expected `{key}` with {} fields, found `{line}`", n - 1)));
        }
        Ok(f)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let need = n * 8;
        if self.bytes.len() - self.pos < need {
            return Err(self.error(format!("payload truncated: need {need} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let mut out = Vec::with_capacity(n);
        for chunk in self.bytes[self.pos..self.pos + need].chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(FormatError::new(self.pos + out.len() * 8, "non-finite value in payload"));
            }
            out.push(v);
        }
        self.pos += need;
        Ok(out)
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(self.error(format!("{} trailing bytes", self.bytes.len() - self.pos)))
        }
    }
}

pub fn parse_usize(s: &str, at: usize) -> Result<usize, FormatError> {
    s.parse().map_err(|_| FormatError::new(at, format!("not an unsigned integer: `{s}`")))
}

pub fn push_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
