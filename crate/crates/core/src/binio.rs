// SPDX-License-Identifier: MIT OR Apache-2.0

//! Little-endian helpers for the versioned weight files.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numkit::DenseMat;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn mat(&mut self, m: &DenseMat) {
        self.f64s(m.as_slice());
    }

    pub fn bytes(&self) -> &[u8] {
        &self.buf
    }

}

pub(crate) struct Reader {
    path: PathBuf,
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Ok(Reader::from_bytes(path, buf))
    }

    pub fn from_bytes(path: &Path, buf: Vec<u8>) -> Self {
        Reader {
            path: path.to_path_buf(),
            buf,
            pos: 0,
        }
    }

    pub fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            message: message.into(),
        }
    }

    /// Checks magic bytes and returns the version.
    pub fn header(&mut self, magic: &[u8; 4], max_version: u32) -> Result<u32> {
        let got = self.take(4)?.to_vec();
        if got != magic {
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version == 0 || version > max_version {
            return Err(self.err(format!("unsupported version {version}")));
        }
        Ok(version)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn dim(&mut self) -> Result<usize> {
        let v = self.u32()? as usize;
        if v > 1 << 24 {
            return Err(self.err(format!("implausible dimension {v}")));
        }
        Ok(v)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 8)?;
        let out: Vec<f64> = b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(self.err("non-finite parameter"));
        }
        Ok(out)
    }

    pub fn mat(&mut self, rows: usize, cols: usize) -> Result<DenseMat> {
        let data = self.f64s(rows * cols)?;
        DenseMat::from_vec(rows, cols, data)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}
