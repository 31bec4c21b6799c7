//! Little-endian primitives shared by the PGWF and PGNET containers.

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn f64s(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.f64(v);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Truncated { section })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &'static str) -> Result<()> {
        let got = self
            .take(expected.len(), "magic")
            .map_err(|_| Error::BadMagic { expected })?;
        if got != expected.as_bytes() {
            return Err(Error::BadMagic { expected });
        }
        Ok(())
    }

    pub fn u8(&mut self, section: &'static str) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    pub fn u16(&mut self, section: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, section: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, section: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, section: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    pub fn str(&mut self, section: &'static str) -> Result<String> {
        let len = self.u32(section)? as usize;
        let bytes = self.take(len, section)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::malformed(format!("{section}: invalid UTF-8")))
    }

    /// Reads `count` f64 values, checking the length up front so a corrupt
    /// count cannot trigger a huge allocation.
    pub fn f64s(&mut self, count: usize, section: &'static str) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(8)
            .ok_or(Error::Truncated { section })?;
        let raw = self.take(bytes, section)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::malformed(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
