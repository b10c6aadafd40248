//! MSB-first bit packing.

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BitWriter {
    buf: Vec<u8>,
    len: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bits written so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&mut self, b: bool) {
        if self.len % 8 == 0 {
            self.buf.push(0);
        }
        if b {
            *self.buf.last_mut().unwrap() |= 0x80 >> (self.len % 8);
        }
        self.len += 1;
    }

    /// Low `n` bits of `v`, most significant first.
    pub fn bits(&mut self, v: u64, n: u32) {
        debug_assert!(n <= 64);
        for i in (0..n).rev() {
            self.bit((v >> i) & 1 == 1);
        }
    }

    pub fn u8(&mut self, v: u8) {
        self.bits(v as u64, 8);
    }

    /// Little-endian bytes of `v`, each byte MSB-first.
    pub fn le(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.u8(b);
        }
    }

    pub fn f32(&mut self, v: f32) {
        self.le(&v.to_le_bytes());
    }

    pub fn append(&mut self, other: &BitWriter) {
        let mut r = BitReader::new(&other.buf, other.len);
        for _ in 0..other.len {
            self.bit(r.bit().expect("within length"));
        }
    }

    /// Bytes with the final partial byte zero-padded.
    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }
}

#[derive(Clone, Debug)]
pub struct BitReader<'a> {
    buf: &'a [u8],
    pos: usize,
    limit: usize,
    base: usize,
}

impl<'a> BitReader<'a> {
    /// Reader over the first `limit` bits of `buf`.
    pub fn new(buf: &'a [u8], limit: usize) -> Self {
        Self {
            buf,
            pos: 0,
            limit: limit.min(buf.len() * 8),
            base: 0,
        }
    }

    /// Errors report byte offsets shifted by `base`, the reader's position in a file.
    pub fn with_base(mut self, base: usize) -> Self {
        self.base = base;
        self
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.limit - self.pos
    }

    fn truncated(&self) -> Error {
        Error::Truncated {
            offset: self.base + self.limit / 8,
        }
    }

    pub fn bit(&mut self) -> Result<bool> {
        if self.pos >= self.limit {
            return Err(self.truncated());
        }
        let b = self.buf[self.pos / 8] & (0x80 >> (self.pos % 8)) != 0;
        self.pos += 1;
        Ok(b)
    }

    pub fn bits(&mut self, n: u32) -> Result<u64> {
        if self.remaining() < n as usize {
            return Err(self.truncated());
        }
        let mut v = 0u64;
        for _ in 0..n {
            v = (v << 1) | self.bit()? as u64;
        }
        Ok(v)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bits(8)? as u8)
    }

    pub fn le<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.remaining() < 8 * N {
            return Err(self.truncated());
        }
        let mut out = [0u8; N];
        for b in out.iter_mut() {
            *b = self.u8()?;
        }
        Ok(out)
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.le()?))
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.le()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.le()?))
    }

    /// `n` whole bytes; the reader must be byte aligned.
    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        debug_assert_eq!(self.pos % 8, 0);
        if self.remaining() / 8 < n {
            return Err(self.truncated());
        }
        let start = self.pos / 8;
        self.pos += 8 * n;
        Ok(&self.buf[start..start + n])
    }

    /// Skips to the next byte boundary.
    pub fn align(&mut self) {
        self.pos = self.pos.div_ceil(8) * 8;
        self.pos = self.pos.min(self.limit);
    }
}
