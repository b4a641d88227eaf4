//! Canonical byte encoding shared by digests, signatures and the wire format.
//!
//! Layout rules:
//! - integers are big-endian and fixed width (`u8`, `u16`, `u32`, `u64`);
//! - fixed-size values (digests, keys, signatures) are written raw;
//! - variable-length byte strings and sequences carry a `u32` length prefix.
//!
//! Every encoded value has exactly one byte representation, so hashes over
//! encodings are reproducible across runs and processes.

use std::collections::BTreeSet;

use bytes::{Buf, Bytes};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("input truncated")]
    Truncated,
    #[error("unsupported wire version {0}")]
    BadVersion(u8),
    #[error("unknown message tag {0}")]
    BadTag(u8),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
}

/// Append-only canonical encoder.
#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(cap: usize) -> Self {
        Self {
            buf: Vec::with_capacity(cap),
        }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    /// Raw fixed-width bytes; the reader must know the width.
    pub fn fixed(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.len(v.len());
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    /// Sequence length prefix.
    pub fn len(&mut self, n: usize) -> &mut Self {
        self.u32(u32::try_from(n).expect("sequence longer than u32::MAX"))
    }

    pub fn put<T: Encode + ?Sized>(&mut self, v: &T) -> &mut Self {
        v.encode(self);
        self
    }

    pub fn seq<T: Encode>(&mut self, items: &[T]) -> &mut Self {
        self.len(items.len());
        for item in items {
            item.encode(self);
        }
        self
    }

    pub fn position(&self) -> usize {
        self.buf.len()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Zero-copy decoder over a shared buffer.
#[derive(Debug, Clone)]
pub struct Reader {
    buf: Bytes,
}

impl Reader {
    pub fn new(buf: Bytes) -> Self {
        Self { buf }
    }

    fn need(&self, n: usize) -> Result<(), CodecError> {
        if self.buf.remaining() < n {
            Err(CodecError::Truncated)
        } else {
            Ok(())
        }
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        self.need(1)?;
        Ok(self.buf.get_u8())
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        self.need(2)?;
        Ok(self.buf.get_u16())
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        self.need(4)?;
        Ok(self.buf.get_u32())
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        self.need(8)?;
        Ok(self.buf.get_u64())
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        self.need(N)?;
        let mut out = [0u8; N];
        self.buf.copy_to_slice(&mut out);
        Ok(out)
    }

    pub fn len(&mut self) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        // A sequence can never hold more elements than there are bytes left.
        if n > self.buf.remaining() {
            return Err(CodecError::Truncated);
        }
        Ok(n)
    }

    pub fn bytes(&mut self) -> Result<Bytes, CodecError> {
        let n = self.len()?;
        Ok(self.buf.split_to(n))
    }

    pub fn string(&mut self) -> Result<String, CodecError> {
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| CodecError::Invalid("utf-8 string"))
    }

    pub fn get<T: Decode>(&mut self) -> Result<T, CodecError> {
        T::decode(self)
    }

    pub fn seq<T: Decode>(&mut self) -> Result<Vec<T>, CodecError> {
        let n = self.len()?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(T::decode(self)?);
        }
        Ok(out)
    }

    pub fn remaining(&self) -> usize {
        self.buf.remaining()
    }

    pub fn finish(self) -> Result<(), CodecError> {
        match self.buf.remaining() {
            0 => Ok(()),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }
}

pub trait Encode {
    fn encode(&self, w: &mut Writer);

    fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish()
    }
}

pub trait Decode: Sized {
    fn decode(r: &mut Reader) -> Result<Self, CodecError>;

    fn from_bytes(bytes: impl Into<Bytes>) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes.into());
        let v = Self::decode(&mut r)?;
        r.finish()?;
        Ok(v)
    }
}

impl Encode for u64 {
    fn encode(&self, w: &mut Writer) {
        w.u64(*self);
    }
}

impl Decode for u64 {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        r.u64()
    }
}

impl<T: Encode + ?Sized> Encode for std::sync::Arc<T> {
    fn encode(&self, w: &mut Writer) {
        (**self).encode(w)
    }
}

impl<T: Decode> Decode for std::sync::Arc<T> {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        T::decode(r).map(std::sync::Arc::new)
    }
}

impl<T: Encode> Encode for Vec<T> {
    fn encode(&self, w: &mut Writer) {
        w.seq(self);
    }
}

impl<T: Decode> Decode for Vec<T> {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        r.seq()
    }
}

/// Sets encode in ascending order, so equal sets have equal bytes.
impl<T: Encode + Ord> Encode for BTreeSet<T> {
    fn encode(&self, w: &mut Writer) {
        w.len(self.len());
        for item in self {
            item.encode(w);
        }
    }
}

impl<T: Decode + Ord> Decode for BTreeSet<T> {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        let n = r.len()?;
        let mut out = BTreeSet::new();
        for _ in 0..n {
            let item = T::decode(r)?;
            if out.last().is_some_and(|prev| *prev >= item) {
                return Err(CodecError::Invalid("set not strictly ascending"));
            }
            out.insert(item);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_big_endian() {
        let mut w = Writer::new();
        w.u16(0x0102).u32(0x03040506).u64(7);
        assert_eq!(w.finish(), vec![1, 2, 3, 4, 5, 6, 0, 0, 0, 0, 0, 0, 0, 7]);
    }

    #[test]
    fn length_prefix_guards_against_oversized_claims() {
        let mut w = Writer::new();
        w.u32(1000).fixed(&[1, 2, 3]);
        let mut r = Reader::new(Bytes::from(w.finish()));
        assert_eq!(r.bytes(), Err(CodecError::Truncated));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut w = Writer::new();
        w.u64(5).u8(9);
        assert_eq!(
            u64::from_bytes(w.finish()),
            Err(CodecError::TrailingBytes(1))
        );
    }
}
