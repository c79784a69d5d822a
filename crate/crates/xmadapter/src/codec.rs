//! Little-endian primitives shared by the bundle and checkpoint formats.

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    /// Writes a count as u32, refusing values that do not fit.
    pub fn count(&mut self, field: &'static str, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::TooLarge { field, value: v })?;
        self.u32(v);
        Ok(())
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vals: &[f64]) {
        self.buf.reserve(vals.len() * 4);
        for &v in vals {
            self.bytes(&(v as f32).to_le_bytes());
        }
    }

    pub fn f64s(&mut self, vals: &[f64]) {
        self.buf.reserve(vals.len() * 8);
        for &v in vals {
            self.f64(v);
        }
    }

    pub fn counts(&mut self, field: &'static str, vals: &[usize]) -> Result<()> {
        vals.iter().try_for_each(|&v| self.count(field, v))
    }

    pub fn string(&mut self, s: &str) -> Result<()> {
        self.count("string length", s.len())?;
        self.bytes(s.as_bytes());
        Ok(())
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length checked"))
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.array::<4>()?;
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// Byte length of `n` elements of `width` bytes, checked against the
    /// remaining input before anything is allocated.
    fn span(&self, n: usize, width: usize) -> Result<usize> {
        let bytes = n.checked_mul(width).unwrap_or(usize::MAX);
        if bytes > self.remaining() {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: bytes,
                available: self.remaining(),
            });
        }
        Ok(bytes)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.span(n, 4)?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.span(n, 8)?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn counts(&mut self, n: usize) -> Result<Vec<usize>> {
        let bytes = self.span(n, 4)?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(Error::TrailingBytes(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_round_trip() {
        let mut w = Writer::new();
        w.u16(0xBEEF);
        w.u32(7);
        w.u64(u64::MAX - 1);
        w.f64(-0.1);
        w.f32s(&[1.5, -2.25]);
        w.string("héllo").unwrap();
        let bytes = w.into_bytes();
        assert_eq!(&bytes[..2], &[0xEF, 0xBE]);
        let mut r = Reader::new(&bytes);
        assert_eq!(r.u16().unwrap(), 0xBEEF);
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.u64().unwrap(), u64::MAX - 1);
        assert_eq!(r.f64().unwrap(), -0.1);
        assert_eq!(r.f32s(2).unwrap(), vec![1.5, -2.25]);
        let len = r.count().unwrap();
        assert_eq!(std::str::from_utf8(r.take(len).unwrap()).unwrap(), "héllo");
        r.finish().unwrap();
    }

    #[test]
    fn huge_counts_fail_before_allocating() {
        let mut r = Reader::new(&[0u8; 8]);
        assert!(matches!(r.f32s(usize::MAX / 2), Err(Error::Truncated { offset: 0, .. })));
    }
}
