use std::io::{ErrorKind, Read, Write};

use super::FormatError;

type Result<T> = std::result::Result<T, FormatError>;

/// Length-checked little-endian reads. Variable-length fields are read
/// incrementally, so a corrupt length can never allocate more than the
/// input actually holds.
pub(crate) struct WireReader<R> {
    inner: R,
}

impl<R: Read> WireReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn fill(&mut self, buf: &mut [u8], what: &dyn Fn() -> String) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(FormatError::Truncated(what())),
            Err(e) => Err(FormatError::Io(e)),
        }
    }

    pub fn array<const N: usize>(&mut self, what: &dyn Fn() -> String) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    pub fn u8(&mut self, what: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub fn u64(&mut self, what: &dyn Fn() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub fn bytes(&mut self, len: u64, what: &dyn Fn() -> String) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner).take(len).read_to_end(&mut buf)?;
        if (buf.len() as u64) < len {
            return Err(FormatError::Truncated(what()));
        }
        Ok(buf)
    }

    /// `u32` length prefix followed by UTF-8 bytes.
    pub fn string(&mut self, what: &dyn Fn() -> String) -> Result<String> {
        let len = self.u32(what)?;
        let bytes = self.bytes(u64::from(len), what)?;
        String::from_utf8(bytes).map_err(|_| FormatError::Text(what()))
    }

    pub fn f32s(&mut self, count: u64, what: &dyn Fn() -> String) -> Result<Vec<f32>> {
        let bytes = self.bytes(
            count
                .checked_mul(4)
                .ok_or_else(|| FormatError::Record(what()))?,
            what,
        )?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(what()));
        }
        Ok(values)
    }

    /// Succeeds only at end of input.
    pub fn expect_eof(&mut self, what: &dyn Fn() -> String) -> Result<()> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(()),
                Ok(_) => return Err(FormatError::TrailingData(what())),
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(FormatError::Io(e)),
            }
        }
    }
}

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(
        w,
        u32::try_from(s.len()).expect("string shorter than 4 GiB"),
    )?;
    w.write_all(s.as_bytes())
}

pub(crate) fn put_f32s(
    w: &mut impl Write,
    values: impl IntoIterator<Item = f32>,
) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}
