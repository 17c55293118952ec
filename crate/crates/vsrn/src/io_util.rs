//! Little-endian binary framing shared by the corpus and checkpoint
//! formats: magic, version, length-prefixed payload fields, and a trailing
//! CRC32 over everything before it.

use crate::error::{Error, Result};

/// Payload builder; [`Frame::finish`] appends the checksum.
pub(crate) struct Frame {
    buf: Vec<u8>,
}

impl Frame {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Frame { buf }
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64s(&mut self, values: &[f64]) {
        for v in values {
            self.put_f64(*v);
        }
    }

    /// Length-prefixed UTF-8.
    pub fn put_str(&mut self, s: &str) {
        self.put_u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

/// Checksum-validated reader over a frame.
pub(crate) struct FrameReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> FrameReader<'a> {
    /// Validate the trailing checksum, magic, and version before reading.
    pub fn open(data: &'a [u8], magic: &[u8; 4], expect_version: u32) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::Corruption("file too short for a checksum".into()));
        }
        let (payload, tail) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Corruption(format!(
                "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
            )));
        }
        let mut reader = FrameReader {
            data: payload,
            pos: 0,
        };
        let found_magic = reader.take(4)?;
        if found_magic != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found_magic),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = reader.get_u32()?;
        if version != expect_version {
            return Err(Error::Format(format!(
                "unsupported format version {version}, expected {expect_version}"
            )));
        }
        Ok(reader)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Corruption(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn get_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub fn get_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    pub fn get_f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect())
    }

    pub fn get_str(&mut self) -> Result<String> {
        let len = self.get_u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format("string field is not valid UTF-8".into()))
    }

    /// Error unless every payload byte has been consumed.
    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!(
                "{} unexpected trailing bytes",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}
