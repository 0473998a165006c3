//! Little-endian framing shared by the feature and checkpoint formats.

use crate::error::FormatError;

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self, len: usize) -> Result<String, FormatError> {
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FormatError::Malformed("name is not UTF-8".into()))
    }
}

/// Checks magic then version, in that order, before anything else is read.
pub(crate) fn check_header(r: &mut Reader, magic: [u8; 4], version: u16) -> Result<(), FormatError> {
    let found = r.take(4)?;
    if found != magic {
        let mut f = [0u8; 4];
        f.copy_from_slice(found);
        return Err(FormatError::BadMagic { expected: magic, found: f });
    }
    let v = r.u16()?;
    if v != version {
        return Err(FormatError::VersionMismatch {
            expected: version,
            found: v,
        });
    }
    Ok(())
}

/// Reads the trailing CRC and compares it with the bytes from `start` up to the trailer.
pub(crate) fn check_trailer(r: &mut Reader, all: &[u8], start: usize) -> Result<(), FormatError> {
    let end = r.pos();
    let stored = r.u32()?;
    if r.remaining() != 0 {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes after checksum",
            r.remaining()
        )));
    }
    let computed = crc32fast::hash(&all[start..end]);
    if stored != computed {
        return Err(FormatError::CrcMismatch { stored, computed });
    }
    Ok(())
}

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Appends the CRC of `out[start..]`.
pub(crate) fn put_trailer(out: &mut Vec<u8>, start: usize) {
    let crc = crc32fast::hash(&out[start..]);
    put_u32(out, crc);
}
