//! Little-endian named-tensor container shared by checkpoints and optimiser state.
//!
//! ```text
//! magic [4] | header u32 * H | entry count u32 |
//! entries: name_len u32, name bytes, rank u32, dims u32 * rank, dtype u8 |
//! payload: f32 LE for every entry in table order |
//! crc32(payload) u32
//! ```

use crate::error::{Error, Result};

pub(crate) const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

pub(crate) fn write_container(magic: &[u8; 4], header: &[u32], entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    for h in header {
        out.extend_from_slice(&h.to_le_bytes());
    }
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(DTYPE_F32);
    }
    let start = out.len();
    for e in entries {
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a container; returns `(header, entries)`. Nothing is returned on any error.
pub(crate) fn read_container(bytes: &[u8], magic: &[u8; 4], header_len: usize) -> Result<(Vec<u32>, Vec<Entry>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let m = r.take(4)?;
    if m != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(magic)
        )));
    }
    let header = (0..header_len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("entry {name}: implausible rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("entry {name}: unsupported dtype tag {dtype}")));
        }
        table.push((name, dims));
    }
    let start = r.pos;
    let mut entries = Vec::with_capacity(table.len());
    for (name, dims) in table {
        let n = dims.iter().map(|&d| d as usize).product::<usize>();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push(Entry { name, dims, data });
    }
    let payload = &bytes[start..r.pos];
    let crc = r.u32()?;
    if crc != crc32fast::hash(payload) {
        return Err(Error::Checkpoint("payload CRC-32 mismatch".into()));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, entries))
}
