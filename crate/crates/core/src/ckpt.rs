//! Named-tensor checkpoint archive.
//!
//! Layout: magic "F2PC", format version (u32 LE), tensor count (u32 LE), then
//! per tensor: name length (u16 LE) + UTF-8 name, rank (u8), dims (u32 LE
//! each), payload (f32 LE), and finally a CRC32 (u32 LE) of all preceding
//! bytes.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"F2PC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug)]
pub enum CkptError {
    Io(io::Error),
    /// Magic or version mismatch.
    Incompatible(String),
    /// Structurally invalid contents (truncation, bad sizes, CRC failure).
    Corrupt(String),
}

impl fmt::Display for CkptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CkptError::Io(e) => write!(f, "io error: {e}"),
            CkptError::Incompatible(s) => write!(f, "incompatible checkpoint: {s}"),
            CkptError::Corrupt(s) => write!(f, "corrupt checkpoint: {s}"),
        }
    }
}

impl std::error::Error for CkptError {}

impl From<io::Error> for CkptError {
    fn from(e: io::Error) -> Self {
        CkptError::Io(e)
    }
}

/// Standard CRC32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    // Table built on demand; 256 u32s, cheap enough to recompute lazily.
    fn table() -> [u32; 256] {
        let mut t = [0u32; 256];
        for (i, e) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *e = c;
        }
        t
    }
    thread_local! {
        static TABLE: [u32; 256] = table();
    }
    TABLE.with(|t| {
        let mut c = 0xFFFF_FFFFu32;
        for &b in bytes {
            c = t[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
        }
        c ^ 0xFFFF_FFFF
    })
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>, CkptError> {
    let mut seen = HashSet::new();
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(CkptError::Corrupt(format!("duplicate tensor name `{}`", e.name)));
        }
        let numel: usize = e.shape.iter().product();
        if numel != e.data.len() {
            return Err(CkptError::Corrupt(format!(
                "tensor `{}`: shape {:?} does not match {} values",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<(), CkptError> {
    fs::write(path, encode(entries)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CkptError> {
        if self.pos + n > self.bytes.len() {
            return Err(CkptError::Corrupt(format!(
                "truncated at byte {} (need {} more)",
                self.pos, n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CkptError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CkptError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>, CkptError> {
    if bytes.len() < 4 + 4 + 4 + 4 {
        return Err(CkptError::Corrupt("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let actual = crc32(body);
    if stored != actual {
        return Err(CkptError::Corrupt(format!(
            "CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CkptError::Incompatible("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CkptError::Incompatible(format!(
            "format version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CkptError::Corrupt("tensor name not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(CkptError::Corrupt(format!("duplicate tensor name `{name}`")));
        }
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(4 * numel)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(CkptError::Corrupt(format!(
            "{} trailing bytes after last tensor",
            body.len() - r.pos
        )));
    }
    Ok(entries)
}

pub fn load(path: &Path) -> Result<Vec<Entry>, CkptError> {
    decode(&fs::read(path)?)
}
