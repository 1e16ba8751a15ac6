//! Binary checkpoint format.
//!
//! Layout: magic `CIHR`, format version (u32 LE), length-prefixed UTF-8
//! header text, tensor count (u32 LE), then per tensor: name length (u32),
//! name bytes, dtype tag (u8, 1 = f64), rank (u32), extents (u64 each),
//! row-major f64 LE payload. A trailing u64 FNV-1a hash covers every byte
//! between the magic and the hash itself.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"CIHR";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic: expected CIHR")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("unsupported dtype tag {0}")]
    BadDtype(u8),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("truncated or malformed checkpoint: {0}")]
    Malformed(String),
    #[error("duplicate tensor name {0}")]
    DuplicateTensor(String),
}

/// FNV-1a, 64-bit.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub tensors: BTreeMap<String, NamedTensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        body.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        body.extend_from_slice(self.header.as_bytes());
        body.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            debug_assert_eq!(t.shape.iter().product::<usize>(), t.values.len());
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.push(DTYPE_F64);
            body.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &e in &t.shape {
                body.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in &t.values {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(4 + body.len() + 8);
        out.extend_from_slice(&MAGIC);
        let checksum = fnv1a(&body);
        out.extend_from_slice(&body);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 4 + 8 || bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let body = &bytes[4..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let computed = fnv1a(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut cur = std::io::Cursor::new(body);
        let trunc = |what: &str| CheckpointError::Malformed(format!("truncated {what}"));
        let read_u32 = |cur: &mut std::io::Cursor<&[u8]>, what: &str| {
            let mut b = [0u8; 4];
            cur.read_exact(&mut b).map_err(|_| trunc(what))?;
            Ok::<u32, CheckpointError>(u32::from_le_bytes(b))
        };
        let version = read_u32(&mut cur, "version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let header_len = read_u32(&mut cur, "header length")? as usize;
        let mut hbytes = vec![0u8; header_len];
        cur.read_exact(&mut hbytes).map_err(|_| trunc("header"))?;
        let header = String::from_utf8(hbytes)
            .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?;
        let count = read_u32(&mut cur, "tensor count")? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut cur, "name length")? as usize;
            let mut nbytes = vec![0u8; name_len];
            cur.read_exact(&mut nbytes).map_err(|_| trunc("name"))?;
            let name = String::from_utf8(nbytes)
                .map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))?;
            let mut tag = [0u8; 1];
            cur.read_exact(&mut tag).map_err(|_| trunc("dtype"))?;
            if tag[0] != DTYPE_F64 {
                return Err(CheckpointError::BadDtype(tag[0]));
            }
            let rank = read_u32(&mut cur, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                cur.read_exact(&mut b).map_err(|_| trunc("extent"))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            let mut b = [0u8; 8];
            for _ in 0..numel {
                cur.read_exact(&mut b).map_err(|_| trunc("payload"))?;
                values.push(f64::from_le_bytes(b));
            }
            if tensors.insert(name.clone(), NamedTensor { shape, values }).is_some() {
                return Err(CheckpointError::DuplicateTensor(name));
            }
        }
        if cur.position() as usize != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes after records".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        f.write_all(&bytes).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Read one `key = value` entry from a section of the header text.
/// Sections are `[name]` lines; entries belong to the preceding section.
pub fn header_lookup(header: &str, section: &str, key: &str) -> Option<String> {
    let mut in_section = false;
    for line in header.lines() {
        let line = line.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            in_section = name == section;
            continue;
        }
        if in_section {
            if let Some((k, v)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(v.trim().to_string());
                }
            }
        }
    }
    None
}
