//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       4 bytes  "PGLB"
//! version     u32      currently 1
//! config hash 32 bytes SHA-256 of the canonical run configuration
//! entry count u64
//! entries     sorted by name:
//!     name length  u32
//!     name bytes   UTF-8
//!     dtype        u8   (0 = f32, 1 = f64, 2 = u64)
//!     rank         u8
//!     extents      rank × u64
//!     data         numel × element bytes
//! trailer     u64      CRC-64/ECMA of every preceding byte
//! ```
//!
//! Entries live in a `BTreeMap`, so serialization order is deterministic
//! and two checkpoints of identical state are identical bytes. Writes go
//! through a temporary file in the destination directory followed by an
//! atomic rename.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGLB";
pub const CHECKPOINT_VERSION: u32 = 1;

/// CRC-64/ECMA-182 (reflected form, polynomial 0xC96C5795D7870F42,
/// init/xorout all-ones) of `bytes`.
pub fn crc64_ecma(bytes: &[u8]) -> u64 {
    const POLY: u64 = 0xC96C_5795_D787_0F42;
    let mut table = [0u64; 256];
    let mut i = 0usize;
    while i < 256 {
        let mut crc = i as u64;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ POLY } else { crc >> 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    let mut crc = !0u64;
    for &b in bytes {
        crc = table[((crc ^ b as u64) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

/// One named tensor in the checkpoint table, held in serialized form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEntry {
    pub dtype: Dtype,
    pub extents: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// In-memory checkpoint: a config fingerprint plus a named tensor table.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub entries: BTreeMap<String, RawEntry>,
}

fn elem_width(dtype: Dtype) -> usize {
    match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
        Dtype::U64 => 8,
    }
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32]) -> Checkpoint {
        Checkpoint {
            config_hash,
            entries: BTreeMap::new(),
        }
    }

    pub fn put_tensor<E: Scalar>(&mut self, name: &str, t: &Tensor<E>) {
        let mut bytes = Vec::with_capacity(t.numel() * E::byte_width());
        for v in t.data().iter() {
            bytes.extend_from_slice(&v.to_le_bytes_vec());
        }
        self.entries.insert(
            name.to_string(),
            RawEntry {
                dtype: E::DTYPE,
                extents: t.shape().to_vec(),
                bytes,
            },
        );
    }

    pub fn get_tensor<E: Scalar>(&self, name: &str) -> Result<Tensor<E>> {
        let entry = self.entry(name)?;
        if entry.dtype != E::DTYPE {
            return Err(Error::Config(format!(
                "checkpoint entry {name} has dtype {:?}, expected {:?}",
                entry.dtype,
                E::DTYPE
            )));
        }
        let w = E::byte_width();
        let data: Vec<E> = entry
            .bytes
            .chunks_exact(w)
            .map(E::from_le_slice)
            .collect();
        Tensor::from_vec(&entry.extents, data)
    }

    pub fn put_u64s(&mut self, name: &str, vals: &[u64]) {
        let mut bytes = Vec::with_capacity(vals.len() * 8);
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.insert(
            name.to_string(),
            RawEntry {
                dtype: Dtype::U64,
                extents: vec![vals.len()],
                bytes,
            },
        );
    }

    pub fn get_u64s(&self, name: &str) -> Result<Vec<u64>> {
        let entry = self.entry(name)?;
        if entry.dtype != Dtype::U64 {
            return Err(Error::Config(format!(
                "checkpoint entry {name} is not u64",
            )));
        }
        Ok(entry
            .bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let v = self.get_u64s(name)?;
        if v.len() != 1 {
            return Err(Error::Config(format!(
                "checkpoint entry {name} holds {} values, expected 1",
                v.len()
            )));
        }
        Ok(v[0])
    }

    pub fn put_f64s(&mut self, name: &str, vals: &[f64]) {
        let mut bytes = Vec::with_capacity(vals.len() * 8);
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.insert(
            name.to_string(),
            RawEntry {
                dtype: Dtype::F64,
                extents: vec![vals.len()],
                bytes,
            },
        );
    }

    pub fn get_f64s(&self, name: &str) -> Result<Vec<f64>> {
        let entry = self.entry(name)?;
        if entry.dtype != Dtype::F64 {
            return Err(Error::Config(format!(
                "checkpoint entry {name} is not f64",
            )));
        }
        Ok(entry
            .bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn get_f64(&self, name: &str) -> Result<f64> {
        let v = self.get_f64s(name)?;
        if v.len() != 1 {
            return Err(Error::Config(format!(
                "checkpoint entry {name} holds {} values, expected 1",
                v.len()
            )));
        }
        Ok(v[0])
    }

    fn entry(&self, name: &str) -> Result<&RawEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing entry {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.dtype as u8);
            out.push(entry.extents.len() as u8);
            for &e in &entry.extents {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&entry.bytes);
        }
        let crc = crc64_ecma(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let fail = |msg: &str| Error::Config(format!("checkpoint: {msg}"));
        if buf.len() < 4 + 4 + 32 + 8 + 8 {
            return Err(fail("file too short"));
        }
        let (body, trailer) = buf.split_at(buf.len() - 8);
        let stored_crc = u64::from_le_bytes(trailer.try_into().expect("8-byte trailer"));
        if crc64_ecma(body) != stored_crc {
            return Err(fail("checksum mismatch (corrupted file)"));
        }
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > body.len() {
                return Err(Error::Config("checkpoint: truncated".into()));
            }
            let s = &body[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(fail("bad magic (not a checkpoint file)"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("u32"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(&format!(
                "version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(take(32)?);
        let count = u64::from_le_bytes(take(8)?.try_into().expect("u64")) as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().expect("u32")) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| fail("entry name is not UTF-8"))?;
            let dtype = Dtype::from_u8(take(1)?[0]).ok_or_else(|| fail("unknown dtype"))?;
            let rank = take(1)?[0] as usize;
            let mut extents = Vec::with_capacity(rank);
            for _ in 0..rank {
                extents.push(u64::from_le_bytes(take(8)?.try_into().expect("u64")) as usize);
            }
            let numel: usize = extents.iter().product();
            let bytes = take(numel * elem_width(dtype))?.to_vec();
            entries.insert(
                name,
                RawEntry {
                    dtype,
                    extents,
                    bytes,
                },
            );
        }
        if pos != body.len() {
            return Err(fail("trailing bytes after entry table"));
        }
        Ok(Checkpoint {
            config_hash,
            entries,
        })
    }

    /// Atomic save: write to a temporary sibling, then rename into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".into())
        ));
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf)
    }
}
