//! Named-tensor archive: the persistence format for checkpoints,
//! generated pair sets, and optimizer state.
//!
//! Layout (all integers little-endian; offsets absolute):
//!
//! ```text
//! magic      8  bytes  b"TNSRARC1"
//! version    u32       1
//! meta_count u32       key/value string pairs
//!   per meta:  key_len u32, key bytes, val_len u32, val bytes
//! entry_count u64
//!   per entry: name_len u32, name bytes,
//!              dtype u8 (0=f32, 1=f64, 2=u32),
//!              ndim u32, dims u64 * ndim,
//!              offset u64, byte_len u64
//! payload    concatenated entry bytes in entry order
//! ```
//!
//! Entries are written in insertion order and offsets are checked to be
//! non-overlapping on read, so a save/load round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use latentsr_tensor::{Scalar, Tensor};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TNSRARC1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArchiveData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl ArchiveData {
    fn dtype_tag(&self) -> u8 {
        match self {
            ArchiveData::F32(_) => 0,
            ArchiveData::F64(_) => 1,
            ArchiveData::U32(_) => 2,
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            ArchiveData::F32(v) => 4 * v.len(),
            ArchiveData::F64(v) => 8 * v.len(),
            ArchiveData::U32(v) => 4 * v.len(),
        }
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        match self {
            ArchiveData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArchiveData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArchiveData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArchiveData,
}

/// In-memory archive; see the module docs for the byte layout.
#[derive(Default, Clone)]
pub struct TensorArchive {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<ArchiveEntry>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(ArchiveEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: ArchiveData::F32(data),
        });
    }

    pub fn push_u32(&mut self, name: &str, shape: &[usize], data: Vec<u32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(ArchiveEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: ArchiveData::U32(data),
        });
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        // Training tensors persist as f32 regardless of compute type.
        let data: Vec<f32> = t.data().iter().map(|&v| v.to_f64() as f32).collect();
        self.push_f32(name, t.shape(), data);
    }

    pub fn entry(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor_f32(&self, name: &str) -> Result<Tensor<f32>> {
        let e = self
            .entry(name)
            .ok_or_else(|| Error::Archive(format!("missing entry {name:?}")))?;
        match &e.data {
            ArchiveData::F32(v) => {
                Ok(Tensor::from_vec(v.clone(), &e.shape).map_err(Error::Tensor)?)
            }
            other => Err(Error::Archive(format!(
                "entry {name:?} has dtype {:?}, expected f32",
                other.dtype_tag()
            ))),
        }
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        // Header size must be known to place absolute payload offsets.
        let mut header_len = 8 + 4 + 4;
        for (k, v) in &self.meta {
            header_len += 4 + k.len() + 4 + v.len();
        }
        header_len += 8;
        for e in &self.entries {
            header_len += 4 + e.name.len() + 1 + 4 + 8 * e.shape.len() + 8 + 8;
        }

        let mut out = Vec::with_capacity(header_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        let mut offset = header_len as u64;
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.dtype_tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(e.data.byte_len() as u64).to_le_bytes());
            offset += e.data.byte_len() as u64;
        }
        debug_assert_eq!(out.len(), header_len);
        for e in &self.entries {
            e.data.write_bytes(&mut out);
        }
        out
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> std::result::Result<&[u8], String> {
            if *pos + n > bytes.len() {
                return Err("truncated archive".into());
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> std::result::Result<u32, String> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let u64_at = |pos: &mut usize| -> std::result::Result<u64, String> {
            Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };

        if take(&mut pos, 8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = u32_at(&mut pos)?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let meta_count = u32_at(&mut pos)?;
        let mut meta = Vec::with_capacity(meta_count as usize);
        for _ in 0..meta_count {
            let klen = u32_at(&mut pos)? as usize;
            let k = String::from_utf8(take(&mut pos, klen)?.to_vec()).map_err(|e| e.to_string())?;
            let vlen = u32_at(&mut pos)? as usize;
            let v = String::from_utf8(take(&mut pos, vlen)?.to_vec()).map_err(|e| e.to_string())?;
            meta.push((k, v));
        }
        let entry_count = u64_at(&mut pos)?;
        struct RawEntry {
            name: String,
            dtype: u8,
            shape: Vec<usize>,
            offset: u64,
            byte_len: u64,
        }
        let mut raw = Vec::with_capacity(entry_count as usize);
        for _ in 0..entry_count {
            let nlen = u32_at(&mut pos)? as usize;
            let name =
                String::from_utf8(take(&mut pos, nlen)?.to_vec()).map_err(|e| e.to_string())?;
            let dtype = take(&mut pos, 1)?[0];
            let ndim = u32_at(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64_at(&mut pos)? as usize);
            }
            let offset = u64_at(&mut pos)?;
            let byte_len = u64_at(&mut pos)?;
            raw.push(RawEntry {
                name,
                dtype,
                shape,
                offset,
                byte_len,
            });
        }
        // Offsets must be non-overlapping and in bounds.
        let mut spans: Vec<(u64, u64)> = raw.iter().map(|r| (r.offset, r.byte_len)).collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[0].0 + w[0].1 > w[1].0 {
                return Err("overlapping entry payloads".into());
            }
        }
        let mut entries = Vec::with_capacity(raw.len());
        for r in raw {
            let start = r.offset as usize;
            let end = start + r.byte_len as usize;
            if end > bytes.len() {
                return Err(format!("entry {:?} payload out of bounds", r.name));
            }
            let payload = &bytes[start..end];
            let numel: usize = r.shape.iter().product();
            let data = match r.dtype {
                0 => {
                    if payload.len() != 4 * numel {
                        return Err(format!("entry {:?} size mismatch", r.name));
                    }
                    ArchiveData::F32(
                        payload
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                1 => {
                    if payload.len() != 8 * numel {
                        return Err(format!("entry {:?} size mismatch", r.name));
                    }
                    ArchiveData::F64(
                        payload
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                2 => {
                    if payload.len() != 4 * numel {
                        return Err(format!("entry {:?} size mismatch", r.name));
                    }
                    ArchiveData::U32(
                        payload
                            .chunks_exact(4)
                            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                other => return Err(format!("unknown dtype tag {other}")),
            };
            entries.push(ArchiveEntry {
                name: r.name,
                shape: r.shape,
                data,
            });
        }
        Ok(TensorArchive { meta, entries })
    }
}
