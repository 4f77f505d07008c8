//! Binary container of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SFSL" | version: u32 | count: u32
//! count x ( name_len: u32 | name: utf-8 | rank: u32 | dims: u64 x rank | data: f32 x numel )
//! crc32: u32 over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFSL";
pub const VERSION: u32 = 1;

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Serializes tensors in the given order; names must be unique.
pub fn encode<'a, I>(tensors: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let mut names: Vec<&str> = tensors.iter().map(|(n, _)| *n).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Invalid(format!("duplicate tensor name {}", w[0])));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(self.path, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 16 {
        return Err(corrupt(path, "too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if body[..4] != MAGIC[..] {
        return Err(corrupt(path, "bad magic"));
    }
    if crc32fast::hash(body) != stored {
        return Err(corrupt(path, "CRC mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 4, path };
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(path, format!("unknown version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
    let mut seen = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| corrupt(path, "name is not utf-8"))?
            .to_string();
        if seen.insert(name.clone(), ()).is_some() {
            return Err(corrupt(path, format!("duplicate tensor name {name}")));
        }
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(usize::try_from(r.u64()?).map_err(|_| corrupt(path, "dim overflow"))?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt(path, "size overflow"))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| corrupt(path, "size overflow"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != body.len() {
        return Err(corrupt(path, "trailing bytes"));
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| corrupt(path, "not a file path"))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_tensors<'a, I>(tensors: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    write_atomic(path, &encode(tensors)?)
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

/// Saves every parameter in name order.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    save_tensors(store.iter().map(|(n, t)| (n.as_str(), t)), path)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    Ok(ParamStore::from(
        load_tensors(path)?.into_iter().collect::<BTreeMap<_, _>>(),
    ))
}
