//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "FAMK" | version | entry count
//! per entry: name length | name (UTF-8) | rank | dims… | f32 payload
//! ```
//!
//! Entries are written in name order, so saving the same table always
//! produces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FAMK";
pub const VERSION: u32 = 1;

pub type TensorTable = BTreeMap<String, Tensor<f32>>;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes<T: Scalar>(table: &BTreeMap<String, Tensor<T>>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut buf, table.len())?;
    for (name, t) in table {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TensorTable> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut table = BTreeMap::new();
    for i in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("entry {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("entry '{name}' has an overflowing shape")))?;
        let payload = r.take(n, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, data)?;
        if table.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate entry '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last entry", bytes.len() - r.pos)));
    }
    Ok(table)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, table: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    fs::write(path, to_bytes(table)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TensorTable> {
    from_bytes(&fs::read(path)?)
}

/// Entries whose name starts with `prefix.`.
pub fn select<T: Clone>(table: &BTreeMap<String, Tensor<T>>, prefix: &str) -> BTreeMap<String, Tensor<T>> {
    let p = format!("{prefix}.");
    table
        .iter()
        .filter(|(k, _)| k.starts_with(&p))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}
