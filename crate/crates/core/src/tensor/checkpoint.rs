//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic        4 bytes  "MMST"
//! version      u32
//! count        u64      number of records
//! record × count:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rank       u32
//!   extents    rank × u64
//!   values     product(extents) × f32
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMST";
pub const VERSION: u32 = 1;

/// Serializes named tensors; values are stored as `f32`.
pub fn to_bytes<'a, T: Real + 'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
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

pub fn from_bytes(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = cur.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    if cur.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - cur.pos
        )));
    }
    Ok(out)
}

pub fn write_file<'a, T: Real + 'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    let bytes = to_bytes(entries);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

pub fn save_store<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    write_file(path, store.iter())
}

/// Loads every tensor of `path` into `store` by name. The file must cover
/// the store exactly.
pub fn load_store<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let entries = read_file(path)?;
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "file holds {} tensors, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        store.set(&name, t.cast())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let a = Tensor::<f32>::new(&[2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-7, 1e30, -2.25]).unwrap();
        let b = Tensor::<f32>::new(&[1], vec![0.1]).unwrap();
        let bytes = to_bytes([("a", &a), ("layer.b", &b)]);
        assert_eq!(&bytes[..4], b"MMST");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[1].0, "layer.b");
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(back[0].1.shape(), a.shape());
        assert_eq!(to_bytes(back.iter().map(|(n, t)| (n.as_str(), t))), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let a = Tensor::<f32>::zeros(&[4]);
        let mut bytes = to_bytes([("a", &a)]);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());
    }
}
