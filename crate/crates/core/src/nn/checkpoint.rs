//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PALN"  version:u32  count:u64
//! repeated count times:
//!     name_len:u32  name:[u8; name_len] (UTF-8)
//!     rank:u32  dims:[u64; rank]
//!     data:[f64; product(dims)]
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PALN";
pub const VERSION: u32 = 1;

pub fn write_tensors<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        let name = name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors).expect("writing to a Vec cannot fail");
    buf
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(b)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    if &read_array::<4>(&mut r)? != MAGIC {
        return Err(bad("missing PALN magic"));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| bad(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(|e| bad(format!("truncated data for {name:?}: {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn save<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    crate::io::write_atomic(path, &encode_tensors(tensors))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_tensors(fs::read(path)?.as_slice())
}
