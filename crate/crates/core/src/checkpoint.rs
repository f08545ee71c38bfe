//! Binary checkpoint format.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "UNODE\x01"
//! count
//! count x { name_len, name bytes, rank, rank x extent }
//! data: f32 little-endian, parameters in manifest order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 6] = b"UNODE\x01";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialize named tensors.
pub fn encode<E: Element>(entries: &[(&str, &Tensor<E>)]) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, entries.len())?;
    for (name, t) in entries {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
    }
    for (_, t) in entries {
        for &x in t.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parse a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode<E: Element>(bytes: &[u8]) -> Result<Vec<(String, Tensor<E>)>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let count = c.u32()?;
    let mut manifest = Vec::new();
    for _ in 0..count {
        let n = c.u32()?;
        let name = String::from_utf8(c.take(n)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let mut out = Vec::with_capacity(count);
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| E::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint data",
            bytes.len() - c.pos
        )));
    }
    Ok(out)
}

pub fn encode_store<E: Element>(store: &ParamStore<E>) -> Result<Vec<u8>> {
    let entries: Vec<(&str, &Tensor<E>)> = store
        .iter()
        .map(|p| (p.name.as_str(), p.value.as_ref()))
        .collect();
    encode(&entries)
}

pub fn save_store<E: Element>(store: &ParamStore<E>, path: &Path) -> Result<()> {
    let bytes = encode_store(store)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Load checkpoint values into `store`; names and shapes must match exactly.
pub fn load_into_store<E: Element>(store: &mut ParamStore<E>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    restore_store(store, &bytes)
}

pub fn restore_store<E: Element>(store: &mut ParamStore<E>, bytes: &[u8]) -> Result<()> {
    let entries = decode::<E>(bytes)?;
    if entries.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (id, (name, t)) in entries.into_iter().enumerate() {
        let expected = &store.get(id).name;
        if *expected != name {
            return Err(Error::Format(format!(
                "checkpoint parameter {id} is {name}, model expects {expected}"
            )));
        }
        store
            .set_value(id, t)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

pub fn save_tensor<E: Element>(t: &Tensor<E>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(&[("tensor", t)])?)?;
    Ok(())
}

pub fn load_tensor<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let bytes = std::fs::read(path)?;
    let mut entries = decode::<E>(&bytes)?;
    if entries.len() != 1 {
        return Err(Error::Format(format!(
            "expected one tensor, found {}",
            entries.len()
        )));
    }
    Ok(entries.remove(0).1)
}
