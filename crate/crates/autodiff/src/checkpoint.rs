//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "DSTCKPT1"
//! n_meta    u32
//!   key     u32 length + UTF-8 bytes
//!   value   u32 length + UTF-8 bytes
//! n_params  u32
//!   name    u32 length + UTF-8 bytes
//!   rank    u32
//!   dims    rank x u64
//!   data    product(dims) x f64 (IEEE-754 bits, row-major)
//! ```
//!
//! Values are stored as raw bits, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DSTCKPT1";

pub type Metadata = BTreeMap<String, String>;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| AutodiffError::Checkpoint(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode(store: &ParamStore, meta: &Metadata) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + store.num_weights() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, meta.len())?;
    for (k, v) in meta {
        put_str(&mut out, k)?;
        put_str(&mut out, v)?;
    }
    put_u32(&mut out, store.len())?;
    for (_, p) in store.iter() {
        put_str(&mut out, &p.name)?;
        put_u32(&mut out, p.value.rank())?;
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| AutodiffError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| AutodiffError::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, Metadata)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut meta = Metadata::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        meta.insert(k, v);
    }
    let mut store = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        store.add(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(AutodiffError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((store, meta))
}

pub fn save(path: &Path, store: &ParamStore, meta: &Metadata) -> Result<()> {
    let bytes = encode(store, meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, Metadata)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Copies values from `source` into `target` by name, requiring identical
/// names and shapes.
pub fn restore_into(target: &mut ParamStore, source: &ParamStore) -> Result<()> {
    if target.len() != source.len() {
        return Err(AutodiffError::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            source.len(),
            target.len()
        )));
    }
    for (_, p) in source.iter() {
        let id = target.id(&p.name)?;
        let dst = target.get_mut(id);
        if dst.shape() != p.value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "restore",
                lhs: dst.shape().to_vec(),
                rhs: p.value.shape().to_vec(),
            });
        }
        dst.data_mut().copy_from_slice(p.value.data());
    }
    Ok(())
}
