//! Binary parameter snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "PADMIXCK"
//! version      u32      = 1
//! meta count   u32      M, then M x (u32 len, utf8 key, u32 len, utf8 value), keys sorted
//! step         u64      optimizer step counter
//! param count  u32      N, then N x (u32 len, utf8 name, u8 group, u32 ndim, ndim x u32)
//! flags        u8       bit 0: optimizer moments follow the values
//! payload      f32      values of every parameter in table order,
//!                       then (if flagged) all first moments, then all second moments
//! ```

use std::collections::BTreeMap;

use super::store::{ParamGroup, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PADMIXCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub meta: BTreeMap<String, String>,
    pub store: ParamStore<f32>,
    pub with_moments: bool,
}

pub fn encode(snapshot: &Snapshot) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(snapshot.meta.len() as u32).to_le_bytes());
    for (k, v) in &snapshot.meta {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    out.extend_from_slice(&snapshot.store.step().to_le_bytes());
    out.extend_from_slice(&(snapshot.store.len() as u32).to_le_bytes());
    for p in snapshot.store.iter() {
        put_str(&mut out, &p.name);
        out.push(p.group.code());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    out.push(u8::from(snapshot.with_moments));
    let mut put_all = |sel: fn(&super::store::Param<f32>) -> &Tensor<f32>| {
        for p in snapshot.store.iter() {
            for v in sel(p).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    };
    put_all(|p| &p.value);
    if snapshot.with_moments {
        put_all(|p| &p.m);
        put_all(|p| &p.v);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Snapshot> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut meta = BTreeMap::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        meta.insert(k, v);
    }
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let group = ParamGroup::from_code(r.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("bad group code for {name}")))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        table.push((name, group, shape));
    }
    let with_moments = match r.u8()? {
        0 => false,
        1 => true,
        f => return Err(Error::Checkpoint(format!("bad flags {f}"))),
    };
    let mut store = ParamStore::new();
    for (name, group, shape) in &table {
        let n: usize = shape.iter().product();
        store.insert(name, *group, Tensor::from_vec(shape, r.f32s(n)?)?)?;
    }
    if with_moments {
        for sel in 0..2 {
            for p in store.iter_mut() {
                let data = r.f32s(p.value.len())?;
                let t = Tensor::from_vec(p.value.shape(), data)?;
                if sel == 0 {
                    p.m = t;
                } else {
                    p.v = t;
                }
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    store.set_step(step);
    Ok(Snapshot {
        meta,
        store,
        with_moments,
    })
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| {
            Error::Checkpoint("tensor size overflow".into())
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
