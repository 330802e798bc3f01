//! `APN1` named-tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"APN1" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: UTF-8 bytes | rank: u32 | dims: rank × u32 | payload: Π dims × f32
//! ```

use std::fs;
use std::path::Path;

use crate::error::{ApnError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"APN1";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.num_values() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ApnError::Format(format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decode a container. Tensors come back tagged f32.
pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(ApnError::Format("bad checkpoint magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ApnError::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut params = ParamSet::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| ApnError::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let payload = r.take(n * 4, "payload")?;
        let vals: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_f32(&dims, &vals).map_err(|e| ApnError::Format(format!("tensor `{name}`: {e}")))?;
        params.insert(name, t).map_err(|e| ApnError::Format(e.to_string()))?;
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    decode(&fs::read(path)?)
}
