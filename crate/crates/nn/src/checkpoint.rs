//! Binary weight files.
//!
//! Layout (little-endian): magic `PPFW`, format version `u32`, parameter count
//! `u32`, then per parameter: name length `u16`, UTF-8 name bytes, rank `u8`,
//! each dimension as `u32`, and the values as `f64`.

use std::path::Path;

use crate::error::{NnError, Result};
use crate::param::{ParamSet, Parameter};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"PPFW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn encode_weights(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.num_scalars() * 8);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(params.len()).map_err(|_| too_large("count"))?.to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| too_large("name"))?.to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::try_from(p.value.rank()).map_err(|_| too_large("rank"))?);
        for &d in p.value.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| too_large("dimension"))?.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn too_large(what: &str) -> NnError {
    NnError::Format(format!("{what} does not fit the weight format"))
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NnError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| too_large("tensor"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Parameter::new(name, Tensor::new(shape, data)?))?;
    }
    if r.pos != bytes.len() {
        return Err(NnError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

pub fn write_weights(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    std::fs::write(path, encode_weights(params)?)?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<ParamSet> {
    decode_weights(&std::fs::read(path)?)
}
