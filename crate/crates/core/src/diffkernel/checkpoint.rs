//! Parameter checkpoint: `"BLPW"`, version u32, metadata (u32 length + UTF-8 JSON),
//! parameter count u32, then per parameter in name order: name (u32 length + bytes),
//! rows u32, cols u32 and `rows·cols` f64 values. All integers and floats little-endian.

use std::fs;
use std::path::Path;

use super::params::ParameterSet;
use super::tensor::Tensor2D;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"BLPW";
const VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(params: &ParameterSet<T>, meta: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.as_slice() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *pos + n > bytes.len() {
        return Err(Error::parse(format!("checkpoint byte {}", *pos), "unexpected end of file"));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn take_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
}

fn take_str(bytes: &[u8], pos: &mut usize) -> Result<String> {
    let n = take_u32(bytes, pos)? as usize;
    let at = *pos;
    String::from_utf8(take(bytes, pos, n)?.to_vec())
        .map_err(|e| Error::parse(format!("checkpoint byte {at}"), e.to_string()))
}

/// Returns the parameters (fresh optimizer state) and the metadata string.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ParameterSet<T>, String)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MAGIC {
        return Err(Error::parse("checkpoint byte 0", "bad magic, expected BLPW"));
    }
    let version = take_u32(bytes, &mut pos)?;
    if version != VERSION {
        return Err(Error::parse("checkpoint byte 4", format!("unsupported version {version}")));
    }
    let meta = take_str(bytes, &mut pos)?;
    let count = take_u32(bytes, &mut pos)?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name = take_str(bytes, &mut pos)?;
        let rows = take_u32(bytes, &mut pos)? as usize;
        let cols = take_u32(bytes, &mut pos)? as usize;
        let raw = take(bytes, &mut pos, rows * cols * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        params.insert(name, Tensor2D::new(rows, cols, values)?);
    }
    if pos != bytes.len() {
        return Err(Error::parse(format!("checkpoint byte {pos}"), "trailing bytes"));
    }
    Ok((params, meta))
}

pub fn write_checkpoint<T: Scalar>(path: impl AsRef<Path>, params: &ParameterSet<T>, meta: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, meta)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ParameterSet<T>, String)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
