//! `.tns` binary tensor container.
//!
//! Layout (little-endian): magic `ANTN`, `u8` version (1), `u8` dtype
//! (0 = f32, 1 = f64), `u8` rank, `rank × u64` extents, then the values in
//! row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"ANTN";
pub const VERSION: u8 = 1;

pub fn encode<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.put_le(out);
    }
}

pub fn to_bytes<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + t.len() * T::DTYPE.size());
    encode(t, &mut out);
    out
}

/// Reads one record starting at `*pos`, advancing it. `base` is added to
/// offsets reported in errors.
pub fn decode<T: Real>(bytes: &[u8], pos: &mut usize, base: u64) -> Result<Tensor<T>> {
    let err = |at: usize, msg: String| Error::Format {
        offset: base + at as u64,
        msg,
    };
    let need = |at: usize, n: usize| -> Result<()> {
        if at + n > bytes.len() {
            Err(Error::Format {
                offset: base + bytes.len() as u64,
                msg: format!("truncated: need {} bytes at offset {}", n, base + at as u64),
            })
        } else {
            Ok(())
        }
    };
    let start = *pos;
    need(start, 7)?;
    if &bytes[start..start + 4] != MAGIC {
        return Err(err(start, format!("bad magic {:?}", &bytes[start..start + 4])));
    }
    if bytes[start + 4] != VERSION {
        return Err(err(start + 4, format!("unsupported version {}", bytes[start + 4])));
    }
    let dtype = DType::from_u8(bytes[start + 5])
        .ok_or_else(|| err(start + 5, format!("unknown dtype {}", bytes[start + 5])))?;
    if dtype != T::DTYPE {
        return Err(err(
            start + 5,
            format!("dtype {:?} does not match requested {:?}", dtype, T::DTYPE),
        ));
    }
    let rank = bytes[start + 6] as usize;
    let mut at = start + 7;
    need(at, 8 * rank)?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        shape.push(d as usize);
        at += 8;
    }
    let n: usize = shape.iter().product();
    let size = dtype.size();
    need(at, n * size)?;
    let data = (0..n).map(|i| T::get_le(&bytes[at + i * size..])).collect();
    at += n * size;
    *pos = at;
    Tensor::new(shape, data)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let t = decode(bytes, &mut pos, 0)?;
    if pos != bytes.len() {
        return Err(Error::Format {
            offset: pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - pos),
        });
    }
    Ok(t)
}

pub fn save<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
