//! Flat named-tensor checkpoint files.
//!
//! Layout (all little-endian): magic `CLSP`, version `u32`, entry count
//! `u32`, then per entry `{name_len u16, name bytes, rank u8, extents u32
//! each, data f64 each}`. Values are stored as 64-bit floats regardless of
//! the in-memory scalar type.

use std::collections::BTreeMap;
use std::io::{Read};
use std::path::Path;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CLSP";
pub const VERSION: u32 = 1;

pub fn save<S: Scalar, P: AsRef<Path>>(
    path: P,
    entries: &BTreeMap<String, Tensor<S>>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Input(format!("parameter name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.rank() as u8);
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load<S: Scalar, P: AsRef<Path>>(path: P) -> Result<BTreeMap<String, Tensor<S>>> {
    let mut file = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut r = Cursor { buf: &buf, pos: 0 };

    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, not a checkpoint file".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let start = r.pos as u64;
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
            offset: start,
            msg: "parameter name is not UTF-8".into(),
        })?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(S::of_f64(r.f64()?));
        }
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format {
                offset: start,
                msg: format!("duplicate parameter `{name}`"),
            });
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: "trailing bytes after last entry".into(),
        });
    }
    Ok(out)
}

/// Order-independent 64-bit digest of the parameter names and shapes.
/// Two checkpoints are architecture-compatible iff their hashes match.
pub fn arch_hash<S: Scalar>(entries: &BTreeMap<String, Tensor<S>>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325; // FNV-1a
    for (name, tensor) in entries {
        for &b in name.as_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        h = (h ^ 0xff).wrapping_mul(0x0000_0100_0000_01b3);
        for &e in tensor.shape() {
            h = (h ^ e as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        h = (h ^ 0xfe).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: wanted {n} more bytes"),
            });
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
