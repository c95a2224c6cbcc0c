//! Binary parameter checkpoints.
//!
//! Layout: the magic `CCOMA\x01`, then one record per tensor until EOF:
//! `u32 LE name length | UTF-8 name | u8 dtype (0=f32, 1=f64) | u8 rank |
//! u32 LE per dim | little-endian values`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"CCOMA\x01";

/// A tensor read back from disk in whatever precision it was written.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn to_scalar<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(entries: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    for (name, tensor) in entries {
        write_record(&mut out, name, T::DTYPE, tensor.dims(), |buf| {
            tensor.data().iter().for_each(|v| v.write_le(buf))
        })?;
    }
    Ok(out)
}

/// Re-encodes stored tensors without changing their precision.
pub fn encode_stored(entries: &[(String, StoredTensor)]) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    for (name, tensor) in entries {
        match tensor {
            StoredTensor::F32(t) => write_record(&mut out, name, DType::F32, t.dims(), |buf| {
                t.data().iter().for_each(|v| v.write_le(buf))
            })?,
            StoredTensor::F64(t) => write_record(&mut out, name, DType::F64, t.dims(), |buf| {
                t.data().iter().for_each(|v| v.write_le(buf))
            })?,
        }
    }
    Ok(out)
}

fn write_record(
    out: &mut Vec<u8>,
    name: &str,
    dtype: DType,
    dims: &[usize],
    values: impl FnOnce(&mut Vec<u8>),
) -> Result<()> {
    let name_len = u32::try_from(name.len())
        .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
    let rank = u8::try_from(dims.len())
        .map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype.code());
    out.push(rank);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dim too large in {name}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    values(out);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, StoredTensor)>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_code(r.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype for {name}")))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = r.take(count * dtype.size())?;
        let tensor = match dtype {
            DType::F32 => StoredTensor::F32(Tensor::new(
                dims,
                raw.chunks(4).map(f32::read_le).collect(),
            )?),
            DType::F64 => StoredTensor::F64(Tensor::new(
                dims,
                raw.chunks(8).map(f64::read_le).collect(),
            )?),
        };
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, entries: &[(String, Tensor<T>)]) -> Result<()> {
    std::fs::write(path, encode(entries)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, StoredTensor)>> {
    decode(&std::fs::read(path)?)
}

/// Loads and converts every tensor to `T`.
pub fn load_as<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    Ok(load(path)?
        .into_iter()
        .map(|(n, t)| (n, t.to_scalar()))
        .collect())
}
