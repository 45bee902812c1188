//! Binary checkpoint and tensor-table encoding.
//!
//! ```text
//! "APLO"            4 bytes
//! version           u32 LE (currently 1)
//! config length     u64 LE, then that many bytes of UTF-8 config text
//! tensor table      entries until end of file:
//!   name length u32 LE, UTF-8 name, dtype u8 (0 = f32, 1 = f64),
//!   rank u8, dims as u64 LE, values as LE floats
//! ```
//!
//! Generated samples and corpus dumps use the bare tensor table.

use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mmdit::MMDiT;
use crate::numerics::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"APLO";
pub const VERSION: u32 = 1;

/// A tensor read back from disk in its stored precision.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// The tensor as `T`, refusing a precision change.
    pub fn into_exact<T: Element>(self) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::Format(format!("stored {:?} tensor requested as {:?}", self.dtype(), T::DTYPE)));
        }
        Ok(match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        })
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.clone(),
        }
    }
}

pub fn write_tensor_table<W: Write, T: Element>(w: &mut W, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(format!("write failed: {e}"));
    for (name, t) in entries {
        if t.rank() > u8::MAX as usize {
            return Err(Error::Format(format!("tensor {name} has rank {}", t.rank())));
        }
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&[T::DTYPE.code(), t.rank() as u8]).map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
        for &x in t.data() {
            x.write_le(&mut buf);
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated {what} at byte {}", self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_values<T: Element>(r: &mut Reader<'_>, shape: &[usize], name: &str) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let size = T::DTYPE.size_of();
    let raw = r.take(n.checked_mul(size).ok_or_else(|| Error::Format(format!("tensor {name} too large")))?, name)?;
    Tensor::new(shape, raw.chunks(size).map(T::read_le).collect())
}

fn read_table(r: &mut Reader<'_>) -> Result<Vec<(String, StoredTensor)>> {
    let mut out = Vec::new();
    while !r.done() {
        let len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let head = r.take(2, "tensor header")?;
        let (code, rank) = (head[0], head[1] as usize);
        let shape = (0..rank)
            .map(|_| r.u64("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let t = match DType::from_code(code) {
            Some(DType::F32) => StoredTensor::F32(read_values(r, &shape, &name)?),
            Some(DType::F64) => StoredTensor::F64(read_values(r, &shape, &name)?),
            None => return Err(Error::Format(format!("tensor {name}: unknown dtype code {code}"))),
        };
        out.push((name, t));
    }
    Ok(out)
}

pub fn read_tensor_table(bytes: &[u8]) -> Result<Vec<(String, StoredTensor)>> {
    read_table(&mut Reader { bytes, pos: 0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, StoredTensor)>,
}

pub fn encode_checkpoint<T: Element>(config: &str, tensors: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    write_tensor_table(&mut out, tensors)?;
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let len = r.u64("config length")?;
    let len = usize::try_from(len).map_err(|_| Error::Format("config length overflows".into()))?;
    let config = std::str::from_utf8(r.take(len, "config text")?)
        .map_err(|_| Error::Format("config text is not UTF-8".into()))?
        .to_string();
    Ok(Checkpoint { config, tensors: read_table(&mut r)? })
}

/// Writes the model and the run configuration it was built from.
pub fn save_model<T: Element>(path: &Path, model: &MMDiT<T>, run: &RunConfig) -> Result<()> {
    let tensors: Vec<(String, Tensor<T>)> = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let bytes = encode_checkpoint(&run.render(), &tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rebuilds a model from a checkpoint written by [`save_model`].
pub fn load_model<T: Element>(path: &Path) -> Result<(MMDiT<T>, RunConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode_checkpoint(&bytes)?;
    let run = RunConfig::parse(&ck.config)?;
    let mut model = MMDiT::<T>::new(run.model.clone(), 0)?;
    let entries = ck
        .tensors
        .into_iter()
        .map(|(n, t)| t.into_exact::<T>().map(|t| (n, t)))
        .collect::<Result<Vec<_>>>()?;
    model.params_mut().load(entries)?;
    Ok((model, run))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip_mixed_dtypes() {
        let a = Tensor::<f32>::from_f64(&[2, 3], &[1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 7.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[], &[std::f64::consts::PI]).unwrap();
        let mut bytes = Vec::new();
        write_tensor_table(&mut bytes, &[("a".to_string(), a.clone())]).unwrap();
        write_tensor_table(&mut bytes, &[("b.c".to_string(), b.clone())]).unwrap();
        let back = read_tensor_table(&bytes).unwrap();
        assert_eq!(back, vec![("a".to_string(), StoredTensor::F32(a)), ("b.c".to_string(), StoredTensor::F64(b))]);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint::<f64>("x = 1\n", &[]).unwrap();
        assert_eq!(&bytes[..4], b"APLO");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &[6, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[16..], b"x = 1\n");
    }

    #[test]
    fn rejects_unknown_version_and_truncation() {
        let t = Tensor::<f64>::ones(&[4]);
        let mut bytes = encode_checkpoint("", &[("w".to_string(), t)]).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 2;
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
        assert!(decode_checkpoint(b"NOPE").is_err());
    }

    #[test]
    fn precision_is_not_converted_silently() {
        let s = StoredTensor::F32(Tensor::ones(&[1]));
        assert!(s.clone().into_exact::<f64>().is_err());
        assert!(s.into_exact::<f32>().is_ok());
    }
}
