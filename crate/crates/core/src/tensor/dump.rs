//! DFA2 binary tensor dumps.
//!
//! Layout: magic `DFA2`, then little-endian `u32` version, `u32` dtype code
//! (0 = f32, 1 = f64), `u32` ndim, `ndim × u64` dims, then the row-major
//! scalars in little-endian order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"DFA2";
pub const DUMP_VERSION: u32 = 1;

/// A tensor of either supported dtype, as read back from a dump.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            AnyTensor::F64(_) => Err(Error::Format("expected an f32 tensor, found f64".into())),
        }
    }

    pub fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            AnyTensor::F64(t) => Ok(t),
            AnyTensor::F32(_) => Err(Error::Format("expected an f64 tensor, found f32".into())),
        }
    }
}

pub fn write_dump<W: Write>(mut w: W, tensor: &AnyTensor) -> Result<()> {
    match tensor {
        AnyTensor::F32(t) => write_typed(&mut w, t, |x, out| out.extend_from_slice(&x.to_le_bytes())),
        AnyTensor::F64(t) => write_typed(&mut w, t, |x, out| out.extend_from_slice(&x.to_le_bytes())),
    }
}

fn write_typed<W: Write, T: Scalar>(w: &mut W, t: &Tensor<T>, encode: impl Fn(T, &mut Vec<u8>)) -> Result<()> {
    let mut header = Vec::with_capacity(16 + 8 * t.ndim());
    header.extend_from_slice(DUMP_MAGIC);
    header.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    header.extend_from_slice(&T::DTYPE_CODE.to_le_bytes());
    header.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &dim in t.shape() {
        header.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    w.write_all(&header)?;
    let mut body = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
    for &x in t.data() {
        encode(x, &mut body);
    }
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

pub fn read_dump<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = read_u32(&mut r)?;
    let ndim = read_u32(&mut r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(
            usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("dimension overflows usize".into()))?,
        );
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    match dtype {
        0 => {
            let data = read_body::<4, _>(&mut r, len)?.into_iter().map(f32::from_le_bytes).collect();
            Ok(AnyTensor::F32(Tensor::new(shape, data)?))
        }
        1 => {
            let data = read_body::<8, _>(&mut r, len)?.into_iter().map(f64::from_le_bytes).collect();
            Ok(AnyTensor::F64(Tensor::new(shape, data)?))
        }
        other => Err(Error::Format(format!("unknown dtype code {other}"))),
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_body<const W: usize, R: Read>(r: &mut R, len: usize) -> Result<Vec<[u8; W]>> {
    let mut raw = vec![0u8; len * W];
    r.read_exact(&mut raw)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after tensor body".into()));
    }
    Ok(raw.chunks_exact(W).map(|c| c.try_into().expect("chunk width")).collect())
}

pub fn write_dump_file(path: impl AsRef<Path>, tensor: &AnyTensor) -> Result<()> {
    write_dump(BufWriter::new(File::create(path)?), tensor)
}

pub fn read_dump_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    read_dump(BufReader::new(File::open(path)?))
}
