//! `TNSR` tensor files.
//!
//! Layout: magic `TNSR`, version byte (1), dtype byte (1=f32, 2=f64, 3=u8),
//! rank byte, `rank` little-endian u64 dims, then the row-major payload in
//! little-endian order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NumError, Result};
use crate::scalar::DType;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

/// Element types storable in a `TNSR` file.
pub trait TnsrElement: Copy {
    const DTYPE: DType;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl TnsrElement for f32 {
    const DTYPE: DType = DType::F32;
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl TnsrElement for f64 {
    const DTYPE: DType = DType::F64;
    const SIZE: usize = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl TnsrElement for u8 {
    const DTYPE: DType = DType::U8;
    const SIZE: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// A decoded file of any supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }
}

pub fn encode<T: TnsrElement>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| NumError::Format(format!("rank {} exceeds 255", t.rank())))?;
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + T::SIZE * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(rank);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.put(&mut out);
    }
    Ok(out)
}

fn decode_typed<T: TnsrElement>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if payload.len() != n * T::SIZE {
        return Err(NumError::Format(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            n * T::SIZE
        )));
    }
    let data = payload.chunks_exact(T::SIZE).map(T::get).collect();
    Tensor::from_vec(shape, data)
}

fn parse_header(bytes: &[u8]) -> Result<(DType, Vec<usize>, &[u8])> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(NumError::Format("missing TNSR magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(NumError::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5]).ok_or_else(|| NumError::Format(format!("unknown dtype code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    let header = 7 + 8 * rank;
    if bytes.len() < header {
        return Err(NumError::Format("truncated dimension table".into()));
    }
    let shape = bytes[7..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    Ok((dtype, shape, &bytes[header..]))
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let (dtype, shape, payload) = parse_header(bytes)?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_typed(shape, payload)?),
        DType::F64 => AnyTensor::F64(decode_typed(shape, payload)?),
        DType::U8 => AnyTensor::U8(decode_typed(shape, payload)?),
    })
}

/// Decodes a file that must hold elements of type `T`.
pub fn decode_as<T: TnsrElement>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (dtype, shape, payload) = parse_header(bytes)?;
    if dtype != T::DTYPE {
        return Err(NumError::Format(format!("expected dtype {:?}, file holds {dtype:?}", T::DTYPE)));
    }
    decode_typed(shape, payload)
}

pub fn write<T: TnsrElement>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode(t)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn read<T: TnsrElement>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_as(&bytes)
}
