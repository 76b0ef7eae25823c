//! Dense row-major tensors and the QTTENSOR file format.
//!
//! A tensor file is the magic `QTTENSOR`, a `u8` dtype code, a `u32` rank,
//! `rank` little-endian `u64` extents and finally the raw little-endian
//! element buffer.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"QTTENSOR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
    U8,
    I32,
    I64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::U8 => 2,
            DType::I32 => 3,
            DType::I64 => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::I8,
            2 => DType::U8,
            3 => DType::I32,
            4 => DType::I64,
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        })
    }

    /// Width of one element in bytes.
    pub fn size(self) -> usize {
        match self {
            DType::I8 | DType::U8 => 1,
            DType::F32 | DType::I32 => 4,
            DType::I64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::F32 => "f32",
            DType::I8 => "i8",
            DType::U8 => "u8",
            DType::I32 => "i32",
            DType::I64 => "i64",
        };
        f.write_str(s)
    }
}

/// Typed element buffer.
#[derive(Clone, Debug)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    U8(Vec<u8>),
    I32(Vec<i32>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
            TensorData::U8(_) => DType::U8,
            TensorData::I32(_) => DType::I32,
            TensorData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn empty(dtype: DType) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(Vec::new()),
            DType::I8 => TensorData::I8(Vec::new()),
            DType::U8 => TensorData::U8(Vec::new()),
            DType::I32 => TensorData::I32(Vec::new()),
            DType::I64 => TensorData::I64(Vec::new()),
        }
    }

    fn slice(&self, start: usize, end: usize) -> Self {
        match self {
            TensorData::F32(v) => TensorData::F32(v[start..end].to_vec()),
            TensorData::I8(v) => TensorData::I8(v[start..end].to_vec()),
            TensorData::U8(v) => TensorData::U8(v[start..end].to_vec()),
            TensorData::I32(v) => TensorData::I32(v[start..end].to_vec()),
            TensorData::I64(v) => TensorData::I64(v[start..end].to_vec()),
        }
    }

    fn extend_from(&mut self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => a.extend_from_slice(b),
            (TensorData::I8(a), TensorData::I8(b)) => a.extend_from_slice(b),
            (TensorData::U8(a), TensorData::U8(b)) => a.extend_from_slice(b),
            (TensorData::I32(a), TensorData::I32(b)) => a.extend_from_slice(b),
            (TensorData::I64(a), TensorData::I64(b)) => a.extend_from_slice(b),
            _ => return false,
        }
        true
    }
}

/// Number of elements described by `shape`; the empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// An n-dimensional array stored row-major.
///
/// Equality is bitwise on the element bytes, so `-0.0 != 0.0` and identical
/// NaN payloads compare equal.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.dtype() == other.dtype()
            && self.to_le_bytes() == other.to_le_bytes()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Argument(format!(
                "shape {:?} holds {} elements but buffer has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(data))
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: TensorData::F32(vec![value]),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: TensorData::F32(vec![0.0; n]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::Argument(format!(
                "expected f32 tensor, found {}",
                other.dtype()
            ))),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Ok(v),
            other => Err(Error::Argument(format!(
                "expected i64 tensor, found {}",
                other.dtype()
            ))),
        }
    }

    /// Same buffer, new shape. Element count must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.dtype().size());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_le_bytes(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor> {
        let n = numel(&shape);
        if bytes.len() != n * dtype.size() {
            return Err(Error::Format(format!(
                "{} bytes cannot hold {n} {dtype} elements",
                bytes.len()
            )));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            DType::U8 => TensorData::U8(bytes.to_vec()),
            DType::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I64 => TensorData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Tensor::new(shape, data)
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        let Some((&batch, rest)) = self.shape.split_first() else {
            return Err(Error::Argument("cannot slice a scalar along the batch axis".into()));
        };
        if start > end || end > batch {
            return Err(Error::Argument(format!(
                "batch slice {start}..{end} out of range for extent {batch}"
            )));
        }
        let row = numel(rest);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data.slice(start * row, end * row),
        })
    }

    /// Concatenates along the leading axis. All parts must agree on dtype and
    /// trailing extents.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        if first.rank() == 0 {
            return Err(Error::Argument("cannot concatenate scalars".into()));
        }
        let mut data = TensorData::empty(first.dtype());
        let mut batch = 0;
        for p in parts {
            if p.rank() == 0 || p.shape[1..] != first.shape[1..] {
                return Err(Error::Argument(format!(
                    "cannot concatenate shapes {:?} and {:?}",
                    first.shape, p.shape
                )));
            }
            if !data.extend_from(&p.data) {
                return Err(Error::Argument("dtype mismatch in concatenation".into()));
            }
            batch += p.shape[0];
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped samples into a new leading batch axis.
    pub fn stack(samples: &[&Tensor]) -> Result<Tensor> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Argument("nothing to stack".into()))?;
        let mut data = TensorData::empty(first.dtype());
        for s in samples {
            if s.shape != first.shape || !data.extend_from(&s.data) {
                return Err(Error::Argument(format!(
                    "cannot stack {} {:?} with {} {:?}",
                    first.dtype(),
                    first.shape,
                    s.dtype(),
                    s.shape
                )));
            }
        }
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(samples.len());
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 1 + 4 + 8 * self.rank() + self.len() * 4);
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.dtype().code());
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Tensor> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let dtype = DType::from_code(r.take(1)?[0])?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("extent overflow".into()))?);
        }
        Tensor::from_le_bytes(dtype, shape, r.rest())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::decode(&bytes)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_buffer() {
        assert!(Tensor::from_f32(vec![2, 2], vec![1.0; 3]).is_err());
        let s = Tensor::from_f32(vec![], vec![7.0]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.rank(), 0);
    }

    #[test]
    fn encode_decode_preserves_every_dtype() {
        let cases = vec![
            Tensor::from_f32(vec![2, 1], vec![-0.0, f32::MAX]).unwrap(),
            Tensor::new(vec![3], TensorData::I8(vec![-128, 0, 127])).unwrap(),
            Tensor::new(vec![1, 2], TensorData::U8(vec![0, 255])).unwrap(),
            Tensor::new(vec![2], TensorData::I32(vec![i32::MIN, 5])).unwrap(),
            Tensor::new(vec![], TensorData::I64(vec![-1])).unwrap(),
        ];
        for t in cases {
            assert_eq!(Tensor::decode(&t.encode()).unwrap(), t);
        }
    }

    #[test]
    fn decode_rejects_bad_magic_and_truncation() {
        let t = Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap();
        let mut bytes = t.encode();
        assert!(matches!(Tensor::decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(Tensor::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn batch_slice_and_concat_invert() {
        let t = Tensor::from_f32(vec![4, 2], (0..8).map(|x| x as f32).collect()).unwrap();
        let a = t.slice_batch(0, 3).unwrap();
        let b = t.slice_batch(3, 4).unwrap();
        assert_eq!(a.shape(), &[3, 2]);
        assert_eq!(Tensor::concat_batch(&[a, b]).unwrap(), t);
        assert!(t.slice_batch(2, 5).is_err());
    }

    #[test]
    fn stack_adds_leading_axis() {
        let a = Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_f32(vec![2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.as_f32().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        let c = Tensor::from_f32(vec![1], vec![0.0]).unwrap();
        assert!(Tensor::stack(&[&a, &c]).is_err());
    }

    #[test]
    fn equality_is_bitwise() {
        let a = Tensor::scalar(0.0);
        let b = Tensor::scalar(-0.0);
        assert_ne!(a, b);
        let n = Tensor::scalar(f32::NAN);
        assert_eq!(n, n.clone());
    }
}
