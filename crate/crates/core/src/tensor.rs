//! Dense row-major `f64` tensors and their binary encoding.
//!
//! Image tensors use `N, C, H, W` order. The binary encoding is
//! `FDTENSR1`, a little-endian `u32` rank, `rank` little-endian `u32`
//! extents, then the payload as little-endian `f64`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"FDTENSR1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("holds {} values, data has {}", expected, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("tensor extents must be positive");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Rank-1 tensor. Panics on an empty vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "tensor extents must be positive");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Extents of a rank-4 tensor as `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a rank-4 N x C x H x W tensor".into(),
            }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("cannot reshape {} values", self.data.len()),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// One sample (`n`-th slice along the batch axis) of a rank-4 tensor.
    pub fn sample(&self, n: usize) -> Result<Tensor> {
        let (batch, c, h, w) = self.dims4()?;
        if n >= batch {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("sample {} out of range", n),
            });
        }
        let len = c * h * w;
        Tensor::new(vec![1, c, h, w], self.data[n * len..(n + 1) * len].to_vec())
    }

    /// Stacks equally shaped `1 x C x H x W` tensors along the batch axis.
    pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
        let first = samples.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "cannot stack zero tensors".into(),
        })?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(samples.len() * c * h * w);
        for s in samples {
            if s.dims4()? != (1, c, h, w) {
                return Err(Error::ShapeMismatch {
                    node: "stack".into(),
                    expected: format!("{:?}", [1, c, h, w]),
                    actual: format!("{:?}", s.shape()),
                });
            }
            data.extend_from_slice(&s.data);
        }
        Tensor::new(vec![samples.len(), c, h, w], data)
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(TENSOR_MAGIC)?;
        out.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 4 * self.shape.len() + 8 * self.data.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 8];
        read_exact(input, &mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::MalformedTensor(format!("bad magic {:?}", magic)));
        }
        let mut word = [0u8; 4];
        read_exact(input, &mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::MalformedTensor(format!("unsupported rank {}", rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            read_exact(input, &mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        check_shape(&shape).map_err(|e| Error::MalformedTensor(e.to_string()))?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut value = [0u8; 8];
        for _ in 0..n {
            read_exact(input, &mut value)?;
            data.push(f64::from_le_bytes(value));
        }
        Tensor::new(shape, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cursor = bytes;
        Tensor::read_from(&mut cursor)
    }

    /// Encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        12 + 4 * self.shape.len() + 8 * self.data.len()
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::MalformedTensor(format!("truncated: {}", e)))
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be non-empty and >= 1".into(),
        });
    }
    Ok(())
}
