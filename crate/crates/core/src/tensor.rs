//! Dense row-major `f64` tensor and the NBT1 file format.
//!
//! NBT1 layout: the ASCII line `NBT1`, one JSON header line
//! `{"dtype":"f64","shape":[...]}`, then the raw little-endian `f64` payload
//! in row-major order.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NBT_MAGIC: &str = "NBT1";

/// Dense n-dimensional array of 64-bit reals.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

fn volume(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
        }
        if volume(&shape) != data.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {} values, got {}", volume(&shape), data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "extents must be positive, got {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![value; volume(shape)] }
    }

    /// One-dimensional tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Tensor { shape: vec![data.len()], data }
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Same data under a new shape of equal volume.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape(), "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape(), "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape(format!("dot of lengths {} and {}", self.len(), other.len())));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Index of the largest element; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub(crate) fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!("{what}: expected shape {shape:?}, got {:?}", self.shape)));
        }
        Ok(())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Writes the tensor in NBT1 format.
    pub fn write_nbt<W: Write>(&self, mut w: W) -> Result<()> {
        let header = NbtHeader { dtype: "f64".into(), shape: self.shape.clone() };
        writeln!(w, "{NBT_MAGIC}")?;
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads one NBT1 tensor, consuming exactly its bytes from `r`.
    pub fn read_nbt<R: BufRead>(mut r: R) -> Result<Tensor> {
        let mut magic = String::new();
        r.read_line(&mut magic)?;
        if magic.trim_end_matches('\n') != NBT_MAGIC {
            return Err(Error::format(format!("bad tensor magic {:?}", magic.trim_end())));
        }
        let mut line = String::new();
        r.read_line(&mut line)?;
        if !line.ends_with('\n') {
            return Err(Error::format("truncated tensor header"));
        }
        let header: NbtHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::format(format!("tensor header: {e}")))?;
        if header.dtype != "f64" {
            return Err(Error::format(format!("unsupported dtype {}", header.dtype)));
        }
        if header.shape.is_empty() || header.shape.contains(&0) {
            return Err(Error::format(format!("invalid shape {:?}", header.shape)));
        }
        let n = header
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format("tensor too large"))?;
        let mut bytes = vec![0u8; n];
        r.read_exact(&mut bytes).map_err(|_| Error::format("truncated tensor payload"))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        Tensor::new(header.shape, data)
    }

    pub fn to_nbt_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_nbt(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_nbt(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let mut r = BufReader::new(File::open(path)?);
        let t = Tensor::read_nbt(&mut r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after tensor payload"));
        }
        Ok(t)
    }
}

#[derive(Serialize, Deserialize)]
struct NbtHeader {
    dtype: String,
    shape: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(Error::Shape(_))));
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn header_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = t.to_nbt_bytes();
        let prefix = b"NBT1\n{\"dtype\":\"f64\",\"shape\":[1,2]}\n";
        assert_eq!(&bytes[..prefix.len()], prefix);
        assert_eq!(&bytes[prefix.len()..prefix.len() + 8], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), prefix.len() + 16);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let bytes = t.to_nbt_bytes();
        let err = Tensor::read_nbt(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(matches!(Tensor::read_nbt(&b"NBT2\n"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(Tensor::vector(vec![1.0, 3.0, 3.0]).argmax(), 1);
        assert_eq!(Tensor::vector(vec![2.0, 2.0]).argmax(), 0);
    }

    proptest! {
        #[test]
        fn nbt_round_trip_is_bit_exact(
            dims in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64) >> 2))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::read_nbt(&t.to_nbt_bytes()[..]).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
