//! Dense row-major tensors in f32 or f64, with bit-level access to the stored
//! parameter words. Fault injection operates on the IEEE-754 bit patterns, so
//! tensors must tolerate (and never trap on) NaN/Inf payloads.

use crate::error::{MilrError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Dtype::F32 => 32,
            Dtype::F64 => 64,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(MilrError::Format(format!("unknown dtype tag {other}"))),
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = MilrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(MilrError::Domain(format!("unknown dtype {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>, dtype: Dtype) -> Self {
        let len = shape.iter().product();
        let data = match dtype {
            Dtype::F32 => TensorData::F32(vec![0.0; len]),
            Dtype::F64 => TensorData::F64(vec![0.0; len]),
        };
        Tensor { shape, data }
    }

    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape,
            data: TensorData::F32(values),
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape,
            data: TensorData::F64(values),
        }
    }

    /// Builds a tensor of the requested dtype, rounding f64 values to f32
    /// (round-to-nearest-even) when needed.
    pub fn from_f64_values(shape: Vec<usize>, values: &[f64], dtype: Dtype) -> Self {
        match dtype {
            Dtype::F32 => Tensor::from_f32(shape, values.iter().map(|&v| v as f32).collect()),
            Dtype::F64 => Tensor::from_f64(shape, values.to_vec()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match &self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn byte_len(&self) -> usize {
        self.len() * self.dtype().byte_size()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn get(&self, idx: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => v[idx] as f64,
            TensorData::F64(v) => v[idx],
        }
    }

    pub fn set(&mut self, idx: usize, value: f64) {
        match &mut self.data {
            TensorData::F32(v) => v[idx] = value as f32,
            TensorData::F64(v) => v[idx] = value,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Raw stored bits of element `idx`, widened to u64 for f32 tensors.
    pub fn word(&self, idx: usize) -> u64 {
        match &self.data {
            TensorData::F32(v) => v[idx].to_bits() as u64,
            TensorData::F64(v) => v[idx].to_bits(),
        }
    }

    pub fn set_word(&mut self, idx: usize, word: u64) {
        match &mut self.data {
            TensorData::F32(v) => v[idx] = f32::from_bits(word as u32),
            TensorData::F64(v) => v[idx] = f64::from_bits(word),
        }
    }

    pub fn flip_bit(&mut self, idx: usize, bit: u32) {
        let word = self.word(idx) ^ (1u64 << bit);
        self.set_word(idx, word);
    }

    /// Exact bit equality, including NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape || self.dtype() != other.dtype() {
            return false;
        }
        (0..self.len()).all(|i| self.word(i) == other.word(i))
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(MilrError::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        let mut out = self.clone();
        out.shape = shape;
        Ok(out)
    }

    /// Little-endian payload bytes, as persisted in the weights file.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_bits().to_le_bytes());
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_bits().to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_payload_bytes(shape: Vec<usize>, dtype: Dtype, bytes: &[u8]) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if bytes.len() != len * dtype.byte_size() {
            return Err(MilrError::Format(format!(
                "payload length {} does not match shape {:?} ({} {:?} values)",
                bytes.len(),
                shape,
                len,
                dtype
            )));
        }
        match dtype {
            Dtype::F32 => {
                let values = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
                    .collect();
                Ok(Tensor::from_f32(shape, values))
            }
            Dtype::F64 => {
                let values = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                    .collect();
                Ok(Tensor::from_f64(shape, values))
            }
        }
    }
}

/// Flat index into a row-major `[h, w, c]` tensor.
#[inline]
pub fn idx3(shape: &[usize], i: usize, j: usize, k: usize) -> usize {
    (i * shape[1] + j) * shape[2] + k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_roundtrip_and_flip() {
        let mut t = Tensor::from_f32(vec![2], vec![1.5, -2.0]);
        let w = t.word(0);
        t.flip_bit(0, 31); // sign bit of an f32
        assert_eq!(t.get(0), -1.5);
        t.flip_bit(0, 31);
        assert_eq!(t.word(0), w);
    }

    #[test]
    fn payload_roundtrip_preserves_nan_bits() {
        let weird = f32::from_bits(0x7FC0_1234); // NaN with payload
        let t = Tensor::from_f32(vec![3], vec![1.0, weird, -0.0]);
        let back =
            Tensor::from_payload_bytes(vec![3], Dtype::F32, &t.payload_bytes()).unwrap();
        assert!(t.bit_eq(&back));
    }

    #[test]
    fn f64_rounding_to_f32_is_nearest() {
        let t = Tensor::from_f64_values(vec![1], &[1.0 + 1e-12], Dtype::F32);
        assert_eq!(t.get(0), 1.0);
    }
}
