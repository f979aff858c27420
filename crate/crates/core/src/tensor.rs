//! Dense row-major tensors holding either `f32` values or integers of a
//! declared logical bitwidth.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("integer bitwidth {0} outside 2..=32")]
    Bits(u8),
    #[error("value {value} at index {index} does not fit {dtype}")]
    OutOfRange {
        index: usize,
        value: i64,
        dtype: DType,
    },
    #[error("expected a {expected} tensor, found {found}")]
    WrongKind { expected: &'static str, found: DType },
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
}

/// Element type: IEEE float or an integer of `bits` logical bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DType {
    F32,
    Int { bits: u8, signed: bool },
}

impl DType {
    pub fn int(bits: u8, signed: bool) -> Self {
        DType::Int { bits, signed }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32)
    }

    /// Inclusive integer range. Floats report the full `i64` range.
    pub fn int_range(self) -> (i64, i64) {
        match self {
            DType::F32 => (i64::MIN, i64::MAX),
            DType::Int { bits, signed } => int_range(bits, signed),
        }
    }

    /// Storage width in bytes: the smallest power-of-two width holding the
    /// logical bitwidth.
    pub fn storage_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::Int { bits, .. } => match bits {
                0..=8 => 1,
                9..=16 => 2,
                _ => 4,
            },
        }
    }

    /// Storage type name used in manifests (`float32`, `int8`, `uint16`, ...).
    pub fn storage_name(self) -> &'static str {
        match self {
            DType::F32 => "float32",
            DType::Int { signed, .. } => match (self.storage_bytes(), signed) {
                (1, true) => "int8",
                (1, false) => "uint8",
                (2, true) => "int16",
                (2, false) => "uint16",
                (_, true) => "int32",
                (_, false) => "uint32",
            },
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "float32"),
            DType::Int { bits, signed: true } => write!(f, "int{bits}"),
            DType::Int {
                bits,
                signed: false,
            } => write!(f, "uint{bits}"),
        }
    }
}

/// Inclusive range of a two's-complement (`signed`) or unsigned integer.
pub fn int_range(bits: u8, signed: bool) -> (i64, i64) {
    let bits = bits as u32;
    if signed {
        (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Float(Vec<f32>),
    Int { bits: u8, signed: bool, values: Vec<i64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, TensorError> {
        check_count(&shape, values.len())?;
        Ok(Tensor {
            shape,
            data: TensorData::Float(values),
        })
    }

    /// Builds an integer tensor, rejecting elements outside the declared range.
    pub fn from_int(
        shape: Vec<usize>,
        bits: u8,
        signed: bool,
        values: Vec<i64>,
    ) -> Result<Self, TensorError> {
        if !(2..=32).contains(&bits) {
            return Err(TensorError::Bits(bits));
        }
        check_count(&shape, values.len())?;
        let (lo, hi) = int_range(bits, signed);
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| **v < lo || **v > hi)
        {
            return Err(TensorError::OutOfRange {
                index,
                value,
                dtype: DType::int(bits, signed),
            });
        }
        Ok(Tensor {
            shape,
            data: TensorData::Int {
                bits,
                signed,
                values,
            },
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: TensorData::Float(vec![0.0; n]),
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: TensorData::Float(vec![v]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        match &self.data {
            TensorData::Float(_) => DType::F32,
            TensorData::Int { bits, signed, .. } => DType::int(*bits, *signed),
        }
    }

    pub fn is_float(&self) -> bool {
        matches!(self.data, TensorData::Float(_))
    }

    pub fn as_f32(&self) -> Result<&[f32], TensorError> {
        match &self.data {
            TensorData::Float(v) => Ok(v),
            _ => Err(TensorError::WrongKind {
                expected: "float32",
                found: self.dtype(),
            }),
        }
    }

    pub fn as_int(&self) -> Result<&[i64], TensorError> {
        match &self.data {
            TensorData::Int { values, .. } => Ok(values),
            _ => Err(TensorError::WrongKind {
                expected: "integer",
                found: self.dtype(),
            }),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>, TensorError> {
        match self.data {
            TensorData::Float(v) => Ok(v),
            other => Err(TensorError::WrongKind {
                expected: "float32",
                found: Tensor {
                    shape: vec![],
                    data: other,
                }
                .dtype(),
            }),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if numel(&shape) != self.numel() {
            return Err(TensorError::Reshape {
                from: self.shape,
                to: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Position of the first maximum along the last axis, per leading row.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = self.numel() / cols.max(1);
        let key = |i: usize| -> f64 {
            match &self.data {
                TensorData::Float(v) => v[i] as f64,
                TensorData::Int { values, .. } => values[i] as f64,
            }
        };
        (0..rows)
            .map(|r| {
                let mut best = 0;
                for c in 1..cols {
                    if key(r * cols + c) > key(r * cols + best) {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn check_count(shape: &[usize], actual: usize) -> Result<(), TensorError> {
    let expected = numel(shape);
    if expected != actual {
        return Err(TensorError::ElementCount {
            shape: shape.to_vec(),
            expected,
            actual,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int_ranges() {
        assert_eq!(int_range(8, true), (-128, 127));
        assert_eq!(int_range(4, false), (0, 15));
        assert_eq!(int_range(32, false), (0, u32::MAX as i64));
    }

    #[test]
    fn rejects_out_of_range_and_bad_count() {
        assert!(matches!(
            Tensor::from_int(vec![2], 4, true, vec![7, 8]),
            Err(TensorError::OutOfRange { index: 1, .. })
        ));
        assert!(matches!(
            Tensor::from_f32(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::ElementCount { expected: 6, .. })
        ));
    }

    #[test]
    fn storage_widths() {
        assert_eq!(DType::int(4, true).storage_bytes(), 1);
        assert_eq!(DType::int(12, false).storage_name(), "uint16");
        assert_eq!(DType::int(17, true).storage_name(), "int32");
    }

    #[test]
    fn argmax_first_wins_ties() {
        let t = Tensor::from_int(vec![2, 3], 8, true, vec![1, 5, 5, -1, -1, -2]).unwrap();
        assert_eq!(t.argmax_rows(), vec![1, 0]);
    }
}
