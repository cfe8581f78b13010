//! Dense tensors with a small set of floating point element types.
//!
//! Storage keeps the element type the tensor was created with, so half
//! precision checkpoints survive a load/save cycle bit for bit. Arithmetic
//! happens in `f32` or `f64`; see [`Scalar`] and [`compute_dtype`].

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F16,
    BF16,
    F32,
    F64,
}

impl DType {
    pub const ALL: [DType; 4] = [DType::F16, DType::BF16, DType::F32, DType::F64];

    /// Width of one element in bytes.
    pub fn width(self) -> usize {
        match self {
            DType::F16 | DType::BF16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Tag used in the checkpoint header.
    pub fn tag(self) -> &'static str {
        match self {
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }

    /// True for the element types arithmetic is defined over.
    pub fn is_compute(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::F16 => "f16",
            DType::BF16 => "bf16",
            DType::F32 => "f32",
            DType::F64 => "f64",
        };
        f.write_str(s)
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f16" => Ok(DType::F16),
            "bf16" => Ok(DType::BF16),
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            _ => Err(Error::Config(format!(
                "unknown dtype '{s}' (expected one of f16, bf16, f32, f64)"
            ))),
        }
    }
}

/// The arithmetic dtype for an operation over `tensors`: `f64` if any operand
/// is `f64`, otherwise `f32`.
pub fn compute_dtype<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> DType {
    if tensors.into_iter().any(|t| t.dtype() == DType::F64) {
        DType::F64
    } else {
        DType::F32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    F16(Vec<f16>),
    BF16(Vec<bf16>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    pub fn dtype(&self) -> DType {
        match self {
            Storage::F16(_) => DType::F16,
            Storage::BF16(_) => DType::BF16,
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Storage::F16(v) => v.len(),
            Storage::BF16(v) => v.len(),
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Floating point types arithmetic kernels are generic over.
pub trait Scalar:
    num_traits::Float + std::iter::Sum + Default + Send + Sync + fmt::Debug + 'static
{
    const DTYPE: DType;

    fn slice(storage: &Storage) -> Option<&[Self]>;
    fn wrap(values: Vec<Self>) -> Storage;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Convert from any storage element type, rounding to nearest even.
    fn convert(storage: &Storage) -> Vec<Self>;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn slice(storage: &Storage) -> Option<&[f32]> {
        match storage {
            Storage::F32(v) => Some(v),
            _ => None,
        }
    }

    fn wrap(values: Vec<f32>) -> Storage {
        Storage::F32(values)
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn convert(storage: &Storage) -> Vec<f32> {
        match storage {
            Storage::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            Storage::BF16(v) => v.iter().map(|x| x.to_f32()).collect(),
            Storage::F32(v) => v.clone(),
            Storage::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn slice(storage: &Storage) -> Option<&[f64]> {
        match storage {
            Storage::F64(v) => Some(v),
            _ => None,
        }
    }

    fn wrap(values: Vec<f64>) -> Storage {
        Storage::F64(values)
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn convert(storage: &Storage) -> Vec<f64> {
        match storage {
            Storage::F16(v) => v.iter().map(|x| x.to_f64()).collect(),
            Storage::BF16(v) => v.iter().map(|x| x.to_f64()).collect(),
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }
}

/// Run `$body` with `$T` bound to the Rust type of a compute dtype.
macro_rules! with_float {
    ($dtype:expr, $T:ident => $body:expr) => {
        match $dtype {
            $crate::tensor::DType::F64 => {
                type $T = f64;
                $body
            }
            _ => {
                type $T = f32;
                $body
            }
        }
    };
}
pub(crate) use with_float;

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, storage: Storage) -> Result<Self> {
        let numel = checked_numel(&shape)
            .ok_or_else(|| Error::Config(format!("shape {shape:?} overflows element count")))?;
        if numel != storage.len() {
            return Err(Error::Config(format!(
                "shape {shape:?} needs {numel} elements, buffer has {}",
                storage.len()
            )));
        }
        Ok(Tensor { shape, storage })
    }

    pub fn from_vec<T: Scalar>(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        Tensor::new(shape, T::wrap(values))
    }

    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Tensor::from_vec(shape, values)
    }

    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(shape, values)
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let n = shape.iter().product();
        let storage = match dtype {
            DType::F16 => Storage::F16(vec![f16::ZERO; n]),
            DType::BF16 => Storage::BF16(vec![bf16::ZERO; n]),
            DType::F32 => Storage::F32(vec![0.0; n]),
            DType::F64 => Storage::F64(vec![0.0; n]),
        };
        Tensor { shape, storage }
    }

    pub fn dtype(&self) -> DType {
        self.storage.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.storage.len()
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype().width()
    }

    /// Borrow the elements if the tensor already has element type `T`.
    pub fn as_slice<T: Scalar>(&self) -> Option<&[T]> {
        T::slice(&self.storage)
    }

    /// Elements as `T`, borrowed when no conversion is needed.
    pub fn values<T: Scalar>(&self) -> Cow<'_, [T]> {
        match T::slice(&self.storage) {
            Some(s) => Cow::Borrowed(s),
            None => Cow::Owned(T::convert(&self.storage)),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        f64::convert(&self.storage)
    }

    /// Convert to `dtype` with round-to-nearest-even.
    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        let storage = match dtype {
            DType::F32 => Storage::F32(f32::convert(&self.storage)),
            DType::F64 => Storage::F64(f64::convert(&self.storage)),
            DType::F16 => Storage::F16(match &self.storage {
                Storage::F64(v) => v.iter().map(|&x| f16::from_f64(x)).collect(),
                other => f32::convert(other).into_iter().map(f16::from_f32).collect(),
            }),
            DType::BF16 => Storage::BF16(match &self.storage {
                Storage::F64(v) => v.iter().map(|&x| bf16::from_f64(x)).collect(),
                other => f32::convert(other)
                    .into_iter()
                    .map(bf16::from_f32)
                    .collect(),
            }),
        };
        Tensor {
            shape: self.shape.clone(),
            storage,
        }
    }

    /// Like [`Tensor::cast`], but fails if the result holds a non-finite
    /// value (for example an overflow when narrowing to `f16`).
    pub fn cast_checked(&self, dtype: DType, name: &str) -> Result<Tensor> {
        let out = self.cast(dtype);
        match out.first_non_finite() {
            Some(index) => Err(Error::NonFinite {
                tensor: name.to_string(),
                index,
            }),
            None => Ok(out),
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        match &self.storage {
            Storage::F16(v) => v.iter().position(|x| !x.is_finite()),
            Storage::BF16(v) => v.iter().position(|x| !x.is_finite()),
            Storage::F32(v) => v.iter().position(|x| !x.is_finite()),
            Storage::F64(v) => v.iter().position(|x| !x.is_finite()),
        }
    }

    /// Little-endian element bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        match &self.storage {
            Storage::F16(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::BF16(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_le_bytes(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let w = dtype.width();
        if !bytes.len().is_multiple_of(w) {
            return Err(Error::Config(format!(
                "{} bytes is not a multiple of the {dtype} width",
                bytes.len()
            )));
        }
        let storage = match dtype {
            DType::F16 => Storage::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::BF16 => Storage::BF16(
                bytes
                    .chunks_exact(2)
                    .map(|c| bf16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::F32 => Storage::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F64 => Storage::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            ),
        };
        Tensor::new(shape, storage)
    }

    /// Same dtype, shape and element bits.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.dtype() == other.dtype()
            && self.shape == other.shape
            && self.to_le_bytes() == other.to_le_bytes()
    }
}

pub(crate) fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}
