//! Dense row-major tensors and the 3D valid convolution they feed.
//!
//! Layout is `(channel, depth, height, width)` for single samples; a leading
//! stream or batch axis is added where needed. The last axis is contiguous.

mod conv;

pub use conv::{
    conv3d_backward, conv3d_backward_input, conv3d_backward_params, conv3d_backward_reference,
    conv3d_valid, conv3d_valid_reference, AsKernel, ConvGrads, ConvKernel, KernelRef,
};

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 5;

/// Floating point element type a [`Tensor`] can hold.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<T>(), self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Config(format!(
            "tensor rank must be in 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Config(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        out[a] = out[a + 1] * shape[a + 1];
    }
    out
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::Config(format!(
                "tensor of shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (a, (&i, &e)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < e, "index {index:?} out of bounds for axis {a} of {:?}", self.shape);
            off = off * e + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Fails with [`Error::NonFinite`] on the first NaN or infinity.
    pub fn validate(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} of tensor {:?} is {:?}",
                self.shape, self.data[i]
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Extent of the leading axis.
    pub fn leading(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements in one slice along the leading axis.
    pub fn item_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Copy of slice `i` along the leading axis, with that axis dropped.
    pub fn index_leading(&self, i: usize) -> Self {
        assert!(self.rank() >= 2, "index_leading needs rank >= 2");
        let n = self.item_len();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn leading_slice(&self, i: usize) -> &[T] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn leading_slice_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.item_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("stack needs at least one tensor".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec(&shape, data)
    }

    /// Channels `start..end` of a `(C, ...)` tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape[0] {
            return Err(Error::Config(format!(
                "channel range {start}..{end} invalid for shape {:?}",
                self.shape
            )));
        }
        let n = self.item_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::from_vec(&shape, self.data[start * n..end * n].to_vec())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        elementwise(BinaryOp::Add, self, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        elementwise(BinaryOp::Sub, self, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        elementwise(BinaryOp::Mul, self, Operand::Tensor(other))
    }

    pub fn max_pairwise(&self, other: &Self) -> Result<Self> {
        elementwise(BinaryOp::Max, self, Operand::Tensor(other))
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a = *a + b);
        Ok(())
    }
}

/// Pointwise binary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// Pairwise maximum.
    Max,
}

impl BinaryOp {
    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Max => {
                if b > a {
                    b
                } else {
                    a
                }
            }
        }
    }
}

pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

/// Applies `op` pointwise. A scalar right operand is applied to every element.
pub fn elementwise<T: Element>(op: BinaryOp, a: &Tensor<T>, b: Operand<'_, T>) -> Result<Tensor<T>> {
    let data = match b {
        Operand::Scalar(s) => a.data.iter().map(|&x| op.apply(x, s)).collect(),
        Operand::Tensor(b) => {
            if a.shape != b.shape {
                return Err(Error::shape("elementwise", &a.shape, &b.shape));
            }
            a.data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| op.apply(x, y))
                .collect()
        }
    };
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Concatenates `(C_i, D, H, W)` tensors along the channel axis, in argument order.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("concat_channels needs at least one part".into()))?;
    let spatial = &first.shape[1..];
    let mut channels = 0;
    for p in parts {
        if p.rank() != first.rank() || &p.shape[1..] != spatial {
            return Err(Error::shape("concat_channels", &first.shape, &p.shape));
        }
        channels += p.shape[0];
    }
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    let mut shape = first.shape.clone();
    shape[0] = channels;
    Tensor::from_vec(&shape, data)
}
