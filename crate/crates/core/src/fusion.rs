//! Merging per-modality feature maps into one.
//!
//! All three functions take the stacked streams `(N, C, D, H, W)` and return
//! one `(C, D, H, W)` map. Max and sum act per channel across streams; conv
//! fusion reads the streams as `N·C` concatenated channels and maps them back
//! to `C` with a learned `1×1×1` kernel.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv3d_backward_input, conv3d_backward_params, conv3d_valid, AsKernel, ConvKernel, Element,
    Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionPoint {
    Early,
    Middle,
    Late,
}

impl FusionPoint {
    pub const ALL: [FusionPoint; 3] = [FusionPoint::Early, FusionPoint::Middle, FusionPoint::Late];

    /// Number of conv blocks each stream runs before the merge.
    pub fn blocks_before(self) -> usize {
        match self {
            FusionPoint::Early => 1,
            FusionPoint::Middle => 2,
            FusionPoint::Late => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionPoint::Early => "early",
            FusionPoint::Middle => "middle",
            FusionPoint::Late => "late",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionFn {
    Max,
    Sum,
    Conv,
}

impl FusionFn {
    pub const ALL: [FusionFn; 3] = [FusionFn::Sum, FusionFn::Max, FusionFn::Conv];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionFn::Max => "max",
            FusionFn::Sum => "sum",
            FusionFn::Conv => "conv",
        }
    }
}

impl FromStr for FusionPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(FusionPoint::Early),
            "middle" => Ok(FusionPoint::Middle),
            "late" => Ok(FusionPoint::Late),
            _ => Err(Error::Config(format!("unknown fusion point {s:?}"))),
        }
    }
}

impl FromStr for FusionFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(FusionFn::Max),
            "sum" => Ok(FusionFn::Sum),
            "conv" => Ok(FusionFn::Conv),
            _ => Err(Error::Config(format!("unknown fusion function {s:?}"))),
        }
    }
}

/// Where and how the streams are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FusionSpec {
    pub point: FusionPoint,
    pub function: FusionFn,
}

impl FusionSpec {
    pub fn new(point: FusionPoint, function: FusionFn) -> Self {
        FusionSpec { point, function }
    }

    /// The nine point × function cells, point-major.
    pub fn all() -> Vec<FusionSpec> {
        FusionPoint::ALL
            .iter()
            .flat_map(|&p| FusionFn::ALL.iter().map(move |&f| FusionSpec::new(p, f)))
            .collect()
    }
}

impl fmt::Display for FusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "point={} function={}", self.point.as_str(), self.function.as_str())
    }
}

/// Parses `point=<early|middle|late> function=<max|sum|conv>`, in either order.
impl FromStr for FusionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut point = None;
        let mut function = None;
        for tok in s.split_whitespace() {
            match tok.split_once('=') {
                Some(("point", v)) if point.is_none() => point = Some(v.parse()?),
                Some(("function", v)) if function.is_none() => function = Some(v.parse()?),
                _ => return Err(Error::Config(format!("bad fusion spec token {tok:?} in {s:?}"))),
            }
        }
        match (point, function) {
            (Some(point), Some(function)) => Ok(FusionSpec { point, function }),
            _ => Err(Error::Config(format!(
                "fusion spec {s:?} needs both point= and function="
            ))),
        }
    }
}

fn stream_dims<T: Element>(streams: &Tensor<T>) -> Result<(usize, Vec<usize>)> {
    if streams.rank() != 5 {
        return Err(Error::Config(format!(
            "fusion expects (N, C, D, H, W) streams, got {:?}",
            streams.shape()
        )));
    }
    let n = streams.shape()[0];
    if n < 2 {
        return Err(Error::Config(format!("fusion needs at least 2 streams, got {n}")));
    }
    Ok((n, streams.shape()[1..].to_vec()))
}

/// Index of the winning stream at each output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaxRouting {
    streams: usize,
    winners: Vec<u8>,
}

impl MaxRouting {
    pub fn winners(&self) -> &[u8] {
        &self.winners
    }
}

/// Elementwise maximum across streams. Ties pick the lowest stream index.
pub fn fuse_max<T: Element>(streams: &Tensor<T>) -> Result<(Tensor<T>, MaxRouting)> {
    let (n, shape) = stream_dims(streams)?;
    let m = streams.item_len();
    let x = streams.data();
    let mut out = x[..m].to_vec();
    let mut winners = vec![0u8; m];
    for s in 1..n {
        let src = &x[s * m..(s + 1) * m];
        for ((o, w), &v) in out.iter_mut().zip(winners.iter_mut()).zip(src) {
            if v > *o {
                *o = v;
                *w = s as u8;
            }
        }
    }
    Ok((Tensor::from_vec(&shape, out)?, MaxRouting { streams: n, winners }))
}

/// Routes the whole cotangent to the winning stream.
pub fn fuse_max_backward<T: Element>(routing: &MaxRouting, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if grad.len() != routing.winners.len() {
        return Err(Error::State("max-fusion routing does not match cotangent".into()));
    }
    let m = grad.len();
    let mut shape = vec![routing.streams];
    shape.extend_from_slice(grad.shape());
    let mut out = Tensor::zeros(&shape);
    let o = out.data_mut();
    for (i, (&w, &g)) in routing.winners.iter().zip(grad.data()).enumerate() {
        o[w as usize * m + i] = g;
    }
    Ok(out)
}

/// Elementwise sum across streams, accumulated in stream order.
pub fn fuse_sum<T: Element>(streams: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, shape) = stream_dims(streams)?;
    let m = streams.item_len();
    let x = streams.data();
    let mut out = x[..m].to_vec();
    for s in 1..n {
        for (o, &v) in out.iter_mut().zip(&x[s * m..(s + 1) * m]) {
            *o = *o + v;
        }
    }
    Tensor::from_vec(&shape, out)
}

/// Every stream receives the cotangent unchanged.
pub fn fuse_sum_backward<T: Element>(streams: usize, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let parts: Vec<&Tensor<T>> = (0..streams).map(|_| grad).collect();
    Tensor::stack(&parts)
}

fn check_fusion_kernel<T: Element, K: AsKernel<T> + ?Sized>(
    n: usize,
    shape: &[usize],
    kernel: &K,
) -> Result<()> {
    let c = shape[0];
    let expected = [c, n * c, 1, 1, 1];
    if kernel.weights().shape() != expected || kernel.bias().shape() != [c] {
        return Err(Error::Config(format!(
            "conv fusion kernel must be {expected:?} with bias [{c}], got {:?} / {:?}",
            kernel.weights().shape(),
            kernel.bias().shape()
        )));
    }
    Ok(())
}

fn as_concatenated<T: Element>(streams: &Tensor<T>, n: usize, shape: &[usize]) -> Result<Tensor<T>> {
    // (N, C, D, H, W) row-major is already the channel concatenation in stream order.
    streams
        .clone()
        .reshape(&[n * shape[0], shape[1], shape[2], shape[3]])
}

/// Concatenates the streams along channels and applies a `1×1×1` conv.
pub fn fuse_conv<T: Element, K: AsKernel<T> + ?Sized>(
    streams: &Tensor<T>,
    kernel: &K,
) -> Result<Tensor<T>> {
    let (n, shape) = stream_dims(streams)?;
    check_fusion_kernel(n, &shape, kernel)?;
    conv3d_valid(&as_concatenated(streams, n, &shape)?, kernel)
}

/// Gradients of [`fuse_conv`]: `(streams, weights, bias)`.
pub fn fuse_conv_backward<T: Element, K: AsKernel<T> + ?Sized>(
    streams: &Tensor<T>,
    kernel: &K,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, shape) = stream_dims(streams)?;
    check_fusion_kernel(n, &shape, kernel)?;
    let cat = as_concatenated(streams, n, &shape)?;
    let (gw, gb) = conv3d_backward_params(&cat, kernel, grad)?;
    let gin = conv3d_backward_input(cat.shape(), kernel, grad)?.reshape(streams.shape())?;
    Ok((gin, gw, gb))
}

/// Kernel giving `weight` to channel `c` of every stream for output channel `c`.
///
/// `weight = 1` reproduces sum fusion, `weight = 1/N` the stream mean.
pub fn block_identity_kernel<T: Element>(streams: usize, channels: usize, weight: T) -> ConvKernel<T> {
    let mut k = ConvKernel::zeros(channels, streams * channels, 1);
    for c in 0..channels {
        for s in 0..streams {
            k.weights.set(&[c, s * channels + c, 0, 0, 0], weight);
        }
    }
    k
}
