//! 3D valid convolution, stride 1, odd cubic kernels.
//!
//! Two implementations exist for every direction: a direct loop used as the
//! reference, and a row-streaming path that keeps the same per-element
//! accumulation order for the forward pass and the input gradient, so both
//! agree bit for bit. The weight gradient uses lane accumulators in the fast
//! path and only agrees to rounding.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Convolution weights `(C_out, C_in, k, k, k)` and bias `(C_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> ConvKernel<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 5 || s[2] != s[3] || s[3] != s[4] || s[2] % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel weights must be (C_out, C_in, k, k, k) with odd k, got {s:?}"
            )));
        }
        if bias.shape() != [s[0]] {
            return Err(Error::shape("ConvKernel::new", s, bias.shape()));
        }
        Ok(ConvKernel { weights, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, size: usize) -> Self {
        ConvKernel {
            weights: Tensor::zeros(&[out_channels, in_channels, size, size, size]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }
}

/// Anything that can act as convolution weights and bias.
pub trait AsKernel<T: Element> {
    fn weights(&self) -> &Tensor<T>;
    fn bias(&self) -> &Tensor<T>;

    fn out_channels(&self) -> usize {
        self.weights().shape()[0]
    }

    fn in_channels(&self) -> usize {
        self.weights().shape()[1]
    }

    fn size(&self) -> usize {
        self.weights().shape()[2]
    }

    /// Output shape for a `(C_in, D, H, W)` input.
    fn output_shape(&self, input: &[usize]) -> Result<[usize; 4]> {
        let k = self.size();
        if input.len() != 4 || input[0] != self.in_channels() || input[1..].iter().any(|&e| e < k) {
            return Err(Error::shape("conv3d_valid", input, self.weights().shape()));
        }
        Ok([
            self.out_channels(),
            input[1] - k + 1,
            input[2] - k + 1,
            input[3] - k + 1,
        ])
    }
}

impl<T: Element> AsKernel<T> for ConvKernel<T> {
    fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    fn bias(&self) -> &Tensor<T> {
        &self.bias
    }
}

/// Borrowed weights and bias, e.g. straight out of a parameter registry.
#[derive(Debug, Clone, Copy)]
pub struct KernelRef<'a, T> {
    pub weights: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
}

impl<T: Element> AsKernel<T> for KernelRef<'_, T> {
    fn weights(&self) -> &Tensor<T> {
        self.weights
    }

    fn bias(&self) -> &Tensor<T> {
        self.bias
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    cout: usize,
    k: usize,
    ind: [usize; 3],
    outd: [usize; 3],
}

impl Geometry {
    fn new<T: Element, K: AsKernel<T> + ?Sized>(input: &[usize], kernel: &K) -> Result<Self> {
        let out = kernel.output_shape(input)?;
        Ok(Geometry {
            cin: input[0],
            cout: out[0],
            k: kernel.size(),
            ind: [input[1], input[2], input[3]],
            outd: [out[1], out[2], out[3]],
        })
    }

    fn in_plane(&self) -> usize {
        self.ind[0] * self.ind[1] * self.ind[2]
    }

    fn out_plane(&self) -> usize {
        self.outd[0] * self.outd[1] * self.outd[2]
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    fn in_index(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        ((c * self.ind[0] + d) * self.ind[1] + h) * self.ind[2] + w
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.cout, self.outd[0], self.outd[1], self.outd[2]]
    }
}

#[inline]
fn axpy<T: Element>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

#[inline]
fn fma_rows<T: Element>(acc: &mut [T], a: &[T], b: &[T]) {
    for ((c, &x), &y) in acc.iter_mut().zip(a).zip(b) {
        *c = *c + x * y;
    }
}

/// Sums with eight interleaved partial accumulators.
fn lane_dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut acc = lanes.iter().copied().fold(T::zero(), |s, v| s + v);
    for i in chunks * 8..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

fn check_input<T: Element, K: AsKernel<T> + ?Sized>(input: &Tensor<T>, kernel: &K) -> Result<Geometry> {
    let g = Geometry::new(input.shape(), kernel)?;
    input.validate("conv3d input")?;
    Ok(g)
}

/// Valid 3D convolution of a `(C_in, D, H, W)` input.
///
/// `out[c, d, h, w] = bias[c] + Σ kernel[c, c', δ] · input[c', d+δd, h+δh, w+δw]`,
/// accumulated in `(c', δd, δh, δw)` order starting from the bias.
pub fn conv3d_valid<T: Element, K: AsKernel<T> + ?Sized>(input: &Tensor<T>, kernel: &K) -> Result<Tensor<T>> {
    let g = check_input(input, kernel)?;
    let x = input.data();
    let w = kernel.weights().data();
    let b = kernel.bias().data();
    let mut out = Tensor::zeros(&g.out_shape());
    let per_out = g.cin * g.taps();
    let plane = g.out_plane();

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(co, dst)| {
            let wc = &w[co * per_out..(co + 1) * per_out];
            if g.k == 1 {
                dst.fill(b[co]);
                let n = g.in_plane();
                for ci in 0..g.cin {
                    axpy(dst, wc[ci], &x[ci * n..(ci + 1) * n]);
                }
                return;
            }
            let ow = g.outd[2];
            for od in 0..g.outd[0] {
                for oh in 0..g.outd[1] {
                    let row = &mut dst[(od * g.outd[1] + oh) * ow..][..ow];
                    row.fill(b[co]);
                    for ci in 0..g.cin {
                        for kd in 0..g.k {
                            for kh in 0..g.k {
                                let base = g.in_index(ci, od + kd, oh + kh, 0);
                                let tap = ((ci * g.k + kd) * g.k + kh) * g.k;
                                for kw in 0..g.k {
                                    axpy(row, wc[tap + kw], &x[base + kw..base + kw + ow]);
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Direct seven-deep loop over the convolution definition.
pub fn conv3d_valid_reference<T: Element, K: AsKernel<T> + ?Sized>(
    input: &Tensor<T>,
    kernel: &K,
) -> Result<Tensor<T>> {
    let g = check_input(input, kernel)?;
    let mut out = Tensor::zeros(&g.out_shape());
    for co in 0..g.cout {
        for od in 0..g.outd[0] {
            for oh in 0..g.outd[1] {
                for ow in 0..g.outd[2] {
                    let mut acc = kernel.bias().data()[co];
                    for ci in 0..g.cin {
                        for kd in 0..g.k {
                            for kh in 0..g.k {
                                for kw in 0..g.k {
                                    let wv = kernel.weights().get(&[co, ci, kd, kh, kw]);
                                    let xv = input.get(&[ci, od + kd, oh + kh, ow + kw]);
                                    acc = acc + wv * xv;
                                }
                            }
                        }
                    }
                    out.set(&[co, od, oh, ow], acc);
                }
            }
        }
    }
    Ok(out)
}

fn check_backward<T: Element, K: AsKernel<T> + ?Sized>(
    input_shape: &[usize],
    kernel: &K,
    grad_out: &Tensor<T>,
) -> Result<Geometry> {
    let g = Geometry::new(input_shape, kernel)?;
    if grad_out.shape() != g.out_shape() {
        return Err(Error::shape("conv3d_backward", &g.out_shape(), grad_out.shape()));
    }
    Ok(g)
}

/// Gradient with respect to the input only.
pub fn conv3d_backward_input<T: Element, K: AsKernel<T> + ?Sized>(
    input_shape: &[usize],
    kernel: &K,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = check_backward(input_shape, kernel, grad_out)?;
    let w = kernel.weights().data();
    let gy = grad_out.data();
    let mut gin = Tensor::zeros(input_shape);
    let in_plane = g.in_plane();
    let out_plane = g.out_plane();
    let taps = g.taps();

    gin.data_mut()
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(ci, dst)| {
            for co in 0..g.cout {
                let gplane = &gy[co * out_plane..(co + 1) * out_plane];
                let wbase = (co * g.cin + ci) * taps;
                if g.k == 1 {
                    axpy(dst, w[wbase], gplane);
                    continue;
                }
                let ow = g.outd[2];
                for kd in 0..g.k {
                    for kh in 0..g.k {
                        for od in 0..g.outd[0] {
                            for oh in 0..g.outd[1] {
                                let grow = &gplane[(od * g.outd[1] + oh) * ow..][..ow];
                                let base = ((od + kd) * g.ind[1] + oh + kh) * g.ind[2];
                                for kw in 0..g.k {
                                    let wv = w[wbase + (kd * g.k + kh) * g.k + kw];
                                    axpy(&mut dst[base + kw..base + kw + ow], wv, grow);
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(gin)
}

/// Gradients with respect to weights and bias.
pub fn conv3d_backward_params<T: Element, K: AsKernel<T> + ?Sized>(
    input: &Tensor<T>,
    kernel: &K,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = check_backward(input.shape(), kernel, grad_out)?;
    let x = input.data();
    let gy = grad_out.data();
    let out_plane = g.out_plane();
    let in_plane = g.in_plane();
    let per_out = g.cin * g.taps();
    let mut gw = Tensor::zeros(kernel.weights().shape());
    let gb = Tensor::from_fn(&[g.cout], |co| {
        gy[co * out_plane..(co + 1) * out_plane]
            .iter()
            .fold(T::zero(), |s, &v| s + v)
    });

    gw.data_mut()
        .par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(co, dst)| {
            let gplane = &gy[co * out_plane..(co + 1) * out_plane];
            if g.k == 1 {
                for ci in 0..g.cin {
                    dst[ci] = lane_dot(gplane, &x[ci * in_plane..(ci + 1) * in_plane]);
                }
                return;
            }
            let ow = g.outd[2];
            let mut acc = vec![T::zero(); per_out * ow];
            for od in 0..g.outd[0] {
                for oh in 0..g.outd[1] {
                    let grow = &gplane[(od * g.outd[1] + oh) * ow..][..ow];
                    for ci in 0..g.cin {
                        for kd in 0..g.k {
                            for kh in 0..g.k {
                                let base = g.in_index(ci, od + kd, oh + kh, 0);
                                let tap = ((ci * g.k + kd) * g.k + kh) * g.k;
                                for kw in 0..g.k {
                                    fma_rows(
                                        &mut acc[(tap + kw) * ow..(tap + kw + 1) * ow],
                                        grow,
                                        &x[base + kw..base + kw + ow],
                                    );
                                }
                            }
                        }
                    }
                }
            }
            for (t, d) in dst.iter_mut().enumerate() {
                *d = acc[t * ow..(t + 1) * ow]
                    .iter()
                    .fold(T::zero(), |s, &v| s + v);
            }
        });
    Ok((gw, gb))
}

/// Exact gradients of [`conv3d_valid`] with respect to input, weights and bias.
pub fn conv3d_backward<T: Element, K: AsKernel<T> + ?Sized>(
    input: &Tensor<T>,
    kernel: &K,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (weights, bias) = conv3d_backward_params(input, kernel, grad_out)?;
    let input = conv3d_backward_input(input.shape(), kernel, grad_out)?;
    Ok(ConvGrads {
        input,
        weights,
        bias,
    })
}

/// Direct-loop backward. The input gradient is gathered per element in
/// `(c_out, δd, δh, δw)` order, matching [`conv3d_backward`] bit for bit.
pub fn conv3d_backward_reference<T: Element, K: AsKernel<T> + ?Sized>(
    input: &Tensor<T>,
    kernel: &K,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = check_backward(input.shape(), kernel, grad_out)?;
    let mut gin = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(kernel.weights().shape());
    let mut gb = Tensor::zeros(&[g.cout]);

    for co in 0..g.cout {
        let mut s = T::zero();
        for v in grad_out.leading_slice(co) {
            s = s + *v;
        }
        gb.data_mut()[co] = s;
    }
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for kd in 0..g.k {
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let mut s = T::zero();
                        for od in 0..g.outd[0] {
                            for oh in 0..g.outd[1] {
                                for ow in 0..g.outd[2] {
                                    s = s + grad_out.get(&[co, od, oh, ow])
                                        * input.get(&[ci, od + kd, oh + kh, ow + kw]);
                                }
                            }
                        }
                        gw.set(&[co, ci, kd, kh, kw], s);
                    }
                }
            }
        }
    }
    for ci in 0..g.cin {
        for d in 0..g.ind[0] {
            for h in 0..g.ind[1] {
                for w in 0..g.ind[2] {
                    let mut s = T::zero();
                    for co in 0..g.cout {
                        for kd in 0..g.k {
                            for kh in 0..g.k {
                                for kw in 0..g.k {
                                    let (Some(od), Some(oh), Some(ow)) =
                                        (d.checked_sub(kd), h.checked_sub(kh), w.checked_sub(kw))
                                    else {
                                        continue;
                                    };
                                    if od >= g.outd[0] || oh >= g.outd[1] || ow >= g.outd[2] {
                                        continue;
                                    }
                                    s = s + kernel.weights().get(&[co, ci, kd, kh, kw])
                                        * grad_out.get(&[co, od, oh, ow]);
                                }
                            }
                        }
                    }
                    gin.set(&[ci, d, h, w], s);
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        weights: gw,
        bias: gb,
    })
}
