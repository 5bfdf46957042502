//! Differentiable layers, losses and weight penalties.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{unravel, LabelVolume};
use crate::rng::Rng;
use crate::tensor::{
    conv3d_backward_input, conv3d_backward_params, conv3d_valid, Element, KernelRef,
    Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// Parameter registry

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named catalogue of every learnable tensor, with one gradient buffer each.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry<T> {
    entries: Vec<Param<T>>,
}

impl<T: Element> ParamRegistry<T> {
    pub fn new() -> Self {
        ParamRegistry { entries: Vec::new() }
    }

    pub fn register(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Param {
            name,
            kind,
            value,
            grad,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn kernel(&self, weight: ParamId, bias: ParamId) -> KernelRef<'_, T> {
        KernelRef {
            weights: &self.entries[weight.0].value,
            bias: &self.entries[bias.0].value,
        }
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|p| p.grad.fill(T::zero()));
    }

    /// Fresh zeroed buffers shaped like every parameter, in registry order.
    pub fn grad_buffers(&self) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect()
    }

    pub fn set_grads(&mut self, grads: Vec<Tensor<T>>) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::State(format!(
                "expected {} gradient tensors, got {}",
                self.entries.len(),
                grads.len()
            )));
        }
        for (p, g) in self.entries.iter_mut().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("set_grads", p.value.shape(), g.shape()));
            }
            p.grad = g;
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_values(&mut self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::State("parameter snapshot has wrong length".into()));
        }
        for (p, v) in self.entries.iter_mut().zip(values) {
            if v.shape() != p.value.shape() {
                return Err(Error::shape("restore_values", p.value.shape(), v.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Activation

/// Rectifier, `max(0, x)`.
pub fn activation_forward<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Masks `grad` by `x > 0`. The gradient at exactly zero is zero.
///
/// Passing the forward output instead of its input gives the same mask.
pub fn activation_backward<T: Element>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad.shape() {
        return Err(Error::shape("activation_backward", x.shape(), grad.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

// ---------------------------------------------------------------------------
// Dropout

/// Per-element multipliers drawn in a train-mode dropout pass.
#[derive(Debug, Clone, PartialEq)]
pub enum DropoutMask<T> {
    /// Every element kept unscaled (eval mode or rate 0).
    KeepAll,
    Scales(Vec<T>),
}

impl<T: Element> DropoutMask<T> {
    pub fn dropped(&self) -> usize {
        match self {
            DropoutMask::KeepAll => 0,
            DropoutMask::Scales(s) => s.iter().filter(|&&v| v == T::zero()).count(),
        }
    }
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted dropout: each element is zeroed with probability `rate`,
/// survivors are scaled by `1 / (1 - rate)`. Eval mode is the identity.
pub fn dropout_forward<T: Element>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    check_dropout_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), DropoutMask::KeepAll));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let scales: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let y = dropout_apply(x, &DropoutMask::Scales(scales.clone()))?;
    Ok((y, DropoutMask::Scales(scales)))
}

/// Applies a stored mask. Used both for the forward pass and, on the
/// cotangent, for the backward pass.
pub fn dropout_apply<T: Element>(x: &Tensor<T>, mask: &DropoutMask<T>) -> Result<Tensor<T>> {
    match mask {
        DropoutMask::KeepAll => Ok(x.clone()),
        DropoutMask::Scales(s) => {
            if s.len() != x.len() {
                return Err(Error::State(format!(
                    "dropout mask has {} entries for a tensor of {}",
                    s.len(),
                    x.len()
                )));
            }
            let data = x.data().iter().zip(s).map(|(&v, &m)| v * m).collect();
            Tensor::from_vec(x.shape(), data)
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

/// Per-voxel softmax over the leading class axis.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let classes = logits.leading();
    let voxels = logits.item_len();
    let x = logits.data();
    let mut out = Tensor::zeros(logits.shape());
    let y = out.data_mut();
    let mut buf = vec![0.0f64; classes];
    for v in 0..voxels {
        let m = (0..classes)
            .map(|c| x[c * voxels + v].as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..classes {
            buf[c] = (x[c * voxels + v].as_f64() - m).exp();
            z += buf[c];
        }
        for c in 0..classes {
            y[c * voxels + v] = T::from_f64_lossy(buf[c] / z);
        }
    }
    out
}

/// Class with the largest logit at every voxel; ties go to the lower class.
pub fn argmax_classes<T: Element>(logits: &Tensor<T>) -> Result<LabelVolume> {
    let classes = logits.leading();
    let voxels = logits.item_len();
    let x = logits.data();
    let labels = (0..voxels)
        .map(|v| {
            let mut best = 0;
            for c in 1..classes {
                if x[c * voxels + v] > x[best * voxels + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new(&logits.shape()[1..], labels)
}

/// Mean over voxels of `-log softmax(logits)[label]`, and its gradient.
///
/// `logits` is `(C, spatial...)`, `labels` has the spatial shape. The
/// gradient is `(softmax - onehot) / voxels`.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &LabelVolume,
) -> Result<(f64, Tensor<T>)> {
    if logits.rank() < 2 || &logits.shape()[1..] != labels.shape() {
        return Err(Error::shape("softmax_cross_entropy", logits.shape(), labels.shape()));
    }
    logits.validate("logits")?;
    let classes = logits.leading();
    let voxels = logits.item_len();
    if let Some(i) = labels.data().iter().position(|&c| c as usize >= classes) {
        return Err(Error::Data(format!(
            "label {} at voxel {:?} outside 0..{classes}",
            labels.data()[i],
            unravel(labels.shape(), i)
        )));
    }
    let x = logits.data();
    let mut grad = Tensor::zeros(logits.shape());
    let g = grad.data_mut();
    let inv = 1.0 / voxels as f64;
    let mut loss = 0.0;
    let mut buf = vec![0.0f64; classes];
    for v in 0..voxels {
        let m = (0..classes)
            .map(|c| x[c * voxels + v].as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..classes {
            buf[c] = (x[c * voxels + v].as_f64() - m).exp();
            z += buf[c];
        }
        let label = labels.data()[v] as usize;
        loss += z.ln() - (x[label * voxels + v].as_f64() - m);
        for c in 0..classes {
            let target = if c == label { 1.0 } else { 0.0 };
            g[c * voxels + v] = T::from_f64_lossy((buf[c] / z - target) * inv);
        }
    }
    Ok((loss * inv, grad))
}

// ---------------------------------------------------------------------------
// Regularisation

/// Breakdown of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean voxel cross-entropy in nats.
    pub data_loss: f64,
    pub l1_penalty: f64,
    pub l2_penalty: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(data_loss: f64, l1: f64, l2: f64, l1_coeff: f64, l2_coeff: f64) -> Self {
        LossReport {
            data_loss,
            l1_penalty: l1,
            l2_penalty: l2,
            total: data_loss + l1_coeff * l1 + l2_coeff * l2,
        }
    }
}

/// `(Σ|w|, ½Σw²)` over weight tensors. Biases are not penalised.
pub fn penalties<T: Element>(params: &ParamRegistry<T>) -> (f64, f64) {
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for p in params.iter().filter(|p| p.kind == ParamKind::Weight) {
        for &w in p.value.data() {
            let w = w.as_f64();
            l1 += w.abs();
            l2 += 0.5 * w * w;
        }
    }
    (l1, l2)
}

/// Computes the penalties and adds `λ₁·sign(w) + λ₂·w` to every weight gradient.
pub fn regularization<T: Element>(
    params: &mut ParamRegistry<T>,
    l1_coeff: f64,
    l2_coeff: f64,
) -> (f64, f64) {
    let totals = penalties(params);
    let a = T::from_f64_lossy(l1_coeff);
    let b = T::from_f64_lossy(l2_coeff);
    for p in params.iter_mut().filter(|p| p.kind == ParamKind::Weight) {
        for (g, &w) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
            let sign = if w > T::zero() {
                T::one()
            } else if w < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            *g = *g + a * sign + b * w;
        }
    }
    totals
}

// ---------------------------------------------------------------------------
// Layers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv3,
    Activation,
    Dropout,
    Dense1,
    Classifier,
}

/// One node of a sequential stack.
#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Weight and bias ids for parameterised kinds.
    pub params: Option<(ParamId, ParamId)>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropout_rate: f64,
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Conv { input: Tensor<T> },
    Activation { output: Tensor<T> },
    Dropout { mask: DropoutMask<T> },
}

impl Layer {
    pub fn kernel_size(&self) -> usize {
        match self.kind {
            LayerKind::Conv3 => 3,
            _ => 1,
        }
    }

    pub fn is_parameterised(&self) -> bool {
        self.params.is_some()
    }

    /// Shape this layer produces for a `(C, D, H, W)` input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self.kind {
            LayerKind::Activation | LayerKind::Dropout => Ok(input.to_vec()),
            LayerKind::Conv3 | LayerKind::Dense1 | LayerKind::Classifier => {
                let k = self.kernel_size();
                if input.len() != 4 || input[0] != self.in_channels || input[1..].iter().any(|&e| e < k)
                {
                    return Err(Error::Shape {
                        op: "layer",
                        left: input.to_vec(),
                        right: vec![self.out_channels, self.in_channels, k, k, k],
                    });
                }
                Ok(vec![
                    self.out_channels,
                    input[1] - k + 1,
                    input[2] - k + 1,
                    input[3] - k + 1,
                ])
            }
        }
    }

    pub fn forward<T: Element>(
        &self,
        params: &ParamRegistry<T>,
        x: Tensor<T>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Tensor<T>, LayerCache<T>)> {
        match self.kind {
            LayerKind::Conv3 | LayerKind::Dense1 | LayerKind::Classifier => {
                let (w, b) = self.params.expect("parameterised layer without params");
                let y = conv3d_valid(&x, &params.kernel(w, b))?;
                Ok((y, LayerCache::Conv { input: x }))
            }
            LayerKind::Activation => {
                let y = activation_forward(&x);
                Ok((y.clone(), LayerCache::Activation { output: y }))
            }
            LayerKind::Dropout => {
                let (y, mask) = dropout_forward(&x, self.dropout_rate, mode, rng)?;
                Ok((y, LayerCache::Dropout { mask }))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` (registry-indexed) and
    /// returns the input gradient when `want_input` is set.
    pub fn backward<T: Element>(
        &self,
        params: &ParamRegistry<T>,
        cache: &LayerCache<T>,
        grad: &Tensor<T>,
        grads: &mut [Tensor<T>],
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        match (self.kind, cache) {
            (
                LayerKind::Conv3 | LayerKind::Dense1 | LayerKind::Classifier,
                LayerCache::Conv { input },
            ) => {
                let (w, b) = self.params.expect("parameterised layer without params");
                let kernel = params.kernel(w, b);
                let (gw, gb) = conv3d_backward_params(input, &kernel, grad)?;
                grads[w.0].add_assign(&gw)?;
                grads[b.0].add_assign(&gb)?;
                if want_input {
                    Ok(Some(conv3d_backward_input(input.shape(), &kernel, grad)?))
                } else {
                    Ok(None)
                }
            }
            (LayerKind::Activation, LayerCache::Activation { output }) => {
                Ok(Some(activation_backward(output, grad)?))
            }
            (LayerKind::Dropout, LayerCache::Dropout { mask }) => Ok(Some(dropout_apply(grad, mask)?)),
            _ => Err(Error::State(format!("layer {} got a mismatched cache", self.name))),
        }
    }
}

/// Ordered stack of layers.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |s, l| l.output_shape(&s))
    }

    pub fn forward<T: Element>(
        &self,
        params: &ParamRegistry<T>,
        mut x: Tensor<T>,
        mode: Mode,
        rng: &mut Rng,
        caches: Option<&mut Vec<LayerCache<T>>>,
    ) -> Result<Tensor<T>> {
        let mut caches = caches;
        for layer in &self.layers {
            let (y, cache) = layer.forward(params, x, mode, rng)?;
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            x = y;
        }
        Ok(x)
    }

    /// Runs the stack backwards. Returns the input gradient if `want_input`.
    pub fn backward<T: Element>(
        &self,
        params: &ParamRegistry<T>,
        caches: &[LayerCache<T>],
        grad: Tensor<T>,
        grads: &mut [Tensor<T>],
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        if caches.len() != self.layers.len() {
            return Err(Error::State("layer cache count does not match stack".into()));
        }
        let mut g = grad;
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            // Below the first parameterised layer nothing needs an input gradient.
            let needed = want_input || self.layers[..i].iter().any(Layer::is_parameterised);
            match layer.backward(params, cache, &g, grads, needed)? {
                Some(next) => g = next,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }
}
