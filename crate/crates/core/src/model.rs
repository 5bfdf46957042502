//! Baseline and multi-stream fused networks.
//!
//! Every network is a stack of eight valid `3×3×3` convolutions grouped in
//! four blocks of two, followed by two unit-kernel dense layers and a
//! unit-kernel classifier. The baseline feeds all modalities to one stack as
//! channels. A fused variant gives each modality its own copy of the first
//! `k` blocks (`k` = 1, 2 or 4 for early, middle, late), merges the streams,
//! and continues with the remaining layers as a shared trunk.

use std::fmt;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    block_identity_kernel, fuse_conv, fuse_conv_backward, fuse_max, fuse_max_backward, fuse_sum,
    fuse_sum_backward, FusionFn, FusionSpec, MaxRouting,
};
use crate::labels::LabelVolume;
pub use crate::nn::Mode;
use crate::nn::{
    check_dropout_rate, softmax_cross_entropy, Layer, LayerCache, LayerKind, ParamId, ParamKind,
    ParamRegistry, Sequential,
};
use crate::rng::{self, Rng, Stream};
use crate::tensor::{Element, Tensor};

/// Baseline or one fused cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Fused(FusionSpec),
}

impl Variant {
    /// Baseline followed by the nine fused cells, point-major.
    pub fn all() -> Vec<Variant> {
        std::iter::once(Variant::Baseline)
            .chain(FusionSpec::all().into_iter().map(Variant::Fused))
            .collect()
    }

    pub fn point_label(&self) -> &'static str {
        match self {
            Variant::Baseline => "none",
            Variant::Fused(f) => f.point.as_str(),
        }
    }

    pub fn function_label(&self) -> &'static str {
        match self {
            Variant::Baseline => "none",
            Variant::Fused(f) => f.function.as_str(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Baseline => f.write_str("baseline"),
            Variant::Fused(s) => write!(f, "{}-{}", s.point.as_str(), s.function.as_str()),
        }
    }
}

pub const CONV_LAYERS: usize = 8;
pub const CONV_BLOCKS: usize = 4;

/// Everything needed to rebuild a network's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    pub modalities: usize,
    /// Output channels of conv1-1, conv1-2, ..., conv4-2.
    pub block_channels: Vec<usize>,
    pub dense_channels: Vec<usize>,
    pub classes: usize,
    pub input_patch: usize,
    pub output_patch: usize,
    pub conv_dropout: f64,
    pub dense_dropout: f64,
}

impl ArchitectureSpec {
    /// Full-width network: 30/30/40/40/40/40/50/50 conv channels, two dense
    /// layers of 150, five classes, 25³ in, 9³ out.
    pub fn standard(variant: Variant) -> Self {
        ArchitectureSpec {
            variant,
            modalities: 4,
            block_channels: vec![30, 30, 40, 40, 40, 40, 50, 50],
            dense_channels: vec![150, 150],
            classes: 5,
            input_patch: 25,
            output_patch: 9,
            conv_dropout: 0.02,
            dense_dropout: 0.5,
        }
    }

    /// Narrow network for checks and desk-scale runs: same depth and shapes,
    /// channels 2/2/3/3/3/3/4/4 and dense width 5.
    pub fn tiny(variant: Variant) -> Self {
        ArchitectureSpec {
            block_channels: vec![2, 2, 3, 3, 3, 3, 4, 4],
            dense_channels: vec![5, 5],
            ..Self::standard(variant)
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        ArchitectureSpec {
            variant,
            ..self.clone()
        }
    }

    pub fn fusion(&self) -> Option<FusionSpec> {
        match self.variant {
            Variant::Baseline => None,
            Variant::Fused(f) => Some(f),
        }
    }

    /// Channels produced by conv block `b` (1-based).
    pub fn block_output_channels(&self, block: usize) -> usize {
        self.block_channels[2 * block - 1]
    }

    /// Spatial extent after conv block `b` (1-based).
    pub fn block_extent(&self, block: usize) -> usize {
        self.input_patch - 4 * block
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.len() != CONV_LAYERS {
            return Err(Error::Config(format!(
                "expected {CONV_LAYERS} conv channel counts, got {}",
                self.block_channels.len()
            )));
        }
        if self.block_channels.iter().chain(&self.dense_channels).any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.classes < 2 || self.classes > u8::MAX as usize {
            return Err(Error::Config(format!("class count {} unsupported", self.classes)));
        }
        if self.modalities == 0 {
            return Err(Error::Config("need at least one modality".into()));
        }
        if let Variant::Fused(_) = self.variant {
            if self.modalities < 2 || self.modalities > u8::MAX as usize {
                return Err(Error::Config(format!(
                    "fusion needs 2..=255 modalities, got {}",
                    self.modalities
                )));
            }
        }
        if self.input_patch < 2 * CONV_LAYERS + 1 {
            return Err(Error::Config(format!("input patch {} too small", self.input_patch)));
        }
        let out = self.input_patch - 2 * CONV_LAYERS;
        if out != self.output_patch {
            return Err(Error::Config(format!(
                "eight 3x3x3 valid convs map {} to {out}, not {}",
                self.input_patch, self.output_patch
            )));
        }
        check_dropout_rate(self.conv_dropout)?;
        check_dropout_rate(self.dense_dropout)?;
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 4] {
        let p = self.input_patch;
        [self.modalities, p, p, p]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        let p = self.output_patch;
        [self.classes, p, p, p]
    }
}

#[derive(Debug, Clone)]
enum FusionNode {
    Max,
    Sum,
    Conv { weight: ParamId, bias: ParamId },
}

#[derive(Debug)]
enum FusionCache<T> {
    Max(MaxRouting),
    Sum,
    Conv { streams: Tensor<T> },
}

/// Everything one sample's forward pass leaves for its backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    streams: Vec<Vec<LayerCache<T>>>,
    fusion: Option<FusionCache<T>>,
    trunk: Vec<LayerCache<T>>,
}

/// Named intermediate outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Element> Trace<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

/// One row of a parameter-count table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub layer: String,
    pub weights: usize,
    pub biases: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    pub total: usize,
}

impl ParamTable {
    pub fn row(&self, layer: &str) -> Option<&ParamRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }
}

impl fmt::Display for ParamTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>10}  {:>8}  {:>10}", "layer", "weights", "biases", "total")?;
        for r in &self.rows {
            writeln!(f, "{:<width$}  {:>10}  {:>8}  {:>10}", r.layer, r.weights, r.biases, r.total)?;
        }
        write!(f, "{:<width$}  {:>10}  {:>8}  {:>10}", "TOTAL", "", "", self.total)
    }
}

/// A built network: layer graph, parameters and gradient buffers.
#[derive(Debug)]
pub struct Network<T> {
    spec: ArchitectureSpec,
    params: ParamRegistry<T>,
    streams: Vec<Sequential>,
    fusion: Option<FusionNode>,
    trunk: Sequential,
    pending: Option<Vec<Tape<T>>>,
}

struct Builder<'a, T> {
    spec: &'a ArchitectureSpec,
    params: ParamRegistry<T>,
}

impl<T: Element> Builder<'_, T> {
    fn param_layer(
        &mut self,
        prefix: &str,
        name: &str,
        kind: LayerKind,
        cin: usize,
        cout: usize,
    ) -> Result<Layer> {
        let k = if kind == LayerKind::Conv3 { 3 } else { 1 };
        let full = format!("{prefix}{name}");
        let w = self.params.register(
            format!("{full}/w"),
            ParamKind::Weight,
            Tensor::zeros(&[cout, cin, k, k, k]),
        )?;
        let b = self
            .params
            .register(format!("{full}/b"), ParamKind::Bias, Tensor::zeros(&[cout]))?;
        Ok(Layer {
            name: full,
            kind,
            params: Some((w, b)),
            in_channels: cin,
            out_channels: cout,
            dropout_rate: 0.0,
        })
    }

    fn plain(name: String, kind: LayerKind, ch: usize, rate: f64) -> Layer {
        Layer {
            name,
            kind,
            params: None,
            in_channels: ch,
            out_channels: ch,
            dropout_rate: rate,
        }
    }

    /// Appends conv blocks `first..=last` (1-based) to `seq`.
    fn blocks(
        &mut self,
        seq: &mut Sequential,
        prefix: &str,
        first: usize,
        last: usize,
        mut cin: usize,
    ) -> Result<usize> {
        for block in first..=last {
            for sub in 1..=2 {
                let cout = self.spec.block_channels[2 * (block - 1) + sub - 1];
                let name = format!("conv{block}-{sub}");
                seq.layers
                    .push(self.param_layer(prefix, &name, LayerKind::Conv3, cin, cout)?);
                seq.layers.push(Self::plain(
                    format!("{prefix}{name}/act"),
                    LayerKind::Activation,
                    cout,
                    0.0,
                ));
                cin = cout;
            }
            seq.layers.push(Self::plain(
                format!("{prefix}conv{block}/dropout"),
                LayerKind::Dropout,
                cin,
                self.spec.conv_dropout,
            ));
        }
        Ok(cin)
    }

    fn head(&mut self, seq: &mut Sequential, mut cin: usize) -> Result<()> {
        for (i, &width) in self.spec.dense_channels.iter().enumerate() {
            let name = format!("dense{}", i + 1);
            seq.layers
                .push(self.param_layer("", &name, LayerKind::Dense1, cin, width)?);
            seq.layers.push(Self::plain(
                format!("{name}/act"),
                LayerKind::Activation,
                width,
                0.0,
            ));
            seq.layers.push(Self::plain(
                format!("{name}/dropout"),
                LayerKind::Dropout,
                width,
                self.spec.dense_dropout,
            ));
            cin = width;
        }
        let classes = self.spec.classes;
        seq.layers
            .push(self.param_layer("", "classifier", LayerKind::Classifier, cin, classes)?);
        Ok(())
    }
}

fn stream_prefix(s: usize) -> String {
    format!("stream{s}/")
}

impl<T: Element> Network<T> {
    /// Builds and initialises a network.
    ///
    /// Weights are drawn from `U(-a, a)` with `a = g/√fan_in`, where `g = √6`
    /// for layers followed by a rectifier and `g = 1` for the classifier.
    /// Biases start at zero. The conv-fusion kernel starts as the stream
    /// mean plus `U(-0.01, 0.01)` noise.
    pub fn build(spec: &ArchitectureSpec, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::structure(spec)?;
        net.initialise(rng);
        Ok(net)
    }

    /// Builds with the init stream of `seed`.
    pub fn build_seeded(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        Self::build(spec, &mut rng::stream(seed, Stream::Init, &[]))
    }

    /// Layer graph with all parameters zero.
    pub fn structure(spec: &ArchitectureSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            spec,
            params: ParamRegistry::new(),
        };
        let mut streams = Vec::new();
        let mut trunk = Sequential::default();
        let fusion = match spec.variant {
            Variant::Baseline => {
                let c = b.blocks(&mut trunk, "", 1, CONV_BLOCKS, spec.modalities)?;
                b.head(&mut trunk, c)?;
                None
            }
            Variant::Fused(f) => {
                let upto = f.point.blocks_before();
                let mut c = 0;
                for s in 0..spec.modalities {
                    let mut seq = Sequential::default();
                    c = b.blocks(&mut seq, &stream_prefix(s), 1, upto, 1)?;
                    streams.push(seq);
                }
                let node = match f.function {
                    FusionFn::Max => FusionNode::Max,
                    FusionFn::Sum => FusionNode::Sum,
                    FusionFn::Conv => {
                        let n = spec.modalities;
                        let weight = b.params.register(
                            "fusion/w".into(),
                            ParamKind::Weight,
                            Tensor::zeros(&[c, n * c, 1, 1, 1]),
                        )?;
                        let bias =
                            b.params
                                .register("fusion/b".into(), ParamKind::Bias, Tensor::zeros(&[c]))?;
                        FusionNode::Conv { weight, bias }
                    }
                };
                if upto < CONV_BLOCKS {
                    c = b.blocks(&mut trunk, "", upto + 1, CONV_BLOCKS, c)?;
                }
                b.head(&mut trunk, c)?;
                Some(node)
            }
        };
        let net = Network {
            spec: spec.clone(),
            params: b.params,
            streams,
            fusion,
            trunk,
            pending: None,
        };
        net.check_shape_chain()?;
        Ok(net)
    }

    fn initialise(&mut self, rng: &mut Rng) {
        let n = self.spec.modalities;
        let mut fusion_ids = None;
        if let Some(FusionNode::Conv { weight, bias }) = &self.fusion {
            fusion_ids = Some((*weight, *bias));
        }
        let layers: Vec<Layer> = self
            .streams
            .iter()
            .flat_map(|s| s.layers.iter())
            .chain(&self.trunk.layers)
            .filter(|l| l.params.is_some())
            .cloned()
            .collect();
        // Registry order: streams, then fusion, then trunk. Draw in that order.
        let mut order: Vec<(ParamId, Option<f64>)> = Vec::new();
        for l in &layers {
            let (w, _) = l.params.unwrap();
            let k = l.kernel_size();
            let fan_in = (l.in_channels * k * k * k) as f64;
            let gain = if l.kind == LayerKind::Classifier { 1.0 } else { 6f64.sqrt() };
            order.push((w, Some(gain / fan_in.sqrt())));
        }
        if let Some((w, _)) = fusion_ids {
            order.push((w, None));
        }
        order.sort_by_key(|(id, _)| id.0);
        for (id, bound) in order {
            let shape = self.params.value(id).shape().to_vec();
            let value = match bound {
                Some(a) => Tensor::from_fn(&shape, |_| T::from_f64_lossy(rng.random_range(-a..a))),
                None => {
                    let c = shape[0];
                    let mut k = block_identity_kernel::<T>(n, c, T::from_f64_lossy(1.0 / n as f64))
                        .weights;
                    for v in k.data_mut() {
                        *v = *v + T::from_f64_lossy(rng.random_range(-0.01..0.01));
                    }
                    k
                }
            };
            self.params.get_mut(id).value = value;
        }
        for p in self.params.iter_mut().filter(|p| p.kind == ParamKind::Bias) {
            p.value.fill(T::zero());
        }
    }

    /// Asserts the 25 → 21 → 17 → 13 → 9 block chain on every stream and the trunk.
    fn check_shape_chain(&self) -> Result<()> {
        let spec = &self.spec;
        let p = spec.input_patch;
        let check = |seq: &Sequential, input: Vec<usize>, first_block: usize| -> Result<Vec<usize>> {
            let mut shape = input;
            let mut block = first_block;
            for layer in &seq.layers {
                shape = layer.output_shape(&shape)?;
                if layer.kind == LayerKind::Dropout && layer.name.ends_with("/dropout") && layer.name.contains("conv") {
                    let e = spec.block_extent(block);
                    let want = vec![spec.block_output_channels(block), e, e, e];
                    if shape != want {
                        return Err(Error::Config(format!(
                            "block conv{block} of {} produces {shape:?}, expected {want:?}",
                            spec.variant
                        )));
                    }
                    block += 1;
                }
            }
            Ok(shape)
        };
        let trunk_in = match spec.fusion() {
            None => vec![spec.modalities, p, p, p],
            Some(_) => {
                let mut last = Vec::new();
                for s in &self.streams {
                    last = check(s, vec![1, p, p, p], 1)?;
                }
                last
            }
        };
        let first = spec.fusion().map_or(1, |f| f.point.blocks_before() + 1);
        let out = check(&self.trunk, trunk_in, first)?;
        if out != spec.output_shape() {
            return Err(Error::Config(format!(
                "network output {out:?} differs from {:?}",
                spec.output_shape()
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamRegistry<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry<T> {
        &mut self.params
    }

    /// Shape of each stream's output at the fusion point.
    pub fn fusion_input_shape(&self) -> Option<Vec<usize>> {
        let f = self.spec.fusion()?;
        let b = f.point.blocks_before();
        let e = self.spec.block_extent(b);
        Some(vec![
            self.spec.modalities,
            self.spec.block_output_channels(b),
            e,
            e,
            e,
        ])
    }

    pub fn count_parameters(&self) -> ParamTable {
        let mut rows = Vec::new();
        let mut push = |layer: &str, w: ParamId, b: ParamId| {
            let weights = self.params.value(w).len();
            let biases = self.params.value(b).len();
            rows.push(ParamRow {
                layer: layer.to_string(),
                weights,
                biases,
                total: weights + biases,
            });
        };
        for l in self.streams.iter().flat_map(|s| s.layers.iter()) {
            if let Some((w, b)) = l.params {
                push(&l.name, w, b);
            }
        }
        if let Some(FusionNode::Conv { weight, bias }) = &self.fusion {
            push("fusion", *weight, *bias);
        }
        for l in &self.trunk.layers {
            if let Some((w, b)) = l.params {
                push(&l.name, w, b);
            }
        }
        let total = rows.iter().map(|r| r.total).sum();
        debug_assert_eq!(total, self.params.count());
        ParamTable { rows, total }
    }

    fn check_sample(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.spec.input_shape() {
            return Err(Error::shape("network input", &self.spec.input_shape(), x.shape()));
        }
        x.validate("network input")
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let mut want = vec![batch.shape().first().copied().unwrap_or(0)];
        want.extend_from_slice(&self.spec.input_shape());
        if batch.rank() != 5 || batch.shape() != want.as_slice() {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.spec.input_shape());
            return Err(Error::shape("network batch", &expected, batch.shape()));
        }
        Ok(batch.leading())
    }

    fn run_sample(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut Rng,
        record: bool,
        mut trace: Option<&mut Trace<T>>,
    ) -> Result<(Tensor<T>, Option<Tape<T>>)> {
        self.check_sample(x)?;
        let mut tape = Tape {
            streams: Vec::new(),
            fusion: None,
            trunk: Vec::new(),
        };
        let trunk_input = match &self.fusion {
            None => x.clone(),
            Some(node) => {
                let mut outs = Vec::with_capacity(self.streams.len());
                for (s, seq) in self.streams.iter().enumerate() {
                    let xs = x.slice_channels(s, s + 1)?;
                    let mut caches = Vec::new();
                    let y = run_seq(seq, &self.params, xs, mode, rng, record || trace.is_some(), &mut caches, trace.as_deref_mut())?;
                    if record {
                        tape.streams.push(caches);
                    }
                    outs.push(y);
                }
                let refs: Vec<&Tensor<T>> = outs.iter().collect();
                let stacked = Tensor::stack(&refs)?;
                drop(outs);
                let (fused, cache) = match node {
                    FusionNode::Max => {
                        let (y, routing) = fuse_max(&stacked)?;
                        (y, FusionCache::Max(routing))
                    }
                    FusionNode::Sum => (fuse_sum(&stacked)?, FusionCache::Sum),
                    FusionNode::Conv { weight, bias } => {
                        let y = fuse_conv(&stacked, &self.params.kernel(*weight, *bias))?;
                        (y, FusionCache::Conv { streams: stacked.clone() })
                    }
                };
                if let Some(t) = trace.as_deref_mut() {
                    t.entries.push(("fusion/input".into(), stacked));
                    t.entries.push(("fusion/output".into(), fused.clone()));
                }
                if record {
                    tape.fusion = Some(cache);
                }
                fused
            }
        };
        let mut caches = Vec::new();
        let logits = run_seq(
            &self.trunk,
            &self.params,
            trunk_input,
            mode,
            rng,
            record || trace.is_some(),
            &mut caches,
            trace.as_deref_mut(),
        )?;
        if record {
            tape.trunk = caches;
        }
        if let Some(t) = trace {
            t.entries.push(("logits".into(), logits.clone()));
        }
        Ok((logits, record.then_some(tape)))
    }

    fn backward_sample(&self, tape: &Tape<T>, grad_logits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut grads = self.params.grad_buffers();
        let fused = self.fusion.is_some();
        let g = self
            .trunk
            .backward(&self.params, &tape.trunk, grad_logits.clone(), &mut grads, fused)?;
        let Some(node) = &self.fusion else {
            return Ok(grads);
        };
        let g = g.ok_or_else(|| Error::State("trunk produced no input gradient".into()))?;
        let n = self.streams.len();
        let g_streams = match (node, tape.fusion.as_ref()) {
            (FusionNode::Max, Some(FusionCache::Max(routing))) => fuse_max_backward(routing, &g)?,
            (FusionNode::Sum, Some(FusionCache::Sum)) => fuse_sum_backward(n, &g)?,
            (FusionNode::Conv { weight, bias }, Some(FusionCache::Conv { streams })) => {
                let (gs, gw, gb) = fuse_conv_backward(streams, &self.params.kernel(*weight, *bias), &g)?;
                grads[weight.0].add_assign(&gw)?;
                grads[bias.0].add_assign(&gb)?;
                gs
            }
            _ => return Err(Error::State("fusion cache does not match network".into())),
        };
        for (s, seq) in self.streams.iter().enumerate() {
            seq.backward(
                &self.params,
                &tape.streams[s],
                g_streams.index_leading(s),
                &mut grads,
                false,
            )?;
        }
        Ok(grads)
    }

    fn sample_rng(seed: u64, index: usize) -> Rng {
        rng::stream(seed, Stream::Dropout, &[index as u64])
    }

    /// Logits `(B, classes, 9, 9, 9)` for a batch `(B, N, 25, 25, 25)`.
    ///
    /// In train mode each sample draws its dropout masks from its own stream
    /// derived from `dropout_seed` and its batch index, and the per-sample
    /// tapes are kept for [`Network::backward`].
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode, dropout_seed: u64) -> Result<Tensor<T>> {
        let b = self.check_batch(batch)?;
        let record = mode == Mode::Train;
        let results: Vec<(Tensor<T>, Option<Tape<T>>)> = (0..b)
            .into_par_iter()
            .map(|i| {
                let x = batch.index_leading(i);
                self.run_sample(&x, mode, &mut Self::sample_rng(dropout_seed, i), record, None)
            })
            .collect::<Result<_>>()?;
        let (logits, tapes): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        self.pending = if record {
            Some(tapes.into_iter().map(Option::unwrap).collect())
        } else {
            None
        };
        let refs: Vec<&Tensor<T>> = logits.iter().collect();
        Tensor::stack(&refs)
    }

    /// Eval-mode logits without touching any network state.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_batch(batch)?;
        let logits: Vec<Tensor<T>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let x = batch.index_leading(i);
                let mut rng = Self::sample_rng(0, i);
                self.run_sample(&x, Mode::Eval, &mut rng, false, None).map(|(y, _)| y)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<T>> = logits.iter().collect();
        Tensor::stack(&refs)
    }

    /// Backpropagates `grad_logits` through the tapes of the last train-mode
    /// forward. Gradient buffers are overwritten with the sum over samples.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<()> {
        let tapes = self
            .pending
            .take()
            .ok_or_else(|| Error::State("backward called without a matching train-mode forward".into()))?;
        let mut want = vec![tapes.len()];
        want.extend_from_slice(&self.spec.output_shape());
        if grad_logits.shape() != want.as_slice() {
            self.pending = Some(tapes);
            return Err(Error::shape("network backward", &want, grad_logits.shape()));
        }
        let per_sample: Vec<Vec<Tensor<T>>> = tapes
            .par_iter()
            .enumerate()
            .map(|(i, tape)| self.backward_sample(tape, &grad_logits.index_leading(i)))
            .collect::<Result<_>>()?;
        let total = reduce_in_order(self.params.grad_buffers(), per_sample)?;
        self.params.set_grads(total)
    }

    /// Forward and backward of the mean batch cross-entropy in one pass,
    /// without keeping every sample's tape alive at once. Returns the mean
    /// data loss; gradient buffers are overwritten.
    pub fn loss_and_grad(
        &mut self,
        batch: &Tensor<T>,
        labels: &[LabelVolume],
        dropout_seed: u64,
    ) -> Result<f64> {
        let b = self.check_batch(batch)?;
        if labels.len() != b {
            return Err(Error::Config(format!("{} label maps for a batch of {b}", labels.len())));
        }
        let scale = T::from_f64_lossy(1.0 / b as f64);
        let per_sample: Vec<(f64, Vec<Tensor<T>>)> = (0..b)
            .into_par_iter()
            .map(|i| {
                let x = batch.index_leading(i);
                let mut rng = Self::sample_rng(dropout_seed, i);
                let (logits, tape) = self.run_sample(&x, Mode::Train, &mut rng, true, None)?;
                let (loss, grad) = softmax_cross_entropy(&logits, &labels[i])?;
                let grads = self.backward_sample(&tape.unwrap(), &grad.scale(scale))?;
                Ok((loss, grads))
            })
            .collect::<Result<_>>()?;
        self.pending = None;
        let loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() / b as f64;
        let total = reduce_in_order(
            self.params.grad_buffers(),
            per_sample.into_iter().map(|(_, g)| g).collect(),
        )?;
        self.params.set_grads(total)?;
        Ok(loss)
    }

    /// Mean batch cross-entropy without gradients. In train mode the dropout
    /// masks are the ones [`Network::loss_and_grad`] draws for the same seed.
    pub fn loss(&self, batch: &Tensor<T>, labels: &[LabelVolume], mode: Mode, dropout_seed: u64) -> Result<f64> {
        let b = self.check_batch(batch)?;
        if labels.len() != b {
            return Err(Error::Config(format!("{} label maps for a batch of {b}", labels.len())));
        }
        let losses: Vec<f64> = (0..b)
            .into_par_iter()
            .map(|i| {
                let x = batch.index_leading(i);
                let mut rng = Self::sample_rng(dropout_seed, i);
                let (logits, _) = self.run_sample(&x, mode, &mut rng, false, None)?;
                Ok(softmax_cross_entropy(&logits, &labels[i])?.0)
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / b as f64)
    }

    /// Mean batch loss together with the network's switching pattern: which
    /// rectifier outputs are positive and which stream wins each max-fusion
    /// element. Two parameter settings with equal patterns lie in the same
    /// smooth piece of the loss.
    pub fn loss_and_pattern(
        &self,
        batch: &Tensor<T>,
        labels: &[LabelVolume],
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<(f64, Vec<u8>)> {
        let b = self.check_batch(batch)?;
        if labels.len() != b {
            return Err(Error::Config(format!("{} label maps for a batch of {b}", labels.len())));
        }
        let max_fusion = matches!(self.fusion, Some(FusionNode::Max));
        let mut loss = 0.0;
        let mut pattern = Vec::new();
        for (i, label) in labels.iter().enumerate() {
            let mut trace = Trace { entries: Vec::new() };
            let mut rng = Self::sample_rng(dropout_seed, i);
            let (logits, _) = self.run_sample(&batch.index_leading(i), mode, &mut rng, false, Some(&mut trace))?;
            loss += softmax_cross_entropy(&logits, label)?.0;
            for (name, t) in &trace.entries {
                if name.ends_with("/act") {
                    pattern.extend(t.data().iter().map(|&v| u8::from(v > T::zero())));
                } else if max_fusion && name == "fusion/input" {
                    pattern.extend_from_slice(fuse_max(t)?.1.winners());
                }
            }
        }
        Ok((loss / b as f64, pattern))
    }

    /// Runs one sample and records every layer output by qualified name,
    /// plus `fusion/input`, `fusion/output` and `logits`.
    pub fn trace(&self, x: &Tensor<T>, mode: Mode, dropout_seed: u64) -> Result<Trace<T>> {
        let mut trace = Trace { entries: Vec::new() };
        let mut rng = Self::sample_rng(dropout_seed, 0);
        self.run_sample(x, mode, &mut rng, false, Some(&mut trace))?;
        Ok(trace)
    }

    /// Names of block outputs in forward order, e.g. `stream0/conv1/dropout`.
    pub fn block_output_names(&self) -> Vec<String> {
        self.streams
            .iter()
            .flat_map(|s| s.layers.iter())
            .chain(&self.trunk.layers)
            .filter(|l| l.kind == LayerKind::Dropout && l.name.contains("conv"))
            .map(|l| l.name.clone())
            .collect()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.streams
            .iter()
            .flat_map(|s| s.layers.iter())
            .chain(&self.trunk.layers)
    }

    /// True while a train-mode forward is waiting for its backward.
    pub fn has_pending_tapes(&self) -> bool {
        self.pending.is_some()
    }
}

#[allow(clippy::too_many_arguments)]
fn run_seq<T: Element>(
    seq: &Sequential,
    params: &ParamRegistry<T>,
    mut x: Tensor<T>,
    mode: Mode,
    rng: &mut Rng,
    keep: bool,
    caches: &mut Vec<LayerCache<T>>,
    mut trace: Option<&mut Trace<T>>,
) -> Result<Tensor<T>> {
    for layer in &seq.layers {
        let (y, cache) = layer.forward(params, x, mode, rng)?;
        if keep {
            caches.push(cache);
        }
        if let Some(t) = trace.as_deref_mut() {
            t.entries.push((layer.name.clone(), y.clone()));
        }
        x = y;
    }
    Ok(x)
}

fn reduce_in_order<T: Element>(
    mut total: Vec<Tensor<T>>,
    per_sample: Vec<Vec<Tensor<T>>>,
) -> Result<Vec<Tensor<T>>> {
    for grads in per_sample {
        for (t, g) in total.iter_mut().zip(&grads) {
            t.add_assign(g)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionPoint;

    fn fused(point: FusionPoint, function: FusionFn) -> Variant {
        Variant::Fused(FusionSpec::new(point, function))
    }

    fn random_batch(spec: &ArchitectureSpec, b: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng::stream(seed, Stream::Sampling, &[]);
        let mut shape = vec![b];
        shape.extend_from_slice(&spec.input_shape());
        Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn rejects_inconsistent_specs() {
        let mut s = ArchitectureSpec::tiny(Variant::Baseline);
        s.input_patch = 27;
        assert!(Network::<f32>::structure(&s).is_err());
        let mut s = ArchitectureSpec::tiny(Variant::Baseline);
        s.block_channels.pop();
        assert!(Network::<f32>::structure(&s).is_err());
        let mut s = ArchitectureSpec::tiny(fused(FusionPoint::Late, FusionFn::Conv));
        s.modalities = 1;
        assert!(Network::<f32>::structure(&s).is_err());
    }

    #[test]
    fn standard_parameter_counts() {
        let base = Network::<f32>::structure(&ArchitectureSpec::standard(Variant::Baseline)).unwrap();
        assert_eq!(base.count_parameters().row("conv1-1").unwrap().total, 3270);
        let early = Network::<f32>::structure(&ArchitectureSpec::standard(fused(FusionPoint::Early, FusionFn::Sum))).unwrap();
        let t = early.count_parameters();
        for s in 0..4 {
            assert_eq!(t.row(&format!("stream{s}/conv1-1")).unwrap().total, 840);
        }
        let late = |f| {
            Network::<f32>::structure(&ArchitectureSpec::standard(fused(FusionPoint::Late, f)))
                .unwrap()
                .count_parameters()
                .total
        };
        assert_eq!(late(FusionFn::Conv) - late(FusionFn::Max), 10050);
        assert_eq!(late(FusionFn::Sum), late(FusionFn::Max));
    }

    #[test]
    fn parameter_names_are_unique_and_readable() {
        let net = Network::<f32>::structure(&ArchitectureSpec::tiny(fused(FusionPoint::Middle, FusionFn::Conv))).unwrap();
        let names: Vec<&str> = net.params().iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"stream2/conv1-1/w"));
        assert!(names.contains(&"fusion/w"));
        assert!(names.contains(&"conv3-1/b"));
        assert!(names.contains(&"classifier/w"));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn eval_forward_is_deterministic_and_shaped() {
        let spec = ArchitectureSpec::tiny(fused(FusionPoint::Early, FusionFn::Max));
        let mut net = Network::<f64>::build_seeded(&spec, 1).unwrap();
        let x = random_batch(&spec, 2, 2);
        let a = net.forward(&x, Mode::Eval, 0).unwrap();
        let b = net.forward(&x, Mode::Eval, 99).unwrap();
        assert_eq!(a.shape(), &[2, 5, 9, 9, 9]);
        assert_eq!(a, b);
        assert_eq!(net.predict(&x).unwrap(), a);
    }

    #[test]
    fn wrong_input_shape_is_structured_error() {
        let spec = ArchitectureSpec::tiny(Variant::Baseline);
        let mut net = Network::<f32>::build_seeded(&spec, 1).unwrap();
        let x = Tensor::zeros(&[1, 4, 25, 25, 24]);
        assert!(matches!(net.forward(&x, Mode::Eval, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = ArchitectureSpec::tiny(Variant::Baseline);
        let mut net = Network::<f64>::structure(&spec).unwrap();
        let x = random_batch(&spec, 1, 3);
        assert!(net.forward(&x, Mode::Eval, 0).unwrap().data().iter().all(|&v| v == 0.0));
        for p in net.params_mut().iter_mut() {
            if p.name == "classifier/b" {
                p.value = Tensor::from_vec(&[5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
            }
        }
        let y = net.forward(&Tensor::zeros(x.shape()), Mode::Eval, 0).unwrap();
        for c in 0..5 {
            assert!(y.index_leading(0).leading_slice(c).iter().all(|&v| v == (c + 1) as f64));
        }
    }

    #[test]
    fn backward_requires_train_forward() {
        let spec = ArchitectureSpec::tiny(Variant::Baseline);
        let mut net = Network::<f64>::build_seeded(&spec, 1).unwrap();
        let g = Tensor::zeros(&[1, 5, 9, 9, 9]);
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
        let x = random_batch(&spec, 1, 4);
        net.forward(&x, Mode::Eval, 0).unwrap();
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
        net.forward(&x, Mode::Train, 0).unwrap();
        net.backward(&g).unwrap();
        assert!(net.params().iter().all(|p| p.grad.data().iter().all(|&v| v == 0.0)));
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn buffers_are_overwritten_not_accumulated() {
        let spec = ArchitectureSpec::tiny(fused(FusionPoint::Late, FusionFn::Sum));
        let mut net = Network::<f64>::build_seeded(&spec, 5).unwrap();
        let x = random_batch(&spec, 2, 6);
        let labels = vec![LabelVolume::zeros(&[9, 9, 9]); 2];
        net.loss_and_grad(&x, &labels, 1).unwrap();
        let first: Vec<Tensor<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
        net.loss_and_grad(&x, &labels, 1).unwrap();
        for (p, g) in net.params().iter().zip(&first) {
            assert_eq!(&p.grad, g);
        }
    }

    #[test]
    fn separate_forward_backward_matches_fused_loss_and_grad() {
        let spec = ArchitectureSpec::tiny(fused(FusionPoint::Middle, FusionFn::Conv));
        let mut net = Network::<f64>::build_seeded(&spec, 7).unwrap();
        let x = random_batch(&spec, 2, 8);
        let labels: Vec<LabelVolume> = (0..2)
            .map(|i| LabelVolume::new(&[9, 9, 9], (0..729).map(|v| ((v + i) % 5) as u8).collect()).unwrap())
            .collect();
        let loss = net.loss_and_grad(&x, &labels, 3).unwrap();
        let fused_grads: Vec<Tensor<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();

        let logits = net.forward(&x, Mode::Train, 3).unwrap();
        let mut total = 0.0;
        let mut grads = Vec::new();
        for (i, lab) in labels.iter().enumerate() {
            let (l, g) = softmax_cross_entropy(&logits.index_leading(i), lab).unwrap();
            total += l;
            grads.push(g.scale(0.5));
        }
        let refs: Vec<&Tensor<f64>> = grads.iter().collect();
        net.backward(&Tensor::stack(&refs).unwrap()).unwrap();
        assert!((total / 2.0 - loss).abs() < 1e-14);
        for (p, g) in net.params().iter().zip(&fused_grads) {
            assert_eq!(&p.grad, g, "{}", p.name);
        }
    }
}
