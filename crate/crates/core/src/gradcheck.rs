//! Finite-difference verification of every analytic gradient, at f64.
//!
//! Each component builds a small random instance, computes its analytic
//! gradient, and compares selected coordinates (and, for whole networks, a
//! few random directions) against central differences. The error measure is
//! `|a - n| / max(|a|, |n|, FLOOR)`; the floor stops gradients that are zero
//! up to rounding from producing meaningless ratios.
//!
//! Whole-network losses are only piecewise smooth: rectifiers and max fusion
//! switch between linear pieces. A central difference whose two evaluations
//! fall on different pieces measures a secant across the kink, not the
//! derivative, so such probes are detected by comparing switching patterns
//! and replaced by fresh ones. The number replaced is reported.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_conv, fuse_conv_backward, fuse_max, fuse_max_backward, fuse_sum, fuse_sum_backward};
use crate::labels::LabelVolume;
use crate::model::{ArchitectureSpec, Mode, Network, Variant};
use crate::nn::{
    activation_backward, activation_forward, dropout_apply, dropout_forward, penalties, regularization,
    softmax_cross_entropy, ParamKind, ParamRegistry,
};
use crate::rng::{self, Rng, Stream};
use crate::tensor::{conv3d_backward, conv3d_valid, ConvKernel, Tensor};

/// Default pass threshold on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-6;
/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Fresh draws allowed per whole-network probe before it counts as skipped.
const KINK_RETRIES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    /// Component names or prefixes to run; empty runs everything.
    pub only: Vec<String>,
    /// Component whose analytic gradient is deliberately corrupted.
    pub fault: Option<String>,
    pub seed: u64,
    pub tolerance: f64,
    /// Coordinates probed per parameter tensor in whole-network checks.
    pub coords_per_tensor: usize,
    /// Random directions probed per whole-network check.
    pub directions: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            only: Vec::new(),
            fault: None,
            seed: 0,
            tolerance: TOLERANCE,
            coords_per_tensor: 3,
            directions: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub component: String,
    pub worst_rel_error: f64,
    /// Where the worst error occurred, e.g. `weights[17]`.
    pub worst_at: String,
    pub checks: usize,
    /// Probes that straddled a kink on every draw and were left out.
    #[serde(default)]
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.worst_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(
                f,
                "{} {:<22} worst {:.3e} at {} ({} checks{})",
                if r.passed { "PASS" } else { "FAIL" },
                r.component,
                r.worst_rel_error,
                r.worst_at,
                r.checks,
                if r.skipped > 0 { format!(", {} skipped at kinks", r.skipped) } else { String::new() }
            )?;
        }
        write!(
            f,
            "{} of {} components passed, worst relative error {:.3e} (tolerance {:.0e})",
            self.results.iter().filter(|r| r.passed).count(),
            self.results.len(),
            self.worst(),
            self.tolerance
        )
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Running worst error of one component.
#[derive(Debug)]
struct Tally {
    worst: f64,
    at: String,
    checks: usize,
    skipped: usize,
    corrupt: bool,
}

impl Tally {
    fn new(corrupt: bool) -> Self {
        Tally {
            worst: 0.0,
            at: "-".into(),
            checks: 0,
            skipped: 0,
            corrupt,
        }
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let analytic = if self.corrupt { analytic * 1.5 + 1e-3 } else { analytic };
        let e = rel_error(analytic, numeric);
        self.checks += 1;
        if e > self.worst || e.is_nan() {
            self.worst = if e.is_nan() { f64::INFINITY } else { e };
            self.at = what();
        }
    }

    fn finish(self, component: &str, tolerance: f64) -> CheckResult {
        CheckResult {
            component: component.to_string(),
            worst_rel_error: self.worst,
            worst_at: self.at,
            checks: self.checks,
            skipped: self.skipped,
            passed: self.worst < tolerance && self.checks > 0,
        }
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values kept at least `gap` away from zero.
fn away_from_zero(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Checks `analytic` against central differences of `f` at `x`.
fn probe_tensor(
    tally: &mut Tally,
    label: &str,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    idx: &[usize],
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<()> {
    for &i in idx {
        let mut plus = x.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= STEP;
        let numeric = (f(&plus)? - f(&minus)?) / (2.0 * STEP);
        tally.record(|| format!("{label}[{i}]"), analytic.data()[i], numeric);
    }
    Ok(())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

type Check = fn(&mut Rng, &mut Tally, &GradcheckOptions) -> Result<()>;

fn check_conv(rng: &mut Rng, tally: &mut Tally, k: usize) -> Result<()> {
    for _ in 0..3 {
        let ci = rng.random_range(1..=3);
        let co = rng.random_range(1..=3);
        let ext: Vec<usize> = (0..3).map(|_| rng.random_range(k..=5)).collect();
        let x = uniform(rng, &[ci, ext[0], ext[1], ext[2]], -1.0, 1.0);
        let kernel = ConvKernel::new(uniform(rng, &[co, ci, k, k, k], -1.0, 1.0), uniform(rng, &[co], -1.0, 1.0))?;
        let y = conv3d_valid(&x, &kernel)?;
        let c = uniform(rng, y.shape(), -1.0, 1.0);
        let g = conv3d_backward(&x, &kernel, &c)?;
        let n = x.len();
        probe_tensor(tally, "input", &x, &g.input, &(0..n).collect::<Vec<_>>(), &mut |xp| {
            Ok(dot(&conv3d_valid(xp, &kernel)?, &c))
        })?;
        let w = kernel.weights.clone();
        probe_tensor(tally, "weights", &w, &g.weights, &(0..w.len()).collect::<Vec<_>>(), &mut |wp| {
            let kk = ConvKernel::new(wp.clone(), kernel.bias.clone())?;
            Ok(dot(&conv3d_valid(&x, &kk)?, &c))
        })?;
        let b = kernel.bias.clone();
        probe_tensor(tally, "bias", &b, &g.bias, &(0..b.len()).collect::<Vec<_>>(), &mut |bp| {
            let kk = ConvKernel::new(kernel.weights.clone(), bp.clone())?;
            Ok(dot(&conv3d_valid(&x, &kk)?, &c))
        })?;
    }
    Ok(())
}

fn check_conv3(rng: &mut Rng, tally: &mut Tally, _: &GradcheckOptions) -> Result<()> {
    check_conv(rng, tally, 3)
}

fn check_conv1(rng: &mut Rng, tally: &mut Tally, _: &GradcheckOptions) -> Result<()> {
    check_conv(rng, tally, 1)
}

fn check_activation(rng: &mut Rng, tally: &mut Tally, _: &GradcheckOptions) -> Result<()> {
    let x = away_from_zero(rng, &[2, 3, 3, 3], 0.05);
    let c = uniform(rng, x.shape(), -1.0, 1.0);
    let g = activation_backward(&activation_forward(&x), &c)?;
    let all: Vec<usize> = (0..x.len()).collect();
    probe_tensor(tally, "input", &x, &g, &all, &mut |xp| Ok(dot(&activation_forward(xp), &c)))
}

fn check_dropout(rng: &mut Rng, tally: &mut Tally, _: &GradcheckOptions) -> Result<()> {
    let x = uniform(rng, &[3, 4, 4, 4], -1.0, 1.0);
    let (_, mask) = dropout_forward(&x, 0.3, Mode::Train, rng)?;
    let c = uniform(rng, x.shape(), -1.0, 1.0);
    let g = dropout_apply(&c, &mask)?;
    let all: Vec<usize> = (0..x.len()).collect();
    probe_tensor(tally, "input", &x, &g, &all, &mut |xp| Ok(dot(&dropout_apply(xp, &mask)?, &c)))
}

fn check_cross_entropy(rng: &mut Rng, tally: &mut Tally, _: &GradcheckOptions) -> Result<()> {
    let logits = uniform(rng, &[5, 3, 3, 3], -3.0, 3.0);
    let labels = LabelVolume::new(&[3, 3, 3], (0..27).map(|_| rng.random_range(0..5u8)).collect())?;
    let (_, g) = softmax_cross_entropy(&logits, &labels)?;
    let all: Vec<usize> = (0..logits.len()).collect();
    probe_tensor(tally, "logits", &logits, &g, &all, &mut |lp| Ok(softmax_cross_entropy(lp, &labels)?.0))
}

fn check_regularization(rng: &mut Rng, tally: &mut Tally, _: &GradcheckOptions) -> Result<()> {
    let (l1c, l2c) = (0.3, 0.7);
    let mut reg = ParamRegistry::new();
    let w = reg.register("w".into(), ParamKind::Weight, away_from_zero(rng, &[2, 1, 3, 3, 3], 0.05))?;
    reg.register("b".into(), ParamKind::Bias, uniform(rng, &[2], -1.0, 1.0))?;
    regularization(&mut reg, l1c, l2c);
    let x = reg.value(w).clone();
    let g = reg.get(w).grad.clone();
    let all: Vec<usize> = (0..x.len()).collect();
    probe_tensor(tally, "weights", &x, &g, &all, &mut |wp| {
        let mut r = ParamRegistry::new();
        r.register("w".into(), ParamKind::Weight, wp.clone())?;
        let (l1, l2) = penalties(&r);
        Ok(l1c * l1 + l2c * l2)
    })
}

fn fusion_instance(rng: &mut Rng) -> (Tensor<f64>, Tensor<f64>) {
    let (n, c) = (4, 3);
    let s = uniform(rng, &[n, c, 3, 3, 3], -1.0, 1.0);
    let cot = uniform(rng, &[c, 3, 3, 3], -1.0, 1.0);
    (s, cot)
}

fn check_fuse_max(rng: &mut Rng, tally: &mut Tally, _: &GradcheckOptions) -> Result<()> {
    let (s, c) = fusion_instance(rng);
    let (_, routing) = fuse_max(&s)?;
    let g = fuse_max_backward(&routing, &c)?;
    // Continuous draws make ties (where max is not differentiable) measure zero.
    let all: Vec<usize> = (0..s.len()).collect();
    probe_tensor(tally, "streams", &s, &g, &all, &mut |sp| Ok(dot(&fuse_max(sp)?.0, &c)))
}

fn check_fuse_sum(rng: &mut Rng, tally: &mut Tally, _: &GradcheckOptions) -> Result<()> {
    let (s, c) = fusion_instance(rng);
    let g = fuse_sum_backward(4, &c)?;
    let all: Vec<usize> = (0..s.len()).collect();
    probe_tensor(tally, "streams", &s, &g, &all, &mut |sp| Ok(dot(&fuse_sum(sp)?, &c)))
}

fn check_fuse_conv(rng: &mut Rng, tally: &mut Tally, _: &GradcheckOptions) -> Result<()> {
    let (s, c) = fusion_instance(rng);
    let kernel = ConvKernel::new(uniform(rng, &[3, 12, 1, 1, 1], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0))?;
    let (gs, gw, gb) = fuse_conv_backward(&s, &kernel, &c)?;
    let all = |t: &Tensor<f64>| (0..t.len()).collect::<Vec<_>>();
    probe_tensor(tally, "streams", &s, &gs, &all(&s), &mut |sp| Ok(dot(&fuse_conv(sp, &kernel)?, &c)))?;
    probe_tensor(tally, "weights", &kernel.weights, &gw, &all(&kernel.weights), &mut |wp| {
        Ok(dot(&fuse_conv(&s, &ConvKernel::new(wp.clone(), kernel.bias.clone())?)?, &c))
    })?;
    probe_tensor(tally, "bias", &kernel.bias, &gb, &all(&kernel.bias), &mut |bp| {
        Ok(dot(&fuse_conv(&s, &ConvKernel::new(kernel.weights.clone(), bp.clone())?)?, &c))
    })
}

/// Central difference of the loss along `shift`, or `None` when the two
/// evaluations leave the smooth piece containing the base point.
fn smooth_difference(
    net: &mut Network<f64>,
    batch: &Tensor<f64>,
    labels: &[LabelVolume],
    seed: u64,
    base_pattern: &[u8],
    shift: &mut dyn FnMut(&mut Network<f64>, f64) -> Result<()>,
) -> Result<Option<f64>> {
    let mut side = |sign: f64, net: &mut Network<f64>| -> Result<Option<f64>> {
        shift(net, sign)?;
        let (loss, pattern) = net.loss_and_pattern(batch, labels, Mode::Train, seed)?;
        Ok((pattern == base_pattern).then_some(loss))
    };
    let plus = side(1.0, net)?;
    let minus = side(-1.0, net)?;
    shift(net, 0.0)?;
    Ok(match (plus, minus) {
        (Some(p), Some(m)) => Some((p - m) / (2.0 * STEP)),
        _ => None,
    })
}

/// Whole-network check of the mean batch cross-entropy of a tiny variant in
/// train mode with frozen dropout masks.
fn check_network(variant: Variant, rng: &mut Rng, tally: &mut Tally, opts: &GradcheckOptions) -> Result<()> {
    let spec = ArchitectureSpec::tiny(variant);
    let mut net = Network::<f64>::build(&spec, rng)?;
    for p in net.params_mut().iter_mut().filter(|p| p.kind == ParamKind::Bias) {
        p.value = Tensor::from_fn(p.value.shape(), |_| rng.random_range(-0.1..0.1));
    }
    let b = 2;
    let mut shape = vec![b];
    shape.extend_from_slice(&spec.input_shape());
    let batch = uniform(rng, &shape, 0.0, 1.0);
    let labels: Vec<LabelVolume> = (0..b)
        .map(|_| LabelVolume::new(&[9, 9, 9], (0..729).map(|_| rng.random_range(0..5u8)).collect()))
        .collect::<Result<_>>()?;
    let seed = rng.random::<u64>();
    net.loss_and_grad(&batch, &labels, seed)?;
    let grads: Vec<Tensor<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
    let (_, base_pattern) = net.loss_and_pattern(&batch, &labels, Mode::Train, seed)?;

    for (pi, name) in names.iter().enumerate() {
        let len = grads[pi].len();
        let wanted = opts.coords_per_tensor.min(len);
        let mut tried = std::collections::HashSet::new();
        let mut done = 0;
        while done < wanted {
            let fresh: Vec<usize> = (0..len).filter(|i| !tried.contains(i)).collect();
            if fresh.is_empty() || tried.len() >= wanted + KINK_RETRIES {
                tally.skipped += wanted - done;
                break;
            }
            let i = fresh[rng.random_range(0..fresh.len())];
            tried.insert(i);
            let base = net.params().iter().nth(pi).unwrap().value.data()[i];
            let mut shift = |net: &mut Network<f64>, sign: f64| -> Result<()> {
                net.params_mut().iter_mut().nth(pi).unwrap().value.data_mut()[i] = base + sign * STEP;
                Ok(())
            };
            if let Some(numeric) = smooth_difference(&mut net, &batch, &labels, seed, &base_pattern, &mut shift)? {
                tally.record(|| format!("{name}[{i}]"), grads[pi].data()[i], numeric);
                done += 1;
            }
        }
    }

    let originals = net.params().values();
    for d in 0..opts.directions {
        let mut measured = false;
        for _ in 0..=KINK_RETRIES {
            let dirs: Vec<Tensor<f64>> = originals.iter().map(|t| uniform(rng, t.shape(), -1.0, 1.0)).collect();
            let norm = dirs.iter().map(|t| dot(t, t)).sum::<f64>().sqrt();
            let analytic: f64 = grads.iter().zip(&dirs).map(|(g, u)| dot(g, u)).sum::<f64>() / norm;
            let mut shift = |net: &mut Network<f64>, sign: f64| -> Result<()> {
                let vals: Vec<Tensor<f64>> = originals
                    .iter()
                    .zip(&dirs)
                    .map(|(w, u)| Tensor::from_fn(w.shape(), |k| w.data()[k] + sign * STEP * u.data()[k] / norm))
                    .collect();
                net.params_mut().restore_values(&vals)
            };
            if let Some(numeric) = smooth_difference(&mut net, &batch, &labels, seed, &base_pattern, &mut shift)? {
                tally.record(|| format!("direction{d}"), analytic, numeric);
                measured = true;
                break;
            }
        }
        if !measured {
            tally.skipped += 1;
        }
    }
    net.params_mut().restore_values(&originals)?;
    Ok(())
}

/// Every component name, in run order.
pub fn components() -> Vec<String> {
    let mut names: Vec<String> = [
        "tensor/conv3d",
        "tensor/conv1x1",
        "nn/activation",
        "nn/dropout",
        "nn/cross-entropy",
        "nn/regularization",
        "fusion/max",
        "fusion/sum",
        "fusion/conv",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend(Variant::all().iter().map(|v| format!("model/{v}")));
    names
}

fn layer_check(name: &str) -> Option<Check> {
    Some(match name {
        "tensor/conv3d" => check_conv3,
        "tensor/conv1x1" => check_conv1,
        "nn/activation" => check_activation,
        "nn/dropout" => check_dropout,
        "nn/cross-entropy" => check_cross_entropy,
        "nn/regularization" => check_regularization,
        "fusion/max" => check_fuse_max,
        "fusion/sum" => check_fuse_sum,
        "fusion/conv" => check_fuse_conv,
        _ => return None,
    })
}

/// Whether `name` is picked by `pattern`: exact match, a `/`-prefix, or a
/// substring.
fn selected(name: &str, only: &[String]) -> bool {
    only.is_empty() || only.iter().any(|p| !p.is_empty() && name.contains(p.as_str()))
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let chosen: Vec<String> = components().into_iter().filter(|c| selected(c, &opts.only)).collect();
    if chosen.is_empty() {
        return Err(Error::Config("no checks selected".into()));
    }
    if let Some(f) = &opts.fault {
        if !components().contains(f) {
            return Err(Error::Config(format!("unknown fault target {f:?}")));
        }
    }
    let variants = Variant::all();
    let all = components();
    let mut results = Vec::with_capacity(chosen.len());
    for name in &chosen {
        // Seeded by position in the full list so a filtered run repeats the
        // same probes as the full one.
        let k = all.iter().position(|c| c == name).expect("chosen from the list");
        let mut rng = rng::stream(opts.seed, Stream::Eval, &[k as u64]);
        let mut tally = Tally::new(opts.fault.as_deref() == Some(name.as_str()));
        if let Some(check) = layer_check(name) {
            check(&mut rng, &mut tally, opts)?;
        } else {
            let v = variants
                .iter()
                .find(|v| format!("model/{v}") == *name)
                .expect("component list and variants agree");
            check_network(*v, &mut rng, &mut tally, opts)?;
        }
        log::info!("gradcheck {name}: worst {:.3e}", tally.worst);
        results.push(tally.finish(name, opts.tolerance));
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        results,
    })
}
