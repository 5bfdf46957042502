//! Adam and the epoch loop.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::checkpoint::save_checkpoint;
use crate::data::{batch_of, PatchSample, PatchSampler};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::Network;
use crate::nn::{argmax_classes, penalties, regularization, softmax_cross_entropy, ParamRegistry};
use crate::rng::{self, derive_seed, Stream};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l1: f64,
    pub l2: f64,
    pub seed: u64,
    pub patches_per_epoch: usize,
    /// Share of training patches centred on tumour voxels.
    pub tumor_fraction: f64,
    /// Patches drawn once from the test patients for per-epoch evaluation.
    pub eval_patches: usize,
    pub save_epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 50,
            batch_size: 32,
            l1: 1e-6,
            l2: 1e-4,
            seed: 0,
            patches_per_epoch: 4000,
            tumor_fraction: 0.5,
            eval_patches: 400,
            save_epoch_checkpoints: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        for (name, v) in [("l1", self.l1), ("l2", self.l2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 || self.patches_per_epoch == 0 {
            return Err(Error::Config("batch_size and patches_per_epoch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tumor_fraction) {
            return Err(Error::Config(format!(
                "tumor_fraction must lie in [0, 1], got {}",
                self.tumor_fraction
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamRegistry<T>) -> Self {
        AdamState {
            m: params.grad_buffers(),
            v: params.grad_buffers(),
            t: 0,
        }
    }

    /// One Adam update from the registry's gradient buffers. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamRegistry<T>, cfg: &AdamConfig) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, registry has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if self.m[i].shape() != p.value.shape() {
                return Err(Error::shape("adam step", self.m[i].shape(), p.value.shape()));
            }
            if let Some(j) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at flat index {j} is {:?}",
                    p.name,
                    p.grad.data()[j]
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                let g = g.as_f64();
                let mn = b1 * m.as_f64() + (1.0 - b1) * g;
                let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = T::from_f64_lossy(mn);
                *v = T::from_f64_lossy(vn);
                let update = cfg.learning_rate * (mn / c1) / ((vn / c2).sqrt() + cfg.epsilon);
                *w = T::from_f64_lossy(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Where training patches come from.
pub trait PatchSource: Sync {
    /// Patches in one epoch given the configured `patches_per_epoch`.
    fn epoch_len(&self, requested: usize) -> usize;
    /// Patches `start..start + len` of epoch `epoch`.
    fn batch(&self, seed: u64, epoch: usize, start: usize, len: usize) -> Result<Vec<PatchSample>>;
}

/// A fixed patch set, reshuffled each epoch. An epoch is one pass.
#[derive(Debug, Clone)]
pub struct FixedPatches(pub Vec<PatchSample>);

impl PatchSource for FixedPatches {
    fn epoch_len(&self, _requested: usize) -> usize {
        self.0.len()
    }

    fn batch(&self, seed: u64, epoch: usize, start: usize, len: usize) -> Result<Vec<PatchSample>> {
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.shuffle(&mut rng::stream(seed, Stream::Shuffle, &[epoch as u64]));
        Ok(order[start..(start + len).min(order.len())]
            .iter()
            .map(|&i| self.0[i].clone())
            .collect())
    }
}

/// Fresh patches drawn from whole patients for every batch.
#[derive(Debug)]
pub struct SampledPatches<'a>(pub PatchSampler<'a>);

impl PatchSource for SampledPatches<'_> {
    fn epoch_len(&self, requested: usize) -> usize {
        requested
    }

    fn batch(&self, seed: u64, epoch: usize, start: usize, len: usize) -> Result<Vec<PatchSample>> {
        let mut rng = rng::stream(seed, Stream::Sampling, &[epoch as u64, start as u64]);
        self.0.sample_many(len, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seed: u64,
    /// Mean training cross-entropy over the epoch's batches.
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub test_loss: f64,
    pub dice: f64,
    pub accuracy: f64,
    pub per_class_dice: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub seed: u64,
    /// Eval-mode training loss of the initial network.
    pub initial_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dice: Option<f64>,
    pub halted: Option<String>,
}

impl TrainingLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainingLog,
    /// Parameter values of the best-dice epoch.
    pub best: Option<Vec<Tensor<f32>>>,
}

/// Mean eval-mode cross-entropy and pooled metrics over `samples`.
pub fn evaluate_patches(
    net: &Network<f32>,
    samples: &[PatchSample],
    batch_size: usize,
) -> Result<(f64, EvalReport)> {
    let mut report = EvalReport::new(net.spec().classes);
    let mut loss = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (batch, labels) = batch_of(chunk)?;
        let logits = net.predict(&batch)?;
        for (i, label) in labels.iter().enumerate() {
            let l = logits.index_leading(i);
            loss += softmax_cross_entropy(&l, label)?.0;
            report.add(&argmax_classes(&l)?, label)?;
        }
    }
    Ok((loss / samples.len().max(1) as f64, report))
}

struct RunFiles {
    log: File,
}

impl RunFiles {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train_log.jsonl");
        let log = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RunFiles { log })
    }

    fn append(&mut self, dir: &Path, record: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serialises");
        writeln!(self.log, "{line}").map_err(|e| Error::io(dir.join("train_log.jsonl"), e))
    }
}

fn write_summary(dir: &Path, log: &TrainingLog) -> Result<()> {
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(log).expect("log serialises");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Trains for `config.epochs` epochs. See [`train_with`].
pub fn train(
    net: &mut Network<f32>,
    source: &dyn PatchSource,
    test: &[PatchSample],
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with(net, source, test, config, out, &mut |_| true)
}

/// The epoch loop. After every epoch the network is evaluated on `test`,
/// the record is appended to `<out>/train_log.jsonl`, and `<out>/epoch<k>.ckpt`
/// and `<out>/best.ckpt` (best whole-tumour dice, earliest on ties) are
/// written. `on_epoch` returning false ends training after that epoch.
///
/// A non-finite loss or gradient stops training before the offending
/// update; the untouched parameters go to `<out>/last-good.ckpt` and a
/// [`Error::NonFinite`] is returned.
pub fn train_with(
    net: &mut Network<f32>,
    source: &dyn PatchSource,
    test: &[PatchSample],
    config: &TrainConfig,
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    let epoch_len = source.epoch_len(config.patches_per_epoch);
    if epoch_len == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    if test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let mut files = match out {
        Some(dir) => Some(RunFiles::open(dir)?),
        None => None,
    };
    let mut log = TrainingLog {
        seed: config.seed,
        ..Default::default()
    };
    let mut best = None;
    let adam = config.adam();
    let mut state = AdamState::new(net.params());
    let bs = config.batch_size;

    if config.epochs > 0 {
        let first = source.batch(config.seed, 1, 0, epoch_len.min(bs))?;
        log.initial_loss = Some(evaluate_patches(net, &first, bs)?.0);
    }

    let halt = |net: &Network<f32>, log: &mut TrainingLog, msg: String| -> Result<TrainOutcome> {
        log.halted = Some(msg.clone());
        if let Some(dir) = out {
            save_checkpoint(net, &dir.join("last-good.ckpt"))?;
            write_summary(dir, log)?;
        }
        Err(Error::NonFinite(msg))
    };

    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (step, start) in (0..epoch_len).step_by(bs).enumerate() {
            let len = bs.min(epoch_len - start);
            let samples = source.batch(config.seed, epoch, start, len)?;
            let (batch, labels) = batch_of(&samples)?;
            let dropout_seed = derive_seed(config.seed, Stream::Dropout, &[epoch as u64, step as u64]);
            let loss = net.loss_and_grad(&batch, &labels, dropout_seed)?;
            if !loss.is_finite() {
                return halt(net, &mut log, format!("epoch {epoch} step {step}: loss is {loss}"));
            }
            regularization(net.params_mut(), config.l1, config.l2);
            if let Err(Error::NonFinite(m)) = state.step(net.params_mut(), &adam) {
                return halt(net, &mut log, format!("epoch {epoch} step {step}: {m}"));
            }
            loss_sum += loss;
            batches += 1;
        }
        let (l1, l2) = penalties(net.params());
        let data_loss = loss_sum / batches as f64;
        let (test_loss, report) = evaluate_patches(net, test, bs)?;
        let record = EpochRecord {
            epoch,
            seed: config.seed,
            loss: data_loss,
            l1,
            l2,
            total: data_loss + config.l1 * l1 + config.l2 * l2,
            test_loss,
            dice: report.dice_whole_tumor,
            accuracy: report.accuracy,
            per_class_dice: report.per_class_dice.clone(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} test dice {:.4} accuracy {:.4}",
            record.loss,
            record.dice,
            record.accuracy
        );
        let improved = log.best_dice.map_or(true, |b| record.dice > b);
        if improved {
            log.best_dice = Some(record.dice);
            log.best_epoch = Some(epoch);
            best = Some(net.params().values());
        }
        if let (Some(dir), Some(files)) = (out, files.as_mut()) {
            files.append(dir, &record)?;
            if config.save_epoch_checkpoints {
                save_checkpoint(net, &dir.join(format!("epoch{epoch}.ckpt")))?;
            }
            if improved {
                save_checkpoint(net, &dir.join("best.ckpt"))?;
            }
        }
        let go_on = on_epoch(&record);
        log.epochs.push(record);
        if !go_on {
            break;
        }
    }
    if let Some(dir) = out {
        write_summary(dir, &log)?;
    }
    Ok(TrainOutcome { log, best })
}
