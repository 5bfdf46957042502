//! Resolved run configuration: defaults, then `--config` JSON, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use modalfuse::{ArchitectureSpec, Error, FusionFn, FusionPoint, FusionSpec, TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum PointArg {
    #[default]
    None,
    Early,
    Middle,
    Late,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FnArg {
    Max,
    Sum,
    Conv,
}

/// Named channel presets. `standard` is the full network, `tiny` the narrow
/// one used for checks and desk-scale experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Width {
    #[default]
    Standard,
    Tiny,
}

pub fn variant_of(point: PointArg, function: Option<FnArg>) -> Result<Variant, Error> {
    let point = match point {
        PointArg::None => {
            return match function {
                None => Ok(Variant::Baseline),
                Some(_) => Err(Error::Config("--fusion-fn requires --fusion-point other than none".into())),
            }
        }
        PointArg::Early => FusionPoint::Early,
        PointArg::Middle => FusionPoint::Middle,
        PointArg::Late => FusionPoint::Late,
    };
    let function = match function {
        Some(FnArg::Max) => FusionFn::Max,
        Some(FnArg::Sum) => FusionFn::Sum,
        Some(FnArg::Conv) => FusionFn::Conv,
        None => return Err(Error::Config(format!("--fusion-point {} needs --fusion-fn", point.as_str()))),
    };
    Ok(Variant::Fused(FusionSpec::new(point, function)))
}

/// Directory name of one run, e.g. `late-conv-seed3` or `none-none-seed0`.
pub fn run_name(variant: Variant, seed: u64) -> String {
    format!("{}-{}-seed{seed}", variant.point_label(), variant.function_label())
}

/// Architecture flags. Every field is optional so that unset flags leave
/// config-file values alone.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct ArchFlags {
    /// Channel preset.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<Width>,
    /// Eight comma-separated conv channel counts, overriding the preset.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<usize>>,
    /// Comma-separated dense layer widths, overriding the preset.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv_dropout: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct VariantFlags {
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_point: Option<PointArg>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_fn: Option<FnArg>,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patches_per_epoch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tumor_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_patches: Option<usize>,
    /// Keep a checkpoint for every epoch (true/false).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub save_epoch_checkpoints: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct DataFlags {
    /// Dataset manifest, or a directory holding `manifest.jsonl`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Held-out patients; defaults to a fifth of the dataset.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_count: Option<usize>,
}

/// Everything a training run needs, as written to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub fusion_point: PointArg,
    pub fusion_fn: Option<FnArg>,
    pub width: Width,
    pub channels: Vec<usize>,
    pub dense: Vec<usize>,
    pub conv_dropout: f64,
    pub dense_dropout: f64,
    pub data: Option<PathBuf>,
    pub test_count: Option<usize>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunKeys {
    fusion_point: Option<PointArg>,
    fusion_fn: Option<FnArg>,
    width: Option<Width>,
    channels: Option<Vec<usize>>,
    dense: Option<Vec<usize>>,
    conv_dropout: Option<f64>,
    dense_dropout: Option<f64>,
    data: Option<PathBuf>,
    test_count: Option<usize>,
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn read_config_file(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::Config(format!("config {} must hold a JSON object", path.display())).into()),
        Err(e) => Err(Error::Config(format!("config {}: {e}", path.display())).into()),
    }
}

impl RunConfig {
    /// Merges the config file (if any) under the flags. Keys use the flag
    /// names with underscores, e.g. `learning_rate`.
    pub fn resolve(
        file: Option<&Path>,
        variant: &VariantFlags,
        arch: &ArchFlags,
        train: &TrainFlags,
        data: &DataFlags,
    ) -> anyhow::Result<Self> {
        let mut merged = match file {
            Some(p) => read_config_file(p)?,
            None => Map::new(),
        };
        for flags in [
            serde_json::to_value(variant)?,
            serde_json::to_value(arch)?,
            serde_json::to_value(train)?,
            serde_json::to_value(data)?,
        ] {
            merged.extend(object(flags));
        }
        let train_keys = object(serde_json::to_value(TrainConfig::default())?);
        let (mut train_part, mut run_part) = (Map::new(), Map::new());
        for (k, v) in merged {
            if train_keys.contains_key(&k) {
                train_part.insert(k, v);
            } else {
                run_part.insert(k, v);
            }
        }
        let keys: RunKeys = serde_json::from_value(Value::Object(run_part))
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        let train: TrainConfig = serde_json::from_value(Value::Object(train_part))
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        let width = keys.width.unwrap_or_default();
        let preset = match width {
            Width::Standard => ArchitectureSpec::standard(Variant::Baseline),
            Width::Tiny => ArchitectureSpec::tiny(Variant::Baseline),
        };
        let config = RunConfig {
            fusion_point: keys.fusion_point.unwrap_or_default(),
            fusion_fn: keys.fusion_fn,
            width,
            channels: keys.channels.unwrap_or(preset.block_channels),
            dense: keys.dense.unwrap_or(preset.dense_channels),
            conv_dropout: keys.conv_dropout.unwrap_or(preset.conv_dropout),
            dense_dropout: keys.dense_dropout.unwrap_or(preset.dense_dropout),
            data: keys.data,
            test_count: keys.test_count,
            train,
        };
        config.train.validate()?;
        config.spec()?;
        Ok(config)
    }

    pub fn variant(&self) -> Result<Variant, Error> {
        variant_of(self.fusion_point, self.fusion_fn)
    }

    pub fn spec(&self) -> Result<ArchitectureSpec, Error> {
        self.spec_for(self.variant()?)
    }

    pub fn spec_for(&self, variant: Variant) -> Result<ArchitectureSpec, Error> {
        let spec = ArchitectureSpec {
            block_channels: self.channels.clone(),
            dense_channels: self.dense.clone(),
            conv_dropout: self.conv_dropout,
            dense_dropout: self.dense_dropout,
            ..ArchitectureSpec::standard(variant)
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The same configuration pinned to another variant.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let (fusion_point, fusion_fn) = match variant {
            Variant::Baseline => (PointArg::None, None),
            Variant::Fused(f) => (
                match f.point {
                    FusionPoint::Early => PointArg::Early,
                    FusionPoint::Middle => PointArg::Middle,
                    FusionPoint::Late => PointArg::Late,
                },
                Some(match f.function {
                    FusionFn::Max => FnArg::Max,
                    FusionFn::Sum => FnArg::Sum,
                    FusionFn::Conv => FnArg::Conv,
                }),
            ),
        };
        RunConfig {
            fusion_point,
            fusion_fn,
            ..self.clone()
        }
    }

    pub fn data_path(&self) -> anyhow::Result<&Path> {
        match &self.data {
            Some(p) => Ok(p),
            None => bail!(Error::Config("--data is required".into())),
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
