//! Subcommands of the `modalfuse` binary.
//!
//! Exit statuses: 0 success, 1 usage error, 2 data error, 3 numeric failure
//! (non-finite training or a failed gradient check).

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use clap::{Parser, Subcommand};
use modalfuse::data::{
    generate_synthetic, load_checkpoint, load_f32, predict_volume, sample_patches, split_patients, store_labels,
    DatasetManifest, Patient, PatchSampler, Split, SynthConfig, MODALITIES,
};
use modalfuse::gradcheck::{self, GradcheckOptions};
use modalfuse::optim::{train, SampledPatches};
use modalfuse::rng::{stream, Stream};
use modalfuse::{Error, ErrorKind, EvalReport, Network, TrainingLog, Variant};
use serde::{Deserialize, Serialize};

pub mod config;
pub mod table;

use config::{run_name, ArchFlags, DataFlags, RunConfig, TrainFlags, VariantFlags};
use table::{ResultRow, ResultsTable};

#[derive(Debug, Parser)]
#[command(name = "modalfuse", version, about = "Multi-modal 3D CNN segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-modal dataset.
    Synth(SynthArgs),
    /// Train one variant.
    Train(TrainArgs),
    /// Segment whole volumes with a checkpoint and score them.
    Eval(EvalArgs),
    /// Segment one patient's volumes.
    Predict(PredictArgs),
    /// Print per-layer parameter counts.
    Params(ParamsArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Train the baseline and all nine fused variants and tabulate them.
    Matrix(MatrixArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub patients: usize,
    /// Volume extent as D,H,W.
    #[arg(long, value_delimiter = ',', default_values_t = [48, 48, 48])]
    pub shape: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// JSON file with the same keys as the flags; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parent of the run directory `<point>-<fn>-seed<k>`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub variant: VariantFlags,
    #[command(flatten)]
    pub arch: ArchFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
}

#[derive(Debug, clap::Args)]
pub struct MatrixArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Holds one run directory per cell plus `results.txt` and `results.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel_runs: usize,
    #[command(flatten)]
    pub arch: ArchFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest or its directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Split seed; with `--test-count` selects the same held-out patients as training.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Score every patient instead of the held-out ones.
    #[arg(long)]
    pub all: bool,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding t1, t1c, t2 and flair volumes.
    #[arg(long, conflicts_with = "inputs", required_unless_present = "inputs")]
    pub patient: Option<PathBuf>,
    /// The four modality volumes in t1,t1c,t2,flair order.
    #[arg(long, value_delimiter = ',')]
    pub inputs: Option<Vec<PathBuf>>,
    /// Output volume path (stem or `.vvol.json`).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, clap::Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub variant: VariantFlags,
    #[command(flatten)]
    pub arch: ArchFlags,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    /// Run only components whose name contains this; repeatable.
    #[arg(long)]
    pub only: Vec<String>,
    /// Corrupt this component's analytic gradient (self-test of the checker).
    #[arg(long)]
    pub fault: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = gradcheck::TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 3)]
    pub coords_per_tensor: usize,
    #[arg(long, default_value_t = 2)]
    pub directions: usize,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A check that ran but did not pass.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            };
        }
        if cause.is::<NumericFailure>() {
            return 3;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

/// The error chain, leaving out causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        last = text;
    }
    out
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Params(a) => cmd_params(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Matrix(a) => cmd_matrix(&a),
    }
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    if a.shape.len() != 3 {
        return Err(Error::Config(format!("--shape needs three extents, got {}", a.shape.len())).into());
    }
    let cfg = SynthConfig {
        patients: a.patients,
        shape: [a.shape[0], a.shape[1], a.shape[2]],
        seed: a.seed,
    };
    let manifest = generate_synthetic(&a.out, &cfg)?;
    write_json(&a.out.join("synth.json"), &cfg)?;
    let (lgg, hgg) = manifest.grade_counts();
    println!("wrote {} patients ({lgg} LGG, {hgg} HGG) to {}", manifest.len(), a.out.display());
    Ok(())
}

fn manifest_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.jsonl")
    } else {
        path.to_path_buf()
    }
}

fn default_test_count(n: usize) -> usize {
    ((n + 2) / 5).max(1)
}

/// Patients of one split, loaded and normalised.
pub struct Dataset {
    pub split: Split,
    pub train: Vec<Patient>,
    pub test: Vec<Patient>,
}

impl Dataset {
    pub fn load(path: &Path, test_count: Option<usize>, seed: u64) -> anyhow::Result<Self> {
        let manifest = DatasetManifest::load(&manifest_file(path))?;
        let test_count = test_count.unwrap_or_else(|| default_test_count(manifest.len()));
        let split = split_patients(&manifest, test_count, seed)?;
        let load = |ids: &[String]| -> anyhow::Result<Vec<Patient>> {
            manifest
                .select(ids)?
                .iter()
                .map(|r| Patient::load(r).map_err(Into::into))
                .collect()
        };
        let train = load(&split.train)?;
        let test = load(&split.test)?;
        log::info!("{} training and {} test patients", train.len(), test.len());
        Ok(Dataset { split, train, test })
    }
}

/// One trained cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub name: String,
    pub params: usize,
    pub log: TrainingLog,
    /// Whole-volume scores of the best checkpoint on the test patients.
    pub test: Option<EvalReport>,
    pub failed: Option<String>,
}

/// Trains `config`'s variant on `data` into `dir`.
pub fn train_run(config: &RunConfig, data: &Dataset, dir: &Path) -> anyhow::Result<RunOutcome> {
    let spec = config.spec()?;
    let seed = config.train.seed;
    create_dir(dir)?;
    config.write(&dir.join("config.json"))?;
    write_json(&dir.join("split.json"), &data.split)?;
    let mut net = Network::<f32>::build_seeded(&spec, seed)?;
    let params = net.count_parameters().total;
    let sampler = PatchSampler::new(&data.train, config.train.tumor_fraction)?;
    let test = sample_patches(
        &data.test,
        config.train.eval_patches,
        config.train.tumor_fraction,
        &mut stream(seed, Stream::Eval, &[]),
    )?;
    let name = run_name(spec.variant, seed);
    log::info!("{name}: {params} parameters");
    match train(&mut net, &SampledPatches(sampler), &test, &config.train, Some(dir)) {
        Ok(out) => {
            let best = load_checkpoint(&dir.join("best.ckpt"))?;
            let test_patients: Vec<&Patient> = data.test.iter().collect();
            let report = evaluate_volumes(&best, &test_patients, 32)?;
            write_json(&dir.join("test_eval.json"), &report)?;
            Ok(RunOutcome {
                name,
                params,
                log: out.log,
                test: Some(report.pooled),
                failed: None,
            })
        }
        Err(Error::NonFinite(msg)) => {
            let log: TrainingLog = fs::read_to_string(dir.join("summary.json"))
                .ok()
                .and_then(|t| serde_json::from_str(&t).ok())
                .unwrap_or_default();
            Ok(RunOutcome {
                name,
                params,
                log,
                test: None,
                failed: Some(msg),
            })
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let config = RunConfig::resolve(a.config.as_deref(), &a.variant, &a.arch, &a.train, &a.data)?;
    let variant = config.variant()?;
    let data = Dataset::load(config.data_path()?, config.test_count, config.train.seed)?;
    let dir = a.out.join(run_name(variant, config.train.seed));
    let outcome = train_run(&config, &data, &dir)?;
    if let Some(msg) = &outcome.failed {
        return Err(Error::NonFinite(format!("{}: {msg}", outcome.name)).into());
    }
    match outcome.log.best() {
        Some(b) => println!(
            "{}: best epoch {} dice {:.4} accuracy {:.4} ({} parameters) -> {}",
            outcome.name,
            b.epoch,
            b.dice,
            b.accuracy,
            outcome.params,
            dir.display()
        ),
        None => println!("{}: no epochs run -> {}", outcome.name, dir.display()),
    }
    if let Some(t) = &outcome.test {
        println!("{}: test volumes dice {:.4} accuracy {:.4}", outcome.name, t.dice_whole_tumor, t.accuracy);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeScore {
    pub id: String,
    pub dice: f64,
    pub accuracy: f64,
}

/// Per-patient and pooled scores of full-volume predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeEval {
    pub patients: Vec<VolumeScore>,
    pub pooled: EvalReport,
}

pub fn evaluate_volumes(net: &Network<f32>, patients: &[&Patient], batch_size: usize) -> anyhow::Result<VolumeEval> {
    let classes = net.spec().classes;
    let mut pooled = EvalReport::new(classes);
    let mut scores = Vec::new();
    for p in patients {
        let pred = predict_volume(net, &p.image, batch_size)?;
        let r = EvalReport::from_pair(&pred, &p.label, classes)?;
        pooled.merge(&r);
        scores.push(VolumeScore {
            id: p.id.clone(),
            dice: r.dice_whole_tumor,
            accuracy: r.accuracy,
        });
    }
    Ok(VolumeEval { patients: scores, pooled })
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    checkpoint: PathBuf,
    #[serde(flatten)]
    eval: VolumeEval,
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let net = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.data, a.test_count, a.seed)?;
    let patients: Vec<&Patient> = if a.all {
        data.train.iter().chain(&data.test).collect()
    } else {
        data.test.iter().collect()
    };
    let eval = evaluate_volumes(&net, &patients, a.batch_size)?;
    for s in &eval.patients {
        println!("{:<12} dice {:.4} accuracy {:.4}", s.id, s.dice, s.accuracy);
    }
    println!("{:<12} dice {:.4} accuracy {:.4}", "pooled", eval.pooled.dice_whole_tumor, eval.pooled.accuracy);
    if let Some(out) = &a.out {
        write_json(
            out,
            &EvalOutput {
                checkpoint: a.checkpoint.clone(),
                eval,
            },
        )?;
    }
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs) -> anyhow::Result<()> {
    let net = load_checkpoint(&a.checkpoint)?;
    let paths: Vec<PathBuf> = match (&a.patient, &a.inputs) {
        (Some(dir), _) => MODALITIES.iter().map(|m| dir.join(m)).collect(),
        (None, Some(list)) if list.len() == MODALITIES.len() => list.clone(),
        (None, Some(list)) => {
            return Err(Error::Config(format!("--inputs needs {} volumes, got {}", MODALITIES.len(), list.len())).into())
        }
        (None, None) => return Err(Error::Config("need --patient or --inputs".into()).into()),
    };
    let volumes = paths.iter().map(|p| load_f32(p)).collect::<modalfuse::Result<Vec<_>>>()?;
    let shape = volumes[0].shape().to_vec();
    let patient = Patient::new(
        "predict".into(),
        modalfuse::data::Grade::Hgg,
        &volumes,
        modalfuse::LabelVolume::zeros(&shape),
    )?;
    let labels = predict_volume(&net, &patient.image, a.batch_size)?;
    store_labels(&a.out, &labels)?;
    println!("wrote {:?} label volume to {}", labels.shape(), a.out.display());
    Ok(())
}

pub fn cmd_params(a: &ParamsArgs) -> anyhow::Result<()> {
    let config = RunConfig::resolve(
        a.config.as_deref(),
        &a.variant,
        &a.arch,
        &TrainFlags::default(),
        &DataFlags::default(),
    )?;
    let table = Network::<f32>::structure(&config.spec()?)?.count_parameters();
    if a.json {
        println!("{}", serde_json::to_string_pretty(&table)?);
    } else {
        println!("{table}");
    }
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> anyhow::Result<()> {
    let opts = GradcheckOptions {
        only: a.only.clone(),
        fault: a.fault.clone(),
        seed: a.seed,
        tolerance: a.tolerance,
        coords_per_tensor: a.coords_per_tensor,
        directions: a.directions,
    };
    let report = gradcheck::run(&opts)?;
    println!("{report}");
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|r| r.component.as_str()).collect();
        Err(NumericFailure(format!("gradient check failed: {}", names.join(", "))).into())
    }
}

/// Trains every variant under one seed and writes the comparison tables.
pub fn cmd_matrix(a: &MatrixArgs) -> anyhow::Result<()> {
    let base = RunConfig::resolve(a.config.as_deref(), &VariantFlags::default(), &a.arch, &a.train, &a.data)?;
    if a.parallel_runs == 0 {
        return Err(Error::Config("--parallel-runs must be at least 1".into()).into());
    }
    let data = Dataset::load(base.data_path()?, base.test_count, base.train.seed)?;
    create_dir(&a.out)?;
    let variants = Variant::all();
    let slots: Vec<Mutex<Option<anyhow::Result<RunOutcome>>>> = variants.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&v) = variants.get(i) else { break };
        let cfg = base.with_variant(v);
        let dir = a.out.join(run_name(v, cfg.train.seed));
        let res = train_run(&cfg, &data, &dir);
        if let Ok(o) = &res {
            match (&o.failed, &o.test) {
                (Some(m), _) => log::warn!("{}: failed ({m})", o.name),
                (None, Some(t)) => log::info!("{}: test dice {:.4} accuracy {:.4}", o.name, t.dice_whole_tumor, t.accuracy),
                (None, None) => log::info!("{}: done", o.name),
            }
        }
        *slots[i].lock().unwrap() = Some(res);
    };
    std::thread::scope(|s| {
        for _ in 0..a.parallel_runs.min(variants.len()) {
            s.spawn(work);
        }
    });
    for slot in slots {
        slot.into_inner().unwrap().expect("every cell ran")?;
    }
    let table = collect_results(&a.out, base.train.seed)?;
    let text = table.to_string();
    fs::write(a.out.join("results.txt"), &text).context("writing results.txt")?;
    let mut jsonl = Vec::new();
    for row in &table.rows {
        writeln!(jsonl, "{}", serde_json::to_string(row)?)?;
    }
    fs::write(a.out.join("results.jsonl"), jsonl).context("writing results.jsonl")?;
    print!("{text}");
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())).into())
}

/// Rebuilds the matrix table from the run directories under `out` alone.
pub fn collect_results(out: &Path, seed: u64) -> anyhow::Result<ResultsTable> {
    let mut rows = Vec::new();
    for v in Variant::all() {
        let name = run_name(v, seed);
        let dir = out.join(&name);
        let config: RunConfig = read_json(&dir.join("config.json"))?;
        let log: TrainingLog = read_json(&dir.join("summary.json"))?;
        let params = Network::<f32>::structure(&config.spec()?)?.count_parameters().total;
        let test: Option<VolumeEval> = match log.halted {
            None => Some(read_json(&dir.join("test_eval.json"))?),
            Some(_) => None,
        };
        rows.push(ResultRow {
            point: v.point_label().to_string(),
            function: v.function_label().to_string(),
            dice: test.as_ref().map(|t| t.pooled.dice_whole_tumor),
            accuracy: test.as_ref().map(|t| t.pooled.accuracy),
            params,
            ratio: None,
            run: name,
            failed: log.halted.clone(),
        });
    }
    Ok(ResultsTable::with_ratios(rows))
}
