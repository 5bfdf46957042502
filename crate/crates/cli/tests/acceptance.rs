//! Acceptance suite. Each test checks one criterion and prints a single
//! `ACCEPTANCE <n> ... PASS|FAIL` line. Tests hold a shared lock so that
//! wall-clock budgets are measured without competing for the CPU.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use modalfuse::data::synth::phantom;
use modalfuse::data::{sample_patches, split_patients, DatasetManifest, Grade, Patient, PatientRecord};
use modalfuse::fusion::{block_identity_kernel, fuse_conv, fuse_max, fuse_sum};
use modalfuse::metrics::{accuracy, dice, memory_accuracy_ratio, WHOLE_TUMOR};
use modalfuse::model::ParamTable;
use modalfuse::optim::{train_with, FixedPatches};
use modalfuse::rng::{stream, Stream};
use modalfuse::{ArchitectureSpec, LabelVolume, Mode, Network, Tensor, TrainConfig, Variant};
use modalfuse_cli::collect_results;
use modalfuse_cli::table::ResultRow;
use rand::seq::SliceRandom;
use rand::Rng as _;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, ok: bool, detail: &str) {
    println!("ACCEPTANCE {n} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modalfuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_1_gradient_exactness() {
    let _g = serial();
    let t = Instant::now();
    let full = cli(&["gradcheck"]);
    let elapsed = t.elapsed();
    let text = stdout(&full);
    let summary = text.lines().last().unwrap_or("").to_string();
    let all_pass = full.status.code() == Some(0) && summary.starts_with("19 of 19 components passed");

    let faulty = cli(&["gradcheck", "--only", "model/late", "--fault", "model/late-conv"]);
    let named = faulty.status.code() == Some(3)
        && stdout(&faulty).lines().any(|l| l.starts_with("FAIL model/late-conv"))
        && stdout(&faulty).lines().any(|l| l.starts_with("PASS model/late-sum"));
    let empty = cli(&["gradcheck", "--only", "no-such-component"]);
    let empty_ok = empty.status.code() == Some(1) && stderr(&empty).contains("no checks selected");

    println!("{text}");
    report(
        1,
        "gradient exactness",
        all_pass && named && empty_ok && elapsed < Duration::from_secs(300),
        &format!("{summary}; {:.0}s; fault named {named}; empty filter rejected {empty_ok}", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_2_shape_contract() {
    let _g = serial();
    let mut failures = Vec::new();
    let mut rng = stream(2, Stream::Eval, &[]);
    let x = Tensor::from_fn(&[4, 25, 25, 25], |_| rng.random_range(0.0f32..1.0));
    for v in Variant::all() {
        let net = Network::<f32>::build_seeded(&ArchitectureSpec::standard(v), 0).unwrap();
        let trace = net.trace(&x, Mode::Eval, 0).unwrap();
        let k = v.point_label();
        let before = match k {
            "early" => 1,
            "middle" => 2,
            "late" => 4,
            _ => 0,
        };
        for (b, want) in [(1, [30, 21, 21, 21]), (2, [40, 17, 17, 17]), (3, [40, 13, 13, 13]), (4, [50, 9, 9, 9])] {
            let names: Vec<String> = if b <= before {
                (0..4).map(|s| format!("stream{s}/conv{b}/dropout")).collect()
            } else {
                vec![format!("conv{b}/dropout")]
            };
            for n in names {
                if trace.get(&n).map(|t| t.shape()) != Some(&want[..]) {
                    failures.push(format!("{v} {n}"));
                }
            }
        }
        if trace.get("logits").unwrap().shape() != [5, 9, 9, 9] {
            failures.push(format!("{v} logits"));
        }
    }
    report(2, "shape contract", failures.is_empty(), &format!("10 variants, mismatches {failures:?}"));
}

#[test]
fn criterion_3_fusion_oracles() {
    let _g = serial();
    let mut rng = stream(3, Stream::Eval, &[]);
    let (mut sum_exact, mut max_exact, mut conv_close, mut perm) = (true, true, true, true);
    for _ in 0..100 {
        let c = rng.random_range(1..=5);
        let s = Tensor::from_fn(&[4, c, 3, 4, 5], |_| rng.random_range(-1.0f64..1.0));
        let per = s.item_len();
        let sum = fuse_sum(&s).unwrap();
        let max = fuse_max(&s).unwrap().0;
        for i in 0..per {
            let mut acc = 0.0;
            let mut best = f64::NEG_INFINITY;
            for n in 0..4 {
                acc += s.data()[n * per + i];
                best = best.max(s.data()[n * per + i]);
            }
            sum_exact &= sum.data()[i].to_bits() == acc.to_bits();
            max_exact &= max.data()[i] == best;
        }
        let mean = fuse_conv(&s, &block_identity_kernel(4, c, 0.25)).unwrap();
        conv_close &= mean.data().iter().zip(sum.data()).all(|(m, t)| (m - t / 4.0).abs() <= 1e-6);
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(&mut rng);
        let parts: Vec<Tensor<f64>> = order.iter().map(|&i| s.index_leading(i)).collect();
        let p = Tensor::stack(&parts.iter().collect::<Vec<_>>()).unwrap();
        perm &= fuse_max(&p).unwrap().0 == max;
        perm &= fuse_sum(&p).unwrap().data().iter().zip(sum.data()).all(|(a, b)| (a - b).abs() <= 1e-12);
    }
    report(
        3,
        "fusion oracles",
        sum_exact && max_exact && conv_close && perm,
        &format!("100 instances: sum bit-exact {sum_exact}, max exact {max_exact}, conv≈sum/N {conv_close}, permutation {perm}"),
    );
}

fn params_of(args: &[&str]) -> ParamTable {
    let mut full = vec!["params", "--json"];
    full.extend_from_slice(args);
    let o = cli(&full);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn criterion_4_parameter_structure() {
    let _g = serial();
    let base = params_of(&["--fusion-point", "none"]);
    let mut ok = base.row("conv1-1").map(|r| r.total) == Some(3270);
    let mut lines = vec![format!("baseline {}", base.total)];
    let points = ["early", "middle", "late"];
    let mut totals = std::collections::HashMap::new();
    for f in ["max", "sum", "conv"] {
        let t: Vec<usize> = points
            .iter()
            .map(|p| params_of(&["--fusion-point", p, "--fusion-fn", f]).total)
            .collect();
        ok &= base.total < t[0] && t[0] < t[1] && t[1] < t[2];
        let r: Vec<f64> = t.iter().map(|&p| memory_accuracy_ratio(0.97, p, 0.98, base.total).unwrap()).collect();
        ok &= r[0] > r[1] && r[1] > r[2];
        lines.push(format!("{f} {t:?}"));
        totals.insert(f, t);
    }
    for (i, c) in [30usize, 40, 50].iter().enumerate() {
        ok &= totals["sum"][i] == totals["max"][i];
        ok &= totals["conv"][i] == totals["sum"][i] + 4 * c * c + c;
    }
    report(4, "parameter-count structure", ok, &lines.join("; "));
}

fn overfit_patches() -> Vec<modalfuse::data::PatchSample> {
    let patients: Vec<Patient> = (0..2)
        .map(|p| {
            let (vols, label, _) = phantom(3, p, [36, 36, 36]);
            Patient::new(format!("p{p}"), Grade::Lgg, &vols, label).unwrap()
        })
        .collect();
    sample_patches(&patients, 20, 0.8, &mut stream(3, Stream::Sampling, &[])).unwrap()
}

#[test]
fn criterion_5_overfit_smoke() {
    let _g = serial();
    let patches = overfit_patches();
    let mut net = Network::<f32>::build_seeded(&ArchitectureSpec::tiny(Variant::Baseline), 1).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 4,
        epochs: 200,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let out = train_with(&mut net, &FixedPatches(patches.clone()), &patches, &cfg, None, &mut |r| r.dice <= 0.95).unwrap();
    let elapsed = t.elapsed();
    let initial = out.log.initial_loss.unwrap();
    let last = out.log.epochs.last().unwrap();
    let ok = last.dice > 0.95 && elapsed < Duration::from_secs(180) && (initial - 5f64.ln()).abs() <= 0.05 * 5f64.ln();
    report(
        5,
        "overfit smoke test",
        ok,
        &format!(
            "train dice {:.4} at epoch {}, {:.1}s, initial loss {initial:.4} vs ln5 {:.4}",
            last.dice,
            last.epoch,
            elapsed.as_secs_f64(),
            5f64.ln()
        ),
    );
}

/// Desk-scale matrix settings: narrow convolutions, wider dense layers.
const MATRIX_FLAGS: &[&str] = &[
    "--width",
    "tiny",
    "--channels",
    "3,3,4,4,4,4,6,6",
    "--dense",
    "16,16",
    "--dense-dropout",
    "0.1",
    "--epochs",
    "10",
    "--patches-per-epoch",
    "256",
    "--batch-size",
    "16",
    "--learning-rate",
    "2e-3",
    "--eval-patches",
    "200",
    "--save-epoch-checkpoints",
    "false",
];

#[test]
fn criterion_6_desk_matrix() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("matrix");
    let t = Instant::now();
    let o = cli(&["synth", "--out", s(&data), "--patients", "12", "--shape", "48,48,48", "--seed", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut args = vec!["matrix", "--data", s(&data), "--out", s(&out)];
    args.extend_from_slice(MATRIX_FLAGS);
    let o = cli(&args);
    let elapsed = t.elapsed();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("results.txt")).unwrap();
    println!("{table}");
    let rows: Vec<ResultRow> = fs::read_to_string(out.join("results.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let rebuilt = collect_results(&out, 0).unwrap();
    let base = rows.iter().find(|r| r.point == "none").unwrap();
    let base_dice = base.dice.unwrap_or(f64::NAN);
    let winners: Vec<String> = rows
        .iter()
        .filter(|r| r.point != "none" && r.dice.is_some_and(|d| d >= base_dice))
        .map(|r| format!("{}-{}", r.point, r.function))
        .collect();
    let mut increasing = true;
    for f in ["max", "sum", "conv"] {
        let p: Vec<usize> = rows.iter().filter(|r| r.function == f).map(|r| r.params).collect();
        increasing &= p.windows(2).all(|w| w[0] < w[1]) && p.len() == 3;
    }
    let ok = rows.len() == 10
        && base.ratio == Some(1.0)
        && increasing
        && rebuilt.rows == rows
        && !winners.is_empty()
        && elapsed < Duration::from_secs(1800);
    report(
        6,
        "desk experiment matrix",
        ok,
        &format!(
            "{} rows in {:.0}s, baseline dice {base_dice:.4}, fused at or above baseline: {winners:?}",
            rows.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_split_reproduction() {
    let _g = serial();
    let records: Vec<PatientRecord> = (0..274)
        .map(|i| {
            let g = if i < 54 { Grade::Lgg } else { Grade::Hgg };
            PatientRecord::in_dir(&format!("b{i:03}"), g, Path::new("."))
        })
        .collect();
    let m = DatasetManifest::new(records).unwrap();
    let mut ok = true;
    let mut detail = String::new();
    for seed in 0..5 {
        let a = split_patients(&m, 50, seed).unwrap();
        let lgg = a.test.iter().filter(|id| m.get(id).unwrap().grade == Grade::Lgg).count();
        ok &= lgg == 10 && a.test.len() == 50 && a == split_patients(&m, 50, seed).unwrap();
        if seed == 0 {
            detail = format!("{lgg} LGG + {} HGG test patients", a.test.len() - lgg);
        }
    }
    report(7, "split reproduction", ok, &format!("{detail}, stable over 5 seeds"));
}

#[test]
fn criterion_8_metric_oracles() {
    let _g = serial();
    let mut rng = stream(8, Stream::Eval, &[]);
    let mut ok = true;
    for k in 0..200 {
        let bg = [0.0, 0.5, 0.95][k % 3];
        let mut vol = || {
            let d = (0..216).map(|_| if rng.random_bool(bg) { 0 } else { rng.random_range(0..5u8) }).collect();
            LabelVolume::new(&[6, 6, 6], d).unwrap()
        };
        let (p, t) = (vol(), vol());
        let (mut tp, mut fp, mut fn_, mut hit) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..216 {
            let (a, b) = (p.data()[i], t.data()[i]);
            match (a > 0, b > 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
            hit += u64::from(a == b);
        }
        let want = if tp + fp + fn_ == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        ok &= dice(&p, &t, &WHOLE_TUMOR).unwrap() == want;
        ok &= accuracy(&p, &t).unwrap() == hit as f64 / 216.0;
    }
    let empty = LabelVolume::zeros(&[6, 6, 6]);
    let edge = dice(&empty, &empty, &WHOLE_TUMOR).unwrap() == 1.0;
    report(8, "metric oracles", ok && edge, &format!("200 volumes exact {ok}, empty-empty dice 1 {edge}"));
}

#[test]
fn criterion_9_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut same = Vec::new();

    for k in 0..2 {
        let o = cli(&["synth", "--out", s(&root.join(format!("d{k}"))), "--patients", "4", "--shape", "30,30,30", "--seed", "7"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    same.push(("synth", tree(&root.join("d0")) == tree(&root.join("d1"))));

    let train = |k: usize| {
        let o = cli(&[
            "train",
            "--data",
            s(&root.join("d0")),
            "--out",
            s(&root.join(format!("r{k}"))),
            "--width",
            "tiny",
            "--fusion-point",
            "middle",
            "--fusion-fn",
            "conv",
            "--epochs",
            "2",
            "--patches-per-epoch",
            "32",
            "--batch-size",
            "8",
            "--eval-patches",
            "16",
            "--test-count",
            "1",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    train(0);
    train(1);
    let run = "middle-conv-seed0";
    let (a, b) = (tree(&root.join("r0").join(run)), tree(&root.join("r1").join(run)));
    let names: Vec<String> = a.iter().map(|(p, _)| p.display().to_string()).collect();
    same.push(("train", a == b && names.iter().any(|n| n == "best.ckpt") && names.iter().any(|n| n == "config.json")));

    let ckpt = root.join("r0").join(run).join("best.ckpt");
    for k in 0..2 {
        let o = cli(&[
            "predict",
            "--checkpoint",
            s(&ckpt),
            "--patient",
            s(&root.join("d0").join("synth001")),
            "--out",
            s(&root.join(format!("pred{k}"))),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let o = cli(&["eval", "--checkpoint", s(&ckpt), "--data", s(&root.join("d0")), "--test-count", "1", "--out", s(&root.join(format!("eval{k}.json")))]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let pred = |k: usize| fs::read(root.join(format!("pred{k}.vvol.bin"))).unwrap();
    same.push(("predict", pred(0) == pred(1) && pred(0).len() == 30 * 30 * 30));
    let ev = |k: usize| fs::read(root.join(format!("eval{k}.json"))).unwrap();
    same.push(("eval", ev(0) == ev(1)));

    let ok = same.iter().all(|(_, s)| *s);
    report(9, "determinism", ok, &format!("{same:?}"));
}

#[test]
fn cli_contracts() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut checks = Vec::new();

    let table = stdout(&cli(&["params", "--fusion-point", "none"]));
    checks.push(("params baseline conv1-1 3270", table.lines().any(|l| l.starts_with("conv1-1") && l.trim_end().ends_with("3270"))));
    checks.push(("fn without point is a usage error", cli(&["params", "--fusion-fn", "max"]).status.code() == Some(1)));
    checks.push(("unknown flag is a usage error", cli(&["train", "--bogus"]).status.code() == Some(1)));
    checks.push(("help exits 0", cli(&["--help"]).status.code() == Some(0)));
    checks.push((
        "missing data is a data error",
        cli(&["train", "--data", s(&root.join("missing")), "--out", s(root)]).status.code() == Some(2),
    ));

    // A 25³ volume gives a 25³ label map.
    let o = cli(&["synth", "--out", s(&root.join("d")), "--patients", "1", "--shape", "25,25,25"]);
    assert_eq!(o.status.code(), Some(0));
    let net = Network::<f32>::build_seeded(&ArchitectureSpec::tiny(Variant::Baseline), 0).unwrap();
    let ckpt = root.join("tiny.ckpt");
    modalfuse::data::save_checkpoint(&net, &ckpt).unwrap();
    let o = cli(&["predict", "--checkpoint", s(&ckpt), "--patient", s(&root.join("d/synth000")), "--out", s(&root.join("p"))]);
    let header: serde_json::Value =
        serde_json::from_slice(&fs::read(root.join("p.vvol.json")).unwrap_or_default()).unwrap_or_default();
    checks.push(("predict 25³ keeps shape", o.status.code() == Some(0) && header["shape"] == serde_json::json!([25, 25, 25])));

    let ok = checks.iter().all(|(_, c)| *c);
    for (name, c) in &checks {
        println!("  {} {name}", if *c { "ok  " } else { "FAIL" });
    }
    assert!(ok);
}
