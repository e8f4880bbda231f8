use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use imbalance_forge::cli::{DataSource, ToyRunConfig};
use imbalance_forge::diffmath::Tensor;
use imbalance_forge::labelmap::LabelMap;
use imbalance_forge::losses::LossKind;
use imbalance_forge::manifest::load_manifest;
use imbalance_forge::metrics::ProbMap;
use imbalance_forge::synth::{long_tail_benchmark, SynthConfig};
use imbalance_forge::trainer::{SamplerKind, Seeds, TrainConfig};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_imbalance-forge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_synth() -> SynthConfig {
    let mut cfg = long_tail_benchmark(3);
    cfg.num_images = 40;
    cfg.height = 12;
    cfg.width = 12;
    cfg
}

fn gen_dataset(dir: &Path) -> PathBuf {
    let cfg = dir.join("synth.json");
    std::fs::write(&cfg, serde_json::to_string(&small_synth()).unwrap()).unwrap();
    let out = dir.join("data");
    let o = run(&["gen-synth", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_synth_writes_dataset_and_provenance() {
    let dir = TempDir::new().unwrap();
    let data = gen_dataset(dir.path());
    let manifest = load_manifest(&data.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.len(), 40);
    assert_eq!(manifest.num_classes(), 12);
    for r in &manifest.records {
        assert!(data.join("labels").join(format!("{}.pgm", r.record_id)).exists());
        assert!(data.join("features").join(format!("{}.bin", r.record_id)).exists());
    }
    let run_json = read_json(&data.join("run.json"));
    assert_eq!(run_json["tool"], "imbalance-forge");
    assert_eq!(run_json["command"], "gen-synth");
    assert_eq!(run_json["config"]["num_images"], 40);
    assert!(!std::fs::read_to_string(data.join("run.json")).unwrap().contains("time"));

    let again = dir.path().join("again");
    let cfg = dir.path().join("synth.json");
    assert_eq!(code(&run(&["gen-synth", "--config", s(&cfg), "--out", s(&again)])), 0);
    for f in ["manifest.jsonl", "run.json", "labels/img00007.pgm", "features/img00007.bin"] {
        let (a, b) = (std::fs::read(data.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap());
        if f == "run.json" {
            assert_ne!(a, b, "arguments differ");
        } else {
            assert_eq!(a, b, "{f}");
        }
    }
}

#[test]
fn seed_flag_overrides_synth_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("synth.json");
    std::fs::write(&cfg, serde_json::to_string(&small_synth()).unwrap()).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run(&["gen-synth", "--config", s(&cfg), "--out", s(&a), "--seed", "99"])), 0);
    assert_eq!(code(&run(&["--seed", "100", "gen-synth", "--config", s(&cfg), "--out", s(&b)])), 0);
    assert_eq!(read_json(&a.join("run.json"))["config"]["seed"], 99);
    assert_eq!(read_json(&b.join("run.json"))["seed"], 100);
    assert_ne!(std::fs::read(a.join("manifest.jsonl")).unwrap(), std::fs::read(b.join("manifest.jsonl")).unwrap());
}

#[test]
fn plan_epoch_is_seeded() {
    let dir = TempDir::new().unwrap();
    let data = gen_dataset(dir.path());
    let m = data.join("manifest.jsonl");
    let plans: Vec<String> = ["p1.jsonl", "p2.jsonl"]
        .iter()
        .map(|name| {
            let out = dir.path().join("plans").join(name);
            let o = run(&["plan-epoch", "--manifest", s(&m), "--t", "0.15", "--epochs", "3", "--seed", "5", "--out", s(&out)]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            std::fs::read_to_string(out).unwrap()
        })
        .collect();
    assert_eq!(plans[0], plans[1]);
    let lines: Vec<Value> = plans[0].lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.len() >= 3 * 40, "repeat factors are at least 1");
    assert_eq!(lines[0]["epoch"], 0);
    assert_eq!(lines.last().unwrap()["epoch"], 2);
    assert!(lines[0]["record"].as_str().unwrap().starts_with("img"));
    assert!(dir.path().join("plans/run.json").exists());

    let other = dir.path().join("other.jsonl");
    assert_eq!(code(&run(&["plan-epoch", "--manifest", s(&m), "--epochs", "3", "--seed", "6", "--out", s(&other)])), 0);
    assert_ne!(std::fs::read_to_string(other).unwrap(), plans[0]);
}

#[test]
fn adaptive_sim_trace() {
    let dir = TempDir::new().unwrap();
    let data = gen_dataset(dir.path());
    let trace = dir.path().join("sim/trace.jsonl");
    let state = dir.path().join("sim/state.json");
    let o = run(&[
        "adaptive-sim",
        "--manifest",
        s(&data.join("manifest.jsonl")),
        "--steps",
        "30",
        "--batch-size",
        "4",
        "--seed",
        "2",
        "--out",
        s(&trace),
        "--state-out",
        s(&state),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = std::fs::read_to_string(&trace).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 30);
    for l in &lines {
        assert_eq!(l["records"].as_array().unwrap().len(), 4);
        let p: f64 = l["probs"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((p - 1.0).abs() < 1e-12);
    }
    // every class starts at the same EMA, so the first step is uniform
    let first: Vec<f64> = lines[0]["probs"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(first.iter().all(|&p| (p - 1.0 / 12.0).abs() < 1e-12));
    let state = read_json(&state);
    assert_eq!(state["steps"], 30);
}

#[test]
fn grad_check_all_losses() {
    let dir = TempDir::new().unwrap();
    for loss in ["ce", "ohem", "lovasz"] {
        let o = run(&["grad-check", "--loss", loss, "--trials", "30", "--eps", "1e-5", "--out", s(dir.path())]);
        assert_eq!(code(&o), 0, "{loss}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("max_rel_error"));
    }
    let o = run(&["grad-check", "--loss", "ce", "--trials", "5", "--tol", "1e-30", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&run(&["grad-check", "--loss", "dice", "--out", s(dir.path())])), 1);
    assert_eq!(code(&run(&["grad-check", "--loss", "ce", "--eps", "0", "--out", s(dir.path())])), 1);
}

#[test]
fn eval_ground_truth_against_itself() {
    let dir = TempDir::new().unwrap();
    let data = gen_dataset(dir.path());
    let report = dir.path().join("report.json");
    let labels = data.join("labels");
    let o = run(&["eval", "--pred", s(&labels), "--gt", s(&labels), "--manifest", s(&data.join("manifest.jsonl")), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&report);
    assert_eq!(r["miou"], 1.0);
    assert_eq!(r["per_class"]["0"], 1.0);

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = run(&["eval", "--pred", s(&empty), "--gt", s(&labels), "--manifest", s(&data.join("manifest.jsonl")), "--out", s(&report)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_accepts_probability_maps() {
    let dir = TempDir::new().unwrap();
    let data = gen_dataset(dir.path());
    let manifest = load_manifest(&data.join("manifest.jsonl")).unwrap();
    let pred = dir.path().join("pred");
    std::fs::create_dir(&pred).unwrap();
    for r in &manifest.records {
        let gt = LabelMap::load_pgm(&data.join("labels").join(format!("{}.pgm", r.record_id))).unwrap();
        let hw = gt.len();
        let t = Tensor::from_fn(&[12, gt.height(), gt.width()], |k| if gt.data()[k % hw] as usize == k / hw { 0.9 } else { 0.1 / 11.0 });
        ProbMap::new(t).unwrap().save(&pred.join(format!("{}.bin", r.record_id))).unwrap();
    }
    let report = dir.path().join("report.json");
    let o = run(&["eval", "--pred", s(&pred), "--gt", s(&data.join("labels")), "--manifest", s(&data.join("manifest.jsonl")), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(&report)["miou"], 1.0);
}

#[test]
fn ensemble_averages_maps() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    ProbMap::new(Tensor::new(vec![2, 1, 2], vec![1.0, 0.25, 0.0, 0.75]).unwrap()).unwrap().save(&a).unwrap();
    ProbMap::new(Tensor::new(vec![2, 1, 2], vec![0.5, 0.25, 0.5, 0.75]).unwrap()).unwrap().save(&b).unwrap();
    let mean = dir.path().join("out/mean.bin");
    let labels = dir.path().join("out/mean.pgm");
    let o = run(&["ensemble", "--inputs", s(&a), s(&b), "--out", s(&mean), "--labels-out", s(&labels)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = ProbMap::load(&mean).unwrap();
    assert_eq!(m.tensor().data(), &[0.75, 0.25, 0.25, 0.75]);
    assert_eq!(LabelMap::load_pgm(&labels).unwrap().data(), &[0, 1]);
    assert!(dir.path().join("out/run.json").exists());

    let c = dir.path().join("c.bin");
    ProbMap::new(Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).unwrap()).unwrap().save(&c).unwrap();
    assert_eq!(code(&run(&["ensemble", "--inputs", s(&a), s(&c), "--out", s(&mean)])), 1);
}

#[test]
fn train_toy_from_manifest() {
    let dir = TempDir::new().unwrap();
    gen_dataset(dir.path());
    let train = TrainConfig {
        epochs: 2,
        sampler: SamplerKind::Adaptive,
        loss: LossKind::Ohem,
        ..TrainConfig::new(Seeds { data: 1, model: 2, sampler: 3 })
    };
    let cfg = ToyRunConfig { data: DataSource::Manifest("data/manifest.jsonl".into()), train };
    let cfg_path = dir.path().join("train.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let out = dir.path().join("run");
    let o = run(&["train-toy", "--config", s(&cfg_path), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "epoch,lr,train_loss,miou,anat_miou,tool_miou,rare_miou");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("0,,"));
    assert!(out.join("model.bin").exists());
    assert!(read_json(&out.join("report.json"))["miou"].is_number());
    let run_json = read_json(&out.join("run.json"));
    assert_eq!(run_json["config"]["train"]["sampler"], "adaptive");
    assert!(run_json["config"]["data"]["manifest"].as_str().unwrap().ends_with("data/manifest.jsonl"));
}

#[test]
fn train_toy_rejects_bad_configs() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    let out = dir.path().join("out");
    std::fs::write(&cfg, r#"{"data": {"synth": {}}, "train": {}}"#).unwrap();
    assert_eq!(code(&run(&["train-toy", "--config", s(&cfg), "--out", s(&out)])), 1);
    std::fs::write(&cfg, "not json").unwrap();
    assert_eq!(code(&run(&["train-toy", "--config", s(&cfg), "--out", s(&out)])), 1);

    let mut train = TrainConfig::new(Seeds { data: 0, model: 0, sampler: 0 });
    train.epochs = 60;
    let bad = ToyRunConfig { data: DataSource::Synth(small_synth()), train };
    std::fs::write(&cfg, serde_json::to_string(&bad).unwrap()).unwrap();
    let o = run(&["train-toy", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("schedule"));
}

#[test]
fn usage_and_runtime_exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["plan-epoch", "--manifest", "m.jsonl"])), 1, "missing --out");
    let missing = dir.path().join("nope.jsonl");
    let out = dir.path().join("plan.jsonl");
    assert_eq!(code(&run(&["plan-epoch", "--manifest", s(&missing), "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["plan-epoch", "--manifest", s(&missing), "--t", "-1", "--out", s(&out)])), 1);

    let o = bin().args(["grad-check", "--loss", "ce", "--trials", "2", "--out", s(dir.path())]).env("IMBALANCE_FORGE_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 1);
    let o = bin().args(["grad-check", "--loss", "ce", "--trials", "2", "--out", s(dir.path())]).env("IMBALANCE_FORGE_THREADS", "2").output().unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn help_documents_formats() {
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    let top = String::from_utf8_lossy(&o.stdout).into_owned();
    for name in ["manifest.jsonl", "PGM", "f32", "plan.jsonl", "trace.jsonl", "report.json", "metrics.csv", "run.json"] {
        assert!(top.contains(name), "top-level help lacks {name}");
    }
    let expected = [
        ("gen-synth", &["manifest.jsonl", ".pgm", ".bin"][..]),
        ("plan-epoch", &["manifest.jsonl", "plan.jsonl"]),
        ("adaptive-sim", &["manifest.jsonl", "trace.jsonl"]),
        ("grad-check", &["run.json"]),
        ("eval", &["manifest.jsonl", ".pgm", "report.json"]),
        ("ensemble", &[".bin", ".pgm"]),
        ("train-toy", &["metrics.csv", "model.bin", "run.json"]),
    ];
    for (cmd, names) in expected {
        let o = run(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout).into_owned();
        for name in names {
            assert!(text.contains(name), "{cmd} --help lacks {name}");
        }
    }
}
