use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskcot::data::{read_window, DatasetManifest, ToyGenConfig};
use maskcot::encoder::{ContextMode, MaskEncoderSpec, Pooling};
use maskcot::gan::{CriticSpec, GeneratorSpec, OutputActivation};
use maskcot::model::ModelSpec;
use maskcot::train::{AdamWConfig, Seeds, TrainConfig};
use maskcot_cli::render::{montage, RenderRow, RenderSpec, Source};
use maskcot_cli::{exit_code, seeds_from};
use sha2::{Digest, Sha256};

fn maskcot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskcot"))
        .args(args)
        .env_remove("MASKCOT_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(o: Output) -> String {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Digest over every file of a directory, in name order.
fn dir_digest(dir: &Path) -> String {
    let mut names: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        h.update(n.file_name().unwrap().to_str().unwrap().as_bytes());
        h.update(fs::read(&n).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn small_toy(seed: u64, classes: usize) -> ToyGenConfig {
    ToyGenConfig {
        height: 8,
        width: 8,
        steps: 4,
        classes,
        sequences: 16,
        blob_radius: 2.0,
        seed,
        ..ToyGenConfig::default()
    }
}

fn tiny_model(classes: usize) -> ModelSpec {
    ModelSpec {
        encoder: MaskEncoderSpec {
            conv_channels: [2, 3, 3],
            pooling: Pooling::Global,
            lstm_hidden: 4,
            context_dim: 3,
            ..MaskEncoderSpec::new(classes)
        },
        generator: GeneratorSpec {
            context_mode: ContextMode::PerTimestep,
            lstm_hidden: 5,
            seed_channels: 3,
            upsample_channels: vec![3],
            output: OutputActivation::Linear,
            ..GeneratorSpec::new(2)
        },
        critics: CriticSpec {
            conv_channels: vec![2, 3],
            lstm_hidden: 4,
            features: 3,
            ..CriticSpec::new(3)
        },
    }
}

fn train_config(data: &Path, out: &Path) -> TrainConfig {
    TrainConfig {
        dataset: data.to_path_buf(),
        output: out.to_path_buf(),
        model: tiny_model(1),
        sinkhorn: Default::default(),
        penalty_weight: 1.0,
        epochs: 2,
        batch_size: 4,
        optimizer: AdamWConfig::default(),
        seeds: Seeds {
            init: 1,
            shuffle: 2,
            noise: 3,
        },
        checkpoint_every: 1,
        preload: true,
    }
}

/// A toy dataset plus a trained tiny checkpoint.
struct Fixture {
    dir: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let toy_cfg = dir.path().join("toy.json");
    write_json(&toy_cfg, &small_toy(1, 1));
    let data = dir.path().join("data");
    ok(maskcot(&["gen-toy", "--config", p(&toy_cfg), "--out", p(&data)]));
    let cfg = dir.path().join("train.json");
    write_json(&cfg, &train_config(&data, &dir.path().join("run")));
    let o = maskcot(&["train", "--config", p(&cfg)]);
    ok(o);
    let ckpt = dir.path().join("run").join("final.ckpt");
    Fixture { dir, data, ckpt }
}

#[test]
fn gen_toy_is_deterministic_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.json");
    write_json(&cfg, &small_toy(0, 2));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = ok(maskcot(&["gen-toy", "--config", p(&cfg), "--seed", "5", "--out", p(&a)]));
    assert!(out.contains("16 windows"), "{out}");
    ok(maskcot(&["gen-toy", "--config", p(&cfg), "--seed", "5", "--out", p(&b)]));
    assert_eq!(dir_digest(&a), dir_digest(&b));
    assert_eq!(DatasetManifest::load(&a).unwrap().record_count, 16);
    // rerunning into the same directory reproduces it
    let before = dir_digest(&a);
    ok(maskcot(&["gen-toy", "--config", p(&cfg), "--seed", "5", "--out", p(&a)]));
    assert_eq!(dir_digest(&a), before);
    ok(maskcot(&["gen-toy", "--config", p(&cfg), "--seed", "6", "--out", p(&b)]));
    assert_ne!(dir_digest(&a), dir_digest(&b));

    let bad = dir.path().join("bad.json");
    write_json(&bad, &ToyGenConfig { height: 3, ..small_toy(0, 1) });
    let o = maskcot(&["gen-toy", "--config", p(&bad), "--out", p(&dir.path().join("c"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("4×4"));
}

#[test]
fn train_writes_checkpoints_and_metrics_and_checks_inputs() {
    let f = fixture();
    let run = f.dir.path().join("run");
    for name in ["final.ckpt", "epoch_0001.ckpt", "epoch_0002.ckpt", "metrics.jsonl"] {
        assert!(run.join(name).exists(), "{name}");
    }
    let lines = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    // 16 windows in batches of 4: 2 steps per epoch
    assert_eq!(lines.lines().count(), 4);

    // resume with a different seed: the config hash differs
    let cfg = f.dir.path().join("train.json");
    let o = maskcot(&[
        "train",
        "--config",
        p(&cfg),
        "--seed",
        "9",
        "--resume",
        p(&run.join("epoch_0001.ckpt")),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    let missing = f.dir.path().join("missing.json");
    write_json(&missing, &train_config(&f.dir.path().join("nowhere"), &f.dir.path().join("r2")));
    assert_eq!(code(&maskcot(&["train", "--config", p(&missing)])), 3);
    assert_eq!(code(&maskcot(&["train", "--config", p(&f.dir.path().join("no.json"))])), 2);
}

#[test]
fn resume_continues_the_same_trajectory() {
    let f = fixture();
    let cfg = f.dir.path().join("train.json");
    let out = f.dir.path().join("resumed");
    fs::create_dir_all(&out).unwrap();
    let run = f.dir.path().join("run");
    fs::copy(run.join("metrics.jsonl"), out.join("metrics.jsonl")).unwrap();
    let o = maskcot(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--resume",
        p(&run.join("epoch_0001.ckpt")),
    ]);
    ok(o);
    let a = maskcot::train::Checkpoint::load(&run.join("final.ckpt")).unwrap();
    let b = maskcot::train::Checkpoint::load(&out.join("final.ckpt")).unwrap();
    assert_eq!((a.step, &a.blocks), (b.step, &b.blocks));
    let la = maskcot::train::read_log(&run.join("metrics.jsonl")).unwrap();
    let lb = maskcot::train::read_log(&out.join("metrics.jsonl")).unwrap();
    assert_eq!(la.len(), lb.len());
    assert!(la.iter().zip(&lb).all(|(x, y)| x.same_values(y)));
}

#[test]
fn sample_is_deterministic_and_round_trips() {
    let f = fixture();
    let a = f.dir.path().join("sa");
    let b = f.dir.path().join("sb");
    let args = |out: &Path| {
        vec![
            "sample".to_string(),
            "--checkpoint".into(),
            p(&f.ckpt).into(),
            "--masks".into(),
            p(&f.data).into(),
            "--count".into(),
            "1".into(),
            "--seed".into(),
            "4".into(),
            "--out".into(),
            p(out).into(),
        ]
    };
    let run = |out: &Path| {
        let a = args(out);
        maskcot(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    ok(run(&a));
    ok(run(&b));
    assert_eq!(dir_digest(&a), dir_digest(&b));
    let m = DatasetManifest::load(&a).unwrap();
    assert_eq!(m.record_count, 1);
    let (grid, mask) = read_window(&m, 0).unwrap();
    assert_eq!(grid.values.shape(), &[4, 1, 8, 8]);
    let (_, source_mask) = read_window(&DatasetManifest::load(&f.data).unwrap(), 0).unwrap();
    assert_eq!(mask.values, source_mask.values);

    // thread count does not change the output
    let c = f.dir.path().join("sc");
    let many = Command::new(env!("CARGO_BIN_EXE_maskcot"))
        .args(args(&c))
        .env("MASKCOT_THREADS", "3")
        .output()
        .unwrap();
    ok(many);
    assert_eq!(dir_digest(&a), dir_digest(&c));
    let bad = Command::new(env!("CARGO_BIN_EXE_maskcot"))
        .args(args(&c))
        .env("MASKCOT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);

    // masks with the wrong class count
    let wrong = f.dir.path().join("k2");
    let toy_cfg = f.dir.path().join("toy2.json");
    write_json(&toy_cfg, &small_toy(1, 2));
    ok(maskcot(&["gen-toy", "--config", p(&toy_cfg), "--out", p(&wrong)]));
    let o = maskcot(&[
        "sample",
        "--checkpoint",
        p(&f.ckpt),
        "--masks",
        p(&wrong),
        "--out",
        p(&f.dir.path().join("sx")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_prints_a_report() {
    let f = fixture();
    let eval_cfg = f.dir.path().join("eval.json");
    write_json(
        &eval_cfg,
        &maskcot::train::EvalConfig {
            samples: 16,
            batch_size: 4,
            ..Default::default()
        },
    );
    let report = f.dir.path().join("report.json");
    let out = ok(maskcot(&[
        "eval",
        "--checkpoint",
        p(&f.ckpt),
        "--data",
        p(&f.data),
        "--config",
        p(&eval_cfg),
        "--out",
        p(&report),
    ]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["samples"], 16);
    assert!(v["divergence"].as_f64().unwrap().is_finite());
    assert_eq!(fs::read_to_string(&report).unwrap().trim(), out.trim());
    let o = maskcot(&["eval", "--checkpoint", p(&f.dir.path().join("none.ckpt")), "--data", p(&f.data)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn render_writes_a_pgm_montage() {
    let f = fixture();
    let generated = f.dir.path().join("gen");
    ok(maskcot(&[
        "sample",
        "--checkpoint",
        p(&f.ckpt),
        "--masks",
        p(&f.data),
        "--out",
        p(&generated),
    ]));
    let mut spec = RenderSpec::figure("data".into(), "gen".into(), 1, 1, "fig/montage".into());
    spec.timesteps = 4;
    spec.png = true;
    let spec_path = f.dir.path().join("render.json");
    write_json(&spec_path, &spec);
    let out = ok(maskcot(&["render", "--config", p(&spec_path)]));
    assert!(out.contains("montage.pgm"));
    let pgm = fs::read(f.dir.path().join("fig/montage.pgm")).unwrap();
    // 3 rows of 8×8 over 4 steps: 26 tall, 35 wide
    let header = b"P5\n35 26\n255\n";
    assert!(pgm.starts_with(header));
    assert_eq!(pgm.len(), header.len() + 26 * 35);
    let png = fs::read(f.dir.path().join("fig/montage.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");

    // a row naming a dataset that is not there
    spec.generated = Some("absent".into());
    write_json(&spec_path, &spec);
    assert_eq!(code(&maskcot(&["render", "--config", p(&spec_path)])), 3);
    spec.generated = None;
    write_json(&spec_path, &spec);
    assert_eq!(code(&maskcot(&["render", "--config", p(&spec_path)])), 3);
    // empty display range
    spec.ranges = vec![[1.0, 1.0]];
    write_json(&spec_path, &spec);
    assert_eq!(code(&maskcot(&["render", "--config", p(&spec_path)])), 2);
}

#[test]
fn montage_layout_arithmetic() {
    let rows: Vec<_> = (0..5).map(|_| (maskcot::Tensor::zeros(&[10, 16, 16]), [0.0, 1.0])).collect();
    let img = montage(&rows).unwrap();
    assert_eq!((img.height, img.width), (16 * 5 + 4, 16 * 10 + 9));
    let one = montage(&[(maskcot::Tensor::zeros(&[1, 3, 2]), [0.0, 1.0])]).unwrap();
    assert_eq!((one.height, one.width), (3, 2));
    assert!(montage(&[
        (maskcot::Tensor::zeros(&[2, 3, 3]), [0.0, 1.0]),
        (maskcot::Tensor::zeros(&[2, 3, 4]), [0.0, 1.0]),
    ])
    .is_err());
}

#[test]
fn gray_mapping_is_linear_and_clamped() {
    use maskcot_cli::render::to_gray;
    assert_eq!(to_gray(0.0, 0.0, 1.0), 0);
    assert_eq!(to_gray(1.0, 0.0, 1.0), 255);
    assert_eq!(to_gray(0.5, 0.0, 1.0), 128);
    assert_eq!(to_gray(-7.0, 0.0, 1.0), 0);
    assert_eq!(to_gray(7.0, 0.0, 1.0), 255);
    assert_eq!(to_gray(3.0, 2.0, 6.0), 64);
    assert_eq!(to_gray(f32::NAN, 0.0, 1.0), 0);
}

#[test]
fn render_spec_json_rejects_unknown_fields() {
    let spec = RenderSpec {
        rows: vec![RenderRow {
            label: "m".into(),
            source: Source::Mask(0),
        }],
        ..RenderSpec::figure("r".into(), "g".into(), 1, 1, "o".into())
    };
    let text = serde_json::to_string(&spec).unwrap();
    assert_eq!(RenderSpec::from_json(&text, Path::new("s")).unwrap(), spec);
    let extra = text.replacen('{', "{\"colour\":true,", 1);
    assert!(RenderSpec::from_json(&extra, Path::new("s")).is_err());
}

#[test]
fn exit_codes_and_seed_derivation() {
    use maskcot::ErrorKind;
    assert_eq!(exit_code(ErrorKind::Config), 2);
    assert_eq!(exit_code(ErrorKind::Data), 3);
    assert_eq!(exit_code(ErrorKind::Numeric), 4);
    let s = seeds_from(u64::MAX);
    assert_eq!((s.init, s.shuffle, s.noise), (u64::MAX, 0, 1));
    let o = maskcot(&["train"]);
    assert_eq!(code(&o), 2);
}
