use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ovseg::images::{load_index_png, save_image, save_index_png};
use ovseg::tensor_io::save_tensor;
use ovseg_core::training::generate_scene;
use ovseg_core::{SegMap, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn ovseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovseg")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 6] = ["--train.iters", "6", "--train.scenes", "2", "--train.checkpoint_every", "3"];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", s(out)];
    args.extend(SMALL);
    args.extend(extra);
    ovseg(&args)
}

#[test]
fn train_writes_checkpoints_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let report = stdout_json(&train(&a, &["--seed", "11"]));
    assert_eq!(report["iterations"], 6);
    assert!(a.join("checkpoint/manifest.json").is_file());
    assert!(a.join("checkpoints/000003/weights.bin").is_file());
    stdout_json(&train(&b, &["--seed", "11"]));
    let csv_a = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read_to_string(b.join("loss.csv")).unwrap());
    assert_eq!(csv_a.lines().count(), 7);
    assert!(csv_a.starts_with("iteration,focal,dice,combined,lr_backbone,lr_head\n"));

    let c = dir.path().join("c");
    stdout_json(&train(&c, &["--seed", "12"]));
    assert_ne!(csv_a, std::fs::read_to_string(c.join("loss.csv")).unwrap());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"train": {"iters": 50, "scenes": 2}, "seed": 3}"#).unwrap();
    let out = dir.path().join("o");
    let args = ["train", "--config", s(&cfg), "--out", s(&out), "--train.iters", "2"];
    let report = stdout_json(&ovseg(&args));
    assert_eq!(report["iterations"], 2);
    assert_eq!(report["seed"], 3);
}

#[test]
fn malformed_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"train\": {\n    \"iters\": \"lots\"\n  }\n}\n").unwrap();
    let out = ovseg(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json:3:"), "{err}");

    std::fs::write(&cfg, "{ \"seed\": ").unwrap();
    assert_eq!(code(&ovseg(&["train", "--config", s(&cfg), "--out", "unused"])), 2);
    assert_eq!(code(&ovseg(&["train", "--out", "unused", "--train.nope", "1"])), 2);
    assert_eq!(code(&ovseg(&["frobnicate"])), 2);
    assert_eq!(code(&ovseg(&["train", "--config", s(&dir.path().join("missing.json")), "--out", "x"])), 1);
}

/// A trained linear-patch checkpoint and a 64×64 scene image.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let run = dir.join("run");
    stdout_json(&train(&run, &["--model.encoder.vision_backbone", "linear_patch"]));
    let scene = generate_scene(5, 4, 64, 16).unwrap();
    let image = dir.join("scene.png");
    save_image(&image, &scene.image).unwrap();
    (run.join("checkpoint"), image)
}

const SMALL_INFER: [&str; 6] = ["--infer.resize", "64", "--infer.window", "48", "--infer.overlap", "16"];

fn infer(ck: &Path, image: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["infer", "--checkpoint", s(ck), "--image", s(image), "--out", s(out)];
    args.extend(SMALL_INFER);
    args.extend(extra);
    ovseg(&args)
}

#[test]
fn infer_outputs_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, image) = setup(dir.path());
    let classes = "sky,grass,road,water";

    let on = dir.path().join("on");
    let report = stdout_json(&infer(&ck, &image, &on, &["--classes", classes, "--lga", "--probs"]));
    assert_eq!(report["lga"], true);
    let idx = load_index_png(&on.join("scene_index.png")).unwrap();
    assert_eq!((idx.height, idx.width), (64, 64));
    assert!(idx.labels.iter().all(|&l| l < 4));
    assert!(on.join("scene_color.png").is_file());
    let probs = ovseg::tensor_io::load_tensor(&on.join("scene_probs.bin")).unwrap();
    assert_eq!(probs.shape(), &[4, 64, 64]);

    let off = dir.path().join("off");
    stdout_json(&infer(&ck, &image, &off, &["--classes", classes, "--no-lga"]));
    let a = std::fs::read(on.join("scene_index.png")).unwrap();
    assert_eq!(a, std::fs::read(off.join("scene_index.png")).unwrap());

    let file = dir.path().join("classes.txt");
    std::fs::write(&file, "sky\ngrass\n").unwrap();
    let report = stdout_json(&infer(&ck, &image, &dir.path().join("f"), &["--classes", s(&file)]));
    assert_eq!(report["classes"].as_array().unwrap().len(), 2);

    let missing = dir.path().join("nope.png");
    assert_eq!(code(&infer(&ck, &missing, &off, &["--classes", classes])), 1);
    assert_eq!(code(&infer(&ck, &image, &off, &["--classes", " , "])), 2);
    assert_eq!(code(&infer(&ck, &image, &off, &["--classes", classes, "--model.encoder.vision_dim", "32"])), 4);
    assert_eq!(code(&infer(&dir.path().join("none"), &image, &off, &["--classes", classes])), 1);
}

fn write_masks(dir: &Path, maps: &[(&str, SegMap)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (name, m) in maps {
        save_index_png(&dir.join(format!("{name}.png")), m).unwrap();
    }
}

#[test]
fn eval_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let maps: Vec<(String, SegMap)> = (0..3)
        .map(|i| (format!("m{i}"), SegMap::new(8, 8, (0..64).map(|_| rng.random_range(0..3)).collect()).unwrap()))
        .collect();
    let refs: Vec<(&str, SegMap)> = maps.iter().map(|(n, m)| (n.as_str(), m.clone())).collect();
    let (p, g) = (dir.path().join("p"), dir.path().join("g"));
    write_masks(&p, &refs);
    write_masks(&g, &refs);
    let report = stdout_json(&ovseg(&["eval", "--pred", s(&p), "--gt", s(&g), "--classes", "a,b,c"]));
    assert_eq!(report["miou"], 1.0);
    assert_eq!(report["per_class"].as_array().unwrap().len(), 3);

    let (hp, hg) = (dir.path().join("hp"), dir.path().join("hg"));
    write_masks(&hp, &[("x", SegMap::new(2, 2, vec![0, 1, 1, 1]).unwrap())]);
    write_masks(&hg, &[("x", SegMap::new(2, 2, vec![0, 0, 1, 1]).unwrap())]);
    let part = dir.path().join("part.json");
    std::fs::write(&part, r#"{"seen": [0], "unseen": [1]}"#).unwrap();
    let args = ["eval", "--pred", s(&hp), "--gt", s(&hg), "--classes", "a,b", "--partition", s(&part)];
    let report = stdout_json(&ovseg(&args));
    assert!((report["miou"].as_f64().unwrap() - 7.0 / 12.0).abs() < 1e-12);
    assert_eq!(report["seen_miou"], 0.5);
    assert!((report["unseen_miou"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);

    write_masks(&hp, &[("orphan", SegMap::new(2, 2, vec![0; 4]).unwrap())]);
    let out = ovseg(&["eval", "--pred", s(&hp), "--gt", s(&hg), "--classes", "a,b"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("orphan.png"));
}

fn save(dir: &Path, name: &str, rows: usize, cols: usize, f: impl FnMut(usize) -> f64) -> PathBuf {
    let p = dir.join(name);
    save_tensor(&p, &Tensor::from_fn(&[rows, cols], f)).unwrap();
    p
}

#[test]
fn partition_from_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let train = save(dir.path(), "train.bin", 2, 2, |i| [1.0, 0.0, 0.0, 1.0][i]);
    let test = save(dir.path(), "test.bin", 2, 2, |i| [1.0, 0.1, -1.0, 0.2][i]);
    let args = [
        "partition", "--mode", "visual", "--train-classes", "a,b", "--test-classes", "c,d",
        "--train-emb", s(&train), "--test-emb", s(&test), "--eval.threshold", "0.9",
    ];
    let report = stdout_json(&ovseg(&args));
    assert_eq!(report["seen"], serde_json::json!([0]));
    assert_eq!(report["unseen"], serde_json::json!([1]));
    assert_eq!(report["seen_names"], serde_json::json!(["c"]));
    assert!(report["max_similarity"].is_array());

    let wrong = save(dir.path(), "wrong.bin", 3, 2, |_| 1.0);
    let mut bad = args;
    bad[10] = s(&wrong);
    assert_eq!(code(&ovseg(&bad)), 2);
}

#[test]
fn partition_and_embed_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, _) = setup(dir.path());
    let args = ["partition", "--mode", "textual", "--train-classes", "sky,road", "--test-classes", "sky,cloud", "--checkpoint", s(&ck)];
    let report = stdout_json(&ovseg(&args));
    assert!(report["seen"].as_array().unwrap().contains(&serde_json::json!(0)));

    let emb = dir.path().join("emb");
    stdout_json(&ovseg(&["embed", "--checkpoint", s(&ck), "--classes", "sky,road,water", "--out", s(&emb)]));
    let g = ovseg::tensor_io::load_tensor(&emb.join("global.bin")).unwrap();
    assert_eq!(g.shape()[0], 3);

    let from_sidecar = stdout_json(&ovseg(&[
        "partition", "--mode", "textual", "--train-emb", s(&emb.join("global.bin")), "--test-emb", s(&emb.join("local.bin")),
    ]));
    assert_eq!(from_sidecar["seen_names"].as_array().unwrap().len() + from_sidecar["unseen_names"].as_array().unwrap().len(), 3);
    let no_names = ovseg(&["partition", "--mode", "textual", "--checkpoint", s(&ck)]);
    assert_eq!(code(&no_names), 2);
}

#[test]
fn analyze_r2_table() {
    let dir = tempfile::tempdir().unwrap();
    let (n, d) = (60, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut noise = |_| rng.random_range(-1.0..1.0);
    let g: Vec<f64> = (0..n * d).map(&mut noise).collect();
    let l: Vec<f64> = (0..n * d).map(&mut noise).collect();
    let junk: Vec<f64> = (0..n * d).map(&mut noise).collect();
    let gp = save(dir.path(), "g.bin", n, d, |i| g[i]);
    let lp = save(dir.path(), "l.bin", n, d, |i| l[i]);
    let run = |y: &Path, extra: &[&str]| {
        let mut args = vec!["analyze", "--global", s(&gp), "--local", s(&lp), "--prototypes", s(y), "--eval.ridge_alpha", "1e-6"];
        args.extend(extra);
        ovseg(&args)
    };

    let exact = save(dir.path(), "exact.bin", n, d, |i| g[i]);
    let r = stdout_json(&run(&exact, &[]));
    assert!(r["r2"]["global"].as_f64().unwrap() > 0.99);

    let noisy = save(dir.path(), "noise.bin", n, d, |i| junk[i]);
    let r = stdout_json(&run(&noisy, &[]));
    assert!(r["r2"]["concat"].as_f64().unwrap() < 0.1);

    let split = save(dir.path(), "split.bin", n, 2 * d, |i| {
        let (row, col) = (i / (2 * d), i % (2 * d));
        if col < d { g[row * d + col] } else { l[row * d + col - d] }
    });
    let r = stdout_json(&run(&split, &[]));
    let (rg, rl, rc) = (r["r2"]["global"].as_f64().unwrap(), r["r2"]["local"].as_f64().unwrap(), r["r2"]["concat"].as_f64().unwrap());
    assert!(rc > rg.max(rl), "{rg} {rl} {rc}");

    let short = save(dir.path(), "short.bin", n - 1, d, |_| 0.5);
    assert_eq!(code(&run(&short, &[])), 2);
}
