//! Subcommands. Every command reads its settings from a preset, then an
//! optional `--config` JSON file, then `--section.key value` flags.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ovseg_core::decoder::predict;
use ovseg_core::evaluation::{
    confusion, mask_pool_prototypes, partition_classes, ridge_r2, subset_miou, ClassPartition, PartitionMode,
    PrototypeSet,
};
use ovseg_core::lga::plan_tiles;
use ovseg_core::training::{self, cosine_lr, generate_scene, SyntheticScene};
use ovseg_core::{Model, SegMap, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::error::{invalid, CliError, CliResult};
use crate::images::{self, load_image, load_index_png, pair_dirs, parse_classes};
use crate::run_config::{extract_overrides, RunConfig};
use crate::tensor_io::{load_tensor, save_tensor};

#[derive(Debug, Parser)]
#[command(name = "ovseg", version, about = "Open-vocabulary semantic segmentation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration layered over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset: desk or paper.
    #[arg(long, default_value = "desk")]
    pub preset: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on synthetic scenes (or prepared image/mask pairs).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory with `images/` and `masks/` holding same-stem PNGs.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Class names for `--data` (comma list or file).
        #[arg(long)]
        classes: Option<String>,
    },
    /// Segment one image with a trained checkpoint.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated class names or a file with one per line.
        #[arg(long)]
        classes: String,
        #[arg(long)]
        out: PathBuf,
        /// Force local-global aggregation on.
        #[arg(long, conflicts_with = "no_lga")]
        lga: bool,
        /// Encode the full image only.
        #[arg(long)]
        no_lga: bool,
        /// Also write per-class probabilities as a tensor file.
        #[arg(long)]
        probs: bool,
    },
    /// Score predicted index PNGs against ground truth.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: String,
        /// JSON file with `seen` and `unseen` class index lists.
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Split test classes into seen and unseen by similarity to train classes.
    Partition {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Defaults to the `classes.json` beside `--train-emb`.
        #[arg(long)]
        train_classes: Option<String>,
        #[arg(long)]
        test_classes: Option<String>,
        /// Prototype tensors `[N, D]`, one row per class.
        #[arg(long, requires = "test_emb")]
        train_emb: Option<PathBuf>,
        #[arg(long, requires = "train_emb")]
        test_emb: Option<PathBuf>,
        /// Derive prototypes from a checkpoint instead of tensor files.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image/mask directories for visual prototypes from a checkpoint.
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        test_data: Option<PathBuf>,
    },
    /// Export text embeddings and, with `--data`, mask-pooled visual prototypes.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        classes: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Cross-validated ridge R² of global, local and concatenated text
    /// embeddings predicting visual prototypes.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        global: PathBuf,
        #[arg(long)]
        local: PathBuf,
        #[arg(long)]
        prototypes: PathBuf,
    },
    /// Print the tile plan of the inference settings.
    Tiles {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Visual,
    Textual,
}

impl From<Mode> for PartitionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Visual => PartitionMode::Visual,
            Mode::Textual => PartitionMode::Textual,
        }
    }
}

fn resolve(args: &ConfigArgs, base: Option<RunConfig>, overrides: &[(String, String)]) -> CliResult<RunConfig> {
    let base = match base {
        Some(b) => b,
        None => RunConfig::preset(&args.preset)?,
    };
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path, &base)?,
        None => base,
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn no_overrides(overrides: &[(String, String)], cmd: &str) -> CliResult<()> {
    match overrides.first() {
        Some((k, _)) => Err(invalid(format!("`{cmd}` takes no config flags, got --{k}"))),
        None => Ok(()),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
}

/// Parses `args` (without the program name) and runs the command.
pub fn run(args: Vec<String>) -> CliResult<()> {
    let (rest, overrides) = extract_overrides(args)?;
    let cli = Cli::try_parse_from(std::iter::once("ovseg".to_string()).chain(rest)).map_err(|e| {
        if e.use_stderr() {
            invalid(e.render().to_string())
        } else {
            let _ = e.print();
            std::process::exit(0);
        }
    })?;
    match cli.command {
        Command::Train { cfg, out, seed, data, classes } => {
            let mut cfg = resolve(&cfg, None, &overrides)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cmd_train(&cfg, &out, data.as_deref(), classes.as_deref())
        }
        Command::Infer { cfg, checkpoint, image, classes, out, lga, no_lga, probs } => {
            let names = parse_classes(&classes)?;
            let (manifest, store) = checkpoint::load(&checkpoint)?;
            let base = RunConfig { model: manifest.model.clone(), ..RunConfig::preset(&cfg.preset)? };
            let mut cfg = resolve(&cfg, Some(base), &overrides)?;
            if lga {
                cfg.infer.lga_vlm = true;
            }
            if no_lga {
                cfg.infer.lga_vlm = false;
                cfg.infer.lga_spe = false;
            }
            let model = Model::with_params(&cfg.model, manifest.toggles, &store)
                .map_err(|e| CliError::Mismatch(e.to_string()))?;
            cmd_infer(&model, &cfg, &image, &names, &out, probs)
        }
        Command::Eval { cfg, pred, gt, classes, partition } => {
            let cfg = resolve(&cfg, None, &overrides)?;
            cmd_eval(&cfg, &pred, &gt, &parse_classes(&classes)?, partition.as_deref())
        }
        Command::Partition { cfg, mode, train_classes, test_classes, train_emb, test_emb, checkpoint, train_data, test_data } => {
            let cfg = resolve(&cfg, None, &overrides)?;
            let names = |given: Option<String>, emb: Option<&Path>| match (given, emb) {
                (Some(list), _) => parse_classes(&list),
                (None, Some(emb)) => read_sidecar(emb),
                (None, None) => Err(invalid("class names are required with --checkpoint")),
            };
            let train_names = names(train_classes, train_emb.as_deref())?;
            let test_names = names(test_classes, test_emb.as_deref())?;
            let (train, test) = match (train_emb, test_emb, checkpoint) {
                (Some(a), Some(b), None) => (
                    PrototypeSet::new(train_names, load_tensor(&a)?)?,
                    PrototypeSet::new(test_names, load_tensor(&b)?)?,
                ),
                (None, None, Some(ck)) => {
                    let (_, model) = checkpoint::load_model(&ck, None)?;
                    match mode {
                        Mode::Textual => (
                            PrototypeSet::from_texts(&model.text_encode(&train_names)?),
                            PrototypeSet::from_texts(&model.text_encode(&test_names)?),
                        ),
                        Mode::Visual => {
                            let (Some(a), Some(b)) = (train_data, test_data) else {
                                return Err(invalid("visual prototypes from a checkpoint need --train-data and --test-data"));
                            };
                            (visual_prototypes(&model, &a, &train_names)?, visual_prototypes(&model, &b, &test_names)?)
                        }
                    }
                }
                _ => return Err(invalid("give either --train-emb and --test-emb or --checkpoint")),
            };
            cmd_partition(&train, &test, cfg.eval.threshold, mode.into())
        }
        Command::Embed { checkpoint, classes, out, data } => {
            no_overrides(&overrides, "embed")?;
            let names = parse_classes(&classes)?;
            let (_, model) = checkpoint::load_model(&checkpoint, None)?;
            cmd_embed(&model, &names, &out, data.as_deref())
        }
        Command::Analyze { cfg, global, local, prototypes } => {
            let cfg = resolve(&cfg, None, &overrides)?;
            cmd_analyze(&cfg, &load_tensor(&global)?, &load_tensor(&local)?, &load_tensor(&prototypes)?)
        }
        Command::Tiles { cfg } => {
            let cfg = resolve(&cfg, None, &overrides)?;
            cmd_tiles(&cfg)
        }
    }
}

fn training_data(cfg: &RunConfig, data: Option<&Path>, classes: Option<&str>) -> CliResult<Vec<SyntheticScene>> {
    let patch = cfg.model.encoder.patch_size;
    match data {
        None => (0..cfg.train.scenes)
            .map(|i| Ok(generate_scene(cfg.seed.wrapping_add(i as u64), cfg.train.classes, cfg.train.scene_size, patch)?))
            .collect(),
        Some(dir) => {
            let class_names = parse_classes(classes.ok_or_else(|| invalid("--data needs --classes"))?)?;
            images::read_pairs(dir)?
                .into_iter()
                .map(|(stem, image, mask)| {
                    let (h, w) = (image.height() / patch * patch, image.width() / patch * patch);
                    if h == 0 || w == 0 {
                        return Err(invalid(format!("{stem}: smaller than one {patch}-pixel patch")));
                    }
                    Ok(SyntheticScene { image: image.crop(0, 0, h, w)?, mask: mask.crop(0, 0, h, w)?, class_names: class_names.clone() })
                })
                .collect()
        }
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, data: Option<&Path>, classes: Option<&str>) -> CliResult<()> {
    let scenes = training_data(cfg, data, classes)?;
    create_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let mut model = Model::new(&cfg.model, cfg.train.toggles, cfg.seed)?;
    let seed = cfg.seed;
    let final_iter = cfg.train.iters;
    let mut save_err = None;
    let mut on_checkpoint = |it: usize, m: &Model| {
        let dir = if it == final_iter { out.join("checkpoint") } else { out.join("checkpoints").join(format!("{it:06}")) };
        if let Err(e) = checkpoint::save(&dir, m, it, seed) {
            save_err = Some(e);
            return Err(ovseg_core::Error::Argument("checkpoint could not be written".into()));
        }
        Ok(())
    };
    let report = match training::train(&mut model, &scenes, &cfg.train, cfg.seed, &mut on_checkpoint) {
        Ok(r) => r,
        Err(e) => return Err(save_err.unwrap_or(CliError::Core(e))),
    };

    let path = out.join("loss.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::format(&path, e.to_string()))?;
    let csv_err = |e: csv::Error| CliError::format(&path, e.to_string());
    w.write_record(["iteration", "focal", "dice", "combined", "lr_backbone", "lr_head"]).map_err(csv_err)?;
    let t = &cfg.train;
    for r in &report.losses {
        w.write_record([
            r.iteration.to_string(),
            r.focal.to_string(),
            r.dice.to_string(),
            r.combined.to_string(),
            cosine_lr(t.lr_backbone, t.lr_floor, r.iteration, t.iters).to_string(),
            cosine_lr(t.lr_head, t.lr_floor, r.iteration, t.iters).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let score = training::evaluate(&model, &scenes)?;
    print_json(&json!({
        "iterations": t.iters,
        "scenes": scenes.len(),
        "seed": cfg.seed,
        "initial_loss": report.losses.first().map(|r| r.combined),
        "final_loss": report.losses.last().map(|r| r.combined),
        "train_miou": score.miou,
        "checkpoint": out.join("checkpoint"),
    }));
    Ok(())
}

pub fn cmd_infer(model: &Model, cfg: &RunConfig, image: &Path, names: &[String], out: &Path, probs: bool) -> CliResult<()> {
    let img = load_image(image)?;
    let lga = &cfg.infer;
    lga.validate()?;
    let resized = img.resize(lga.resize, lga.resize);
    let phi = model.lga_features(&resized, lga)?;
    let guidance = model.lga_guidance(&resized, lga)?;
    let texts = model.text_encode(names)?;
    let pred = predict(&model.head_logits(&resized, &phi, &guidance, &texts)?);
    let labels = pred.resize_nearest(img.height(), img.width());

    create_dir(out)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let index = out.join(format!("{stem}_index.png"));
    let color = out.join(format!("{stem}_color.png"));
    images::save_index_png(&index, &labels)?;
    images::save_color_png(&color, &labels)?;
    let mut report = json!({ "index": index, "color": color, "classes": names, "lga": lga.lga_vlm });
    if probs {
        let p = pred.probabilities.as_ref().expect("predict fills probabilities");
        let path = out.join(format!("{stem}_probs.bin"));
        save_tensor(&path, &images::resize_planes(p, img.height(), img.width()))?;
        report["probabilities"] = json!(path);
    }
    print_json(&report);
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PartitionFile {
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct ClassScore<'a> {
    name: &'a str,
    iou: Option<f64>,
}

pub fn cmd_eval(cfg: &RunConfig, pred: &Path, gt: &Path, names: &[String], partition: Option<&Path>) -> CliResult<()> {
    let pairs = pair_dirs(pred, gt)?;
    let mut preds = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for (stem, p, g) in &pairs {
        let (p, g): (SegMap, SegMap) = (load_index_png(p)?, load_index_png(g)?);
        if (p.height, p.width) != (g.height, g.width) {
            return Err(invalid(format!("{stem}: prediction and ground truth sizes differ")));
        }
        preds.push(p);
        targets.push(g);
    }
    let cm = confusion(&preds, &targets, names.len(), cfg.eval.ignore_label)?;
    let iou = cm.iou();
    let per_class: Vec<_> = names.iter().zip(&iou).map(|(n, &v)| ClassScore { name: n, iou: v }).collect();
    let mut report = json!({ "images": pairs.len(), "miou": cm.mean_iou()?, "per_class": per_class });
    if let Some(path) = partition {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file: PartitionFile = serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))?;
        let part = ClassPartition {
            seen: file.seen,
            unseen: file.unseen,
            threshold: cfg.eval.threshold,
            mode: PartitionMode::Textual,
            max_similarity: Vec::new(),
        };
        let sub = subset_miou(&cm, &part)?;
        report["seen_miou"] = json!(sub.seen);
        report["unseen_miou"] = json!(sub.unseen);
    }
    print_json(&report);
    Ok(())
}

fn visual_prototypes(model: &Model, dir: &Path, names: &[String]) -> CliResult<PrototypeSet> {
    let mut feats = Vec::new();
    let mut masks = Vec::new();
    for (_, image, mask) in images::read_pairs(dir)? {
        let p = model.patch_size();
        let (h, w) = (image.height() / p * p, image.width() / p * p);
        feats.push(model.vision_encode(&image.crop(0, 0, h, w)?)?.1);
        masks.push(mask.crop(0, 0, h, w)?);
    }
    let pooled = mask_pool_prototypes(&feats, &masks, names)?;
    if !pooled.absent.is_empty() {
        let missing: Vec<_> = pooled.absent.iter().map(|&k| names[k].as_str()).collect();
        return Err(invalid(format!("no pixels for classes: {}", missing.join(", "))));
    }
    Ok(pooled.set)
}

pub fn cmd_partition(train: &PrototypeSet, test: &PrototypeSet, threshold: f64, mode: PartitionMode) -> CliResult<()> {
    let part = partition_classes(train, test, threshold, mode)?;
    let names = |idx: &[usize]| -> Vec<&str> { idx.iter().map(|&i| test.class_names[i].as_str()).collect() };
    print_json(&json!({
        "mode": part.mode,
        "threshold": part.threshold,
        "seen": part.seen,
        "unseen": part.unseen,
        "seen_names": names(&part.seen),
        "unseen_names": names(&part.unseen),
        "max_similarity": part.max_similarity,
    }));
    Ok(())
}

const SIDECAR: &str = "classes.json";

/// Class names stored beside an exported embedding tensor.
fn read_sidecar(tensor: &Path) -> CliResult<Vec<String>> {
    let path = tensor.with_file_name(SIDECAR);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let names: Vec<String> = serde_json::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))?;
    if names.is_empty() {
        return Err(invalid(format!("{}: class list is empty", path.display())));
    }
    Ok(names)
}

pub fn cmd_embed(model: &Model, names: &[String], out: &Path, data: Option<&Path>) -> CliResult<()> {
    let texts = model.text_encode(names)?;
    create_dir(out)?;
    save_tensor(&out.join("global.bin"), &texts.global)?;
    save_tensor(&out.join("local.bin"), &texts.local)?;
    write_json(&out.join(SIDECAR), &names)?;
    let mut report = json!({ "classes": names, "global": out.join("global.bin"), "local": out.join("local.bin") });
    if let Some(dir) = data {
        let protos = visual_prototypes(model, dir, names)?;
        save_tensor(&out.join("prototypes.bin"), &protos.vectors)?;
        report["prototypes"] = json!(out.join("prototypes.bin"));
    }
    print_json(&report);
    Ok(())
}

/// Rows of `a` followed by rows of `b`, side by side.
pub fn concat_columns(a: &Tensor, b: &Tensor) -> CliResult<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(invalid(format!("cannot concatenate {:?} and {:?}", a.shape(), b.shape())));
    }
    let (n, ca, cb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut d = Vec::with_capacity(n * (ca + cb));
    for r in 0..n {
        d.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        d.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    Ok(Tensor::new(&[n, ca + cb], d)?)
}

pub fn cmd_analyze(cfg: &RunConfig, global: &Tensor, local: &Tensor, protos: &Tensor) -> CliResult<()> {
    for (name, t) in [("global", global), ("local", local), ("prototypes", protos)] {
        if t.rank() != 2 {
            return Err(invalid(format!("{name} must be a matrix, got shape {:?}", t.shape())));
        }
    }
    let n = protos.shape()[0];
    if global.shape()[0] != n || local.shape()[0] != n {
        return Err(invalid(format!(
            "row counts differ: global {}, local {}, prototypes {n}",
            global.shape()[0],
            local.shape()[0]
        )));
    }
    if global.shape()[1] != local.shape()[1] {
        return Err(invalid(format!("global width {} differs from local width {}", global.shape()[1], local.shape()[1])));
    }
    let e = &cfg.eval;
    let concat = concat_columns(global, local)?;
    let rows = [("global", global), ("local", local), ("concat", &concat)];
    let mut scores = serde_json::Map::new();
    let mut table = String::from("input     R²\n");
    for (name, x) in rows {
        let r2 = ridge_r2(x, protos, e.ridge_alpha, e.folds, cfg.seed)?;
        table += &format!("{name:<9} {r2:.4}\n");
        scores.insert(name.into(), json!(r2));
    }
    let _ = std::io::stderr().write_all(table.as_bytes());
    print_json(&json!({ "alpha": e.ridge_alpha, "folds": e.folds, "seed": cfg.seed, "r2": scores }));
    Ok(())
}

pub fn cmd_tiles(cfg: &RunConfig) -> CliResult<()> {
    let plan = plan_tiles(&cfg.infer)?;
    let cov = plan.coverage();
    print_json(&json!({
        "size": plan.height,
        "window": plan.window,
        "overlap": plan.overlap,
        "stride": plan.stride,
        "count": plan.len(),
        "origins": plan.origins,
        "coverage_min": cov.iter().min(),
        "coverage_max": cov.iter().max(),
    }));
    Ok(())
}
