//! Synthetic scenes and the training loop: two-tier AdamW with cosine
//! decay, random patch-aligned crops and horizontal flips.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::decoder::predict;
use crate::error::{arg_err, config_err, Error, Result};
use crate::evaluation::{miou, MiouReport};
use crate::losses::combined_graph;
use crate::math;
use crate::model::Model;
use crate::nn::{Forward, ParamGroup, ParamStore, PathEvent};
use crate::tensor::Tensor;
use crate::types::{ImageTensor, SegMap};

/// Class names used for generated scenes, in class-index order.
pub const VOCABULARY: [&str; 12] =
    ["sky", "grass", "road", "water", "wall", "tree", "sand", "snow", "brick", "carpet", "metal", "cloud"];

const PALETTE: [[f64; 3]; 12] = [
    [0.45, 0.70, 0.95],
    [0.20, 0.65, 0.20],
    [0.35, 0.35, 0.38],
    [0.10, 0.30, 0.65],
    [0.85, 0.80, 0.70],
    [0.05, 0.40, 0.10],
    [0.90, 0.80, 0.45],
    [0.97, 0.97, 0.97],
    [0.70, 0.25, 0.15],
    [0.55, 0.15, 0.45],
    [0.60, 0.62, 0.66],
    [0.80, 0.85, 0.90],
];

pub fn class_name(k: usize) -> String {
    if k < VOCABULARY.len() {
        VOCABULARY[k].to_string()
    } else {
        format!("{}{}", VOCABULARY[k % VOCABULARY.len()], k / VOCABULARY.len())
    }
}

/// Base colour of class `k`.
pub fn class_colour(k: usize) -> [f64; 3] {
    let base = PALETTE[k % PALETTE.len()];
    let shift = (k / PALETTE.len()) as f64 * 0.17;
    base.map(|v| (v + shift) % 1.0)
}

/// An image with its label map and the names of its classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: ImageTensor,
    pub mask: SegMap,
    pub class_names: Vec<String>,
}

/// Renders a scene of patch-aligned regions. Cells of the patch grid are
/// grouped around random seed cells (one seed per class plus a few extra),
/// classes too small to reach 1 % of the image grow around their seed,
/// and each region is painted in its class colour with an oriented stripe
/// texture and light noise.
pub fn generate_scene(seed: u64, n_classes: usize, size: usize, patch: usize) -> Result<SyntheticScene> {
    if n_classes < 2 {
        return Err(arg_err!("need at least two classes, got {n_classes}"));
    }
    if size == 0 || patch == 0 || size % patch != 0 {
        return Err(arg_err!("size {size} must be a positive multiple of the patch size {patch}"));
    }
    let g = size / patch;
    let cells = g * g;
    let quota = libm::ceil(cells as f64 * 0.01) as usize;
    if n_classes * quota > cells {
        return Err(arg_err!("{n_classes} classes do not fit a {g}x{g} cell grid"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra = rng.random_range(0..=2usize).min(cells - n_classes);
    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut rng);
    let seeds: Vec<(usize, usize)> = order[..n_classes + extra]
        .iter()
        .enumerate()
        .map(|(i, &cell)| (cell, if i < n_classes { i } else { rng.random_range(0..n_classes) }))
        .collect();
    let dist = |a: usize, b: usize| {
        let (ay, ax, by, bx) = ((a / g) as i64, (a % g) as i64, (b / g) as i64, (b % g) as i64);
        (ay - by) * (ay - by) + (ax - bx) * (ax - bx)
    };
    let mut owner: Vec<usize> = (0..cells)
        .map(|cell| {
            let mut best = 0;
            for s in 1..seeds.len() {
                if dist(cell, seeds[s].0) < dist(cell, seeds[best].0) {
                    best = s;
                }
            }
            seeds[best].1
        })
        .collect();
    for k in 0..n_classes {
        let centre = seeds[k].0;
        let mut near: Vec<usize> = (0..cells).collect();
        near.sort_by_key(|&c| (dist(c, centre), c));
        for c in near {
            let have = owner.iter().filter(|&&o| o == k).count();
            if have >= quota {
                break;
            }
            let prev = owner[c];
            if prev != k && owner.iter().filter(|&&o| o == prev).count() > quota {
                owner[c] = k;
            }
        }
    }
    let textures: Vec<(f64, f64, f64)> = (0..n_classes)
        .map(|k| {
            let angle = (k % 4) as f64 * core::f64::consts::FRAC_PI_4;
            let period = 4.0 + 2.0 * ((k / 4) % 3) as f64;
            (math::cos(angle), math::sin(angle), period)
        })
        .collect();
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            labels.push(owner[(y / patch) * g + x / patch] as u32);
        }
    }
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let k = labels[y * size + x] as usize;
            let (c, s, period) = textures[k];
            let phase = (x as f64 * c + y as f64 * s) * 2.0 * core::f64::consts::PI / period;
            let stripe = 0.12 * math::sin(phase);
            let colour = class_colour(k);
            for ch in 0..3 {
                let noise = rng.random_range(-0.03..0.03);
                data[(ch * size + y) * size + x] = (colour[ch] + stripe + noise).clamp(0.0, 1.0);
            }
        }
    }
    Ok(SyntheticScene {
        image: ImageTensor::new(Tensor::from_parts(vec![3, size, size], data))?,
        mask: SegMap::new(size, size, labels)?,
        class_names: (0..n_classes).map(class_name).collect(),
    })
}

/// Cosine decay from `base` to `base · floor` over `iters` steps.
pub fn cosine_lr(base: f64, floor: f64, step: usize, iters: usize) -> f64 {
    let lo = base * floor;
    if iters == 0 {
        return base;
    }
    let t = step.min(iters) as f64 / iters as f64;
    lo + (base - lo) * 0.5 * (1.0 + math::cos(core::f64::consts::PI * t))
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect::<Vec<_>>();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; parameters without a gradient still decay.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let b1c = 1.0 - math::powf(self.beta1, self.step as f64);
        let b2c = 1.0 - math::powf(self.beta2, self.step as f64);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let rate = lr(entry.group);
            let p = entry.value.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = grads[i].as_ref().map_or(0.0, |t| t.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / b1c) / (math::sqrt(v[j] / b2c) + self.eps);
                p[j] -= rate * (update + self.weight_decay * p[j]);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub focal: f64,
    pub dice: f64,
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    /// Path events of the first forward pass.
    pub trace: Vec<PathEvent>,
}

/// One-hot targets `[N, H, W]` for a label map.
pub fn one_hot(mask: &SegMap, n_classes: usize) -> Tensor {
    let hw = mask.height * mask.width;
    let mut t = Tensor::zeros(&[n_classes, mask.height, mask.width]);
    for (p, &l) in mask.labels.iter().enumerate() {
        if (l as usize) < n_classes {
            t.data_mut()[l as usize * hw + p] = 1.0;
        }
    }
    t
}

/// Picks a patch-aligned crop window and flip for one sample.
fn augment(scene: &SyntheticScene, cfg: &TrainConfig, patch: usize, rng: &mut ChaCha8Rng) -> Result<(ImageTensor, SegMap, String)> {
    let (h, w) = (scene.image.height(), scene.image.width());
    let ch = cfg.crop.min(h) / patch * patch;
    let cw = cfg.crop.min(w) / patch * patch;
    let top = rng.random_range(0..=(h - ch) / patch) * patch;
    let left = rng.random_range(0..=(w - cw) / patch) * patch;
    let flip = cfg.flip && rng.random_bool(0.5);
    let mut img = scene.image.crop(top, left, ch, cw)?;
    let mut mask = scene.mask.crop(top, left, ch, cw)?;
    if flip {
        img = img.flip_horizontal();
        mask = mask.flip_horizontal();
    }
    Ok((img, mask, format!("crop {ch}x{cw} at ({top}, {left}), flip {flip}")))
}

/// Trains `model` in place. `on_checkpoint` runs every
/// `cfg.checkpoint_every` iterations and after the last one.
pub fn train(
    model: &mut Model,
    data: &[SyntheticScene],
    cfg: &TrainConfig,
    seed: u64,
    on_checkpoint: &mut dyn FnMut(usize, &Model) -> Result<()>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(arg_err!("training set is empty"));
    }
    let patch = model.patch_size();
    cfg.validate(patch)?;
    for (i, s) in data.iter().enumerate() {
        s.image.check_patch_multiple(patch)?;
        if s.class_names.is_empty() || s.mask.labels.iter().any(|&l| l as usize >= s.class_names.len()) {
            return Err(config_err!("scene {i} has labels outside its class list"));
        }
    }
    let groups = model.store().entries().iter().filter(|e| matches!(e.group, ParamGroup::Backbone | ParamGroup::Head)).count();
    assert_eq!(groups, model.store().len(), "every parameter needs a learning-rate group");

    let loss_cfg = cfg.effective_loss();
    let mut opt = AdamW::new(model.store(), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queue: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.iters);
    let mut trace = Vec::new();
    for it in 0..cfg.iters {
        let mut grads: Vec<Option<Tensor>> = vec![None; model.store().len()];
        let (mut focal, mut dice, mut total) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.batch {
            if queue.is_empty() {
                queue = (0..data.len()).collect();
                queue.shuffle(&mut rng);
            }
            let idx = queue.pop().expect("refilled above");
            let scene = &data[idx];
            let (img, mask, desc) = augment(scene, cfg, patch, &mut rng)?;
            let mut f = Forward::new(model.store(), true);
            let logits = model.forward(&mut f, &img, &scene.class_names);
            let prob = f.sigmoid(logits);
            let target = f.constant(one_hot(&mask, scene.class_names.len()));
            let terms = combined_graph(&mut f, prob, target, &loss_cfg);
            let value = f.value(terms.total).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: it, detail: format!("scene {idx}, {desc}, loss {value}") });
            }
            focal += f.value(terms.focal).data()[0];
            dice += terms.dice.map_or(0.0, |d| f.value(d).data()[0]);
            total += value;
            if trace.is_empty() {
                trace = f.trace().to_vec();
            }
            let root = f.scale(terms.total, 1.0 / cfg.batch as f64);
            let mut g = f.backward(root);
            for (acc, new) in grads.iter_mut().zip(f.param_grads(&mut g)) {
                match (acc.as_mut(), new) {
                    (Some(a), Some(n)) => a.data_mut().iter_mut().zip(n.data()).for_each(|(x, y)| *x += y),
                    (None, Some(n)) => *acc = Some(n),
                    _ => {}
                }
            }
        }
        let lb = cosine_lr(cfg.lr_backbone, cfg.lr_floor, it, cfg.iters);
        let lh = cosine_lr(cfg.lr_head, cfg.lr_floor, it, cfg.iters);
        opt.update(model.store_mut(), &grads, |g| match g {
            ParamGroup::Backbone => lb,
            ParamGroup::Head => lh,
        });
        let b = cfg.batch as f64;
        losses.push(LossRecord { iteration: it, focal: focal / b, dice: dice / b, combined: total / b });
        let done = it + 1;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.iters {
            on_checkpoint(done, model)?;
        }
    }
    Ok(TrainReport { losses, trace })
}

/// Single-pass predictions on full scenes scored against their masks.
pub fn evaluate(model: &Model, data: &[SyntheticScene]) -> Result<MiouReport> {
    let n = data.iter().map(|s| s.class_names.len()).max().unwrap_or(0);
    let mut preds = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    for s in data {
        preds.push(predict(&model.logits(&s.image, &s.class_names)?));
        targets.push(s.mask.clone());
    }
    miou(&preds, &targets, n, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::argmax_labels;

    #[test]
    fn scenes_are_deterministic_and_cover_classes() {
        let a = generate_scene(3, 4, 384, 16).unwrap();
        assert_eq!(a, generate_scene(3, 4, 384, 16).unwrap());
        assert_ne!(a.image, generate_scene(4, 4, 384, 16).unwrap().image);
        let total = a.mask.labels.len() as f64;
        for k in 0..4u32 {
            let share = a.mask.labels.iter().filter(|&&l| l == k).count() as f64 / total;
            assert!(share >= 0.01, "class {k} covers {share}");
        }
        assert!(a.mask.labels.iter().all(|&l| l < 4));
        assert_eq!(a.class_names, vec!["sky", "grass", "road", "water"]);
    }

    #[test]
    fn labels_are_constant_per_patch() {
        let s = generate_scene(9, 3, 64, 16).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(s.mask.get(y, x), s.mask.get(y / 16 * 16, x / 16 * 16));
            }
        }
        assert!(generate_scene(0, 1, 64, 16).is_err());
        assert!(generate_scene(0, 3, 60, 16).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(2e-4, 0.0, 0, 100), 2e-4);
        assert!(cosine_lr(2e-4, 0.0, 100, 100).abs() < 1e-20);
        assert!((cosine_lr(1.0, 0.1, 100, 100) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(1.0, 0.0, 50, 100) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w".into(), ParamGroup::Head, Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(&store, 0.0);
        let g = vec![Some(Tensor::new(&[2], vec![0.5, -3.0]).unwrap())];
        opt.update(&mut store, &g, |_| 0.1);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn one_hot_marks_labels() {
        let m = SegMap::new(1, 3, vec![2, 0, 2]).unwrap();
        assert_eq!(one_hot(&m, 3).data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    fn small_cfg(iters: usize) -> TrainConfig {
        TrainConfig { iters, checkpoint_every: 0, ..TrainConfig::desk() }
    }

    fn small_data(n: u64) -> Vec<SyntheticScene> {
        (0..n).map(|i| generate_scene(i, 4, 64, 16).unwrap()).collect()
    }

    #[test]
    fn smoke_run_reduces_loss() {
        let data = small_data(8);
        let mut model = Model::new(&crate::ModelConfig::default(), Default::default(), 0).unwrap();
        let rep = train(&mut model, &data, &small_cfg(50), 0, &mut |_, _| Ok(())).unwrap();
        assert_eq!(rep.losses.len(), 50);
        let head: f64 = rep.losses[..5].iter().map(|r| r.combined).sum::<f64>() / 5.0;
        let tail: f64 = rep.losses[45..].iter().map(|r| r.combined).sum::<f64>() / 5.0;
        assert!(tail < head, "loss went from {head} to {tail}");
        assert!(rep.losses.iter().all(|r| r.combined.is_finite()));
    }

    #[test]
    fn checkpoints_follow_cadence_and_runs_repeat() {
        let data = small_data(2);
        let cfg = TrainConfig { iters: 5, checkpoint_every: 2, batch: 1, ..TrainConfig::desk() };
        let run = || {
            let mut model = Model::new(&crate::ModelConfig::default(), Default::default(), 3).unwrap();
            let mut seen = Vec::new();
            let rep = train(&mut model, &data, &cfg, 7, &mut |it, _| {
                seen.push(it);
                Ok(())
            })
            .unwrap();
            (seen, rep.losses)
        };
        let (a, la) = run();
        let (_, lb) = run();
        assert_eq!(a, vec![2, 4, 5]);
        assert_eq!(la, lb);
    }

    #[test]
    fn non_finite_loss_aborts_with_detail() {
        let data = small_data(1);
        let mut model = Model::new(&crate::ModelConfig::default(), Default::default(), 0).unwrap();
        let last = model.store().len() - 1;
        model.store_mut().entries_mut()[last].value.data_mut()[0] = f64::NAN;
        let err = train(&mut model, &data, &small_cfg(3), 0, &mut |_, _| Ok(())).unwrap_err();
        match err {
            Error::NonFiniteLoss { iteration, detail } => {
                assert_eq!(iteration, 0);
                assert!(detail.contains("scene 0"), "{detail}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_training_sets_rejected() {
        let mut model = Model::new(&crate::ModelConfig::default(), Default::default(), 0).unwrap();
        assert!(train(&mut model, &[], &small_cfg(1), 0, &mut |_, _| Ok(())).is_err());
        let mut s = generate_scene(0, 3, 64, 16).unwrap();
        s.class_names.pop();
        assert!(matches!(train(&mut model, &[s], &small_cfg(1), 0, &mut |_, _| Ok(())), Err(Error::Config(_))));
    }

    #[test]
    fn textures_are_linearly_separable_per_patch() {
        use nalgebra::DMatrix;
        let (p, size, k) = (16, 128, 4);
        let dim = p * p * 3 + 1;
        let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
        for seed in 0..32 {
            let s = generate_scene(100 + seed, k, size, p).unwrap();
            for gy in 0..size / p {
                for gx in 0..size / p {
                    let mut v = Vec::with_capacity(dim);
                    for c in 0..3 {
                        for y in 0..p {
                            for x in 0..p {
                                v.push(s.image.get(c, gy * p + y, gx * p + x));
                            }
                        }
                    }
                    v.push(1.0);
                    rows.push((v, s.mask.get(gy * p, gx * p) as usize));
                }
            }
        }
        let split = rows.len() * 3 / 4;
        let (train_rows, test_rows) = rows.split_at(split);
        let x = DMatrix::from_fn(train_rows.len(), dim, |i, j| train_rows[i].0[j]);
        let y = DMatrix::from_fn(train_rows.len(), k, |i, j| if train_rows[i].1 == j { 1.0 } else { 0.0 });
        let mut gram = x.transpose() * &x;
        for i in 0..dim {
            gram[(i, i)] += 1e-3;
        }
        let w = gram.cholesky().unwrap().solve(&(x.transpose() * y));
        let correct = test_rows
            .iter()
            .filter(|(v, label)| {
                let scores: Vec<f64> = (0..k).map(|j| (0..dim).map(|i| v[i] * w[(i, j)]).sum()).collect();
                argmax_labels(&Tensor::from_parts(vec![k, 1, 1], scores))[0] as usize == *label
            })
            .count();
        let acc = correct as f64 / test_rows.len() as f64;
        assert!(acc >= 0.9, "probe accuracy {acc}");
    }
}
