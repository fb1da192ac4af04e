//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ovseg::run_config::RunConfig;
use ovseg_core::autograd::Var;
use ovseg_core::config::{LateConfig, LgaConfig, ModelConfig, RefinerConfig, Toggles, VisionBackbone};
use ovseg_core::correlation::CorrelationProjector;
use ovseg_core::decoder::{argmax_labels, Decoder};
use ovseg_core::early_refinement::EarlyRefiner;
use ovseg_core::evaluation::{miou, partition_classes, ridge_r2, PartitionMode, PrototypeSet};
use ovseg_core::late_refinement::LateRefiner;
use ovseg_core::lga::{merge_tiles, plan_tiles, plan_tiles_for};
use ovseg_core::losses::{combined_graph, combined_loss, dice_graph, dice_loss, focal_graph, focal_loss};
use ovseg_core::nn::{Builder, Forward, ParamGroup, ParamStore, PathEvent};
use ovseg_core::training::{evaluate, generate_scene, train, SyntheticScene};
use ovseg_core::{FeatureMap, ImageTensor, Model, SegMap, Tensor, TextEmbeddingSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Central-difference gradient checking ------------------------------------

type Build<'a> = dyn Fn(&mut Forward, &[Var]) -> Var + 'a;

fn value(store: &ParamStore, inputs: &[Tensor], build: &Build) -> f64 {
    let mut f = Forward::new(store, false);
    let vars: Vec<Var> = inputs.iter().map(|t| f.constant(t.clone())).collect();
    let y = build(&mut f, &vars);
    f.value(y).data()[0]
}

/// Norm-wise relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative error of the full gradient, inputs and parameters concatenated.
fn grad_check(store: &ParamStore, inputs: &[Tensor], build: &Build) -> f64 {
    const H: f64 = 1e-5;
    let mut f = Forward::new(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| f.leaf(t.clone(), true)).collect();
    let y = build(&mut f, &vars);
    assert_eq!(f.value(y).numel(), 1, "gradient check needs a scalar root");
    let mut g = f.backward(y);
    let input_grads: Vec<Tensor> =
        vars.iter().zip(inputs).map(|(&v, t)| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
    let param_grads = f.param_grads(&mut g);
    drop(f);

    let (mut all_analytic, mut all_numeric) = (Vec::new(), Vec::new());
    let mut work = inputs.to_vec();
    for (i, analytic) in input_grads.iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic.numel());
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + H;
            let up = value(store, &work, build);
            work[i].data_mut()[j] = orig - H;
            let down = value(store, &work, build);
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        all_analytic.extend_from_slice(analytic.data());
        all_numeric.extend(numeric);
    }
    let mut params = store.clone();
    for (k, grad) in param_grads.iter().enumerate() {
        let n = params.entries()[k].value.numel();
        let analytic = grad.as_ref().map_or(vec![0.0; n], |t| t.data().to_vec());
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            let orig = params.entries()[k].value.data()[j];
            params.entries_mut()[k].value.data_mut()[j] = orig + H;
            let up = value(&params, inputs, build);
            params.entries_mut()[k].value.data_mut()[j] = orig - H;
            let down = value(&params, inputs, build);
            params.entries_mut()[k].value.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        all_analytic.extend(analytic);
        all_numeric.extend(numeric);
    }
    rel_err(&all_analytic, &all_numeric)
}

/// `Σ out ⊙ r` for a fixed random `r`, turning a tensor output into a scalar.
fn project(f: &mut Forward, out: Var, seed: u64) -> Var {
    let shape = f.shape(out).to_vec();
    let r = f.constant(random(&shape, -1.0, 1.0, &mut rng(seed)));
    let p = f.mul(out, r);
    f.sum_all(p)
}

fn one_hot_like(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| if r.random_bool(0.4) { 1.0 } else { 0.0 })
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut lines = Vec::new();
    let mut ok = true;
    let mut report = |name: &str, err: f64, tol: f64| {
        ok &= err <= tol;
        lines.push(format!("{name} {err:.1e}"));
    };

    let empty = ParamStore::new();
    let pred = random(&[3, 4, 4], 0.05, 0.95, &mut r);
    let target = one_hot_like(&[3, 4, 4], &mut r);
    let t = target.clone();
    let focal = move |f: &mut Forward, v: &[Var]| {
        let y = f.constant(t.clone());
        focal_graph(f, v[0], y, 2.0)
    };
    report("focal", grad_check(&empty, &[pred.clone()], &focal), 1e-6);
    let t = target.clone();
    let dice = move |f: &mut Forward, v: &[Var]| {
        let y = f.constant(t.clone());
        dice_graph(f, v[0], y, 1e-6)
    };
    report("dice", grad_check(&empty, &[pred.clone()], &dice), 1e-6);

    let mut store = ParamStore::new();
    let proj = CorrelationProjector::new(&mut Builder::new(&mut store, &mut rng(1), ParamGroup::Head), 4);
    let inputs = [random(&[1, 4, 4, 6], -1.0, 1.0, &mut r), random(&[2, 6], -1.0, 1.0, &mut r), random(&[2, 6], -1.0, 1.0, &mut r)];
    let corr = |f: &mut Forward, v: &[Var]| {
        let out = proj.correlate(f, v[0], v[1], v[2], true);
        project(f, out, 11)
    };
    report("cosine+projection", grad_check(&store, &inputs, &corr), 1e-4);

    let mut store = ParamStore::new();
    let cfg = RefinerConfig { conv_hidden: 4, channels: 8, qk_dim: 8, heads: 2, window: 3, rope_base: 100.0 };
    let refiner = EarlyRefiner::new(&mut Builder::new(&mut store, &mut rng(2), ParamGroup::Backbone), &cfg, 4, 8);
    let inputs = [random(&[1, 16, 16, 3], -1.0, 1.0, &mut r), random(&[1, 4, 4, 8], -1.0, 1.0, &mut r)];
    let early = |f: &mut Forward, v: &[Var]| {
        let out = refiner.forward(f, v[0], v[1]).out;
        project(f, out, 12)
    };
    report("early attention", grad_check(&store, &inputs, &early), 1e-4);

    let mut store = ParamStore::new();
    let late_cfg = LateConfig { stages: 1, window: 2, heads: 2, mlp_ratio: 2 };
    let late = LateRefiner::new(&mut Builder::new(&mut store, &mut rng(3), ParamGroup::Head), &late_cfg, 8, 6, 6);
    let inputs = [
        random(&[3, 4, 4, 8], -1.0, 1.0, &mut r),
        random(&[1, 4, 4, 6], -1.0, 1.0, &mut r),
        random(&[3, 6], -1.0, 1.0, &mut r),
    ];
    let stage = |f: &mut Forward, v: &[Var]| {
        let out = late.forward(f, v[0], v[1], v[2]);
        project(f, out, 13)
    };
    report("late stage", grad_check(&store, &inputs, &stage), 1e-4);

    let mut store = ParamStore::new();
    let decoder = Decoder::new(&mut Builder::new(&mut store, &mut rng(4), ParamGroup::Head), 8, 6, 4);
    let inputs = [
        random(&[2, 2, 2, 8], -1.0, 1.0, &mut r),
        random(&[1, 2, 2, 6], -1.0, 1.0, &mut r),
        random(&[1, 2, 2, 6], -1.0, 1.0, &mut r),
    ];
    let dec = |f: &mut Forward, v: &[Var]| {
        let out = decoder.forward(f, v[0], v[1], v[2]);
        project(f, out, 14)
    };
    report("decoder", grad_check(&store, &inputs, &dec), 1e-4);

    let elapsed = start.elapsed();
    let detail = format!(
        "rel err: {} (tol 1e-6 losses, 1e-4 modules); {:.1}s (limit 60s)",
        lines.join(", "),
        elapsed.as_secs_f64()
    );
    ensure(ok && elapsed < Duration::from_secs(60), detail)
}

// Value anchoring ---------------------------------------------------------

fn feature_map(c: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> FeatureMap {
    FeatureMap::new(random(&[c, h, w], -1.0, 1.0, r)).unwrap()
}

fn image(h: usize, w: usize, r: &mut ChaCha8Rng) -> ImageTensor {
    ImageTensor::new(random(&[3, h, w], 0.0, 1.0, r)).unwrap()
}

/// Max abs difference between refined features and `Σ_j a_ij v_j`
/// rebuilt from the returned weights and the input features.
fn anchoring_gap(refiner: &EarlyRefiner, store: &ParamStore, img: &ImageTensor, phi: &FeatureMap) -> f64 {
    let out = refiner.refine(store, img, phi).unwrap();
    let (c, h, w) = (phi.channels(), phi.height(), phi.width());
    let hw = h * w;
    let heads = refiner.heads;
    let dv = c / heads;
    let l = out.partition.max_len();
    let (wt, v, y) = (out.weights.data(), phi.tensor().data(), out.features.tensor().data());
    let mut gap: f64 = 0.0;
    for (wi, tokens) in out.partition.windows().iter().enumerate() {
        for (i, &ti) in tokens.iter().enumerate() {
            for hd in 0..heads {
                let row = ((wi * heads + hd) * l + i) * l;
                for d in hd * dv..(hd + 1) * dv {
                    let rebuilt: f64 = tokens.iter().enumerate().map(|(j, &tj)| wt[row + j] * v[d * hw + tj]).sum();
                    gap = gap.max((rebuilt - y[d * hw + ti]).abs());
                }
                let mass: f64 = wt[row..row + tokens.len()].iter().sum();
                gap = gap.max((mass - 1.0).abs());
            }
        }
    }
    gap
}

fn criterion_2() -> Outcome {
    let mut r = rng(202);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let heads = [1, 2, 4][case % 3];
        let window = 1 + case % 4;
        let cfg = RefinerConfig { conv_hidden: 4, channels: 8, qk_dim: 8, heads, window, rope_base: 100.0 };
        let mut store = ParamStore::new();
        let refiner = EarlyRefiner::new(&mut Builder::new(&mut store, &mut rng(case as u64), ParamGroup::Backbone), &cfg, 4, 8);
        let (h, w) = (r.random_range(2..7), r.random_range(2..7));
        worst = worst.max(anchoring_gap(&refiner, &store, &image(4 * h, 4 * w, &mut r), &feature_map(8, h, w, &mut r)));
    }

    let cfg = RefinerConfig { conv_hidden: 4, channels: 8, qk_dim: 8, heads: 2, window: 3, rope_base: 100.0 };
    let mut store = ParamStore::new();
    let refiner = EarlyRefiner::new(&mut Builder::new(&mut store, &mut rng(99), ParamGroup::Backbone), &cfg, 4, 8);
    let levels: Vec<f64> = (0..8).map(|_| r.random_range(-2.0..2.0)).collect();
    let constant = FeatureMap::new(Tensor::from_fn(&[8, 5, 4], |i| levels[i / 20])).unwrap();
    let refined = refiner.refine(&store, &image(20, 16, &mut r), &constant).unwrap().features;
    let const_gap = refined.tensor().max_abs_diff(constant.tensor());

    ensure(
        worst <= 1e-5 && const_gap <= 1e-12,
        format!("max reconstruction gap {worst:.1e} over 20 instances (tol 1e-5); constant input gap {const_gap:.1e} (tol 1e-12)"),
    )
}

// Local-global aggregation -----------------------------------------------

fn criterion_3() -> Outcome {
    let plan = plan_tiles(&LgaConfig { resize: 640, window: 384, overlap: 128, ..LgaConfig::default() }).unwrap();
    let expected = vec![(0, 0), (0, 256), (256, 0), (256, 256)];
    if plan.origins != expected {
        return Err(format!("plan origins {:?}", plan.origins));
    }

    let mut r = rng(303);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let p = [4, 8, 16][r.random_range(0..3)];
        let (gh, gw) = (r.random_range(3..12), r.random_range(3..12));
        let win = r.random_range(1..=gh.min(gw));
        let ov = r.random_range(0..win);
        let c = r.random_range(1..5);
        let plan = plan_tiles_for(gh * p, gw * p, win * p, ov * p).unwrap();
        let tiles: Vec<_> = plan.origins.iter().map(|&o| (o, feature_map(c, win, win, &mut r))).collect();
        let merged = merge_tiles(&tiles, &plan, p).unwrap();
        let mut sum = vec![0.0; c * gh * gw];
        let mut count = vec![0.0; gh * gw];
        for ((row, col), feat) in &tiles {
            for y in 0..win {
                for x in 0..win {
                    let cell = (row / p + y) * gw + col / p + x;
                    count[cell] += 1.0;
                    for ch in 0..c {
                        sum[ch * gh * gw + cell] += feat.tensor().data()[(ch * win + y) * win + x];
                    }
                }
            }
        }
        for (i, m) in merged.tensor().data().iter().enumerate() {
            worst = worst.max((m - sum[i] / count[i % (gh * gw)]).abs());
        }
    }

    let mut cfg = ModelConfig::default();
    cfg.encoder.vision_backbone = VisionBackbone::LinearPatch;
    let model = Model::new(&cfg, Toggles::default(), 7).unwrap();
    let full = LgaConfig::default();
    let big = image(640, 640, &mut r);
    let features_equal = model.lga_features(&big, &full).unwrap() == model.vision_encode(&big).unwrap().1;
    let on = LgaConfig { resize: 64, window: 48, overlap: 16, lga_vlm: true, lga_spe: false };
    let off = LgaConfig { lga_vlm: false, ..on.clone() };
    let names: Vec<String> = ["sky", "road", "grass"].map(String::from).to_vec();
    let small = image(80, 72, &mut r);
    let labels_equal = model.infer(&small, &names, &on).unwrap() == model.infer(&small, &names, &off).unwrap();

    ensure(
        worst <= 1e-6 && features_equal && labels_equal,
        format!(
            "4 tiles at {{0,256}}²; merge vs accumulate/count max diff {worst:.1e} on 50 cases (tol 1e-6); \
             linear-patch LGA on == off: features {features_equal}, labels {labels_equal}"
        ),
    )
}

// Loss values -------------------------------------------------------------

fn criterion_4() -> Outcome {
    let half = Tensor::full(&[1, 1, 1], 0.5);
    let one = Tensor::full(&[1, 1, 1], 1.0);
    let focal = focal_loss(&half, &one, 2.0).unwrap();
    let focal_gap = (focal - 0.25 * std::f64::consts::LN_2).abs();

    let mut r = rng(404);
    let mut bce_gap: f64 = 0.0;
    for _ in 0..20 {
        let p = random(&[3, 5, 5], 0.01, 0.99, &mut r);
        let y = random(&[3, 5, 5], 0.0, 1.0, &mut r);
        let oracle = -p.data().iter().zip(y.data()).map(|(&p, &y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln()).sum::<f64>()
            / p.numel() as f64;
        bce_gap = bce_gap.max((focal_loss(&p, &y, 0.0).unwrap() - oracle).abs());
    }

    let pred = Tensor::new(&[1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let target = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let dice_gap = (dice_loss(&pred, &target, 1e-6).unwrap() - 0.5).abs();

    let preset = RunConfig::preset("paper").unwrap().train.loss;
    let preset_ok = preset.lambda == 0.05 && preset.gamma == 2.0;
    let p = random(&[2, 4, 4], 0.05, 0.95, &mut r);
    let y = one_hot_like(&[2, 4, 4], &mut r);
    let combined = combined_loss(&p, &y, &preset).unwrap();
    let oracle = focal_loss(&p, &y, 2.0).unwrap() + 0.05 * dice_loss(&p, &y, preset.dice_eps).unwrap();
    let store = ParamStore::new();
    let mut f = Forward::new(&store, false);
    let (pv, yv) = (f.constant(p.clone()), f.constant(y.clone()));
    let terms = combined_graph(&mut f, pv, yv, &preset);
    let graph_gap = (f.value(terms.total).data()[0] - combined).abs();
    let combined_gap = (combined - oracle).abs().max(graph_gap);

    ensure(
        focal_gap <= 1e-9 && bce_gap <= 1e-10 && dice_gap <= 1e-6 && preset_ok && combined_gap <= 1e-12,
        format!(
            "focal(0.5, 1, γ=2) gap {focal_gap:.1e} (tol 1e-9); γ=0 vs BCE {bce_gap:.1e} (tol 1e-10); \
             dice hand case gap {dice_gap:.1e} (tol 1e-6); `paper` preset λ={} γ={}, combined gap {combined_gap:.1e}",
            preset.lambda, preset.gamma
        ),
    )
}

// Metric oracle -----------------------------------------------------------

fn brute_miou(pred: &SegMap, truth: &SegMap, classes: u32) -> f64 {
    let (mut sum, mut k) = (0.0, 0);
    for c in 0..classes {
        let p: BTreeSet<usize> = (0..pred.labels.len()).filter(|&i| pred.labels[i] == c).collect();
        let t: BTreeSet<usize> = (0..truth.labels.len()).filter(|&i| truth.labels[i] == c).collect();
        let union = p.union(&t).count();
        if union > 0 {
            sum += p.intersection(&t).count() as f64 / union as f64;
            k += 1;
        }
    }
    sum / k as f64
}

fn criterion_5() -> Outcome {
    let mut r = rng(505);
    let mut mismatches = 0;
    for _ in 0..100 {
        let mut map = || SegMap::new(16, 16, (0..256).map(|_| r.random_range(0..3)).collect()).unwrap();
        let (p, t) = (map(), map());
        if miou(&[p.clone()], &[t.clone()], 3, None).unwrap().miou != brute_miou(&p, &t, 3) {
            mismatches += 1;
        }
    }
    let p = SegMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
    let t = SegMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let hand = miou(&[p], &[t], 2, None).unwrap().miou;
    ensure(
        mismatches == 0 && (hand - 7.0 / 12.0).abs() < 1e-15,
        format!("{mismatches}/100 random pairs differ from set counting (exact); hand case {hand} (7/12)"),
    )
}

// Equivariance ------------------------------------------------------------

fn small_model(seed: u64) -> Model {
    let mut c = ModelConfig::default();
    c.encoder.vision_dim = 16;
    c.encoder.spe_dim = 16;
    c.encoder.text_hidden = 16;
    c.encoder.text_hash_dim = 32;
    c.refiner = RefinerConfig { conv_hidden: 4, channels: 8, qk_dim: 8, heads: 2, window: 3, rope_base: 10000.0 };
    c.corr_channels = 8;
    c.late = LateConfig { stages: 2, window: 2, heads: 2, mlp_ratio: 2 };
    Model::new(&c, Toggles::default(), seed).unwrap()
}

fn criterion_6() -> Outcome {
    let mut r = rng(606);
    let names: Vec<String> = ["sky", "road", "grass", "water", "brick"].map(String::from).to_vec();
    let n = names.len();
    let (mut value_gap, mut perm_agree, mut scale_agree, mut pixels): (f64, usize, usize, usize) = (0.0, 0, 0, 0);
    for seed in 0..5 {
        let model = small_model(seed);
        let img = image(48, 64, &mut r);
        let phi = model.vision_encode(&img).unwrap().1;
        let guidance = model.spe_encode(&img).unwrap();
        let texts = model.text_encode(&names).unwrap();
        let base = model.head_logits(&img, &phi, &guidance, &texts).unwrap().data;
        let labels = argmax_labels(&base);
        pixels += labels.len();

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permuted = model.head_logits(&img, &phi, &guidance, &texts.permuted(&perm)).unwrap().data;
        let hw = labels.len();
        for (k, &src) in perm.iter().enumerate() {
            for p in 0..hw {
                value_gap = value_gap.max((permuted.data()[k * hw + p] - base.data()[src * hw + p]).abs());
            }
        }
        perm_agree += argmax_labels(&permuted).iter().zip(&labels).filter(|&(&a, &b)| perm[a as usize] == b as usize).count();

        let c = texts.dim();
        let sg: Vec<f64> = (0..n).map(|_| r.random_range(0.05..20.0)).collect();
        let sl: Vec<f64> = (0..n).map(|_| r.random_range(0.05..20.0)).collect();
        let scaled = TextEmbeddingSet::new(
            names.clone(),
            Tensor::from_fn(&[n, c], |i| texts.global.data()[i] * sg[i / c]),
            Tensor::from_fn(&[n, c], |i| texts.local.data()[i] * sl[i / c]),
        )
        .unwrap();
        let rescaled = model.head_logits(&img, &phi, &guidance, &scaled).unwrap().data;
        scale_agree += argmax_labels(&rescaled).iter().zip(&labels).filter(|(a, b)| a == b).count();
    }
    ensure(
        perm_agree == pixels && scale_agree == pixels && value_gap <= 1e-9,
        format!(
            "permutation: {perm_agree}/{pixels} labels agree, logit gap {value_gap:.1e}; \
             positive per-class rescaling: {scale_agree}/{pixels} labels agree (5 random models)"
        ),
    )
}

// Learnability and toggle instrumentation -----------------------------------

fn trace_of(toggles: Toggles, data: &[SyntheticScene]) -> Vec<PathEvent> {
    let cfg = RunConfig::desk();
    let mut model = Model::new(&cfg.model, toggles, 0).unwrap();
    let tc = ovseg_core::TrainConfig { iters: 1, batch: 1, toggles, ..cfg.train.clone() };
    train(&mut model, &data[..1], &tc, 0, &mut |_, _| Ok(())).unwrap().trace
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::desk();
    let t = &cfg.train;
    let patch = cfg.model.encoder.patch_size;
    let data: Vec<SyntheticScene> =
        (0..t.scenes as u64).map(|i| generate_scene(cfg.seed + i, t.classes, t.scene_size, patch).unwrap()).collect();

    let full = Toggles::default();
    let has = |tr: &[PathEvent], e: PathEvent| tr.contains(&e);
    let base = trace_of(full, &data);
    let no_ens = trace_of(Toggles { text_ensemble: false, ..full }, &data);
    let no_early = trace_of(Toggles { early_refine: false, ..full }, &data);
    let no_fd = trace_of(Toggles { focal_dice: false, ..full }, &data);
    let paths_ok = has(&base, PathEvent::GlobalSimilarity)
        && has(&base, PathEvent::EarlyRefinement)
        && has(&base, PathEvent::FocalLoss)
        && has(&base, PathEvent::DiceLoss)
        && !has(&base, PathEvent::LocalOnlyProjection)
        && !has(&no_ens, PathEvent::GlobalSimilarity)
        && has(&no_ens, PathEvent::LocalOnlyProjection)
        && !has(&no_early, PathEvent::EarlyRefinement)
        && has(&no_fd, PathEvent::BinaryCrossEntropy)
        && !has(&no_fd, PathEvent::FocalLoss)
        && !has(&no_fd, PathEvent::DiceLoss);

    let mut model = Model::new(&cfg.model, t.toggles, cfg.seed).unwrap();
    let report = train(&mut model, &data, t, cfg.seed, &mut |_, _| Ok(())).unwrap();
    let score = evaluate(&model, &data).unwrap().miou;
    let elapsed = start.elapsed();
    let first = report.losses.first().unwrap().combined;
    let last = report.losses.last().unwrap().combined;
    ensure(
        score >= 0.95 && paths_ok && elapsed < Duration::from_secs(15 * 60),
        format!(
            "train mIoU {score:.4} after {} iterations on {} scenes (need ≥ 0.95); loss {first:.4} -> {last:.4}; \
             toggle paths distinct: {paths_ok}; {:.0}s (limit 900s)",
            t.iters,
            data.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// Analysis tooling --------------------------------------------------------

fn orthonormal(d: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn matmul(x: &Tensor, w: &[Vec<f64>]) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let q = w[0].len();
    Tensor::from_fn(&[n, q], |i| (0..d).map(|k| x.data()[(i / q) * d + k] * w[k][i % q]).sum())
}

fn criterion_8() -> Outcome {
    let mut r = rng(808);
    let (n, d) = (200, 12);
    let alpha = 1e-6;
    let x = random(&[n, d], -1.0, 1.0, &mut r);
    let exact = ridge_r2(&x, &matmul(&x, &orthonormal(d, &mut r)), alpha, 5, 0).unwrap();
    let noise = ridge_r2(&x, &random(&[n, d], -1.0, 1.0, &mut r), alpha, 5, 0).unwrap();

    let xg = random(&[n, d], -1.0, 1.0, &mut r);
    let xl = random(&[n, d], -1.0, 1.0, &mut r);
    let y = {
        let (a, b) = (matmul(&xg, &orthonormal(d, &mut r)), matmul(&xl, &orthonormal(d, &mut r)));
        Tensor::from_fn(&[n, d], |i| a.data()[i] + b.data()[i])
    };
    let concat = Tensor::from_fn(&[n, 2 * d], |i| {
        let (row, col) = (i / (2 * d), i % (2 * d));
        if col < d {
            xg.data()[row * d + col]
        } else {
            xl.data()[row * d + col - d]
        }
    });
    let (rg, rl, rc) = (
        ridge_r2(&xg, &y, alpha, 5, 0).unwrap(),
        ridge_r2(&xl, &y, alpha, 5, 0).unwrap(),
        ridge_r2(&concat, &y, alpha, 5, 0).unwrap(),
    );

    let names = |k: usize| (0..k).map(|i| format!("c{i}")).collect::<Vec<_>>();
    let train = PrototypeSet::new(names(15), random(&[15, 8], -1.0, 1.0, &mut r)).unwrap();
    let test = PrototypeSet::new(names(40), random(&[40, 8], -1.0, 1.0, &mut r)).unwrap();
    let mut monotone = true;
    let mut prev: Option<Vec<usize>> = None;
    for step in 0..40 {
        let threshold = -0.95 + step as f64 * 0.049;
        let seen = partition_classes(&train, &test, threshold, PartitionMode::Visual).unwrap().seen;
        if let Some(p) = &prev {
            monotone &= seen.iter().all(|s| p.contains(s));
        }
        prev = Some(seen);
    }

    ensure(
        exact >= 0.999 && noise < 0.1 && rc > rg.max(rl) && monotone,
        format!(
            "R² exact {exact:.5} (≥ 0.999), noise {noise:.4} (< 0.1), global {rg:.4} / local {rl:.4} / concat {rc:.4}; \
             partition monotone over 40 thresholds: {monotone}"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", criterion_1),
        ("value anchoring", criterion_2),
        ("local-global aggregation", criterion_3),
        ("loss values", criterion_4),
        ("metric oracle", criterion_5),
        ("equivariance", criterion_6),
        ("end-to-end learnability", criterion_7),
        ("analysis tooling", criterion_8),
    ];
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        writeln!(out, "criterion {} {name}: {status} | {detail}", i + 1).unwrap();
        out.flush().unwrap();
    }
    writeln!(out, "acceptance: {} passed, {failed} failed", criteria.len() - failed).unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}
