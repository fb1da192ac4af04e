//! Focal loss, dice loss and their weighted combination over per-class
//! probability maps. The leading axis indexes classes; every loss is
//! averaged over classes.

use crate::autograd::Var;
use crate::config::LossConfig;
use crate::error::{shape_err, Result};
use crate::math;
use crate::nn::{Forward, PathEvent};
use crate::tensor::Tensor;

pub const PROB_MIN: f64 = 1e-7;
pub const PROB_MAX: f64 = 1.0 - 1e-7;

fn check(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() || pred.rank() == 0 || pred.numel() == 0 {
        return Err(shape_err!("prediction {:?} and target {:?} differ", pred.shape(), target.shape()));
    }
    Ok(())
}

pub fn focal_loss(pred: &Tensor, target: &Tensor, gamma: f64) -> Result<f64> {
    check(pred, target)?;
    let mut total = 0.0;
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let p = p.clamp(PROB_MIN, PROB_MAX);
        total += math::powf(1.0 - p, gamma) * y * math::ln(p) + math::powf(p, gamma) * (1.0 - y) * math::ln(1.0 - p);
    }
    Ok(-total / pred.numel() as f64)
}

pub fn dice_loss(pred: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    check(pred, target)?;
    let n = pred.shape()[0];
    let per = pred.numel() / n;
    let mut total = 0.0;
    for c in 0..n {
        let (mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0);
        for i in c * per..(c + 1) * per {
            let (p, y) = (pred.data()[i], target.data()[i]);
            inter += y * p;
            sy += y;
            sp += p;
        }
        total += 1.0 - (2.0 * inter + eps) / (sy + sp + eps);
    }
    Ok(total / n as f64)
}

pub fn combined_loss(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let focal = focal_loss(pred, target, cfg.gamma)?;
    if cfg.lambda == 0.0 {
        return Ok(focal);
    }
    Ok(focal + cfg.lambda * dice_loss(pred, target, cfg.dice_eps)?)
}

/// Graph focal loss; `pred` and `target` share a shape.
pub fn focal_graph(f: &mut Forward, pred: Var, target: Var, gamma: f64) -> Var {
    let p = f.clamp(pred, PROB_MIN, PROB_MAX);
    let q = f.neg(p);
    let q = f.add_scalar(q, 1.0);
    let lp = f.ln(p);
    let lq = f.ln(q);
    let wq = f.powf(q, gamma);
    let wp = f.powf(p, gamma);
    let pos = f.mul(wq, target);
    let pos = f.mul(pos, lp);
    let not_y = f.neg(target);
    let not_y = f.add_scalar(not_y, 1.0);
    let neg = f.mul(wp, not_y);
    let neg = f.mul(neg, lq);
    let s = f.add(pos, neg);
    let m = f.mean_all(s);
    f.neg(m)
}

/// Graph dice loss over `[N, ...]` maps.
pub fn dice_graph(f: &mut Forward, pred: Var, target: Var, eps: f64) -> Var {
    let s = f.shape(pred).to_vec();
    let n = s[0];
    let per = s.iter().product::<usize>() / n;
    let p = f.reshape(pred, &[n, per]);
    let y = f.reshape(target, &[n, per]);
    let yp = f.mul(y, p);
    let inter = f.sum_axis(yp, 1);
    let sy = f.sum_axis(y, 1);
    let sp = f.sum_axis(p, 1);
    let num = f.scale(inter, 2.0);
    let num = f.add_scalar(num, eps);
    let den = f.add(sy, sp);
    let den = f.add_scalar(den, eps);
    let ratio = f.div(num, den);
    let m = f.mean_all(ratio);
    let m = f.neg(m);
    f.add_scalar(m, 1.0)
}

/// Loss terms of one forward pass, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub focal: Var,
    pub dice: Option<Var>,
    pub total: Var,
}

/// `focal + λ·dice` on the graph. With `γ = 0` and `λ = 0` this is plain
/// binary cross-entropy and is traced as such.
pub fn combined_graph(f: &mut Forward, pred: Var, target: Var, cfg: &LossConfig) -> LossTerms {
    let focal = focal_graph(f, pred, target, cfg.gamma);
    if cfg.gamma == 0.0 && cfg.lambda == 0.0 {
        f.record(PathEvent::BinaryCrossEntropy);
    } else {
        f.record(PathEvent::FocalLoss);
    }
    if cfg.lambda == 0.0 {
        return LossTerms { focal, dice: None, total: focal };
    }
    let dice = dice_graph(f, pred, target, cfg.dice_eps);
    f.record(PathEvent::DiceLoss);
    let weighted = f.scale(dice, cfg.lambda);
    let total = f.add(focal, weighted);
    LossTerms { focal, dice: Some(dice), total }
}
