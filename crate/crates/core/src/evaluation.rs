//! mIoU evaluation, seen/unseen class partitioning, ridge-regression R²
//! between text embeddings and visual prototypes, and mask pooling.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;
use crate::types::{FeatureMap, SegMap, TextEmbeddingSet};

/// `N×N` pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
    pub ignore_label: Option<u32>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize, ignore_label: Option<u32>) -> Self {
        ConfusionMatrix { n: n_classes, counts: vec![0; n_classes * n_classes], ignore_label }
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &SegMap, target: &SegMap) -> Result<()> {
        if (pred.height, pred.width) != (target.height, target.width) {
            return Err(shape_err!(
                "prediction {}x{} and target {}x{} differ",
                pred.height,
                pred.width,
                target.height,
                target.width
            ));
        }
        let n = self.n as u32;
        for (&p, &t) in pred.labels.iter().zip(&target.labels) {
            if Some(t) == self.ignore_label {
                continue;
            }
            if t >= n || p >= n {
                return Err(arg_err!("label {} out of range for {} classes", t.max(p), n));
            }
            self.counts[(t * n + p) as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(shape_err!("cannot merge {}- and {}-class matrices", self.n, other.n));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU, `None` where the class has an empty union.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.n).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..self.n).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Result<f64> {
        mean_defined(self.iou().into_iter()).ok_or_else(|| Error::UndefinedMetric("every class has an empty union".into()))
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut k) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        k += 1;
    }
    (k > 0).then(|| sum / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn miou(preds: &[SegMap], targets: &[SegMap], n_classes: usize, ignore_label: Option<u32>) -> Result<MiouReport> {
    let cm = confusion(preds, targets, n_classes, ignore_label)?;
    Ok(MiouReport { per_class: cm.iou(), miou: cm.mean_iou()? })
}

pub fn confusion(
    preds: &[SegMap],
    targets: &[SegMap],
    n_classes: usize,
    ignore_label: Option<u32>,
) -> Result<ConfusionMatrix> {
    if preds.len() != targets.len() {
        return Err(shape_err!("{} predictions for {} targets", preds.len(), targets.len()));
    }
    let mut cm = ConfusionMatrix::new(n_classes, ignore_label);
    for (p, t) in preds.iter().zip(targets) {
        cm.accumulate(p, t)?;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Mask-pooled visual prototypes.
    Visual,
    /// Concatenated global and local text embeddings.
    Textual,
}

/// Named class vectors, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub class_names: Vec<String>,
    pub vectors: Tensor,
}

impl PrototypeSet {
    pub fn new(class_names: Vec<String>, vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 || vectors.shape()[0] != class_names.len() {
            return Err(shape_err!(
                "{} class names for prototype matrix {:?}",
                class_names.len(),
                vectors.shape()
            ));
        }
        if !vectors.is_finite() {
            return Err(Error::Numeric("prototype vectors must be finite".into()));
        }
        Ok(PrototypeSet { class_names, vectors })
    }

    /// Textual class representation: `global ‖ local` per class.
    pub fn from_texts(texts: &TextEmbeddingSet) -> Self {
        let (n, c) = (texts.len(), texts.dim());
        let mut d = Vec::with_capacity(n * 2 * c);
        for r in 0..n {
            d.extend_from_slice(&texts.global.data()[r * c..(r + 1) * c]);
            d.extend_from_slice(&texts.local.data()[r * c..(r + 1) * c]);
        }
        PrototypeSet { class_names: texts.class_names.clone(), vectors: Tensor::from_parts(vec![n, 2 * c], d) }
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.dim();
        &self.vectors.data()[i * c..(i + 1) * c]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub threshold: f64,
    pub mode: PartitionMode,
    /// Highest cosine similarity of each test class to any train class.
    pub max_similarity: Vec<f64>,
}

/// A test class is seen when its best cosine similarity to a train class
/// strictly exceeds `threshold`.
pub fn partition_classes(
    train: &PrototypeSet,
    test: &PrototypeSet,
    threshold: f64,
    mode: PartitionMode,
) -> Result<ClassPartition> {
    if train.dim() != test.dim() {
        return Err(shape_err!("train width {} does not match test width {}", train.dim(), test.dim()));
    }
    if !(threshold > -1.0) {
        return Err(arg_err!("threshold must exceed -1, got {threshold}"));
    }
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    let mut max_similarity = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let best = (0..train.len()).map(|j| math::cosine(test.row(i), train.row(j))).fold(f64::NEG_INFINITY, f64::max);
        max_similarity.push(best);
        if best > threshold {
            seen.push(i);
        } else {
            unseen.push(i);
        }
    }
    Ok(ClassPartition { seen, unseen, threshold, mode, max_similarity })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMiou {
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
}

/// Mean IoU over each side of the partition; an empty side (or one whose
/// classes all have empty unions) is `None`.
pub fn subset_miou(cm: &ConfusionMatrix, partition: &ClassPartition) -> Result<SubsetMiou> {
    let iou = cm.iou();
    let pick = |idx: &[usize]| -> Result<Option<f64>> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= iou.len()) {
            return Err(arg_err!("class index {bad} out of range for {} classes", iou.len()));
        }
        Ok(mean_defined(idx.iter().map(|&i| iou[i])))
    };
    Ok(SubsetMiou { seen: pick(&partition.seen)?, unseen: pick(&partition.unseen)? })
}

fn normalized_rows(m: &Tensor) -> DMatrix<f64> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = DMatrix::from_row_slice(r, c, m.data());
    for mut row in out.row_iter_mut() {
        let n = math::sqrt(row.iter().map(|v| v * v).sum());
        if n >= math::NORM_EPS {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// Seeded shuffle of `0..n` split into `folds` contiguous blocks.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..folds).map(|k| idx[k * n / folds..(k + 1) * n / folds].to_vec()).collect()
}

/// Cross-validated R² of a ridge regression predicting `y` rows from `x`
/// rows. Rows of both are L2-normalized first; each fold fits an
/// intercept by centering. R² is pooled over the held-out predictions
/// and averaged uniformly over output dimensions.
pub fn ridge_r2(x: &Tensor, y: &Tensor, alpha: f64, folds: usize, seed: u64) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(shape_err!("ridge inputs {:?} and {:?} need matching rows", x.shape(), y.shape()));
    }
    let n = x.shape()[0];
    if folds < 2 {
        return Err(arg_err!("need at least 2 folds, got {folds}"));
    }
    if n < folds {
        return Err(arg_err!("{n} rows cannot fill {folds} folds"));
    }
    ridge_r2_folds(x, y, alpha, &fold_assignment(n, folds, seed))
}

/// [`ridge_r2`] with an explicit held-out split; `folds` must partition
/// the row indices into non-empty blocks.
pub fn ridge_r2_folds(x: &Tensor, y: &Tensor, alpha: f64, folds: &[Vec<usize>]) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(shape_err!("ridge inputs {:?} and {:?} need matching rows", x.shape(), y.shape()));
    }
    let n = x.shape()[0];
    let mut hits = vec![0u32; n];
    for &i in folds.iter().flatten() {
        if i >= n {
            return Err(arg_err!("fold row {i} out of range for {n} rows"));
        }
        hits[i] += 1;
    }
    if folds.len() < 2 || folds.iter().any(|f| f.is_empty()) || hits.iter().any(|&h| h != 1) {
        return Err(arg_err!("folds must split the {n} rows into at least 2 non-empty disjoint blocks"));
    }
    if !(alpha >= 0.0) {
        return Err(arg_err!("alpha must be non-negative"));
    }
    let (xs, ys) = (normalized_rows(x), normalized_rows(y));
    let (d, q) = (xs.ncols(), ys.ncols());
    let mut pred = DMatrix::<f64>::zeros(n, q);
    for test in folds {
        let train: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
        let xt = xs.select_rows(&train);
        let yt = ys.select_rows(&train);
        let xm = xt.row_mean();
        let ym = yt.row_mean();
        let mut xc = xt;
        let mut yc = yt;
        for mut r in xc.row_iter_mut() {
            r -= &xm;
        }
        for mut r in yc.row_iter_mut() {
            r -= &ym;
        }
        let mut a = xc.transpose() * &xc;
        for i in 0..d {
            a[(i, i)] += alpha;
        }
        let scale = (0..d).map(|i| a[(i, i)]).fold(0.0, f64::max);
        let chol = a.cholesky().ok_or_else(|| Error::Numeric("ridge system is singular".into()))?;
        let l = chol.l_dirty();
        let min_pivot = (0..d).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Numeric("ridge system is singular".into()));
        }
        let coef = chol.solve(&(xc.transpose() * &yc));
        for &i in test {
            let xi = xs.row(i) - &xm;
            let p = xi * &coef + &ym;
            pred.set_row(i, &p);
        }
    }
    let ymean = ys.row_mean();
    let mut total = 0.0;
    for j in 0..q {
        let (mut res, mut tot) = (0.0, 0.0);
        for i in 0..n {
            let (e, t) = (ys[(i, j)] - pred[(i, j)], ys[(i, j)] - ymean[j]);
            res += e * e;
            tot += t * t;
        }
        total += if tot > 0.0 {
            1.0 - res / tot
        } else if res == 0.0 {
            1.0
        } else {
            0.0
        };
    }
    Ok(total / q as f64)
}

/// Mask-pooled class prototypes with the pixel counts behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledPrototypes {
    /// Rows for the classes that occur at least once.
    pub set: PrototypeSet,
    /// Class index of each row of `set`.
    pub classes: Vec<usize>,
    /// Cell count of each row of `set`.
    pub counts: Vec<u64>,
    /// Classes that never occur.
    pub absent: Vec<usize>,
}

/// Per-class mean feature vector over every cell labelled with that class.
/// Masks are resampled to the feature grid by nearest neighbour; labels
/// outside `0..class_names.len()` are skipped.
pub fn mask_pool_prototypes(features: &[FeatureMap], masks: &[SegMap], class_names: &[String]) -> Result<PooledPrototypes> {
    if features.len() != masks.len() || features.is_empty() {
        return Err(shape_err!("{} feature maps for {} masks", features.len(), masks.len()));
    }
    let n = class_names.len();
    let c = features[0].channels();
    let mut sums = vec![0.0; n * c];
    let mut counts = vec![0u64; n];
    for (feat, mask) in features.iter().zip(masks) {
        if feat.channels() != c {
            return Err(shape_err!("feature widths differ: {} vs {}", feat.channels(), c));
        }
        let (h, w) = (feat.height(), feat.width());
        let m = if (mask.height, mask.width) == (h, w) { mask.clone() } else { mask.resize_nearest(h, w) };
        let d = feat.tensor().data();
        for y in 0..h {
            for x in 0..w {
                let label = m.get(y, x) as usize;
                if label >= n {
                    continue;
                }
                counts[label] += 1;
                for ch in 0..c {
                    sums[label * c + ch] += d[(ch * h + y) * w + x];
                }
            }
        }
    }
    let mut names = Vec::new();
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    let mut kept = Vec::new();
    let mut absent = Vec::new();
    for k in 0..n {
        if counts[k] == 0 {
            absent.push(k);
            continue;
        }
        names.push(class_names[k].clone());
        rows.extend(sums[k * c..(k + 1) * c].iter().map(|s| s / counts[k] as f64));
        classes.push(k);
        kept.push(counts[k]);
    }
    let set = PrototypeSet { vectors: Tensor::from_parts(vec![names.len(), c], rows), class_names: names };
    Ok(PooledPrototypes { set, classes, counts: kept, absent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use rand::Rng;

    fn seg(h: usize, w: usize, l: &[u32]) -> SegMap {
        SegMap::new(h, w, l.to_vec()).unwrap()
    }

    #[test]
    fn hand_case_seven_twelfths() {
        let t = seg(2, 2, &[0, 0, 1, 1]);
        let p = seg(2, 2, &[0, 1, 1, 1]);
        let r = miou(&[p.clone()], &[t.clone()], 2, None).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
        let cm = confusion(&[p], &[t], 2, None).unwrap();
        let part = ClassPartition {
            seen: vec![0],
            unseen: vec![1],
            threshold: 0.9,
            mode: PartitionMode::Visual,
            max_similarity: vec![],
        };
        let s = subset_miou(&cm, &part).unwrap();
        assert_eq!((s.seen, s.unseen), (Some(0.5), Some(2.0 / 3.0)));
    }

    #[test]
    fn perfect_prediction_and_undefined() {
        let t = seg(2, 2, &[0, 2, 2, 0]);
        assert_eq!(miou(&[t.clone()], &[t.clone()], 3, None).unwrap().miou, 1.0);
        let all_ignored = seg(1, 2, &[255, 255]);
        assert!(matches!(miou(&[t.clone()], &[all_ignored], 3, Some(255)), Err(Error::Shape(_))));
        let ign = seg(2, 2, &[255; 4]);
        assert!(matches!(miou(&[t.clone()], &[ign], 3, Some(255)), Err(Error::UndefinedMetric(_))));
        assert!(miou(&[seg(1, 1, &[5])], &[seg(1, 1, &[0])], 3, None).is_err());
    }

    #[test]
    fn all_seen_matches_overall() {
        let t = seg(2, 2, &[0, 1, 2, 1]);
        let p = seg(2, 2, &[0, 1, 1, 1]);
        let cm = confusion(&[p], &[t], 3, None).unwrap();
        let part = ClassPartition {
            seen: vec![0, 1, 2],
            unseen: vec![],
            threshold: 0.9,
            mode: PartitionMode::Textual,
            max_similarity: vec![],
        };
        let s = subset_miou(&cm, &part).unwrap();
        assert_eq!(s.seen, Some(cm.mean_iou().unwrap()));
        assert_eq!(s.unseen, None);
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| alloc::format!("c{i}")).collect()
    }

    #[test]
    fn partition_identical_and_unreachable() {
        let train = PrototypeSet::new(names(2), Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let test = PrototypeSet::new(names(2), Tensor::new(&[2, 2], vec![2.0, 0.0, -1.0, -1.0]).unwrap()).unwrap();
        let p = partition_classes(&train, &test, 0.999, PartitionMode::Visual).unwrap();
        assert_eq!((p.seen, p.unseen), (vec![0], vec![1]));
        let p = partition_classes(&train, &test, 1.5, PartitionMode::Visual).unwrap();
        assert!(p.seen.is_empty());
        let wide = PrototypeSet::new(names(1), Tensor::zeros(&[1, 3])).unwrap();
        assert!(partition_classes(&train, &wide, 0.9, PartitionMode::Visual).is_err());
    }

    #[test]
    fn textual_prototypes_concatenate() {
        let t = TextEmbeddingSet::new(
            vec!["a".to_string()],
            Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(),
            Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(PrototypeSet::from_texts(&t).vectors.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pooling_hand_average_and_absence() {
        let feat = FeatureMap::new(Tensor::new(&[1, 1, 3], vec![1.0, 3.0, 10.0]).unwrap()).unwrap();
        let mask = seg(1, 3, &[2, 2, 0]);
        let p = mask_pool_prototypes(&[feat], &[mask], &names(3)).unwrap();
        assert_eq!(p.classes, vec![0, 2]);
        assert_eq!(p.absent, vec![1]);
        assert_eq!(p.set.vectors.data(), &[10.0, 2.0]);
        assert_eq!(p.counts, vec![1, 2]);
    }

    #[test]
    fn ridge_argument_errors() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(matches!(ridge_r2(&x, &x, 1.0, 5, 0), Err(Error::Argument(_))));
        assert!(matches!(ridge_r2(&x, &Tensor::zeros(&[4, 2]), 1.0, 2, 0), Err(Error::Shape(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // more features than training rows: singular without regularization
        let x = Tensor::from_fn(&[6, 10], |_| rng.random_range(-1.0..1.0));
        let y = Tensor::from_fn(&[6, 2], |_| rng.random_range(-1.0..1.0));
        assert!(matches!(ridge_r2(&x, &y, 0.0, 3, 0), Err(Error::Numeric(_))));
        assert!(ridge_r2(&x, &y, 1.0, 3, 0).is_ok());
    }

    #[test]
    fn folds_partition_rows() {
        let f = fold_assignment(11, 5, 7);
        let mut all: Vec<usize> = f.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert!(f.iter().all(|k| k.len() == 2 || k.len() == 3));
    }
}
