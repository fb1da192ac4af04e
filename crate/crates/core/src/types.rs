//! Domain tensors passed between pipeline stages.
//!
//! Public types use channel-first layouts (`C×H×W`); graph code works
//! channels-last and converts at the boundary.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::nn::bilinear_matrix;
use crate::tensor::Tensor;

/// RGB image `3×H×W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(shape_err!("image must be 3×H×W with H, W > 0, got {:?}", s));
        }
        if !data.is_finite() {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        Ok(ImageTensor { data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let t = Tensor::from_fn(&[3, height, width], |i| {
            let c = i / (height * width);
            let r = i % (height * width);
            f(c, r / width, r % width)
        });
        ImageTensor { data: t }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Checks both sides are positive multiples of `patch`.
    pub fn check_patch_multiple(&self, patch: usize) -> Result<()> {
        if self.height() % patch != 0 {
            return Err(shape_err!(
                "image height {} is not divisible by patch size {}",
                self.height(),
                patch
            ));
        }
        if self.width() % patch != 0 {
            return Err(shape_err!(
                "image width {} is not divisible by patch size {}",
                self.width(),
                patch
            ));
        }
        Ok(())
    }

    /// Channels-last copy `[1, H, W, 3]`.
    pub fn to_nhwc(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        self.data.permute(&[1, 2, 0]).reshape(&[1, h, w, 3]).expect("nhwc reshape")
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() {
            return Err(arg_err!(
                "crop {}x{} at ({}, {}) exceeds image {}x{}",
                height,
                width,
                top,
                left,
                self.height(),
                self.width()
            ));
        }
        Ok(Self::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x)))
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width();
        Self::from_fn(self.height(), w, |c, y, x| self.get(c, y, w - 1 - x))
    }

    /// Bilinear resize with half-pixel centres; aspect ratio is not kept.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height() && width == self.width() {
            return self.clone();
        }
        ImageTensor { data: resize_chw(&self.data, height, width) }
    }
}

/// Bilinear resize of a `C×H×W` tensor.
pub(crate) fn resize_chw(t: &Tensor, height: usize, width: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let ah = bilinear_matrix(h, height);
    let aw_t = bilinear_matrix(w, width).permute(&[1, 0]);
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = Tensor::from_parts(alloc::vec![h, w], t.data()[ch * h * w..(ch + 1) * h * w].to_vec());
        let rows = ah.matmul(&plane).expect("resize rows");
        let both = rows.matmul(&aw_t).expect("resize cols");
        out.extend_from_slice(both.data());
    }
    Tensor::from_parts(alloc::vec![c, height, width], out)
}

/// Dense patch features `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
}

impl FeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 {
            return Err(shape_err!("feature map must be C×H×W with H, W ≥ 1, got {:?}", s));
        }
        if !data.is_finite() {
            return Err(Error::Numeric("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap { data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap { data: Tensor::zeros(&[channels, height, width]) }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Feature vector at one grid cell.
    pub fn vector(&self, y: usize, x: usize) -> Vec<f64> {
        let (h, w) = (self.height(), self.width());
        (0..self.channels()).map(|c| self.data.data()[(c * h + y) * w + x]).collect()
    }

    /// Channels-last copy `[1, H, W, C]`.
    pub fn to_nhwc(&self) -> Tensor {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        self.data.permute(&[1, 2, 0]).reshape(&[1, h, w, c]).expect("nhwc reshape")
    }

    /// Builds a map from a channels-last `[.., H, W, C]` tensor with a
    /// leading batch of one.
    pub fn from_nhwc(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() < 3 || s[..s.len() - 3].iter().product::<usize>() != 1 {
            return Err(shape_err!("expected [1, H, W, C], got {:?}", s));
        }
        let r = s.len();
        let (h, w, c) = (s[r - 3], s[r - 2], s[r - 1]);
        let hwc = t.clone().reshape(&[h, w, c])?;
        FeatureMap::new(hwc.permute(&[2, 0, 1]))
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.data.shape() == other.data.shape()
    }
}

/// Image-level `[CLS]` embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsToken {
    pub data: Vec<f64>,
}

/// Per-class global and local text embeddings with their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingSet {
    pub class_names: Vec<String>,
    /// `N×C`, aligned with the image-level token.
    pub global: Tensor,
    /// `N×C`, aligned with averaged patch features.
    pub local: Tensor,
    /// `N×C`, `(global + local) / 2`.
    pub mean: Tensor,
}

impl TextEmbeddingSet {
    pub fn new(class_names: Vec<String>, global: Tensor, local: Tensor) -> Result<Self> {
        let n = class_names.len();
        if global.rank() != 2 || global.shape() != local.shape() || global.shape()[0] != n {
            return Err(shape_err!(
                "text embeddings must be N×C for {} classes, got {:?} / {:?}",
                n,
                global.shape(),
                local.shape()
            ));
        }
        let c = global.shape()[1];
        for (name, m) in [("global", &global), ("local", &local)] {
            for r in 0..n {
                let norm: f64 = m.data()[r * c..(r + 1) * c].iter().map(|v| v * v).sum();
                if crate::math::sqrt(norm) < crate::math::NORM_EPS {
                    return Err(Error::Numeric(alloc::format!(
                        "{name} text embedding for class {r} is zero"
                    )));
                }
            }
        }
        let mean = Tensor::from_fn(global.shape(), |i| (global.data()[i] + local.data()[i]) / 2.0);
        Ok(TextEmbeddingSet { class_names, global, local, mean })
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.global.shape()[1]
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` here.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let c = self.dim();
        let take = |m: &Tensor| {
            let mut d = Vec::with_capacity(perm.len() * c);
            for &p in perm {
                d.extend_from_slice(&m.data()[p * c..(p + 1) * c]);
            }
            Tensor::from_parts(alloc::vec![perm.len(), c], d)
        };
        TextEmbeddingSet {
            class_names: perm.iter().map(|&p| self.class_names[p].clone()).collect(),
            global: take(&self.global),
            local: take(&self.local),
            mean: take(&self.mean),
        }
    }
}

/// Semantic-prior guidance taps at a shared spatial resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidancePyramid {
    pub f7: FeatureMap,
    pub f15: FeatureMap,
    pub f_last: FeatureMap,
}

impl GuidancePyramid {
    pub fn new(f7: FeatureMap, f15: FeatureMap, f_last: FeatureMap) -> Result<Self> {
        if !f7.same_shape(&f15) || !f7.same_shape(&f_last) {
            return Err(shape_err!("guidance taps must share one shape"));
        }
        Ok(GuidancePyramid { f7, f15, f_last })
    }

    pub fn height(&self) -> usize {
        self.f_last.height()
    }

    pub fn width(&self) -> usize {
        self.f_last.width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    Global,
    Local,
}

/// Cosine similarities `N×H×W` between one text-embedding kind and every
/// visual feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityVolume {
    pub data: Tensor,
    pub kind: SimilarityKind,
}

/// Projected correlation features `N×C_corr×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume {
    pub data: Tensor,
}

impl CorrelationVolume {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(shape_err!("correlation volume must be N×C×H×W, got {:?}", data.shape()));
        }
        Ok(CorrelationVolume { data })
    }

    pub fn classes(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }
    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    /// Channels-last layout `[N, H, W, C]`.
    pub fn to_nhwc(&self) -> Tensor {
        self.data.permute(&[0, 2, 3, 1])
    }

    pub fn from_nhwc(t: &Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(shape_err!("expected [N, H, W, C], got {:?}", t.shape()));
        }
        Ok(CorrelationVolume { data: t.permute(&[0, 3, 1, 2]) })
    }

    /// Class axis reordered so that class `i` of the result is `perm[i]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Self {
        let block = self.data.numel() / self.classes();
        let mut d = Vec::with_capacity(self.data.numel());
        for &p in perm {
            d.extend_from_slice(&self.data.data()[p * block..(p + 1) * block]);
        }
        let mut shape = self.data.shape().to_vec();
        shape[0] = perm.len();
        CorrelationVolume { data: Tensor::from_parts(shape, d) }
    }
}

/// Per-class pre-sigmoid logits `N×H×W` at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    pub data: Tensor,
}

impl LogitMap {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 || data.shape()[0] == 0 {
            return Err(shape_err!("logit map must be N×H×W, got {:?}", data.shape()));
        }
        Ok(LogitMap { data })
    }

    pub fn classes(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Per-pixel class indices, optionally with per-class probabilities
/// `N×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub probabilities: Option<Tensor>,
}

impl SegMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err!(
                "segmentation map {}x{} needs {} labels, got {}",
                height,
                width,
                height * width,
                labels.len()
            ));
        }
        Ok(SegMap { height, width, labels, probabilities: None })
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Nearest-neighbour resample to `height×width` (sampling pixel centres).
    pub fn resize_nearest(&self, height: usize, width: usize) -> SegMap {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = ((y * 2 + 1) * self.height / (2 * height)).min(self.height - 1);
            for x in 0..width {
                let sx = ((x * 2 + 1) * self.width / (2 * width)).min(self.width - 1);
                labels.push(self.get(sy, sx));
            }
        }
        SegMap { height, width, labels, probabilities: None }
    }

    pub fn flip_horizontal(&self) -> SegMap {
        let mut labels = Vec::with_capacity(self.labels.len());
        for y in 0..self.height {
            for x in 0..self.width {
                labels.push(self.get(y, self.width - 1 - x));
            }
        }
        SegMap { height: self.height, width: self.width, labels, probabilities: None }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<SegMap> {
        if top + height > self.height || left + width > self.width {
            return Err(arg_err!("crop exceeds segmentation map"));
        }
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                labels.push(self.get(top + y, left + x));
            }
        }
        Ok(SegMap { height, width, labels, probabilities: None })
    }
}
