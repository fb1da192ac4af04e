//! Upsampling decoder from the 1/P correlation grid to per-class logits at
//! image resolution, fusing prior-encoder guidance at 2× and 4×.

use alloc::vec::Vec;

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::math;
use crate::nn::{upsample_bilinear, Builder, Conv2d, ConvTranspose2x2, Forward, ParamStore};
use crate::tensor::Tensor;
use crate::types::{CorrelationVolume, GuidancePyramid, LogitMap, SegMap};

/// One 2× stage: transposed conv on the correlation features, then a 3×3
/// fusion conv over `[upsampled corr ; upsampled guidance]`. The fusion
/// conv is held as two kernels, one per concatenated part, so the guidance
/// half runs once for all classes.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: ConvTranspose2x2,
    pub fuse_corr: Conv2d,
    pub fuse_guidance: Conv2d,
}

impl DecoderStage {
    fn new(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize, guide_ch: usize) -> Self {
        let mut s = b.scope(name);
        DecoderStage {
            up: ConvTranspose2x2::new(&mut s, "up", in_ch, out_ch),
            fuse_corr: Conv2d::new(&mut s, "fuse_corr", out_ch, out_ch, 3, 1, 1, true),
            fuse_guidance: Conv2d::new(&mut s, "fuse_guidance", guide_ch, out_ch, 3, 1, 1, false),
        }
    }

    /// `x [N, h, w, C]`, `guidance [1, g, g', C_g]` → `[N, 2h, 2w, C_out]`.
    fn forward(&self, f: &mut Forward, x: Var, guidance: Var) -> Var {
        let t = self.up.forward(f, x);
        let s = f.shape(t).to_vec();
        let g = upsample_bilinear(f, guidance, s[1], s[2]);
        let g = self.fuse_guidance.forward(f, g);
        let a = self.fuse_corr.forward(f, t);
        let y = f.add(a, g);
        f.gelu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub stage1: DecoderStage,
    pub stage2: DecoderStage,
    pub head: Conv2d,
    pub patch_size: usize,
}

impl Decoder {
    pub fn new(b: &mut Builder, corr: usize, guide: usize, patch: usize) -> Self {
        let mut s = b.scope("decoder");
        Decoder {
            stage1: DecoderStage::new(&mut s, "stage1", corr, corr, guide),
            stage2: DecoderStage::new(&mut s, "stage2", corr, corr / 2, guide),
            head: Conv2d::new(&mut s, "head", corr / 2, 1, 3, 1, 1, true),
            patch_size: patch,
        }
    }

    /// `corr [N, h, w, C]`, taps `[1, h, w, C_g]` → logits `[N, hP, wP]`.
    pub fn forward(&self, f: &mut Forward, corr: Var, f7: Var, f15: Var) -> Var {
        let s = f.shape(corr).to_vec();
        let (n, h, w) = (s[0], s[1], s[2]);
        let x = self.stage1.forward(f, corr, f7);
        let x = self.stage2.forward(f, x, f15);
        let x = self.head.forward(f, x);
        let (oh, ow) = (h * self.patch_size, w * self.patch_size);
        let x = upsample_bilinear(f, x, oh, ow);
        f.reshape(x, &[n, oh, ow])
    }

    pub fn decode(&self, store: &ParamStore, corr: &CorrelationVolume, guidance: &GuidancePyramid) -> Result<LogitMap> {
        if (corr.height(), corr.width()) != (guidance.height(), guidance.width()) {
            return Err(shape_err!(
                "correlation grid {}x{} does not match guidance grid {}x{}",
                corr.height(),
                corr.width(),
                guidance.height(),
                guidance.width()
            ));
        }
        let mut f = Forward::new(store, false);
        let x = f.constant(corr.to_nhwc());
        let a = f.constant(guidance.f7.to_nhwc());
        let b = f.constant(guidance.f15.to_nhwc());
        let y = self.forward(&mut f, x, a, b);
        LogitMap::new(f.value(y).clone())
    }
}

/// Per-pixel argmax (ties go to the lowest class index) plus per-class
/// sigmoid probabilities.
pub fn predict(logits: &LogitMap) -> SegMap {
    let (n, h, w) = (logits.classes(), logits.height(), logits.width());
    let d = logits.data.data();
    let hw = h * w;
    let mut labels = Vec::with_capacity(hw);
    for p in 0..hw {
        let mut best = 0;
        for c in 1..n {
            if d[c * hw + p] > d[best * hw + p] {
                best = c;
            }
        }
        labels.push(best as u32);
    }
    let probs = logits.data.map(math::sigmoid);
    SegMap { height: h, width: w, labels, probabilities: Some(probs) }
}

/// Argmax labels only, from raw `[N, H, W]` data.
pub fn argmax_labels(logits: &Tensor) -> Vec<u32> {
    let s = logits.shape();
    let hw = s[1] * s[2];
    let d = logits.data();
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..s[0] {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}
