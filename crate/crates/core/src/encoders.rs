//! Seedable stub backbones: the vision encoder, the dual-head text encoder
//! and the semantic prior encoder.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::config::{EncoderConfig, VisionBackbone};
use crate::error::{arg_err, Result};
use crate::nn::{Builder, Conv2d, Forward, LayerNorm, Linear, ParamStore, TransformerBlock};
use crate::tensor::Tensor;
use crate::types::{ClsToken, FeatureMap, GuidancePyramid, ImageTensor, TextEmbeddingSet};

pub const PROMPT_TEMPLATE: &str = "A photo of a {} in the scene";

pub fn prompt(class_name: &str) -> String {
    PROMPT_TEMPLATE.replace("{}", class_name)
}

/// Places an image on the graph as a constant `[1, H, W, 3]`, with
/// intensities mapped from `[0, 1]` to `[-1, 1]`.
pub fn image_var(f: &mut Forward, image: &ImageTensor) -> Var {
    f.constant(image.to_nhwc().map(|v| 2.0 * v - 1.0))
}

fn patch_grid(f: &Forward, x: Var) -> (usize, usize, usize) {
    let s = f.shape(x);
    (s[1], s[2], s[3])
}

/// Vision side of the VLM: `[CLS]` token plus dense patch features.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch: Conv2d,
    pub cls: Option<crate::nn::ParamId>,
    pub block: Option<TransformerBlock>,
    pub norm: LayerNorm,
    pub patch_size: usize,
    pub dim: usize,
}

impl VisionEncoder {
    pub fn new(b: &mut Builder, cfg: &EncoderConfig) -> Self {
        let mut s = b.scope("vision");
        let (p, c) = (cfg.patch_size, cfg.vision_dim);
        let patch = Conv2d::new(&mut s, "patch", 3, c, p, p, 0, true);
        let (cls, block) = match cfg.vision_backbone {
            VisionBackbone::Vit => (
                Some(s.uniform("cls", &[1, 1, c], 1, c)),
                Some(TransformerBlock::new(&mut s, "block", c, cfg.vision_heads, cfg.mlp_ratio)),
            ),
            VisionBackbone::LinearPatch => (None, None),
        };
        let norm = LayerNorm::new(&mut s, "norm", c);
        VisionEncoder { patch, cls, block, norm, patch_size: p, dim: c }
    }

    /// `image [1, H, W, 3]` → (`cls [1, C]`, `features [1, H/P, W/P, C]`).
    pub fn forward(&self, f: &mut Forward, image: Var) -> (Var, Var) {
        let x = self.patch.forward(f, image);
        let (h, w, c) = patch_grid(f, x);
        let t = h * w;
        let tokens = f.reshape(x, &[1, t, c]);
        match (&self.block, self.cls) {
            (Some(block), Some(cls)) => {
                let cls = f.param(cls);
                let seq = f.concat(&[cls, tokens], 1);
                let seq = block.forward_dense(f, seq, None);
                let seq = self.norm.forward(f, seq);
                let flat = f.reshape(seq, &[t + 1, c]);
                let cls_out = f.gather_rows(flat, vec![0]);
                let feats = f.gather_rows(flat, (1..=t).collect());
                (cls_out, f.reshape(feats, &[1, h, w, c]))
            }
            _ => {
                let y = self.norm.forward(f, tokens);
                let cls_out = f.mean_axis(y, 1);
                let cls_out = f.reshape(cls_out, &[1, c]);
                (cls_out, f.reshape(y, &[1, h, w, c]))
            }
        }
    }

    pub fn encode(&self, store: &ParamStore, image: &ImageTensor) -> Result<(ClsToken, FeatureMap)> {
        image.check_patch_multiple(self.patch_size)?;
        let mut f = Forward::new(store, false);
        let img = image_var(&mut f, image);
        let (cls, feats) = self.forward(&mut f, img);
        let cls = ClsToken { data: f.value(cls).data().to_vec() };
        Ok((cls, FeatureMap::from_nhwc(f.value(feats))?))
    }
}

/// Signed character n-gram hashing of a string into `dim` buckets,
/// scaled to unit norm when any n-gram is present.
pub fn hash_features(text: &str, dim: usize) -> Vec<f64> {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let padded: Vec<char> = core::iter::once(' ')
        .chain(text.to_lowercase().chars())
        .chain(core::iter::once(' '))
        .collect();
    let mut out = vec![0.0; dim];
    let mut count = 0usize;
    for n in 1..=3usize {
        for gram in padded.windows(n) {
            let mut h = FNV_OFFSET ^ n as u64;
            let mut buf = [0u8; 4];
            for ch in gram {
                for &byte in ch.encode_utf8(&mut buf).as_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(FNV_PRIME);
                }
            }
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            out[(h % dim as u64) as usize] += sign;
            count += 1;
        }
    }
    let norm = crate::math::sqrt(out.iter().map(|v| v * v).sum());
    if norm > 0.0 && count > 0 {
        out.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// Text side of the VLM with a global and a local output head.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub hidden: Linear,
    pub global: Linear,
    pub local: Linear,
    pub hash_dim: usize,
}

impl TextEncoder {
    pub fn new(b: &mut Builder, cfg: &EncoderConfig) -> Self {
        let mut s = b.scope("text");
        TextEncoder {
            hidden: Linear::new(&mut s, "hidden", cfg.text_hash_dim, cfg.text_hidden, true),
            global: Linear::new(&mut s, "global", cfg.text_hidden, cfg.vision_dim, true),
            local: Linear::new(&mut s, "local", cfg.text_hidden, cfg.vision_dim, true),
            hash_dim: cfg.text_hash_dim,
        }
    }

    pub fn validate_names(names: &[String]) -> Result<()> {
        if names.is_empty() {
            return Err(arg_err!("class list is empty"));
        }
        if let Some(i) = names.iter().position(|n| n.trim().is_empty()) {
            return Err(arg_err!("class name {i} is empty"));
        }
        Ok(())
    }

    /// Class names → unit-norm rows (`global [N, C]`, `local [N, C]`).
    pub fn forward(&self, f: &mut Forward, names: &[String]) -> (Var, Var) {
        let mut data = Vec::with_capacity(names.len() * self.hash_dim);
        for name in names {
            data.extend(hash_features(&prompt(name), self.hash_dim));
        }
        let x = f.constant(Tensor::from_parts(vec![names.len(), self.hash_dim], data));
        let h = self.hidden.forward(f, x);
        let h = f.gelu(h);
        let g = self.global.forward(f, h);
        let l = self.local.forward(f, h);
        (f.l2_normalize(g), f.l2_normalize(l))
    }

    pub fn encode(&self, store: &ParamStore, names: &[String]) -> Result<TextEmbeddingSet> {
        Self::validate_names(names)?;
        let mut f = Forward::new(store, false);
        let (g, l) = self.forward(&mut f, names);
        TextEmbeddingSet::new(names.to_vec(), f.value(g).clone(), f.value(l).clone())
    }
}

/// Auxiliary image encoder whose intermediate blocks guide the head.
#[derive(Clone, Debug)]
pub struct SemanticPriorEncoder {
    pub patch: Conv2d,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub patch_size: usize,
    pub dim: usize,
}

impl SemanticPriorEncoder {
    pub const DEPTH: usize = 3;

    pub fn new(b: &mut Builder, cfg: &EncoderConfig) -> Self {
        let mut s = b.scope("spe");
        let (p, c) = (cfg.patch_size, cfg.spe_dim);
        let patch = Conv2d::new(&mut s, "patch", 3, c, p, p, 0, true);
        let blocks = (0..Self::DEPTH)
            .map(|i| TransformerBlock::new(&mut s, &alloc::format!("block{i}"), c, cfg.spe_heads, cfg.mlp_ratio))
            .collect();
        let norm = LayerNorm::new(&mut s, "norm", c);
        SemanticPriorEncoder { patch, blocks, norm, patch_size: p, dim: c }
    }

    /// `image [1, H, W, 3]` → taps after the first and second blocks and
    /// the normalized output, each `[1, H/P, W/P, C_spe]`.
    pub fn forward(&self, f: &mut Forward, image: Var) -> [Var; 3] {
        let x = self.patch.forward(f, image);
        let (h, w, c) = patch_grid(f, x);
        let mut seq = f.reshape(x, &[1, h * w, c]);
        let mut taps = Vec::with_capacity(Self::DEPTH);
        for block in &self.blocks {
            seq = block.forward_dense(f, seq, None);
            taps.push(seq);
        }
        let last = self.norm.forward(f, seq);
        let map = |f: &mut Forward, v: Var| f.reshape(v, &[1, h, w, c]);
        [map(f, taps[0]), map(f, taps[1]), map(f, last)]
    }

    pub fn encode(&self, store: &ParamStore, image: &ImageTensor) -> Result<GuidancePyramid> {
        image.check_patch_multiple(self.patch_size)?;
        let mut f = Forward::new(store, false);
        let img = image_var(&mut f, image);
        let [a, b, c] = self.forward(&mut f, img);
        GuidancePyramid::new(
            FeatureMap::from_nhwc(f.value(a))?,
            FeatureMap::from_nhwc(f.value(b))?,
            FeatureMap::from_nhwc(f.value(c))?,
        )
    }
}

/// Names from a comma-separated list, trimmed; empty entries are kept so
/// validation can report them.
pub fn parse_class_list(list: &str) -> Vec<String> {
    list.split(',').map(|s| s.trim().to_string()).collect()
}
