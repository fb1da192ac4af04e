//! Early refinement: windowed cross-attention whose queries come from a
//! light convolutional image encoder, whose keys mix that encoder with the
//! dense VLM features, and whose values are the VLM features themselves.

use alloc::vec::Vec;

use crate::autograd::Var;
use crate::config::RefinerConfig;
use crate::encoders::image_var;
use crate::error::{config_err, shape_err, Result};
use crate::math;
use crate::nn::{window_attention, AttentionOut, Builder, Conv2d, Forward, Linear, ParamStore, WindowPartition};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, ImageTensor};

/// Rotation angles for the `dim / 2` channel pairs at grid position
/// `(y, x)`. The first `⌈pairs/2⌉` pairs turn with the row index and the
/// rest with the column index, each half on its own geometric frequency
/// ladder `base^(-i/n)`.
pub fn rope_angles(y: f64, x: f64, dim: usize, base: f64) -> Vec<f64> {
    let pairs = dim / 2;
    let row_pairs = pairs.div_ceil(2);
    let col_pairs = pairs - row_pairs;
    let mut out = Vec::with_capacity(pairs);
    for i in 0..row_pairs {
        out.push(y * math::powf(base, -(i as f64) / row_pairs as f64));
    }
    for j in 0..col_pairs {
        out.push(x * math::powf(base, -(j as f64) / col_pairs as f64));
    }
    out
}

/// Rotates channel pairs `(2i, 2i+1)` of one vector.
pub fn rope_vector(v: &[f64], y: f64, x: f64, base: f64) -> Result<Vec<f64>> {
    if v.len() % 2 != 0 {
        return Err(config_err!("rotary encoding needs an even channel count, got {}", v.len()));
    }
    let angles = rope_angles(y, x, v.len(), base);
    let mut out = v.to_vec();
    for (i, a) in angles.iter().enumerate() {
        let (c, s) = (math::cos(*a), math::sin(*a));
        let (p, q) = (v[2 * i], v[2 * i + 1]);
        out[2 * i] = p * c - q * s;
        out[2 * i + 1] = p * s + q * c;
    }
    Ok(out)
}

/// Applies 2-D rotary encoding to every cell of `x`; cell `(y, x)` sits at
/// position `(origin.0 + y, origin.1 + x)`.
pub fn rope_apply(x: &FeatureMap, origin: (i64, i64), base: f64) -> Result<FeatureMap> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    if c % 2 != 0 {
        return Err(config_err!("rotary encoding needs an even channel count, got {c}"));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for yy in 0..h {
        for xx in 0..w {
            let r = rope_vector(&x.vector(yy, xx), (origin.0 + yy as i64) as f64, (origin.1 + xx as i64) as f64, base)?;
            for (ch, v) in r.into_iter().enumerate() {
                out.data_mut()[(ch * h + yy) * w + xx] = v;
            }
        }
    }
    FeatureMap::new(out)
}

/// cos/sin tables for a `h×w` grid, one row of `dim/2` angles per cell.
pub fn rope_tables(h: usize, w: usize, dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let mut cos = Vec::with_capacity(h * w * dim / 2);
    let mut sin = Vec::with_capacity(h * w * dim / 2);
    for y in 0..h {
        for x in 0..w {
            for a in rope_angles(y as f64, x as f64, dim, base) {
                cos.push(math::cos(a));
                sin.push(math::sin(a));
            }
        }
    }
    (cos, sin)
}

/// Smallest divisor of `p` that is at least `√p`; the stride of the first
/// guidance convolution.
pub fn first_stride(p: usize) -> usize {
    (1..=p).find(|&a| p % a == 0 && a * a >= p).unwrap_or(p)
}

#[derive(Clone, Debug)]
pub struct EarlyRefiner {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub query: Linear,
    pub key_guidance: Linear,
    pub key_features: Linear,
    pub heads: usize,
    pub window: usize,
    pub rope_base: f64,
    pub patch_size: usize,
}

/// Refined features with the attention weights that produced them.
#[derive(Clone, Debug)]
pub struct Refined {
    pub features: FeatureMap,
    /// `[n_windows, heads, L, L]`, slot order as in `partition`.
    pub weights: Tensor,
    pub partition: WindowPartition,
}

impl EarlyRefiner {
    pub fn new(b: &mut Builder, cfg: &RefinerConfig, patch: usize, feature_dim: usize) -> Self {
        let mut s = b.scope("early");
        let a = first_stride(patch);
        EarlyRefiner {
            conv1: Conv2d::new(&mut s, "conv1", 3, cfg.conv_hidden, a, a, 0, true),
            conv2: Conv2d::new(&mut s, "conv2", cfg.conv_hidden, cfg.channels, patch / a, patch / a, 0, true),
            query: Linear::new(&mut s, "query", cfg.channels, cfg.qk_dim, true),
            key_guidance: Linear::new(&mut s, "key_guidance", cfg.channels, cfg.qk_dim, true),
            key_features: Linear::new(&mut s, "key_features", feature_dim, cfg.qk_dim, false),
            heads: cfg.heads,
            window: cfg.window,
            rope_base: cfg.rope_base,
            patch_size: patch,
        }
    }

    pub fn partition(&self, h: usize, w: usize) -> WindowPartition {
        WindowPartition::grid(h, w, self.window, 0)
    }

    fn rotate(&self, f: &mut Forward, x: Var, h: usize, w: usize) -> Var {
        let d = f.shape(x)[2];
        let dh = d / self.heads;
        let (cos, sin) = rope_tables(h, w, dh, self.rope_base);
        let x = f.reshape(x, &[1, h * w, self.heads, dh]);
        let x = f.rope(x, cos, sin, self.heads);
        f.reshape(x, &[1, h * w, d])
    }

    /// `image [1, H, W, 3]`, `phi [1, h, w, C]` → refined `[1, h, w, C]`.
    pub fn forward(&self, f: &mut Forward, image: Var, phi: Var) -> AttentionOut {
        let ps = f.shape(phi).to_vec();
        let (h, w, c) = (ps[1], ps[2], ps[3]);
        let g = self.conv1.forward(f, image);
        let g = f.gelu(g);
        let g = self.conv2.forward(f, g);
        assert_eq!(&f.shape(g)[1..3], &[h, w], "guidance grid does not match features");
        let cg = f.shape(g)[3];
        let g = f.reshape(g, &[1, h * w, cg]);
        let v = f.reshape(phi, &[1, h * w, c]);
        let q = self.query.forward(f, g);
        let q = self.rotate(f, q, h, w);
        let kg = self.key_guidance.forward(f, g);
        let kf = self.key_features.forward(f, v);
        let k = f.add(kg, kf);
        let k = self.rotate(f, k, h, w);
        let part = self.partition(h, w);
        let att = window_attention(f, q, k, v, &part, self.heads);
        let out = f.reshape(att.out, &[1, h, w, c]);
        AttentionOut { out, weights: att.weights }
    }

    pub fn refine(&self, store: &ParamStore, image: &ImageTensor, phi: &FeatureMap) -> Result<Refined> {
        image.check_patch_multiple(self.patch_size)?;
        let (gh, gw) = (image.height() / self.patch_size, image.width() / self.patch_size);
        if (gh, gw) != (phi.height(), phi.width()) {
            return Err(shape_err!(
                "image grid {}x{} does not match feature grid {}x{}",
                gh,
                gw,
                phi.height(),
                phi.width()
            ));
        }
        if phi.channels() != self.key_features.in_dim {
            return Err(shape_err!(
                "refiner expects {} feature channels, got {}",
                self.key_features.in_dim,
                phi.channels()
            ));
        }
        let mut f = Forward::new(store, false);
        let img = image_var(&mut f, image);
        let p = f.constant(phi.to_nhwc());
        let att = self.forward(&mut f, img, p);
        Ok(Refined {
            features: FeatureMap::from_nhwc(f.value(att.out))?,
            weights: f.value(att.weights).clone(),
            partition: self.partition(gh, gw),
        })
    }
}
