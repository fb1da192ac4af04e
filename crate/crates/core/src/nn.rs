//! Parameter storage and the layers shared by every pipeline stage.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};
use core::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var, NO_ROW};
use crate::math;
use crate::tensor::Tensor;

/// Learning-rate tier a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Vision/text backbone, semantic prior encoder and early refinement.
    Backbone,
    /// Correlation projection, late refinement and decoder.
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Flat, ordered list of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, group: ParamGroup, value: Tensor) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Registers parameters under a name prefix with seeded initialization.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        Builder { store, rng, prefix: String::new(), group }
    }

    /// Child builder whose parameter names get `name.` prepended.
    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            alloc::format!("{}.{}", self.prefix, name)
        };
        Builder { store: self.store, rng: self.rng, prefix, group: self.group }
    }

    pub fn group(&mut self, group: ParamGroup) -> Builder<'_> {
        Builder { store: self.store, rng: self.rng, prefix: self.prefix.clone(), group }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            alloc::format!("{}.{}", self.prefix, name)
        }
    }

    /// Xavier-uniform initialized tensor.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let bound = math::sqrt(6.0 / (fan_in + fan_out) as f64);
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound));
        let full = self.full_name(name);
        self.store.add(full, self.group, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, self.group, Tensor::full(shape, value))
    }
}

/// Computation-path events recorded during a forward pass; used to confirm
/// which ablation branches actually ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathEvent {
    EarlyRefinement,
    GlobalSimilarity,
    LocalSimilarity,
    LocalOnlyProjection,
    SpatialRefinement,
    ClassRefinement,
    FocalLoss,
    DiceLoss,
    BinaryCrossEntropy,
}

/// A graph bound to a parameter store for one forward (and optional
/// backward) pass.
pub struct Forward<'a> {
    graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    track_grads: bool,
    trace: Vec<PathEvent>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, track_grads: bool) -> Self {
        Forward {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track_grads,
            trace: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn record(&mut self, event: PathEvent) {
        self.trace.push(event);
    }

    pub fn trace(&self) -> &[PathEvent] {
        &self.trace
    }

    /// Gradient per parameter, `None` for parameters the pass never touched.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect()
    }
}

impl Deref for Forward<'_> {
    type Target = Graph;
    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Forward<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let mut s = b.scope(name);
        let weight = s.uniform("weight", &[in_dim, out_dim], in_dim, out_dim);
        let bias = bias.then(|| s.constant("bias", &[out_dim], 0.0));
        Linear { weight, bias, in_dim, out_dim }
    }

    /// Applies the layer to the last axis of `x`.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let shape = f.shape(x).to_vec();
        let last = *shape.last().expect("linear on rank-0 input");
        assert_eq!(last, self.in_dim, "linear expects width {}, got {:?}", self.in_dim, shape);
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let x2 = f.reshape(x, &[rows, last]);
        let w = f.param(self.weight);
        let mut y = f.matmul(x2, w);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y = f.reshape(y, &out_shape);
        if let Some(b) = self.bias {
            let bv = f.param(b);
            y = f.add(y, bv);
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        LayerNorm { gamma: s.constant("gamma", &[dim], 1.0), beta: s.constant("beta", &[dim], 0.0) }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let axis = f.shape(x).len() - 1;
        let mean = f.mean_axis(x, axis);
        let xc = f.sub(x, mean);
        let sq = f.mul(xc, xc);
        let var = f.mean_axis(sq, axis);
        let var = f.add_scalar(var, Self::EPS);
        let inv = f.powf(var, -0.5);
        let y = f.mul(xc, inv);
        let g = f.param(self.gamma);
        let y = f.mul(y, g);
        let b = f.param(self.beta);
        f.add(y, b)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        let mut s = b.scope(name);
        Mlp { fc1: Linear::new(&mut s, "fc1", in_dim, hidden, true), fc2: Linear::new(&mut s, "fc2", hidden, out_dim, true) }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let h = self.fc1.forward(f, x);
        let h = f.gelu(h);
        self.fc2.forward(f, h)
    }
}

/// Axis-aligned partition of an `H×W` token grid into rectangular windows.
///
/// Segment boundaries along each axis sit at `offset + k·window`; segments
/// are clamped at the grid border, so edge windows may be smaller.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPartition {
    pub height: usize,
    pub width: usize,
    windows: Vec<Vec<usize>>,
    max_len: usize,
}

fn segments(len: usize, window: usize, offset: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut end = if offset > 0 { offset.min(len) } else { window.min(len) };
    while start < len {
        out.push(start..end);
        start = end;
        end = (end + window).min(len);
    }
    out
}

impl WindowPartition {
    pub fn grid(height: usize, width: usize, window: usize, offset: usize) -> Self {
        assert!(window >= 1, "window size must be positive");
        let rows = segments(height, window, offset % window);
        let cols = segments(width, window, offset % window);
        let mut windows = Vec::with_capacity(rows.len() * cols.len());
        for r in &rows {
            for c in &cols {
                let mut w = Vec::with_capacity(r.len() * c.len());
                for y in r.clone() {
                    for x in c.clone() {
                        w.push(y * width + x);
                    }
                }
                windows.push(w);
            }
        }
        let max_len = windows.iter().map(Vec::len).max().unwrap_or(0);
        WindowPartition { height, width, windows, max_len }
    }

    /// One window spanning every token.
    pub fn global(height: usize, width: usize) -> Self {
        Self::grid(height, width, height.max(width).max(1), 0)
    }

    pub fn windows(&self) -> &[Vec<usize>] {
        &self.windows
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Window index of every token.
    pub fn window_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.tokens()];
        for (wi, w) in self.windows.iter().enumerate() {
            for &t in w {
                out[t] = wi;
            }
        }
        out
    }

    fn is_ragged(&self) -> bool {
        self.windows.iter().any(|w| w.len() != self.max_len)
    }
}

/// Output of [`attention`]: values `[B, L, H·dv]` and the softmax weights
/// `[B, H, L, Lk]`.
pub struct AttentionOut {
    pub out: Var,
    pub weights: Var,
}

/// Scaled dot-product multi-head attention over `[B, L, ·]` sequences.
/// `mask` (additive) must broadcast to `[B, H, L, Lk]`.
pub fn attention(f: &mut Forward, q: Var, k: Var, v: Var, heads: usize, mask: Option<Var>) -> AttentionOut {
    let (qs, ks, vs) = (f.shape(q).to_vec(), f.shape(k).to_vec(), f.shape(v).to_vec());
    let (b, l, dq_all) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    let dv_all = vs[2];
    assert!(dq_all % heads == 0 && dv_all % heads == 0, "head count must divide widths");
    let (dq, dv) = (dq_all / heads, dv_all / heads);
    let split = |f: &mut Forward, x: Var, len: usize, d: usize| {
        let x = f.reshape(x, &[b, len, heads, d]);
        let x = f.permute(x, &[0, 2, 1, 3]);
        f.reshape(x, &[b * heads, len, d])
    };
    let qh = split(f, q, l, dq);
    let kh = split(f, k, lk, dq);
    let vh = split(f, v, lk, dv);
    let scores = f.matmul_t(qh, kh, false, true);
    let scores = f.scale(scores, 1.0 / math::sqrt(dq as f64));
    let mut scores = f.reshape(scores, &[b, heads, l, lk]);
    if let Some(m) = mask {
        scores = f.add(scores, m);
    }
    let weights = f.softmax(scores);
    let w3 = f.reshape(weights, &[b * heads, l, lk]);
    let o = f.matmul(w3, vh);
    let o = f.reshape(o, &[b, heads, l, dv]);
    let o = f.permute(o, &[0, 2, 1, 3]);
    let out = f.reshape(o, &[b, l, dv_all]);
    AttentionOut { out, weights }
}

/// Additive mask value for padded key slots.
pub const MASKED: f64 = -1e30;

/// Multi-head attention restricted to the windows of `part`.
///
/// `q`, `k`: `[B, T, Dq]`, `v`: `[B, T, Dv]` with `T = part.tokens()`.
/// Every token attends to the tokens of its own window. The returned
/// weights are laid out `[B·n_windows, H, L, L]` with `L = part.max_len()`
/// and slot order matching `part.windows()`.
pub fn window_attention(
    f: &mut Forward,
    q: Var,
    k: Var,
    v: Var,
    part: &WindowPartition,
    heads: usize,
) -> AttentionOut {
    let qs = f.shape(q).to_vec();
    let (b, t) = (qs[0], qs[1]);
    assert_eq!(t, part.tokens(), "token count does not match partition");
    let nw = part.windows.len();
    let l = part.max_len;
    let mut gather = Vec::with_capacity(b * nw * l);
    let mut scatter = vec![0usize; b * t];
    for bi in 0..b {
        for (wi, w) in part.windows.iter().enumerate() {
            for slot in 0..l {
                match w.get(slot) {
                    Some(&tok) => {
                        gather.push(bi * t + tok);
                        scatter[bi * t + tok] = (bi * nw + wi) * l + slot;
                    }
                    None => gather.push(NO_ROW),
                }
            }
        }
    }
    let windowed = |f: &mut Forward, x: Var| {
        let d = *f.shape(x).last().unwrap();
        let flat = f.reshape(x, &[b * t, d]);
        let g = f.gather_rows(flat, gather.clone());
        f.reshape(g, &[b * nw, l, d])
    };
    let qw = windowed(f, q);
    let kw = windowed(f, k);
    let vw = windowed(f, v);
    let mask = part.is_ragged().then(|| {
        let mut m = vec![0.0; b * nw * l];
        for bi in 0..b {
            for (wi, w) in part.windows.iter().enumerate() {
                for slot in w.len()..l {
                    m[(bi * nw + wi) * l + slot] = MASKED;
                }
            }
        }
        f.constant(Tensor::from_parts(vec![b * nw, 1, 1, l], m))
    });
    let att = attention(f, qw, kw, vw, heads, mask);
    let dv = *f.shape(att.out).last().unwrap();
    let flat = f.reshape(att.out, &[b * nw * l, dv]);
    let back = f.gather_rows(flat, scatter);
    let out = f.reshape(back, &[b, t, dv]);
    AttentionOut { out, weights: att.weights }
}

/// Query/key/value/output projections for multi-head attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = b.scope(name);
        MultiHeadAttention {
            q: Linear::new(&mut s, "q", dim, dim, true),
            k: Linear::new(&mut s, "k", dim, dim, true),
            v: Linear::new(&mut s, "v", dim, dim, true),
            o: Linear::new(&mut s, "o", dim, dim, true),
            heads,
        }
    }

    /// Windowed self-attention of `x [B, T, C]`; `qk_bias` (broadcastable)
    /// is added to the query/key input only.
    pub fn forward(&self, f: &mut Forward, x: Var, qk_bias: Option<Var>, part: &WindowPartition) -> Var {
        let qk_in = match qk_bias {
            Some(g) => f.add(x, g),
            None => x,
        };
        let q = self.q.forward(f, qk_in);
        let k = self.k.forward(f, qk_in);
        let v = self.v.forward(f, x);
        let att = window_attention(f, q, k, v, part, self.heads);
        self.o.forward(f, att.out)
    }

    /// Full self-attention over the second axis of `x [B, L, C]`.
    pub fn forward_dense(&self, f: &mut Forward, x: Var, qk_bias: Option<Var>) -> Var {
        let qk_in = match qk_bias {
            Some(g) => f.add(x, g),
            None => x,
        };
        let q = self.q.forward(f, qk_in);
        let k = self.k.forward(f, qk_in);
        let v = self.v.forward(f, x);
        let att = attention(f, q, k, v, self.heads, None);
        self.o.forward(f, att.out)
    }
}

/// Pre-norm transformer block (attention + MLP, both residual).
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        let mut s = b.scope(name);
        TransformerBlock {
            norm1: LayerNorm::new(&mut s, "norm1", dim),
            attn: MultiHeadAttention::new(&mut s, "attn", dim, heads),
            norm2: LayerNorm::new(&mut s, "norm2", dim),
            mlp: Mlp::new(&mut s, "mlp", dim, dim * mlp_ratio, dim),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var, part: &WindowPartition) -> Var {
        let h = self.norm1.forward(f, x);
        let a = self.attn.forward(f, h, None, part);
        let x = f.add(x, a);
        let h = self.norm2.forward(f, x);
        let m = self.mlp.forward(f, h);
        f.add(x, m)
    }

    /// Same block with full attention over the second axis of `x [B, L, C]`.
    pub fn forward_dense(&self, f: &mut Forward, x: Var, qk_bias: Option<Var>) -> Var {
        let h = self.norm1.forward(f, x);
        let a = self.attn.forward_dense(f, h, qk_bias);
        let x = f.add(x, a);
        let h = self.norm2.forward(f, x);
        let m = self.mlp.forward(f, h);
        f.add(x, m)
    }
}

/// Channels-last 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let mut s = b.scope(name);
        let fan_in = in_ch * kernel * kernel;
        let fan_out = out_ch * kernel * kernel;
        let weight = s.uniform("weight", &[kernel, kernel, in_ch, out_ch], fan_in, fan_out);
        let bias = bias.then(|| s.constant("bias", &[out_ch], 0.0));
        Conv2d { weight, bias, stride, pad }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let w = f.param(self.weight);
        let mut y = f.conv2d(x, w, self.stride, self.pad);
        if let Some(b) = self.bias {
            let bv = f.param(b);
            y = f.add(y, bv);
        }
        y
    }
}

/// 2×2 stride-2 transposed convolution (channels-last).
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out_ch: usize,
}

impl ConvTranspose2x2 {
    pub fn new(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize) -> Self {
        let mut s = b.scope(name);
        // columns ordered (dy, dx, out channel)
        let weight = s.uniform("weight", &[in_ch, 4 * out_ch], in_ch, out_ch);
        let bias = s.constant("bias", &[out_ch], 0.0);
        ConvTranspose2x2 { weight, bias, out_ch }
    }

    /// `[B, H, W, Cin]` → `[B, 2H, 2W, Cout]`.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let s = f.shape(x).to_vec();
        let (b, h, w, ci) = (s[0], s[1], s[2], s[3]);
        let x2 = f.reshape(x, &[b * h * w, ci]);
        let wt = f.param(self.weight);
        let y = f.matmul(x2, wt);
        let y = f.reshape(y, &[b, h, w, 2, 2, self.out_ch]);
        let y = f.permute(y, &[0, 1, 3, 2, 4, 5]);
        let y = f.reshape(y, &[b, 2 * h, 2 * w, self.out_ch]);
        let bias = f.param(self.bias);
        f.add(y, bias)
    }
}

/// Bilinear interpolation matrix `[out_len, in_len]` using half-pixel
/// centres (no corner alignment).
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Tensor {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src as usize).min(in_len - 1);
        let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
        let w1 = src - i0 as f64;
        m[i * in_len + i0] += 1.0 - w1;
        m[i * in_len + i1] += w1;
    }
    Tensor::from_parts(vec![out_len, in_len], m)
}

/// Bilinear resize of a channels-last map `[B, H, W, C]`.
pub fn upsample_bilinear(f: &mut Forward, x: Var, out_h: usize, out_w: usize) -> Var {
    let s = f.shape(x).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let ah = f.constant(bilinear_matrix(h, out_h));
    let aw = f.constant(bilinear_matrix(w, out_w));
    let x = f.reshape(x, &[b, h, w * c]);
    let y = f.matmul(ah, x);
    let y = f.reshape(y, &[b * out_h, w, c]);
    let y = f.matmul(aw, y);
    f.reshape(y, &[b, out_h, out_w, c])
}
