//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse from a scalar root and
//! returns the gradient of every leaf that requires one.
//!
//! Ops panic on shape mismatches: public pipeline entry points validate
//! their inputs before building a graph, so a mismatch here is a bug.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{gemm, numel, strides, Mat, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marker for "no source row" in [`Graph::gather_rows`]; the row is zero.
pub const NO_ROW: usize = usize::MAX;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Ln,
    Sqrt,
    Sigmoid,
    Gelu,
    Scale(f64),
    AddScalar(f64),
    Powf(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    Softmax(Var),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Rope { x: Var, cos: Vec<f64>, sin: Vec<f64>, repeat: usize },
    L2Normalize(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Unary(x, _)
            | Op::SumAxis { x, .. }
            | Op::SumAll(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Rope { x, .. }
            | Op::L2Normalize(x) => vec![*x],
            Op::Binary(a, b, _) | Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

// Offset of each output element in a broadcast operand.
enum Bcast {
    Same,
    Scalar,
    Period(usize),
    Block(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn new(out: &[usize], inp: &[usize]) -> Self {
        if out == inp {
            return Bcast::Same;
        }
        if numel(inp) == 1 {
            return Bcast::Scalar;
        }
        let first = inp.iter().position(|&d| d != 1).unwrap_or(inp.len());
        let core = &inp[first..];
        if out.ends_with(core) {
            return Bcast::Period(numel(core));
        }
        let rank = out.len();
        let pad = rank - inp.len();
        let last = inp.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
        if inp[..last] == out[pad..pad + last] && out[..pad].iter().all(|&d| d == 1) {
            return Bcast::Block(numel(&out[pad + last..]));
        }
        let in_strides = strides(inp);
        let mut eff = vec![0usize; rank];
        for d in 0..inp.len() {
            if inp[d] != 1 {
                eff[d + pad] = in_strides[d];
            }
        }
        let total = numel(out);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += eff[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    fn off(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Period(p) => i % p,
            Bcast::Block(q) => i / q,
            Bcast::Map(m) => m[i],
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast {:?} with {:?}", a, b),
        };
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + math::tanh(C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = math::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct MatmulDims {
    batch_a: usize,
    batch_b: usize,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> MatmulDims {
    assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2: {:?} x {:?}", sa, sb);
    let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
    assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?} (ta={ta}, tb={tb})", sa, sb);
    let lead_a = &sa[..sa.len() - 2];
    let lead_b = &sb[..sb.len() - 2];
    let batch_a = numel(lead_a);
    let batch_b = numel(lead_b);
    assert!(
        batch_a == batch_b || batch_a == 1 || batch_b == 1,
        "matmul batch mismatch: {:?} x {:?}",
        sa,
        sb
    );
    let lead = if batch_a >= batch_b && !lead_a.is_empty() { lead_a } else { lead_b };
    let mut out_shape = lead.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    MatmulDims { batch_a, batch_b, batch: batch_a.max(batch_b), m, k, n, out_shape }
}

fn im2col(
    x: &[f64],
    xs: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let (b, h, w, ci) = (xs[0], xs[1], xs[2], xs[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let kcols = kh * kw * ci;
    let mut cols = vec![0.0; b * ho * wo * kcols];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * kcols;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * ci;
                        let dst = row + (ky * kw + kx) * ci;
                        cols[dst..dst + ci].copy_from_slice(&x[src..src + ci]);
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(
    cols: &[f64],
    xs: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let (b, h, w, ci) = (xs[0], xs[1], xs[2], xs[3]);
    let kcols = kh * kw * ci;
    let mut dx = vec![0.0; b * h * w * ci];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * kcols;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * ci;
                        let src = row + (ky * kw + kx) * ci;
                        for c in 0..ci {
                            dx[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn concat_layout(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis..]);
    (outer, inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; gradients are reported for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let xv = &self.nodes[x.0].value;
        let f: &dyn Fn(f64) -> f64 = match kind {
            Unary::Exp => &math::exp,
            Unary::Ln => &math::ln,
            Unary::Sqrt => &math::sqrt,
            Unary::Sigmoid => &math::sigmoid,
            Unary::Gelu => &gelu,
            Unary::Scale(s) => &move |v| v * s,
            Unary::AddScalar(s) => &move |v| v + s,
            Unary::Powf(p) => &move |v| math::powf(v, p),
            Unary::Clamp(lo, hi) => &move |v: f64| v.clamp(lo, hi),
        };
        let out = xv.map(f);
        self.push(out, Op::Unary(x, kind))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }
    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Unary::Scale(s))
    }
    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Scale(-1.0))
    }
    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Unary::AddScalar(s))
    }
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Unary::Powf(p))
    }
    /// Clamp; the gradient is zero where the value was clipped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out_shape = broadcast_shape(av.shape(), bv.shape());
        let ia = Bcast::new(&out_shape, av.shape());
        let ib = Bcast::new(&out_shape, bv.shape());
        let (ad, bd) = (av.data(), bv.data());
        let total = numel(&out_shape);
        let mut out = Vec::with_capacity(total);
        macro_rules! fill {
            ($e:expr) => {
                match (&ia, &ib) {
                    (Bcast::Same, Bcast::Same) => out.extend(ad.iter().zip(bd).map(|(&x, &y)| $e(x, y))),
                    (Bcast::Same, Bcast::Period(p)) => {
                        for chunk in ad.chunks_exact(*p) {
                            out.extend(chunk.iter().zip(bd).map(|(&x, &y)| $e(x, y)));
                        }
                    }
                    (Bcast::Period(p), Bcast::Same) => {
                        for chunk in bd.chunks_exact(*p) {
                            out.extend(ad.iter().zip(chunk).map(|(&x, &y)| $e(x, y)));
                        }
                    }
                    _ => {
                        for i in 0..total {
                            let x = ad[ia.off(i)];
                            let y = bd[ib.off(i)];
                            out.push($e(x, y));
                        }
                    }
                }
            };
        }
        match kind {
            Binary::Add => fill!(|x: f64, y: f64| x + y),
            Binary::Sub => fill!(|x: f64, y: f64| x - y),
            Binary::Mul => fill!(|x: f64, y: f64| x * y),
            Binary::Div => fill!(|x: f64, y: f64| x / y),
        }
        self.push(Tensor::from_parts(out_shape, out), Op::Binary(a, b, kind))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Div)
    }

    /// Sum over `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        let outer = numel(&shape[..axis]);
        let n = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = vec![0.0; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        self.push(Tensor::from_parts(out_shape, out), Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().expect("softmax on rank-0 tensor");
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - max);
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x))
    }

    /// Batched matrix product over the last two axes, with optional
    /// transposition of either operand. Leading dims must agree or one side
    /// must have a single batch, which is then broadcast.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let dims = matmul_dims(av.shape(), bv.shape(), ta, tb);
        let MatmulDims { batch_a, batch_b, batch, m, k, n, .. } = dims;
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ab = if batch_a == 1 { 0 } else { i };
            let bb = if batch_b == 1 { 0 } else { i };
            let ablk = &av.data()[ab * m * k..(ab + 1) * m * k];
            let bblk = &bv.data()[bb * k * n..(bb + 1) * k * n];
            let am = if ta { Mat::row_major(ablk, m).t() } else { Mat::row_major(ablk, k) };
            let bm = if tb { Mat::row_major(bblk, k).t() } else { Mat::row_major(bblk, n) };
            gemm(m, k, n, am, bm, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        self.push(Tensor::from_parts(dims.out_shape, out), Op::Matmul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(numel(shape), xv.numel(), "reshape {:?} -> {:?}", xv.shape(), shape);
        let out = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        self.push(out, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let out = self.nodes[x.0].value.permute(axes);
        self.push(out, Op::Permute { x, axes: axes.to_vec() })
    }

    /// Selects rows along axis 0; [`NO_ROW`] entries produce zero rows.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = &self.nodes[x.0].value;
        let n_rows = xv.shape()[0];
        let width = xv.numel() / n_rows.max(1);
        let mut out = vec![0.0; rows.len() * width];
        for (i, &r) in rows.iter().enumerate() {
            if r != NO_ROW {
                assert!(r < n_rows, "gather row {r} out of {n_rows}");
                out[i * width..(i + 1) * width]
                    .copy_from_slice(&xv.data()[r * width..(r + 1) * width]);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = rows.len();
        self.push(Tensor::from_parts(shape, out), Op::GatherRows { x, rows })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for d in 0..s.len() {
                assert!(d == axis || s[d] == first[d], "concat shape mismatch on axis {d}");
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _) = concat_layout(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let v = &self.nodes[x.0].value;
                let (_, inner) = concat_layout(v.shape(), axis);
                out.extend_from_slice(&v.data()[o * inner..(o + 1) * inner]);
            }
        }
        self.push(Tensor::from_parts(out_shape, out), Op::Concat { xs: xs.to_vec(), axis })
    }

    /// Rotates consecutive channel pairs of the last axis. `cos`/`sin` hold
    /// one angle table row of `d/2` entries per leading position; each row
    /// applies to `repeat` consecutive vectors (e.g. attention heads).
    pub fn rope(&mut self, x: Var, cos: Vec<f64>, sin: Vec<f64>, repeat: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().expect("rope on rank-0 tensor");
        assert!(d % 2 == 0, "rope needs an even channel count");
        let half = d / 2;
        let vectors = xv.numel() / d;
        assert_eq!(cos.len(), vectors / repeat * half, "rope table size mismatch");
        assert_eq!(sin.len(), cos.len());
        let mut out = vec![0.0; xv.numel()];
        let xd = xv.data();
        for v in 0..vectors {
            let t = (v / repeat) * half;
            for i in 0..half {
                let (c, s) = (cos[t + i], sin[t + i]);
                let (a, b) = (xd[v * d + 2 * i], xd[v * d + 2 * i + 1]);
                out[v * d + 2 * i] = a * c - b * s;
                out[v * d + 2 * i + 1] = a * s + b * c;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Rope { x, cos, sin, repeat })
    }

    /// Unit-normalizes vectors along the last axis; vectors with norm below
    /// [`math::NORM_EPS`] map to zero.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().expect("normalize on rank-0 tensor");
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let n = math::sqrt(row.iter().map(|v| v * v).sum());
            if n < math::NORM_EPS {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::L2Normalize(x))
    }

    /// Channels-last convolution: `x [B, H, W, Cin]`, `w [kh, kw, Cin, Cout]`,
    /// zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (xs, ws) = (xv.shape(), wv.shape());
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d expects NHWC input and 4-D kernel");
        assert_eq!(xs[3], ws[2], "conv2d channel mismatch: {:?} vs {:?}", xs, ws);
        let (kh, kw, co) = (ws[0], ws[1], ws[3]);
        assert!(xs[1] + 2 * pad >= kh && xs[2] + 2 * pad >= kw, "conv2d kernel exceeds input");
        let (cols, ho, wo) = im2col(xv.data(), xs, kh, kw, stride, pad);
        let rows = xs[0] * ho * wo;
        let kcols = kh * kw * xs[3];
        let mut out = vec![0.0; rows * co];
        gemm(
            rows,
            kcols,
            co,
            Mat::row_major(&cols, kcols),
            Mat::row_major(wv.data(), co),
            &mut out,
            0.0,
        );
        let shape = vec![xs[0], ho, wo, co];
        self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, stride, pad })
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(t),
        }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, kind) => {
                let xv = &self.nodes[x.0].value;
                let gd = g.data();
                let xd = xv.data();
                let yd = y.data();
                let dx: Vec<f64> = (0..xd.len())
                    .map(|i| {
                        let local = match *kind {
                            Unary::Exp => yd[i],
                            Unary::Ln => 1.0 / xd[i],
                            Unary::Sqrt => 0.5 / yd[i],
                            Unary::Sigmoid => yd[i] * (1.0 - yd[i]),
                            Unary::Gelu => gelu_grad(xd[i]),
                            Unary::Scale(s) => s,
                            Unary::AddScalar(_) => 1.0,
                            Unary::Powf(p) => {
                                if p == 0.0 {
                                    0.0
                                } else {
                                    p * math::powf(xd[i], p - 1.0)
                                }
                            }
                            Unary::Clamp(lo, hi) => {
                                if xd[i] > lo && xd[i] < hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        gd[i] * local
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Binary(a, b, kind) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let ia = Bcast::new(y.shape(), av.shape());
                let ib = Bcast::new(y.shape(), bv.shape());
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                let want_a = self.nodes[a.0].needs_grad;
                let want_b = self.nodes[b.0].needs_grad;
                let mut da = if want_a { vec![0.0; av.numel()] } else { Vec::new() };
                let mut db = if want_b { vec![0.0; bv.numel()] } else { Vec::new() };
                for i in 0..gd.len() {
                    let (oa, ob) = (ia.off(i), ib.off(i));
                    let (ga, gb) = match kind {
                        Binary::Add => (gd[i], gd[i]),
                        Binary::Sub => (gd[i], -gd[i]),
                        Binary::Mul => (gd[i] * bd[ob], gd[i] * ad[oa]),
                        Binary::Div => {
                            let inv = 1.0 / bd[ob];
                            (gd[i] * inv, -gd[i] * ad[oa] * inv * inv)
                        }
                    };
                    if want_a {
                        da[oa] += ga;
                    }
                    if want_b {
                        db[ob] += gb;
                    }
                }
                if want_a {
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if want_b {
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::SumAxis { x, axis } => {
                let xs = self.nodes[x.0].value.shape();
                let outer = numel(&xs[..*axis]);
                let n = xs[*axis];
                let inner = numel(&xs[*axis + 1..]);
                let mut dx = vec![0.0; numel(xs)];
                for o in 0..outer {
                    for j in 0..n {
                        dx[(o * n + j) * inner..(o * n + j + 1) * inner]
                            .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), dx));
            }
            Op::SumAll(x) => {
                let xs = self.nodes[x.0].value.shape();
                self.accumulate(grads, *x, Tensor::full(xs, g.data()[0]));
            }
            Op::Softmax(x) => {
                let d = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.numel()];
                for ((dr, yr), gr) in
                    dx.chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Matmul { a, b, ta, tb } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let dims = matmul_dims(av.shape(), bv.shape(), *ta, *tb);
                let MatmulDims { batch_a, batch_b, batch, m, k, n, .. } = dims;
                let want_a = self.nodes[a.0].needs_grad;
                let want_b = self.nodes[b.0].needs_grad;
                let mut da = if want_a { vec![0.0; av.numel()] } else { Vec::new() };
                let mut db = if want_b { vec![0.0; bv.numel()] } else { Vec::new() };
                for i in 0..batch {
                    let ab = if batch_a == 1 { 0 } else { i };
                    let bb = if batch_b == 1 { 0 } else { i };
                    let ablk = &av.data()[ab * m * k..(ab + 1) * m * k];
                    let bblk = &bv.data()[bb * k * n..(bb + 1) * k * n];
                    let gblk = &g.data()[i * m * n..(i + 1) * m * n];
                    // op(A) [m,k], op(B) [k,n], dC [m,n]
                    let op_a = if *ta { Mat::row_major(ablk, m).t() } else { Mat::row_major(ablk, k) };
                    let op_b = if *tb { Mat::row_major(bblk, k).t() } else { Mat::row_major(bblk, n) };
                    let dc = Mat::row_major(gblk, n);
                    if want_a {
                        let out = &mut da[ab * m * k..(ab + 1) * m * k];
                        if *ta {
                            gemm(k, n, m, op_b, dc.t(), out, 1.0);
                        } else {
                            gemm(m, n, k, dc, op_b.t(), out, 1.0);
                        }
                    }
                    if want_b {
                        let out = &mut db[bb * k * n..(bb + 1) * k * n];
                        if *tb {
                            gemm(n, m, k, dc.t(), op_a, out, 1.0);
                        } else {
                            gemm(k, m, n, op_a.t(), dc, out, 1.0);
                        }
                    }
                }
                if want_a {
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if want_b {
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Reshape(x) => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(xs, g.data().to_vec()));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                self.accumulate(grads, *x, g.permute(&inverse));
            }
            Op::GatherRows { x, rows } => {
                let xv = &self.nodes[x.0].value;
                let width = xv.numel() / xv.shape()[0].max(1);
                let mut dx = vec![0.0; xv.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    if r == NO_ROW {
                        continue;
                    }
                    let src = &g.data()[i * width..(i + 1) * width];
                    for (a, b) in dx[r * width..(r + 1) * width].iter_mut().zip(src) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Concat { xs, axis } => {
                let (outer, out_inner) = concat_layout(y.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let xs_shape = self.nodes[x.0].value.shape().to_vec();
                    let (_, inner) = concat_layout(&xs_shape, *axis);
                    if self.nodes[x.0].needs_grad {
                        let mut dx = Vec::with_capacity(numel(&xs_shape));
                        for o in 0..outer {
                            let start = o * out_inner + offset;
                            dx.extend_from_slice(&g.data()[start..start + inner]);
                        }
                        self.accumulate(grads, x, Tensor::from_parts(xs_shape, dx));
                    }
                    offset += inner;
                }
            }
            Op::Rope { x, cos, sin, repeat } => {
                let d = *y.shape().last().unwrap();
                let half = d / 2;
                let gd = g.data();
                let mut dx = vec![0.0; y.numel()];
                for v in 0..y.numel() / d {
                    let t = (v / repeat) * half;
                    for i in 0..half {
                        let (c, s) = (cos[t + i], sin[t + i]);
                        let (ga, gb) = (gd[v * d + 2 * i], gd[v * d + 2 * i + 1]);
                        dx[v * d + 2 * i] = ga * c + gb * s;
                        dx[v * d + 2 * i + 1] = -ga * s + gb * c;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::L2Normalize(x) => {
                let xv = &self.nodes[x.0].value;
                let d = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.numel() / d {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let n = math::sqrt(xr.iter().map(|v| v * v).sum());
                    if n < math::NORM_EPS {
                        continue;
                    }
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (xs, ws) = (xv.shape(), wv.shape());
                let (kh, kw, co) = (ws[0], ws[1], ws[3]);
                let kcols = kh * kw * xs[3];
                let (ho, wo) = (y.shape()[1], y.shape()[2]);
                let rows = xs[0] * ho * wo;
                let dy = Mat::row_major(g.data(), co);
                if self.nodes[w.0].needs_grad {
                    let (cols, _, _) = im2col(xv.data(), xs, kh, kw, *stride, *pad);
                    let mut dw = vec![0.0; wv.numel()];
                    gemm(kcols, rows, co, Mat::row_major(&cols, kcols).t(), dy, &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::from_parts(ws.to_vec(), dw));
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![0.0; rows * kcols];
                    gemm(rows, co, kcols, dy, Mat::row_major(wv.data(), co).t(), &mut dcols, 0.0);
                    let dx = col2im(&dcols, xs, kh, kw, *stride, *pad, ho, wo);
                    self.accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), dx));
                }
            }
        }
    }
}
