//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Every value is recorded on a [`Tape`]; [`Tape::backward`] walks the tape
//! in reverse and accumulates adjoints for nodes that require them.

use std::rc::Rc;

use crate::grid::{stencil_dx, stencil_dx_adjoint, stencil_dy, stencil_dy_adjoint};
use crate::losses::logistic;
use crate::spectral::{self, SpectralCache};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, rows, cols)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a rank-3 tensor");
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddChannelBias(Var, Var),
    MulBroadcast(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Ln(Var),
    PowConst(Var, f64),
    Conv2d { x: Var, w: Var, stride: usize },
    Spectral { x: Var, w: Var, k_max: usize, cache: Rc<SpectralCache> },
    Upsample2x(Var),
    Dx(Var, f64),
    Dy(Var, f64),
    Sum(Var),
    MaskedSum(Var, Rc<[bool]>),
    Mean(Var),
    MaskedMean(Var, Rc<[bool]>),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Adjoints returned by [`Tape::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    /// Adjoint of `v`, or `None` if it does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.0[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape, b.shape, "elementwise shape mismatch");
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape.clone(), data)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape.clone(), a.data.iter().map(|&x| f(x)).collect())
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn conv_out_len(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

/// Range of output columns `ox` whose input column `ox·s + kx − p` lies in `0..n`.
#[inline]
fn valid_range(n: usize, n_out: usize, kx: usize, p: usize, s: usize) -> (usize, usize) {
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // Largest ox with ox·s + kx − p ≤ n − 1.
    let top = n - 1 + p;
    let hi = if top < kx { 0 } else { ((top - kx) / s + 1).min(n_out) };
    (lo, hi.max(lo))
}

/// Zero-padded 2-D cross-correlation, padding `k/2`.
pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let (ci_n, h, wd) = x.chw();
    let (co_n, wci, k) = (w.shape[0], w.shape[1], w.shape[2]);
    assert_eq!(wci, ci_n, "conv channel mismatch");
    let p = k / 2;
    let (ho, wo) = (conv_out_len(h, k, stride), conv_out_len(wd, k, stride));
    let mut out = vec![0.0; co_n * ho * wo];
    for co in 0..co_n {
        let out_plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..ci_n {
            let in_plane = &x.data[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(h, ho, ky, p, stride);
                for kx in 0..k {
                    let wv = w.data[((co * ci_n + ci) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = valid_range(wd, wo, kx, p, stride);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - p;
                        let in_row = &in_plane[iy * wd..(iy + 1) * wd];
                        let out_row = &mut out_plane[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let src = &in_row[ox_lo + kx - p..ox_hi + kx - p];
                            for (o, &i) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * in_row[ox * stride + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co_n, ho, wo], out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    g: &[f64],
    gx: Option<&mut Vec<f64>>,
    gw: Option<&mut Vec<f64>>,
) {
    let (ci_n, h, wd) = x.chw();
    let (co_n, k) = (w.shape[0], w.shape[2]);
    let p = k / 2;
    let (ho, wo) = (conv_out_len(h, k, stride), conv_out_len(wd, k, stride));
    if let Some(gx) = gx {
        for co in 0..co_n {
            let g_plane = &g[co * ho * wo..(co + 1) * ho * wo];
            for ci in 0..ci_n {
                let gin = &mut gx[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(h, ho, ky, p, stride);
                    for kx in 0..k {
                        let wv = w.data[((co * ci_n + ci) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = valid_range(wd, wo, kx, p, stride);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - p;
                            let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                            let in_row = &mut gin[iy * wd..(iy + 1) * wd];
                            if stride == 1 {
                                let dst = &mut in_row[ox_lo + kx - p..ox_hi + kx - p];
                                for (d, &gv) in dst.iter_mut().zip(&g_row[ox_lo..ox_hi]) {
                                    *d += wv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    in_row[ox * stride + kx - p] += wv * g_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for co in 0..co_n {
            let g_plane = &g[co * ho * wo..(co + 1) * ho * wo];
            for ci in 0..ci_n {
                let in_plane = &x.data[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(h, ho, ky, p, stride);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = valid_range(wd, wo, kx, p, stride);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - p;
                            let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                            let in_row = &in_plane[iy * wd..(iy + 1) * wd];
                            if stride == 1 {
                                let src = &in_row[ox_lo + kx - p..ox_hi + kx - p];
                                acc += g_row[ox_lo..ox_hi]
                                    .iter()
                                    .zip(src)
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc += g_row[ox] * in_row[ox * stride + kx - p];
                                }
                            }
                        }
                        gw[((co * ci_n + ci) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}

fn upsample2x(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let mut out = vec![0.0; c * 4 * h * w];
    for ch in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                out[(ch * 2 * h + i) * 2 * w + j] = x.data[(ch * h + i / 2) * w + j / 2];
            }
        }
    }
    Tensor::new(vec![c, 2 * h, 2 * w], out)
}

fn per_channel(x: &Tensor, f: impl Fn(&[f64], usize, usize, &mut [f64])) -> Tensor {
    let (c, h, w) = x.chw();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let r = ch * h * w..(ch + 1) * h * w;
        f(&x.data[r.clone()], h, w, &mut out[r]);
    }
    Tensor::new(x.shape.clone(), out)
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input whose adjoint is accumulated.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` treated as a constant: no adjoint flows back through it.
    pub fn stop_grad(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.binary(a, b, v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| c * x);
        self.unary(a, v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| x + c);
        self.unary(a, v, Op::AddScalar(a))
    }

    /// `x[c,·,·] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let bias = &self.value(b).data;
        assert_eq!(bias.len(), c, "bias length mismatch");
        let mut out = self.value(x).clone();
        for ch in 0..c {
            for o in &mut out.data[ch * h * w..(ch + 1) * h * w] {
                *o += bias[ch];
            }
        }
        self.binary(x, b, out, Op::AddChannelBias(x, b))
    }

    /// `x[c,i,j] · a[0,i,j]`.
    pub fn mul_broadcast(&mut self, x: Var, a: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(a).shape, vec![1, h, w], "broadcast shape mismatch");
        let mut out = self.value(x).clone();
        let av = &self.value(a).data;
        for ch in 0..c {
            for (o, &s) in out.data[ch * h * w..(ch + 1) * h * w].iter_mut().zip(av) {
                *o *= s;
            }
        }
        self.binary(x, a, out, Op::MulBroadcast(x, a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = map(self.value(a), logistic);
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = map(self.value(a), softplus);
        self.unary(a, v, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    /// Square root; the adjoint is zero where the input is not positive.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x.max(0.0).sqrt());
        self.unary(a, v, Op::Sqrt(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::ln);
        self.unary(a, v, Op::Ln(a))
    }

    /// `max(x, 0)^e` for fractional `e > 0`, `x^e` for negative `e`.
    /// The adjoint is zero where the input is not positive.
    pub fn pow_const(&mut self, a: Var, e: f64) -> Var {
        let v = map(self.value(a), |x| if x > 0.0 { x.powf(e) } else if e > 0.0 { 0.0 } else { x.powf(e) });
        self.unary(a, v, Op::PowConst(a, e))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Var {
        let v = conv2d_forward(self.value(x), self.value(w), stride);
        self.binary(x, w, v, Op::Conv2d { x, w, stride })
    }

    pub fn spectral(&mut self, x: Var, w: Var, k_max: usize) -> Var {
        let (value, cache) = spectral::forward(self.value(x), self.value(w), k_max);
        self.binary(
            x,
            w,
            value,
            Op::Spectral {
                x,
                w,
                k_max,
                cache: Rc::new(cache),
            },
        )
    }

    pub fn upsample2x(&mut self, a: Var) -> Var {
        let v = upsample2x(self.value(a));
        self.unary(a, v, Op::Upsample2x(a))
    }

    /// Central difference along columns, per channel.
    pub fn dx(&mut self, a: Var, spacing: f64) -> Var {
        let v = per_channel(self.value(a), |s, h, w, o| stencil_dx(s, h, w, spacing, o));
        self.unary(a, v, Op::Dx(a, spacing))
    }

    /// Central difference along rows, per channel.
    pub fn dy(&mut self, a: Var, spacing: f64) -> Var {
        let v = per_channel(self.value(a), |s, h, w, o| stencil_dy(s, h, w, spacing, o));
        self.unary(a, v, Op::Dy(a, spacing))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.unary(a, Tensor::scalar(s), Op::Sum(a))
    }

    pub fn masked_sum(&mut self, a: Var, mask: Rc<[bool]>) -> Var {
        assert_eq!(mask.len(), self.value(a).len(), "mask length mismatch");
        let s = self
            .value(a)
            .data
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|(x, _)| x)
            .sum();
        self.unary(a, Tensor::scalar(s), Op::MaskedSum(a, mask))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.unary(a, Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over cells where `mask` is set; zero for an empty mask.
    pub fn masked_mean(&mut self, a: Var, mask: Rc<[bool]>) -> Var {
        assert_eq!(mask.len(), self.value(a).len(), "mask length mismatch");
        let n = mask.iter().filter(|&&m| m).count();
        let s: f64 = self
            .value(a)
            .data
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|(x, _)| x)
            .sum();
        let mean = if n == 0 { 0.0 } else { s / n as f64 };
        self.unary(a, Tensor::scalar(mean), Op::MaskedMean(a, mask))
    }

    /// `Σ cᵢ·sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let mut s = 0.0;
        let mut ng = false;
        for &(v, c) in &terms {
            assert_eq!(self.value(v).len(), 1, "weighted_sum takes scalars");
            s += c * self.scalar(v);
            ng |= self.needs(v);
        }
        self.push(Tensor::scalar(s), Op::WeightedSum(terms), ng)
    }

    /// Adjoints of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value.data;
        let n = g.len();
        macro_rules! each {
            ($v:expr, |$k:ident| $e:expr) => {
                if self.needs($v) {
                    let dst = acc(&mut grads[$v.0], n);
                    for $k in 0..n {
                        dst[$k] += $e;
                    }
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                each!(*a, |k| g[k]);
                each!(*b, |k| g[k]);
            }
            Op::Sub(a, b) => {
                each!(*a, |k| g[k]);
                each!(*b, |k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                each!(*a, |k| g[k] * bv[k]);
                each!(*b, |k| g[k] * av[k]);
            }
            Op::Div(a, b) => {
                let bv = &self.value(*b).data;
                each!(*a, |k| g[k] / bv[k]);
                each!(*b, |k| -g[k] * out[k] / bv[k]);
            }
            Op::Scale(a, c) => each!(*a, |k| c * g[k]),
            Op::AddScalar(a) => each!(*a, |k| g[k]),
            Op::AddChannelBias(x, b) => {
                each!(*x, |k| g[k]);
                if self.needs(*b) {
                    let (c, h, w) = node.value.chw();
                    let dst = acc(&mut grads[b.0], c);
                    for ch in 0..c {
                        dst[ch] += g[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>();
                    }
                }
            }
            Op::MulBroadcast(x, a) => {
                let (c, h, w) = node.value.chw();
                let hw = h * w;
                let av = &self.value(*a).data;
                each!(*x, |k| g[k] * av[k % hw]);
                if self.needs(*a) {
                    let xv = &self.value(*x).data;
                    let dst = acc(&mut grads[a.0], hw);
                    for ch in 0..c {
                        for k in 0..hw {
                            dst[k] += g[ch * hw + k] * xv[ch * hw + k];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let av = &self.value(*a).data;
                each!(*a, |k| if av[k] > 0.0 { g[k] } else { 0.0 });
            }
            Op::Sigmoid(a) => each!(*a, |k| g[k] * out[k] * (1.0 - out[k])),
            Op::Softplus(a) => {
                let av = &self.value(*a).data;
                each!(*a, |k| g[k] * logistic(av[k]));
            }
            Op::Square(a) => {
                let av = &self.value(*a).data;
                each!(*a, |k| 2.0 * av[k] * g[k]);
            }
            Op::Sqrt(a) => {
                let av = &self.value(*a).data;
                each!(*a, |k| if av[k] > 0.0 { 0.5 * g[k] / out[k] } else { 0.0 });
            }
            Op::Ln(a) => {
                let av = &self.value(*a).data;
                each!(*a, |k| g[k] / av[k]);
            }
            Op::PowConst(a, e) => {
                let av = &self.value(*a).data;
                each!(*a, |k| if av[k] > 0.0 { g[k] * e * av[k].powf(e - 1.0) } else { 0.0 });
            }
            Op::Conv2d { x, w, stride } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut gx = self.needs(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; xv.len()]));
                let mut gw = self.needs(*w).then(|| grads[w.0].take().unwrap_or_else(|| vec![0.0; wv.len()]));
                conv2d_backward(xv, wv, *stride, g, gx.as_mut(), gw.as_mut());
                if gx.is_some() {
                    grads[x.0] = gx;
                }
                if gw.is_some() {
                    grads[w.0] = gw;
                }
            }
            Op::Spectral { x, w, k_max, cache } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (gx, gw) = spectral::backward(
                    xv.chw(),
                    wv,
                    *k_max,
                    cache,
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                for (v, gv) in [(*x, gx), (*w, gw)] {
                    if let Some(gv) = gv {
                        let dst = acc(&mut grads[v.0], gv.len());
                        for (d, s) in dst.iter_mut().zip(gv) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Upsample2x(a) => {
                if self.needs(*a) {
                    let (c, h, w) = self.value(*a).chw();
                    let dst = acc(&mut grads[a.0], c * h * w);
                    for ch in 0..c {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                dst[(ch * h + i / 2) * w + j / 2] += g[(ch * 2 * h + i) * 2 * w + j];
                            }
                        }
                    }
                }
            }
            Op::Dx(a, spacing) | Op::Dy(a, spacing) => {
                if self.needs(*a) {
                    let is_dx = matches!(node.op, Op::Dx(..));
                    let (c, h, w) = node.value.chw();
                    let dst = acc(&mut grads[a.0], c * h * w);
                    for ch in 0..c {
                        let r = ch * h * w..(ch + 1) * h * w;
                        if is_dx {
                            stencil_dx_adjoint(&g[r.clone()], h, w, *spacing, &mut dst[r]);
                        } else {
                            stencil_dy_adjoint(&g[r.clone()], h, w, *spacing, &mut dst[r]);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let m = self.value(*a).len();
                if self.needs(*a) {
                    let dst = acc(&mut grads[a.0], m);
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MaskedSum(a, mask) => {
                if self.needs(*a) {
                    let dst = acc(&mut grads[a.0], mask.len());
                    for (d, &m) in dst.iter_mut().zip(mask.iter()) {
                        if m {
                            *d += g[0];
                        }
                    }
                }
            }
            Op::Mean(a) => {
                let m = self.value(*a).len();
                if self.needs(*a) {
                    let dst = acc(&mut grads[a.0], m);
                    let s = g[0] / m as f64;
                    dst.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MaskedMean(a, mask) => {
                let cnt = mask.iter().filter(|&&m| m).count();
                if self.needs(*a) && cnt > 0 {
                    let s = g[0] / cnt as f64;
                    let dst = acc(&mut grads[a.0], mask.len());
                    for (d, &m) in dst.iter_mut().zip(mask.iter()) {
                        if m {
                            *d += s;
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if self.needs(v) {
                        acc(&mut grads[v.0], 1)[0] += c * g[0];
                    }
                }
            }
        }
    }
}
