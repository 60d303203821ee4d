//! Define-by-run tape with exact reverse-mode gradients.
//!
//! Feature maps are single-sample `[C, H, W]` tensors; minibatches are formed
//! by running one graph per sample and summing parameter gradients.

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tensor::{chw, matmul, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a parameter tensor: which store, and its index there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub store: usize,
    pub index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Leaf,
    Param(ParamRef),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize, cols: Vec<T> },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    InstanceNorm { x: Var, xhat: Vec<T>, inv_std: Vec<T> },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Concat { parts: Vec<Var> },
    Tile { z: Var },
    Clamp { x: Var, lo: T, hi: T },
    Reparam { mu: Var, log_var: Var, eps: Vec<T> },
    Kl { mu: Var, log_var: Var },
    MaskedL1 { pred: Var, target: Vec<T>, mask: Vec<bool>, count: usize },
    SoftplusMean { x: Var, sign: T },
    MaskSelect { a: Var, mask: Vec<bool> },
    Dot { x: Var, weights: Vec<T> },
    Combine { terms: Vec<(Var, T)> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Some ancestor is a leaf or parameter.
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let tracked = match op {
            Op::Leaf | Op::Param(_) => true,
            _ => parents.iter().any(|p| self.nodes[p.0].tracked),
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// Input whose gradient is reported by [`Grads::wrt`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn param(&mut self, store_id: usize, store: &ParamStore<T>, index: usize) -> Var {
        self.push(store.tensor(index).clone(), Op::Param(ParamRef { store: store_id, index }), &[])
    }

    /// 2D convolution with zero padding. `x: [C,H,W]`, `w: [O,C,k,k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = chw(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], c, "conv expects {} input channels, got {c}", ws[1]);
        let (o, k) = (ws[0], ws[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let cols = im2col(self.val(x), c, h, wd, k, stride, pad, ho, wo);
        let mut out = vec![T::zero(); o * ho * wo];
        let bias = self.val(b);
        for (oc, chunk) in out.chunks_mut(ho * wo).enumerate() {
            chunk.fill(bias[oc]);
        }
        matmul(o, c * k * k, ho * wo, self.val(w), false, &cols, false, &mut out, true);
        self.push(Tensor::new(vec![o, ho, wo], out), Op::Conv2d { x, w, b, stride, pad, cols }, &[x, w, b])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::c(slope);
        let out: Vec<T> = self.val(x).iter().map(|&v| if v > T::zero() { v } else { v * s }).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out), Op::LeakyRelu { x, slope: s }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.val(x).iter().map(|&v| T::c(sigmoid(v.f64()))).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out), Op::Sigmoid { x }, &[x])
    }

    /// Per-channel normalization over the spatial extent (no affine terms).
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let n = h * w;
        let eps = T::c(1e-5);
        let nt = T::c(n as f64);
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let xs = &self.val(x)[ch * n..(ch + 1) * n];
            let mean = xs.iter().copied().sum::<T>() / nt;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for (dst, &v) in xhat[ch * n..(ch + 1) * n].iter_mut().zip(xs) {
                *dst = (v - mean) * is;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, xhat.clone()), Op::InstanceNorm { x, xhat, inv_std }, &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even extents, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::c(0.25);
        let xs = self.val(x);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for r in 0..ho {
                for col in 0..wo {
                    let base = ch * h * w + 2 * r * w + 2 * col;
                    out[ch * ho * wo + r * wo + col] =
                        (xs[base] + xs[base + 1] + xs[base + w] + xs[base + w + 1]) * quarter;
                }
            }
        }
        self.push(Tensor::new(vec![c, ho, wo], out), Op::AvgPool2 { x }, &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let (ho, wo) = (2 * h, 2 * w);
        let xs = self.val(x);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for r in 0..ho {
                for col in 0..wo {
                    out[ch * ho * wo + r * wo + col] = xs[ch * h * w + (r / 2) * w + col / 2];
                }
            }
        }
        self.push(Tensor::new(vec![c, ho, wo], out), Op::Upsample2 { x }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let n = T::c((h * w) as f64);
        let out: Vec<T> = self.val(x).chunks(h * w).map(|ch| ch.iter().copied().sum::<T>() / n).collect();
        debug_assert_eq!(out.len(), c);
        self.push(Tensor::new(vec![c], out), Op::GlobalAvgPool { x }, &[x])
    }

    /// `w: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let ws = self.shape(w).to_vec();
        let (m, n) = (ws[0], ws[1]);
        assert_eq!(self.val(x).len(), n);
        let mut out = self.val(b).to_vec();
        matmul(m, n, 1, self.val(w), false, self.val(x), false, &mut out, true);
        self.push(Tensor::new(vec![m], out), Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Concatenate `[C_i, H, W]` maps along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = chw(self.shape(parts[0]));
        let mut c = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pc, ph, pw) = chw(self.shape(p));
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            c += pc;
            out.extend_from_slice(self.val(p));
        }
        self.push(Tensor::new(vec![c, h, w], out), Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Repeat a vector `[Z]` at every spatial position: `[Z, h, w]`.
    pub fn tile(&mut self, z: Var, h: usize, w: usize) -> Var {
        let mut out = Vec::with_capacity(self.val(z).len() * h * w);
        for &v in self.val(z) {
            out.extend(std::iter::repeat(v).take(h * w));
        }
        let zl = self.val(z).len();
        self.push(Tensor::new(vec![zl, h, w], out), Op::Tile { z }, &[z])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::c(lo), T::c(hi));
        let out: Vec<T> = self.val(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out), Op::Clamp { x, lo, hi }, &[x])
    }

    /// `z = mu + exp(log_var / 2) * eps`.
    pub fn reparameterize(&mut self, mu: Var, log_var: Var, eps: Vec<T>) -> Var {
        let half = T::c(0.5);
        let out: Vec<T> = self
            .val(mu)
            .iter()
            .zip(self.val(log_var))
            .zip(&eps)
            .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
            .collect();
        let shape = self.shape(mu).to_vec();
        self.push(Tensor::new(shape, out), Op::Reparam { mu, log_var, eps }, &[mu, log_var])
    }

    /// Closed-form KL(N(mu, exp(log_var)) || N(0, I)).
    pub fn kl(&mut self, mu: Var, log_var: Var) -> Var {
        let half = T::c(0.5);
        let s: T =
            self.val(mu).iter().zip(self.val(log_var)).map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv)).sum();
        self.push(Tensor::scalar(s), Op::Kl { mu, log_var }, &[mu, log_var])
    }

    /// Mean absolute error over `mask`; zero when the mask is empty.
    pub fn masked_l1(&mut self, pred: Var, target: Vec<T>, mask: Vec<bool>) -> Var {
        assert_eq!(self.val(pred).len(), target.len());
        assert_eq!(target.len(), mask.len());
        let count = mask.iter().filter(|&&m| m).count();
        let mut s = T::zero();
        for ((&p, &t), &m) in self.val(pred).iter().zip(&target).zip(&mask) {
            if m {
                s += (p - t).abs();
            }
        }
        let loss = if count == 0 { T::zero() } else { s / T::c(count as f64) };
        self.push(Tensor::scalar(loss), Op::MaskedL1 { pred, target, mask, count }, &[pred])
    }

    /// `mean(softplus(sign * x))`.
    pub fn softplus_mean(&mut self, x: Var, sign: f64) -> Var {
        let n = self.val(x).len() as f64;
        let s: f64 = self.val(x).iter().map(|v| softplus(sign * v.f64())).sum();
        self.push(Tensor::scalar(T::c(s / n)), Op::SoftplusMean { x, sign: T::c(sign) }, &[x])
    }

    /// Take `a` where `mask` is set and the constant `b` elsewhere.
    pub fn mask_select(&mut self, a: Var, b: &[T], mask: Vec<bool>) -> Var {
        let out: Vec<T> = self.val(a).iter().zip(b).zip(&mask).map(|((&x, &y), &m)| if m { x } else { y }).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), Op::MaskSelect { a, mask }, &[a])
    }

    /// `sum(weights * x)`; used to scalarize outputs in tests.
    pub fn dot(&mut self, x: Var, weights: Vec<T>) -> Var {
        let s: T = self.val(x).iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::Dot { x, weights }, &[x])
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let terms: Vec<(Var, T)> = terms.iter().map(|&(v, c)| (v, T::c(c))).collect();
        let s: T = terms.iter().map(|&(v, c)| self.val(v)[0] * c).sum();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(s), Op::Combine { terms }, &parents)
    }

    /// Hash of every piecewise branch taken (leaky-ReLU side, clamp region, L1 sign).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for n in &self.nodes {
            match &n.op {
                Op::LeakyRelu { x, .. } => self.val(*x).iter().for_each(|&v| feed((v > T::zero()) as u8)),
                Op::Clamp { x, lo, hi } => self.val(*x).iter().for_each(|&v| {
                    feed(if v < *lo {
                        0
                    } else if v > *hi {
                        2
                    } else {
                        1
                    })
                }),
                Op::MaskedL1 { pred, target, mask, .. } => {
                    for ((&p, &t), &m) in self.val(*pred).iter().zip(target).zip(mask) {
                        if m {
                            feed((p > t) as u8);
                        }
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Graph(format!("loss must be scalar, got shape {:?}", lv.shape)));
        }
        if !lv.is_finite() {
            return Err(Error::Graph(format!("loss node {} is not finite", loss.0)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !g.is_finite() {
                return Err(Error::Graph(format!("non-finite gradient at node {id}")));
            }
            let g = &g.data;
            self.backprop_node(id, g, &mut grads);
            // keep the gradient for leaves and parameters
            if matches!(self.nodes[id].op, Op::Leaf | Op::Param(_)) {
                grads[id] = Some(Tensor::new(self.nodes[id].value.shape.clone(), g.to_vec()));
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(id, n)| match n.op {
                Op::Param(r) => grads[id].take().map(|g| (r, g)),
                _ => None,
            })
            .collect();
        Ok(Grads { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(Tensor::new(self.nodes[v.0].value.shape.clone(), contrib)),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let (c, h, wd) = chw(self.shape(*x));
                let ws = self.shape(*w);
                let (o, k) = (ws[0], ws[2]);
                let (_, ho, wo) = chw(&node.value.shape);
                let hw = ho * wo;
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * c * k * k];
                    matmul(o, hw, c * k * k, g, false, cols, true, &mut dw, false);
                    self.accumulate(grads, *w, dw);
                }
                if self.needs(*b) {
                    let db: Vec<T> = g.chunks(hw).map(|ch| ch.iter().copied().sum()).collect();
                    self.accumulate(grads, *b, db);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); c * k * k * hw];
                    matmul(c * k * k, o, hw, self.val(*w), true, g, false, &mut dcols, false);
                    let dx = col2im(&dcols, c, h, wd, k, *stride, *pad, ho, wo);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let dx =
                    self.val(*x).iter().zip(g).map(|(&v, &gg)| if v > T::zero() { gg } else { gg * *slope }).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = node.value.data.iter().zip(g).map(|(&s, &gg)| gg * s * (T::one() - s)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::InstanceNorm { x, xhat, inv_std } => {
                let (c, h, w) = chw(self.shape(*x));
                let n = h * w;
                let nt = T::c(n as f64);
                let mut dx = vec![T::zero(); c * n];
                for ch in 0..c {
                    let gs = &g[ch * n..(ch + 1) * n];
                    let xs = &xhat[ch * n..(ch + 1) * n];
                    let sum_g: T = gs.iter().copied().sum();
                    let sum_gx: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                    for p in 0..n {
                        dx[ch * n + p] = inv_std[ch] / nt * (nt * gs[p] - sum_g - xs[p] * sum_gx);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool2 { x } => {
                let (c, h, w) = chw(self.shape(*x));
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::c(0.25);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for r in 0..h {
                        for col in 0..w {
                            dx[ch * h * w + r * w + col] = g[ch * ho * wo + (r / 2) * wo + col / 2] * quarter;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2 { x } => {
                let (c, h, w) = chw(self.shape(*x));
                let wo = 2 * w;
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for r in 0..2 * h {
                        for col in 0..wo {
                            dx[ch * h * w + (r / 2) * w + col / 2] += g[ch * 4 * h * w + r * wo + col];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let (c, h, w) = chw(self.shape(*x));
                let inv = T::one() / T::c((h * w) as f64);
                let mut dx = Vec::with_capacity(c * h * w);
                for &gg in g.iter().take(c) {
                    dx.extend(std::iter::repeat(gg * inv).take(h * w));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (m, n) = (ws[0], ws[1]);
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); m * n];
                    matmul(m, 1, n, g, false, self.val(*x), false, &mut dw, false);
                    self.accumulate(grads, *w, dw);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.to_vec());
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n];
                    matmul(n, m, 1, self.val(*w), true, g, false, &mut dx, false);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).len();
                    if self.needs(p) {
                        self.accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Tile { z } => {
                let zl = self.val(*z).len();
                let plane = g.len() / zl.max(1);
                let dz = g.chunks(plane).map(|ch| ch.iter().copied().sum()).collect();
                self.accumulate(grads, *z, dz);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = self
                    .val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gg)| if v < *lo || v > *hi { T::zero() } else { gg })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Reparam { mu, log_var, eps } => {
                self.accumulate(grads, *mu, g.to_vec());
                let half = T::c(0.5);
                let dlv = self
                    .val(*log_var)
                    .iter()
                    .zip(eps)
                    .zip(g)
                    .map(|((&lv, &e), &gg)| gg * e * half * (lv * half).exp())
                    .collect();
                self.accumulate(grads, *log_var, dlv);
            }
            Op::Kl { mu, log_var } => {
                let gg = g[0];
                let half = T::c(0.5);
                self.accumulate(grads, *mu, self.val(*mu).iter().map(|&m| gg * m).collect());
                self.accumulate(
                    grads,
                    *log_var,
                    self.val(*log_var).iter().map(|&lv| gg * half * (lv.exp() - T::one())).collect(),
                );
            }
            Op::MaskedL1 { pred, target, mask, count } => {
                let scale = if *count == 0 { T::zero() } else { g[0] / T::c(*count as f64) };
                let dx = self
                    .val(*pred)
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((&p, &t), &m)| {
                        if !m || p == t {
                            T::zero()
                        } else if p > t {
                            scale
                        } else {
                            -scale
                        }
                    })
                    .collect();
                self.accumulate(grads, *pred, dx);
            }
            Op::SoftplusMean { x, sign } => {
                let n = self.val(*x).len() as f64;
                let s = sign.f64();
                let gg = g[0].f64();
                let dx = self.val(*x).iter().map(|&v| T::c(gg * s * sigmoid(s * v.f64()) / n)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MaskSelect { a, mask } => {
                let dx = g.iter().zip(mask).map(|(&gg, &m)| if m { gg } else { T::zero() }).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Dot { x, weights } => {
                let gg = g[0];
                self.accumulate(grads, *x, weights.iter().map(|&w| w * gg).collect());
            }
            Op::Combine { terms } => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, vec![g[0] * c]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let hw = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let hw = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[ch * h * w + iy as usize * w..ch * h * w + (iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Gradients from one backward sweep.
#[derive(Debug)]
pub struct Grads<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamRef, Tensor<T>)>,
}

impl<T: Real> Grads<T> {
    /// Gradient with respect to a leaf, if it influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &[(ParamRef, Tensor<T>)] {
        &self.params
    }

    /// Add this sweep's gradients for `store_id` into `acc`.
    pub fn accumulate_into(&self, store_id: usize, acc: &mut [Tensor<T>]) {
        for (r, g) in &self.params {
            if r.store == store_id {
                acc[r.index].add_assign(g);
            }
        }
    }
}
