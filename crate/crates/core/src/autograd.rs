//! A small tape-based reverse-mode autodiff engine.
//!
//! Ops are coarse (a whole convolution, a whole batch of bilinear samples)
//! so the tape stays short. A [`Graph`] is built per tracked frame, run
//! backwards once and dropped, which keeps training memory flat in the
//! sequence length.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::params::{Grads, ParamId, ParamStore};
use crate::sampling::BilinearTap;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-coordinate penalty used by [`Graph::point_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Huber { delta: f64 },
    L1,
}

impl Penalty {
    #[inline]
    pub fn value(self, r: f64) -> f64 {
        match self {
            Penalty::Huber { delta } => {
                let a = r.abs();
                if a <= delta {
                    0.5 * r * r
                } else {
                    delta * (a - 0.5 * delta)
                }
            }
            Penalty::L1 => r.abs(),
        }
    }

    #[inline]
    pub fn derivative(self, r: f64) -> f64 {
        match self {
            Penalty::Huber { delta } => r.clamp(-delta, delta),
            Penalty::L1 => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize, kh: usize, kw: usize, cols: Vec<f64> },
    InstanceNorm { x: Var, inv_std: Vec<f64> },
    ChannelL2Norm { x: Var, inv_norm: Vec<f64> },
    AvgPool2(Var),
    Sample { map: Var, pts: Var, scale: f64, taps: Vec<BilinearTap> },
    Grid { pts: Var, radius: usize },
    Corr { patches: Var, feats: Var },
    SinEmbed { x: Var, freqs: Vec<f64> },
    Concat { parts: Vec<Var> },
    RepeatRows { x: Var, times: usize },
    Linear { x: Var, w: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var, k: usize, cols: Vec<f64> },
    PointLoss { pred: Var, target: Vec<f64>, mask: Vec<bool>, penalty: Penalty, weight: f64 },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape. Nodes are appended in topological order.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    /// When false, parameters are treated as constants.
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new(true)
    }
}

impl Graph {
    pub fn new(track_params: bool) -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), track_params }
    }

    /// Graph for inference: nothing is differentiable, caches are skipped.
    pub fn inference() -> Self {
        Graph::new(false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; `requires_grad` makes [`grad`](Self::grad) available for it.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = self.track_params;
        self.push(store.get(id).clone(), Op::Param(id), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub: shape mismatch");
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= *y;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut v = self.value(x).clone();
        v.scale(factor);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, factor), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|a| *a = a.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// 2-D convolution of a `[Cin, H, W]` map with `[Cout, Cin, kh, kw]`
    /// weights and `[Cout]` bias, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        assert_eq!(ws[1], cin, "conv2d: channel mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let kdim = cin * kh * kw;
        let npix = ho * wo;
        let mut cols = vec![0.0; kdim * npix];
        im2col(self.value(x).data(), cin, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
        let mut out = vec![0.0; cout * npix];
        let bias = self.value(b).data();
        for (o, row) in out.chunks_mut(npix).enumerate() {
            row.fill(bias[o]);
        }
        gemm(cout, kdim, npix, 1.0, self.value(w).data(), false, &cols, false, 1.0, &mut out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        if !ng {
            cols = Vec::new();
        }
        self.push(
            Tensor::from_vec(&[cout, ho, wo], out),
            Op::Conv2d { x, w, b, stride, pad, kh, kw, cols },
            ng,
        )
    }

    /// Per-channel normalisation over the spatial extent of a `[C, H, W]` map.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (c, n) = (xs[0], xs[1] * xs[2]);
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(c);
        for ch in out.data_mut().chunks_mut(n) {
            let mean = ch.iter().sum::<f64>() / n as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / math::sqrt(var + eps);
            ch.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, ng)
    }

    /// Scale every spatial location of a `[C, H, W]` map to unit L2 norm
    /// across channels.
    pub fn channel_l2_norm(&mut self, x: Var, eps: f64) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (c, n) = (xs[0], xs[1] * xs[2]);
        let src = self.value(x).data();
        let mut inv_norm = vec![0.0; n];
        for (p, inv) in inv_norm.iter_mut().enumerate() {
            let ss: f64 = (0..c).map(|ch| src[ch * n + p] * src[ch * n + p]).sum();
            *inv = 1.0 / math::sqrt(ss + eps);
        }
        let mut out = self.value(x).clone();
        for ch in 0..c {
            for p in 0..n {
                out.data_mut()[ch * n + p] *= inv_norm[p];
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::ChannelL2Norm { x, inv_norm }, ng)
    }

    /// 2×2 average pooling with floor on odd sizes.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (h / 2, w / 2);
        assert!(ho > 0 && wo > 0, "avg_pool2: map {h}x{w} too small");
        let src = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let plane = &src[ch * h * w..];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    out[ch * ho * wo + y * wo + xx] =
                        0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c, ho, wo], out), Op::AvgPool2(x), ng)
    }

    /// Bilinearly sample a `[C, H, W]` map at `[m, 2]` points given in pixels;
    /// map coordinates are `point * scale`. Output `[m, C]`.
    pub fn sample(&mut self, map: Var, pts: Var, scale: f64) -> Var {
        let ms = self.value(map).shape().to_vec();
        let (c, h, w) = (ms[0], ms[1], ms[2]);
        let p = self.value(pts).data();
        let m = p.len() / 2;
        let mapv = self.value(map).data();
        let mut taps = Vec::with_capacity(m);
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            let tap = BilinearTap::new(p[2 * i] * scale, p[2 * i + 1] * scale, w, h);
            for ch in 0..c {
                out[i * c + ch] = tap.sample(&mapv[ch * h * w..(ch + 1) * h * w], w);
            }
            taps.push(tap);
        }
        let ng = self.ng(map) || self.ng(pts);
        self.push(Tensor::from_vec(&[m, c], out), Op::Sample { map, pts, scale, taps }, ng)
    }

    /// Expand `[n, 2]` centres to `[n·R², 2]` grid points with unit-free
    /// offsets `-radius..=radius` times `spacing`, rows before columns.
    pub fn grid(&mut self, pts: Var, radius: usize, spacing: f64) -> Var {
        let p = self.value(pts).data();
        let n = p.len() / 2;
        let r = 2 * radius + 1;
        let mut out = Vec::with_capacity(n * r * r * 2);
        for i in 0..n {
            for dy in 0..r {
                for dx in 0..r {
                    out.push(p[2 * i] + (dx as f64 - radius as f64) * spacing);
                    out.push(p[2 * i + 1] + (dy as f64 - radius as f64) * spacing);
                }
            }
        }
        let ng = self.ng(pts);
        self.push(Tensor::from_vec(&[n * r * r, 2], out), Op::Grid { pts, radius }, ng)
    }

    /// Inner products `out[i, h, p] = <feats[i, h, :], patches[i, p, :]>`
    /// for `patches: [n, P, C]`, `feats: [n, H, C]`.
    pub fn corr(&mut self, patches: Var, feats: Var) -> Var {
        let ps = self.value(patches).shape().to_vec();
        let fs = self.value(feats).shape().to_vec();
        let (n, np, c) = (ps[0], ps[1], ps[2]);
        let nh = fs[1];
        assert_eq!(fs[0], n);
        assert_eq!(fs[2], c);
        let pv = self.value(patches).data();
        let fv = self.value(feats).data();
        let mut out = vec![0.0; n * nh * np];
        for i in 0..n {
            let pi = &pv[i * np * c..(i + 1) * np * c];
            let fi = &fv[i * nh * c..(i + 1) * nh * c];
            gemm(nh, c, np, 1.0, fi, false, pi, true, 0.0, &mut out[i * nh * np..(i + 1) * nh * np]);
        }
        let ng = self.ng(patches) || self.ng(feats);
        self.push(Tensor::from_vec(&[n, nh, np], out), Op::Corr { patches, feats }, ng)
    }

    /// `[n, d]` → `[n, d·2F]`: per value `sin(ω_f x), cos(ω_f x)` for every
    /// frequency, value-major.
    pub fn sin_embed(&mut self, x: Var, freqs: &[f64]) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (n, d) = (xs[0], xs[1]);
        let f = freqs.len();
        let mut out = Vec::with_capacity(n * d * 2 * f);
        for &v in self.value(x).data() {
            for &w in freqs {
                out.push(math::sin(w * v));
                out.push(math::cos(w * v));
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&[n, d * 2 * f], out),
            Op::SinEmbed { x, freqs: freqs.to_vec() },
            ng,
        )
    }

    /// Concatenate along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = {
            let s = self.value(parts[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.value(p).shape();
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat: leading shape mismatch");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(&shape, out), Op::Concat { parts: parts.to_vec() }, ng)
    }

    /// `[n, E]` → `[n, times, E]` by repetition.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (n, e) = (xs[0], xs[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * times * e);
        for i in 0..n {
            for _ in 0..times {
                out.extend_from_slice(&src[i * e..(i + 1) * e]);
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[n, times, e], out), Op::RepeatRows { x, times }, ng)
    }

    /// Affine map over the last axis: `x[..., in] · wᵀ + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (out_dim, in_dim) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), in_dim, "linear: input width mismatch");
        let m = self.value(x).len() / in_dim;
        let mut out = vec![0.0; m * out_dim];
        let bias = self.value(b).data();
        for row in out.chunks_mut(out_dim) {
            row.copy_from_slice(bias);
        }
        gemm(m, in_dim, out_dim, 1.0, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_dim;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, ng)
    }

    /// Same-padded 1-D convolution over the middle axis of a channels-last
    /// `[n, S, Cin]` tensor with `[Cout, k, Cin]` weights (odd `k`).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, s, cin) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[1]);
        assert_eq!(ws[2], cin, "conv1d: channel mismatch");
        assert!(k % 2 == 1, "conv1d: kernel must be odd");
        let cols = im2col_1d(self.value(x).data(), n, s, cin, k);
        let m = n * s;
        let mut out = vec![0.0; m * cout];
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bias);
        }
        gemm(m, k * cin, cout, 1.0, &cols, false, self.value(w).data(), true, 1.0, &mut out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let cols = if ng { cols } else { Vec::new() };
        self.push(Tensor::from_vec(&[n, s, cout], out), Op::Conv1d { x, w, b, k, cols }, ng)
    }

    /// `weight · mean_over_masked_rows Σ_coord penalty(pred − target)` for
    /// `[n, 2]` predictions. Rows with `mask = false` are ignored; if no row
    /// is active the loss is zero.
    pub fn point_loss(
        &mut self,
        pred: Var,
        target: &[f64],
        mask: &[bool],
        penalty: Penalty,
        weight: f64,
    ) -> Var {
        let pv = self.value(pred).data();
        assert_eq!(pv.len(), target.len());
        assert_eq!(pv.len(), 2 * mask.len());
        let active = mask.iter().filter(|&&m| m).count();
        let mut total = 0.0;
        if active > 0 {
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    total += penalty.value(pv[2 * i] - target[2 * i])
                        + penalty.value(pv[2 * i + 1] - target[2 * i + 1]);
                }
            }
            total *= weight / active as f64;
        }
        let ng = self.ng(pred);
        self.push(
            Tensor::scalar(total),
            Op::PointLoss { pred, target: target.to_vec(), mask: mask.to_vec(), penalty, weight },
            ng,
        )
    }

    /// `Σ_i c_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|&(x, c)| c * self.value(x).item()).sum();
        let ng = terms.iter().any(|&(x, _)| self.ng(x));
        self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Add every parameter gradient into `out`.
    pub fn accumulate_param_grads(&self, out: &mut Grads) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &self.grads[i] {
                    out.accumulate(id, g);
                }
            }
        }
    }

    fn acc(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(&shape));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&mut self, idx: usize, g: &Tensor) {
        // Temporarily take the op so we can borrow other nodes freely.
        let op = core::mem::replace(&mut self.nodes[idx].op, Op::Input);
        match &op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(*a, g.clone());
                self.acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(*a, g.clone());
                let mut neg = g.clone();
                neg.scale(-1.0);
                self.acc(*b, neg);
            }
            Op::Scale(x, f) => {
                let mut s = g.clone();
                s.scale(*f);
                self.acc(*x, s);
            }
            Op::Relu(x) => {
                let y = &self.nodes[idx].value;
                let mut d = g.clone();
                for (dv, yv) in d.data_mut().iter_mut().zip(y.data()) {
                    if *yv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                self.acc(*x, d);
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                self.acc(*x, g.clone().reshape(&shape));
            }
            Op::Conv2d { x, w, b, stride, pad, kh, kw, cols } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let gs = g.shape();
                let (cout, ho, wo) = (gs[0], gs[1], gs[2]);
                let npix = ho * wo;
                let kdim = cin * kh * kw;
                let gd = g.data();
                if self.ng(*b) {
                    let db: Vec<f64> = gd.chunks(npix).map(|r| r.iter().sum()).collect();
                    self.acc(*b, Tensor::from_vec(&[cout], db));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; cout * kdim];
                    gemm(cout, npix, kdim, 1.0, gd, false, cols, true, 0.0, &mut dw);
                    let ws = self.nodes[w.0].value.shape().to_vec();
                    self.acc(*w, Tensor::from_vec(&ws, dw));
                }
                if self.ng(*x) {
                    let mut dcols = vec![0.0; kdim * npix];
                    gemm(kdim, cout, npix, 1.0, self.nodes[w.0].value.data(), true, gd, false, 0.0, &mut dcols);
                    let (stride, pad, kh, kw) = (*stride, *pad, *kh, *kw);
                    self.acc_with(*x, |dx| {
                        col2im(&dcols, cin, h, wd, kh, kw, stride, pad, ho, wo, dx)
                    });
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = self.nodes[idx].value.data();
                let gs = g.shape();
                let n = gs[1] * gs[2];
                let mut dx = vec![0.0; y.len()];
                for (ch, is) in inv_std.iter().enumerate() {
                    let r = ch * n..(ch + 1) * n;
                    let (yc, gc) = (&y[r.clone()], &g.data()[r.clone()]);
                    let sg: f64 = gc.iter().sum();
                    let sgy: f64 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[ch * n + j] = is / n as f64 * (n as f64 * gc[j] - sg - yc[j] * sgy);
                    }
                }
                let shape = g.shape().to_vec();
                self.acc(*x, Tensor::from_vec(&shape, dx));
            }
            Op::ChannelL2Norm { x, inv_norm } => {
                let y = self.nodes[idx].value.data();
                let c = g.shape()[0];
                let n = inv_norm.len();
                let mut dx = vec![0.0; y.len()];
                for p in 0..n {
                    let dot: f64 = (0..c).map(|ch| y[ch * n + p] * g.data()[ch * n + p]).sum();
                    for ch in 0..c {
                        let k = ch * n + p;
                        dx[k] = (g.data()[k] - y[k] * dot) * inv_norm[p];
                    }
                }
                let shape = g.shape().to_vec();
                self.acc(*x, Tensor::from_vec(&shape, dx));
            }
            Op::AvgPool2(x) => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (ho, wo) = (h / 2, w / 2);
                let gd = g.data();
                self.acc_with(*x, |dx| {
                    for ch in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let v = 0.25 * gd[ch * ho * wo + y * wo + xx];
                                let i = ch * h * w + 2 * y * w + 2 * xx;
                                dx[i] += v;
                                dx[i + 1] += v;
                                dx[i + w] += v;
                                dx[i + w + 1] += v;
                            }
                        }
                    }
                });
            }
            Op::Sample { map, pts, scale, taps } => {
                let ms = self.nodes[map.0].value.shape().to_vec();
                let (c, h, w) = (ms[0], ms[1], ms[2]);
                let gd = g.data();
                if self.ng(*pts) {
                    let mapv = self.nodes[map.0].value.data();
                    let mut dp = vec![0.0; taps.len() * 2];
                    for (i, tap) in taps.iter().enumerate() {
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for ch in 0..c {
                            let (dx, dy) = tap.gradient(&mapv[ch * h * w..(ch + 1) * h * w], w);
                            gx += gd[i * c + ch] * dx;
                            gy += gd[i * c + ch] * dy;
                        }
                        dp[2 * i] = gx * scale;
                        dp[2 * i + 1] = gy * scale;
                    }
                    let shape = self.nodes[pts.0].value.shape().to_vec();
                    self.acc(*pts, Tensor::from_vec(&shape, dp));
                }
                self.acc_with(*map, |dm| {
                    for (i, tap) in taps.iter().enumerate() {
                        for ch in 0..c {
                            tap.scatter(&mut dm[ch * h * w..(ch + 1) * h * w], w, gd[i * c + ch]);
                        }
                    }
                });
            }
            Op::Grid { pts, radius } => {
                let r2 = (2 * radius + 1) * (2 * radius + 1);
                let gd = g.data();
                self.acc_with(*pts, |dp| {
                    for (j, pair) in gd.chunks(2).enumerate() {
                        dp[2 * (j / r2)] += pair[0];
                        dp[2 * (j / r2) + 1] += pair[1];
                    }
                });
            }
            Op::Corr { patches, feats } => {
                let ps = self.nodes[patches.0].value.shape().to_vec();
                let (n, np, c) = (ps[0], ps[1], ps[2]);
                let nh = self.nodes[feats.0].value.shape()[1];
                let gd = g.data();
                if self.ng(*patches) {
                    let fv = self.nodes[feats.0].value.data();
                    let mut dpt = vec![0.0; n * np * c];
                    for i in 0..n {
                        gemm(
                            np,
                            nh,
                            c,
                            1.0,
                            &gd[i * nh * np..(i + 1) * nh * np],
                            true,
                            &fv[i * nh * c..(i + 1) * nh * c],
                            false,
                            0.0,
                            &mut dpt[i * np * c..(i + 1) * np * c],
                        );
                    }
                    self.acc(*patches, Tensor::from_vec(&ps, dpt));
                }
                if self.ng(*feats) {
                    let pv = self.nodes[patches.0].value.data();
                    let mut df = vec![0.0; n * nh * c];
                    for i in 0..n {
                        gemm(
                            nh,
                            np,
                            c,
                            1.0,
                            &gd[i * nh * np..(i + 1) * nh * np],
                            false,
                            &pv[i * np * c..(i + 1) * np * c],
                            false,
                            0.0,
                            &mut df[i * nh * c..(i + 1) * nh * c],
                        );
                    }
                    self.acc(*feats, Tensor::from_vec(&[n, nh, c], df));
                }
            }
            Op::SinEmbed { x, freqs } => {
                let xv = self.nodes[x.0].value.data();
                let f = freqs.len();
                let gd = g.data();
                let mut dx = vec![0.0; xv.len()];
                for (j, &v) in xv.iter().enumerate() {
                    let mut acc = 0.0;
                    for (q, &w) in freqs.iter().enumerate() {
                        let base = j * 2 * f + 2 * q;
                        acc += gd[base] * w * math::cos(w * v) - gd[base + 1] * w * math::sin(w * v);
                    }
                    dx[j] = acc;
                }
                let shape = self.nodes[x.0].value.shape().to_vec();
                self.acc(*x, Tensor::from_vec(&shape, dx));
            }
            Op::Concat { parts } => {
                let widths: Vec<usize> =
                    parts.iter().map(|p| *self.nodes[p.0].value.shape().last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &wd) in parts.iter().zip(&widths) {
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(rows * wd);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + wd]);
                        }
                        let shape = self.nodes[p.0].value.shape().to_vec();
                        self.acc(p, Tensor::from_vec(&shape, d));
                    }
                    offset += wd;
                }
            }
            Op::RepeatRows { x, times } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (n, e) = (xs[0], xs[1]);
                let gd = g.data();
                let times = *times;
                self.acc_with(*x, |dx| {
                    for i in 0..n {
                        for s in 0..times {
                            let src = &gd[(i * times + s) * e..(i * times + s + 1) * e];
                            for (a, b) in dx[i * e..(i + 1) * e].iter_mut().zip(src) {
                                *a += *b;
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (out_dim, in_dim) = (ws[0], ws[1]);
                let m = g.len() / out_dim;
                let gd = g.data();
                if self.ng(*b) {
                    let mut db = vec![0.0; out_dim];
                    for row in gd.chunks(out_dim) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += *v;
                        }
                    }
                    self.acc(*b, Tensor::from_vec(&[out_dim], db));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; out_dim * in_dim];
                    gemm(out_dim, m, in_dim, 1.0, gd, true, self.nodes[x.0].value.data(), false, 0.0, &mut dw);
                    self.acc(*w, Tensor::from_vec(&ws, dw));
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; m * in_dim];
                    gemm(m, out_dim, in_dim, 1.0, gd, false, self.nodes[w.0].value.data(), false, 0.0, &mut dx);
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    self.acc(*x, Tensor::from_vec(&shape, dx));
                }
            }
            Op::Conv1d { x, w, b, k, cols } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (n, s, cin) = (xs[0], xs[1], xs[2]);
                let ws = self.nodes[w.0].value.shape().to_vec();
                let cout = ws[0];
                let m = n * s;
                let kd = k * cin;
                let gd = g.data();
                if self.ng(*b) {
                    let mut db = vec![0.0; cout];
                    for row in gd.chunks(cout) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += *v;
                        }
                    }
                    self.acc(*b, Tensor::from_vec(&[cout], db));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; cout * kd];
                    gemm(cout, m, kd, 1.0, gd, true, cols, false, 0.0, &mut dw);
                    self.acc(*w, Tensor::from_vec(&ws, dw));
                }
                if self.ng(*x) {
                    let mut dcols = vec![0.0; m * kd];
                    gemm(m, cout, kd, 1.0, gd, false, self.nodes[w.0].value.data(), false, 0.0, &mut dcols);
                    let k = *k;
                    self.acc_with(*x, |dx| col2im_1d(&dcols, n, s, cin, k, dx));
                }
            }
            Op::PointLoss { pred, target, mask, penalty, weight } => {
                let active = mask.iter().filter(|&&m| m).count();
                let pv = self.nodes[pred.0].value.data();
                let mut d = vec![0.0; pv.len()];
                if active > 0 {
                    let s = g.item() * weight / active as f64;
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            d[2 * i] = s * penalty.derivative(pv[2 * i] - target[2 * i]);
                            d[2 * i + 1] = s * penalty.derivative(pv[2 * i + 1] - target[2 * i + 1]);
                        }
                    }
                }
                let shape = self.nodes[pred.0].value.shape().to_vec();
                self.acc(*pred, Tensor::from_vec(&shape, d));
            }
            Op::WeightedSum(terms) => {
                let gv = g.item();
                for &(x, c) in terms {
                    self.acc(x, Tensor::scalar(gv * c));
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let npix = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * npix;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[c * h * w + iy as usize * w..];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let npix = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * npix;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = c * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn im2col_1d(x: &[f64], n: usize, s: usize, cin: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let kd = k * cin;
    let mut cols = vec![0.0; n * s * kd];
    for i in 0..n {
        for pos in 0..s {
            let row = &mut cols[(i * s + pos) * kd..(i * s + pos + 1) * kd];
            for j in 0..k {
                let src = pos as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < s {
                    let off = (i * s + src as usize) * cin;
                    row[j * cin..(j + 1) * cin].copy_from_slice(&x[off..off + cin]);
                }
            }
        }
    }
    cols
}

fn col2im_1d(cols: &[f64], n: usize, s: usize, cin: usize, k: usize, dx: &mut [f64]) {
    let pad = k / 2;
    let kd = k * cin;
    for i in 0..n {
        for pos in 0..s {
            let row = &cols[(i * s + pos) * kd..(i * s + pos + 1) * kd];
            for j in 0..k {
                let src = pos as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < s {
                    let off = (i * s + src as usize) * cin;
                    for (a, b) in dx[off..off + cin].iter_mut().zip(&row[j * cin..(j + 1) * cin]) {
                        *a += *b;
                    }
                }
            }
        }
    }
}
