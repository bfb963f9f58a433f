//! Convolutional building blocks with hand-written backward passes.
//!
//! Every layer has two forward paths: `forward_train` (batch statistics,
//! active dropout, returns the cache needed by `backward`) and
//! `forward_eval` (running statistics, dropout only when an RNG is passed in
//! for Monte-Carlo sampling). `backward` accumulates parameter gradients into
//! [`Param::grad`] and returns the gradient with respect to the input.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;
use crate::tensor::Tensor;

/// A named block of scalars. Non-trainable blocks (batch-norm running
/// statistics) are stored and checkpointed but never touched by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    fn new(value: Vec<f32>, trainable: bool) -> Self {
        let grad = if trainable { vec![0.0; value.len()] } else { Vec::new() };
        Param {
            value,
            grad,
            trainable,
        }
    }

    fn normal(len: usize, std: f32, rng: &mut Rng) -> Self {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        Param::new((0..len).map(|_| dist.sample(rng)).collect(), true)
    }

    fn filled(len: usize, v: f32, trainable: bool) -> Self {
        Param::new(vec![v; len], trainable)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Visitor over `(path, param)` pairs in a fixed order.
pub trait ParamVisitor {
    fn visit(&mut self, path: &str, param: &Param);
}

pub trait ParamVisitorMut {
    fn visit(&mut self, path: &str, param: &mut Param);
}

impl<F: FnMut(&str, &Param)> ParamVisitor for F {
    fn visit(&mut self, path: &str, param: &Param) {
        self(path, param)
    }
}

impl<F: FnMut(&str, &mut Param)> ParamVisitorMut for F {
    fn visit(&mut self, path: &str, param: &mut Param) {
        self(path, param)
    }
}

/// Row-major `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold `src` (`c×h×w`) into `(c·k·k) × (oh·ow)` patches.
fn im2col(src: &[f32], g: Geometry, col: &mut [f32]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if x < 0 || x >= g.w as isize {
                            0.0
                        } else {
                            src_row[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patches back into `dst` (`c×h×w`).
fn col2im(col: &[f32], g: Geometry, dst: &mut [f32]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            dst_row[x as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution with an odd kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: Param,
    pub bias: Option<Param>,
}

#[derive(Debug)]
pub struct ConvCache {
    cols: Vec<Vec<f32>>,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, bias: bool, rng: &mut Rng) -> Self {
        assert!(k % 2 == 1, "same-padding needs an odd kernel");
        let fan_in = (cin * k * k) as f32;
        // He init for layers feeding ReLU; the biased 1×1 projection is linear.
        let std = if bias { (1.0 / fan_in).sqrt() } else { (2.0 / fan_in).sqrt() };
        Conv2d {
            cin,
            cout,
            k,
            weight: Param::normal(cout * cin * k * k, std, rng),
            bias: bias.then(|| Param::filled(cout, 0.0, true)),
        }
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        Geometry {
            c: self.cin,
            h,
            w,
            k: self.k,
            stride: 1,
            pad: self.k / 2,
            oh: h,
            ow: w,
        }
    }

    fn run(&self, x: &Tensor, keep_cols: bool) -> (Tensor, Vec<Vec<f32>>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let g = self.geometry(x.h, x.w);
        let p = g.cols();
        let mut out = Tensor::zeros(x.n, self.cout, x.h, x.w);
        let mut cols = Vec::new();
        let mut col = vec![0.0; g.rows() * p];
        for i in 0..x.n {
            im2col(x.sample(i), g, &mut col);
            let y = out.sample_mut(i);
            gemm(self.cout, g.rows(), p, &self.weight.value, false, &col, false, y, 0.0);
            if let Some(b) = &self.bias {
                for (co, bv) in b.value.iter().enumerate() {
                    y[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
            if keep_cols {
                cols.push(col.clone());
            }
        }
        (out, cols)
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, ConvCache) {
        let (out, cols) = self.run(x, true);
        (out, ConvCache { cols, h: x.h, w: x.w })
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        self.run(x, false).0
    }

    pub fn backward(&mut self, cache: &ConvCache, dy: &Tensor) -> Tensor {
        let g = self.geometry(cache.h, cache.w);
        let p = g.cols();
        let mut dx = Tensor::zeros(dy.n, self.cin, cache.h, cache.w);
        let mut dcol = vec![0.0; g.rows() * p];
        for i in 0..dy.n {
            let dyi = dy.sample(i);
            gemm(self.cout, p, g.rows(), dyi, false, &cache.cols[i], true, &mut self.weight.grad, 1.0);
            if let Some(b) = &mut self.bias {
                for (co, gb) in b.grad.iter_mut().enumerate() {
                    *gb += dyi[co * p..(co + 1) * p].iter().sum::<f32>();
                }
            }
            gemm(g.rows(), self.cout, p, &self.weight.value, true, dyi, false, &mut dcol, 0.0);
            col2im(&dcol, g, dx.sample_mut(i));
        }
        dx
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            v.visit(&format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut) {
        v.visit(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.visit(&format!("{prefix}.bias"), b);
        }
    }
}

/// Transposed convolution, kernel 4, stride 2, padding 1: doubles H and W.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv2d {
    pub cin: usize,
    pub cout: usize,
    /// Laid out `cin × (cout·4·4)`.
    pub weight: Param,
}

#[derive(Debug)]
pub struct DeconvCache {
    input: Tensor,
}

const DECONV_K: usize = 4;

impl Deconv2d {
    pub fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        // Each output pixel receives cin·(k/s)² contributions.
        let std = (2.0 / (cin * 4) as f32).sqrt();
        Deconv2d {
            cin,
            cout,
            weight: Param::normal(cin * cout * DECONV_K * DECONV_K, std, rng),
        }
    }

    fn geometry(&self, h_in: usize, w_in: usize) -> Geometry {
        Geometry {
            c: self.cout,
            h: 2 * h_in,
            w: 2 * w_in,
            k: DECONV_K,
            stride: 2,
            pad: 1,
            oh: h_in,
            ow: w_in,
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "deconv input channels");
        let g = self.geometry(x.h, x.w);
        let p = g.cols();
        let mut out = Tensor::zeros(x.n, self.cout, g.h, g.w);
        let mut col = vec![0.0; g.rows() * p];
        for i in 0..x.n {
            gemm(g.rows(), self.cin, p, &self.weight.value, true, x.sample(i), false, &mut col, 0.0);
            col2im(&col, g, out.sample_mut(i));
        }
        out
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, DeconvCache) {
        (self.forward_eval(x), DeconvCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &DeconvCache, dy: &Tensor) -> Tensor {
        let x = &cache.input;
        let g = self.geometry(x.h, x.w);
        let p = g.cols();
        let mut dx = Tensor::zeros(x.n, self.cin, x.h, x.w);
        let mut dcol = vec![0.0; g.rows() * p];
        for i in 0..x.n {
            im2col(dy.sample(i), g, &mut dcol);
            gemm(self.cin, g.rows(), p, &self.weight.value, false, &dcol, false, dx.sample_mut(i), 0.0);
            gemm(self.cin, p, g.rows(), x.sample(i), false, &dcol, true, &mut self.weight.grad, 1.0);
        }
        dx
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&format!("{prefix}.weight"), &self.weight);
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut) {
        v.visit(&format!("{prefix}.weight"), &mut self.weight);
    }
}

pub const BN_EPS: f32 = 1e-3;
pub const BN_MOMENTUM: f32 = 0.1;

/// Per-channel batch normalization; four stored scalars per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

#[derive(Debug)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Param::filled(c, 1.0, true),
            beta: Param::filled(c, 0.0, true),
            running_mean: Param::filled(c, 0.0, false),
            running_var: Param::filled(c, 1.0, false),
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BnCache) {
        let (c, p) = (self.channels(), x.plane());
        assert_eq!(x.c, c, "batch norm channels");
        let count = (x.n * p) as f64;
        let mut xhat = x.clone();
        let mut inv_std = vec![0.0; c];
        let mut out = Tensor::zeros(x.n, c, x.h, x.w);
        for ch in 0..c {
            let (mut sum, mut sq) = (0.0f64, 0.0f64);
            for i in 0..x.n {
                for &v in x.channel(i, ch) {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / count;
            let var = (sq / count - mean * mean).max(0.0);
            let istd = 1.0 / (var + BN_EPS as f64).sqrt();
            inv_std[ch] = istd as f32;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..x.n {
                let off = i * x.sample_len() + ch * p;
                for j in off..off + p {
                    let xh = ((x.data[j] as f64 - mean) * istd) as f32;
                    xhat.data[j] = xh;
                    out.data[j] = g * xh + b;
                }
            }
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean as f32;
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var as f32;
        }
        (out, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let (c, p) = (self.channels(), x.plane());
        assert_eq!(x.c, c, "batch norm channels");
        let mut out = x.clone();
        for ch in 0..c {
            let istd = 1.0 / (self.running_var.value[ch] + BN_EPS).sqrt();
            let scale = self.gamma.value[ch] * istd;
            let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
            for i in 0..x.n {
                let off = i * x.sample_len() + ch * p;
                out.data[off..off + p].iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let (c, p) = (self.channels(), dy.plane());
        let count = (dy.n * p) as f32;
        let mut dx = Tensor::zeros(dy.n, c, dy.h, dy.w);
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f32, 0.0f32);
            for i in 0..dy.n {
                for (&g, &xh) in dy.channel(i, ch).iter().zip(cache.xhat.channel(i, ch)) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let k = self.gamma.value[ch] * cache.inv_std[ch] / count;
            for i in 0..dy.n {
                let off = i * dy.sample_len() + ch * p;
                for j in off..off + p {
                    dx.data[j] = k * (count * dy.data[j] - sum_dy - cache.xhat.data[j] * sum_dy_xhat);
                }
            }
        }
        dx
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&format!("{prefix}.gamma"), &self.gamma);
        v.visit(&format!("{prefix}.beta"), &self.beta);
        v.visit(&format!("{prefix}.running_mean"), &self.running_mean);
        v.visit(&format!("{prefix}.running_var"), &self.running_var);
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut) {
        v.visit(&format!("{prefix}.gamma"), &mut self.gamma);
        v.visit(&format!("{prefix}.beta"), &mut self.beta);
        v.visit(&format!("{prefix}.running_mean"), &mut self.running_mean);
        v.visit(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}

fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// conv3 → batch norm → ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

#[derive(Debug)]
pub struct ConvBlockCache {
    conv: ConvCache,
    bn: BnCache,
    out: Tensor,
}

impl ConvBlock {
    pub fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        ConvBlock {
            conv: Conv2d::new(cin, cout, 3, false, rng),
            bn: BatchNorm::new(cout),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, ConvBlockCache) {
        let (y, conv) = self.conv.forward_train(x);
        let (mut y, bn) = self.bn.forward_train(&y);
        relu_inplace(&mut y);
        let cache = ConvBlockCache {
            conv,
            bn,
            out: y.clone(),
        };
        (y, cache)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut y = self.bn.forward_eval(&self.conv.forward_eval(x));
        relu_inplace(&mut y);
        y
    }

    pub fn backward(&mut self, cache: &ConvBlockCache, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        for (gv, &o) in g.data.iter_mut().zip(&cache.out.data) {
            if o <= 0.0 {
                *gv = 0.0;
            }
        }
        let g = self.bn.backward(&cache.bn, &g);
        self.conv.backward(&cache.conv, &g)
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.conv.visit(&format!("{prefix}.conv"), v);
        self.bn.visit(&format!("{prefix}.bn"), v);
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut) {
        self.conv.visit_mut(&format!("{prefix}.conv"), v);
        self.bn.visit_mut(&format!("{prefix}.bn"), v);
    }
}

/// deconv4 stride 2 → batch norm → ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct UpBlock {
    pub deconv: Deconv2d,
    pub bn: BatchNorm,
}

#[derive(Debug)]
pub struct UpBlockCache {
    deconv: DeconvCache,
    bn: BnCache,
    out: Tensor,
}

impl UpBlock {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        UpBlock {
            deconv: Deconv2d::new(channels, channels, rng),
            bn: BatchNorm::new(channels),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, UpBlockCache) {
        let (y, deconv) = self.deconv.forward_train(x);
        let (mut y, bn) = self.bn.forward_train(&y);
        relu_inplace(&mut y);
        let cache = UpBlockCache {
            deconv,
            bn,
            out: y.clone(),
        };
        (y, cache)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut y = self.bn.forward_eval(&self.deconv.forward_eval(x));
        relu_inplace(&mut y);
        y
    }

    pub fn backward(&mut self, cache: &UpBlockCache, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        for (gv, &o) in g.data.iter_mut().zip(&cache.out.data) {
            if o <= 0.0 {
                *gv = 0.0;
            }
        }
        let g = self.bn.backward(&cache.bn, &g);
        self.deconv.backward(&cache.deconv, &g)
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.deconv.visit(&format!("{prefix}.deconv"), v);
        self.bn.visit(&format!("{prefix}.bn"), v);
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut) {
        self.deconv.visit_mut(&format!("{prefix}.deconv"), v);
        self.bn.visit_mut(&format!("{prefix}.bn"), v);
    }
}

/// 2×2 max pooling, stride 2.
#[derive(Debug)]
pub struct PoolCache {
    argmax: Vec<u32>,
    h: usize,
    w: usize,
}

fn maxpool_impl(x: &Tensor, keep: bool) -> (Tensor, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut argmax = if keep { vec![0u32; out.data.len()] } else { Vec::new() };
    let mut o = 0;
    for i in 0..x.n {
        for c in 0..x.c {
            let plane = x.channel(i, c);
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = (2 * y) * x.w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * y + dy) * x.w + 2 * xx + dx;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    out.data[o] = plane[best];
                    if keep {
                        argmax[o] = best as u32;
                    }
                    o += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_eval(x: &Tensor) -> Tensor {
    maxpool_impl(x, false).0
}

pub fn maxpool_train(x: &Tensor) -> (Tensor, PoolCache) {
    let (out, argmax) = maxpool_impl(x, true);
    (out, PoolCache { argmax, h: x.h, w: x.w })
}

pub fn maxpool_backward(cache: &PoolCache, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.c, cache.h, cache.w);
    let (in_plane, out_plane) = (cache.h * cache.w, dy.plane());
    for (o, &g) in dy.data.iter().enumerate() {
        let nc = o / out_plane;
        dx.data[nc * in_plane + cache.argmax[o] as usize] += g;
    }
    dx
}

/// Channel-wise ("spatial") dropout. Kept channels are rescaled by `1/(1-rate)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialDropout {
    pub rate: f32,
}

#[derive(Debug)]
pub struct DropoutCache {
    scale: Vec<f32>,
}

impl SpatialDropout {
    fn draw(&self, n: usize, c: usize, rng: &mut Rng) -> Vec<f32> {
        if self.rate <= 0.0 {
            return vec![1.0; n * c];
        }
        let keep = 1.0 - self.rate;
        (0..n * c)
            .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }

    fn apply(x: &Tensor, scale: &[f32]) -> Tensor {
        let mut out = x.clone();
        let p = x.plane();
        for (nc, &s) in scale.iter().enumerate() {
            out.data[nc * p..(nc + 1) * p].iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    pub fn forward_train(&self, x: &Tensor, rng: &mut Rng) -> (Tensor, DropoutCache) {
        let scale = self.draw(x.n, x.c, rng);
        (Self::apply(x, &scale), DropoutCache { scale })
    }

    /// Identity unless `rng` is given (Monte-Carlo sampling).
    pub fn forward_eval(&self, x: &Tensor, rng: Option<&mut Rng>) -> Tensor {
        match rng {
            Some(rng) => Self::apply(x, &self.draw(x.n, x.c, rng)),
            None => x.clone(),
        }
    }

    pub fn backward(cache: &DropoutCache, dy: &Tensor) -> Tensor {
        Self::apply(dy, &cache.scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn rand_tensor(n: usize, c: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor {
        let d = Normal::new(0.0f32, 1.0).unwrap();
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| d.sample(rng)).collect())
    }

    /// Scalar probe `sum(y · r)` for a fixed random `r`, so `dL/dy = r`.
    fn probe(y: &Tensor, r: &Tensor) -> f64 {
        y.data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    }

    fn check_input_grad(
        x: &Tensor,
        analytic: &Tensor,
        f: &mut dyn FnMut(&Tensor) -> f64,
        tol: f64,
    ) {
        let h = 1e-2f32;
        for idx in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h as f64);
            let an = analytic.data[idx] as f64;
            let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-2));
            assert!(err < tol, "idx {idx}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = stream(1, "t");
        let mut conv = Conv2d::new(2, 3, 3, true, &mut rng);
        let x = rand_tensor(2, 2, 5, 4, &mut rng);
        let (y, cache) = conv.forward_train(&x);
        let r = rand_tensor(y.n, y.c, y.h, y.w, &mut rng);
        let dx = conv.backward(&cache, &r);
        let c2 = conv.clone();
        check_input_grad(&x, &dx, &mut |t| probe(&c2.forward_eval(t), &r), 1e-2);
        // weight gradient, one entry
        let widx = 5;
        let mut cp = conv.clone();
        cp.weight.value[widx] += 1e-2;
        let mut cm = conv.clone();
        cm.weight.value[widx] -= 1e-2;
        let fd = (probe(&cp.forward_eval(&x), &r) - probe(&cm.forward_eval(&x), &r)) / 2e-2;
        assert!((fd - conv.weight.grad[widx] as f64).abs() < 1e-2 * fd.abs().max(1.0));
    }

    #[test]
    fn deconv_doubles_resolution_and_backward_matches() {
        let mut rng = stream(2, "t");
        let mut dc = Deconv2d::new(3, 2, &mut rng);
        let x = rand_tensor(1, 3, 3, 4, &mut rng);
        let (y, cache) = dc.forward_train(&x);
        assert_eq!(y.shape(), [1, 2, 6, 8]);
        let r = rand_tensor(1, 2, 6, 8, &mut rng);
        let dx = dc.backward(&cache, &r);
        let d2 = dc.clone();
        check_input_grad(&x, &dx, &mut |t| probe(&d2.forward_eval(t), &r), 1e-2);
        let widx = 11;
        let mut cp = dc.clone();
        cp.weight.value[widx] += 1e-2;
        let mut cm = dc.clone();
        cm.weight.value[widx] -= 1e-2;
        let fd = (probe(&cp.forward_eval(&x), &r) - probe(&cm.forward_eval(&x), &r)) / 2e-2;
        assert!((fd - dc.weight.grad[widx] as f64).abs() < 1e-2 * fd.abs().max(1.0));
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = stream(3, "t");
        let mut bn = BatchNorm::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        let x = rand_tensor(3, 2, 3, 3, &mut rng);
        let (y, cache) = bn.forward_train(&x);
        let r = rand_tensor(y.n, y.c, y.h, y.w, &mut rng);
        let dx = bn.backward(&cache, &r);
        let b2 = bn.clone();
        check_input_grad(
            &x,
            &dx,
            &mut |t| {
                let mut b = b2.clone();
                probe(&b.forward_train(t).0, &r)
            },
            2e-2,
        );
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 4.0, 3.0, 2.0]);
        let (y, cache) = maxpool_train(&x);
        assert_eq!(y.data, vec![4.0]);
        let dx = maxpool_backward(&cache, &Tensor::from_vec(1, 1, 1, 1, vec![2.0]));
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_eval_without_rng_is_identity() {
        let mut rng = stream(4, "t");
        let x = rand_tensor(2, 3, 2, 2, &mut rng);
        let d = SpatialDropout { rate: 0.0 };
        assert_eq!(d.forward_train(&x, &mut rng).0, x);
        let d = SpatialDropout { rate: 0.5 };
        assert_eq!(d.forward_eval(&x, None), x);
        let y = d.forward_eval(&x, Some(&mut rng));
        for i in 0..2 {
            for c in 0..3 {
                let (a, b) = (x.channel(i, c), y.channel(i, c));
                let dropped = b.iter().all(|v| *v == 0.0);
                let scaled = a.iter().zip(b).all(|(p, q)| (2.0 * p - q).abs() < 1e-6);
                assert!(dropped || scaled);
            }
        }
    }
}
