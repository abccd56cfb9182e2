//! Convolutional building blocks with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during a `Mode::Train`
//! forward. Backward consumes that cache, accumulates parameter gradients
//! into `Param::grad` and returns the gradient with respect to the input.
//! Tensors are NCHW.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::module::{join, Entry, EntryMut, Mode, Module, Param};
use super::tensor::{lane_dot, lane_sum, matmul, Real, Tensor};

/// Square-kernel, stride-1 convolution.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// When false, backward skips the input gradient (first layer).
    pub input_grad: bool,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        // fan-out scaled normal, matched to the ReLU that follows
        let fan_out = (out_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("valid std");
        let weight = Tensor::from_fn(&[out_channels, in_channels, kernel, kernel], |_| {
            T::c(normal.sample(rng))
        });
        Conv2d {
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_channels]))),
            in_channels,
            out_channels,
            kernel,
            padding,
            input_grad: true,
            cache: None,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        (h + 2 * p + 1 - k, w + 2 * p + 1 - k)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (ho, wo) = self.out_hw(h, w);
        let hw = ho * wo;
        let ckk = c * self.kernel * self.kernel;
        let mut y = Tensor::zeros(&[b, self.out_channels, ho, wo]);
        let direct = self.kernel == 1 && self.padding == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * hw] };
        for i in 0..b {
            let src: &[T] = if direct {
                x.item(i)
            } else {
                im2col(x.item(i), c, h, w, self.kernel, self.padding, &mut cols);
                &cols
            };
            let out = y.item_mut(i);
            matmul(
                self.out_channels,
                ckk,
                hw,
                self.weight.value.data(),
                false,
                src,
                false,
                T::zero(),
                out,
            );
            if let Some(bias) = &self.bias {
                for (o, &bv) in bias.value.data().iter().enumerate() {
                    out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        y
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.infer(&x);
        if mode == Mode::Train {
            self.cache = Some(x);
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Option<Tensor<T>> {
        let x = self.cache.take().expect("conv backward without train forward");
        let (b, c, h, w) = x.dims4();
        let (ho, wo) = self.out_hw(h, w);
        let hw = ho * wo;
        let ckk = c * self.kernel * self.kernel;
        let direct = self.kernel == 1 && self.padding == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * hw] };
        let mut dcols = vec![T::zero(); ckk * hw];
        let mut dx = self.input_grad.then(|| Tensor::zeros(x.shape()));
        for i in 0..b {
            let dyi = dy.item(i);
            let src: &[T] = if direct {
                x.item(i)
            } else {
                im2col(x.item(i), c, h, w, self.kernel, self.padding, &mut cols);
                &cols
            };
            matmul(
                self.out_channels,
                hw,
                ckk,
                dyi,
                false,
                src,
                true,
                T::one(),
                self.weight.grad.data_mut(),
            );
            if let Some(bias) = &mut self.bias {
                for (o, g) in bias.grad.data_mut().iter_mut().enumerate() {
                    *g += dyi[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxi = dx.item_mut(i);
                if direct {
                    matmul(
                        ckk,
                        self.out_channels,
                        hw,
                        self.weight.value.data(),
                        true,
                        dyi,
                        false,
                        T::zero(),
                        dxi,
                    );
                } else {
                    matmul(
                        ckk,
                        self.out_channels,
                        hw,
                        self.weight.value.data(),
                        true,
                        dyi,
                        false,
                        T::zero(),
                        &mut dcols,
                    );
                    col2im(&dcols, c, h, w, self.kernel, self.padding, dxi);
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "weight"), Entry::Param(&self.weight));
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), Entry::Param(b));
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(&join(prefix, "weight"), EntryMut::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), EntryMut::Param(b));
        }
    }
}

/// Unfolds one `c x h x w` image into a `(c*k*k) x (ho*wo)` patch matrix.
pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [T]) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let hw = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ch * k + ki) * k + kj) * hw..][..hw];
                let lo = pad.saturating_sub(kj).min(wo);
                let hi = (w + pad).saturating_sub(kj).min(wo).max(lo);
                for oy in 0..ho {
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    let iy = (oy + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let off = lo + kj - pad;
                    dst[lo..hi].copy_from_slice(&src_row[off..off + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [T]) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let hw = ho * wo;
    dx.fill(T::zero());
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ch * k + ki) * k + kj) * hw..][..hw];
                let lo = pad.saturating_sub(kj).min(wo);
                let hi = (w + pad).saturating_sub(kj).min(wo).max(lo);
                for oy in 0..ho {
                    let iy = (oy + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * wo + lo..oy * wo + hi];
                    let off = lo + kj - pad;
                    let dst = &mut plane[iy as usize * w + off..iy as usize * w + off + (hi - lo)];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Per-channel batch normalization over (batch, height, width), optionally
/// fused with a trailing ReLU and 2x2 max-pool.
///
/// Fusing keeps the activation memory traffic to one statistics pass and one
/// normalize pass; backward recomputes the normalized input from the cached
/// pre-normalization tensor instead of storing it.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    relu: bool,
    pool: bool,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    input: Tensor<T>,
    mean: Vec<T>,
    inv_std: Vec<T>,
    /// Pool argmax within each 2x2 window, or `INACTIVE` when the window's
    /// maximum was clipped by the ReLU.
    argmax: Vec<u8>,
}

const INACTIVE: u8 = u8::MAX;

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
            relu: false,
            pool: false,
            cache: None,
        }
    }

    /// BN followed by ReLU.
    pub fn with_relu(channels: usize) -> Self {
        BatchNorm2d {
            relu: true,
            ..Self::new(channels)
        }
    }

    /// BN followed by ReLU and a 2x2 max-pool.
    pub fn with_relu_pool(channels: usize) -> Self {
        BatchNorm2d {
            relu: true,
            pool: true,
            ..Self::new(channels)
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Eval {
            return self.infer(&x);
        }
        let (b, c, h, w) = x.dims4();
        let hw = h * w;
        let n = (b * hw) as f64;
        let mom = T::c(self.momentum);
        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = 0.0f64;
            let mut ss = 0.0f64;
            for i in 0..b {
                let plane = &x.item(i)[ch * hw..(ch + 1) * hw];
                s += lane_sum(plane).to_f64().unwrap_or(f64::NAN);
                ss += lane_dot(plane, plane).to_f64().unwrap_or(f64::NAN);
            }
            let m = s / n;
            let var = (ss / n - m * m).max(0.0);
            mean[ch] = T::c(m);
            inv_std[ch] = T::one() / (T::c(var) + T::c(self.eps)).sqrt();
            let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (T::one() - mom) * *rm + mom * T::c(m);
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (T::one() - mom) * *rv + mom * T::c(unbiased);
        }
        let (y, argmax) = self.apply(&x, &mean, &inv_std, true);
        self.cache = Some(BnCache {
            input: x,
            mean,
            inv_std,
            argmax,
        });
        y
    }

    /// Inference with the running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let eps = T::c(self.eps);
        let mean = self.running_mean.data().to_vec();
        let inv_std = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect::<Vec<_>>();
        self.apply(x, &mean, &inv_std, false).0
    }

    fn apply(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T], keep: bool) -> (Tensor<T>, Vec<u8>) {
        let (b, c, h, w) = x.dims4();
        let hw = h * w;
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let affine = |ch: usize| {
            let scale = gamma[ch] * inv_std[ch];
            (scale, beta[ch] - mean[ch] * scale)
        };
        if !self.pool {
            let mut y = Tensor::zeros(x.shape());
            for i in 0..b {
                for ch in 0..c {
                    let (scale, shift) = affine(ch);
                    let src = &x.item(i)[ch * hw..(ch + 1) * hw];
                    let dst = &mut y.item_mut(i)[ch * hw..(ch + 1) * hw];
                    if self.relu {
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = (scale * v + shift).max(T::zero());
                        }
                    } else {
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = scale * v + shift;
                        }
                    }
                }
            }
            return (y, Vec::new());
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Tensor::zeros(&[b, c, ho, wo]);
        let mut argmax = if keep { vec![0u8; b * c * ho * wo] } else { Vec::new() };
        let mut row0 = vec![T::zero(); w];
        let mut row1 = vec![T::zero(); w];
        for i in 0..b {
            for ch in 0..c {
                let (scale, shift) = affine(ch);
                let src = &x.item(i)[ch * hw..(ch + 1) * hw];
                let plane = (i * c + ch) * ho * wo;
                let dst = &mut y.item_mut(i)[ch * ho * wo..(ch + 1) * ho * wo];
                for oy in 0..ho {
                    for (r, v) in row0.iter_mut().zip(&src[2 * oy * w..(2 * oy + 1) * w]) {
                        *r = scale * *v + shift;
                    }
                    for (r, v) in row1.iter_mut().zip(&src[(2 * oy + 1) * w..(2 * oy + 2) * w]) {
                        *r = scale * *v + shift;
                    }
                    for ox in 0..wo {
                        let cands = [row0[2 * ox], row0[2 * ox + 1], row1[2 * ox], row1[2 * ox + 1]];
                        let mut best = 0;
                        for k in 1..4 {
                            if cands[k] > cands[best] {
                                best = k;
                            }
                        }
                        let v = cands[best];
                        let active = v > T::zero();
                        dst[oy * wo + ox] = if active { v } else { T::zero() };
                        if keep {
                            argmax[plane + oy * wo + ox] = if active { best as u8 } else { INACTIVE };
                        }
                    }
                }
            }
        }
        (y, argmax)
    }

    pub fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("batch-norm backward without train forward");
        let BnCache {
            input: mut dx,
            mean,
            inv_std,
            argmax,
        } = cache;
        let (b, c, h, w) = dx.dims4();
        let hw = h * w;
        let n = T::c((b * hw) as f64);
        let (ho, wo) = (h / 2, w / 2);
        let window = |oy: usize, ox: usize, k: u8| (2 * oy + (k as usize >> 1)) * w + 2 * ox + (k as usize & 1);
        for ch in 0..c {
            let (m, is) = (mean[ch], inv_std[ch]);
            let g = self.gamma.value.data()[ch];
            let shift = self.beta.value.data()[ch] - m * g * is;
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for i in 0..b {
                let x = &dx.item(i)[ch * hw..(ch + 1) * hw];
                if self.pool {
                    let d = &dy.item(i)[ch * ho * wo..(ch + 1) * ho * wo];
                    let am = &argmax[(i * c + ch) * ho * wo..(i * c + ch + 1) * ho * wo];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let k = am[oy * wo + ox];
                            if k == INACTIVE {
                                continue;
                            }
                            let g_out = d[oy * wo + ox];
                            sum_d += g_out;
                            sum_dx += g_out * (x[window(oy, ox, k)] - m) * is;
                        }
                    }
                } else {
                    let d = &dy.item(i)[ch * hw..(ch + 1) * hw];
                    for (&dv, &xv) in d.iter().zip(x) {
                        let live = !self.relu || g * is * xv + shift > T::zero();
                        if live {
                            sum_d += dv;
                            sum_dx += dv * (xv - m) * is;
                        }
                    }
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_dx;
            self.beta.grad.data_mut()[ch] += sum_d;
            let c1 = g * is;
            let (a, k) = (sum_d / n, sum_dx / n);
            for i in 0..b {
                if self.pool {
                    let plane = &mut dx.item_mut(i)[ch * hw..(ch + 1) * hw];
                    let d = &dy.item(i)[ch * ho * wo..(ch + 1) * ho * wo];
                    let am = &argmax[(i * c + ch) * ho * wo..(i * c + ch + 1) * ho * wo];
                    // collect routed gradients before x is overwritten in place
                    let mut routed = Vec::with_capacity(ho * wo);
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let kk = am[oy * wo + ox];
                            if kk != INACTIVE {
                                routed.push((window(oy, ox, kk), d[oy * wo + ox]));
                            }
                        }
                    }
                    for v in plane.iter_mut() {
                        let xh = (*v - m) * is;
                        *v = -c1 * (a + xh * k);
                    }
                    for (pos, gv) in routed {
                        plane[pos] += c1 * gv;
                    }
                } else {
                    let d = &dy.item(i)[ch * hw..(ch + 1) * hw];
                    let plane = &mut dx.item_mut(i)[ch * hw..(ch + 1) * hw];
                    for (v, &dv) in plane.iter_mut().zip(d) {
                        let live = !self.relu || c1 * *v + shift > T::zero();
                        let dv = if live { dv } else { T::zero() };
                        let xh = (*v - m) * is;
                        *v = c1 * (dv - a - xh * k);
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "gamma"), Entry::Param(&self.gamma));
        f(&join(prefix, "beta"), Entry::Param(&self.beta));
        f(&join(prefix, "running_mean"), Entry::Buffer(&self.running_mean));
        f(&join(prefix, "running_var"), Entry::Buffer(&self.running_var));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(&join(prefix, "gamma"), EntryMut::Param(&mut self.gamma));
        f(&join(prefix, "beta"), EntryMut::Param(&mut self.beta));
        f(
            &join(prefix, "running_mean"),
            EntryMut::Buffer(&mut self.running_mean),
        );
        f(
            &join(prefix, "running_var"),
            EntryMut::Buffer(&mut self.running_var),
        );
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn infer<T: Real>(mut x: Tensor<T>) -> Tensor<T> {
        for v in x.data_mut() {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        }
        x
    }

    pub fn forward<T: Real>(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Train {
            self.mask = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        }
        Self::infer(x)
    }

    pub fn backward<T: Real>(&mut self, mut dy: Tensor<T>) -> Tensor<T> {
        let mask = self.mask.take().expect("relu backward without train forward");
        for (d, &on) in dy.data_mut().iter_mut().zip(&mask) {
            if !on {
                *d = T::zero();
            }
        }
        dy
    }
}

/// 2x2, stride-2 max pooling with floor semantics for odd sizes.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, Vec<u32>)>,
}

impl MaxPool2 {
    pub fn out_size(n: usize) -> usize {
        n / 2
    }

    pub fn infer<T: Real>(x: &Tensor<T>) -> Tensor<T> {
        let mut scratch = MaxPool2::default();
        scratch.run(x, false)
    }

    pub fn forward<T: Real>(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        self.run(&x, mode == Mode::Train)
    }

    fn run<T: Real>(&mut self, x: &Tensor<T>, keep: bool) -> Tensor<T> {
        let (b, c, h, w) = x.dims4();
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Tensor::zeros(&[b, c, ho, wo]);
        let mut idx = if keep { vec![0u32; b * c * ho * wo] } else { Vec::new() };
        let xd = x.data();
        let yd = y.data_mut();
        for plane in 0..b * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = 2 * oy * w + 2 * ox;
                    let cands = [base, base + 1, base + w, base + w + 1];
                    let mut best = cands[0];
                    for &cnd in &cands[1..] {
                        if src[cnd] > src[best] {
                            best = cnd;
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    yd[o] = src[best];
                    if keep {
                        idx[o] = best as u32;
                    }
                }
            }
        }
        if keep {
            self.cache = Some((x.shape().to_vec(), idx));
        }
        y
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (shape, idx) = self.cache.take().expect("pool backward without train forward");
        let (h, w) = (shape[2], shape[3]);
        let out_plane = (h / 2) * (w / 2);
        let mut dx = Tensor::zeros(&shape);
        let dxd = dx.data_mut();
        for (o, (&g, &i)) in dy.data().iter().zip(&idx).enumerate() {
            let plane = o / out_plane;
            dxd[plane * h * w + i as usize] += g;
        }
        dx
    }
}

/// Fully connected layer `y = x W^T + b` on `[batch, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("valid bound");
        Linear {
            weight: Param::new(Tensor::from_fn(&[outputs, inputs], |_| {
                T::c(dist.sample(rng))
            })),
            bias: Param::new(Tensor::zeros(&[outputs])),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.infer(&x);
        if mode == Mode::Train {
            self.cache = Some(x);
        }
        y
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let b = x.shape()[0];
        let (out, inp) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        let mut y = Tensor::zeros(&[b, out]);
        matmul(b, inp, out, x.data(), false, self.weight.value.data(), true, T::zero(), y.data_mut());
        for i in 0..b {
            for (v, &bv) in y.item_mut(i).iter_mut().zip(self.bias.value.data()) {
                *v += bv;
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect("linear backward without train forward");
        let b = x.shape()[0];
        let (out, inp) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        matmul(out, b, inp, dy.data(), true, x.data(), false, T::one(), self.weight.grad.data_mut());
        for i in 0..b {
            for (g, &d) in self.bias.grad.data_mut().iter_mut().zip(dy.item(i)) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&[b, inp]);
        matmul(b, out, inp, dy.data(), false, self.weight.value.data(), false, T::zero(), dx.data_mut());
        dx
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "weight"), Entry::Param(&self.weight));
        f(&join(prefix, "bias"), Entry::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(&join(prefix, "weight"), EntryMut::Param(&mut self.weight));
        f(&join(prefix, "bias"), EntryMut::Param(&mut self.bias));
    }
}

/// Spatial mean: `[b, c, h, w] -> [b, c]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    let hw = h * w;
    let inv = T::one() / T::c(hw as f64);
    Tensor::from_fn(&[b, c], |i| {
        let (bi, ch) = (i / c, i % c);
        x.item(bi)[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() * inv
    })
}

pub fn global_avg_pool_backward<T: Real>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (b, c) = (dy.shape()[0], dy.shape()[1]);
    let hw = h * w;
    let inv = T::one() / T::c(hw as f64);
    Tensor::from_fn(&[b, c, h, w], |i| dy.data()[i / hw] * inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4();
        let (o, _, k, _) = wt.dims4();
        let (ho, wo) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
        let mut y = Tensor::zeros(&[b, o, ho, wo]);
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy + ki) as isize - pad as isize;
                                    let ix = (ox + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += x.data()[((bi * c + ic) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                        y.data_mut()[((bi * o + oc) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, pad) in &[(3usize, 1usize), (1, 0), (3, 0)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, pad, false, &mut rng);
            let x = Tensor::from_fn(&[2, 3, 5, 6], |i| ((i * 37 % 11) as f64) - 5.0);
            let y = conv.forward(x.clone(), Mode::Eval);
            let want = naive_conv(&x, &conv.weight.value, pad);
            assert!(y.max_abs_diff(&want) < 1e-12, "k={k} pad={pad}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), g> == <x, col2im(g)>
        let (c, h, w, k, p) = (2, 4, 5, 3, 1);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let n = c * k * k * h * w;
        let g: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; n];
        im2col(&x, c, h, w, k, p, &mut cols);
        let mut back = vec![0.0; c * h * w];
        col2im(&g, c, h, w, k, p, &mut back);
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_floors_odd_sizes() {
        let x = Tensor::from_fn(&[1, 1, 5, 5], |i| i as f32);
        let mut pool = MaxPool2::default();
        let y = pool.forward(x, Mode::Train);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[6.0, 8.0, 16.0, 18.0]);
        let dx = pool.backward(&Tensor::full(&[1, 1, 2, 2], 1.0f32));
        assert_eq!(dx.data().iter().sum::<f32>(), 4.0);
        assert_eq!(dx.data()[6], 1.0);
    }

    #[test]
    fn batchnorm_running_stats_move_only_in_train_mode() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| i as f64);
        bn.forward(x.clone(), Mode::Eval);
        assert_eq!(bn.running_mean.data(), &[0.0, 0.0]);
        let y = bn.forward(x, Mode::Train);
        assert!(bn.running_mean.data()[0] > 0.0);
        // normalized output has zero mean per channel
        let m0: f64 = (0..3).flat_map(|b| y.item(b)[0..4].to_vec()).sum();
        assert!(m0.abs() < 1e-10);
    }

    fn bn_loss(bn: &mut BatchNorm2d<f64>, x: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
        let y = bn.forward(x.clone(), Mode::Train);
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn fused_batchnorm_gradients_match_finite_differences() {
        let ctors: [fn(usize) -> BatchNorm2d<f64>; 3] =
            [BatchNorm2d::new, BatchNorm2d::with_relu, BatchNorm2d::with_relu_pool];
        for (v, ctor) in ctors.iter().enumerate() {
            let mut bn = ctor(2);
            bn.gamma.value = Tensor::from_vec(&[2], vec![1.3, 0.7]);
            bn.beta.value = Tensor::from_vec(&[2], vec![0.2, -0.1]);
            let x = Tensor::from_fn(&[2, 2, 5, 4], |i| ((i as f64) * 0.913).sin() * 2.0 + 0.1 * i as f64);
            let y = bn.forward(x.clone(), Mode::Train);
            let w = Tensor::from_fn(y.shape(), |i| ((i as f64) * 1.7).cos());
            bn.zero_grad();
            let dx = bn.backward(w.clone());
            let eps = 1e-6;
            for j in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[j] += eps;
                let mut xm = x.clone();
                xm.data_mut()[j] -= eps;
                let fd = (bn_loss(&mut bn.clone(), &xp, &w) - bn_loss(&mut bn.clone(), &xm, &w)) / (2.0 * eps);
                assert!((fd - dx.data()[j]).abs() < 1e-5, "variant {v} index {j}: {fd} vs {}", dx.data()[j]);
            }
            for ch in 0..2 {
                let mut p = bn.clone();
                p.gamma.value.data_mut()[ch] += eps;
                let mut m = bn.clone();
                m.gamma.value.data_mut()[ch] -= eps;
                let fd = (bn_loss(&mut p, &x, &w) - bn_loss(&mut m, &x, &w)) / (2.0 * eps);
                assert!((fd - bn.gamma.grad.data()[ch]).abs() < 1e-5, "variant {v} gamma");
            }
        }
    }
}
