//! Differentiable building blocks with hand-written backward passes.
//!
//! Layers are stateless with respect to activations: `forward` takes `&self`
//! and callers keep whatever inputs/outputs the matching `backward` needs.
//! `backward` accumulates parameter gradients into the layer's [`Param`]s and
//! returns the gradient with respect to the input.

use rand::Rng as _;
use rayon::prelude::*;

use crate::rng::{derive_seed_tagged, rng_from};
use crate::tensor::{FeatureMap, Real};

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    /// Uniform in `[-bound, bound]` from a generator keyed by `(seed, name)`.
    /// Values are drawn in `f32` so every precision starts from the same point.
    pub fn uniform(name: impl Into<String>, shape: Vec<usize>, bound: f32, seed: u64) -> Self {
        let mut p = Self::zeros(name, shape);
        let mut rng = rng_from(derive_seed_tagged(seed, &p.name));
        for v in &mut p.value {
            *v = T::lit(f64::from(rng.gen_range(-bound..=bound)));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Parameter traversal in a fixed order.
pub trait Parameterized<T: Real = f32> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }
}

/// Copy parameter values between two instances of the same architecture,
/// possibly of different precision.
pub fn copy_params<A: Real, B: Real>(src: &impl Parameterized<A>, dst: &mut impl Parameterized<B>) {
    let mut values = Vec::new();
    src.visit(&mut |p| values.push(p.value.clone()));
    let mut it = values.into_iter();
    dst.visit_mut(&mut |p| {
        let v = it.next().expect("same parameter layout");
        assert_eq!(v.len(), p.len(), "parameter `{}` differs in size", p.name);
        for (d, s) in p.value.iter_mut().zip(v) {
            *d = B::lit(s.as_f64());
        }
    });
}

/// How a layer's weights are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `sqrt(6 / fan_in)`, for layers feeding a ReLU.
    Relu,
    /// `sqrt(1 / fan_in)`, for layers feeding a sigmoid, a sum, or the output.
    Linear,
}

impl Init {
    fn bound(self, fan_in: usize) -> f32 {
        match self {
            Init::Relu => (6.0 / fan_in as f32).sqrt(),
            Init::Linear => (1.0 / fan_in as f32).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        seed: u64,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::uniform(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                init.bound(fan_in),
                seed,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_channels]),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (c * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (h, w) = (x.height, x.width);
        let (oh, ow) = self.output_hw(h, w);
        let p = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut out = FeatureMap::zeros(x.batch, self.out_channels, oh, ow);
        let pointwise = self.is_pointwise();
        out.data
            .par_chunks_mut(self.out_channels * p)
            .enumerate()
            .for_each(|(n, dst)| {
                let xi = x.item(n);
                let mut cols_buf;
                let cols: &[T] = if pointwise {
                    xi
                } else {
                    cols_buf = vec![T::zero(); kk * p];
                    self.im2col(xi, h, w, &mut cols_buf);
                    &cols_buf
                };
                for (o, b) in self.bias.value.iter().enumerate() {
                    dst[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = *b);
                }
                T::gemm(
                    self.out_channels,
                    kk,
                    p,
                    &self.weight.value,
                    (kk as isize, 1),
                    cols,
                    (p as isize, 1),
                    dst,
                    true,
                );
            });
        out
    }

    /// Accumulate parameter gradients; return dL/dx when `need_input_grad`.
    pub fn backward(
        &mut self,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let (h, w) = (x.height, x.width);
        let (oh, ow) = self.output_hw(h, w);
        let p = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let oc = self.out_channels;
        let pointwise = self.is_pointwise();
        let this = &*self;

        #[allow(clippy::type_complexity)]
        let partials: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..x.batch)
            .into_par_iter()
            .map(|n| {
                let xi = x.item(n);
                let dyi = dy.item(n);
                let mut cols_buf;
                let cols: &[T] = if pointwise {
                    xi
                } else {
                    cols_buf = vec![T::zero(); kk * p];
                    this.im2col(xi, h, w, &mut cols_buf);
                    &cols_buf
                };
                let mut dw = vec![T::zero(); oc * kk];
                // dW = dY * cols^T
                T::gemm(
                    oc,
                    p,
                    kk,
                    dyi,
                    (p as isize, 1),
                    cols,
                    (1, p as isize),
                    &mut dw,
                    false,
                );
                let db: Vec<T> = (0..oc)
                    .map(|o| dyi[o * p..(o + 1) * p].iter().copied().sum())
                    .collect();
                let dx = need_input_grad.then(|| {
                    let mut dcols = vec![T::zero(); kk * p];
                    // dcols = W^T * dY
                    T::gemm(
                        kk,
                        oc,
                        p,
                        &this.weight.value,
                        (1, kk as isize),
                        dyi,
                        (p as isize, 1),
                        &mut dcols,
                        false,
                    );
                    if pointwise {
                        dcols
                    } else {
                        let mut dxi = vec![T::zero(); this.in_channels * h * w];
                        this.col2im(&dcols, h, w, &mut dxi);
                        dxi
                    }
                });
                (dw, db, dx)
            })
            .collect();

        let mut dx = need_input_grad.then(|| FeatureMap::zeros(x.batch, x.channels, h, w));
        for (n, (dw, db, dxi)) in partials.into_iter().enumerate() {
            for (g, &v) in self.weight.grad.iter_mut().zip(&dw) {
                *g += v;
            }
            for (g, &v) in self.bias.grad.iter_mut().zip(&db) {
                *g += v;
            }
            if let (Some(dx), Some(dxi)) = (dx.as_mut(), dxi) {
                dx.item_mut(n).copy_from_slice(&dxi);
            }
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Fully connected layer on (batch, features) tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize, init: Init, seed: u64) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::uniform(
                format!("{name}.weight"),
                vec![out_features, in_features],
                init.bound(in_features),
                seed,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_features]),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(x.item_len(), self.in_features, "linear input width");
        let n = x.batch;
        let mut out = FeatureMap::zeros(n, self.out_features, 1, 1);
        for i in 0..n {
            out.item_mut(i).copy_from_slice(&self.bias.value);
        }
        // Y = X * W^T
        T::gemm(
            n,
            self.in_features,
            self.out_features,
            &x.data,
            (self.in_features as isize, 1),
            &self.weight.value,
            (1, self.in_features as isize),
            &mut out.data,
            true,
        );
        out
    }

    pub fn backward(&mut self, x: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let n = x.batch;
        let (fi, fo) = (self.in_features, self.out_features);
        // dW += dY^T * X
        T::gemm(
            fo,
            n,
            fi,
            &dy.data,
            (1, fo as isize),
            &x.data,
            (fi as isize, 1),
            &mut self.weight.grad,
            true,
        );
        for i in 0..n {
            for (g, &v) in self.bias.grad.iter_mut().zip(dy.item(i)) {
                *g += v;
            }
        }
        let mut dx = FeatureMap::zeros(n, x.channels, x.height, x.width);
        // dX = dY * W
        T::gemm(
            n,
            fo,
            fi,
            &dy.data,
            (fo as isize, 1),
            &self.weight.value,
            (fi as isize, 1),
            &mut dx.data,
            false,
        );
        dx
    }
}

impl<T: Real> Parameterized<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub fn relu<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

/// Backward of ReLU given its output.
pub fn relu_backward<T: Real>(y: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (oh, ow) = ((x.height / 2).max(1), (x.width / 2).max(1));
    if x.height < 2 || x.width < 2 {
        return x.clone();
    }
    let quarter = T::lit(0.25);
    let mut out = FeatureMap::zeros(x.batch, x.channels, oh, ow);
    for n in 0..x.batch {
        for c in 0..x.channels {
            let src = &x.data[((n * x.channels + c) * x.height) * x.width..][..x.height * x.width];
            let dst = &mut out.data[((n * x.channels + c) * oh) * ow..][..oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * x.width + 2 * xx;
                    dst[y * ow + xx] =
                        quarter * (src[i] + src[i + 1] + src[i + x.width] + src[i + x.width + 1]);
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(x: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    if x.height < 2 || x.width < 2 {
        return dy.clone();
    }
    let (oh, ow) = (dy.height, dy.width);
    let quarter = T::lit(0.25);
    let mut dx = FeatureMap::zeros(x.batch, x.channels, x.height, x.width);
    for n in 0..x.batch {
        for c in 0..x.channels {
            let src = &dy.data[((n * x.channels + c) * oh) * ow..][..oh * ow];
            let dst =
                &mut dx.data[((n * x.channels + c) * x.height) * x.width..][..x.height * x.width];
            for y in 0..oh {
                for xx in 0..ow {
                    let g = quarter * src[y * ow + xx];
                    let i = 2 * y * x.width + 2 * xx;
                    dst[i] += g;
                    dst[i + 1] += g;
                    dst[i + x.width] += g;
                    dst[i + x.width + 1] += g;
                }
            }
        }
    }
    dx
}

/// (N,C,H,W) -> (N,C,1,1) mean.
pub fn global_avg_pool<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let plane = x.plane();
    let inv = T::one() / T::lit(plane as f64);
    let data = x
        .data
        .chunks(plane)
        .map(|c| c.iter().copied().sum::<T>() * inv)
        .collect();
    FeatureMap {
        batch: x.batch,
        channels: x.channels,
        height: 1,
        width: 1,
        data,
    }
}

pub fn global_avg_pool_backward<T: Real>(x: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    let plane = x.plane();
    let inv = T::one() / T::lit(plane as f64);
    let mut dx = FeatureMap::zeros(x.batch, x.channels, x.height, x.width);
    for (chunk, &g) in dx.data.chunks_mut(plane).zip(&dy.data) {
        chunk.iter_mut().for_each(|v| *v = g * inv);
    }
    dx
}

/// (N,C,H,W) -> (N,C,1,1) max, plus the flat in-plane argmax per channel.
pub fn global_max_pool<T: Real>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<usize>) {
    let plane = x.plane();
    let mut arg = Vec::with_capacity(x.batch * x.channels);
    let data = x
        .data
        .chunks(plane)
        .map(|c| {
            let (i, v) = c
                .iter()
                .enumerate()
                .fold(
                    (0, T::neg_infinity()),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                );
            arg.push(i);
            v
        })
        .collect();
    (
        FeatureMap {
            batch: x.batch,
            channels: x.channels,
            height: 1,
            width: 1,
            data,
        },
        arg,
    )
}

/// Inverted dropout. Returns the output and the keep-mask scale per element
/// (0 or `1/(1-p)`).
pub fn dropout<T: Real>(x: &FeatureMap<T>, p: f32, seed: u64) -> (FeatureMap<T>, Vec<T>) {
    if p <= 0.0 {
        return (x.clone(), vec![T::one(); x.len()]);
    }
    let mut rng = rng_from(seed);
    let keep = T::one() / T::lit(f64::from(1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.gen::<f32>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let mut y = x.clone();
    for (v, &m) in y.data.iter_mut().zip(&mask) {
        *v *= m;
    }
    (y, mask)
}
