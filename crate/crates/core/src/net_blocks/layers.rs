//! Primitive layers with cached forward state and hand-written backward
//! passes. Every layer follows one protocol:
//!
//! * `forward_train(&mut self, x)` uses batch statistics, updates running
//!   statistics and caches what `backward` needs;
//! * `forward_eval(&self, x)` is pure;
//! * `backward(&mut self, dy)` consumes the cache, accumulates into the
//!   gradients of non-frozen weights and returns the input gradient.

use serde::{Deserialize, Serialize};

use super::tensor::{join, Module, Param, Tensor};
use crate::error::{invalid, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.in_channels, self.out_channels, self.kernel, self.stride, self.groups];
        if positive.contains(&0) {
            return Err(invalid(format!("conv spec has a zero field: {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(invalid(format!("channels not divisible by groups: {self:?}")));
        }
        Ok(())
    }

    /// `floor((len + 2·padding − kernel) / stride) + 1`.
    pub fn out_len(&self, len: usize) -> Result<usize> {
        let padded = len + 2 * self.padding;
        if padded < self.kernel {
            return Err(invalid(format!(
                "input length {len} too short for kernel {} with padding {}",
                self.kernel, self.padding
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel
            + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn multiadds(&self, len: usize) -> Result<u64> {
        Ok((self.out_len(len)? * self.out_channels * (self.in_channels / self.groups) * self.kernel) as u64)
    }
}

/// `C = A·B (+ beta·C)` with arbitrary strides; thin wrapper over matrixmultiply.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, cc: usize| (r - 1) * rs + (cc - 1) * cs;
    if k > 0 {
        assert!(last(rsa, csa, m, k) < a.len() && last(rsb, csb, k, n) < b.len());
    }
    assert!(last(rsc, csc, m, n) < c.len());
    // SAFETY: the asserts above keep every strided access inside its slice.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub spec: ConvSpec,
    /// `[out, in / groups, kernel]`.
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    in_shape: [usize; 3],
    tout: usize,
    cols: Vec<f32>,
}

impl Conv1d {
    pub fn new(spec: ConvSpec, seed: u64, name: &str) -> Result<Self> {
        spec.validate()?;
        let fan_in = (spec.in_channels / spec.groups) * spec.kernel;
        let std = (2.0 / fan_in as f32).sqrt();
        let weight = Param::normal(
            vec![spec.out_channels, spec.in_channels / spec.groups, spec.kernel],
            std,
            seed,
            &join(name, "weight"),
        );
        let bias = spec
            .has_bias
            .then(|| Param::filled(vec![spec.out_channels], 0.0));
        Ok(Conv1d {
            spec,
            weight,
            bias,
            cache: None,
        })
    }

    fn im2col(&self, x: &Tensor, tout: usize) -> Vec<f32> {
        let s = &self.spec;
        let [b, _, tin] = x.shape;
        let ig = s.in_channels / s.groups;
        let n = b * tout;
        let mut cols = vec![0.0f32; s.groups * ig * s.kernel * n];
        for g in 0..s.groups {
            for ci in 0..ig {
                let c = g * ig + ci;
                for kk in 0..s.kernel {
                    let row = (g * ig + ci) * s.kernel + kk;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for bi in 0..b {
                        let src = &x.data[(bi * s.in_channels + c) * tin..][..tin];
                        let out = &mut dst[bi * tout..(bi + 1) * tout];
                        for (t, o) in out.iter_mut().enumerate() {
                            let pos = (t * s.stride + kk) as isize - s.padding as isize;
                            if pos >= 0 && (pos as usize) < tin {
                                *o = src[pos as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        if x.channels() != self.spec.in_channels {
            return Err(crate::Error::ShapeMismatch {
                expected: format!("{} input channels", self.spec.in_channels),
                actual: format!("{}", x.channels()),
            });
        }
        self.spec.out_len(x.len())
    }

    fn apply(&self, x: &Tensor, tout: usize, cols: &[f32]) -> Tensor {
        let s = &self.spec;
        let b = x.batch();
        let n = b * tout;
        let og = s.out_channels / s.groups;
        let kg = (s.in_channels / s.groups) * s.kernel;
        // gemm result in [out, batch, time] order, then permuted
        let mut tmp = vec![0.0f32; s.out_channels * n];
        for g in 0..s.groups {
            gemm(
                og,
                kg,
                n,
                &self.weight.value[g * og * kg..(g + 1) * og * kg],
                (kg, 1),
                &cols[g * kg * n..(g + 1) * kg * n],
                (n, 1),
                0.0,
                &mut tmp[g * og * n..(g + 1) * og * n],
                (n, 1),
            );
        }
        let mut y = Tensor::zeros([b, s.out_channels, tout]);
        for o in 0..s.out_channels {
            let bias = self.bias.as_ref().map_or(0.0, |p| p.value[o]);
            for bi in 0..b {
                let src = &tmp[o * n + bi * tout..][..tout];
                let dst = &mut y.data[(bi * s.out_channels + o) * tout..][..tout];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        y
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let tout = self.check_input(x)?;
        let cols = self.im2col(x, tout);
        Ok(self.apply(x, tout, &cols))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let tout = self.check_input(x)?;
        let cols = self.im2col(x, tout);
        let y = self.apply(x, tout, &cols);
        self.cache = Some(ConvCache {
            in_shape: x.shape,
            tout,
            cols,
        });
        Ok(y)
    }

    /// Returns `None` for the input gradient when `need_dx` is false.
    pub fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let cache = self.cache.take().expect("Conv1d::backward without forward_train");
        let s = self.spec;
        let [b, _, tin] = cache.in_shape;
        let tout = cache.tout;
        let n = b * tout;
        let og = s.out_channels / s.groups;
        let ig = s.in_channels / s.groups;
        let kg = ig * s.kernel;
        assert_eq!(dy.shape, [b, s.out_channels, tout]);

        let mut dyp = vec![0.0f32; s.out_channels * n];
        for bi in 0..b {
            for o in 0..s.out_channels {
                dyp[o * n + bi * tout..][..tout]
                    .copy_from_slice(&dy.data[(bi * s.out_channels + o) * tout..][..tout]);
            }
        }
        if let Some(bias) = self.bias.as_mut().filter(|p| !p.frozen) {
            for o in 0..s.out_channels {
                bias.grad[o] += dyp[o * n..(o + 1) * n].iter().sum::<f32>();
            }
        }
        if !self.weight.frozen {
            for g in 0..s.groups {
                gemm(
                    og,
                    n,
                    kg,
                    &dyp[g * og * n..(g + 1) * og * n],
                    (n, 1),
                    &cache.cols[g * kg * n..(g + 1) * kg * n],
                    (1, n),
                    1.0,
                    &mut self.weight.grad[g * og * kg..(g + 1) * og * kg],
                    (kg, 1),
                );
            }
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0f32; s.groups * kg * n];
        for g in 0..s.groups {
            gemm(
                kg,
                og,
                n,
                &self.weight.value[g * og * kg..(g + 1) * og * kg],
                (1, kg),
                &dyp[g * og * n..(g + 1) * og * n],
                (n, 1),
                0.0,
                &mut dcols[g * kg * n..(g + 1) * kg * n],
                (n, 1),
            );
        }
        let mut dx = Tensor::zeros(cache.in_shape);
        for g in 0..s.groups {
            for ci in 0..ig {
                let c = g * ig + ci;
                for kk in 0..s.kernel {
                    let row = c * s.kernel + kk;
                    let src = &dcols[row * n..(row + 1) * n];
                    for bi in 0..b {
                        let dst = &mut dx.data[(bi * s.in_channels + c) * tin..][..tin];
                        for (t, v) in src[bi * tout..(bi + 1) * tout].iter().enumerate() {
                            let pos = (t * s.stride + kk) as isize - s.padding as isize;
                            if pos >= 0 && (pos as usize) < tin {
                                dst[pos as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

impl Module for Conv1d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: [usize; 3],
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            channels,
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::filled(vec![channels], 0.0),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            cache: None,
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let [b, c, t] = x.shape;
        assert_eq!(c, self.channels);
        let mut y = x.clone();
        for ch in 0..c {
            let inv = 1.0 / (self.running_var.value[ch] + BN_EPS).sqrt();
            let (g, be, m) = (self.gamma.value[ch], self.beta.value[ch], self.running_mean.value[ch]);
            for bi in 0..b {
                for v in &mut y.data[(bi * c + ch) * t..][..t] {
                    *v = g * (*v - m) * inv + be;
                }
            }
        }
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let [b, c, t] = x.shape;
        assert_eq!(c, self.channels);
        let count = (b * t) as f64;
        let mut y = x.clone();
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let rows = || (0..b).map(move |bi| (bi * c + ch) * t);
            let mut sum = 0.0f64;
            for r in rows() {
                sum += x.data[r..r + t].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for r in rows() {
                sq += x.data[r..r + t].iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
            }
            let var = sq / count;
            let inv = 1.0 / (var + BN_EPS as f64).sqrt();
            inv_std[ch] = inv as f32;
            let (g, be) = (self.gamma.value[ch], self.beta.value[ch]);
            for r in rows() {
                for i in r..r + t {
                    let h = ((x.data[i] as f64 - mean) * inv) as f32;
                    xhat[i] = h;
                    y.data[i] = g * h + be;
                }
            }
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let m = BN_MOMENTUM;
            self.running_mean.value[ch] = (1.0 - m) * self.running_mean.value[ch] + m * mean as f32;
            self.running_var.value[ch] = (1.0 - m) * self.running_var.value[ch] + m * unbiased as f32;
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            shape: x.shape,
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("BatchNorm1d::backward without forward_train");
        let [b, c, t] = cache.shape;
        assert_eq!(dy.shape, cache.shape);
        let count = (b * t) as f64;
        let mut dx = Tensor::zeros(cache.shape);
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for bi in 0..b {
                let r = (bi * c + ch) * t;
                for i in r..r + t {
                    sum_dy += dy.data[i] as f64;
                    sum_dy_xhat += (dy.data[i] * cache.xhat[i]) as f64;
                }
            }
            if !self.gamma.frozen {
                self.gamma.grad[ch] += sum_dy_xhat as f32;
            }
            if !self.beta.frozen {
                self.beta.grad[ch] += sum_dy as f32;
            }
            let k = self.gamma.value[ch] as f64 * cache.inv_std[ch] as f64 / count;
            for bi in 0..b {
                let r = (bi * c + ch) * t;
                for i in r..r + t {
                    dx.data[i] = (k
                        * (count * dy.data[i] as f64 - sum_dy - cache.xhat[i] as f64 * sum_dy_xhat))
                        as f32;
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm1d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` where the ReLU output `y` was not positive.
pub fn relu_backward(dy: &mut Tensor, y: &Tensor) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Max-pool with window 3, stride 2, padding 1 (padding never wins).
#[derive(Debug, Clone, Default)]
pub struct MaxPool1d {
    cache: Option<([usize; 3], Vec<usize>)>,
}

impl MaxPool1d {
    pub const KERNEL: usize = 3;
    pub const STRIDE: usize = 2;
    pub const PADDING: usize = 1;

    pub fn out_len(len: usize) -> usize {
        (len + 2 * Self::PADDING - Self::KERNEL) / Self::STRIDE + 1
    }

    fn run(x: &Tensor) -> (Tensor, Vec<usize>) {
        let [b, c, t] = x.shape;
        let tout = Self::out_len(t);
        let mut y = Tensor::zeros([b, c, tout]);
        let mut arg = vec![0usize; b * c * tout];
        for row in 0..b * c {
            let src = &x.data[row * t..(row + 1) * t];
            for j in 0..tout {
                let start = (j * Self::STRIDE) as isize - Self::PADDING as isize;
                let mut best = f32::NEG_INFINITY;
                let mut at = 0;
                for k in 0..Self::KERNEL as isize {
                    let p = start + k;
                    if p >= 0 && (p as usize) < t && src[p as usize] > best {
                        best = src[p as usize];
                        at = p as usize;
                    }
                }
                y.data[row * tout + j] = best;
                arg[row * tout + j] = row * t + at;
            }
        }
        (y, arg)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        Self::run(x).0
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (y, arg) = Self::run(x);
        self.cache = Some((x.shape, arg));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (shape, arg) = self.cache.take().expect("MaxPool1d::backward without forward_train");
        let mut dx = Tensor::zeros(shape);
        for (&i, &g) in arg.iter().zip(&dy.data) {
            dx.data[i] += g;
        }
        dx
    }
}

/// Bin `[start, end)` boundaries of adaptive average pooling from `len` to
/// `out` positions: `start = floor(i·len/out)`, `end = ceil((i+1)·len/out)`.
pub fn adaptive_bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| (i * len / out, ((i + 1) * len).div_ceil(out)))
        .collect()
}

/// Adaptive average pool to `min(10, T)` followed by a mean over the pooled
/// positions; `[B, C, T] → [B, C, 1]`.
#[derive(Debug, Clone, Default)]
pub struct PoolToVector {
    cache: Option<[usize; 3]>,
}

impl PoolToVector {
    pub const POOLED_LEN: usize = 10;

    /// Per-position weight of the composite average.
    fn weights(t: usize) -> Vec<f32> {
        let out = Self::POOLED_LEN.min(t);
        let mut w = vec![0.0f64; t];
        for (s, e) in adaptive_bins(t, out) {
            for v in &mut w[s..e] {
                *v += 1.0 / ((e - s) as f64 * out as f64);
            }
        }
        w.into_iter().map(|v| v as f32).collect()
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let [b, c, t] = x.shape;
        let w = Self::weights(t);
        let data = x
            .data
            .chunks_exact(t)
            .map(|row| row.iter().zip(&w).map(|(a, b)| a * b).sum())
            .collect();
        Tensor::from_vec([b, c, 1], data)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.shape);
        self.forward_eval(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let shape = self.cache.take().expect("PoolToVector::backward without forward_train");
        let w = Self::weights(shape[2]);
        let mut dx = Vec::with_capacity(shape.iter().product());
        for &g in &dy.data {
            dx.extend(w.iter().map(|wi| g * wi));
        }
        Tensor::from_vec(shape, dx)
    }
}

/// Fully connected layer on `[B, in, 1]` tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`.
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, seed: u64, name: &str) -> Self {
        let std = (1.0 / in_features as f32).sqrt();
        Linear {
            in_features,
            out_features,
            weight: Param::normal(vec![out_features, in_features], std, seed, &join(name, "weight")),
            bias: Param::filled(vec![out_features], 0.0),
            cache: None,
        }
    }

    pub fn param_count(in_features: usize, out_features: usize) -> usize {
        in_features * out_features + out_features
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let b = x.batch();
        assert_eq!(x.channels() * x.len(), self.in_features);
        let mut y = Vec::with_capacity(b * self.out_features);
        for _ in 0..b {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(
            b,
            self.in_features,
            self.out_features,
            &x.data,
            (self.in_features, 1),
            &self.weight.value,
            (1, self.in_features),
            1.0,
            &mut y,
            (self.out_features, 1),
        );
        Tensor::from_vec([b, self.out_features, 1], y)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.clone());
        self.forward_eval(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("Linear::backward without forward_train");
        let b = x.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        if !self.weight.frozen {
            gemm(fo, b, fi, &dy.data, (1, fo), &x.data, (fi, 1), 1.0, &mut self.weight.grad, (fi, 1));
        }
        if !self.bias.frozen {
            for row in dy.data.chunks_exact(fo) {
                for (g, d) in self.bias.grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let mut dx = vec![0.0f32; b * fi];
        gemm(b, fo, fi, &dy.data, (fo, 1), &self.weight.value, (fi, 1), 0.0, &mut dx, (fi, 1));
        Tensor::from_vec(x.shape, dx)
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
