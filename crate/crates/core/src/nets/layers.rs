use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{axpy, dot, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Elu,
    Square,
    Log,
    Linear,
    Softmax,
}

/// One row of an architecture table. Convolutions use unit stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: (usize, usize),
        padding: Padding,
    },
    DepthwiseConv2d {
        kernel: (usize, usize),
        depth_multiplier: usize,
        max_norm: Option<f64>,
    },
    SeparableConv2d {
        filters: usize,
        kernel: (usize, usize),
        padding: Padding,
    },
    BatchNorm,
    Activation {
        function: ActivationKind,
    },
    AvgPool2d {
        pool: (usize, usize),
        stride: (usize, usize),
    },
    MaxPool2d {
        pool: (usize, usize),
        stride: (usize, usize),
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        units: usize,
    },
}

fn same_pad(k: usize) -> (usize, usize) {
    let left = (k - 1) / 2;
    (left, k - 1 - left)
}

fn conv_out(h: usize, w: usize, kernel: (usize, usize), padding: Padding) -> Result<(usize, usize), String> {
    match padding {
        Padding::Same => Ok((h, w)),
        Padding::Valid => {
            if kernel.0 > h || kernel.1 > w {
                Err(format!("kernel {kernel:?} larger than input {h}x{w}"))
            } else {
                Ok((h - kernel.0 + 1, w - kernel.1 + 1))
            }
        }
    }
}

impl LayerSpec {
    pub fn kind_name(&self) -> String {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d".into(),
            LayerSpec::DepthwiseConv2d { .. } => "depthwise_conv2d".into(),
            LayerSpec::SeparableConv2d { .. } => "separable_conv2d".into(),
            LayerSpec::BatchNorm => "batchnorm".into(),
            LayerSpec::Activation { function } => format!("activation({})", format!("{function:?}").to_lowercase()),
            LayerSpec::AvgPool2d { .. } => "avgpool2d".into(),
            LayerSpec::MaxPool2d { .. } => "maxpool2d".into(),
            LayerSpec::Dropout { .. } => "dropout".into(),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Dense { .. } => "dense".into(),
        }
    }

    /// Output (channels, height, width) for a given input, or a reason it cannot apply.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3], String> {
        let [c, h, w] = input;
        if c == 0 || h == 0 || w == 0 {
            return Err(format!("empty input {c}x{h}x{w}"));
        }
        let positive = |v: usize, what: &str| if v == 0 { Err(format!("{what} must be positive")) } else { Ok(()) };
        match *self {
            LayerSpec::Conv2d { filters, kernel, padding } => {
                positive(filters, "filters")?;
                positive(kernel.0 * kernel.1, "kernel")?;
                let (oh, ow) = conv_out(h, w, kernel, padding)?;
                Ok([filters, oh, ow])
            }
            LayerSpec::DepthwiseConv2d { kernel, depth_multiplier, max_norm } => {
                positive(depth_multiplier, "depth multiplier")?;
                positive(kernel.0 * kernel.1, "kernel")?;
                if let Some(m) = max_norm {
                    if !(m > 0.0) {
                        return Err("max-norm must be positive".into());
                    }
                }
                let (oh, ow) = conv_out(h, w, kernel, Padding::Valid)?;
                Ok([c * depth_multiplier, oh, ow])
            }
            LayerSpec::SeparableConv2d { filters, kernel, padding } => {
                positive(filters, "filters")?;
                positive(kernel.0 * kernel.1, "kernel")?;
                let (oh, ow) = conv_out(h, w, kernel, padding)?;
                Ok([filters, oh, ow])
            }
            LayerSpec::BatchNorm | LayerSpec::Activation { .. } => Ok(input),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok(input)
            }
            LayerSpec::AvgPool2d { pool, stride } | LayerSpec::MaxPool2d { pool, stride } => {
                positive(pool.0 * pool.1 * stride.0 * stride.1, "pool and stride")?;
                if pool.0 > h || pool.1 > w {
                    return Err(format!("pool {pool:?} larger than input {h}x{w}"));
                }
                Ok([c, (h - pool.0) / stride.0 + 1, (w - pool.1) / stride.1 + 1])
            }
            LayerSpec::Flatten => Ok([c * h * w, 1, 1]),
            LayerSpec::Dense { units } => {
                positive(units, "units")?;
                if h != 1 || w != 1 {
                    return Err(format!("dense expects a flattened input, got {c}x{h}x{w}"));
                }
                Ok([units, 1, 1])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    fn glorot(name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        Self { name: name.into(), shape, value, trainable: true }
    }

    fn filled(name: &str, len: usize, v: f64, trainable: bool) -> Self {
        Self { name: name.into(), shape: vec![len], value: vec![v; len], trainable }
    }
}

/// Intermediate values kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Empty,
    Input(Tensor),
    Separable { padded: Tensor, mid: Tensor },
    BatchNorm { xhat: Tensor, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    Activation { x: Tensor, y: Tensor },
    MaxPool { argmax: Vec<usize>, input: [usize; 4] },
    Pool { input: [usize; 4] },
    Dropout { mask: Vec<f64> },
    Shape([usize; 4]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub params: Vec<Param>,
}

/// `y[t] += Σ_j w[j] · x[t + j]` for every `t < y.len()`.
fn correlate_row(x: &[f64], w: &[f64], y: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime
            unsafe { correlate_row_fma(x, w, y) };
            return;
        }
    }
    correlate_row_body::<false>(x, w, y);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn correlate_row_fma(x: &[f64], w: &[f64], y: &mut [f64]) {
    correlate_row_body::<true>(x, w, y);
}

#[inline(always)]
fn correlate_row_body<const FUSED: bool>(x: &[f64], w: &[f64], y: &mut [f64]) {
    debug_assert!(x.len() + 1 >= y.len() + w.len());
    let t = correlate_blocks::<32, FUSED>(x, w, y, 0);
    let t = correlate_blocks::<8, FUSED>(x, w, y, t);
    let kw = w.len();
    for (q, yq) in y.iter_mut().enumerate().skip(t) {
        *yq += dot(w, &x[q..q + kw]);
    }
}

#[inline(always)]
fn correlate_blocks<const B: usize, const FUSED: bool>(x: &[f64], w: &[f64], y: &mut [f64], mut t: usize) -> usize {
    while t + B <= y.len() {
        let mut acc = [0.0f64; B];
        for (j, &wj) in w.iter().enumerate() {
            let xs: &[f64; B] = x[t + j..t + j + B].try_into().expect("block");
            for k in 0..B {
                acc[k] = if FUSED { wj.mul_add(xs[k], acc[k]) } else { acc[k] + wj * xs[k] };
            }
        }
        for (yk, a) in y[t..t + B].iter_mut().zip(acc) {
            *yk += a;
        }
        t += B;
    }
    t
}

fn conv_forward(x: &Tensor, w: &[f64], ws: [usize; 4], bias: Option<&[f64]>, groups: usize) -> Tensor {
    let [n, c, h, wd] = x.shape();
    let [f, cpg, kh, kw] = ws;
    debug_assert_eq!(cpg * groups, c);
    let fpg = f / groups;
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    let mut y = Tensor::zeros([n, f, oh, ow]);
    for ni in 0..n {
        for fi in 0..f {
            let g = fi / fpg;
            let b = bias.map_or(0.0, |b| b[fi]);
            for r in 0..oh {
                let out = y.row_mut(ni, fi, r);
                out.fill(b);
                for ci in 0..cpg {
                    let c_in = g * cpg + ci;
                    for i in 0..kh {
                        let w0 = ((fi * cpg + ci) * kh + i) * kw;
                        correlate_row(x.row(ni, c_in, r + i), &w[w0..w0 + kw], out);
                    }
                }
            }
        }
    }
    y
}

/// Accumulates kernel and bias gradients; returns the gradient w.r.t. `x` when asked.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    w: &[f64],
    ws: [usize; 4],
    groups: usize,
    dy: &Tensor,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Tensor> {
    let [n, _, _, _] = x.shape();
    let [f, cpg, kh, kw] = ws;
    let fpg = f / groups;
    let [_, _, oh, ow] = dy.shape();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    if let Some(db) = db {
        for ni in 0..n {
            for fi in 0..f {
                for r in 0..oh {
                    db[fi] += dy.row(ni, fi, r).iter().sum::<f64>();
                }
            }
        }
    }
    // full convolution of dy with w is a correlation of padded dy with reversed w
    let w_rev: Vec<f64> = w.chunks(kw).flat_map(|c| c.iter().rev().copied()).collect();
    let mut padded = vec![0.0; ow + 2 * (kw - 1)];
    for ni in 0..n {
        for fi in 0..f {
            let g = fi / fpg;
            for r in 0..oh {
                let g_row = dy.row(ni, fi, r);
                if need_dx {
                    padded[kw - 1..kw - 1 + ow].copy_from_slice(g_row);
                }
                for ci in 0..cpg {
                    let c_in = g * cpg + ci;
                    for i in 0..kh {
                        let w0 = ((fi * cpg + ci) * kh + i) * kw;
                        correlate_row(x.row(ni, c_in, r + i), g_row, &mut dw[w0..w0 + kw]);
                        if let Some(dx) = dx.as_mut() {
                            correlate_row(&padded, &w_rev[w0..w0 + kw], dx.row_mut(ni, c_in, r + i));
                        }
                    }
                }
            }
        }
    }
    dx
}

fn pad_for(x: &Tensor, kernel: (usize, usize), padding: Padding) -> Tensor {
    match padding {
        Padding::Valid => x.clone(),
        Padding::Same => {
            let (t, b) = same_pad(kernel.0);
            let (l, r) = same_pad(kernel.1);
            x.pad(t, b, l, r)
        }
    }
}

fn unpad(dx: Tensor, kernel: (usize, usize), padding: Padding) -> Tensor {
    match padding {
        Padding::Valid => dx,
        Padding::Same => {
            let (t, b) = same_pad(kernel.0);
            let (l, r) = same_pad(kernel.1);
            dx.crop(t, b, l, r)
        }
    }
}

impl Layer {
    pub fn new(spec: LayerSpec, input: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Self, String> {
        let output = spec.output_shape(input)?;
        let [c, _, _] = input;
        let params = match spec {
            LayerSpec::Conv2d { filters, kernel, .. } => {
                let rf = kernel.0 * kernel.1;
                vec![
                    Param::glorot("kernel", vec![filters, c, kernel.0, kernel.1], c * rf, filters * rf, rng),
                    Param::filled("bias", filters, 0.0, true),
                ]
            }
            LayerSpec::DepthwiseConv2d { kernel, depth_multiplier, .. } => {
                let rf = kernel.0 * kernel.1;
                let f = c * depth_multiplier;
                vec![
                    Param::glorot("kernel", vec![f, 1, kernel.0, kernel.1], c * rf, depth_multiplier * rf, rng),
                    Param::filled("bias", f, 0.0, true),
                ]
            }
            LayerSpec::SeparableConv2d { filters, kernel, .. } => {
                let rf = kernel.0 * kernel.1;
                vec![
                    Param::glorot("depthwise", vec![c, 1, kernel.0, kernel.1], c * rf, rf, rng),
                    Param::glorot("pointwise", vec![filters, c, 1, 1], c, filters, rng),
                    Param::filled("bias", filters, 0.0, true),
                ]
            }
            LayerSpec::BatchNorm => vec![
                Param::filled("gamma", c, 1.0, true),
                Param::filled("beta", c, 0.0, true),
                Param::filled("running_mean", c, 0.0, false),
                Param::filled("running_var", c, 1.0, false),
            ],
            LayerSpec::Dense { units } => vec![
                Param::glorot("kernel", vec![units, c], c, units, rng),
                Param::filled("bias", units, 0.0, true),
            ],
            _ => Vec::new(),
        };
        Ok(Self { spec, input, output, params })
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    fn pshape4(&self, i: usize) -> [usize; 4] {
        let s = &self.params[i].shape;
        [s[0], s[1], s[2], s[3]]
    }

    /// Forward pass. In training mode the returned cache feeds [`Layer::backward`].
    pub(crate) fn forward(&self, x: &Tensor, train: bool, rng: &mut ChaCha8Rng) -> (Tensor, Cache) {
        let n = x.batch();
        match self.spec {
            LayerSpec::Conv2d { kernel, padding, .. } => {
                let xp = pad_for(x, kernel, padding);
                let y = conv_forward(&xp, &self.params[0].value, self.pshape4(0), Some(&self.params[1].value), 1);
                (y, if train { Cache::Input(xp) } else { Cache::Empty })
            }
            LayerSpec::DepthwiseConv2d { .. } => {
                let y = conv_forward(x, &self.params[0].value, self.pshape4(0), Some(&self.params[1].value), self.input[0]);
                (y, if train { Cache::Input(x.clone()) } else { Cache::Empty })
            }
            LayerSpec::SeparableConv2d { kernel, padding, .. } => {
                let xp = pad_for(x, kernel, padding);
                let mid = conv_forward(&xp, &self.params[0].value, self.pshape4(0), None, self.input[0]);
                let y = conv_forward(&mid, &self.params[1].value, self.pshape4(1), Some(&self.params[2].value), 1);
                (y, if train { Cache::Separable { padded: xp, mid } } else { Cache::Empty })
            }
            LayerSpec::BatchNorm => self.batchnorm_forward(x, train),
            LayerSpec::Activation { function } => {
                let y = activate(function, x);
                (y.clone(), if train { Cache::Activation { x: x.clone(), y } } else { Cache::Empty })
            }
            LayerSpec::AvgPool2d { pool, stride } => {
                let [c, oh, ow] = self.output;
                let mut y = Tensor::zeros([n, c, oh, ow]);
                let scale = 1.0 / (pool.0 * pool.1) as f64;
                for ni in 0..n {
                    for ci in 0..c {
                        for r in 0..oh {
                            let out = y.row_mut(ni, ci, r);
                            for i in 0..pool.0 {
                                let src = x.row(ni, ci, r * stride.0 + i);
                                for (q, o) in out.iter_mut().enumerate() {
                                    let s = q * stride.1;
                                    *o += src[s..s + pool.1].iter().sum::<f64>() * scale;
                                }
                            }
                        }
                    }
                }
                (y, Cache::Pool { input: x.shape() })
            }
            LayerSpec::MaxPool2d { pool, stride } => {
                let [c, oh, ow] = self.output;
                let [_, _, h, w] = x.shape();
                let mut y = Tensor::zeros([n, c, oh, ow]);
                let mut argmax = Vec::with_capacity(if train { y.data().len() } else { 0 });
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for r in 0..oh {
                            for q in 0..ow {
                                let mut best = (f64::NEG_INFINITY, usize::MAX);
                                for i in 0..pool.0 {
                                    let row = r * stride.0 + i;
                                    let src = x.row(ni, ci, row);
                                    for j in 0..pool.1 {
                                        let col = q * stride.1 + j;
                                        if src[col] > best.0 || best.1 == usize::MAX {
                                            best = (src[col], base + row * w + col);
                                        }
                                    }
                                }
                                y.row_mut(ni, ci, r)[q] = best.0;
                                if train {
                                    argmax.push(best.1);
                                }
                            }
                        }
                    }
                }
                (y, if train { Cache::MaxPool { argmax, input: x.shape() } } else { Cache::Empty })
            }
            LayerSpec::Dropout { rate } => {
                if !train || rate == 0.0 {
                    return (x.clone(), Cache::Dropout { mask: Vec::new() });
                }
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..x.data().len())
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                let mut y = x.clone();
                for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                (y, Cache::Dropout { mask })
            }
            LayerSpec::Flatten => {
                let y = x.clone().reshape([n, x.sample_len(), 1, 1]).expect("same length");
                (y, Cache::Shape(x.shape()))
            }
            LayerSpec::Dense { units } => {
                let w = &self.params[0].value;
                let b = &self.params[1].value;
                let d = self.input[0];
                let mut y = Tensor::zeros([n, units, 1, 1]);
                for ni in 0..n {
                    let xs = x.sample(ni);
                    for u in 0..units {
                        y.data_mut()[ni * units + u] = b[u] + dot(xs, &w[u * d..(u + 1) * d]);
                    }
                }
                (y, if train { Cache::Input(x.clone()) } else { Cache::Empty })
            }
        }
    }

    fn batchnorm_forward(&self, x: &Tensor, train: bool) -> (Tensor, Cache) {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let gamma = &self.params[0].value;
        let beta = &self.params[1].value;
        let (mean, var) = if train {
            let m = (n * hw) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    let start = (ni * c + ci) * hw;
                    s += x.data()[start..start + hw].iter().sum::<f64>();
                }
                mean[ci] = s / m;
                let mut ss = 0.0;
                for ni in 0..n {
                    let start = (ni * c + ci) * hw;
                    ss += x.data()[start..start + hw].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                }
                var[ci] = ss / m;
            }
            (mean, var)
        } else {
            (self.params[2].value.clone(), self.params[3].value.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let len = x.data().len();
        let mut xhat = Vec::with_capacity(if train { len } else { 0 });
        let mut y = Vec::with_capacity(len);
        for (q, chunk) in x.data().chunks(hw).enumerate() {
            let ci = q % c;
            let (m, s, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            if train {
                xhat.extend(chunk.iter().map(|v| (v - m) * s));
                y.extend(xhat[q * hw..].iter().map(|v| g * v + b));
            } else {
                y.extend(chunk.iter().map(|v| g * ((v - m) * s) + b));
            }
        }
        let y = Tensor::from_vec(x.shape(), y).expect("same shape");
        let xhat = Tensor::from_vec(if train { x.shape() } else { [0, 0, 0, 0] }, xhat).expect("same shape");
        let cache = if train { Cache::BatchNorm { xhat, inv_std, mean, var } } else { Cache::Empty };
        (y, cache)
    }

    /// Fold batch statistics from a training pass into the running estimates.
    pub(crate) fn commit(&mut self, cache: &Cache) {
        if let Cache::BatchNorm { mean, var, .. } = cache {
            for (r, m) in self.params[2].value.iter_mut().zip(mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, v) in self.params[3].value.iter_mut().zip(var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }

    /// Backward pass. Parameter gradients are added into `grads`, one vector per parameter.
    pub(crate) fn backward(&self, cache: &Cache, dy: &Tensor, grads: &mut [Vec<f64>], need_dx: bool) -> Option<Tensor> {
        let n = dy.batch();
        match (&self.spec, cache) {
            (LayerSpec::Conv2d { kernel, padding, .. }, Cache::Input(xp)) => {
                let (gk, rest) = grads.split_at_mut(1);
                let dx = conv_backward(xp, &self.params[0].value, self.pshape4(0), 1, dy, &mut gk[0], Some(&mut rest[0]), need_dx);
                dx.map(|d| unpad(d, *kernel, *padding))
            }
            (LayerSpec::DepthwiseConv2d { .. }, Cache::Input(x)) => {
                let (gk, rest) = grads.split_at_mut(1);
                conv_backward(x, &self.params[0].value, self.pshape4(0), self.input[0], dy, &mut gk[0], Some(&mut rest[0]), need_dx)
            }
            (LayerSpec::SeparableConv2d { kernel, padding, .. }, Cache::Separable { padded, mid }) => {
                let (gd, rest) = grads.split_at_mut(1);
                let (gp, gb) = rest.split_at_mut(1);
                let dmid = conv_backward(mid, &self.params[1].value, self.pshape4(1), 1, dy, &mut gp[0], Some(&mut gb[0]), true)
                    .expect("requested");
                let dx = conv_backward(padded, &self.params[0].value, self.pshape4(0), self.input[0], &dmid, &mut gd[0], None, need_dx);
                dx.map(|d| unpad(d, *kernel, *padding))
            }
            (LayerSpec::BatchNorm, Cache::BatchNorm { xhat, inv_std, .. }) => {
                let [_, c, h, w] = dy.shape();
                let hw = h * w;
                let m = (n * hw) as f64;
                let gamma = &self.params[0].value;
                let mut dx = Tensor::zeros(dy.shape());
                for ci in 0..c {
                    let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                    for ni in 0..n {
                        let start = (ni * c + ci) * hw;
                        let g = &dy.data()[start..start + hw];
                        sum_dy += g.iter().sum::<f64>();
                        sum_dy_xhat += dot(g, &xhat.data()[start..start + hw]);
                    }
                    grads[0][ci] += sum_dy_xhat;
                    grads[1][ci] += sum_dy;
                    if need_dx {
                        let k = gamma[ci] * inv_std[ci] / m;
                        for ni in 0..n {
                            let start = (ni * c + ci) * hw;
                            let g = &dy.data()[start..start + hw];
                            let xh = &xhat.data()[start..start + hw];
                            let out = &mut dx.data_mut()[start..start + hw];
                            for q in 0..hw {
                                out[q] = k * (m * g[q] - sum_dy - xh[q] * sum_dy_xhat);
                            }
                        }
                    }
                }
                need_dx.then_some(dx)
            }
            (LayerSpec::Activation { function }, Cache::Activation { x, y }) => {
                need_dx.then(|| activate_backward(*function, x, y, dy))
            }
            (LayerSpec::AvgPool2d { pool, stride }, Cache::Pool { input }) => {
                if !need_dx {
                    return None;
                }
                let [_, c, oh, ow] = dy.shape();
                let mut dx = Tensor::zeros(*input);
                let scale = 1.0 / (pool.0 * pool.1) as f64;
                for ni in 0..n {
                    for ci in 0..c {
                        for r in 0..oh {
                            for i in 0..pool.0 {
                                let g = dy.row(ni, ci, r);
                                let dst = dx.row_mut(ni, ci, r * stride.0 + i);
                                for (q, gv) in g.iter().enumerate().take(ow) {
                                    let s = q * stride.1;
                                    for d in &mut dst[s..s + pool.1] {
                                        *d += gv * scale;
                                    }
                                }
                            }
                        }
                    }
                }
                Some(dx)
            }
            (LayerSpec::MaxPool2d { .. }, Cache::MaxPool { argmax, input }) => {
                if !need_dx {
                    return None;
                }
                let mut dx = Tensor::zeros(*input);
                for (g, &idx) in dy.data().iter().zip(argmax) {
                    dx.data_mut()[idx] += g;
                }
                Some(dx)
            }
            (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => need_dx.then(|| {
                let mut dx = dy.clone();
                if !mask.is_empty() {
                    for (v, m) in dx.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
                dx
            }),
            (LayerSpec::Flatten, Cache::Shape(s)) => need_dx.then(|| dy.clone().reshape(*s).expect("same length")),
            (LayerSpec::Dense { units }, Cache::Input(x)) => {
                let d = self.input[0];
                let w = &self.params[0].value;
                let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
                for ni in 0..n {
                    let xs = x.sample(ni);
                    for u in 0..*units {
                        let g = dy.data()[ni * units + u];
                        grads[1][u] += g;
                        axpy(g, xs, &mut grads[0][u * d..(u + 1) * d]);
                        if let Some(dx) = dx.as_mut() {
                            axpy(g, &w[u * d..(u + 1) * d], &mut dx.data_mut()[ni * d..(ni + 1) * d]);
                        }
                    }
                }
                dx
            }
            _ => unreachable!("cache does not match layer kind"),
        }
    }

    /// Rescale constrained kernels so every filter has norm at most the limit.
    pub fn apply_constraints(&mut self) {
        if let LayerSpec::DepthwiseConv2d { kernel, max_norm: Some(limit), .. } = self.spec {
            let len = kernel.0 * kernel.1;
            for filt in self.params[0].value.chunks_mut(len) {
                let norm = filt.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > limit {
                    let s = limit / norm;
                    filt.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
    }

    /// Largest filter norm of a constrained kernel.
    pub fn max_filter_norm(&self) -> Option<f64> {
        match self.spec {
            LayerSpec::DepthwiseConv2d { kernel, max_norm: Some(_), .. } => Some(
                self.params[0]
                    .value
                    .chunks(kernel.0 * kernel.1)
                    .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .fold(0.0, f64::max),
            ),
            _ => None,
        }
    }
}

fn activate(kind: ActivationKind, x: &Tensor) -> Tensor {
    let mut y = x.clone();
    match kind {
        ActivationKind::Linear => {}
        ActivationKind::Elu => y.data_mut().iter_mut().for_each(|v| {
            if *v <= 0.0 {
                *v = v.exp_m1();
            }
        }),
        ActivationKind::Square => y.data_mut().iter_mut().for_each(|v| *v *= *v),
        ActivationKind::Log => y.data_mut().iter_mut().for_each(|v| *v = v.max(LOG_EPS).ln()),
        ActivationKind::Softmax => {
            let len = x.sample_len();
            for s in y.data_mut().chunks_mut(len) {
                let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in s.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                s.iter_mut().for_each(|v| *v /= total);
            }
        }
    }
    y
}

fn activate_backward(kind: ActivationKind, x: &Tensor, y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    let d = dx.data_mut();
    match kind {
        ActivationKind::Linear => {}
        ActivationKind::Elu => {
            for (g, (xv, yv)) in d.iter_mut().zip(x.data().iter().zip(y.data())) {
                if *xv <= 0.0 {
                    *g *= yv + 1.0;
                }
            }
        }
        ActivationKind::Square => {
            for (g, xv) in d.iter_mut().zip(x.data()) {
                *g *= 2.0 * xv;
            }
        }
        ActivationKind::Log => {
            for (g, xv) in d.iter_mut().zip(x.data()) {
                *g = if *xv > LOG_EPS { *g / xv } else { 0.0 };
            }
        }
        ActivationKind::Softmax => {
            let len = x.sample_len();
            for (gs, ys) in d.chunks_mut(len).zip(y.data().chunks(len)) {
                let s = dot(gs, ys);
                for (g, yv) in gs.iter_mut().zip(ys) {
                    *g = yv * (*g - s);
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Loss = sum(r * layer(x)); compare analytic and central-difference gradients.
    fn grad_check(spec: LayerSpec, x: Tensor, positive_input: bool) {
        let mut x = x;
        if positive_input {
            x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
        }
        let [n, c, h, w] = x.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Layer::new(spec.clone(), [c, h, w], &mut rng).unwrap();
        for p in layer.params.iter_mut().filter(|p| p.trainable) {
            for (i, v) in p.value.iter_mut().enumerate() {
                *v += 0.3 * ((i * 7 % 11) as f64 / 11.0 - 0.4);
            }
        }
        let [oc, oh, ow] = layer.output;
        let r = random([n, oc, oh, ow], 9);
        let loss = |layer: &Layer, x: &Tensor| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let (y, _) = layer.forward(x, true, &mut rng);
            dot(y.data(), r.data())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (_, cache) = layer.forward(&x, true, &mut rng);
        let mut grads: Vec<Vec<f64>> = layer.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let dx = layer.backward(&cache, &r, &mut grads, true).unwrap();

        let h_step = 1e-5;
        let check = |analytic: f64, numeric: f64, what: &str| {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < 1e-4, "{}: {what} analytic {analytic} numeric {numeric}", spec.kind_name());
        };
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h_step;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h_step;
            let num = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h_step);
            check(dx.data()[i], num, &format!("dx[{i}]"));
        }
        for p in 0..layer.params.len() {
            if !layer.params[p].trainable {
                continue;
            }
            for i in 0..layer.params[p].value.len() {
                let mut lp = layer.clone();
                lp.params[p].value[i] += h_step;
                let mut lm = layer.clone();
                lm.params[p].value[i] -= h_step;
                let num = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h_step);
                check(grads[p][i], num, &format!("{}[{i}]", layer.params[p].name));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random([2, 2, 5, 7], 1);
        let cases = vec![
            LayerSpec::Conv2d { filters: 3, kernel: (2, 3), padding: Padding::Valid },
            LayerSpec::Conv2d { filters: 3, kernel: (1, 4), padding: Padding::Same },
            LayerSpec::DepthwiseConv2d { kernel: (5, 1), depth_multiplier: 2, max_norm: Some(1.0) },
            LayerSpec::SeparableConv2d { filters: 3, kernel: (1, 4), padding: Padding::Same },
            LayerSpec::BatchNorm,
            LayerSpec::Activation { function: ActivationKind::Elu },
            LayerSpec::Activation { function: ActivationKind::Square },
            LayerSpec::Activation { function: ActivationKind::Linear },
            LayerSpec::Activation { function: ActivationKind::Softmax },
            LayerSpec::AvgPool2d { pool: (1, 3), stride: (1, 2) },
            LayerSpec::MaxPool2d { pool: (2, 2), stride: (2, 2) },
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Flatten,
        ];
        for spec in cases {
            grad_check(spec, x.clone(), false);
        }
        grad_check(LayerSpec::Activation { function: ActivationKind::Log }, x.clone(), true);
        grad_check(LayerSpec::Dense { units: 4 }, random([3, 6, 1, 1], 2), false);
    }

    #[test]
    fn elu_derivative_is_continuous_at_zero() {
        let h = 1e-7;
        let f = |v: f64| {
            let x = Tensor::from_vec([1, 1, 1, 1], vec![v]).unwrap();
            activate(ActivationKind::Elu, &x).data()[0]
        };
        let left = (f(0.0) - f(-h)) / h;
        let right = (f(h) - f(0.0)) / h;
        assert!((left - right).abs() < 1e-6, "{left} vs {right}");
    }

    #[test]
    fn log_activation_clamps() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.0, -3.0]).unwrap();
        let y = activate(ActivationKind::Log, &x);
        assert!(y.data().iter().all(|v| (v - LOG_EPS.ln()).abs() < 1e-12));
    }

    #[test]
    fn pooling_uses_floor() {
        let s = LayerSpec::AvgPool2d { pool: (1, 35), stride: (1, 7) };
        assert_eq!(s.output_shape([40, 1, 1488]).unwrap(), [40, 1, 208]);
        let s = LayerSpec::MaxPool2d { pool: (1, 2), stride: (1, 2) };
        assert_eq!(s.output_shape([25, 1, 1495]).unwrap(), [25, 1, 747]);
    }

    #[test]
    fn max_norm_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = LayerSpec::DepthwiseConv2d { kernel: (4, 1), depth_multiplier: 2, max_norm: Some(1.0) };
        let mut l = Layer::new(spec, [3, 4, 10], &mut rng).unwrap();
        l.params[0].value.iter_mut().for_each(|v| *v *= 10.0);
        l.apply_constraints();
        assert!(l.max_filter_norm().unwrap() <= 1.0 + 1e-12);
    }
}
