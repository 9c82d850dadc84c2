//! Layer definitions with hand-written forward and backward passes.
//!
//! Image activations are laid out `[batch, channels, height, width]`; flat
//! activations are `[batch, features]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Scalar, Tensor};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum LayerSpec {
    /// Zero-padded ("same" at stride 1) square convolution.
    Conv { kernel: usize, stride: usize, in_channels: usize, out_channels: usize, with_bias: bool },
    MaxPool { window: usize, stride: usize },
    Dense { in_dim: usize, out_dim: usize },
    Dropout { p: f64 },
    ReLU,
    BatchNorm { channels: usize },
    Flatten,
    Reshape { dims: Vec<usize> },
    NNUpsample { factor: usize },
    SoftmaxClassifier,
}

impl LayerSpec {
    pub fn conv(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        Self::Conv { kernel, stride: 1, in_channels, out_channels, with_bias: true }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Self::Conv { .. } | Self::Dense { .. } | Self::BatchNorm { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        let image = |what: &str| -> Result<(usize, usize, usize), String> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => Err(format!("{what} expects a [C, H, W] input, got {input:?}")),
            }
        };
        match self {
            Self::Conv { kernel, stride, in_channels, out_channels, .. } => {
                let (c, h, w) = image("conv")?;
                if c != *in_channels {
                    return Err(format!("conv expects {in_channels} channels, got {c}"));
                }
                if *kernel == 0 || *stride == 0 {
                    return Err("conv kernel and stride must be positive".into());
                }
                let pad = kernel / 2;
                let out = |x: usize| (x + 2 * pad).checked_sub(*kernel).map(|v| v / stride + 1);
                match (out(h), out(w)) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(vec![*out_channels, oh, ow]),
                    _ => Err(format!("input {h}x{w} too small for a {kernel}x{kernel} kernel")),
                }
            }
            Self::MaxPool { window, stride } => {
                let (c, h, w) = image("max pool")?;
                if *window == 0 || *stride == 0 {
                    return Err("pool window and stride must be positive".into());
                }
                if h < *window || w < *window {
                    return Err(format!("input {h}x{w} too small for a {window}x{window} pool"));
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            Self::Dense { in_dim, out_dim } => match input {
                [d] if d == in_dim => Ok(vec![*out_dim]),
                _ => Err(format!("dense expects [{in_dim}], got {input:?}")),
            },
            Self::Dropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(format!("dropout probability {p} outside [0, 1)"));
                }
                Ok(input.to_vec())
            }
            Self::ReLU => Ok(input.to_vec()),
            Self::BatchNorm { channels } => match input.first() {
                Some(c) if c == channels => Ok(input.to_vec()),
                _ => Err(format!("batch norm expects {channels} channels, got {input:?}")),
            },
            Self::Flatten => Ok(vec![input.iter().product()]),
            Self::Reshape { dims } => {
                if dims.iter().product::<usize>() == input.iter().product::<usize>() {
                    Ok(dims.clone())
                } else {
                    Err(format!("cannot reshape {input:?} into {dims:?}"))
                }
            }
            Self::NNUpsample { factor } => {
                let (c, h, w) = image("upsample")?;
                if *factor == 0 {
                    return Err("upsample factor must be positive".into());
                }
                Ok(vec![c, h * factor, w * factor])
            }
            Self::SoftmaxClassifier => match input {
                [d] if *d > 0 => Ok(input.to_vec()),
                _ => Err(format!("softmax expects a flat input, got {input:?}")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Weight => "weight",
            Self::Bias => "bias",
            Self::Gamma => "gamma",
            Self::Beta => "beta",
        }
    }
}

/// A learnable tensor with its gradient accumulator and trainability bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    fn new(kind: ParamKind, shape: Vec<usize>, value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { kind, shape, value, grad, trainable: true }
    }
}

#[derive(Debug, Clone, Default)]
enum Cache<T> {
    #[default]
    Empty,
    Conv { input: Vec<T>, in_shape: Vec<usize> },
    Pool { argmax: Vec<u32>, in_shape: Vec<usize> },
    Dense { input: Vec<T> },
    Mask(Vec<T>),
    Norm { x_hat: Vec<T>, inv_std: Vec<T> },
    Shape(Vec<usize>),
    Probs(Vec<T>),
}

#[derive(Debug, Clone)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub params: Vec<Param<T>>,
    /// Batch-norm running mean and variance.
    pub running: Option<(Vec<T>, Vec<T>)>,
    cache: Cache<T>,
}

impl<T: Scalar> Layer<T> {
    /// He-uniform weights, zero biases, unit gamma and zero beta.
    pub fn init(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let he = |fan_in: usize, n: usize, rng: &mut ChaCha8Rng| -> Vec<T> {
            let limit = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| T::of(rng.gen_range(-limit..limit))).collect()
        };
        let mut running = None;
        let params = match &spec {
            LayerSpec::Conv { kernel, in_channels, out_channels, with_bias, .. } => {
                let fan_in = in_channels * kernel * kernel;
                let mut p = vec![Param::new(
                    ParamKind::Weight,
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                    he(fan_in, out_channels * fan_in, rng),
                )];
                if *with_bias {
                    p.push(Param::new(ParamKind::Bias, vec![*out_channels], vec![T::zero(); *out_channels]));
                }
                p
            }
            LayerSpec::Dense { in_dim, out_dim } => vec![
                Param::new(ParamKind::Weight, vec![*out_dim, *in_dim], he(*in_dim, in_dim * out_dim, rng)),
                Param::new(ParamKind::Bias, vec![*out_dim], vec![T::zero(); *out_dim]),
            ],
            LayerSpec::BatchNorm { channels } => {
                running = Some((vec![T::zero(); *channels], vec![T::one(); *channels]));
                vec![
                    Param::new(ParamKind::Gamma, vec![*channels], vec![T::one(); *channels]),
                    Param::new(ParamKind::Beta, vec![*channels], vec![T::zero(); *channels]),
                ]
            }
            _ => Vec::new(),
        };
        Self { spec, params, running, cache: Cache::Empty }
    }

    pub fn any_trainable(&self) -> bool {
        self.params.iter().any(|p| p.trainable)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = Cache::Empty;
    }

    /// Forward pass. In training mode the values needed by [`Self::backward`]
    /// are cached, dropout is sampled and batch norm uses batch statistics.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let (y, cache) = self.apply(x, train, Some(rng));
        if train {
            self.cache = cache;
        }
        y
    }

    /// Evaluation-mode forward pass that leaves the layer untouched.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        forward_impl(&self.spec, &self.params, self.running.as_ref(), x, false, None).0
    }

    fn apply(&mut self, x: &Tensor<T>, train: bool, rng: Option<&mut ChaCha8Rng>) -> (Tensor<T>, Cache<T>) {
        let (y, cache, stats) = forward_impl(&self.spec, &self.params, self.running.as_ref(), x, train, rng);
        if let (Some((mean, var)), Some((rm, rv))) = (stats, self.running.as_mut()) {
            let mom = T::of(BN_MOMENTUM);
            for c in 0..rm.len() {
                rm[c] = (T::one() - mom) * rm[c] + mom * mean[c];
                rv[c] = (T::one() - mom) * rv[c] + mom * var[c];
            }
        }
        (y, cache)
    }

    /// Back-propagates `grad_out`, accumulating parameter gradients of
    /// trainable parameters. Returns the input gradient when `need_input_grad`.
    pub fn backward(&mut self, grad_out: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let cache = std::mem::take(&mut self.cache);
        let batch = grad_out.batch();
        let g = grad_out.data();
        match (&self.spec, cache) {
            (LayerSpec::Conv { kernel, stride, in_channels, out_channels, .. }, Cache::Conv { input, in_shape }) => {
                let (k, s, cin, cout) = (*kernel, *stride, *in_channels, *out_channels);
                let (h, w) = (in_shape[1], in_shape[2]);
                let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
                let (ckk, hw) = (cin * k * k, oh * ow);
                if let Some(bias) = self.params.get_mut(1).filter(|b| b.trainable) {
                    for n in 0..batch {
                        for o in 0..cout {
                            let base = (n * cout + o) * hw;
                            bias.grad[o] = bias.grad[o] + g[base..base + hw].iter().copied().sum();
                        }
                    }
                }
                let want_dw = self.params[0].trainable;
                if !want_dw && !need_input_grad {
                    return None;
                }
                let mut dx = need_input_grad.then(|| Tensor::zeros(vec![batch, cin, h, w]));
                let (weight, dw) = {
                    let p = &mut self.params[0];
                    (&p.value, &mut p.grad)
                };
                let dw = want_dw.then_some(dw);
                if let Some(grid) = Grid::new(cin, h, w, k, s) {
                    grid.backward(&input, batch, g, weight, cout, dw, dx.as_mut().map(|t| t.data_mut()));
                    return dx;
                }
                if let Some(dw) = dw {
                    let mut cols = vec![T::zero(); ckk * hw];
                    for n in 0..batch {
                        im2col(&input[n * cin * h * w..(n + 1) * cin * h * w], &mut cols, cin, h, w, k, s, oh, ow);
                        gemm(false, true, cout, ckk, hw, T::one(), &g[n * cout * hw..], &cols, T::one(), dw);
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    for n in 0..batch {
                        gemm(true, false, ckk, hw, cout, T::one(), weight, &g[n * cout * hw..], T::zero(), &mut dcols);
                        col2im(&dcols, &mut dx.data_mut()[n * cin * h * w..(n + 1) * cin * h * w], cin, h, w, k, s, oh, ow);
                    }
                }
                dx
            }
            (LayerSpec::MaxPool { .. }, Cache::Pool { argmax, in_shape }) => need_input_grad.then(|| {
                let mut shape = vec![batch];
                shape.extend_from_slice(&in_shape);
                let mut dx = Tensor::zeros(shape);
                let dxd = dx.data_mut();
                for (gi, &src) in g.iter().zip(&argmax) {
                    dxd[src as usize] = dxd[src as usize] + *gi;
                }
                dx
            }),
            (LayerSpec::Dense { in_dim, out_dim }, Cache::Dense { input }) => {
                let (din, dout) = (*in_dim, *out_dim);
                if self.params[0].trainable {
                    gemm(true, false, dout, din, batch, T::one(), g, &input, T::one(), &mut self.params[0].grad);
                }
                if self.params[1].trainable {
                    let bg = &mut self.params[1].grad;
                    for row in g.chunks(dout) {
                        for (b, v) in bg.iter_mut().zip(row) {
                            *b = *b + *v;
                        }
                    }
                }
                need_input_grad.then(|| {
                    let mut dx = Tensor::zeros(vec![batch, din]);
                    gemm(false, false, batch, din, dout, T::one(), g, &self.params[0].value, T::zero(), dx.data_mut());
                    dx
                })
            }
            (LayerSpec::Dropout { .. } | LayerSpec::ReLU, Cache::Mask(mask)) => need_input_grad.then(|| {
                Tensor::new(grad_out.shape().to_vec(), g.iter().zip(&mask).map(|(a, b)| *a * *b).collect())
            }),
            (LayerSpec::BatchNorm { channels }, Cache::Norm { x_hat, inv_std }) => {
                let c = *channels;
                let hw = grad_out.item_len() / c;
                let m = T::of((batch * hw) as f64);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for n in 0..batch {
                    for ch in 0..c {
                        let base = (n * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g[ch] = sum_g[ch] + g[i];
                            sum_gx[ch] = sum_gx[ch] + g[i] * x_hat[i];
                        }
                    }
                }
                if self.params[0].trainable {
                    for ch in 0..c {
                        self.params[0].grad[ch] = self.params[0].grad[ch] + sum_gx[ch];
                    }
                }
                if self.params[1].trainable {
                    for ch in 0..c {
                        self.params[1].grad[ch] = self.params[1].grad[ch] + sum_g[ch];
                    }
                }
                need_input_grad.then(|| {
                    let gamma = &self.params[0].value;
                    let mut dx = vec![T::zero(); g.len()];
                    for n in 0..batch {
                        for ch in 0..c {
                            let scale = gamma[ch] * inv_std[ch] / m;
                            let base = (n * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] = scale * (m * g[i] - sum_g[ch] - x_hat[i] * sum_gx[ch]);
                            }
                        }
                    }
                    Tensor::new(grad_out.shape().to_vec(), dx)
                })
            }
            (LayerSpec::Flatten | LayerSpec::Reshape { .. }, Cache::Shape(in_shape)) => need_input_grad.then(|| {
                let mut shape = vec![batch];
                shape.extend_from_slice(&in_shape);
                grad_out.clone().reshaped(shape)
            }),
            (LayerSpec::NNUpsample { factor }, Cache::Shape(in_shape)) => need_input_grad.then(|| {
                let f = *factor;
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (h * f, w * f);
                let mut dx = Tensor::zeros(vec![batch, c, h, w]);
                let dxd = dx.data_mut();
                for plane in 0..batch * c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let d = &mut dxd[plane * h * w + (y / f) * w + x / f];
                            *d = *d + g[plane * oh * ow + y * ow + x];
                        }
                    }
                }
                dx
            }),
            (LayerSpec::SoftmaxClassifier, Cache::Probs(p)) => need_input_grad.then(|| {
                let d = grad_out.item_len();
                let mut dz = vec![T::zero(); g.len()];
                for r in 0..batch {
                    let (pr, gr) = (&p[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: T = pr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for i in 0..d {
                        dz[r * d + i] = pr[i] * (gr[i] - dot);
                    }
                }
                Tensor::new(grad_out.shape().to_vec(), dz)
            }),
            (spec, _) => panic!("backward through {spec:?} without a training-mode forward pass"),
        }
    }
}

type BatchStats<T> = Option<(Vec<T>, Vec<T>)>;

fn forward_impl<T: Scalar>(
    spec: &LayerSpec,
    params: &[Param<T>],
    running: Option<&(Vec<T>, Vec<T>)>,
    x: &Tensor<T>,
    train: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> (Tensor<T>, Cache<T>, BatchStats<T>) {
    let batch = x.batch();
    let out_item = spec.output_shape(x.item_shape()).unwrap_or_else(|e| panic!("{e}"));
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(&out_item);
    let xd = x.data();
    match spec {
        LayerSpec::Conv { kernel, stride, in_channels, out_channels, .. } => {
            let (k, s, cin, cout) = (*kernel, *stride, *in_channels, *out_channels);
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let (oh, ow) = (out_item[1], out_item[2]);
            let weight = &params[0].value;
            let mut y = Tensor::zeros(out_shape);
            if let Some(grid) = Grid::new(cin, h, w, k, s) {
                grid.forward(xd, batch, weight, cout, y.data_mut());
            } else {
                let (ckk, hw) = (cin * k * k, oh * ow);
                let mut cols = vec![T::zero(); ckk * hw];
                for n in 0..batch {
                    im2col(&xd[n * cin * h * w..(n + 1) * cin * h * w], &mut cols, cin, h, w, k, s, oh, ow);
                    gemm(false, false, cout, hw, ckk, T::one(), weight, &cols, T::zero(), &mut y.data_mut()[n * cout * hw..(n + 1) * cout * hw]);
                }
            }
            if let Some(bias) = params.get(1) {
                for (plane, out) in y.data_mut().chunks_mut(oh * ow).enumerate() {
                    let b = bias.value[plane % cout];
                    out.iter_mut().for_each(|v| *v = *v + b);
                }
            }
            let cache = if train { Cache::Conv { input: xd.to_vec(), in_shape: x.item_shape().to_vec() } } else { Cache::Empty };
            (y, cache, None)
        }
        LayerSpec::MaxPool { window, stride } => {
            let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
            let (oh, ow) = (out_item[1], out_item[2]);
            let mut y = Tensor::zeros(out_shape);
            let mut argmax = Vec::with_capacity(if train { y.len() } else { 0 });
            let yd = y.data_mut();
            for plane in 0..batch * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + oy * stride * w + ox * stride;
                        for dy in 0..*window {
                            for dx in 0..*window {
                                let i = base + (oy * stride + dy) * w + ox * stride + dx;
                                if xd[i] > xd[best] {
                                    best = i;
                                }
                            }
                        }
                        yd[plane * oh * ow + oy * ow + ox] = xd[best];
                        if train {
                            argmax.push(best as u32);
                        }
                    }
                }
            }
            let cache = if train { Cache::Pool { argmax, in_shape: x.item_shape().to_vec() } } else { Cache::Empty };
            (y, cache, None)
        }
        LayerSpec::Dense { in_dim, out_dim } => {
            let mut y = Tensor::zeros(out_shape);
            gemm(false, true, batch, *out_dim, *in_dim, T::one(), xd, &params[0].value, T::zero(), y.data_mut());
            for row in y.data_mut().chunks_mut(*out_dim) {
                for (v, b) in row.iter_mut().zip(&params[1].value) {
                    *v = *v + *b;
                }
            }
            let cache = if train { Cache::Dense { input: xd.to_vec() } } else { Cache::Empty };
            (y, cache, None)
        }
        LayerSpec::Dropout { p } => {
            if !train || *p == 0.0 {
                let mask = if train { Cache::Mask(vec![T::one(); xd.len()]) } else { Cache::Empty };
                return (x.clone(), mask, None);
            }
            let rng = rng.expect("dropout needs an rng in training mode");
            let keep = T::of(1.0 / (1.0 - p));
            let mask: Vec<T> = (0..xd.len()).map(|_| if rng.gen::<f64>() >= *p { keep } else { T::zero() }).collect();
            let y = Tensor::new(out_shape, xd.iter().zip(&mask).map(|(a, m)| *a * *m).collect());
            (y, Cache::Mask(mask), None)
        }
        LayerSpec::ReLU => {
            // Written out so a NaN propagates instead of clamping to zero.
            let y = Tensor::new(out_shape, xd.iter().map(|&v| if v < T::zero() { T::zero() } else { v }).collect());
            let cache = if train {
                Cache::Mask(xd.iter().map(|v| if *v > T::zero() { T::one() } else { T::zero() }).collect())
            } else {
                Cache::Empty
            };
            (y, cache, None)
        }
        LayerSpec::BatchNorm { channels } => {
            let c = *channels;
            let hw = x.item_len() / c;
            let (gamma, beta) = (&params[0].value, &params[1].value);
            let eps = T::of(BN_EPS);
            let (mean, var) = if train {
                let m = T::of((batch * hw) as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for n in 0..batch {
                    for ch in 0..c {
                        let base = (n * c + ch) * hw;
                        mean[ch] = mean[ch] + xd[base..base + hw].iter().copied().sum();
                    }
                }
                mean.iter_mut().for_each(|v| *v = *v / m);
                for n in 0..batch {
                    for ch in 0..c {
                        let base = (n * c + ch) * hw;
                        var[ch] = var[ch] + xd[base..base + hw].iter().map(|v| (*v - mean[ch]).powi(2)).sum();
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / m);
                (mean, var)
            } else {
                let (rm, rv) = running.expect("batch norm running statistics");
                (rm.clone(), rv.clone())
            };
            let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
            let mut x_hat = vec![T::zero(); xd.len()];
            let mut y = vec![T::zero(); xd.len()];
            for n in 0..batch {
                for ch in 0..c {
                    let base = (n * c + ch) * hw;
                    for i in base..base + hw {
                        x_hat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                        y[i] = gamma[ch] * x_hat[i] + beta[ch];
                    }
                }
            }
            if train {
                (Tensor::new(out_shape, y), Cache::Norm { x_hat, inv_std }, Some((mean, var)))
            } else {
                (Tensor::new(out_shape, y), Cache::Empty, None)
            }
        }
        LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
            (x.clone().reshaped(out_shape), Cache::Shape(x.item_shape().to_vec()), None)
        }
        LayerSpec::NNUpsample { factor } => {
            let f = *factor;
            let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
            let (oh, ow) = (h * f, w * f);
            let mut y = Tensor::zeros(out_shape);
            let yd = y.data_mut();
            for plane in 0..batch * c {
                for yy in 0..oh {
                    for xx in 0..ow {
                        yd[plane * oh * ow + yy * ow + xx] = xd[plane * h * w + (yy / f) * w + xx / f];
                    }
                }
            }
            (y, Cache::Shape(vec![c, h, w]), None)
        }
        LayerSpec::SoftmaxClassifier => {
            let d = x.item_len();
            let mut p = vec![T::zero(); xd.len()];
            for r in 0..batch {
                let row = &xd[r * d..(r + 1) * d];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..d {
                    p[r * d + i] = (row[i] - max).exp();
                    total = total + p[r * d + i];
                }
                p[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = *v / total);
            }
            let cache = if train { Cache::Probs(p.clone()) } else { Cache::Empty };
            (Tensor::new(out_shape, p), cache, None)
        }
    }
}

/// Samples per GEMM in the padded-grid convolution.
const GRID_CHUNK: usize = 32;

/// Stride-one convolution with odd kernel evaluated on a row-padded grid.
///
/// Each input plane is zero padded by `pad = k / 2` on every side and stored
/// with `pad` extra leading and trailing zeros. Output row `y` is computed at
/// all `pw = w + 2 pad` padded columns, so the im2col row of kernel tap
/// `(ky, kx)` is the contiguous slice starting at `ky * pw + kx`. The `2 pad`
/// columns per row that fall outside the image are computed and discarded.
#[derive(Debug, Clone, Copy)]
struct Grid {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    pw: usize,
    /// Padded plane length including the leading and trailing guards.
    len: usize,
    /// Grid positions per output plane.
    q: usize,
}

impl Grid {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize) -> Option<Self> {
        if stride != 1 || k % 2 == 0 {
            return None;
        }
        let pad = k / 2;
        let pw = w + 2 * pad;
        Some(Self { c, h, w, k, pad, pw, len: (h + 2 * pad) * pw + 2 * pad, q: h * pw })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Index of output pixel `(y, x)` within one grid plane.
    fn out_index(&self, y: usize, x: usize) -> usize {
        y * self.pw + x + self.pad
    }

    /// Index of input pixel `(y, x)` within one padded plane.
    fn in_index(&self, y: usize, x: usize) -> usize {
        self.pad + (y + self.pad) * self.pw + x + self.pad
    }

    fn pad_into<T: Scalar>(&self, x: &[T], nb: usize, buf: &mut [T]) {
        buf.fill(T::zero());
        for plane in 0..nb * self.c {
            for y in 0..self.h {
                let src = &x[(plane * self.h + y) * self.w..][..self.w];
                buf[plane * self.len + self.in_index(y, 0)..][..self.w].copy_from_slice(src);
            }
        }
    }

    /// Columns `[rows, nb * q]` of `nb` padded samples.
    fn cols_into<T: Scalar>(&self, padded: &[T], nb: usize, cols: &mut [T]) {
        let width = nb * self.q;
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ch * self.k + ky) * self.k + kx;
                    let off = ky * self.pw + kx;
                    for j in 0..nb {
                        let src = &padded[(j * self.c + ch) * self.len + off..][..self.q];
                        cols[r * width + j * self.q..][..self.q].copy_from_slice(src);
                    }
                }
            }
        }
    }

    fn forward<T: Scalar>(&self, x: &[T], batch: usize, weight: &[T], cout: usize, y: &mut [T]) {
        let (hw, plane) = (self.h * self.w, self.c * self.h * self.w);
        let chunk = GRID_CHUNK.min(batch.max(1));
        let mut padded = vec![T::zero(); chunk * self.c * self.len];
        let mut cols = vec![T::zero(); self.rows() * chunk * self.q];
        let mut out = vec![T::zero(); cout * chunk * self.q];
        for start in (0..batch).step_by(chunk) {
            let nb = chunk.min(batch - start);
            let width = nb * self.q;
            self.pad_into(&x[start * plane..(start + nb) * plane], nb, &mut padded[..nb * self.c * self.len]);
            self.cols_into(&padded, nb, &mut cols);
            gemm(false, false, cout, width, self.rows(), T::one(), weight, &cols, T::zero(), &mut out);
            for j in 0..nb {
                for o in 0..cout {
                    let dst = &mut y[((start + j) * cout + o) * hw..][..hw];
                    let src = &out[o * width + j * self.q..][..self.q];
                    for yy in 0..self.h {
                        dst[yy * self.w..][..self.w].copy_from_slice(&src[self.out_index(yy, 0)..][..self.w]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward<T: Scalar>(
        &self,
        x: &[T],
        batch: usize,
        g: &[T],
        weight: &[T],
        cout: usize,
        mut dw: Option<&mut Vec<T>>,
        mut dx: Option<&mut [T]>,
    ) {
        let (hw, plane) = (self.h * self.w, self.c * self.h * self.w);
        let chunk = GRID_CHUNK.min(batch.max(1));
        let mut padded = vec![T::zero(); chunk * self.c * self.len];
        let mut cols = vec![T::zero(); self.rows() * chunk * self.q];
        let mut dout = vec![T::zero(); cout * chunk * self.q];
        for start in (0..batch).step_by(chunk) {
            let nb = chunk.min(batch - start);
            let width = nb * self.q;
            // Gradient on the grid; the discarded columns stay zero.
            dout.fill(T::zero());
            for j in 0..nb {
                for o in 0..cout {
                    let src = &g[((start + j) * cout + o) * hw..][..hw];
                    let dst = &mut dout[o * width + j * self.q..][..self.q];
                    for yy in 0..self.h {
                        dst[self.out_index(yy, 0)..][..self.w].copy_from_slice(&src[yy * self.w..][..self.w]);
                    }
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                self.pad_into(&x[start * plane..(start + nb) * plane], nb, &mut padded[..nb * self.c * self.len]);
                self.cols_into(&padded, nb, &mut cols);
                gemm(false, true, cout, self.rows(), width, T::one(), &dout, &cols, T::one(), dw);
            }
            if let Some(dx) = dx.as_deref_mut() {
                gemm(true, false, self.rows(), width, cout, T::one(), weight, &dout, T::zero(), &mut cols);
                let dpad = &mut padded[..nb * self.c * self.len];
                dpad.fill(T::zero());
                for ch in 0..self.c {
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let r = (ch * self.k + ky) * self.k + kx;
                            let off = ky * self.pw + kx;
                            for j in 0..nb {
                                let dst = &mut dpad[(j * self.c + ch) * self.len + off..][..self.q];
                                let src = &cols[r * width + j * self.q..][..self.q];
                                dst.iter_mut().zip(src).for_each(|(d, v)| *d = *d + *v);
                            }
                        }
                    }
                }
                for p in 0..nb * self.c {
                    for yy in 0..self.h {
                        let src = &dpad[p * self.len + self.in_index(yy, 0)..][..self.w];
                        dx[(start * self.c + p) * hw + yy * self.w..][..self.w].copy_from_slice(src);
                    }
                }
            }
        }
    }
}

/// Output columns `ox` whose input column `ox * s + kx - pad` lies inside `0..w`.
fn valid_range(k_off: usize, pad: usize, s: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(s) };
    let hi = if w + pad > k_off { ((w + pad - k_off - 1) / s + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], cols: &mut [T], c: usize, h: usize, w: usize, k: usize, s: usize, oh: usize, ow: usize) {
    let pad = k / 2;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let out = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_range(kx, pad, s, w, ow);
                for oy in 0..oh {
                    let dst = &mut out[oy * ow..(oy + 1) * ow];
                    let iy = oy * s + ky;
                    if iy < pad || iy - pad >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - pad) * w..(iy - pad + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if s == 1 {
                        let ix0 = lo + kx - pad;
                        dst[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = src[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], dx: &mut [T], c: usize, h: usize, w: usize, k: usize, s: usize, oh: usize, ow: usize) {
    let pad = k / 2;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_range(kx, pad, s, w, ow);
                for oy in 0..oh {
                    let iy = oy * s + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy - pad) * w..(iy - pad + 1) * w];
                    let from = &src[oy * ow..(oy + 1) * ow];
                    for ox in lo..hi {
                        let d = &mut dst[ox * s + kx - pad];
                        *d = *d + from[ox];
                    }
                }
            }
        }
    }
}
