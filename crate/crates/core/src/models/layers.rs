//! Hand-rolled layer primitives with explicit forward/backward passes.
//!
//! All activations flow as `[B, H, W, C]` arrays in f64; vector stages keep
//! spatial dims of 1 (so a pooled feature map is `[B, 1, 1, C]`). Training
//! uses `forward_train` (caches activations for `backward`); `infer` is the
//! pure evaluation path with no side effects.

use ndarray::{Array1, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::ModelError;

/// Per-call context for training forward passes.
pub struct ForwardCtx<'a> {
    /// Whether batch-norm layers fold this batch into their running statistics.
    pub update_stats: bool,
    /// Randomness for dropout masks; required when any dropout rate is > 0.
    pub rng: Option<&'a mut ChaCha8Rng>,
}

/// Mutable view of one trainable parameter tensor and its gradient.
pub struct ParamView<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[kh, kw, cin, cout]`, 'same' padding, stride 1.
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    dweight: Array4<f64>,
    dbias: Array1<f64>,
    cache_input: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new_random(kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (kh * kw * cin) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid stddev");
        let weight = Array4::from_shape_fn((kh, kw, cin, cout), |_| normal.sample(rng));
        Self {
            bias: Array1::zeros(cout),
            dweight: Array4::zeros(weight.raw_dim()),
            dbias: Array1::zeros(cout),
            weight,
            cache_input: None,
        }
    }

    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, h, w, cin) = x.dim();
        let (kh, kw, kcin, cout) = self.weight.dim();
        assert_eq!(cin, kcin, "conv input channel mismatch");
        let (ph, pw) = (kh / 2, kw / 2);

        let xs = x.as_slice().expect("contiguous input");
        let ws = self.weight.as_slice().expect("contiguous weight");
        let mut y = vec![0.0f64; b * h * w * cout];

        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let ybase = ((bi * h + i) * w + j) * cout;
                    for u in 0..kh {
                        let si = (i + u).wrapping_sub(ph);
                        if si >= h {
                            continue;
                        }
                        for v in 0..kw {
                            let sj = (j + v).wrapping_sub(pw);
                            if sj >= w {
                                continue;
                            }
                            let xbase = ((bi * h + si) * w + sj) * cin;
                            for c in 0..cin {
                                let xv = xs[xbase + c];
                                if xv == 0.0 {
                                    continue;
                                }
                                let wbase = ((u * kw + v) * cin + c) * cout;
                                for o in 0..cout {
                                    y[ybase + o] += xv * ws[wbase + o];
                                }
                            }
                        }
                    }
                    for o in 0..cout {
                        y[ybase + o] += self.bias[o];
                    }
                }
            }
        }
        Array4::from_shape_vec((b, h, w, cout), y).expect("conv output shape")
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let x = self.cache_input.as_ref().expect("conv backward without forward");
        let (b, h, w, cin) = x.dim();
        let (kh, kw, _, cout) = self.weight.dim();
        let (ph, pw) = (kh / 2, kw / 2);

        let xs = x.as_slice().expect("contiguous input");
        let ws = self.weight.as_slice().expect("contiguous weight");
        let dys = dy.as_slice().expect("contiguous grad");
        let dws = self.dweight.as_slice_mut().expect("contiguous dweight");
        let mut dx = vec![0.0f64; b * h * w * cin];

        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let dybase = ((bi * h + i) * w + j) * cout;
                    for u in 0..kh {
                        let si = (i + u).wrapping_sub(ph);
                        if si >= h {
                            continue;
                        }
                        for v in 0..kw {
                            let sj = (j + v).wrapping_sub(pw);
                            if sj >= w {
                                continue;
                            }
                            let xbase = ((bi * h + si) * w + sj) * cin;
                            for c in 0..cin {
                                let xv = xs[xbase + c];
                                let wbase = ((u * kw + v) * cin + c) * cout;
                                let mut acc = 0.0;
                                for o in 0..cout {
                                    let g = dys[dybase + o];
                                    dws[wbase + o] += xv * g;
                                    acc += ws[wbase + o] * g;
                                }
                                dx[xbase + c] += acc;
                            }
                        }
                    }
                    for o in 0..cout {
                        self.dbias[o] += dys[dybase + o];
                    }
                }
            }
        }
        Array4::from_shape_vec((b, h, w, cin), dx).expect("conv dx shape")
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    /// Decay of the running statistics: `running = m*running + (1-m)*batch`.
    pub momentum: f64,
    dgamma: Array1<f64>,
    dbeta: Array1<f64>,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps,
            momentum,
            dgamma: Array1::zeros(channels),
            dbeta: Array1::zeros(channels),
            cache: None,
        }
    }

    fn forward_train(&mut self, x: &Array4<f64>, update_stats: bool) -> Array4<f64> {
        let (b, h, w, c) = x.dim();
        let n = (b * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for lane in x.lanes(Axis(3)) {
            for (k, &v) in lane.iter().enumerate() {
                mean[k] += v;
            }
        }
        mean.mapv_inplace(|m| m / n);
        for lane in x.lanes(Axis(3)) {
            for (k, &v) in lane.iter().enumerate() {
                let d = v - mean[k];
                var[k] += d * d;
            }
        }
        var.mapv_inplace(|v| v / n);

        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        for mut lane in xhat.lanes_mut(Axis(3)) {
            for (k, v) in lane.iter_mut().enumerate() {
                *v = (*v - mean[k]) * inv_std[k];
            }
        }
        let mut y = xhat.clone();
        for mut lane in y.lanes_mut(Axis(3)) {
            for (k, v) in lane.iter_mut().enumerate() {
                *v = self.gamma[k] * *v + self.beta[k];
            }
        }

        if update_stats {
            let m = self.momentum;
            for k in 0..c {
                self.running_mean[k] = m * self.running_mean[k] + (1.0 - m) * mean[k];
                self.running_var[k] = m * self.running_var[k] + (1.0 - m) * var[k];
            }
        }
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut y = x.clone();
        let scale: Vec<f64> = (0..self.gamma.len())
            .map(|k| self.gamma[k] / (self.running_var[k] + self.eps).sqrt())
            .collect();
        for mut lane in y.lanes_mut(Axis(3)) {
            for (k, v) in lane.iter_mut().enumerate() {
                *v = (*v - self.running_mean[k]) * scale[k] + self.beta[k];
            }
        }
        y
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.as_ref().expect("bn backward without forward");
        let (b, h, w, c) = dy.dim();
        let n = (b * h * w) as f64;

        let mut sum_dy = Array1::<f64>::zeros(c);
        let mut sum_dy_xhat = Array1::<f64>::zeros(c);
        for (dl, xl) in dy.lanes(Axis(3)).into_iter().zip(cache.xhat.lanes(Axis(3))) {
            for k in 0..c {
                sum_dy[k] += dl[k];
                sum_dy_xhat[k] += dl[k] * xl[k];
            }
        }
        for k in 0..c {
            self.dgamma[k] += sum_dy_xhat[k];
            self.dbeta[k] += sum_dy[k];
        }

        let mut dx = Array4::<f64>::zeros((b, h, w, c));
        for ((mut ol, dl), xl) in dx
            .lanes_mut(Axis(3))
            .into_iter()
            .zip(dy.lanes(Axis(3)))
            .zip(cache.xhat.lanes(Axis(3)))
        {
            for k in 0..c {
                let g = self.gamma[k] * cache.inv_std[k];
                ol[k] = g * (dl[k] - sum_dy[k] / n - xl[k] * sum_dy_xhat[k] / n);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache_mask: Option<Array4<f64>>,
}

impl Relu {
    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        x.mapv(|v| v.max(0.0))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2 {
    fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Vec<usize>) {
        let (b, h, w, c) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let xs = x.as_slice().expect("contiguous input");
        let mut y = vec![f64::NEG_INFINITY; b * oh * ow * c];
        let mut argmax = vec![0usize; b * oh * ow * c];
        for bi in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    let obase = ((bi * oh + i) * ow + j) * c;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let ibase = ((bi * h + 2 * i + di) * w + 2 * j + dj) * c;
                        for k in 0..c {
                            let v = xs[ibase + k];
                            if v > y[obase + k] {
                                y[obase + k] = v;
                                argmax[obase + k] = ibase + k;
                            }
                        }
                    }
                }
            }
        }
        (
            Array4::from_shape_vec((b, oh, ow, c), y).expect("pool output shape"),
            argmax,
        )
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let (argmax, in_dim) = self.cache.take().expect("pool backward without forward");
        let dys = dy.as_slice().expect("contiguous grad");
        let mut dx = vec![0.0f64; in_dim.0 * in_dim.1 * in_dim.2 * in_dim.3];
        for (o, &src) in argmax.iter().enumerate() {
            dx[src] += dys[o];
        }
        Array4::from_shape_vec(in_dim, dx).expect("pool dx shape")
    }
}

#[derive(Debug, Clone)]
pub struct GlobalAvgPool {
    cache_hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self { cache_hw: None }
    }

    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, h, w, c) = x.dim();
        let n = (h * w) as f64;
        let mut y = Array4::<f64>::zeros((b, 1, 1, c));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for k in 0..c {
                        y[[bi, 0, 0, k]] += x[[bi, i, j, k]];
                    }
                }
            }
        }
        y.mapv_inplace(|v| v / n);
        y
    }
}

#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    cache_mask: Option<Array4<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        Self {
            rate,
            cache_mask: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    /// `[cin, cout]`.
    pub weight: ndarray::Array2<f64>,
    pub bias: Array1<f64>,
    dweight: ndarray::Array2<f64>,
    dbias: Array1<f64>,
    cache_input: Option<Array4<f64>>,
}

impl Dense {
    pub fn new_random(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (cin + cout) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
        let weight = ndarray::Array2::from_shape_fn((cin, cout), |_| dist.sample(rng));
        Self {
            bias: Array1::zeros(cout),
            dweight: ndarray::Array2::zeros(weight.raw_dim()),
            dbias: Array1::zeros(cout),
            weight,
            cache_input: None,
        }
    }

    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, h, w, cin) = x.dim();
        assert!(h == 1 && w == 1, "dense expects pooled [B,1,1,C] input");
        let (wcin, cout) = self.weight.dim();
        assert_eq!(cin, wcin, "dense input width mismatch");
        let mut y = Array4::<f64>::zeros((b, 1, 1, cout));
        for bi in 0..b {
            for o in 0..cout {
                let mut acc = self.bias[o];
                for c in 0..cin {
                    acc += x[[bi, 0, 0, c]] * self.weight[[c, o]];
                }
                y[[bi, 0, 0, o]] = acc;
            }
        }
        y
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let x = self.cache_input.as_ref().expect("dense backward without forward");
        let (b, _, _, cin) = x.dim();
        let cout = self.weight.dim().1;
        let mut dx = Array4::<f64>::zeros((b, 1, 1, cin));
        for bi in 0..b {
            for o in 0..cout {
                let g = dy[[bi, 0, 0, o]];
                self.dbias[o] += g;
                for c in 0..cin {
                    self.dweight[[c, o]] += x[[bi, 0, 0, c]] * g;
                    dx[[bi, 0, 0, c]] += self.weight[[c, o]] * g;
                }
            }
        }
        dx
    }
}

/// One stage in a sequential stack.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu(Relu),
    MaxPool2(MaxPool2),
    GlobalAvgPool(GlobalAvgPool),
    Dropout(Dropout),
    Dense(Dense),
}

impl Layer {
    /// Training-mode forward pass; caches whatever `backward` needs.
    pub fn forward_train(&mut self, x: &Array4<f64>, ctx: &mut ForwardCtx) -> Array4<f64> {
        match self {
            Layer::Conv2d(l) => {
                let y = l.forward(x);
                l.cache_input = Some(x.clone());
                y
            }
            Layer::BatchNorm(l) => l.forward_train(x, ctx.update_stats),
            Layer::Relu(l) => {
                let y = l.forward(x);
                l.cache_mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                y
            }
            Layer::MaxPool2(l) => {
                let (y, argmax) = l.forward(x);
                l.cache = Some((argmax, x.dim()));
                y
            }
            Layer::GlobalAvgPool(l) => {
                let y = l.forward(x);
                let (_, h, w, _) = x.dim();
                l.cache_hw = Some((h, w));
                y
            }
            Layer::Dropout(l) => {
                if l.rate == 0.0 {
                    l.cache_mask = None;
                    return x.clone();
                }
                let keep = 1.0 - l.rate;
                let rng = ctx
                    .rng
                    .as_deref_mut()
                    .expect("dropout with rate > 0 requires an rng");
                let mask = Array4::from_shape_fn(x.raw_dim(), |_| {
                    if rng.random::<f64>() < l.rate {
                        0.0
                    } else {
                        1.0 / keep
                    }
                });
                let y = x * &mask;
                l.cache_mask = Some(mask);
                y
            }
            Layer::Dense(l) => {
                let y = l.forward(x);
                l.cache_input = Some(x.clone());
                y
            }
        }
    }

    /// Pure evaluation pass: batch norm uses running statistics, dropout is
    /// inactive, nothing is cached or mutated.
    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::Relu(l) => l.forward(x),
            Layer::MaxPool2(l) => l.forward(x).0,
            Layer::GlobalAvgPool(l) => l.forward(x),
            Layer::Dropout(_) => x.clone(),
            Layer::Dense(l) => l.forward(x),
        }
    }

    /// Propagate gradients, accumulating parameter gradients along the way.
    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        match self {
            Layer::Conv2d(l) => l.backward(dy),
            Layer::BatchNorm(l) => l.backward(dy),
            Layer::Relu(l) => {
                let mask = l.cache_mask.as_ref().expect("relu backward without forward");
                dy * mask
            }
            Layer::MaxPool2(l) => l.backward(dy),
            Layer::GlobalAvgPool(l) => {
                let (h, w) = l.cache_hw.expect("gap backward without forward");
                let (b, _, _, c) = dy.dim();
                let n = (h * w) as f64;
                let mut dx = Array4::<f64>::zeros((b, h, w, c));
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            for k in 0..c {
                                dx[[bi, i, j, k]] = dy[[bi, 0, 0, k]] / n;
                            }
                        }
                    }
                }
                dx
            }
            Layer::Dropout(l) => match &l.cache_mask {
                Some(mask) => dy * mask,
                None => dy.clone(),
            },
            Layer::Dense(l) => l.backward(dy),
        }
    }

    /// Views of the trainable parameters (running statistics excluded).
    pub fn param_views(&mut self, prefix: &str) -> Vec<ParamView<'_>> {
        match self {
            Layer::Conv2d(l) => vec![
                ParamView {
                    name: format!("{prefix}.weight"),
                    value: l.weight.as_slice_mut().expect("contiguous"),
                    grad: l.dweight.as_slice_mut().expect("contiguous"),
                },
                ParamView {
                    name: format!("{prefix}.bias"),
                    value: l.bias.as_slice_mut().expect("contiguous"),
                    grad: l.dbias.as_slice_mut().expect("contiguous"),
                },
            ],
            Layer::BatchNorm(l) => vec![
                ParamView {
                    name: format!("{prefix}.gamma"),
                    value: l.gamma.as_slice_mut().expect("contiguous"),
                    grad: l.dgamma.as_slice_mut().expect("contiguous"),
                },
                ParamView {
                    name: format!("{prefix}.beta"),
                    value: l.beta.as_slice_mut().expect("contiguous"),
                    grad: l.dbeta.as_slice_mut().expect("contiguous"),
                },
            ],
            Layer::Dense(l) => vec![
                ParamView {
                    name: format!("{prefix}.weight"),
                    value: l.weight.as_slice_mut().expect("contiguous"),
                    grad: l.dweight.as_slice_mut().expect("contiguous"),
                },
                ParamView {
                    name: format!("{prefix}.bias"),
                    value: l.bias.as_slice_mut().expect("contiguous"),
                    grad: l.dbias.as_slice_mut().expect("contiguous"),
                },
            ],
            _ => Vec::new(),
        }
    }

    pub fn zero_grads(&mut self) {
        match self {
            Layer::Conv2d(l) => {
                l.dweight.fill(0.0);
                l.dbias.fill(0.0);
            }
            Layer::BatchNorm(l) => {
                l.dgamma.fill(0.0);
                l.dbeta.fill(0.0);
            }
            Layer::Dense(l) => {
                l.dweight.fill(0.0);
                l.dbias.fill(0.0);
            }
            _ => {}
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        match self {
            Layer::Conv2d(l) => l.weight.len() + l.bias.len(),
            Layer::BatchNorm(l) => l.gamma.len() + l.beta.len(),
            Layer::Dense(l) => l.weight.len() + l.bias.len(),
            _ => 0,
        }
    }

    /// Number of non-trainable state scalars (batch-norm running statistics).
    pub fn stat_scalars(&self) -> usize {
        match self {
            Layer::BatchNorm(l) => l.running_mean.len() + l.running_var.len(),
            _ => 0,
        }
    }

    /// Short architecture descriptor for summaries and invariant checks.
    pub fn describe(&self) -> String {
        match self {
            Layer::Conv2d(l) => {
                let (kh, kw, cin, cout) = l.weight.dim();
                format!("conv2d({kh}x{kw}, {cin}->{cout})")
            }
            Layer::BatchNorm(l) => format!("batch_norm(c={})", l.gamma.len()),
            Layer::Relu(_) => "relu".into(),
            Layer::MaxPool2(_) => "max_pool2".into(),
            Layer::GlobalAvgPool(_) => "global_avg_pool".into(),
            Layer::Dropout(l) => format!("dropout(rate={})", l.rate),
            Layer::Dense(l) => {
                let (cin, cout) = l.weight.dim();
                format!("dense({cin}->{cout})")
            }
        }
    }
}

// --- binary serialization -------------------------------------------------

const TAG_CONV2D: u8 = 1;
const TAG_BATCH_NORM: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_MAX_POOL2: u8 = 4;
const TAG_GLOBAL_AVG_POOL: u8 = 5;
const TAG_DROPOUT: u8 = 6;
const TAG_DENSE: u8 = 7;

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.data.len() {
            return Err(ModelError::MalformedBlob("unexpected end of blob".into()));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn read_u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    pub fn read_u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn read_f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn read_f64_vec(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn read_string(&mut self) -> Result<String, ModelError> {
        let len = self.read_u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| ModelError::MalformedBlob("invalid utf8 string".into()))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.data.len()
    }
}

pub(crate) fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn write_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn write_f64_slice(out: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        write_f64(out, v);
    }
}

pub(crate) fn write_string(out: &mut Vec<u8>, s: &str) {
    write_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

impl Layer {
    pub(crate) fn write_bytes(&self, out: &mut Vec<u8>) {
        match self {
            Layer::Conv2d(l) => {
                out.push(TAG_CONV2D);
                let (kh, kw, cin, cout) = l.weight.dim();
                for d in [kh, kw, cin, cout] {
                    write_u32(out, d as u32);
                }
                write_f64_slice(out, l.weight.as_slice().unwrap());
                write_f64_slice(out, l.bias.as_slice().unwrap());
            }
            Layer::BatchNorm(l) => {
                out.push(TAG_BATCH_NORM);
                write_u32(out, l.gamma.len() as u32);
                write_f64(out, l.eps);
                write_f64(out, l.momentum);
                write_f64_slice(out, l.gamma.as_slice().unwrap());
                write_f64_slice(out, l.beta.as_slice().unwrap());
                write_f64_slice(out, l.running_mean.as_slice().unwrap());
                write_f64_slice(out, l.running_var.as_slice().unwrap());
            }
            Layer::Relu(_) => out.push(TAG_RELU),
            Layer::MaxPool2(_) => out.push(TAG_MAX_POOL2),
            Layer::GlobalAvgPool(_) => out.push(TAG_GLOBAL_AVG_POOL),
            Layer::Dropout(l) => {
                out.push(TAG_DROPOUT);
                write_f64(out, l.rate);
            }
            Layer::Dense(l) => {
                out.push(TAG_DENSE);
                let (cin, cout) = l.weight.dim();
                write_u32(out, cin as u32);
                write_u32(out, cout as u32);
                write_f64_slice(out, l.weight.as_slice().unwrap());
                write_f64_slice(out, l.bias.as_slice().unwrap());
            }
        }
    }

    pub(crate) fn read_bytes(reader: &mut ByteReader) -> Result<Layer, ModelError> {
        match reader.read_u8()? {
            TAG_CONV2D => {
                let kh = reader.read_u32()? as usize;
                let kw = reader.read_u32()? as usize;
                let cin = reader.read_u32()? as usize;
                let cout = reader.read_u32()? as usize;
                let weight = Array4::from_shape_vec(
                    (kh, kw, cin, cout),
                    reader.read_f64_vec(kh * kw * cin * cout)?,
                )
                .map_err(|e| ModelError::MalformedBlob(e.to_string()))?;
                let bias = Array1::from_vec(reader.read_f64_vec(cout)?);
                Ok(Layer::Conv2d(Conv2d {
                    dweight: Array4::zeros(weight.raw_dim()),
                    dbias: Array1::zeros(cout),
                    weight,
                    bias,
                    cache_input: None,
                }))
            }
            TAG_BATCH_NORM => {
                let c = reader.read_u32()? as usize;
                let eps = reader.read_f64()?;
                let momentum = reader.read_f64()?;
                let gamma = Array1::from_vec(reader.read_f64_vec(c)?);
                let beta = Array1::from_vec(reader.read_f64_vec(c)?);
                let running_mean = Array1::from_vec(reader.read_f64_vec(c)?);
                let running_var = Array1::from_vec(reader.read_f64_vec(c)?);
                Ok(Layer::BatchNorm(BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                    momentum,
                    dgamma: Array1::zeros(c),
                    dbeta: Array1::zeros(c),
                    cache: None,
                }))
            }
            TAG_RELU => Ok(Layer::Relu(Relu::default())),
            TAG_MAX_POOL2 => Ok(Layer::MaxPool2(MaxPool2::default())),
            TAG_GLOBAL_AVG_POOL => Ok(Layer::GlobalAvgPool(GlobalAvgPool::new())),
            TAG_DROPOUT => Ok(Layer::Dropout(Dropout::new(reader.read_f64()?))),
            TAG_DENSE => {
                let cin = reader.read_u32()? as usize;
                let cout = reader.read_u32()? as usize;
                let weight = ndarray::Array2::from_shape_vec(
                    (cin, cout),
                    reader.read_f64_vec(cin * cout)?,
                )
                .map_err(|e| ModelError::MalformedBlob(e.to_string()))?;
                let bias = Array1::from_vec(reader.read_f64_vec(cout)?);
                Ok(Layer::Dense(Dense {
                    dweight: ndarray::Array2::zeros(weight.raw_dim()),
                    dbias: Array1::zeros(cout),
                    weight,
                    bias,
                    cache_input: None,
                }))
            }
            tag => Err(ModelError::MalformedBlob(format!("unknown layer tag {tag}"))),
        }
    }
}

pub(crate) fn write_stack(layers: &[Layer], out: &mut Vec<u8>) {
    write_u32(out, layers.len() as u32);
    for layer in layers {
        layer.write_bytes(out);
    }
}

pub(crate) fn read_stack(reader: &mut ByteReader) -> Result<Vec<Layer>, ModelError> {
    let n = reader.read_u32()? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        layers.push(Layer::read_bytes(reader)?);
    }
    Ok(layers)
}
