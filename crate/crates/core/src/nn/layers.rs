use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::scalar::{gemm, Mat, Scalar};

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape does not match data"
        );
        Tensor { shape, data }
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }
}

/// Trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::ZERO; value.len()];
        Param {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: T) -> Self {
        let len = shape.iter().product();
        Param::new(name, shape, vec![v; len])
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::ZERO);
    }
}

/// Kaiming-normal weights for a ReLU layer with the given fan-in.
pub fn kaiming<T: Scalar, R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..len).map(|_| T::from_f64(normal.sample(rng))).collect()
}

/// Uniform weights in `+-1/sqrt(fan_in)`.
pub fn fan_in_uniform<T: Scalar, R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    (0..len).map(|_| T::from_f64(dist.sample(rng))).collect()
}

pub trait Layer<T: Scalar>: Send {
    /// With `train` set the layer keeps whatever `backward` needs.
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T>;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T>;
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
    /// Non-trainable state saved with the weights.
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&str, &mut Vec<T>)) {}
    /// Output (channels, height, width) for an input of the given size.
    fn out_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize);
    /// Releases cached activations.
    fn clear_cache(&mut self);
    fn as_conv_mut(&mut self) -> Option<&mut Conv2d<T>> {
        None
    }
}

pub struct Conv2d<T> {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    /// The first layer of a network has no use for an input gradient.
    pub needs_input_grad: bool,
    cache: Option<ConvCache<T>>,
    spare: Vec<T>,
}

struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 4],
    oh: usize,
    ow: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = Param::new(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            kaiming(rng, cout * fan_in, fan_in),
        );
        let bias = bias.then(|| Param::filled(format!("{name}.bias"), vec![cout], T::ZERO));
        Conv2d {
            cin,
            cout,
            k,
            stride,
            pad,
            weight,
            bias,
            needs_input_grad: true,
            cache: None,
            spare: Vec::new(),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` lies
    /// inside `0..w`.
    fn valid_cols(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if w + p > kx {
            ((w + p - kx - 1) / s + 1).min(ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let plane = oh * ow;
        for ci in 0..self.cin {
            let xc = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx, w, ow);
                    let row = &mut cols[((ci * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..oh {
                        let out = &mut row[oy * ow..(oy + 1) * ow];
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= h {
                            out.fill(T::ZERO);
                            continue;
                        }
                        let src = &xc[(iy - p) * w..(iy - p + 1) * w];
                        out[..lo].fill(T::ZERO);
                        out[hi..].fill(T::ZERO);
                        let base = lo * s + kx - p;
                        if s == 1 {
                            out[lo..hi].copy_from_slice(&src[base..base + hi - lo]);
                        } else {
                            for (o, v) in out[lo..hi].iter_mut().zip(src[base..].iter().step_by(s)) {
                                *o = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let plane = oh * ow;
        for ci in 0..self.cin {
            let dc = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx, w, ow);
                    let row = &cols[((ci * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= h {
                            continue;
                        }
                        let dst = &mut dc[(iy - p) * w..(iy - p + 1) * w];
                        let base = lo * s + kx - p;
                        for (d, v) in dst[base..].iter_mut().step_by(s).zip(&row[oy * ow + lo..oy * ow + hi]) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.cin, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let kdim = self.cin * self.k * self.k;
        let plane = oh * ow;
        let mut y = Tensor::zeros([n, self.cout, oh, ow]);
        // im2col overwrites every element, so a recycled buffer needs no clearing.
        let mut cols = std::mem::take(&mut self.spare);
        cols.resize(if train { n * kdim * plane } else { kdim * plane }, T::ZERO);
        for i in 0..n {
            let buf = if train {
                &mut cols[i * kdim * plane..(i + 1) * kdim * plane]
            } else {
                &mut cols[..]
            };
            self.im2col(x.sample(i), h, w, oh, ow, buf);
            let ys = y.sample_mut(i);
            if let Some(b) = &self.bias {
                for (co, row) in ys.chunks_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v = b.value[co]);
                }
            }
            let beta = if self.bias.is_some() { T::ONE } else { T::ZERO };
            gemm(
                T::ONE,
                Mat::new(&self.weight.value, self.cout, kdim),
                Mat::new(buf, kdim, plane),
                beta,
                ys,
            );
        }
        if train {
            self.cache = Some(ConvCache {
                cols,
                in_shape: x.shape,
                oh,
                ow,
            });
        } else {
            self.cache = None;
            self.spare = cols;
        }
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("conv backward without a training forward");
        let [n, _, h, w] = cache.in_shape;
        let (oh, ow) = (cache.oh, cache.ow);
        let kdim = self.cin * self.k * self.k;
        let plane = oh * ow;
        let mut dx = Tensor::zeros(cache.in_shape);
        let mut dcols = vec![T::ZERO; if self.needs_input_grad { kdim * plane } else { 0 }];
        for i in 0..n {
            let dys = dy.sample(i);
            let cols = &cache.cols[i * kdim * plane..(i + 1) * kdim * plane];
            gemm(
                T::ONE,
                Mat::new(dys, self.cout, plane),
                Mat::new(cols, kdim, plane).t(),
                T::ONE,
                &mut self.weight.grad,
            );
            if let Some(b) = &mut self.bias {
                for (co, row) in dys.chunks(plane).enumerate() {
                    let mut s = T::ZERO;
                    for &v in row {
                        s += v;
                    }
                    b.grad[co] += s;
                }
            }
            if self.needs_input_grad {
                gemm(
                    T::ONE,
                    Mat::new(&self.weight.value, self.cout, kdim).t(),
                    Mat::new(dys, self.cout, plane),
                    T::ZERO,
                    &mut dcols,
                );
                self.col2im(&dcols, h, w, oh, ow, dx.sample_mut(i));
            }
        }
        self.spare = cache.cols;
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn out_dims(&self, _c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let (oh, ow) = self.out_hw(h, w);
        (self.cout, oh, ow)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
        self.spare = Vec::new();
    }

    fn as_conv_mut(&mut self) -> Option<&mut Conv2d<T>> {
        Some(self)
    }
}

pub struct BatchNorm2d<T> {
    channels: usize,
    eps: f64,
    momentum: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    prefix: String,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: [usize; 4],
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], T::ONE),
            beta: Param::filled(format!("{name}.beta"), vec![channels], T::ZERO),
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            prefix: name.to_string(),
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.channels, "batch norm channels");
        let plane = h * w;
        let mut y = Tensor::zeros(x.shape);
        if !train {
            for ch in 0..c {
                let inv = T::from_f64(1.0 / (self.running_var[ch].to_f64() + self.eps).sqrt());
                let scale = self.gamma.value[ch] * inv;
                let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    for (o, &v) in y.data[off..off + plane].iter_mut().zip(&x.data[off..off + plane]) {
                        *o = v * scale + shift;
                    }
                }
            }
            self.cache = None;
            return y;
        }

        let count = (n * plane) as f64;
        let mut xhat = vec![T::ZERO; x.data.len()];
        let mut inv_std = vec![T::ZERO; c];
        for ch in 0..c {
            let (mut s, mut ss) = (0.0f64, 0.0f64);
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for &v in &x.data[off..off + plane] {
                    let v = v.to_f64();
                    s += v;
                    ss += v * v;
                }
            }
            let mean = s / count;
            let var = (ss / count - mean * mean).max(0.0);
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = T::from_f64(inv);
            let m = self.momentum;
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            self.running_mean[ch] = T::from_f64((1.0 - m) * self.running_mean[ch].to_f64() + m * mean);
            self.running_var[ch] = T::from_f64((1.0 - m) * self.running_var[ch].to_f64() + m * unbiased);
            let (mean_t, inv_t) = (T::from_f64(mean), T::from_f64(inv));
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    let xh = (x.data[j] - mean_t) * inv_t;
                    xhat[j] = xh;
                    y.data[j] = xh * g + b;
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            shape: x.shape,
        });
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self
            .cache
            .take()
            .expect("batch norm backward without a training forward");
        let [n, c, h, w] = cache.shape;
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut dx = Tensor::zeros(cache.shape);
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    let d = dy.data[j].to_f64();
                    sum_dy += d;
                    sum_dy_xhat += d * cache.xhat[j].to_f64();
                }
            }
            self.gamma.grad[ch] += T::from_f64(sum_dy_xhat);
            self.beta.grad[ch] += T::from_f64(sum_dy);
            let k = self.gamma.value[ch] * cache.inv_std[ch];
            let mean_dy = T::from_f64(sum_dy / count);
            let mean_dy_xhat = T::from_f64(sum_dy_xhat / count);
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    dx.data[j] = k * (dy.data[j] - mean_dy - cache.xhat[j] * mean_dy_xhat);
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        f(&format!("{}.running_mean", self.prefix), &mut self.running_mean);
        f(&format!("{}.running_var", self.prefix), &mut self.running_var);
    }

    fn out_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (c, h, w)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl<T: Scalar> Layer<T> for Relu {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let data: Vec<T> = x.data.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
        self.mask = train.then(|| x.data.iter().map(|&v| v > T::ZERO).collect());
        Tensor::from_vec(x.shape, data)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mask = self.mask.take().expect("relu backward without a training forward");
        let data = dy
            .data
            .iter()
            .zip(&mask)
            .map(|(&d, &m)| if m { d } else { T::ZERO })
            .collect();
        Tensor::from_vec(dy.shape, data)
    }

    fn out_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (c, h, w)
    }

    fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// Max pooling, `k x k` window, zero-padding treated as minus infinity.
pub struct MaxPool2d {
    k: usize,
    stride: usize,
    pad: usize,
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d {
            k,
            stride,
            pad,
            cache: None,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

impl<T: Scalar> Layer<T> for MaxPool2d {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let (oh, ow) = self.out_hw(h, w);
        let mut y = Tensor::zeros([n, c, oh, ow]);
        let mut arg = vec![0usize; n * c * oh * ow];
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let j = base + iy as usize * w + ix as usize;
                            if best.is_none_or(|(b, _)| x.data[j] > b) {
                                best = Some((x.data[j], j));
                            }
                        }
                    }
                    let (v, j) = best.expect("pooling window overlaps the input");
                    let o = (nc * oh + oy) * ow + ox;
                    y.data[o] = v;
                    arg[o] = j;
                }
            }
        }
        self.cache = train.then_some((arg, x.shape));
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (arg, shape) = self.cache.take().expect("pool backward without a training forward");
        let mut dx = Tensor::zeros(shape);
        for (&d, &j) in dy.data.iter().zip(&arg) {
            dx.data[j] += d;
        }
        dx
    }

    fn out_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let (oh, ow) = self.out_hw(h, w);
        (c, oh, ow)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Default)]
pub struct GlobalAvgPool {
    shape: Option<[usize; 4]>,
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let plane = h * w;
        let scale = T::from_f64(1.0 / plane as f64);
        let data = x
            .data
            .chunks(plane)
            .map(|p| {
                let mut s = T::ZERO;
                for &v in p {
                    s += v;
                }
                s * scale
            })
            .collect();
        self.shape = train.then_some(x.shape);
        Tensor::from_vec([n, c, 1, 1], data)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let shape = self.shape.take().expect("pool backward without a training forward");
        let plane = shape[2] * shape[3];
        let scale = T::from_f64(1.0 / plane as f64);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &d in &dy.data {
            data.extend(std::iter::repeat_n(d * scale, plane));
        }
        Tensor::from_vec(shape, data)
    }

    fn out_dims(&self, c: usize, _h: usize, _w: usize) -> (usize, usize, usize) {
        (c, 1, 1)
    }

    fn clear_cache(&mut self) {
        self.shape = None;
    }
}

/// Fully connected layer on flattened samples; output is `[n, out, 1, 1]`.
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            inputs,
            outputs,
            weight: Param::new(
                format!("{name}.weight"),
                vec![outputs, inputs],
                fan_in_uniform(rng, outputs * inputs, inputs),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                vec![outputs],
                fan_in_uniform(rng, outputs, inputs),
            ),
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let n = x.n();
        assert_eq!(x.sample_len(), self.inputs, "linear input width");
        let mut y = Vec::with_capacity(n * self.outputs);
        for _ in 0..n {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(
            T::ONE,
            Mat::new(&x.data, n, self.inputs),
            Mat::new(&self.weight.value, self.outputs, self.inputs).t(),
            T::ONE,
            &mut y,
        );
        self.cache = train.then(|| x.clone());
        Tensor::from_vec([n, self.outputs, 1, 1], y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect("linear backward without a training forward");
        let n = x.n();
        gemm(
            T::ONE,
            Mat::new(&dy.data, n, self.outputs).t(),
            Mat::new(&x.data, n, self.inputs),
            T::ONE,
            &mut self.weight.grad,
        );
        for row in dy.data.chunks(self.outputs) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(x.shape);
        gemm(
            T::ONE,
            Mat::new(&dy.data, n, self.outputs),
            Mat::new(&self.weight.value, self.outputs, self.inputs),
            T::ZERO,
            &mut dx.data,
        );
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn out_dims(&self, _c: usize, _h: usize, _w: usize) -> (usize, usize, usize) {
        (self.outputs, 1, 1)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Appends two planes holding the column and row position, each running
/// linearly from -1 to 1 across the image.
#[derive(Default)]
pub struct CoordPlanes {
    in_channels: Option<usize>,
}

impl<T: Scalar> Layer<T> for CoordPlanes {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let plane = h * w;
        let pos = |i: usize, len: usize| {
            if len > 1 {
                T::from_f64(2.0 * i as f64 / (len - 1) as f64 - 1.0)
            } else {
                T::ZERO
            }
        };
        let mut coords = Vec::with_capacity(2 * plane);
        for _ in 0..h {
            coords.extend((0..w).map(|col| pos(col, w)));
        }
        for row in 0..h {
            coords.extend(std::iter::repeat_n(pos(row, h), w));
        }
        let mut data = Vec::with_capacity(n * (c + 2) * plane);
        for i in 0..n {
            data.extend_from_slice(x.sample(i));
            data.extend_from_slice(&coords);
        }
        self.in_channels = train.then_some(c);
        Tensor::from_vec([n, c + 2, h, w], data)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let c = self
            .in_channels
            .take()
            .expect("coord backward without a training forward");
        let [n, _, h, w] = dy.shape;
        let keep = c * h * w;
        let mut data = Vec::with_capacity(n * keep);
        for i in 0..n {
            data.extend_from_slice(&dy.sample(i)[..keep]);
        }
        Tensor::from_vec([n, c, h, w], data)
    }

    fn out_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (c + 2, h, w)
    }

    fn clear_cache(&mut self) {
        self.in_channels = None;
    }
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential<T> {
    pub layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn push(&mut self, layer: impl Layer<T> + 'static) {
        self.layers.push(Box::new(layer));
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let mut cur: Option<Tensor<T>> = None;
        for layer in &mut self.layers {
            let next = layer.forward(cur.as_ref().unwrap_or(x), train);
            cur = Some(next);
        }
        cur.unwrap_or_else(|| x.clone())
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut cur: Option<Tensor<T>> = None;
        for layer in self.layers.iter_mut().rev() {
            let next = layer.backward(cur.as_ref().unwrap_or(dy));
            cur = Some(next);
        }
        cur.unwrap_or_else(|| dy.clone())
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        for layer in &mut self.layers {
            layer.visit_buffers(f);
        }
    }

    fn out_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        self.layers.iter().fold((c, h, w), |(c, h, w), l| l.out_dims(c, h, w))
    }

    fn clear_cache(&mut self) {
        for layer in &mut self.layers {
            layer.clear_cache();
        }
    }
}

/// Two 3x3 conv/BN stages with an identity or projected shortcut.
pub struct ResidualBlock<T> {
    main: Sequential<T>,
    shortcut: Option<Sequential<T>>,
    out_relu: Relu,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let mut main = Sequential::default();
        main.push(Conv2d::new(
            &format!("{name}.conv1"),
            cin,
            cout,
            3,
            stride,
            1,
            false,
            rng,
        ));
        main.push(BatchNorm2d::new(&format!("{name}.bn1"), cout));
        main.push(Relu::default());
        main.push(Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng));
        main.push(BatchNorm2d::new(&format!("{name}.bn2"), cout));
        let shortcut = (stride != 1 || cin != cout).then(|| {
            let mut s = Sequential::default();
            s.push(Conv2d::new(
                &format!("{name}.down"),
                cin,
                cout,
                1,
                stride,
                0,
                false,
                rng,
            ));
            s.push(BatchNorm2d::new(&format!("{name}.down_bn"), cout));
            s
        });
        ResidualBlock {
            main,
            shortcut,
            out_relu: Relu::default(),
        }
    }
}

impl<T: Scalar> Layer<T> for ResidualBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let mut y = self.main.forward(x, train);
        match &mut self.shortcut {
            Some(s) => {
                let sc = s.forward(x, train);
                y.data.iter_mut().zip(&sc.data).for_each(|(a, &b)| *a += b);
            }
            None => y.data.iter_mut().zip(&x.data).for_each(|(a, &b)| *a += b),
        }
        Layer::<T>::forward(&mut self.out_relu, &y, train)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let d = Layer::<T>::backward(&mut self.out_relu, dy);
        let mut dx = self.main.backward(&d);
        let dsc = match &mut self.shortcut {
            Some(s) => s.backward(&d),
            None => d,
        };
        dx.data.iter_mut().zip(&dsc.data).for_each(|(a, &b)| *a += b);
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.main.visit_params(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        self.main.visit_buffers(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_buffers(f);
        }
    }

    fn out_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        self.main.out_dims(c, h, w)
    }

    fn clear_cache(&mut self) {
        self.main.clear_cache();
        if let Some(s) = &mut self.shortcut {
            s.clear_cache();
        }
        Layer::<T>::clear_cache(&mut self.out_relu);
    }
}
