//! Layer kernels with explicit forward caches and backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Scalar, Tensor};
use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out, in, k, k]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    Linear(Linear<T>),
    Relu,
    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    MaxPool2,
    /// Zeroes whole channels with probability `p` during training.
    Dropout2d(f64),
    /// Zeroes single activations with probability `p` during training.
    Dropout(f64),
    Flatten,
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    Input(Tensor<T>),
    Mask(Vec<bool>),
    Scale(Vec<T>),
    Argmax { input_shape: Vec<usize>, index: Vec<usize> },
    Shape(Vec<usize>),
    Identity,
}

/// Parameter gradients of one layer: `(weight, bias)` or nothing.
pub type LayerGrads<T> = Option<(Tensor<T>, Tensor<T>)>;

fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size - kernel) / stride + 1
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn output_size(&self, input: usize) -> usize {
        conv_out(input, self.kernel, self.stride)
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels || s[2] < self.kernel || s[3] < self.kernel {
            return Err(NnError::Shape(format!(
                "conv expects [B, {}, >={k}, >={k}], got {s:?}",
                self.in_channels,
                k = self.kernel
            )));
        }
        let (b, c_in, h, w) = (s[0], s[1], s[2], s[3]);
        let (k, st) = (self.kernel, self.stride);
        let (ho, wo) = (conv_out(h, k, st), conv_out(w, k, st));
        let mut out = Tensor::zeros(&[b, self.out_channels, ho, wo]);
        let xd = x.data();
        let wd = self.weight.data();
        let od = out.data_mut();
        for bi in 0..b {
            for o in 0..self.out_channels {
                let plane = &mut od[(bi * self.out_channels + o) * ho * wo..][..ho * wo];
                plane.fill(self.bias.data()[o]);
                for c in 0..c_in {
                    let input = &xd[(bi * c_in + c) * h * w..][..h * w];
                    for ki in 0..k {
                        for kj in 0..k {
                            let wv = wd[((o * c_in + c) * k + ki) * k + kj];
                            for oy in 0..ho {
                                let src = &input[(oy * st + ki) * w + kj..];
                                let dst = &mut plane[oy * wo..(oy + 1) * wo];
                                if st == 1 {
                                    for (d, &v) in dst.iter_mut().zip(&src[..wo]) {
                                        *d += wv * v;
                                    }
                                } else {
                                    for (ox, d) in dst.iter_mut().enumerate() {
                                        *d += wv * src[ox * st];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn backward(&self, x: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let s = x.shape();
        let (b, c_in, h, w) = (s[0], s[1], s[2], s[3]);
        let (k, st) = (self.kernel, self.stride);
        let (ho, wo) = (g.shape()[2], g.shape()[3]);
        let mut gx = Tensor::zeros(s);
        let mut gw = Tensor::zeros(self.weight.shape());
        let mut gb = Tensor::zeros(self.bias.shape());
        let xd = x.data();
        let gd = g.data();
        let wd = self.weight.data();
        for bi in 0..b {
            for o in 0..self.out_channels {
                let gplane = &gd[(bi * self.out_channels + o) * ho * wo..][..ho * wo];
                gb.data_mut()[o] += gplane.iter().copied().sum::<T>();
                for c in 0..c_in {
                    let base = (bi * c_in + c) * h * w;
                    let input = &xd[base..base + h * w];
                    for ki in 0..k {
                        for kj in 0..k {
                            let widx = ((o * c_in + c) * k + ki) * k + kj;
                            let wv = wd[widx];
                            let mut acc = T::zero();
                            for oy in 0..ho {
                                let grow = &gplane[oy * wo..(oy + 1) * wo];
                                let off = (oy * st + ki) * w + kj;
                                if st == 1 {
                                    for (&gv, &xv) in grow.iter().zip(&input[off..off + wo]) {
                                        acc += gv * xv;
                                    }
                                    let gxrow = &mut gx.data_mut()[base + off..base + off + wo];
                                    for (d, &gv) in gxrow.iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                } else {
                                    for (ox, &gv) in grow.iter().enumerate() {
                                        acc += gv * input[off + ox * st];
                                        gx.data_mut()[base + off + ox * st] += wv * gv;
                                    }
                                }
                            }
                            gw.data_mut()[widx] += acc;
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.in_features {
            return Err(NnError::Shape(format!(
                "linear expects [B, {}], got {s:?}",
                self.in_features
            )));
        }
        let b = s[0];
        let mut out = Tensor::zeros(&[b, self.out_features]);
        let wd = self.weight.data();
        for bi in 0..b {
            let xr = x.row(bi);
            for o in 0..self.out_features {
                let wr = &wd[o * self.in_features..(o + 1) * self.in_features];
                let dot: T = wr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                out.data_mut()[bi * self.out_features + o] = dot + self.bias.data()[o];
            }
        }
        Ok(out)
    }

    fn backward(&self, x: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let b = x.shape()[0];
        let (n_in, n_out) = (self.in_features, self.out_features);
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(self.weight.shape());
        let mut gb = Tensor::zeros(self.bias.shape());
        let wd = self.weight.data();
        for bi in 0..b {
            let xr = x.row(bi);
            let gr = g.row(bi);
            for o in 0..n_out {
                let gv = gr[o];
                if gv == T::zero() {
                    continue;
                }
                gb.data_mut()[o] += gv;
                let gwr = &mut gw.data_mut()[o * n_in..(o + 1) * n_in];
                for (d, &xv) in gwr.iter_mut().zip(xr) {
                    *d += gv * xv;
                }
                let wr = &wd[o * n_in..(o + 1) * n_in];
                let gxr = &mut gx.data_mut()[bi * n_in..(bi + 1) * n_in];
                for (d, &wv) in gxr.iter_mut().zip(wr) {
                    *d += gv * wv;
                }
            }
        }
        (gx, gw, gb)
    }
}

impl<T: Scalar> Layer<T> {
    pub fn params(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match self {
            Layer::Conv2d(c) => Some((&c.weight, &c.bias)),
            Layer::Linear(l) => Some((&l.weight, &l.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        match self {
            Layer::Conv2d(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Linear(l) => Some((&mut l.weight, &mut l.bias)),
            _ => None,
        }
    }

    /// Runs the layer. With `train = Some(rng)` dropout is active; with
    /// `keep_cache` a cache for [`Layer::backward`] is returned.
    pub fn forward(
        &self,
        x: Tensor<T>,
        train: Option<&mut ChaCha8Rng>,
        keep_cache: bool,
    ) -> Result<(Tensor<T>, Option<Cache<T>>), NnError> {
        let cache_input = |x: &Tensor<T>| keep_cache.then(|| Cache::Input(x.clone()));
        match self {
            Layer::Conv2d(c) => {
                let y = c.forward(&x)?;
                Ok((y, cache_input(&x)))
            }
            Layer::Linear(l) => {
                let y = l.forward(&x)?;
                Ok((y, cache_input(&x)))
            }
            Layer::Relu => {
                let mut y = x;
                let mut mask = Vec::new();
                if keep_cache {
                    mask.reserve(y.len());
                }
                for v in y.data_mut() {
                    let on = *v > T::zero();
                    if !on {
                        *v = T::zero();
                    }
                    if keep_cache {
                        mask.push(on);
                    }
                }
                Ok((y, keep_cache.then_some(Cache::Mask(mask))))
            }
            Layer::MaxPool2 => {
                let s = x.shape().to_vec();
                if s.len() != 4 || s[2] < 2 || s[3] < 2 {
                    return Err(NnError::Shape(format!("maxpool expects [B, C, >=2, >=2], got {s:?}")));
                }
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let mut y = Tensor::zeros(&[b, c, ho, wo]);
                let mut index = Vec::with_capacity(if keep_cache { b * c * ho * wo } else { 0 });
                let xd = x.data();
                for plane in 0..b * c {
                    let base = plane * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = base + 2 * oy * w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                                if xd[idx] > xd[best] {
                                    best = idx;
                                }
                            }
                            y.data_mut()[(plane * ho + oy) * wo + ox] = xd[best];
                            if keep_cache {
                                index.push(best);
                            }
                        }
                    }
                }
                Ok((y, keep_cache.then_some(Cache::Argmax { input_shape: s, index })))
            }
            Layer::Dropout2d(p) | Layer::Dropout(p) => {
                let p = *p;
                match train {
                    Some(rng) if p > 0.0 => {
                        let s = x.shape().to_vec();
                        let group = if matches!(self, Layer::Dropout2d(_)) {
                            if s.len() != 4 {
                                return Err(NnError::Shape(format!("dropout2d expects 4-D input, got {s:?}")));
                            }
                            s[2] * s[3]
                        } else {
                            1
                        };
                        let keep_scale = T::of(1.0 / (1.0 - p));
                        let mut scale = Vec::with_capacity(x.len());
                        for _ in 0..x.len() / group {
                            let v = if rng.gen::<f64>() < p { T::zero() } else { keep_scale };
                            scale.extend(std::iter::repeat_n(v, group));
                        }
                        let mut y = x;
                        for (v, &m) in y.data_mut().iter_mut().zip(&scale) {
                            *v *= m;
                        }
                        Ok((y, keep_cache.then_some(Cache::Scale(scale))))
                    }
                    _ => Ok((x, keep_cache.then_some(Cache::Identity))),
                }
            }
            Layer::Flatten => {
                let s = x.shape().to_vec();
                let b = s[0];
                let rest = x.len() / b.max(1);
                let y = x.reshape(vec![b, rest])?;
                Ok((y, keep_cache.then_some(Cache::Shape(s))))
            }
        }
    }

    /// Returns the input gradient and, for parametric layers, the parameter
    /// gradients (summed over the batch).
    pub fn backward(&self, cache: &Cache<T>, g: Tensor<T>) -> Result<(Tensor<T>, LayerGrads<T>), NnError> {
        match (self, cache) {
            (Layer::Conv2d(c), Cache::Input(x)) => {
                let (gx, gw, gb) = c.backward(x, &g);
                Ok((gx, Some((gw, gb))))
            }
            (Layer::Linear(l), Cache::Input(x)) => {
                let (gx, gw, gb) = l.backward(x, &g);
                Ok((gx, Some((gw, gb))))
            }
            (Layer::Relu, Cache::Mask(mask)) => {
                let mut g = g;
                for (v, &on) in g.data_mut().iter_mut().zip(mask) {
                    if !on {
                        *v = T::zero();
                    }
                }
                Ok((g, None))
            }
            (Layer::MaxPool2, Cache::Argmax { input_shape, index }) => {
                let mut gx = Tensor::zeros(input_shape);
                for (&i, &gv) in index.iter().zip(g.data()) {
                    gx.data_mut()[i] += gv;
                }
                Ok((gx, None))
            }
            (Layer::Dropout2d(_) | Layer::Dropout(_), Cache::Scale(scale)) => {
                let mut g = g;
                for (v, &m) in g.data_mut().iter_mut().zip(scale) {
                    *v *= m;
                }
                Ok((g, None))
            }
            (Layer::Dropout2d(_) | Layer::Dropout(_), Cache::Identity) => Ok((g, None)),
            (Layer::Flatten, Cache::Shape(s)) => Ok((g.reshape(s.clone())?, None)),
            _ => Err(NnError::Shape("cache does not match layer".into())),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                weight: c.weight.cast(),
                bias: c.bias.cast(),
            }),
            Layer::Linear(l) => Layer::Linear(Linear {
                in_features: l.in_features,
                out_features: l.out_features,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            }),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool2 => Layer::MaxPool2,
            Layer::Dropout2d(p) => Layer::Dropout2d(*p),
            Layer::Dropout(p) => Layer::Dropout(*p),
            Layer::Flatten => Layer::Flatten,
        }
    }
}
