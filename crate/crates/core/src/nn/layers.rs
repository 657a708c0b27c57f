//! Layer kernels with explicit forward/backward passes over a whole batch.
//!
//! Activations travel as flat buffers, one contiguous `C×H×W` (or vector)
//! block per sample. Flattening is therefore free.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::matmul;
use super::{Scalar, Tensor};

/// Serializable description of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        in_height: usize,
        in_width: usize,
    },
    Relu {
        width: usize,
    },
    MaxPool2 {
        channels: usize,
        in_height: usize,
        in_width: usize,
    },
    Flatten {
        width: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    pub fn input_len(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                in_height,
                in_width,
                ..
            } => in_channels * in_height * in_width,
            LayerSpec::Relu { width } | LayerSpec::Flatten { width } => width,
            LayerSpec::MaxPool2 {
                channels,
                in_height,
                in_width,
            } => channels * in_height * in_width,
            LayerSpec::Dense { inputs, .. } => inputs,
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                padding,
                in_height,
                in_width,
                ..
            } => out_channels * (in_height + 2 * padding + 1 - kernel) * (in_width + 2 * padding + 1 - kernel),
            LayerSpec::Relu { width } | LayerSpec::Flatten { width } => width,
            LayerSpec::MaxPool2 {
                channels,
                in_height,
                in_width,
            } => channels * (in_height / 2) * (in_width / 2),
            LayerSpec::Dense { outputs, .. } => outputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub in_height: usize,
    pub in_width: usize,
    /// `[out_channels, in_channels, kernel, kernel]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn out_height(&self) -> usize {
        self.in_height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.in_width + 2 * self.padding + 1 - self.kernel
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    /// Unfolds one sample into `[patch_len, out_h * out_w]`.
    fn im2col(&self, x: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (h, w, k, pad) = (self.in_height, self.in_width, self.kernel, self.padding);
        let mut row = 0;
        for ch in 0..self.in_channels {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    // valid output columns: 0 <= ox + kj - pad < w
                    let ox_lo = pad.saturating_sub(kj).min(ow);
                    let ox_hi = (w + pad).saturating_sub(kj).min(ow).max(ox_lo);
                    for oy in 0..oh {
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        let iy = (oy + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        out_row[..ox_lo].fill(T::zero());
                        out_row[ox_hi..].fill(T::zero());
                        if ox_hi > ox_lo {
                            let ix_lo = ox_lo + kj - pad;
                            out_row[ox_lo..ox_hi].copy_from_slice(&src[ix_lo..ix_lo + (ox_hi - ox_lo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters patch gradients back onto the input.
    fn col2im(&self, cols: &[T], dx: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (h, w, k, pad) = (self.in_height, self.in_width, self.kernel, self.padding);
        let mut row = 0;
        for ch in 0..self.in_channels {
            let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    let ox_lo = pad.saturating_sub(kj).min(ow);
                    let ox_hi = (w + pad).saturating_sub(kj).min(ow).max(ox_lo);
                    for oy in 0..oh {
                        let iy = (oy + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize || ox_hi == ox_lo {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let ix_lo = ox_lo + kj - pad;
                        for (d, s) in dst[ix_lo..ix_lo + (ox_hi - ox_lo)]
                            .iter_mut()
                            .zip(&src[oy * ow + ox_lo..oy * ow + ox_hi])
                        {
                            *d += *s;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn forward(&self, x: &[T], batch: usize, mut cols_out: Option<&mut Vec<T>>) -> Vec<T> {
        let spatial = self.out_height() * self.out_width();
        let out_len = self.out_channels * spatial;
        let patch = self.patch_len();
        let per = patch * spatial;
        let mut out = vec![T::zero(); batch * out_len];
        let mut scratch = Vec::new();
        match cols_out.as_deref_mut() {
            Some(buf) => {
                buf.clear();
                buf.resize(batch * per, T::zero());
            }
            None => scratch.resize(per, T::zero()),
        }
        for s in 0..batch {
            let cols: &mut [T] = match cols_out.as_deref_mut() {
                Some(buf) => &mut buf[s * per..(s + 1) * per],
                None => &mut scratch,
            };
            self.im2col(&x[s * self.in_len()..(s + 1) * self.in_len()], cols);
            let y = &mut out[s * out_len..(s + 1) * out_len];
            for (o, &b) in self.bias.values().iter().enumerate() {
                y[o * spatial..(o + 1) * spatial].fill(b);
            }
            matmul(self.weight.values(), false, cols, false, y, self.out_channels, patch, spatial, T::one());
        }
        out
    }

    fn backward(
        &self,
        dy: &[T],
        cols_all: &[T],
        batch: usize,
        dw: &mut [T],
        db: &mut [T],
        need_dx: bool,
    ) -> Option<Vec<T>> {
        let spatial = self.out_height() * self.out_width();
        let out_len = self.out_channels * spatial;
        let patch = self.patch_len();
        let mut dx = if need_dx {
            vec![T::zero(); batch * self.in_len()]
        } else {
            Vec::new()
        };
        let mut dcols = vec![T::zero(); if need_dx { patch * spatial } else { 0 }];
        for s in 0..batch {
            let g = &dy[s * out_len..(s + 1) * out_len];
            let cols = &cols_all[s * patch * spatial..(s + 1) * patch * spatial];
            matmul(g, false, cols, true, dw, self.out_channels, spatial, patch, T::one());
            for (o, b) in db.iter_mut().enumerate() {
                *b += g[o * spatial..(o + 1) * spatial].iter().copied().sum::<T>();
            }
            if need_dx {
                matmul(self.weight.values(), true, g, false, &mut dcols, patch, self.out_channels, spatial, T::zero());
                self.col2im(&dcols, &mut dx[s * self.in_len()..(s + 1) * self.in_len()]);
            }
        }
        need_dx.then_some(dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: Tensor::zeros(vec![outputs, inputs]),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    /// He-normal weights (std `sqrt(2 / inputs)`), zero bias.
    pub fn he<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(inputs, outputs);
        he_fill(layer.weight.values_mut(), inputs, rng);
        layer
    }

    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        let mut y = Vec::with_capacity(batch * self.outputs);
        for _ in 0..batch {
            y.extend_from_slice(self.bias.values());
        }
        matmul(x, false, self.weight.values(), true, &mut y, batch, self.inputs, self.outputs, T::one());
        y
    }

    /// Accumulates parameter gradients into `dw`/`db`; returns the input gradient if asked.
    pub fn backward(
        &self,
        dy: &[T],
        x: &[T],
        batch: usize,
        dw: &mut [T],
        db: &mut [T],
        need_dx: bool,
    ) -> Option<Vec<T>> {
        matmul(dy, true, x, false, dw, self.outputs, batch, self.inputs, T::one());
        for row in dy.chunks_exact(self.outputs) {
            for (b, &g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); batch * self.inputs];
            matmul(dy, false, self.weight.values(), false, &mut dx, batch, self.outputs, self.inputs, T::zero());
            dx
        })
    }
}

pub(crate) fn he_fill<T: Scalar, R: Rng>(values: &mut [T], fan_in: usize, rng: &mut R) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    for v in values {
        *v = T::from_f64(normal.sample(rng));
    }
}

pub(crate) fn relu_forward<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// `dy` masked by `out > 0`.
pub(crate) fn relu_backward<T: Scalar>(dy: &[T], out: &[T]) -> Vec<T> {
    dy.iter()
        .zip(out)
        .map(|(&g, &o)| if o > T::zero() { g } else { T::zero() })
        .collect()
}

/// 2×2 stride-2 max pooling; returns outputs and the flat argmax of each window
/// (first maximum wins on ties).
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch * channels * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..batch * channels {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Scalar>(dy: &[T], argmax: &[u32], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i as usize] += g;
    }
    dx
}

/// A layer together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    Relu { width: usize },
    MaxPool2 { channels: usize, in_height: usize, in_width: usize },
    Flatten { width: usize },
    Dense(Dense<T>),
}

/// Per-layer state retained by a training forward pass.
#[derive(Debug, Clone, Default)]
pub(crate) enum LayerCache<T> {
    #[default]
    None,
    Cols(Vec<T>),
    Output(Vec<T>),
    Argmax(Vec<u32>),
    Input(Vec<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn from_spec<R: Rng>(spec: &LayerSpec, rng: &mut R) -> Self {
        match *spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
                in_height,
                in_width,
            } => {
                let mut weight = Tensor::zeros(vec![out_channels, in_channels, kernel, kernel]);
                he_fill(weight.values_mut(), in_channels * kernel * kernel, rng);
                Layer::Conv2d(Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                    in_height,
                    in_width,
                    weight,
                    bias: Tensor::zeros(vec![out_channels]),
                })
            }
            LayerSpec::Relu { width } => Layer::Relu { width },
            LayerSpec::MaxPool2 {
                channels,
                in_height,
                in_width,
            } => Layer::MaxPool2 {
                channels,
                in_height,
                in_width,
            },
            LayerSpec::Flatten { width } => Layer::Flatten { width },
            LayerSpec::Dense { inputs, outputs } => Layer::Dense(Dense::he(inputs, outputs, rng)),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                padding: c.padding,
                in_height: c.in_height,
                in_width: c.in_width,
            },
            Layer::Relu { width } => LayerSpec::Relu { width: *width },
            Layer::MaxPool2 {
                channels,
                in_height,
                in_width,
            } => LayerSpec::MaxPool2 {
                channels: *channels,
                in_height: *in_height,
                in_width: *in_width,
            },
            Layer::Flatten { width } => LayerSpec::Flatten { width: *width },
            Layer::Dense(d) => LayerSpec::Dense {
                inputs: d.inputs,
                outputs: d.outputs,
            },
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }

    /// Runs the layer on a batch. With `cache`, records what backward needs.
    pub(crate) fn forward(&self, x: Vec<T>, batch: usize, cache: Option<&mut LayerCache<T>>) -> Vec<T> {
        match self {
            Layer::Conv2d(c) => {
                let mut cols = Vec::new();
                let out = c.forward(&x, batch, cache.is_some().then_some(&mut cols));
                if let Some(slot) = cache {
                    *slot = LayerCache::Cols(cols);
                }
                out
            }
            Layer::Relu { .. } => {
                let mut y = x;
                relu_forward(&mut y);
                if let Some(slot) = cache {
                    *slot = LayerCache::Output(y.clone());
                }
                y
            }
            Layer::MaxPool2 {
                channels,
                in_height,
                in_width,
            } => {
                let (y, arg) = maxpool_forward(&x, batch, *channels, *in_height, *in_width);
                if let Some(slot) = cache {
                    *slot = LayerCache::Argmax(arg);
                }
                y
            }
            Layer::Flatten { .. } => x,
            Layer::Dense(d) => {
                let y = d.forward(&x, batch);
                if let Some(slot) = cache {
                    *slot = LayerCache::Input(x);
                }
                y
            }
        }
    }

    /// Backpropagates `dy`; parameter gradients are accumulated into `grads`
    /// (`[weight, bias]` for layers that have parameters).
    pub(crate) fn backward(
        &self,
        dy: Vec<T>,
        batch: usize,
        cache: &LayerCache<T>,
        grads: &mut [Vec<T>],
        need_dx: bool,
    ) -> Option<Vec<T>> {
        match (self, cache) {
            (Layer::Conv2d(c), LayerCache::Cols(cols)) => {
                let (dw, db) = split_pair(grads);
                c.backward(&dy, cols, batch, dw, db, need_dx)
            }
            (Layer::Relu { .. }, LayerCache::Output(out)) => Some(relu_backward(&dy, out)),
            (
                Layer::MaxPool2 {
                    channels,
                    in_height,
                    in_width,
                },
                LayerCache::Argmax(arg),
            ) => Some(maxpool_backward(&dy, arg, batch * channels * in_height * in_width)),
            (Layer::Flatten { .. }, _) => Some(dy),
            (Layer::Dense(d), LayerCache::Input(x)) => {
                let (dw, db) = split_pair(grads);
                d.backward(&dy, x, batch, dw, db, need_dx)
            }
            _ => panic!("layer cache does not match layer kind"),
        }
    }
}

fn split_pair<T>(grads: &mut [Vec<T>]) -> (&mut [T], &mut [T]) {
    let (w, rest) = grads.split_first_mut().expect("weight gradient slot");
    (w.as_mut_slice(), rest[0].as_mut_slice())
}
