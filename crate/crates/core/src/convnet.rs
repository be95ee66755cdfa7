//! Small convolutional network with exact backpropagation.
//!
//! Architecture: for each entry of the channel plan a 3×3 convolution
//! (stride 1, zero "same" padding), ReLU and 2×2 max-pool; then global
//! average pooling, a linear layer with ReLU producing the E-dimensional
//! embedding, and a linear head producing C logits. Inputs are channel-first
//! `C×H×W` arrays. Everything is computed in `f64`.

use std::io::{Read, Write};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::ByteReader;
use crate::error::{Error, Result};
use crate::imagery_store::TileImage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub input_size: usize,
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    pub classes: usize,
}

impl ConvNetSpec {
    pub fn new(input_size: usize, channels: Vec<usize>, embedding_dim: usize, classes: usize) -> Self {
        ConvNetSpec {
            input_size,
            in_channels: 3,
            channels,
            embedding_dim,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.channels.len().min(30);
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 2^{} (one halving per block)",
                self.input_size,
                self.channels.len()
            )));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channel plan needs at least one non-zero entry".into()));
        }
        if self.embedding_dim == 0 || self.classes < 2 || self.in_channels == 0 {
            return Err(Error::Config(format!(
                "embedding_dim {} and classes {} must be > 0 and >= 2",
                self.embedding_dim, self.classes
            )));
        }
        Ok(())
    }

    /// Tensor names and shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (b, &c) in self.channels.iter().enumerate() {
            out.push((format!("conv{b}.weight"), vec![c, c_in, 3, 3]));
            out.push((format!("conv{b}.bias"), vec![c]));
            c_in = c;
        }
        out.push(("embed.weight".into(), vec![self.embedding_dim, c_in]));
        out.push(("embed.bias".into(), vec![self.embedding_dim]));
        out.push(("head.weight".into(), vec![self.classes, self.embedding_dim]));
        out.push(("head.bias".into(), vec![self.classes]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Network parameters (or gradients / velocities with the same layout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub spec: ConvNetSpec,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros(spec: &ConvNetSpec) -> Result<ParamSet> {
        spec.validate()?;
        let tensors = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| Tensor {
                data: vec![0.0; shape.iter().product()],
                name,
                shape,
            })
            .collect();
        Ok(ParamSet {
            spec: spec.clone(),
            tensors,
        })
    }

    /// Weights uniform in ±sqrt(6 / fan_in), biases zero.
    pub fn init<R: Rng>(spec: &ConvNetSpec, rng: &mut R) -> Result<ParamSet> {
        let mut p = ParamSet::zeros(spec)?;
        for t in p.tensors.iter_mut().filter(|t| t.name.ends_with(".weight")) {
            let fan_in: usize = t.shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut z = self.clone();
        z.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// All values in storage order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn flat_get(&self, mut i: usize) -> f64 {
        for t in &self.tensors {
            if i < t.data.len() {
                return t.data[i];
            }
            i -= t.data.len();
        }
        panic!("parameter index out of range")
    }

    pub fn flat_set(&mut self, mut i: usize, v: f64) {
        for t in &mut self.tensors {
            if i < t.data.len() {
                t.data[i] = v;
                return;
            }
            i -= t.data.len();
        }
        panic!("parameter index out of range")
    }

    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        let same = self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data.len() == b.data.len());
        if same {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets have different layouts".into()))
        }
    }

    /// `self += a · other`.
    pub fn add_scaled(&mut self, a: f64, other: &ParamSet) -> Result<()> {
        self.check_same_layout(other)?;
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            t.data.iter_mut().zip(&o.data).for_each(|(v, g)| *v += a * g);
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        self.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v *= a));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn data(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].data
    }
}

/// `teacher ← α·teacher + (1 − α)·student`, elementwise.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range(format!("EMA decay {alpha} outside [0, 1]")));
    }
    teacher.check_same_layout(student)?;
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (tv, sv) in t.data.iter_mut().zip(&s.data) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}

/// SGD with classical momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: ParamSet,
}

impl Sgd {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64) -> Result<Sgd> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("invalid SGD settings lr={lr} momentum={momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: params.zeros_like(),
        })
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        self.velocity.scale(self.momentum);
        self.velocity.add_scaled(1.0, grads)?;
        params.add_scaled(-self.lr, &self.velocity)
    }
}

/// Source pixel of output `(r, c)` for dihedral transform `id` on an
/// `n × n` grid. Ids 0..3 rotate by 0/90/180/270 degrees counter-clockwise;
/// 4..7 flip horizontally first.
fn dihedral_source(id: usize, n: usize, r: usize, c: usize) -> (usize, usize) {
    let (mut r, mut c) = (r, c);
    for _ in 0..id % 4 {
        (r, c) = (c, n - 1 - r);
    }
    if id >= 4 {
        c = n - 1 - c;
    }
    (r, c)
}

pub const TRANSFORMS: usize = 8;

/// Dihedral transform of a channel-first square array.
pub fn augment_chw(x: ArrayView3<f64>, id: usize) -> Result<Array3<f64>> {
    let (ch, h, w) = x.dim();
    if id >= TRANSFORMS {
        return Err(Error::Range(format!("transform id {id} not in 0..8")));
    }
    if h != w {
        return Err(Error::Shape(format!("augmentation needs a square image, got {h}x{w}")));
    }
    Ok(Array3::from_shape_fn((ch, h, w), |(k, r, c)| {
        let (sr, sc) = dihedral_source(id, h, r, c);
        x[[k, sr, sc]]
    }))
}

/// Dihedral transform of a tile image (pixel permutation only).
pub fn augment(img: &TileImage, id: usize) -> Result<TileImage> {
    let (h, w, ch) = img.pixels.dim();
    if id >= TRANSFORMS {
        return Err(Error::Range(format!("transform id {id} not in 0..8")));
    }
    if h != w {
        return Err(Error::Shape(format!("augmentation needs a square image, got {h}x{w}")));
    }
    Ok(TileImage {
        tile: img.tile,
        pixels: Array3::from_shape_fn((h, w, ch), |(r, c, k)| {
            let (sr, sc) = dihedral_source(id, h, r, c);
            img.pixels[[sr, sc, k]]
        }),
    })
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Row-wise `dL/dlogits` from `dL/dprobs` through the softmax Jacobian.
pub fn softmax_backward(probs: ArrayView2<f64>, dprobs: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for ((p, dp), mut o) in probs.rows().into_iter().zip(dprobs.rows()).zip(out.rows_mut()) {
        let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
        for j in 0..p.len() {
            o[j] = p[j] * (dp[j] - dot);
        }
    }
    out
}

/// 3×3 same-padded convolution of `input` (`c_in×h×w`) into `c_out×h×w`.
pub fn conv3x3_forward(input: &[f64], c_in: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let c_out = bias.len();
    let hw = h * w;
    let mut out = vec![0.0; c_out * hw];
    for co in 0..c_out {
        let o = &mut out[co * hw..(co + 1) * hw];
        o.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..c_in {
            let inp = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                for kx in 0..3 {
                    let wv = weight[((co * c_in + ci) * 3 + ky) * 3 + kx];
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let irow = &inp[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv3x3_forward`]: accumulates into `dweight` / `dbias`
/// and returns `dinput` when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    want_dinput: bool,
) -> Option<Vec<f64>> {
    let c_out = dbias.len();
    let hw = h * w;
    let mut din = if want_dinput { Some(vec![0.0; c_in * hw]) } else { None };
    for co in 0..c_out {
        let d = &dout[co * hw..(co + 1) * hw];
        dbias[co] += d.iter().sum::<f64>();
        for ci in 0..c_in {
            let inp = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                for kx in 0..3 {
                    let widx = ((co * c_in + ci) * 3 + ky) * 3 + kx;
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let drow = &d[y * w + x0..y * w + x1];
                        let irow = &inp[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                        acc += drow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dweight[widx] += acc;
                    if let Some(din) = din.as_mut() {
                        let wv = weight[widx];
                        let dslice = &mut din[ci * hw..(ci + 1) * hw];
                        for y in y0..y1 {
                            let iy = y + ky - 1;
                            for x in x0..x1 {
                                dslice[iy * w + x + kx - 1] += wv * d[y * w + x];
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// 2×2 max-pool; returns the pooled values and the flat source index of
/// each maximum (first maximum in row-major order on ties).
pub fn maxpool2_forward(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    let mut arg = vec![0u32; c * ho * wo];
    for k in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let mut best = k * h * w + (2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = k * h * w + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = (k * ho + y) * wo + x;
                out[o] = input[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(dout: &[f64], argmax: &[u32], input_len: usize) -> Vec<f64> {
    let mut din = vec![0.0; input_len];
    for (d, &a) in dout.iter().zip(argmax) {
        din[a as usize] += d;
    }
    din
}

fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

fn linear_backward(x: &[f64], weight: &[f64], dout: &[f64], dweight: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = vec![0.0; n_in];
    for (o, &d) in dout.iter().enumerate() {
        dbias[o] += d;
        let wrow = &weight[o * n_in..(o + 1) * n_in];
        let drow = &mut dweight[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += d * x[i];
            dx[i] += d * wrow[i];
        }
    }
    dx
}

#[derive(Debug, Clone)]
struct BlockCache {
    /// Convolution output before ReLU.
    pre: Vec<f64>,
    pooled: Vec<f64>,
    argmax: Vec<u32>,
}

#[derive(Debug, Clone)]
struct ImageCache {
    input: Vec<f64>,
    blocks: Vec<BlockCache>,
    gap: Vec<f64>,
    embed_pre: Vec<f64>,
    embedding: Vec<f64>,
    logits: Vec<f64>,
}

/// Outputs of a batch forward pass plus what backward needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub embeddings: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    caches: Vec<ImageCache>,
}

fn forward_one(params: &ParamSet, img: ArrayView3<f64>) -> ImageCache {
    let spec = &params.spec;
    let input: Vec<f64> = img.iter().copied().collect();
    let mut h = spec.input_size;
    let mut c_in = spec.in_channels;
    let mut blocks: Vec<BlockCache> = Vec::with_capacity(spec.channels.len());
    for (b, &c) in spec.channels.iter().enumerate() {
        let x = if b == 0 { &input } else { &blocks[b - 1].pooled };
        let pre = conv3x3_forward(x, c_in, h, h, params.data(2 * b), params.data(2 * b + 1));
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let (pooled, argmax) = maxpool2_forward(&act, c, h, h);
        blocks.push(BlockCache { pre, pooled, argmax });
        c_in = c;
        h /= 2;
    }
    let last = &blocks.last().expect("at least one block").pooled;
    let area = (h * h) as f64;
    let gap: Vec<f64> = last.chunks(h * h).map(|ch| ch.iter().sum::<f64>() / area).collect();
    let nb = 2 * spec.channels.len();
    let embed_pre = linear_forward(&gap, params.data(nb), params.data(nb + 1));
    let embedding: Vec<f64> = embed_pre.iter().map(|v| v.max(0.0)).collect();
    let logits = linear_forward(&embedding, params.data(nb + 2), params.data(nb + 3));
    ImageCache {
        input,
        blocks,
        gap,
        embed_pre,
        embedding,
        logits,
    }
}

fn check_batch(spec: &ConvNetSpec, batch: &[Array3<f64>]) -> Result<()> {
    let want = (spec.in_channels, spec.input_size, spec.input_size);
    match batch.iter().position(|x| x.dim() != want) {
        Some(i) => Err(Error::Shape(format!(
            "batch item {i} has shape {:?}, network expects {want:?}",
            batch[i].dim()
        ))),
        None => Ok(()),
    }
}

pub fn forward(params: &ParamSet, batch: &[Array3<f64>]) -> Result<Forward> {
    let spec = &params.spec;
    check_batch(spec, batch)?;
    let caches: Vec<ImageCache> = batch.par_iter().map(|x| forward_one(params, x.view())).collect();
    let n = caches.len();
    let (e, c) = (spec.embedding_dim, spec.classes);
    let mut embeddings = Array2::zeros((n, e));
    let mut logits = Array2::zeros((n, c));
    let mut probs = Array2::zeros((n, c));
    for (i, cache) in caches.iter().enumerate() {
        embeddings.row_mut(i).iter_mut().zip(&cache.embedding).for_each(|(d, s)| *d = *s);
        logits.row_mut(i).iter_mut().zip(&cache.logits).for_each(|(d, s)| *d = *s);
        probs.row_mut(i).iter_mut().zip(softmax_row(&cache.logits)).for_each(|(d, s)| *d = s);
    }
    Ok(Forward {
        embeddings,
        logits,
        probs,
        caches,
    })
}

fn backward_one(params: &ParamSet, cache: &ImageCache, dlogits: &[f64], dembed: Option<&[f64]>) -> ParamSet {
    let spec = &params.spec;
    let mut g = params.zeros_like();
    let nb = 2 * spec.channels.len();
    let mut d_embedding = {
        let (dw, rest) = g.tensors[nb + 2..].split_at_mut(1);
        linear_backward(&cache.embedding, params.data(nb + 2), dlogits, &mut dw[0].data, &mut rest[0].data)
    };
    if let Some(de) = dembed {
        d_embedding.iter_mut().zip(de).for_each(|(a, b)| *a += b);
    }
    let d_embed_pre: Vec<f64> = d_embedding
        .iter()
        .zip(&cache.embed_pre)
        .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
        .collect();
    let d_gap = {
        let (dw, rest) = g.tensors[nb..].split_at_mut(1);
        linear_backward(&cache.gap, params.data(nb), &d_embed_pre, &mut dw[0].data, &mut rest[0].data)
    };
    let mut h = spec.input_size >> spec.channels.len();
    let area = (h * h) as f64;
    let mut d_pooled: Vec<f64> = d_gap.iter().flat_map(|d| std::iter::repeat_n(d / area, h * h)).collect();
    for b in (0..spec.channels.len()).rev() {
        let blk = &cache.blocks[b];
        h *= 2;
        let c_in = if b == 0 { spec.in_channels } else { spec.channels[b - 1] };
        let mut d_pre = maxpool2_backward(&d_pooled, &blk.argmax, blk.pre.len());
        d_pre.iter_mut().zip(&blk.pre).for_each(|(d, p)| {
            if *p <= 0.0 {
                *d = 0.0
            }
        });
        let x = if b == 0 { &cache.input } else { &cache.blocks[b - 1].pooled };
        let (dw, rest) = g.tensors[2 * b..].split_at_mut(1);
        let din = conv3x3_backward(x, c_in, h, h, params.data(2 * b), &d_pre, &mut dw[0].data, &mut rest[0].data, b > 0);
        if let Some(din) = din {
            d_pooled = din;
        }
    }
    g
}

/// Parameter gradients of a scalar loss given `dL/dlogits` (N×C) and
/// optionally `dL/dembeddings` (N×E) for the batch cached in `fwd`.
pub fn backward(
    params: &ParamSet,
    fwd: &Forward,
    dlogits: ArrayView2<f64>,
    dembed: Option<ArrayView2<f64>>,
) -> Result<ParamSet> {
    let n = fwd.caches.len();
    if dlogits.dim() != (n, params.spec.classes) {
        return Err(Error::Shape(format!("dlogits {:?} vs batch {n}×{}", dlogits.dim(), params.spec.classes)));
    }
    if let Some(de) = dembed {
        if de.dim() != (n, params.spec.embedding_dim) {
            return Err(Error::Shape(format!("dembed {:?} vs batch {n}×{}", de.dim(), params.spec.embedding_dim)));
        }
    }
    let per_image: Vec<ParamSet> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dl: Vec<f64> = dlogits.row(i).to_vec();
            let de: Option<Vec<f64>> = dembed.map(|d| d.row(i).to_vec());
            backward_one(params, &fwd.caches[i], &dl, de.as_deref())
        })
        .collect();
    let mut total = params.zeros_like();
    for g in &per_image {
        total.add_scaled(1.0, g)?;
    }
    Ok(total)
}

/// Embeddings (N×E) and class probabilities (N×C) in chunks of `batch`.
pub fn infer(params: &ParamSet, inputs: &[Array3<f64>], batch: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut emb = Vec::new();
    let mut probs = Vec::new();
    for chunk in inputs.chunks(batch.max(1)) {
        let f = forward(params, chunk)?;
        emb.push(f.embeddings);
        probs.push(f.probs);
    }
    let cat = |parts: Vec<Array2<f64>>, width: usize| -> Result<Array2<f64>> {
        if parts.is_empty() {
            return Ok(Array2::zeros((0, width)));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    };
    Ok((cat(emb, params.spec.embedding_dim)?, cat(probs, params.spec.classes)?))
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"READNET1";

/// Writes spec header and named tensors as little-endian f32.
pub fn save_checkpoint<W: Write>(mut out: W, params: &ParamSet) -> Result<()> {
    let s = &params.spec;
    let mut buf = CHECKPOINT_MAGIC.to_vec();
    let u32s = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
    u32s(&mut buf, s.input_size);
    u32s(&mut buf, s.in_channels);
    u32s(&mut buf, s.channels.len());
    for &c in &s.channels {
        u32s(&mut buf, c);
    }
    u32s(&mut buf, s.embedding_dim);
    u32s(&mut buf, s.classes);
    u32s(&mut buf, params.tensors.len());
    for t in &params.tensors {
        u32s(&mut buf, t.name.len());
        buf.extend_from_slice(t.name.as_bytes());
        u32s(&mut buf, t.shape.len());
        for &d in &t.shape {
            u32s(&mut buf, d);
        }
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::Format(e.to_string()))
}

pub fn load_checkpoint<R: Read>(mut input: R) -> Result<ParamSet> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    let mut r = ByteReader::new(&buf, "network checkpoint");
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let input_size = r.usize32()?;
    let in_channels = r.usize32()?;
    let nblocks = r.usize32()?;
    if nblocks > 16 {
        return Err(Error::Format(format!("implausible block count {nblocks}")));
    }
    let channels = (0..nblocks).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
    let spec = ConvNetSpec {
        input_size,
        in_channels,
        channels,
        embedding_dim: r.usize32()?,
        classes: r.usize32()?,
    };
    let mut params = ParamSet::zeros(&spec).map_err(|e| Error::Format(format!("checkpoint spec: {e}")))?;
    let count = r.usize32()?;
    if count != params.tensors.len() {
        return Err(Error::Format(format!("checkpoint has {count} tensors, spec needs {}", params.tensors.len())));
    }
    for t in params.tensors.iter_mut() {
        let len = r.usize32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let ndim = r.usize32()?;
        let shape = (0..ndim).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
        if name != t.name || shape != t.shape {
            return Err(Error::Format(format!(
                "checkpoint tensor {name} {shape:?} does not match expected {} {:?}",
                t.name, t.shape
            )));
        }
        for v in t.data.iter_mut() {
            *v = r.f32()? as f64;
        }
    }
    r.finish()?;
    Ok(params)
}
