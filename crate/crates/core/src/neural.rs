//! Spectrogram CNN on a small reverse-mode engine: layers, the VGG-M style
//! identification network with a temporal average pool, classification and
//! Siamese contrastive training, hard-negative pair sampling and
//! variable-length inference.
//!
//! Activations are `[N, C, H, W]` arrays of `f64`. The engine is sequential:
//! a recorded forward pass keeps what each layer needs for its backward pass.
//! Convolutions run per sample in parallel and reduce parameter gradients in
//! sample order, so results do not depend on the thread count.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::audio::{Spectrogram, CROP_FRAMES, FREQ_BINS};
use crate::binio;
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const EMBED_DIM: usize = 1024;
pub const CONTRASTIVE_MARGIN: f64 = 1.0;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Fraction of cross-speaker pairs treated as hard negatives.
pub const HARD_FRACTION: f64 = 0.1;

/// Parameter tensor with an optional gradient of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::InvalidInput(format!(
                "tensor shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        Ok(Self { shape, values, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![0.0; n], grad: None }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn accumulate(&mut self, g: &[f64]) {
        let grad = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    MaxPool,
    AvgPool,
    FullyConnected,
    BatchNorm,
    Relu,
    Softmax,
}

impl LayerKind {
    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Result<Self> {
        use LayerKind::*;
        [Conv, MaxPool, AvgPool, FullyConnected, BatchNorm, Relu, Softmax]
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown layer tag {t}")))
    }
}

/// Geometry of one layer. A zero support dimension on a pool means the whole
/// input extent along that axis, which is how the temporal average pool adapts
/// to the input length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub support: (usize, usize),
    pub filter_count: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl LayerSpec {
    pub fn conv(support: (usize, usize), filters: usize, stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { kind: LayerKind::Conv, support, filter_count: filters, stride, padding }
    }

    pub fn fully_connected(support: (usize, usize), filters: usize) -> Self {
        Self { kind: LayerKind::FullyConnected, support, filter_count: filters, stride: (1, 1), padding: (0, 0) }
    }

    pub fn max_pool(support: (usize, usize), stride: (usize, usize)) -> Self {
        Self { kind: LayerKind::MaxPool, support, filter_count: 0, stride, padding: (0, 0) }
    }

    pub fn avg_pool(support: (usize, usize), stride: (usize, usize)) -> Self {
        Self { kind: LayerKind::AvgPool, support, filter_count: 0, stride, padding: (0, 0) }
    }

    pub fn simple(kind: LayerKind) -> Self {
        Self { kind, support: (1, 1), filter_count: 0, stride: (1, 1), padding: (0, 0) }
    }

    fn has_weights(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::FullyConnected)
    }

    /// Output `(channels, height, width)` for an input of the given size.
    pub fn output_dims(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let out = |n: usize, k: usize, st: usize, p: usize| -> Option<usize> {
            let k = if k == 0 { n } else { k };
            (n + 2 * p >= k && k > 0).then(|| (n + 2 * p - k) / st + 1)
        };
        match self.kind {
            LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Softmax => Ok((c, h, w)),
            _ => {
                let ho = out(h, self.support.0, self.stride.0, self.padding.0);
                let wo = out(w, self.support.1, self.stride.1, self.padding.1);
                match (ho, wo) {
                    (Some(ho), Some(wo)) => {
                        let co = if self.has_weights() { self.filter_count } else { c };
                        Ok((co, ho, wo))
                    }
                    _ => Err(Error::InvalidInput(format!(
                        "input {h}x{w} is smaller than the {:?} support {:?}",
                        self.kind, self.support
                    ))),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    /// Weights `[O, C, kh, kw]` and bias `[O]`, or batchnorm scale and shift.
    pub params: Vec<Tensor>,
    /// Batchnorm running mean and variance.
    pub running: Option<(Vec<f64>, Vec<f64>)>,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batchnorm; running statistics are updated.
    Train,
    /// Running statistics in batchnorm; a pure function of the input.
    Eval,
}

#[derive(Clone, Debug)]
enum Saved {
    Input(Array4<f64>),
    MaxPool { dims: (usize, usize, usize, usize), argmax: Vec<usize> },
    AvgPool { dims: (usize, usize, usize, usize) },
    BatchNorm { xhat: Array4<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Output(Array4<f64>),
}

#[derive(Clone, Debug)]
struct Tape {
    start: usize,
    saved: Vec<Saved>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub in_channels: usize,
    /// Free-form `key=value` lines stored with checkpoints.
    pub config_text: String,
    tape: Option<Tape>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(spec: &LayerSpec, weight: &Tensor, dims: (usize, usize, usize, usize)) -> Result<Self> {
        let (_, c, h, w) = dims;
        let (o, wc) = (weight.shape[0], weight.shape[1]);
        if wc != c {
            return Err(Error::ModelMismatch(format!("layer expects {wc} input channels, got {c}")));
        }
        let (_, ho, wo) = spec.output_dims(c, h, w)?;
        Ok(Self {
            c,
            h,
            w,
            o,
            kh: spec.support.0,
            kw: spec.support.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
            ho,
            wo,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.patch() * p];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let mut x = vec![0.0; g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, s) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn standard(x: Array4<f64>) -> Array4<f64> {
    if x.is_standard_layout() {
        x
    } else {
        x.as_standard_layout().into_owned()
    }
}

fn conv_forward(x: &Array4<f64>, spec: &LayerSpec, params: &[Tensor]) -> Result<Array4<f64>> {
    let g = ConvGeom::new(spec, &params[0], x.dim())?;
    let n = x.dim().0;
    let wmat = ArrayView2::from_shape((g.o, g.patch()), &params[0].values).expect("weight shape");
    let bias = &params[1].values;
    let xs = x.as_slice().expect("standard layout");
    let per = g.c * g.h * g.w;
    let outs: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cols = im2col(&xs[i * per..(i + 1) * per], &g);
            let cols = ArrayView2::from_shape((g.patch(), g.positions()), &cols).expect("cols");
            let mut out = Array2::<f64>::zeros((g.o, g.positions()));
            general_mat_mul(1.0, &wmat, &cols, 0.0, &mut out);
            for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(bias) {
                row += *b;
            }
            out.into_raw_vec_and_offset().0
        })
        .collect();
    Ok(Array4::from_shape_vec((n, g.o, g.ho, g.wo), outs.concat()).expect("conv output"))
}

/// Returns `(dW, db, dX)`; `dX` only when requested.
fn conv_backward(
    x: &Array4<f64>,
    dy: &Array4<f64>,
    spec: &LayerSpec,
    params: &[Tensor],
    need_param: bool,
    need_input: bool,
) -> (Option<(Vec<f64>, Vec<f64>)>, Option<Array4<f64>>) {
    let g = ConvGeom::new(spec, &params[0], x.dim()).expect("recorded geometry");
    let n = x.dim().0;
    let wmat = ArrayView2::from_shape((g.o, g.patch()), &params[0].values).expect("weight shape");
    let xs = x.as_slice().expect("standard layout");
    let dys = dy.as_slice().expect("standard layout");
    let per_x = g.c * g.h * g.w;
    let per_y = g.o * g.positions();
    let parts: Vec<(Option<(Array2<f64>, Vec<f64>)>, Option<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dyi = ArrayView2::from_shape((g.o, g.positions()), &dys[i * per_y..(i + 1) * per_y]).expect("dy");
            let dparam = need_param.then(|| {
                let cols = im2col(&xs[i * per_x..(i + 1) * per_x], &g);
                let cols = ArrayView2::from_shape((g.patch(), g.positions()), &cols).expect("cols");
                let mut dw = Array2::<f64>::zeros((g.o, g.patch()));
                general_mat_mul(1.0, &dyi, &cols.t(), 0.0, &mut dw);
                let db: Vec<f64> = dyi.axis_iter(Axis(0)).map(|r| r.sum()).collect();
                (dw, db)
            });
            let dx = need_input.then(|| {
                let mut dcols = Array2::<f64>::zeros((g.patch(), g.positions()));
                general_mat_mul(1.0, &wmat.t(), &dyi, 0.0, &mut dcols);
                col2im(dcols.as_slice().expect("dcols"), &g)
            });
            (dparam, dx)
        })
        .collect();
    let mut dw = need_param.then(|| Array2::<f64>::zeros((g.o, g.patch())));
    let mut db = need_param.then(|| vec![0.0; g.o]);
    let mut dx_all = Vec::with_capacity(if need_input { n * per_x } else { 0 });
    for (dparam, dx) in parts {
        if let (Some((w_i, b_i)), Some(dw), Some(db)) = (dparam, dw.as_mut(), db.as_mut()) {
            *dw += &w_i;
            for (a, b) in db.iter_mut().zip(b_i) {
                *a += b;
            }
        }
        if let Some(dx) = dx {
            dx_all.extend(dx);
        }
    }
    let dparams = dw.zip(db).map(|(w, b)| (w.into_raw_vec_and_offset().0, b));
    let dx = need_input.then(|| Array4::from_shape_vec(x.dim(), dx_all).expect("dx"));
    (dparams, dx)
}

fn pool_window(spec: &LayerSpec, h: usize, w: usize) -> (usize, usize) {
    let kh = if spec.support.0 == 0 { h } else { spec.support.0 };
    let kw = if spec.support.1 == 0 { w } else { spec.support.1 };
    (kh, kw)
}

fn pool_forward(x: &Array4<f64>, spec: &LayerSpec, max: bool) -> Result<(Array4<f64>, Vec<usize>)> {
    let (n, c, h, w) = x.dim();
    let (_, ho, wo) = spec.output_dims(c, h, w)?;
    let (kh, kw) = pool_window(spec, h, w);
    let xs = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(if max { out.capacity() } else { 0 });
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let (y0, x0) = (oy * spec.stride.0, ox * spec.stride.1);
                if max {
                    let mut best = base + y0 * w + x0;
                    for yy in y0..y0 + kh {
                        for xx in x0..x0 + kw {
                            let idx = base + yy * w + xx;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                } else {
                    let mut sum = 0.0;
                    for yy in y0..y0 + kh {
                        sum += xs[base + yy * w + x0..base + yy * w + x0 + kw].iter().sum::<f64>();
                    }
                    out.push(sum / (kh * kw) as f64);
                }
            }
        }
    }
    Ok((Array4::from_shape_vec((n, c, ho, wo), out).expect("pool output"), argmax))
}

fn avg_pool_backward(dy: &Array4<f64>, spec: &LayerSpec, dims: (usize, usize, usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = dims;
    let (_, _, ho, wo) = dy.dim();
    let (kh, kw) = pool_window(spec, h, w);
    let scale = 1.0 / (kh * kw) as f64;
    let dys = dy.as_slice().expect("standard layout");
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dys[(plane * ho + oy) * wo + ox] * scale;
                let (y0, x0) = (oy * spec.stride.0, ox * spec.stride.1);
                for yy in y0..y0 + kh {
                    for v in &mut dx[base + yy * w + x0..base + yy * w + x0 + kw] {
                        *v += g;
                    }
                }
            }
        }
    }
    Array4::from_shape_vec(dims, dx).expect("dx")
}

fn max_pool_backward(dy: &Array4<f64>, dims: (usize, usize, usize, usize), argmax: &[usize]) -> Array4<f64> {
    let (n, c, h, w) = dims;
    let mut dx = vec![0.0; n * c * h * w];
    for (g, &idx) in dy.iter().zip(argmax) {
        dx[idx] += g;
    }
    Array4::from_shape_vec(dims, dx).expect("dx")
}

/// Per-channel `(mean, biased variance)` over batch and space.
fn channel_stats(x: &Array4<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let m = (n * h * w) as f64;
    let plane = h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for i in 0..n {
            sum += xs[(i * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
        mean[ch] = sum / m;
        let mut sq = 0.0;
        for i in 0..n {
            sq += xs[(i * c + ch) * plane..][..plane]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
        var[ch] = sq / m;
    }
    (mean, var)
}

fn for_each_channel(x: &mut Array4<f64>, mut f: impl FnMut(usize, &mut [f64])) {
    let (n, c, h, w) = x.dim();
    let plane = h * w;
    let xs = x.as_slice_mut().expect("standard layout");
    for i in 0..n {
        for ch in 0..c {
            f(ch, &mut xs[(i * c + ch) * plane..][..plane]);
        }
    }
}

fn softmax_channels(x: &Array4<f64>) -> Array4<f64> {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(1)) {
        let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    out
}

/// Numerically stable softmax of one score vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

struct LayerOut {
    out: Array4<f64>,
    saved: Option<Saved>,
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

fn layer_forward(layer: &Layer, x: Array4<f64>, mode: Mode, record: bool) -> Result<LayerOut> {
    let x = standard(x);
    let spec = &layer.spec;
    let plain = |out, saved| Ok(LayerOut { out, saved, batch_stats: None });
    match spec.kind {
        LayerKind::Conv | LayerKind::FullyConnected => {
            let out = conv_forward(&x, spec, &layer.params)?;
            plain(out, record.then(|| Saved::Input(x)))
        }
        LayerKind::MaxPool => {
            let dims = x.dim();
            let (out, argmax) = pool_forward(&x, spec, true)?;
            plain(out, record.then(|| Saved::MaxPool { dims, argmax }))
        }
        LayerKind::AvgPool => {
            let dims = x.dim();
            let (out, _) = pool_forward(&x, spec, false)?;
            plain(out, record.then(|| Saved::AvgPool { dims }))
        }
        LayerKind::Relu => {
            let out = x.mapv(|v| v.max(0.0));
            let saved = record.then(|| Saved::Output(out.clone()));
            plain(out, saved)
        }
        LayerKind::Softmax => {
            let out = softmax_channels(&x);
            let saved = record.then(|| Saved::Output(out.clone()));
            plain(out, saved)
        }
        LayerKind::BatchNorm => {
            let (n, c, h, w) = x.dim();
            let (gamma, beta) = (&layer.params[0].values, &layer.params[1].values);
            if gamma.len() != c {
                return Err(Error::ModelMismatch(format!(
                    "batchnorm {} has {} channels, input has {c}",
                    layer.name,
                    gamma.len()
                )));
            }
            let (mean, var, batch_stats) = match mode {
                Mode::Train => {
                    if n * h * w < 2 {
                        return Err(Error::InvalidInput(format!(
                            "batchnorm {} needs at least two values per channel in training",
                            layer.name
                        )));
                    }
                    let (m, v) = channel_stats(&x);
                    (m.clone(), v.clone(), Some((m, v)))
                }
                Mode::Eval => {
                    let (m, v) = layer.running.clone().expect("batchnorm running stats");
                    (m, v, None)
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = x;
            for_each_channel(&mut xhat, |ch, p| {
                for v in p.iter_mut() {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
            });
            let mut out = xhat.clone();
            for_each_channel(&mut out, |ch, p| {
                for v in p.iter_mut() {
                    *v = gamma[ch] * *v + beta[ch];
                }
            });
            Ok(LayerOut {
                out,
                saved: record.then(|| Saved::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats: mode == Mode::Train,
                }),
                batch_stats,
            })
        }
    }
}

/// Returns parameter gradients (when requested) and the input gradient (when
/// requested).
fn layer_backward(
    layer: &Layer,
    saved: &Saved,
    dy: Array4<f64>,
    need_param: bool,
    need_input: bool,
) -> (Option<Vec<Vec<f64>>>, Option<Array4<f64>>) {
    let dy = standard(dy);
    match (layer.spec.kind, saved) {
        (LayerKind::Conv | LayerKind::FullyConnected, Saved::Input(x)) => {
            let (dp, dx) = conv_backward(x, &dy, &layer.spec, &layer.params, need_param, need_input);
            (dp.map(|(w, b)| vec![w, b]), dx)
        }
        (LayerKind::MaxPool, Saved::MaxPool { dims, argmax }) => {
            (None, need_input.then(|| max_pool_backward(&dy, *dims, argmax)))
        }
        (LayerKind::AvgPool, Saved::AvgPool { dims }) => {
            (None, need_input.then(|| avg_pool_backward(&dy, &layer.spec, *dims)))
        }
        (LayerKind::Relu, Saved::Output(out)) => {
            let mut dx = dy;
            dx.zip_mut_with(out, |g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
            (None, need_input.then_some(dx))
        }
        (LayerKind::Softmax, Saved::Output(p)) => {
            let mut dx = dy;
            for (mut g, p) in dx.lanes_mut(Axis(1)).into_iter().zip(p.lanes(Axis(1))) {
                let dot: f64 = g.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
                g.zip_mut_with(&p, |gi, &pi| *gi = pi * (*gi - dot));
            }
            (None, need_input.then_some(dx))
        }
        (LayerKind::BatchNorm, Saved::BatchNorm { xhat, inv_std, batch_stats }) => {
            let (n, c, h, w) = dy.dim();
            let m = (n * h * w) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            {
                let plane = h * w;
                let gs = dy.as_slice().expect("standard layout");
                let xs = xhat.as_slice().expect("standard layout");
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for k in off..off + plane {
                            dgamma[ch] += gs[k] * xs[k];
                            dbeta[ch] += gs[k];
                        }
                    }
                }
            }
            let gamma = &layer.params[0].values;
            let dx = need_input.then(|| {
                let mut dx = dy.clone();
                if *batch_stats {
                    let xs = xhat.as_slice().expect("standard layout").to_vec();
                    let plane = h * w;
                    let mut k0 = 0;
                    for_each_channel(&mut dx, |ch, p| {
                        let scale = gamma[ch] * inv_std[ch] / m;
                        for (j, g) in p.iter_mut().enumerate() {
                            *g = scale * (m * *g - dbeta[ch] - xs[k0 + j] * dgamma[ch]);
                        }
                        k0 += plane;
                    });
                } else {
                    for_each_channel(&mut dx, |ch, p| {
                        p.iter_mut().for_each(|g| *g *= gamma[ch] * inv_std[ch]);
                    });
                }
                dx
            });
            (need_param.then(|| vec![dgamma, dbeta]), dx)
        }
        _ => unreachable!("tape entry does not match layer kind"),
    }
}

fn init_layer(name: &str, spec: LayerSpec, in_c: usize, rng: &mut Rng) -> Layer {
    let mut params = Vec::new();
    let mut running = None;
    if spec.has_weights() {
        let (kh, kw) = spec.support;
        let fan_in = in_c * kh * kw;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let shape = vec![spec.filter_count, in_c, kh, kw];
        let n = shape.iter().product();
        let values = (0..n).map(|_| normal.sample(rng)).collect();
        params.push(Tensor::new(shape, values).expect("shape"));
        params.push(Tensor::zeros(vec![spec.filter_count]));
    } else if spec.kind == LayerKind::BatchNorm {
        params.push(Tensor::new(vec![in_c], vec![1.0; in_c]).expect("shape"));
        params.push(Tensor::zeros(vec![in_c]));
        running = Some((vec![0.0; in_c], vec![1.0; in_c]));
    }
    Layer { name: name.to_string(), spec, params, running, frozen: false }
}

impl Network {
    /// Builds a sequential network; weights use He initialization.
    pub fn sequential(in_channels: usize, defs: &[(&str, LayerSpec)], seed: u64) -> Result<Self> {
        let mut c = in_channels;
        let mut layers = Vec::with_capacity(defs.len());
        for (i, (name, spec)) in defs.iter().enumerate() {
            if spec.stride.0 == 0 || spec.stride.1 == 0 {
                return Err(Error::InvalidInput(format!("layer {name} has a zero stride")));
            }
            if spec.has_weights() && (spec.support.0 == 0 || spec.support.1 == 0 || spec.filter_count == 0) {
                return Err(Error::InvalidInput(format!("layer {name} has an empty support or no filters")));
            }
            let mut r = rng::derive(seed, &[i as u64]);
            layers.push(init_layer(name, *spec, c, &mut r));
            if spec.has_weights() {
                c = spec.filter_count;
            }
        }
        Ok(Self { layers, in_channels, config_text: String::new(), tape: None })
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn output_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find(|l| l.spec.has_weights())
            .map_or(self.in_channels, |l| l.spec.filter_count)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(Tensor::len).sum()
    }

    /// `(layer name, (height, width))` after every layer.
    pub fn shape_trace(&self, h: usize, w: usize) -> Result<Vec<(String, (usize, usize))>> {
        let (mut c, mut h, mut w) = (self.in_channels, h, w);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            (c, h, w) = l.spec.output_dims(c, h, w)?;
            out.push((l.name.clone(), (h, w)));
        }
        Ok(out)
    }

    /// Smallest input width accepted for the given input height.
    pub fn min_input_width(&self, h: usize) -> Option<usize> {
        (1..=1 << 16).find(|&w| self.shape_trace(h, w).is_ok())
    }

    /// Support `n` of the temporal average pool for an input width.
    pub fn apool_support(&self, h: usize, w: usize) -> Result<Option<usize>> {
        let (mut c, mut hh, mut ww) = (self.in_channels, h, w);
        for l in &self.layers {
            if l.spec.kind == LayerKind::AvgPool && l.spec.support.1 == 0 {
                return Ok(Some(ww));
            }
            (c, hh, ww) = l.spec.output_dims(c, hh, ww)?;
        }
        Ok(None)
    }

    pub fn set_frozen(&mut self, range: Range<usize>, frozen: bool) {
        for l in &mut self.layers[range] {
            l.frozen = frozen;
        }
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            for p in &mut l.params {
                p.grad = (!l.frozen).then(|| vec![0.0; p.len()]);
            }
        }
    }

    fn check_input(&self, x: &Array4<f64>, start: usize) -> Result<()> {
        if start == 0 && x.dim().1 != self.in_channels {
            return Err(Error::ModelMismatch(format!(
                "network expects {} input channels, got {}",
                self.in_channels,
                x.dim().1
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite input".into()));
        }
        Ok(())
    }

    fn run(&mut self, range: Range<usize>, x: Array4<f64>, mode: Mode, record: bool) -> Result<Array4<f64>> {
        self.check_input(&x, range.start)?;
        let start = range.start;
        let mut saved = Vec::with_capacity(range.len());
        let mut a = x;
        for i in range {
            let layer = &self.layers[i];
            let r = layer_forward(layer, a, mode, record)?;
            if let (Some((m, v)), Some((rm, rv))) = (r.batch_stats, self.layers[i].running.as_mut()) {
                let (n, _, h, w) = r.out.dim();
                let count = (n * h * w) as f64;
                for k in 0..m.len() {
                    rm[k] = (1.0 - BN_MOMENTUM) * rm[k] + BN_MOMENTUM * m[k];
                    rv[k] = (1.0 - BN_MOMENTUM) * rv[k] + BN_MOMENTUM * v[k] * count / (count - 1.0);
                }
            }
            if let Some(s) = r.saved {
                saved.push(s);
            }
            a = r.out;
        }
        self.tape = record.then_some(Tape { start, saved });
        Ok(a)
    }

    /// Recorded forward pass over all layers.
    pub fn forward(&mut self, x: Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        self.forward_range(0..self.layers.len(), x, mode)
    }

    /// Recorded forward pass over a contiguous block of layers.
    pub fn forward_range(&mut self, range: Range<usize>, x: Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        self.run(range, x, mode, true)
    }

    /// Inference-mode pass with no recording; safe to share across threads.
    pub fn predict(&self, x: Array4<f64>) -> Result<Array4<f64>> {
        self.predict_range(0..self.layers.len(), x)
    }

    pub fn predict_range(&self, range: Range<usize>, x: Array4<f64>) -> Result<Array4<f64>> {
        self.check_input(&x, range.start)?;
        let mut a = x;
        for i in range {
            a = layer_forward(&self.layers[i], a, Mode::Eval, false)?.out;
        }
        Ok(a)
    }

    /// Accumulates gradients of unfrozen parameters from the recorded pass.
    pub fn backward(&mut self, grad_out: Array4<f64>) -> Result<()> {
        self.backward_impl(grad_out, false).map(|_| ())
    }

    /// Like [`Network::backward`] and also returns the input gradient.
    pub fn backward_input(&mut self, grad_out: Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.backward_impl(grad_out, true)?.expect("input gradient"))
    }

    fn backward_impl(&mut self, grad_out: Array4<f64>, want_input: bool) -> Result<Option<Array4<f64>>> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::InvalidState("backward called without a recorded forward pass".into()))?;
        let end = tape.start + tape.saved.len();
        let mut g = grad_out;
        for (k, saved) in tape.saved.iter().enumerate().rev() {
            let i = tape.start + k;
            let layer = &self.layers[i];
            let need_param = !layer.frozen && !layer.params.is_empty();
            let need_input = want_input || self.layers[tape.start..i].iter().any(|l| !l.frozen && !l.params.is_empty());
            let (dparams, dx) = layer_backward(layer, saved, g, need_param, need_input);
            if let Some(dp) = dparams {
                for (p, d) in self.layers[i].params.iter_mut().zip(dp) {
                    p.accumulate(&d);
                }
            }
            match dx {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
            debug_assert!(i < end);
        }
        Ok(Some(g))
    }

    /// Visits every parameter tensor with its layer's frozen flag.
    fn params_mut(&mut self) -> impl Iterator<Item = (bool, LayerKind, &mut Tensor)> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let (frozen, kind) = (l.frozen, l.spec.kind);
                l.params.iter_mut().map(move |p| (frozen, kind, p))
            })
    }
}

// ---------------------------------------------------------------------------
// Architecture

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub n_classes: usize,
    pub in_height: usize,
    pub conv_filters: [usize; 5],
    pub fc6_dim: usize,
    pub fc7_dim: usize,
    pub seed: u64,
}

impl CnnConfig {
    /// Full-size network: 96-256-384-256-256 filters, 4096-d fc6, 1024-d fc7.
    pub fn table3(n_classes: usize) -> Self {
        Self {
            n_classes,
            in_height: FREQ_BINS,
            conv_filters: [96, 256, 384, 256, 256],
            fc6_dim: 4096,
            fc7_dim: 1024,
            seed: 42,
        }
    }

    /// Same geometry with narrow layers, trainable on one CPU core.
    pub fn compact(n_classes: usize) -> Self {
        Self {
            conv_filters: [8, 16, 32, 32, 32],
            fc6_dim: 64,
            fc7_dim: 64,
            ..Self::table3(n_classes)
        }
    }

    pub fn to_text(&self) -> String {
        let f = self.conv_filters;
        format!(
            "n_classes={}\nin_height={}\nconv_filters={},{},{},{},{}\nfc6_dim={}\nfc7_dim={}\nseed={}\n",
            self.n_classes, self.in_height, f[0], f[1], f[2], f[3], f[4], self.fc6_dim, self.fc7_dim, self.seed
        )
    }
}

/// Names of the layers whose output sizes make up the architecture table.
pub const TABLE_LAYERS: [&str; 12] = [
    "conv1", "mpool1", "conv2", "mpool2", "conv3", "conv4", "conv5", "mpool5", "fc6", "apool6", "fc7", "fc8",
];

fn cnn_defs(cfg: &CnnConfig, fc6_height: usize) -> Vec<(&'static str, LayerSpec)> {
    use LayerKind::{BatchNorm as Bn, Relu};
    let f = cfg.conv_filters;
    let bn = LayerSpec::simple(Bn);
    let relu = LayerSpec::simple(Relu);
    vec![
        ("conv1", LayerSpec::conv((7, 7), f[0], (2, 2), (1, 1))),
        ("bn1", bn),
        ("relu1", relu),
        ("mpool1", LayerSpec::max_pool((3, 3), (2, 2))),
        ("conv2", LayerSpec::conv((5, 5), f[1], (2, 2), (1, 1))),
        ("bn2", bn),
        ("relu2", relu),
        ("mpool2", LayerSpec::max_pool((3, 3), (2, 2))),
        ("conv3", LayerSpec::conv((3, 3), f[2], (1, 1), (1, 1))),
        ("bn3", bn),
        ("relu3", relu),
        ("conv4", LayerSpec::conv((3, 3), f[3], (1, 1), (1, 1))),
        ("bn4", bn),
        ("relu4", relu),
        ("conv5", LayerSpec::conv((3, 3), f[4], (1, 1), (1, 1))),
        ("bn5", bn),
        ("relu5", relu),
        ("mpool5", LayerSpec::max_pool((5, 3), (3, 2))),
        ("fc6", LayerSpec::fully_connected((fc6_height, 1), cfg.fc6_dim)),
        ("bn6", bn),
        ("relu6", relu),
        ("apool6", LayerSpec::avg_pool((1, 0), (1, 1))),
        ("fc7", LayerSpec::fully_connected((1, 1), cfg.fc7_dim)),
        ("bn7", bn),
        ("relu7", relu),
        ("fc8", LayerSpec::fully_connected((1, 1), cfg.n_classes)),
    ]
}

pub fn build_cnn(cfg: &CnnConfig) -> Result<Network> {
    if cfg.n_classes < 2 {
        return Err(Error::InvalidInput("a classifier needs at least two classes".into()));
    }
    // fc6 spans the full frequency extent left after mpool5.
    let probe = Network::sequential(1, &cnn_defs(cfg, 1)[..18], cfg.seed)?;
    let wmin = probe
        .min_input_width(cfg.in_height)
        .ok_or_else(|| Error::InvalidInput(format!("input height {} is too small", cfg.in_height)))?;
    let fc6_height = probe.shape_trace(cfg.in_height, wmin)?[17].1 .0;
    let mut net = Network::sequential(1, &cnn_defs(cfg, fc6_height), cfg.seed)?;
    net.config_text = cfg.to_text();
    Ok(net)
}

/// The full-size identification network.
pub fn build_full_cnn(n_classes: usize) -> Result<Network> {
    build_cnn(&CnnConfig::table3(n_classes))
}

/// Output sizes of the architecture-table layers for a `512 x t` input.
pub fn table_trace(net: &Network, t: usize) -> Result<Vec<(String, (usize, usize))>> {
    let h = net.layers[0].spec.support.0.max(FREQ_BINS);
    Ok(net
        .shape_trace(h, t)?
        .into_iter()
        .filter(|(n, _)| TABLE_LAYERS.contains(&n.as_str()))
        .collect())
}

// ---------------------------------------------------------------------------
// Losses and optimizer

/// Mean softmax cross-entropy over a batch of `[N, K, 1, 1]` logits and its
/// gradient.
pub fn softmax_cross_entropy(logits: &Array4<f64>, labels: &[usize]) -> Result<(f64, Array4<f64>)> {
    let (n, k, h, w) = logits.dim();
    if h != 1 || w != 1 || n != labels.len() {
        return Err(Error::InvalidInput(format!(
            "logits {n}x{k}x{h}x{w} do not match {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidInput(format!("label {bad} outside {k} classes")));
    }
    let mut grad = Array4::zeros((n, k, 1, 1));
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = (0..k).map(|j| logits[[i, j, 0, 0]]).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for j in 0..k {
            let p = (row[j] - lse).exp();
            grad[[i, j, 0, 0]] = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Squared distance for same-speaker pairs, squared hinge below the margin
/// otherwise.
pub fn contrastive_loss(dist: f64, same: bool, margin: f64) -> Result<f64> {
    if !(dist >= 0.0) {
        return Err(Error::InvalidInput(format!("distance must be non-negative, got {dist}")));
    }
    if !(margin > 0.0) {
        return Err(Error::InvalidInput(format!("margin must be positive, got {margin}")));
    }
    Ok(if same { dist * dist } else { (margin - dist).max(0.0).powi(2) })
}

/// SGD with momentum and L2 weight decay on conv and fully connected weights.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, net: &mut Network) {
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        for (k, (frozen, kind, p)) in net.params_mut().enumerate() {
            if velocity.len() <= k {
                velocity.push(vec![0.0; p.len()]);
            }
            if frozen {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let decay = if matches!(kind, LayerKind::Conv | LayerKind::FullyConnected) && p.shape.len() == 4 {
                wd
            } else {
                0.0
            };
            let v = &mut velocity[k];
            for ((w, g), vi) in p.values.iter_mut().zip(grad).zip(v.iter_mut()) {
                *vi = mu * *vi - lr * (g + decay * *w);
                *w += *vi;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Classification training

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied when the epoch loss stops improving.
    pub lr_decay: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 0.1,
            patience: 2,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn to_text(&self) -> String {
        format!(
            "epochs={}\nbatch_size={}\nlr={}\nmomentum={}\nweight_decay={}\nlr_decay={}\npatience={}\nseed={}\n",
            self.epochs, self.batch_size, self.lr, self.momentum, self.weight_decay, self.lr_decay, self.patience, self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    /// Loss of the first minibatch before any update.
    pub initial_loss: f64,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

fn crop_batch(specs: &[&Spectrogram], offsets: &[usize]) -> Array4<f64> {
    let h = specs[0].magnitudes.nrows();
    let mut x = Array4::zeros((specs.len(), 1, h, CROP_FRAMES));
    for (i, (s, &o)) in specs.iter().zip(offsets).enumerate() {
        x.slice_mut(s![i, 0, .., ..])
            .assign(&s.magnitudes.slice(s![.., o..o + CROP_FRAMES]));
    }
    x
}

fn validate_classes(utterances: &[Spectrogram], labels: &[usize], n_classes: usize) -> Result<()> {
    if utterances.len() != labels.len() || utterances.is_empty() {
        return Err(Error::InvalidInput("need one label per utterance and at least one utterance".into()));
    }
    let mut seen = vec![false; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::InvalidInput(format!("label {l} outside {n_classes} classes")));
        }
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidInput(format!("class {missing} has no training utterance")));
    }
    if let Some(short) = utterances.iter().position(|u| u.frames() < CROP_FRAMES) {
        return Err(Error::InvalidInput(format!(
            "utterance {short} has fewer than {CROP_FRAMES} frames"
        )));
    }
    Ok(())
}

/// Minibatch SGD on random 300-frame crops with softmax cross-entropy.
pub fn train_classifier(
    net: &mut Network,
    utterances: &[Spectrogram],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let n_classes = net.output_channels();
    if n_classes < 2 {
        return Err(Error::InvalidInput("need at least two classes".into()));
    }
    validate_classes(utterances, labels, n_classes)?;
    if cfg.batch_size < 2 {
        return Err(Error::InvalidInput("batch size must be at least 2 for batchnorm".into()));
    }
    let mut rng = rng::seeded(cfg.seed);
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    let mut initial_loss = None;
    let mut history = TrainHistory { initial_loss: 0.0, epoch_losses: Vec::new(), learning_rates: Vec::new() };
    let (mut best, mut stale) = (f64::INFINITY, 0);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let specs: Vec<&Spectrogram> = chunk.iter().map(|&i| &utterances[i]).collect();
            let offsets: Vec<usize> = specs
                .iter()
                .map(|s| rng.gen_range(0..=s.frames() - CROP_FRAMES))
                .collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = net.forward(crop_batch(&specs, &offsets), Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::InvalidState(format!("loss diverged in epoch {epoch}")));
            }
            initial_loss.get_or_insert(loss);
            net.zero_grad();
            net.backward(grad)?;
            sgd.step(net);
            total += loss;
            batches += 1;
        }
        let epoch_loss = total / batches.max(1) as f64;
        history.epoch_losses.push(epoch_loss);
        history.learning_rates.push(sgd.lr);
        log::info!("epoch {epoch}: loss {epoch_loss:.4} lr {}", sgd.lr);
        if best.is_infinite() || epoch_loss < best - 1e-4 * best.abs() {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                sgd.lr *= cfg.lr_decay;
                stale = 0;
            }
        }
    }
    history.initial_loss = initial_loss.unwrap_or(f64::NAN);
    net.config_text = format!("{}{}", net.config_text, cfg.to_text());
    Ok(history)
}

// ---------------------------------------------------------------------------
// Embedding network

/// Replaces the last layer with a fresh `embed_dim` projection and freezes
/// everything before it.
pub fn make_embedding_net(trained: &Network, embed_dim: usize, seed: u64) -> Result<Network> {
    let last = trained.layers.len().checked_sub(1).ok_or_else(|| Error::InvalidInput("empty network".into()))?;
    let old = &trained.layers[last];
    if !old.spec.has_weights() || embed_dim == 0 {
        return Err(Error::InvalidInput("last layer must be fully connected and embed_dim positive".into()));
    }
    let in_c = old.params[0].shape[1];
    let mut net = trained.clone();
    net.tape = None;
    let spec = LayerSpec { filter_count: embed_dim, ..old.spec };
    let mut r = rng::derive(seed, &[last as u64, 0xE3B]);
    net.layers[last] = init_layer(&old.name, spec, in_c, &mut r);
    net.set_frozen(0..last, true);
    net.layers[last].frozen = false;
    net.zero_grad();
    Ok(net)
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeSource {
    Random,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
    /// Set on negatives only.
    pub source: Option<NegativeSource>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

/// The closest tenth of all cross-speaker pairs under the current embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct HardNegatives {
    pub pairs: Vec<(usize, usize)>,
    /// Largest distance inside the hard set.
    pub cutoff: f64,
}

impl HardNegatives {
    pub fn build(labels: &[usize], embeddings: &[Vec<f64>]) -> Result<Self> {
        if labels.len() != embeddings.len() {
            return Err(Error::InvalidInput("one embedding per item required".into()));
        }
        let mut all = Vec::new();
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                if labels[i] != labels[j] {
                    all.push((euclidean(&embeddings[i], &embeddings[j]), i, j));
                }
            }
        }
        if all.is_empty() {
            return Err(Error::InvalidInput("negatives need at least two speakers".into()));
        }
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let keep = ((all.len() as f64 * HARD_FRACTION).ceil() as usize).max(1);
        Ok(Self { cutoff: all[keep - 1].0, pairs: all[..keep].iter().map(|&(_, i, j)| (i, j)).collect() })
    }
}

/// Half positives, half negatives; each negative comes from the hard set or
/// uniformly from all cross-speaker pairs with equal probability.
pub fn sample_pairs_with(labels: &[usize], hard: &HardNegatives, batch: usize, rng: &mut Rng) -> Result<PairBatch> {
    let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_speaker.entry(l).or_default().push(i);
    }
    if by_speaker.len() < 2 {
        return Err(Error::InvalidInput("pair sampling needs at least two speakers".into()));
    }
    let anchors: Vec<usize> = (0..labels.len()).filter(|&i| by_speaker[&labels[i]].len() >= 2).collect();
    if anchors.is_empty() {
        return Err(Error::InvalidInput("no speaker has two items to form a positive pair".into()));
    }
    let n_pos = batch / 2;
    let mut pairs = Vec::with_capacity(batch);
    for _ in 0..n_pos {
        let a = *anchors.choose(rng).expect("non-empty");
        let same = &by_speaker[&labels[a]];
        let b = loop {
            let b = *same.choose(rng).expect("non-empty");
            if b != a {
                break b;
            }
        };
        pairs.push(Pair { a, b, same: true, source: None });
    }
    for _ in n_pos..batch {
        if rng.gen_bool(0.5) {
            let (a, b) = *hard.pairs.choose(rng).expect("non-empty");
            pairs.push(Pair { a, b, same: false, source: Some(NegativeSource::Hard) });
        } else {
            let a = rng.gen_range(0..labels.len());
            let b = loop {
                let b = rng.gen_range(0..labels.len());
                if labels[b] != labels[a] {
                    break b;
                }
            };
            pairs.push(Pair { a, b, same: false, source: Some(NegativeSource::Random) });
        }
    }
    Ok(PairBatch { pairs })
}

pub fn sample_pairs(labels: &[usize], embeddings: &[Vec<f64>], batch: usize, seed: u64) -> Result<PairBatch> {
    let hard = HardNegatives::build(labels, embeddings)?;
    sample_pairs_with(labels, &hard, batch, &mut rng::seeded(seed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiameseConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_pairs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub margin: f64,
    /// Random 300-frame crops per utterance whose frozen features are cached.
    pub crops_per_utt: usize,
    pub seed: u64,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 20,
            batch_pairs: 64,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            margin: CONTRASTIVE_MARGIN,
            crops_per_utt: 4,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiameseHistory {
    /// Mean pair loss per step.
    pub step_losses: Vec<f64>,
}

fn column(a: &Array4<f64>, i: usize) -> Vec<f64> {
    a.slice(s![i, .., 0, 0]).to_vec()
}

/// Per-pair contrastive loss on L2-normalized outputs; returns the mean loss
/// and the gradient with respect to the raw outputs `[2B, D, 1, 1]`, where row
/// `2p` and `2p + 1` hold the two sides of pair `p`.
fn pair_loss(z: &Array4<f64>, same: &[bool], margin: f64) -> Result<(f64, Array4<f64>)> {
    let b = same.len();
    let mut grad = Array4::zeros(z.dim());
    let mut total = 0.0;
    for (p, &is_same) in same.iter().enumerate() {
        let (za, zb) = (column(z, 2 * p), column(z, 2 * p + 1));
        let (ea, eb) = (normalize(&za), normalize(&zb));
        let d: Vec<f64> = ea.iter().zip(&eb).map(|(x, y)| x - y).collect();
        let dist = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        total += contrastive_loss(dist, is_same, margin)?;
        let ge: Vec<f64> = if is_same {
            d.iter().map(|x| 2.0 * x).collect()
        } else if dist < margin && dist > 0.0 {
            let coef = -2.0 * (margin - dist) / dist;
            d.iter().map(|x| coef * x).collect()
        } else {
            vec![0.0; d.len()]
        };
        for (row, e, zr, sign) in [(2 * p, &ea, &za, 1.0), (2 * p + 1, &eb, &zb, -1.0)] {
            let norm = zr.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let dot: f64 = e.iter().zip(&ge).map(|(x, g)| x * g * sign).sum();
            for k in 0..e.len() {
                grad[[row, k, 0, 0]] = (sign * ge[k] - e[k] * dot) / norm / b as f64;
            }
        }
    }
    Ok((total / b as f64, grad))
}

/// Trains the unfrozen last layer with the contrastive loss. Frozen layers run
/// in inference mode once per cached crop; hard negatives are re-estimated
/// from refreshed embeddings at the start of every epoch.
pub fn train_siamese(
    net: &mut Network,
    utterances: &[Spectrogram],
    labels: &[usize],
    cfg: &SiameseConfig,
) -> Result<SiameseHistory> {
    if utterances.len() != labels.len() {
        return Err(Error::InvalidInput("need one label per utterance".into()));
    }
    if let Some(short) = utterances.iter().position(|u| u.frames() < CROP_FRAMES) {
        return Err(Error::InvalidInput(format!("utterance {short} has fewer than {CROP_FRAMES} frames")));
    }
    let last = net.layers.len() - 1;
    if net.layers[..last].iter().any(|l| !l.frozen) {
        return Err(Error::InvalidState("only the last layer may be trainable".into()));
    }
    let mut rng = rng::seeded(cfg.seed);
    let mut crops = Vec::new();
    let mut item_labels = Vec::new();
    for (u, &l) in utterances.iter().zip(labels) {
        for _ in 0..cfg.crops_per_utt.max(1) {
            crops.push((u, rng.gen_range(0..=u.frames() - CROP_FRAMES)));
            item_labels.push(l);
        }
    }
    let frozen_net: &Network = net;
    let features: Vec<Array4<f64>> = crops
        .par_iter()
        .map(|(u, o)| frozen_net.predict_range(0..last, crop_batch(&[u], &[*o])))
        .collect::<Result<_>>()?;
    let dim = features[0].dim().1;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut history = SiameseHistory { step_losses: Vec::new() };
    for _ in 0..cfg.epochs {
        let embeddings: Vec<Vec<f64>> = features
            .iter()
            .map(|f| Ok(normalize(&column(&net.predict_range(last..last + 1, f.clone())?, 0))))
            .collect::<Result<_>>()?;
        let hard = HardNegatives::build(&item_labels, &embeddings)?;
        for _ in 0..cfg.steps_per_epoch {
            let batch = sample_pairs_with(&item_labels, &hard, cfg.batch_pairs, &mut rng)?;
            let mut x = Array4::zeros((2 * batch.pairs.len(), dim, 1, 1));
            for (p, pair) in batch.pairs.iter().enumerate() {
                x.slice_mut(s![2 * p, .., .., ..]).assign(&features[pair.a].slice(s![0, .., .., ..]));
                x.slice_mut(s![2 * p + 1, .., .., ..]).assign(&features[pair.b].slice(s![0, .., .., ..]));
            }
            let same: Vec<bool> = batch.pairs.iter().map(|p| p.same).collect();
            let z = net.forward_range(last..last + 1, x, Mode::Train)?;
            let (loss, grad) = pair_loss(&z, &same, cfg.margin)?;
            net.zero_grad();
            net.backward(grad)?;
            sgd.step(net);
            history.step_losses.push(loss);
        }
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Inference

fn spectrogram_input(spec: &Spectrogram) -> Array4<f64> {
    let (h, t) = spec.magnitudes.dim();
    spec.magnitudes
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((1, 1, h, t))
        .expect("reshape")
}

fn check_length(net: &Network, spec: &Spectrogram) -> Result<()> {
    let (h, t) = spec.magnitudes.dim();
    net.shape_trace(h, t).map(|_| ()).map_err(|_| {
        Error::InvalidInput(format!(
            "{t} frames is shorter than the network minimum of {}",
            net.min_input_width(h).unwrap_or(0)
        ))
    })
}

/// Raw network output for a whole utterance in one pass.
pub fn forward_utterance(net: &Network, spec: &Spectrogram) -> Result<Vec<f64>> {
    check_length(net, spec)?;
    let out = net.predict(spectrogram_input(spec))?;
    Ok(out.iter().copied().collect())
}

/// Class distribution from a single pass with the average pool resized to the
/// utterance length.
pub fn infer_identity(net: &Network, spec: &Spectrogram) -> Result<Vec<f64>> {
    Ok(softmax(&forward_utterance(net, spec)?))
}

/// Mean of per-segment class distributions over non-overlapping 300-frame
/// segments; a trailing partial segment is dropped.
pub fn infer_segments_avg(net: &Network, spec: &Spectrogram) -> Result<Vec<f64>> {
    let t = spec.frames();
    if t < CROP_FRAMES {
        return Err(Error::InvalidInput(format!("{t} frames is shorter than one {CROP_FRAMES}-frame segment")));
    }
    let segments = t / CROP_FRAMES;
    let specs = vec![spec; segments];
    let offsets: Vec<usize> = (0..segments).map(|k| k * CROP_FRAMES).collect();
    let logits = net.predict(crop_batch(&specs, &offsets))?;
    let k = logits.dim().1;
    let mut mean = vec![0.0; k];
    for i in 0..segments {
        for (m, p) in mean.iter_mut().zip(softmax(&column(&logits, i))) {
            *m += p / segments as f64;
        }
    }
    Ok(mean)
}

/// L2-normalized embedding of a whole utterance.
pub fn embed(net: &Network, spec: &Spectrogram) -> Result<Vec<f64>> {
    Ok(normalize(&forward_utterance(net, spec)?))
}

/// Activations entering the last layer (the fc7 output after batchnorm and
/// ReLU) for a whole utterance.
pub fn penultimate_features(net: &Network, spec: &Spectrogram) -> Result<Vec<f64>> {
    check_length(net, spec)?;
    let last = net.layers.len() - 1;
    Ok(net.predict_range(0..last, spectrogram_input(spec))?.iter().copied().collect())
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &[u8; 4] = b"VXN1";

fn write_tensor<W: Write>(w: &mut W, shape: &[usize], values: &[f64]) -> Result<()> {
    binio::write_u32(w, shape.len())?;
    for &d in shape {
        binio::write_u32(w, d)?;
    }
    binio::write_f32s(w, values.iter().copied())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    let ndim = binio::read_u32(r)?;
    if ndim > 8 {
        return Err(Error::Format(format!("tensor rank {ndim} is implausible")));
    }
    let shape = (0..ndim).map(|_| binio::read_u32(r)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    Ok((shape, binio::read_f32s(r, n)?))
}

impl Network {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, MAGIC)?;
        binio::write_u32(w, self.layers.len())?;
        binio::write_u32(w, self.in_channels)?;
        for l in &self.layers {
            binio::write_u8(w, l.spec.kind.tag())?;
            binio::write_u32(w, l.name.len())?;
            w.write_all(l.name.as_bytes())?;
            let s = &l.spec;
            for v in [s.support.0, s.support.1, s.filter_count, s.stride.0, s.stride.1, s.padding.0, s.padding.1] {
                binio::write_u32(w, v)?;
            }
            binio::write_u32(w, l.params.len())?;
            for p in &l.params {
                write_tensor(w, &p.shape, &p.values)?;
            }
            match &l.running {
                Some((m, v)) => {
                    binio::write_u8(w, 1)?;
                    write_tensor(w, &[m.len()], m)?;
                    write_tensor(w, &[v.len()], v)?;
                }
                None => binio::write_u8(w, 0)?,
            }
            binio::write_u8(w, l.frozen as u8)?;
        }
        binio::write_u32(w, self.config_text.len())?;
        w.write_all(self.config_text.as_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, MAGIC)?;
        let count = binio::read_u32(r)?;
        let in_channels = binio::read_u32(r)?;
        let read_string = |r: &mut R| -> Result<String> {
            let len = binio::read_u32(r)?;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
        };
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let kind = LayerKind::from_tag(binio::read_u8(r)?)?;
            let name = read_string(r)?;
            let v = (0..7).map(|_| binio::read_u32(r)).collect::<Result<Vec<_>>>()?;
            let spec = LayerSpec {
                kind,
                support: (v[0], v[1]),
                filter_count: v[2],
                stride: (v[3], v[4]),
                padding: (v[5], v[6]),
            };
            let n_params = binio::read_u32(r)?;
            let mut params = Vec::with_capacity(n_params.min(4));
            for _ in 0..n_params {
                let (shape, values) = read_tensor(r)?;
                params.push(Tensor::new(shape, values)?);
            }
            let running = match binio::read_u8(r)? {
                0 => None,
                _ => Some((read_tensor(r)?.1, read_tensor(r)?.1)),
            };
            let frozen = binio::read_u8(r)? != 0;
            layers.push(Layer { name, spec, params, running, frozen });
        }
        let config_text = read_string(r)?;
        let net = Self { layers, in_channels, config_text, tape: None };
        net.check_structure()?;
        Ok(net)
    }

    fn check_structure(&self) -> Result<()> {
        let mut c = self.in_channels;
        for l in &self.layers {
            let expected = match l.spec.kind {
                LayerKind::Conv | LayerKind::FullyConnected => {
                    let s = vec![l.spec.filter_count, c, l.spec.support.0, l.spec.support.1];
                    vec![s, vec![l.spec.filter_count]]
                }
                LayerKind::BatchNorm => vec![vec![c], vec![c]],
                _ => vec![],
            };
            let found: Vec<Vec<usize>> = l.params.iter().map(|p| p.shape.clone()).collect();
            if found != expected || (l.spec.kind == LayerKind::BatchNorm) != l.running.is_some() {
                return Err(Error::Format(format!("layer {} has inconsistent tensors", l.name)));
            }
            if l.spec.stride.0 == 0 || l.spec.stride.1 == 0 {
                return Err(Error::Format(format!("layer {} has a zero stride", l.name)));
            }
            if l.spec.has_weights() {
                c = l.spec.filter_count;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

// ---------------------------------------------------------------------------
// Gradient checking

/// A small network holding every layer kind, for finite-difference checks.
pub fn gradcheck_network(seed: u64) -> Result<Network> {
    use LayerKind::{BatchNorm as Bn, Relu};
    Network::sequential(
        1,
        &[
            ("conv1", LayerSpec::conv((3, 3), 2, (1, 1), (1, 1))),
            ("bn1", LayerSpec::simple(Bn)),
            ("relu1", LayerSpec::simple(Relu)),
            ("mpool1", LayerSpec::max_pool((2, 2), (2, 2))),
            ("conv2", LayerSpec::conv((3, 3), 3, (2, 2), (1, 1))),
            ("bn2", LayerSpec::simple(Bn)),
            ("relu2", LayerSpec::simple(Relu)),
            ("fc6", LayerSpec::fully_connected((3, 1), 4)),
            ("apool6", LayerSpec::avg_pool((1, 0), (1, 1))),
            ("fc7", LayerSpec::fully_connected((1, 1), 3)),
            ("softmax", LayerSpec::simple(LayerKind::Softmax)),
        ],
        seed,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub kind: LayerKind,
    /// Max relative error over this layer's parameters and its input.
    pub max_rel_error: f64,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of `sum(r * forward(x))` in training mode for
/// every parameter and every layer input.
pub fn gradient_check(net: &Network, x: &Array4<f64>, step: f64, seed: u64) -> Result<Vec<GradCheck>> {
    let mut net = net.clone();
    net.set_frozen(0..net.layers.len(), false);
    let mut r = rng::seeded(seed);
    let out_dim = net.clone().forward(x.clone(), Mode::Train)?.dim();
    let proj = Array4::from_shape_fn(out_dim, |_| r.gen_range(-1.0..1.0));
    let loss = |net: &mut Network, start: usize, input: &Array4<f64>| -> Result<f64> {
        let out = net.forward_range(start..net.layers.len(), input.clone(), Mode::Train)?;
        Ok((&out * &proj).sum())
    };
    let mut inputs = vec![x.clone()];
    {
        let mut probe = net.clone();
        for i in 0..probe.layers.len() {
            let next = probe.forward_range(i..i + 1, inputs[i].clone(), Mode::Train)?;
            inputs.push(next);
        }
    }
    let mut report = Vec::new();
    for li in 0..net.layers.len() {
        let mut worst = 0.0f64;
        let mut work = net.clone();
        work.forward_range(li..work.layers.len(), inputs[li].clone(), Mode::Train)?;
        work.zero_grad();
        work.backward(proj.clone())?;
        for pi in 0..net.layers[li].params.len() {
            let analytic = work.layers[li].params[pi].grad.clone().expect("unfrozen grad");
            for k in 0..analytic.len() {
                let mut plus = net.clone();
                plus.layers[li].params[pi].values[k] += step;
                let mut minus = net.clone();
                minus.layers[li].params[pi].values[k] -= step;
                let fd = (loss(&mut plus, li, &inputs[li])? - loss(&mut minus, li, &inputs[li])?) / (2.0 * step);
                worst = worst.max(rel_error(analytic[k], fd));
            }
        }
        // Inputs after a ReLU hold exact zeros where max pooling has ties, so
        // the input gradient is checked at a generic point of the same shape.
        let xin = &Array4::from_shape_fn(inputs[li].dim(), |_| r.gen_range(-1.0..1.0));
        let mut work = net.clone();
        work.forward_range(li..work.layers.len(), xin.clone(), Mode::Train)?;
        work.zero_grad();
        let dx = work.backward_input(proj.clone())?;
        for k in 0..xin.len() {
            let mut xp = xin.clone();
            let mut xm = xin.clone();
            xp.as_slice_mut().expect("standard")[k] += step;
            xm.as_slice_mut().expect("standard")[k] -= step;
            let mut scratch = net.clone();
            let fd = (loss(&mut scratch, li, &xp)? - loss(&mut scratch, li, &xm)?) / (2.0 * step);
            worst = worst.max(rel_error(dx.as_slice().expect("standard")[k], fd));
        }
        report.push(GradCheck { name: net.layers[li].name.clone(), kind: net.layers[li].spec.kind, max_rel_error: worst });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn random_input(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut r = rng::seeded(seed);
        Array4::from_shape_fn(dims, |_| r.gen_range(-1.0..1.0))
    }

    fn spec_of(m: Array2<f64>) -> Spectrogram {
        Spectrogram::from_matrix(m).unwrap()
    }

    fn random_spec(t: usize, seed: u64) -> Spectrogram {
        let mut r = rng::seeded(seed);
        spec_of(Array2::from_shape_fn((FREQ_BINS, t), |_| r.gen_range(-1.0..1.0)))
    }

    fn tiny_net() -> Network {
        build_cnn(&CnnConfig {
            conv_filters: [2, 3, 3, 3, 3],
            fc6_dim: 4,
            fc7_dim: 4,
            ..CnnConfig::table3(3)
        })
        .unwrap()
    }

    #[test]
    fn table_shapes_at_three_seconds() {
        let net = tiny_net();
        let trace = table_trace(&net, 300).unwrap();
        let expected = [
            (254, 148), (126, 73), (62, 36), (30, 17), (30, 17), (30, 17), (30, 17), (9, 8), (1, 8), (1, 1),
            (1, 1), (1, 1),
        ];
        let names: Vec<&str> = trace.iter().map(|t| t.0.as_str()).collect();
        assert_eq!(names, TABLE_LAYERS);
        let dims: Vec<(usize, usize)> = trace.iter().map(|t| t.1).collect();
        assert_eq!(dims, expected);
        assert_eq!(net.apool_support(FREQ_BINS, 300).unwrap(), Some(8));
    }

    #[test]
    fn four_and_a_half_seconds() {
        let net = tiny_net();
        let trace = table_trace(&net, 450).unwrap();
        assert_eq!(trace[7].1, (9, 13));
        assert_eq!(net.apool_support(FREQ_BINS, 450).unwrap(), Some(13));
        assert_eq!(trace[11].1, (1, 1));
    }

    #[test]
    fn real_forward_matches_trace() {
        let net = tiny_net();
        let mut a = spectrogram_input(&random_spec(300, 1));
        for (l, (_, dims)) in net.layers.iter().zip(net.shape_trace(FREQ_BINS, 300).unwrap()) {
            a = layer_forward(l, a, Mode::Eval, false).unwrap().out;
            assert_eq!((a.dim().2, a.dim().3), dims, "{}", l.name);
        }
    }

    #[test]
    fn minimum_length() {
        let net = tiny_net();
        assert_eq!(net.min_input_width(FREQ_BINS), Some(65));
        assert!(infer_identity(&net, &random_spec(65, 2)).is_ok());
        assert!(matches!(infer_identity(&net, &random_spec(64, 2)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn full_size_parameter_count() {
        let cfg = CnnConfig::table3(1251);
        let f = cfg.conv_filters;
        let conv = |o: usize, c: usize, k: usize| o * c * k + o;
        let expected = conv(f[0], 1, 49)
            + conv(f[1], f[0], 25)
            + conv(f[2], f[1], 9)
            + conv(f[3], f[2], 9)
            + conv(f[4], f[3], 9)
            + conv(4096, f[4], 9)
            + conv(1024, 4096, 1)
            + conv(1251, 1024, 1)
            + 2 * (f.iter().sum::<usize>() + 4096 + 1024);
        let net = build_full_cnn(1251).unwrap();
        assert_eq!(net.num_params(), expected);
        assert!((17_000_000..19_000_000).contains(&expected));
        assert_eq!(net.layers[net.layer_index("fc6").unwrap()].spec.support, (9, 1));
    }

    #[test]
    fn naive_convolution_oracle() {
        let net = Network::sequential(
            2,
            &[
                ("a", LayerSpec::conv((3, 2), 3, (2, 1), (1, 1))),
                ("b", LayerSpec::conv((2, 2), 2, (1, 2), (0, 1))),
            ],
            9,
        )
        .unwrap();
        let x = random_input((2, 2, 7, 6), 3);
        let naive = |x: &Array4<f64>, l: &Layer| {
            let (n, c, h, w) = x.dim();
            let (o, kh, kw) = (l.spec.filter_count, l.spec.support.0, l.spec.support.1);
            let (sh, sw, ph, pw) = (l.spec.stride.0, l.spec.stride.1, l.spec.padding.0, l.spec.padding.1);
            let ho = (h + 2 * ph - kh) / sh + 1;
            let wo = (w + 2 * pw - kw) / sw + 1;
            let wt = &l.params[0].values;
            Array4::from_shape_fn((n, o, ho, wo), |(i, oc, y, xx)| {
                let mut acc = l.params[1].values[oc];
                for ci in 0..c {
                    for a in 0..kh {
                        for b in 0..kw {
                            let iy = (y * sh + a) as isize - ph as isize;
                            let ix = (xx * sw + b) as isize - pw as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += wt[((oc * c + ci) * kh + a) * kw + b] * x[[i, ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
                acc
            })
        };
        let expected = naive(&naive(&x, &net.layers[0]), &net.layers[1]);
        let got = net.predict(x).unwrap();
        assert_eq!(got.dim(), expected.dim());
        assert!(got.iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let net = tiny_net();
        let out = forward_utterance(&net, &spec_of(Array2::zeros((FREQ_BINS, 300)))).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_layer_passes_gradient_check() {
        let net = gradcheck_network(3).unwrap();
        let x = random_input((3, 1, 12, 11), 4);
        let report = gradient_check(&net, &x, 1e-4, 5).unwrap();
        let kinds: std::collections::HashSet<LayerKind> = report.iter().map(|r| r.kind).collect();
        assert_eq!(kinds.len(), 7);
        for r in &report {
            assert!(r.max_rel_error < 1e-4, "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = random_input((3, 4, 1, 1), 8);
        let labels = [0, 3, 1];
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for k in 0..logits.len() {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p.as_slice_mut().unwrap()[k] += h;
            m.as_slice_mut().unwrap()[k] -= h;
            let fd = (softmax_cross_entropy(&p, &labels).unwrap().0 - softmax_cross_entropy(&m, &labels).unwrap().0)
                / (2.0 * h);
            assert!(rel_error(g.as_slice().unwrap()[k], fd) < 1e-6);
        }
    }

    #[test]
    fn backward_needs_a_recorded_pass() {
        let mut net = gradcheck_network(1).unwrap();
        let g = Array4::zeros((1, 3, 1, 1));
        assert!(matches!(net.backward(g.clone()), Err(Error::InvalidState(_))));
        let x = random_input((2, 1, 12, 11), 1);
        let out = net.forward(x, Mode::Train).unwrap();
        net.backward(Array4::ones(out.dim())).unwrap();
        assert!(matches!(net.backward(Array4::ones(out.dim())), Err(Error::InvalidState(_))));
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        let net = gradcheck_network(2).unwrap();
        let x = random_input((2, 1, 12, 11), 6);
        let run = |g: Array4<f64>| {
            let mut n = net.clone();
            n.forward(x.clone(), Mode::Train).unwrap();
            n.zero_grad();
            n.backward(g).unwrap();
            n.layers.iter().flat_map(|l| l.params.iter().flat_map(|p| p.grad.clone().unwrap())).collect::<Vec<_>>()
        };
        let g1 = random_input((2, 3, 1, 1), 7);
        let g2 = random_input((2, 3, 1, 1), 8);
        let sum = run(&g1 + &g2);
        let parts: Vec<f64> = run(g1).iter().zip(run(g2)).map(|(a, b)| a + b).collect();
        assert!(sum.iter().zip(&parts).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn frozen_layers_get_no_gradient() {
        let mut net = gradcheck_network(2).unwrap();
        net.set_frozen(0..3, true);
        net.zero_grad();
        let out = net.forward(random_input((2, 1, 12, 11), 1), Mode::Train).unwrap();
        net.backward(random_input(out.dim(), 2)).unwrap();
        assert!(net.layers[0].params.iter().all(|p| p.grad.is_none()));
        assert!(net.layers[4].params[0].grad.as_ref().unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn apool_is_mean_of_fc6_columns() {
        let net = tiny_net();
        let fc6 = net.layer_index("fc6").unwrap();
        let apool = net.layer_index("apool6").unwrap();
        for seed in 0..3 {
            let x = spectrogram_input(&random_spec(300 + 37 * seed as usize, seed));
            let pooled_in = net.predict_range(0..fc6, x).unwrap();
            let full = net.predict_range(fc6..apool + 1, pooled_in.clone()).unwrap();
            let n = pooled_in.dim().3;
            let mut mean = Array4::<f64>::zeros(full.dim());
            for j in 0..n {
                let col = pooled_in.slice(s![.., .., .., j..j + 1]).to_owned();
                mean += &net.predict_range(fc6..apool, col).unwrap();
            }
            mean /= n as f64;
            assert!(full.iter().zip(mean.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }

    #[test]
    fn softmax_outputs_are_distributions() {
        let net = tiny_net();
        let spec = random_spec(431, 4);
        let p = infer_identity(&net, &spec).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v >= 0.0));
        let q = infer_segments_avg(&net, &spec).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn three_second_input_paths_agree() {
        let net = tiny_net();
        let spec = random_spec(300, 5);
        let a = infer_identity(&net, &spec).unwrap();
        let b = infer_segments_avg(&net, &spec).unwrap();
        assert_eq!(a, b);
        let batch = net.predict(crop_batch(&[&spec], &[0])).unwrap();
        assert_eq!(softmax(&column(&batch, 0)), a);
    }

    #[test]
    fn segment_average_drops_partial_segment() {
        let net = tiny_net();
        let spec = random_spec(599, 6);
        let head = spec_of(spec.magnitudes.slice(s![.., 0..300]).to_owned());
        assert_eq!(infer_segments_avg(&net, &spec).unwrap(), infer_identity(&net, &head).unwrap());
        assert!(matches!(infer_segments_avg(&net, &random_spec(299, 6)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn segment_average_is_mean_of_softmaxes() {
        let net = tiny_net();
        let spec = random_spec(600, 7);
        let halves: Vec<Vec<f64>> = (0..2)
            .map(|k| {
                let seg = spec_of(spec.magnitudes.slice(s![.., k * 300..(k + 1) * 300]).to_owned());
                softmax(&forward_utterance(&net, &seg).unwrap())
            })
            .collect();
        let avg = infer_segments_avg(&net, &spec).unwrap();
        for j in 0..avg.len() {
            assert!((avg[j] - 0.5 * (halves[0][j] + halves[1][j])).abs() < 1e-12);
        }
    }

    #[test]
    fn tiled_input_repeats_interior_fc6_columns() {
        // The network's temporal stride is 32; a 320-frame tile repeats every
        // 10 fc6 columns away from the zero-padded edges and the seam.
        let net = tiny_net();
        let tile = random_spec(320, 8).magnitudes;
        let tiled = ndarray::concatenate(Axis(1), &[tile.view(), tile.view()]).unwrap();
        let fc6 = net.layer_index("relu6").unwrap();
        let one = net.predict_range(0..fc6 + 1, spectrogram_input(&spec_of(tile))).unwrap();
        let two = net.predict_range(0..fc6 + 1, spectrogram_input(&spec_of(tiled))).unwrap();
        assert_eq!(one.dim().3, 8);
        assert_eq!(two.dim().3, 18);
        // Columns 2..=6 have receptive fields inside one tile in both inputs.
        for j in 2..=6 {
            let a = one.slice(s![0, .., 0, j]);
            let b = two.slice(s![0, .., 0, j + 10]);
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-9), "column {j}");
        }
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_loss(0.0, true, 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(1.0, false, 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(1.7, false, 1.0).unwrap(), 0.0);
        assert!((contrastive_loss(0.3, false, 1.0).unwrap() - 0.49).abs() < 1e-15);
        assert!(contrastive_loss(-0.1, true, 1.0).is_err());
    }

    #[test]
    fn pair_loss_gradient() {
        let z = random_input((4, 5, 1, 1), 10);
        let same = [true, false];
        let (_, g) = pair_loss(&z, &same, 1.5).unwrap();
        let h = 1e-6;
        for k in 0..z.len() {
            let mut p = z.clone();
            let mut m = z.clone();
            p.as_slice_mut().unwrap()[k] += h;
            m.as_slice_mut().unwrap()[k] -= h;
            let fd = (pair_loss(&p, &same, 1.5).unwrap().0 - pair_loss(&m, &same, 1.5).unwrap().0) / (2.0 * h);
            assert!(rel_error(g.as_slice().unwrap()[k], fd) < 1e-5);
        }
    }

    fn clustered(n_spk: usize, per: usize, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>) {
        let mut r = rng::seeded(seed);
        let mut labels = Vec::new();
        let mut emb = Vec::new();
        for s in 0..n_spk {
            let centre: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
            for _ in 0..per {
                labels.push(s);
                emb.push(centre.iter().map(|c| c + r.gen_range(-0.5..0.5)).collect());
            }
        }
        (labels, emb)
    }

    #[test]
    fn hard_negative_share() {
        let (labels, emb) = clustered(5, 12, 1);
        let hard = HardNegatives::build(&labels, &emb).unwrap();
        let batch = sample_pairs_with(&labels, &hard, 20_000, &mut rng::seeded(2)).unwrap();
        let negatives: Vec<&Pair> = batch.pairs.iter().filter(|p| !p.same).collect();
        assert_eq!(negatives.len(), 10_000);
        let tagged = negatives.iter().filter(|p| p.source == Some(NegativeSource::Hard)).count() as f64 / 1e4;
        assert!((tagged - 0.5).abs() < 0.02, "hard share {tagged}");
        let in_decile = negatives
            .iter()
            .filter(|p| euclidean(&emb[p.a], &emb[p.b]) <= hard.cutoff)
            .count() as f64
            / 1e4;
        // Uniform negatives land in the hardest tenth one time in ten.
        assert!((in_decile - 0.55).abs() < 0.02, "decile share {in_decile}");
        for p in &batch.pairs {
            assert_eq!(p.same, labels[p.a] == labels[p.b]);
            assert_ne!(p.a, p.b);
        }
    }

    #[test]
    fn two_speaker_negatives_cross_speakers() {
        let (labels, emb) = clustered(2, 5, 3);
        let batch = sample_pairs(&labels, &emb, 200, 4).unwrap();
        assert!(batch.pairs.iter().filter(|p| !p.same).all(|p| labels[p.a] != labels[p.b]));
        assert_eq!(batch, sample_pairs(&labels, &emb, 200, 4).unwrap());
        assert!(matches!(sample_pairs(&[0, 0, 0], &emb[..3], 4, 1), Err(Error::InvalidInput(_))));
    }

    fn toy_corpus(n_spk: usize, per: usize, frames: usize, seed: u64) -> (Vec<Spectrogram>, Vec<usize>) {
        let mut r = rng::seeded(seed);
        let mut specs = Vec::new();
        let mut labels = Vec::new();
        for s in 0..n_spk {
            for _ in 0..per {
                let band = 40 + 120 * s;
                specs.push(spec_of(Array2::from_shape_fn((FREQ_BINS, frames), |(f, _)| {
                    let bump = if (band..band + 60).contains(&f) { 1.5 } else { 0.0 };
                    bump + r.gen_range(-1.0..1.0)
                })));
                labels.push(s);
            }
        }
        (specs, labels)
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig { epochs: 3, batch_size: 6, seed: 3, ..TrainConfig::default() }
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let (specs, labels) = toy_corpus(3, 6, 320, 1);
        let mut a = tiny_net();
        let ha = train_classifier(&mut a, &specs, &labels, &tiny_train_cfg()).unwrap();
        let mut b = tiny_net();
        let hb = train_classifier(&mut b, &specs, &labels, &tiny_train_cfg()).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.layers, b.layers);
        assert!(ha.epoch_losses[ha.epoch_losses.len() - 1] < ha.initial_loss, "{ha:?}");
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let (specs, labels) = toy_corpus(3, 2, 300, 2);
        let mut net = tiny_net();
        let before = net.clone();
        train_classifier(&mut net, &specs, &labels, &TrainConfig { lr: 0.0, ..tiny_train_cfg() }).unwrap();
        for (a, b) in net.layers.iter().zip(&before.layers) {
            assert_eq!(a.params.iter().map(|p| &p.values).collect::<Vec<_>>(), b.params.iter().map(|p| &p.values).collect::<Vec<_>>());
        }
        let bn = net.layer_index("bn1").unwrap();
        assert_ne!(net.layers[bn].running, before.layers[bn].running);
    }

    #[test]
    fn missing_class_is_rejected() {
        let (specs, _) = toy_corpus(2, 2, 300, 2);
        let mut net = tiny_net();
        let err = train_classifier(&mut net, &specs, &[0, 0, 1, 1], &tiny_train_cfg());
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn siamese_freezes_all_but_last_layer() {
        let (specs, labels) = toy_corpus(3, 3, 300, 4);
        let mut net = make_embedding_net(&tiny_net(), 16, 1).unwrap();
        assert_eq!(net.output_channels(), 16);
        let before = net.clone();
        let cfg = SiameseConfig { epochs: 2, steps_per_epoch: 50, batch_pairs: 8, crops_per_utt: 2, ..SiameseConfig::default() };
        let h = train_siamese(&mut net, &specs, &labels, &cfg).unwrap();
        assert_eq!(h.step_losses.len(), 100);
        let last = net.layers.len() - 1;
        for i in 0..last {
            for (a, b) in net.layers[i].params.iter().zip(&before.layers[i].params) {
                assert_eq!(a.values, b.values, "{}", net.layers[i].name);
            }
            assert_eq!(net.layers[i].running, before.layers[i].running);
        }
        assert_ne!(net.layers[last].params[0].values, before.layers[last].params[0].values);
        let e = embed(&net, &specs[0]).unwrap();
        assert_eq!(e.len(), 16);
        assert!((e.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_default_width() {
        let net = make_embedding_net(&tiny_net(), EMBED_DIM, 1).unwrap();
        assert_eq!(net.output_channels(), 1024);
        assert!(net.layers[..net.layers.len() - 1].iter().all(|l| l.frozen));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = tiny_net();
        net.layers[1].running = Some((vec![0.5, -0.25], vec![2.0, 0.75]));
        net.layers[0].frozen = true;
        let mut bytes = Vec::new();
        net.write(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"VXN1");
        let back = Network::read(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.config_text, net.config_text);
        for (a, b) in back.layers.iter().zip(&net.layers) {
            assert_eq!((a.name.as_str(), a.spec, a.frozen), (b.name.as_str(), b.spec, b.frozen));
            for (pa, pb) in a.params.iter().zip(&b.params) {
                assert!(pa.values.iter().zip(&pb.values).all(|(x, y)| (x - y).abs() <= 1e-6 * y.abs().max(1.0)));
            }
        }
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(again, bytes);
        assert!(Network::read(&mut &bytes[..bytes.len() - 3]).is_err());
    }
}
