//! Diagonal-covariance Gaussian mixtures: UBM training by EM, means-only MAP
//! adaptation and log-likelihood-ratio scoring.
//!
//! Feature matrices follow the [`MfccFrames`](crate::audio::MfccFrames)
//! layout: one row per coefficient, one column per frame (`[D x T]`).

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::binio;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Default MAP relevance factor.
pub const DEFAULT_RELEVANCE: f64 = 16.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGmm {
    pub weights: Array1<f64>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct UbmConfig {
    pub components: usize,
    pub iters: usize,
    pub seed: u64,
    /// Frames drawn for k-means++ seeding.
    pub init_subsample: usize,
}

impl UbmConfig {
    pub fn new(components: usize, iters: usize) -> Self {
        Self {
            components,
            iters,
            seed: 42,
            init_subsample: 100_000,
        }
    }
}

/// A trained UBM with the total log-likelihood recorded before every EM
/// iteration and once after the last one.
#[derive(Clone, Debug)]
pub struct UbmTraining {
    pub gmm: DiagonalGmm,
    pub log_likelihoods: Vec<f64>,
}

/// Occupancy statistics of one utterance against a mixture.
#[derive(Clone, Debug)]
pub struct Accumulator {
    pub n: Array1<f64>,
    pub f: Array2<f64>,
    pub s: Array2<f64>,
    pub log_likelihood: f64,
    pub frames: usize,
}

impl Accumulator {
    fn zeros(k: usize, d: usize) -> Self {
        Self {
            n: Array1::zeros(k),
            f: Array2::zeros((k, d)),
            s: Array2::zeros((k, d)),
            log_likelihood: 0.0,
            frames: 0,
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        self.n += &other.n;
        self.f += &other.f;
        self.s += &other.s;
        self.log_likelihood += other.log_likelihood;
        self.frames += other.frames;
    }
}

impl DiagonalGmm {
    pub fn new(weights: Array1<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.nrows() != k || variances.dim() != means.dim() {
            return Err(Error::ModelMismatch(format!(
                "inconsistent GMM shapes: weights {k}, means {:?}, variances {:?}",
                means.dim(),
                variances.dim()
            )));
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidInput("mixture weights must be non-negative".into()));
        }
        if (weights.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput("mixture weights must sum to 1".into()));
        }
        if variances.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput("variances must be positive".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    fn check_dim(&self, frames: &ArrayView2<f64>) -> Result<()> {
        if frames.nrows() != self.dim() {
            return Err(Error::ModelMismatch(format!(
                "features have dimension {}, model expects {}",
                frames.nrows(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `log w_k - 0.5 * sum_d ln(2 pi var_kd)` per component.
    fn log_norms(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(self.variances.axis_iter(Axis(0)))
            .map(|(w, var)| w.ln() - 0.5 * var.iter().map(|v| LN_2PI + v.ln()).sum::<f64>())
            .collect()
    }

    /// Per-component joint log densities for one frame into `out`; returns
    /// the frame log-likelihood.
    fn frame_log_densities(&self, norms: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
        for (k, slot) in out.iter_mut().enumerate() {
            let mean = self.means.row(k);
            let var = self.variances.row(k);
            let mut q = 0.0;
            for d in 0..x.len() {
                let diff = x[d] - mean[d];
                q += diff * diff / var[d];
            }
            *slot = norms[k] - 0.5 * q;
        }
        log_sum_exp(out)
    }

    /// Zeroth, first and second order statistics of `frames`.
    pub fn accumulate(&self, frames: ArrayView2<f64>) -> Result<Accumulator> {
        self.check_dim(&frames)?;
        let (k, d) = (self.components(), self.dim());
        let norms = self.log_norms();
        let mut acc = Accumulator::zeros(k, d);
        let mut dens = vec![0.0; k];
        let mut x = vec![0.0; d];
        for col in frames.axis_iter(Axis(1)) {
            x.iter_mut().zip(col.iter()).for_each(|(a, b)| *a = *b);
            let ll = self.frame_log_densities(&norms, &x, &mut dens);
            acc.log_likelihood += ll;
            acc.frames += 1;
            for c in 0..k {
                let g = (dens[c] - ll).exp();
                if g == 0.0 {
                    continue;
                }
                acc.n[c] += g;
                let mut f = acc.f.row_mut(c);
                let mut s = acc.s.row_mut(c);
                for j in 0..d {
                    f[j] += g * x[j];
                    s[j] += g * x[j] * x[j];
                }
            }
        }
        Ok(acc)
    }

    /// Per-frame posteriors `[T x K]`.
    pub fn posteriors(&self, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_dim(&frames)?;
        let norms = self.log_norms();
        let mut out = Array2::zeros((frames.ncols(), self.components()));
        let mut dens = vec![0.0; self.components()];
        let mut x = vec![0.0; self.dim()];
        for (t, col) in frames.axis_iter(Axis(1)).enumerate() {
            x.iter_mut().zip(col.iter()).for_each(|(a, b)| *a = *b);
            let ll = self.frame_log_densities(&norms, &x, &mut dens);
            for (c, v) in dens.iter().enumerate() {
                out[[t, c]] = (v - ll).exp();
            }
        }
        Ok(out)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, b"VXG1")?;
        binio::write_u32(w, self.components())?;
        binio::write_u32(w, self.dim())?;
        binio::write_f64s(w, self.weights.iter().copied())?;
        binio::write_f64s(w, self.means.iter().copied())?;
        binio::write_f64s(w, self.variances.iter().copied())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, b"VXG1")?;
        let k = binio::read_u32(r)?;
        let d = binio::read_u32(r)?;
        let weights = Array1::from(binio::read_f64s(r, k)?);
        let shape = |v| Array2::from_shape_vec((k, d), v).map_err(|e| Error::Format(e.to_string()));
        let means = shape(binio::read_f64s(r, k * d)?)?;
        let variances = shape(binio::read_f64s(r, k * d)?)?;
        Self::new(weights, means, variances)
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean per-frame log-likelihood.
pub fn log_likelihood(gmm: &DiagonalGmm, frames: ArrayView2<f64>) -> Result<f64> {
    gmm.check_dim(&frames)?;
    if frames.ncols() == 0 {
        return Err(Error::InsufficientData("no frames to score".into()));
    }
    let norms = gmm.log_norms();
    let mut dens = vec![0.0; gmm.components()];
    let mut x = vec![0.0; gmm.dim()];
    let mut total = 0.0;
    for col in frames.axis_iter(Axis(1)) {
        x.iter_mut().zip(col.iter()).for_each(|(a, b)| *a = *b);
        total += gmm.frame_log_densities(&norms, &x, &mut dens);
    }
    Ok(total / frames.ncols() as f64)
}

fn global_variance(features: &[ArrayView2<f64>], d: usize) -> (Array1<f64>, Array1<f64>, usize) {
    let mut sum = Array1::<f64>::zeros(d);
    let mut n = 0usize;
    for f in features {
        sum += &f.sum_axis(Axis(1));
        n += f.ncols();
    }
    let mean = sum / n as f64;
    let mut var = Array1::<f64>::zeros(d);
    for f in features {
        for col in f.axis_iter(Axis(1)) {
            var.iter_mut()
                .zip(col.iter().zip(mean.iter()))
                .for_each(|(v, (x, m))| *v += (x - m).powi(2));
        }
    }
    (mean, var / n as f64, n)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding followed by one Lloyd pass on a frame subsample.
fn kmeans_init(
    features: &[ArrayView2<f64>],
    cfg: &UbmConfig,
    global_var: &Array1<f64>,
    floor: &Array1<f64>,
) -> DiagonalGmm {
    let d = global_var.len();
    let k = cfg.components;
    let mut rng = crate::rng::seeded(cfg.seed);
    let mut frames: Vec<Vec<f64>> = features
        .iter()
        .flat_map(|f| f.axis_iter(Axis(1)).map(|c| c.to_vec()).collect::<Vec<_>>())
        .collect();
    if frames.len() > cfg.init_subsample.max(k) {
        frames.shuffle(&mut rng);
        frames.truncate(cfg.init_subsample.max(k));
    }
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(frames[rng.gen_range(0..frames.len())].clone());
    let mut best: Vec<f64> = frames.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = frames.len() - 1;
            for (i, b) in best.iter().enumerate() {
                if r < *b {
                    pick = i;
                    break;
                }
                r -= b;
            }
            pick
        } else {
            rng.gen_range(0..frames.len())
        };
        let c = frames[idx].clone();
        for (b, x) in best.iter_mut().zip(&frames) {
            *b = b.min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    // Single refinement pass.
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; d]; k];
    let mut sqs = vec![vec![0.0; d]; k];
    for x in &frames {
        let c = (0..k)
            .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])))
            .unwrap();
        counts[c] += 1;
        for j in 0..d {
            sums[c][j] += x[j];
            sqs[c][j] += x[j] * x[j];
        }
    }
    let mut weights = Array1::zeros(k);
    let mut means = Array2::zeros((k, d));
    let mut variances = Array2::zeros((k, d));
    for c in 0..k {
        weights[c] = counts[c].max(1) as f64;
        for j in 0..d {
            if counts[c] >= 2 {
                let m = sums[c][j] / counts[c] as f64;
                means[[c, j]] = m;
                variances[[c, j]] = (sqs[c][j] / counts[c] as f64 - m * m).max(floor[j]);
            } else {
                means[[c, j]] = if counts[c] == 1 { sums[c][j] } else { centers[c][j] };
                variances[[c, j]] = global_var[j].max(floor[j]);
            }
        }
    }
    let wsum = weights.sum();
    weights /= wsum;
    DiagonalGmm {
        weights,
        means,
        variances,
    }
}

/// Parallel E-step with a fixed-order merge.
fn e_step(gmm: &DiagonalGmm, features: &[ArrayView2<f64>]) -> Result<Accumulator> {
    let parts: Vec<Accumulator> = features
        .par_iter()
        .map(|f| gmm.accumulate(f.view()))
        .collect::<Result<_>>()?;
    let mut acc = Accumulator::zeros(gmm.components(), gmm.dim());
    for p in &parts {
        acc.merge(p);
    }
    Ok(acc)
}

/// Trains a diagonal UBM by EM from k-means++ initialization.
pub fn train_ubm(features: &[ArrayView2<f64>], cfg: &UbmConfig) -> Result<UbmTraining> {
    if cfg.components == 0 || cfg.iters == 0 {
        return Err(Error::InvalidInput(
            "components and iterations must be at least 1".into(),
        ));
    }
    let Some(first) = features.first() else {
        return Err(Error::InsufficientData("no feature matrices".into()));
    };
    let d = first.nrows();
    if features.iter().any(|f| f.nrows() != d) {
        return Err(Error::ModelMismatch("feature dimensions differ".into()));
    }
    let total: usize = features.iter().map(|f| f.ncols()).sum();
    if total < cfg.components {
        return Err(Error::InsufficientData(format!(
            "{total} frames cannot support {} components",
            cfg.components
        )));
    }
    let (_, global_var, _) = global_variance(features, d);
    let floor = global_var.mapv(|v| (1e-4 * v).max(1e-10));
    let mut gmm = kmeans_init(features, cfg, &global_var, &floor);
    let mut history = Vec::with_capacity(cfg.iters + 1);
    for _ in 0..cfg.iters {
        let acc = e_step(&gmm, features)?;
        history.push(acc.log_likelihood);
        m_step(&mut gmm, &acc, &floor);
    }
    history.push(e_step(&gmm, features)?.log_likelihood);
    Ok(UbmTraining {
        gmm,
        log_likelihoods: history,
    })
}

fn m_step(gmm: &mut DiagonalGmm, acc: &Accumulator, floor: &Array1<f64>) {
    let total = acc.frames as f64;
    for c in 0..gmm.components() {
        let n = acc.n[c];
        gmm.weights[c] = n / total;
        if n < 1e-10 {
            continue;
        }
        for j in 0..gmm.dim() {
            let m = acc.f[[c, j]] / n;
            gmm.means[[c, j]] = m;
            gmm.variances[[c, j]] = (acc.s[[c, j]] / n - m * m).max(floor[j]);
        }
    }
    let wsum = gmm.weights.sum();
    gmm.weights /= wsum;
}

/// Means-only MAP adaptation toward `frames`.
pub fn map_adapt(ubm: &DiagonalGmm, frames: ArrayView2<f64>, relevance: f64) -> Result<DiagonalGmm> {
    if !(relevance > 0.0) {
        return Err(Error::InvalidInput("relevance factor must be positive".into()));
    }
    let acc = ubm.accumulate(frames)?;
    let mut out = ubm.clone();
    for c in 0..ubm.components() {
        let n = acc.n[c];
        if n <= 0.0 {
            continue;
        }
        let alpha = n / (n + relevance);
        for j in 0..ubm.dim() {
            out.means[[c, j]] = alpha * (acc.f[[c, j]] / n) + (1.0 - alpha) * ubm.means[[c, j]];
        }
    }
    Ok(out)
}

/// Mean per-frame log-likelihood ratio of `speaker` against `ubm`.
pub fn gmm_ubm_score(ubm: &DiagonalGmm, speaker: &DiagonalGmm, frames: ArrayView2<f64>) -> Result<f64> {
    if ubm.components() != speaker.components() || ubm.dim() != speaker.dim() {
        return Err(Error::ModelMismatch(format!(
            "UBM is {}x{}, speaker model is {}x{}",
            ubm.components(),
            ubm.dim(),
            speaker.components(),
            speaker.dim()
        )));
    }
    Ok(log_likelihood(speaker, frames)? - log_likelihood(ubm, frames)?)
}
