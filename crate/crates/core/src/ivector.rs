//! Total-variability i-vectors, two-covariance PLDA and the one-vs-rest
//! linear SVM identification head.
//!
//! Supervectors are laid out component-major: entry `k * D + d` belongs to
//! mixture component `k`, feature dimension `d`.

use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::binio;
use crate::gmm::DiagonalGmm;
use crate::{Error, Result};

/// Default i-vector dimension.
pub const IVECTOR_DIM: usize = 400;
/// Default PLDA subspace dimension.
pub const PLDA_DIM: usize = 200;
/// Sub-gradient epochs per binary SVM.
pub const SVM_EPOCHS: usize = 200;

/// Zeroth- and centered first-order occupancy statistics of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct BaumWelchStats {
    pub n: DVector<f64>,
    /// `[K x D]`, centered on the UBM means.
    pub f: DMatrix<f64>,
}

impl BaumWelchStats {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            n: DVector::zeros(k),
            f: DMatrix::zeros(k, d),
        }
    }

    /// Statistics of the utterance repeated `factor` times.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            n: &self.n * factor,
            f: &self.f * factor,
        }
    }
}

/// Posterior-weighted statistics against the UBM.
pub fn accumulate_stats(ubm: &DiagonalGmm, frames: ArrayView2<f64>) -> Result<BaumWelchStats> {
    let acc = ubm.accumulate(frames)?;
    let (k, d) = (ubm.components(), ubm.dim());
    let n = DVector::from_iterator(k, acc.n.iter().copied());
    let f = DMatrix::from_fn(k, d, |c, j| acc.f[[c, j]] - acc.n[c] * ubm.means[[c, j]]);
    Ok(BaumWelchStats { n, f })
}

#[derive(Clone, Debug)]
pub struct TotalVariabilityModel {
    /// `[K*D x R]` loading matrix.
    pub t: DMatrix<f64>,
    pub ubm: DiagonalGmm,
}

#[derive(Clone, Debug)]
pub struct TvTraining {
    pub model: TotalVariabilityModel,
    /// Marginal log-likelihood of the statistics (up to a constant), before
    /// every iteration and after the last.
    pub objective: Vec<f64>,
}

struct Posterior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    log_det_precision: f64,
    linear: DVector<f64>,
}

impl TotalVariabilityModel {
    pub fn rank(&self) -> usize {
        self.t.ncols()
    }

    fn check(&self, stats: &BaumWelchStats) -> Result<()> {
        let (k, d) = (self.ubm.components(), self.ubm.dim());
        if stats.n.len() != k || stats.f.shape() != (k, d) || self.t.nrows() != k * d {
            return Err(Error::ModelMismatch(format!(
                "statistics are {}x{}, extractor expects {k}x{d}",
                stats.f.nrows(),
                stats.f.ncols()
            )));
        }
        Ok(())
    }

    /// `T_k^T Sigma_k^-1 T_k` per component.
    fn component_precisions(&self) -> Vec<DMatrix<f64>> {
        let d = self.ubm.dim();
        (0..self.ubm.components())
            .map(|k| {
                let tk = self.t.rows(k * d, d);
                let scaled = DMatrix::from_fn(d, self.rank(), |j, r| {
                    tk[(j, r)] / self.ubm.variances[[k, j]]
                });
                tk.transpose() * scaled
            })
            .collect()
    }

    /// `T^T Sigma^-1 f` for the centered supervector `f`.
    fn project_stats(&self, stats: &BaumWelchStats) -> DVector<f64> {
        let d = self.ubm.dim();
        let sv = DVector::from_fn(self.t.nrows(), |i, _| {
            stats.f[(i / d, i % d)] / self.ubm.variances[[i / d, i % d]]
        });
        self.t.tr_mul(&sv)
    }

    fn posterior(&self, precisions: &[DMatrix<f64>], stats: &BaumWelchStats) -> Result<Posterior> {
        let r = self.rank();
        let mut l = DMatrix::<f64>::identity(r, r);
        for (nk, pk) in stats.n.iter().zip(precisions) {
            if *nk != 0.0 {
                l += pk * *nk;
            }
        }
        let linear = self.project_stats(stats);
        let chol = Cholesky::new(l)
            .ok_or_else(|| Error::InvalidState("posterior precision is not positive definite".into()))?;
        let mean = chol.solve(&linear);
        let cov = chol.inverse();
        let log_det_precision = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Posterior {
            mean,
            cov,
            log_det_precision,
            linear,
        })
    }
}

/// Posterior mean of the latent factor, `(I + T' S^-1 N T)^-1 T' S^-1 f`.
pub fn extract_ivector(model: &TotalVariabilityModel, stats: &BaumWelchStats) -> Result<DVector<f64>> {
    model.check(stats)?;
    let precisions = model.component_precisions();
    Ok(model.posterior(&precisions, stats)?.mean)
}

/// Batch extraction sharing the per-component precomputation.
pub fn extract_ivectors(model: &TotalVariabilityModel, stats: &[BaumWelchStats]) -> Result<Vec<DVector<f64>>> {
    for s in stats {
        model.check(s)?;
    }
    let precisions = model.component_precisions();
    stats
        .par_iter()
        .map(|s| Ok(model.posterior(&precisions, s)?.mean))
        .collect()
}

/// Utterances per accumulation chunk; fixed so reductions do not depend on
/// the worker count.
const CHUNK: usize = 16;

/// EM estimation of the total-variability matrix.
pub fn train_total_variability(
    ubm: &DiagonalGmm,
    stats: &[BaumWelchStats],
    rank: usize,
    iters: usize,
    seed: u64,
) -> Result<TvTraining> {
    let (k, d) = (ubm.components(), ubm.dim());
    if rank == 0 || rank > k * d {
        return Err(Error::InvalidInput(format!(
            "rank must be in 1..={}, got {rank}",
            k * d
        )));
    }
    if stats.len() < rank {
        return Err(Error::InsufficientData(format!(
            "{} utterances cannot support rank {rank}",
            stats.len()
        )));
    }
    let mut rng = crate::rng::seeded(seed);
    let init = Normal::new(0.0, 0.1).expect("valid normal");
    let mut model = TotalVariabilityModel {
        t: DMatrix::from_fn(k * d, rank, |_, _| init.sample(&mut rng)),
        ubm: ubm.clone(),
    };
    for s in stats {
        model.check(s)?;
    }
    let mut objective = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let (obj, c, a) = tv_e_step(&model, stats)?;
        objective.push(obj);
        for comp in 0..k {
            let ak = Cholesky::new(a[comp].clone()).ok_or_else(|| {
                Error::InvalidState("occupancy-weighted second moment is singular".into())
            })?;
            // T_k = C_k A_k^-1, solved row-block-wise via A_k^T = A_k.
            let ck = c.rows(comp * d, d).transpose();
            let tk = ak.solve(&ck).transpose();
            model.t.rows_mut(comp * d, d).copy_from(&tk);
        }
    }
    objective.push(tv_e_step(&model, stats)?.0);
    Ok(TvTraining { model, objective })
}

type TvAccum = (f64, DMatrix<f64>, Vec<DMatrix<f64>>);

fn tv_e_step(model: &TotalVariabilityModel, stats: &[BaumWelchStats]) -> Result<TvAccum> {
    let (k, d, r) = (model.ubm.components(), model.ubm.dim(), model.rank());
    let precisions = model.component_precisions();
    let empty = || (0.0, DMatrix::zeros(k * d, r), vec![DMatrix::zeros(r, r); k]);
    let chunks: Vec<TvAccum> = stats
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = empty();
            for s in chunk {
                let post = model.posterior(&precisions, s)?;
                acc.0 += 0.5 * post.linear.dot(&post.mean) - 0.5 * post.log_det_precision;
                let second = &post.cov + &post.mean * post.mean.transpose();
                for comp in 0..k {
                    if s.n[comp] != 0.0 {
                        acc.2[comp] += &second * s.n[comp];
                    }
                }
                let supervector = DVector::from_fn(k * d, |i, _| s.f[(i / d, i % d)]);
                acc.1.ger(1.0, &supervector, &post.mean, 1.0);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = empty();
    for c in &chunks {
        total.0 += c.0;
        total.1 += &c.1;
        for (a, b) in total.2.iter_mut().zip(&c.2) {
            *a += b;
        }
    }
    Ok(total)
}

impl TotalVariabilityModel {
    /// "VXT1", u32 rows, u32 cols, row-major f64. The UBM is stored separately.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        write_matrix(w, b"VXT1", &self.t)
    }

    pub fn read<R: Read>(r: &mut R, ubm: DiagonalGmm) -> Result<Self> {
        let t = read_matrix(r, b"VXT1")?;
        if t.nrows() != ubm.components() * ubm.dim() {
            return Err(Error::ModelMismatch(format!(
                "T has {} rows, UBM supervector has {}",
                t.nrows(),
                ubm.components() * ubm.dim()
            )));
        }
        Ok(Self { t, ubm })
    }
}

fn write_matrix<W: Write>(w: &mut W, magic: &[u8; 4], m: &DMatrix<f64>) -> Result<()> {
    binio::write_magic(w, magic)?;
    write_dims_and_rows(w, m)
}

fn write_dims_and_rows<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    binio::write_u32(w, m.nrows())?;
    binio::write_u32(w, m.ncols())?;
    binio::write_f64s(w, m.transpose().iter().copied())
}

fn read_matrix<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<DMatrix<f64>> {
    binio::read_magic(r, magic)?;
    read_dims_and_rows(r)
}

fn read_dims_and_rows<R: Read>(r: &mut R) -> Result<DMatrix<f64>> {
    let rows = binio::read_u32(r)?;
    let cols = binio::read_u32(r)?;
    Ok(DMatrix::from_row_slice(rows, cols, &binio::read_f64s(r, rows * cols)?))
}

// ---------------------------------------------------------------------------
// PLDA

/// Two-covariance model `y = z + e`, `z ~ N(mean, between)`, `e ~ N(0, within)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoCovariance {
    pub mean: DVector<f64>,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
}

/// Eigenvalue floor applied to both fitted covariances.
pub const COVARIANCE_FLOOR: f64 = 1e-9;

fn floor_psd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(m.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::InvalidState("covariance is not positive definite".into()))
}

/// Groups sample indices by label, ordered by label.
fn classes(labels: &[usize]) -> Vec<Vec<usize>> {
    let mut by: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by.entry(l).or_default().push(i);
    }
    by.into_values().collect()
}

/// Fits the two-covariance model by EM, starting from moment estimates.
pub fn fit_two_covariance(data: &[DVector<f64>], labels: &[usize], iters: usize) -> Result<TwoCovariance> {
    if data.len() != labels.len() || data.is_empty() {
        return Err(Error::InvalidInput("need one label per vector".into()));
    }
    let dim = data[0].len();
    let groups = classes(labels);
    if groups.len() < 2 {
        return Err(Error::InsufficientData("PLDA needs at least two classes".into()));
    }
    let total = data.len() as f64;
    let mean = data.iter().fold(DVector::zeros(dim), |a, x| a + x) / total;
    let class_means: Vec<DVector<f64>> = groups
        .iter()
        .map(|g| g.iter().fold(DVector::zeros(dim), |a, &i| a + &data[i]) / g.len() as f64)
        .collect();
    let mut within = DMatrix::zeros(dim, dim);
    for (g, m) in groups.iter().zip(&class_means) {
        for &i in g {
            let c = &data[i] - m;
            within += &c * c.transpose();
        }
    }
    within /= total;
    let mut between = DMatrix::zeros(dim, dim);
    for m in &class_means {
        let c = m - &mean;
        between += &c * c.transpose();
    }
    between /= groups.len() as f64;
    let mut model = TwoCovariance {
        mean,
        between: floor_psd(&between, COVARIANCE_FLOOR),
        within: floor_psd(&within, COVARIANCE_FLOOR),
    };
    let sums: Vec<(f64, DVector<f64>)> = groups
        .iter()
        .map(|g| {
            (
                g.len() as f64,
                g.iter().fold(DVector::zeros(dim), |a, &i| a + &data[i]),
            )
        })
        .collect();
    for _ in 0..iters {
        let b_inv = spd_inverse(&model.between)?;
        let w_inv = spd_inverse(&model.within)?;
        let b_inv_mean = &b_inv * &model.mean;
        let mut new_mean = DVector::zeros(dim);
        let mut posts = Vec::with_capacity(groups.len());
        for (n, s) in &sums {
            let cov = spd_inverse(&(&b_inv + &w_inv * *n))?;
            let z = &cov * (&b_inv_mean + &w_inv * s);
            new_mean += &z;
            posts.push((z, cov));
        }
        new_mean /= groups.len() as f64;
        let mut new_between = DMatrix::zeros(dim, dim);
        let mut new_within = DMatrix::zeros(dim, dim);
        for (g, (z, cov)) in groups.iter().zip(&posts) {
            let c = z - &new_mean;
            new_between += cov + &c * c.transpose();
            for &i in g {
                let e = &data[i] - z;
                new_within += cov + &e * e.transpose();
            }
        }
        model = TwoCovariance {
            mean: new_mean,
            between: floor_psd(&(new_between / groups.len() as f64), COVARIANCE_FLOOR),
            within: floor_psd(&(new_within / total), COVARIANCE_FLOOR),
        };
    }
    Ok(model)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PldaModel {
    /// Global mean removed before length normalization.
    pub input_mean: DVector<f64>,
    /// `[out x in]` LDA-style projection applied after length normalization.
    pub projection: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub between_cov: DMatrix<f64>,
    pub within_cov: DMatrix<f64>,
    /// Quadratic form of the log-likelihood ratio in the stacked pair.
    score_quad: DMatrix<f64>,
    score_const: f64,
}

#[derive(Clone, Debug)]
pub struct PldaConfig {
    pub out_dim: usize,
    pub em_iters: usize,
}

impl Default for PldaConfig {
    fn default() -> Self {
        Self {
            out_dim: PLDA_DIM,
            em_iters: 10,
        }
    }
}

fn length_normalize(mut v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v /= n;
    }
    v
}

/// Centers, length-normalizes and projects to `out_dim` discriminant
/// directions, then fits a two-covariance PLDA model there.
pub fn train_plda(ivectors: &[DVector<f64>], labels: &[usize], cfg: &PldaConfig) -> Result<PldaModel> {
    if ivectors.len() != labels.len() || ivectors.is_empty() {
        return Err(Error::InvalidInput("need one label per i-vector".into()));
    }
    let groups = classes(labels);
    if groups.len() < 2 || groups.iter().all(|g| g.len() < 2) {
        return Err(Error::InsufficientData(
            "PLDA needs two classes and a class with two samples".into(),
        ));
    }
    let dim = ivectors[0].len();
    let total = ivectors.len() as f64;
    let input_mean = ivectors.iter().fold(DVector::zeros(dim), |a, x| a + x) / total;
    let normed: Vec<DVector<f64>> = ivectors
        .iter()
        .map(|x| length_normalize(x - &input_mean))
        .collect();
    let projection = discriminant_projection(&normed, &groups, cfg.out_dim)?;
    let projected: Vec<DVector<f64>> = normed.iter().map(|x| &projection * x).collect();
    let fit = fit_two_covariance(&projected, labels, cfg.em_iters)?;
    PldaModel::from_parts(input_mean, projection, fit)
}

/// Rows are discriminant directions within the principal subspace of the
/// total scatter, sorted by decreasing between/within ratio.
fn discriminant_projection(data: &[DVector<f64>], groups: &[Vec<usize>], out_dim: usize) -> Result<DMatrix<f64>> {
    let dim = data[0].len();
    let total = data.len() as f64;
    let mean = data.iter().fold(DVector::zeros(dim), |a, x| a + x) / total;
    let mut scatter = DMatrix::zeros(dim, dim);
    for x in data {
        let c = x - &mean;
        scatter += &c * c.transpose();
    }
    scatter /= total;
    let eig = SymmetricEigen::new(scatter.clone());
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..dim)
        .filter(|&i| eig.eigenvalues[i] > 1e-10 * max.max(1e-300))
        .collect();
    if out_dim == 0 || out_dim > keep.len() {
        return Err(Error::InsufficientData(format!(
            "requested {out_dim} PLDA dimensions, data spans {}",
            keep.len()
        )));
    }
    // Basis of the populated subspace, [dim x r].
    let basis = DMatrix::from_fn(dim, keep.len(), |i, j| eig.eigenvectors[(i, keep[j])]);
    let reduced: Vec<DVector<f64>> = data.iter().map(|x| basis.tr_mul(&(x - &mean))).collect();
    let r = keep.len();
    let mut sw = DMatrix::zeros(r, r);
    let mut sb = DMatrix::zeros(r, r);
    for g in groups {
        let m = g.iter().fold(DVector::zeros(r), |a, &i| a + &reduced[i]) / g.len() as f64;
        sb += &m * m.transpose() * g.len() as f64;
        for &i in g {
            let c = &reduced[i] - &m;
            sw += &c * c.transpose();
        }
    }
    sw /= total;
    sb /= total;
    let ridge = 1e-6 * sw.trace().max(sb.trace()) / r as f64 + 1e-12;
    let sw_eig = SymmetricEigen::new((&sw + &sw.transpose()) * 0.5 + DMatrix::identity(r, r) * ridge);
    let inv_sqrt = &sw_eig.eigenvectors
        * DMatrix::from_diagonal(&sw_eig.eigenvalues.map(|v| 1.0 / v.max(ridge).sqrt()))
        * sw_eig.eigenvectors.transpose();
    let whitened_between = &inv_sqrt * &sb * &inv_sqrt;
    let lda = SymmetricEigen::new((&whitened_between + whitened_between.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| lda.eigenvalues[b].total_cmp(&lda.eigenvalues[a]).then(a.cmp(&b)));
    let directions = DMatrix::from_fn(r, out_dim, |i, j| lda.eigenvectors[(i, order[j])]);
    // Rows: directions^T * Sw^-1/2 * basis^T.
    Ok((basis * inv_sqrt * directions).transpose())
}

impl PldaModel {
    pub fn from_parts(input_mean: DVector<f64>, projection: DMatrix<f64>, fit: TwoCovariance) -> Result<Self> {
        let d = fit.mean.len();
        if projection.nrows() != d || projection.ncols() != input_mean.len() {
            return Err(Error::ModelMismatch("projection does not match model dimensions".into()));
        }
        let total = &fit.between + &fit.within;
        let mut same = DMatrix::zeros(2 * d, 2 * d);
        let mut diff = DMatrix::zeros(2 * d, 2 * d);
        for (mat, off) in [(&mut same, true), (&mut diff, false)] {
            mat.view_mut((0, 0), (d, d)).copy_from(&total);
            mat.view_mut((d, d), (d, d)).copy_from(&total);
            if off {
                mat.view_mut((0, d), (d, d)).copy_from(&fit.between);
                mat.view_mut((d, 0), (d, d)).copy_from(&fit.between);
            }
        }
        let chol_same = Cholesky::new(same)
            .ok_or_else(|| Error::InvalidState("same-speaker covariance is singular".into()))?;
        let chol_diff = Cholesky::new(diff)
            .ok_or_else(|| Error::InvalidState("different-speaker covariance is singular".into()))?;
        let log_det = |c: &Cholesky<f64, nalgebra::Dyn>| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let raw = chol_same.inverse() - chol_diff.inverse();
        // Enforce the exchange symmetry of the pair model exactly.
        let a = (raw.view((0, 0), (d, d)) + raw.view((d, d), (d, d))) * 0.5;
        let c = (raw.view((0, d), (d, d)) + raw.view((d, 0), (d, d)).transpose()) * 0.5;
        let a = (&a + a.transpose()) * 0.5;
        let c = (&c + c.transpose()) * 0.5;
        let mut quad = DMatrix::zeros(2 * d, 2 * d);
        quad.view_mut((0, 0), (d, d)).copy_from(&a);
        quad.view_mut((d, d), (d, d)).copy_from(&a);
        quad.view_mut((0, d), (d, d)).copy_from(&c);
        quad.view_mut((d, 0), (d, d)).copy_from(&c);
        Ok(Self {
            input_mean,
            projection,
            mean: fit.mean,
            between_cov: fit.between,
            within_cov: fit.within,
            score_const: -0.5 * (log_det(&chol_same) - log_det(&chol_diff)),
            score_quad: quad,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// Length-normalized, projected representation used for scoring and for
    /// the PLDA-space SVM features.
    pub fn transform(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if self.output_dim() == 0 || x.len() != self.input_dim() {
            return Err(Error::ModelMismatch(format!(
                "PLDA model expects {}-dimensional input, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(&self.projection * length_normalize(x - &self.input_mean))
    }

    /// Log-likelihood ratio of two already projected vectors.
    pub fn score_projected(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let d = self.output_dim();
        let ca = a - &self.mean;
        let cb = b - &self.mean;
        let diag = self.score_quad.view((0, 0), (d, d));
        let cross = self.score_quad.view((0, d), (d, d));
        let qa = ca.dot(&(diag * &ca));
        let qb = cb.dot(&(diag * &cb));
        let qab = ca.dot(&(cross * &cb)) + cb.dot(&(cross * &ca));
        -0.5 * ((qa + qb) + qab) + self.score_const
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, b"VXP1")?;
        binio::write_u32(w, self.input_dim())?;
        binio::write_u32(w, self.output_dim())?;
        binio::write_f64s(w, self.input_mean.iter().copied())?;
        binio::write_f64s(w, self.projection.transpose().iter().copied())?;
        binio::write_f64s(w, self.mean.iter().copied())?;
        binio::write_f64s(w, self.between_cov.transpose().iter().copied())?;
        binio::write_f64s(w, self.within_cov.transpose().iter().copied())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, b"VXP1")?;
        let input = binio::read_u32(r)?;
        let out = binio::read_u32(r)?;
        let input_mean = DVector::from_vec(binio::read_f64s(r, input)?);
        let projection = DMatrix::from_row_slice(out, input, &binio::read_f64s(r, out * input)?);
        let mean = DVector::from_vec(binio::read_f64s(r, out)?);
        let between = DMatrix::from_row_slice(out, out, &binio::read_f64s(r, out * out)?);
        let within = DMatrix::from_row_slice(out, out, &binio::read_f64s(r, out * out)?);
        Self::from_parts(input_mean, projection, TwoCovariance { mean, between, within })
    }
}

/// Same-speaker versus different-speaker log-likelihood ratio.
pub fn plda_score(model: &PldaModel, a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    let pa = model.transform(a)?;
    let pb = model.transform(b)?;
    Ok(model.score_projected(&pa, &pb))
}

// ---------------------------------------------------------------------------
// One-vs-rest linear SVM

/// Per-class hyperplanes; row `c` holds the weights then the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    pub weights: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct SvmTraining {
    pub model: LinearSvm,
    pub chosen_c: f64,
    pub validation_accuracy: f64,
    /// Best-so-far primal objective per epoch for each class, chosen C.
    pub loss_history: Vec<Vec<f64>>,
}

const NORM_TOLERANCE: f64 = 1e-6;

fn check_unit(x: &DVector<f64>) -> Result<()> {
    if (x.norm() - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "SVM inputs must be L2-normalized, found norm {}",
            x.norm()
        )));
    }
    Ok(())
}

fn augmented(x: &DVector<f64>) -> DVector<f64> {
    x.clone().insert_row(x.len(), 1.0)
}

/// `0.5 |w|^2 + C * mean hinge` for one binary problem.
fn svm_objective(w: &DVector<f64>, data: &[DVector<f64>], y: &[f64], c: f64) -> f64 {
    let hinge: f64 = data
        .iter()
        .zip(y)
        .map(|(x, yi)| (1.0 - yi * w.dot(x)).max(0.0))
        .sum::<f64>()
        / data.len() as f64;
    0.5 * w.norm_squared() + c * hinge
}

/// Full-batch sub-gradient descent with step `C / t` (that is `1/(lambda t)`
/// with `lambda = 1/C`), projection onto the ball of radius `sqrt(C)`, and
/// the best iterate retained.
fn train_binary(data: &[DVector<f64>], y: &[f64], c: f64, epochs: usize) -> (DVector<f64>, Vec<f64>) {
    let dim = data[0].len();
    let n = data.len() as f64;
    let mut w = DVector::zeros(dim);
    let mut best = w.clone();
    let mut best_obj = svm_objective(&w, data, y, c);
    let mut history = Vec::with_capacity(epochs);
    let radius = c.sqrt();
    for t in 1..=epochs {
        let mut grad = w.clone();
        let mut hinge = DVector::zeros(dim);
        for (x, yi) in data.iter().zip(y) {
            if yi * w.dot(x) < 1.0 {
                hinge.axpy(*yi, x, 1.0);
            }
        }
        grad.axpy(-c / n, &hinge, 1.0);
        w.axpy(-c / t as f64, &grad, 1.0);
        let norm = w.norm();
        if norm > radius {
            w *= radius / norm;
        }
        let obj = svm_objective(&w, data, y, c);
        if obj < best_obj {
            best_obj = obj;
            best = w.clone();
        }
        history.push(best_obj);
    }
    (best, history)
}

fn class_count(labels: &[usize]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m + 1)
}

/// Trains one binary SVM per class for each C and keeps the C with the best
/// validation top-1 accuracy (ties go to the smaller C).
pub fn train_ovr_svm(
    features: &[DVector<f64>],
    labels: &[usize],
    c_grid: &[f64],
    validation: (&[DVector<f64>], &[usize]),
    seed: u64,
) -> Result<SvmTraining> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::InvalidInput("need one label per training vector".into()));
    }
    if validation.0.len() != validation.1.len() {
        return Err(Error::InvalidInput("need one label per validation vector".into()));
    }
    if c_grid.is_empty() || c_grid.iter().any(|&c| !(c > 0.0)) {
        return Err(Error::InvalidInput("C grid must hold positive values".into()));
    }
    let classes = class_count(labels);
    if classes < 2 {
        return Err(Error::InvalidInput("SVM needs at least two classes".into()));
    }
    for x in features.iter().chain(validation.0) {
        check_unit(x)?;
    }
    // Summation order is a seeded permutation of the training set.
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut crate::rng::seeded(seed));
    let data: Vec<DVector<f64>> = order.iter().map(|&i| augmented(&features[i])).collect();
    let ordered_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let mut grid: Vec<f64> = c_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut best: Option<SvmTraining> = None;
    for &c in &grid {
        let fitted: Vec<(DVector<f64>, Vec<f64>)> = (0..classes)
            .into_par_iter()
            .map(|cls| {
                let y: Vec<f64> = ordered_labels
                    .iter()
                    .map(|&l| if l == cls { 1.0 } else { -1.0 })
                    .collect();
                train_binary(&data, &y, c, SVM_EPOCHS)
            })
            .collect();
        let dim = data[0].len();
        let mut weights = DMatrix::zeros(classes, dim);
        for (cls, (w, _)) in fitted.iter().enumerate() {
            weights.row_mut(cls).copy_from(&w.transpose());
        }
        let model = LinearSvm { weights };
        let correct = validation
            .0
            .iter()
            .zip(validation.1)
            .filter(|(x, &l)| svm_classify(&model, x).map(|p| p == l).unwrap_or(false))
            .count();
        let acc = if validation.0.is_empty() {
            0.0
        } else {
            correct as f64 / validation.0.len() as f64
        };
        if best.as_ref().is_none_or(|b| acc > b.validation_accuracy) {
            best = Some(SvmTraining {
                model,
                chosen_c: c,
                validation_accuracy: acc,
                loss_history: fitted.into_iter().map(|(_, h)| h).collect(),
            });
        }
    }
    Ok(best.expect("non-empty grid"))
}

impl LinearSvm {
    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols().saturating_sub(1)
    }

    /// Per-class decision values.
    pub fn scores(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::ModelMismatch(format!(
                "SVM expects {}-dimensional input, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(&self.weights * augmented(x))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        write_matrix(w, b"VXS1", &self.weights)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        Ok(Self {
            weights: read_matrix(r, b"VXS1")?,
        })
    }
}

/// Highest-scoring class; ties go to the lowest class id.
pub fn svm_classify(model: &LinearSvm, x: &DVector<f64>) -> Result<usize> {
    let scores = model.scores(x)?;
    check_unit(x)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand_distr::StandardNormal;

    fn toy_ubm() -> DiagonalGmm {
        DiagonalGmm::new(
            ndarray::array![0.3, 0.3, 0.4],
            array![[0.0, 0.0], [2.0, 1.0], [-2.0, 1.0]],
            array![[1.0, 0.5], [0.7, 1.2], [1.1, 0.9]],
        )
        .unwrap()
    }

    fn randn(rng: &mut crate::rng::Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    #[test]
    fn stats_conserve_mass_and_match_naive_loop() {
        let ubm = toy_ubm();
        let mut rng = crate::rng::seeded(1);
        let x = Array2::from_shape_fn((2, 57), |_| 2.0 * randn(&mut rng));
        let stats = accumulate_stats(&ubm, x.view()).unwrap();
        assert!((stats.n.sum() - 57.0).abs() < 1e-6);
        // Direct double loop over frames and components.
        let (mut n, mut f) = (vec![0.0; 3], vec![[0.0; 2]; 3]);
        for t in 0..57 {
            let dens: Vec<f64> = (0..3)
                .map(|k| {
                    let mut p = ubm.weights[k];
                    for d in 0..2 {
                        let v = ubm.variances[[k, d]];
                        let diff = x[[d, t]] - ubm.means[[k, d]];
                        p *= (-0.5 * diff * diff / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                    }
                    p
                })
                .collect();
            let total: f64 = dens.iter().sum();
            for k in 0..3 {
                let g = dens[k] / total;
                n[k] += g;
                for d in 0..2 {
                    f[k][d] += g * (x[[d, t]] - ubm.means[[k, d]]);
                }
            }
        }
        for k in 0..3 {
            assert!((stats.n[k] - n[k]).abs() < 1e-10);
            for d in 0..2 {
                assert!((stats.f[(k, d)] - f[k][d]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_component_first_order_is_centered_sum() {
        let ubm = DiagonalGmm::new(ndarray::array![1.0], array![[1.0, -1.0]], array![[1.0, 1.0]]).unwrap();
        let x = array![[0.5, 2.0, 3.0], [1.0, 1.0, -4.0]];
        let s = accumulate_stats(&ubm, x.view()).unwrap();
        assert_eq!(s.n[0], 3.0);
        assert_eq!(s.f[(0, 0)], 0.5 + 2.0 + 3.0 - 3.0);
        assert_eq!(s.f[(0, 1)], 1.0 + 1.0 - 4.0 + 3.0);
    }

    fn random_model(k: usize, d: usize, r: usize, seed: u64) -> TotalVariabilityModel {
        let mut rng = crate::rng::seeded(seed);
        let means = Array2::from_shape_fn((k, d), |_| randn(&mut rng));
        let vars = Array2::from_shape_fn((k, d), |_| 0.5 + randn(&mut rng).abs());
        let ubm = DiagonalGmm::new(ndarray::Array1::from_elem(k, 1.0 / k as f64), means, vars).unwrap();
        TotalVariabilityModel {
            t: DMatrix::from_fn(k * d, r, |_, _| randn(&mut rng)),
            ubm,
        }
    }

    fn random_stats(k: usize, d: usize, rng: &mut crate::rng::Rng) -> BaumWelchStats {
        BaumWelchStats {
            n: DVector::from_fn(k, |_, _| 10.0 * randn(rng).abs()),
            f: DMatrix::from_fn(k, d, |_, _| 3.0 * randn(rng)),
        }
    }

    // Dense oracle: build the full supervector system explicitly.
    fn dense_ivector(model: &TotalVariabilityModel, s: &BaumWelchStats) -> DVector<f64> {
        let (k, d) = (model.ubm.components(), model.ubm.dim());
        let kd = k * d;
        let mut n_big = DMatrix::zeros(kd, kd);
        let mut sigma_inv = DMatrix::zeros(kd, kd);
        let mut f = DVector::zeros(kd);
        for c in 0..k {
            for j in 0..d {
                let i = c * d + j;
                n_big[(i, i)] = s.n[c];
                sigma_inv[(i, i)] = 1.0 / model.ubm.variances[[c, j]];
                f[i] = s.f[(c, j)];
            }
        }
        let t = &model.t;
        let r = t.ncols();
        let l = DMatrix::identity(r, r) + t.transpose() * &sigma_inv * &n_big * t;
        l.lu().solve(&(t.transpose() * &sigma_inv * f)).unwrap()
    }

    #[test]
    fn extraction_matches_dense_oracle() {
        let model = random_model(2, 2, 1, 3);
        let mut rng = crate::rng::seeded(4);
        for _ in 0..10 {
            let s = random_stats(2, 2, &mut rng);
            let w = extract_ivector(&model, &s).unwrap();
            assert!((w - dense_ivector(&model, &s)).amax() < 1e-10);
        }
        let model = random_model(4, 4, 3, 5);
        let s = random_stats(4, 4, &mut rng);
        let w = extract_ivector(&model, &s).unwrap();
        assert!((w - dense_ivector(&model, &s)).amax() < 1e-10);
    }

    #[test]
    fn empty_utterance_gives_prior_mean() {
        let model = random_model(3, 2, 2, 6);
        let w = extract_ivector(&model, &BaumWelchStats::zeros(3, 2)).unwrap();
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn more_data_shrinks_toward_ml_estimate() {
        let model = random_model(3, 2, 2, 7);
        let mut rng = crate::rng::seeded(8);
        let s = random_stats(3, 2, &mut rng);
        let w1 = extract_ivector(&model, &s).unwrap();
        let w2 = extract_ivector(&model, &s.scaled(2.0)).unwrap();
        // Maximum-likelihood point: (T' S^-1 N T)^-1 T' S^-1 f.
        let mut a = DMatrix::zeros(2, 2);
        for (nk, pk) in s.n.iter().zip(model.component_precisions()) {
            a += pk * *nk;
        }
        let ml = a.lu().solve(&model.project_stats(&s)).unwrap();
        assert!((&w2 - &ml).norm() < (&w1 - &ml).norm());
    }

    #[test]
    fn mismatched_stats_are_rejected() {
        let model = random_model(3, 2, 2, 9);
        assert!(matches!(
            extract_ivector(&model, &BaumWelchStats::zeros(2, 2)),
            Err(Error::ModelMismatch(_))
        ));
    }

    #[test]
    fn identical_utterances_give_identical_ivectors() {
        let model = random_model(3, 2, 1, 10);
        let mut rng = crate::rng::seeded(11);
        let s = random_stats(3, 2, &mut rng);
        let stats = vec![s; 5];
        let trained = train_total_variability(&model.ubm, &stats, 1, 5, 1).unwrap();
        let ivs = extract_ivectors(&trained.model, &stats).unwrap();
        for w in &ivs {
            assert!((w - &ivs[0]).amax() < 1e-6);
        }
    }

    #[test]
    fn too_few_utterances_for_rank() {
        let model = random_model(2, 2, 1, 12);
        let stats = vec![BaumWelchStats::zeros(2, 2); 2];
        assert!(matches!(
            train_total_variability(&model.ubm, &stats, 3, 1, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn tv_objective_is_monotone() {
        let truth = random_model(3, 2, 2, 13);
        let mut rng = crate::rng::seeded(14);
        let stats: Vec<BaumWelchStats> = (0..40).map(|_| random_stats(3, 2, &mut rng)).collect();
        let out = train_total_variability(&truth.ubm, &stats, 2, 10, 3).unwrap();
        for w in out.objective.windows(2) {
            assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "{w:?}");
        }
    }

    fn sample_two_cov(
        between: &DMatrix<f64>,
        within: &DMatrix<f64>,
        classes: usize,
        per_class: usize,
        rng: &mut crate::rng::Rng,
    ) -> (Vec<DVector<f64>>, Vec<usize>) {
        let lb = between.clone().cholesky().unwrap().l();
        let lw = within.clone().cholesky().unwrap().l();
        let d = between.nrows();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            let z = &lb * DVector::from_fn(d, |_, _| randn(rng));
            for _ in 0..per_class {
                data.push(&z + &lw * DVector::from_fn(d, |_, _| randn(rng)));
                labels.push(c);
            }
        }
        (data, labels)
    }

    fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn two_covariance_fit_recovers_known_model() {
        let between = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let within = DMatrix::from_row_slice(2, 2, &[0.5, -0.1, -0.1, 0.3]);
        let mut rng = crate::rng::seeded(15);
        // Two classes with 1000 samples each pin down the within-class
        // covariance; the between-class covariance needs many classes.
        let (data, labels) = sample_two_cov(&between, &within, 2, 1_000, &mut rng);
        let fit = fit_two_covariance(&data, &labels, 10).unwrap();
        assert!(rel_frobenius(&fit.within, &within) < 0.1);
        let (data, labels) = sample_two_cov(&between, &within, 5_000, 4, &mut rng);
        let fit = fit_two_covariance(&data, &labels, 20).unwrap();
        assert!(rel_frobenius(&fit.within, &within) < 0.1);
        assert!(rel_frobenius(&fit.between, &between) < 0.1, "{} {}", fit.between, rel_frobenius(&fit.between, &between));
    }

    #[test]
    fn zero_within_scatter_gives_vanishing_within_cov() {
        let mut rng = crate::rng::seeded(16);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..6 {
            let v = DVector::from_fn(4, |_, _| randn(&mut rng));
            for _ in 0..3 {
                data.push(v.clone());
                labels.push(c);
            }
        }
        let model = train_plda(&data, &labels, &PldaConfig { out_dim: 3, em_iters: 10 }).unwrap();
        assert!(model.within_cov.norm() < 1e-6, "{}", model.within_cov.norm());
    }

    #[test]
    fn projection_keeps_class_order_on_a_line() {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut rng = crate::rng::seeded(17);
        for (c, center) in [-3.0, 0.5, 4.0].iter().enumerate() {
            for _ in 0..30 {
                data.push(DVector::from_vec(vec![center + 0.2 * randn(&mut rng), 0.05 * randn(&mut rng)]));
                labels.push(c);
            }
        }
        let groups = classes(&labels);
        let proj = discriminant_projection(&data, &groups, 1).unwrap();
        let means: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().map(|&i| (&proj * &data[i])[0]).sum::<f64>() / g.len() as f64)
            .collect();
        let increasing = means.windows(2).all(|w| w[0] < w[1]);
        let decreasing = means.windows(2).all(|w| w[0] > w[1]);
        assert!(increasing || decreasing, "{means:?}");
    }

    #[test]
    fn out_dim_beyond_rank_is_rejected() {
        let data = vec![
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
            DVector::from_vec(vec![2.0, 0.0, 0.0]),
            DVector::from_vec(vec![-1.0, 0.0, 0.0]),
            DVector::from_vec(vec![-2.0, 0.0, 0.0]),
        ];
        let labels = vec![0, 0, 1, 1];
        assert!(matches!(
            train_plda(&data, &labels, &PldaConfig { out_dim: 3, em_iters: 2 }),
            Err(Error::InsufficientData(_))
        ));
    }

    fn identity_plda(between: DMatrix<f64>, within: DMatrix<f64>) -> PldaModel {
        let d = between.nrows();
        PldaModel::from_parts(
            DVector::zeros(d),
            DMatrix::identity(d, d),
            TwoCovariance {
                mean: DVector::zeros(d),
                between,
                within,
            },
        )
        .unwrap()
    }

    #[test]
    fn plda_score_is_symmetric_and_degenerates_without_between() {
        let mut rng = crate::rng::seeded(18);
        let b = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.5]);
        let w = DMatrix::from_row_slice(3, 3, &[0.4, 0.1, 0.0, 0.1, 0.3, 0.05, 0.0, 0.05, 0.6]);
        let model = identity_plda(b, w.clone());
        for _ in 0..50 {
            let a = DVector::from_fn(3, |_, _| randn(&mut rng));
            let c = DVector::from_fn(3, |_, _| randn(&mut rng));
            let s1 = model.score_projected(&a, &c);
            let s2 = model.score_projected(&c, &a);
            assert!((s1 - s2).abs() < 1e-10);
        }
        let flat = identity_plda(DMatrix::zeros(3, 3), w);
        let base = flat.score_projected(&DVector::zeros(3), &DVector::zeros(3));
        for _ in 0..20 {
            let a = DVector::from_fn(3, |_, _| randn(&mut rng));
            let c = DVector::from_fn(3, |_, _| randn(&mut rng));
            assert_eq!(flat.score_projected(&a, &c), base);
        }
    }

    #[test]
    fn plda_separates_model_samples() {
        let between = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.5, 1.0]));
        let within = DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.15, 0.2]));
        let model = identity_plda(between.clone(), within.clone());
        let mut rng = crate::rng::seeded(19);
        let (data, labels) = sample_two_cov(&between, &within, 250, 2, &mut rng);
        let mut same = Vec::new();
        let mut diff = Vec::new();
        for i in 0..250 {
            same.push(model.score_projected(&data[2 * i], &data[2 * i + 1]));
            let j = (i + 1) % 250;
            diff.push(model.score_projected(&data[2 * i], &data[2 * j + 1]));
            assert_ne!(labels[2 * i], labels[2 * j + 1]);
        }
        let wins = same
            .iter()
            .flat_map(|s| diff.iter().map(move |d| if s > d { 1.0 } else if s == d { 0.5 } else { 0.0 }))
            .sum::<f64>();
        let auc = wins / (same.len() * diff.len()) as f64;
        assert!(auc > 0.9, "auc {auc}");
    }

    #[test]
    fn untrained_plda_is_rejected() {
        let model = PldaModel::default();
        let v = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(plda_score(&model, &v, &v), Err(Error::ModelMismatch(_))));
    }

    fn unit(v: Vec<f64>) -> DVector<f64> {
        let v = DVector::from_vec(v);
        let n = v.norm();
        v / n
    }

    fn circle_data(rng: &mut crate::rng::Rng, n: usize) -> (Vec<DVector<f64>>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let base = if class == 0 { 0.0 } else { std::f64::consts::PI };
            let angle = base + (rand::Rng::gen::<f64>(rng) - 0.5) * 2.0;
            xs.push(unit(vec![angle.cos(), angle.sin()]));
            ys.push(class);
        }
        (xs, ys)
    }

    #[test]
    fn separable_circle_is_fit_exactly() {
        let mut rng = crate::rng::seeded(20);
        let (xs, ys) = circle_data(&mut rng, 200);
        let out = train_ovr_svm(&xs, &ys, &[10.0], (&xs, &ys), 1).unwrap();
        assert_eq!(out.validation_accuracy, 1.0);
        assert_eq!(out.chosen_c, 10.0);
        for h in &out.loss_history {
            assert!(h.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn duplicated_training_set_gives_same_weights() {
        let mut rng = crate::rng::seeded(21);
        let (xs, ys) = circle_data(&mut rng, 60);
        let a = train_ovr_svm(&xs, &ys, &[1.0], (&xs, &ys), 3).unwrap();
        let xs2: Vec<_> = xs.iter().chain(&xs).cloned().collect();
        let ys2: Vec<_> = ys.iter().chain(&ys).copied().collect();
        let b = train_ovr_svm(&xs2, &ys2, &[1.0], (&xs, &ys), 3).unwrap();
        assert!((&a.model.weights - &b.model.weights).amax() < 1e-9);
        let again = train_ovr_svm(&xs, &ys, &[1.0], (&xs, &ys), 3).unwrap();
        assert_eq!(a.model, again.model);
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let xs = vec![DVector::from_vec(vec![2.0, 0.0]), unit(vec![0.0, 1.0])];
        assert!(matches!(
            train_ovr_svm(&xs, &[0, 1], &[1.0], (&[], &[]), 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn classify_picks_argmax_with_low_id_ties() {
        let one = LinearSvm {
            weights: DMatrix::from_row_slice(1, 3, &[0.3, -0.2, 0.1]),
        };
        assert_eq!(svm_classify(&one, &unit(vec![1.0, 1.0])).unwrap(), 0);
        let w = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 5.0, 0.0, -1.0, 0.0, 0.0]);
        let model = LinearSvm { weights: w.clone() };
        assert_eq!(svm_classify(&model, &unit(vec![0.0, 1.0])).unwrap(), 1);
        let mut shifted = w.clone();
        for r in 0..3 {
            shifted[(r, 2)] += 7.5;
        }
        let x = unit(vec![0.3, 0.8]);
        assert_eq!(
            svm_classify(&model, &x).unwrap(),
            svm_classify(&LinearSvm { weights: shifted }, &x).unwrap()
        );
        let tied = LinearSvm {
            weights: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
        };
        assert_eq!(svm_classify(&tied, &unit(vec![1.0, 0.0])).unwrap(), 0);
        assert!(matches!(
            svm_classify(&model, &unit(vec![1.0, 0.0, 0.0])),
            Err(Error::ModelMismatch(_))
        ));
    }

    #[test]
    fn c_selection_uses_validation_accuracy() {
        let mut rng = crate::rng::seeded(22);
        let (xs, ys) = circle_data(&mut rng, 40);
        let out = train_ovr_svm(&xs, &ys, &[5.0, 0.5, 50.0], (&xs, &ys), 0).unwrap();
        // Every C separates this set, so the smallest wins the tie.
        assert_eq!(out.validation_accuracy, 1.0);
        assert_eq!(out.chosen_c, 0.5);
    }

    #[test]
    fn model_files_round_trip() {
        let model = random_model(2, 3, 2, 23);
        let mut bytes = Vec::new();
        model.write(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"VXT1");
        let back = TotalVariabilityModel::read(&mut bytes.as_slice(), model.ubm.clone()).unwrap();
        assert_eq!(back.t, model.t);

        let plda = identity_plda(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.5);
        let mut bytes = Vec::new();
        plda.write(&mut bytes).unwrap();
        assert_eq!(PldaModel::read(&mut bytes.as_slice()).unwrap(), plda);

        let svm = LinearSvm {
            weights: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        };
        let mut bytes = Vec::new();
        svm.write(&mut bytes).unwrap();
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[20..28], &2.0f64.to_le_bytes());
        assert_eq!(LinearSvm::read(&mut bytes.as_slice()).unwrap(), svm);
    }
}
