//! One-shot distributed aggregation of local maximum-likelihood fits.
//!
//! Each machine contributes a fitted model. The KL estimators bootstrap
//! samples from the local models and refit the family on the pooled draws;
//! the control and weighted variants remove most of the bootstrap noise.

use crate::error::{invalid, Result, SteinError};
use crate::mat::{log_sum_exp, ols_slope};
use crate::rng::substream;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, RngCore};
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Ridge added to a covariance that fails to factor.
pub const COV_RIDGE: f64 = 1e-8;
/// Log importance ratios are clipped to this magnitude.
pub const LOG_RATIO_CLIP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { tol: 1e-6, max_iter: 500 }
    }
}

fn cholesky(cov: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    cov.clone().cholesky()
}

/// Factor, adding `COV_RIDGE` once if needed. The flag reports the ridge.
fn regularize(cov: DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if cholesky(&cov).is_some() {
        return Ok((cov, false));
    }
    let p = cov.nrows();
    let fixed = cov + DMatrix::identity(p, p) * COV_RIDGE;
    if cholesky(&fixed).is_none() {
        return Err(SteinError::Numerical("covariance is not positive definite even after ridge".into()));
    }
    Ok((fixed, true))
}

fn gaussian_log_pdf_chol(x: &DVector<f64>, mean: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let diff = x - mean;
    let z = chol.l().solve_lower_triangular(&diff).expect("triangular factor is invertible");
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    -0.5 * (z.norm_squared() + logdet + mean.len() as f64 * (2.0 * PI).ln())
}

/// Index pairs of the lower triangle, row by row.
fn vech_pairs(p: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..p).flat_map(|a| (0..=a).map(move |b| (a, b)))
}

fn vech(m: &DMatrix<f64>) -> Vec<f64> {
    vech_pairs(m.nrows()).map(|(a, b)| m[(a, b)]).collect()
}

fn unvech(v: &[f64], p: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(p, p);
    for ((a, b), x) in vech_pairs(p).zip(v) {
        m[(a, b)] = *x;
        m[(b, a)] = *x;
    }
    m
}

/// Gradient of `log N(x | mu, cov)` with respect to `vech(cov)`.
fn cov_score(diff: &DVector<f64>, inv: &DMatrix<f64>) -> Vec<f64> {
    let y = inv * diff;
    let g = (&y * y.transpose() - inv) * 0.5;
    vech_pairs(diff.len()).map(|(a, b)| if a == b { g[(a, a)] } else { 2.0 * g[(a, b)] }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() || mean.is_empty() {
            return invalid("mean and covariance shapes do not match");
        }
        if cholesky(&cov).is_none() {
            return invalid("covariance must be positive definite");
        }
        Ok(GaussianParams { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        gaussian_log_pdf_chol(x, &self.mean, &cholesky(&self.cov).expect("validated covariance"))
    }

    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Vec<DVector<f64>> {
        let l = cholesky(&self.cov).expect("validated covariance").l();
        (0..n)
            .map(|_| {
                let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
                &self.mean + &l * z
            })
            .collect()
    }

    /// `(mean, vech(cov))`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.mean.iter().copied().collect();
        v.extend(vech(&self.cov));
        v
    }

    pub fn from_vec(v: &[f64], dim: usize) -> Result<Self> {
        if v.len() != dim + dim * (dim + 1) / 2 {
            return invalid("parameter vector has the wrong length");
        }
        GaussianParams::new(DVector::from_column_slice(&v[..dim]), unvech(&v[dim..], dim))
    }

    pub fn score_vec(&self, x: &DVector<f64>) -> Vec<f64> {
        let inv = self.cov.clone().try_inverse().expect("validated covariance");
        let diff = x - &self.mean;
        let mut s: Vec<f64> = (&inv * &diff).iter().copied().collect();
        s.extend(cov_score(&diff, &inv));
        s
    }
}

/// Weighted MLE: weighted mean and biased covariance.
pub fn gaussian_mle(data: &[DVector<f64>], weights: Option<&[f64]>) -> Result<(GaussianParams, bool)> {
    let n = data.len();
    if n == 0 {
        return invalid("no data");
    }
    let p = data[0].len();
    let w: Vec<f64> = weights.map(|w| w.to_vec()).unwrap_or_else(|| vec![1.0; n]);
    if w.len() != n || w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return invalid("weights must be finite and non-negative, one per point");
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return invalid("weights sum to zero");
    }
    let mut mean = DVector::zeros(p);
    for (x, wi) in data.iter().zip(&w) {
        mean += x * *wi;
    }
    mean /= total;
    let mut cov = DMatrix::zeros(p, p);
    for (x, wi) in data.iter().zip(&w) {
        let d = x - &mean;
        cov += &d * d.transpose() * *wi;
    }
    cov /= total;
    let (cov, ridged) = regularize(cov)?;
    Ok((GaussianParams { mean, cov }, ridged))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return invalid("mixture needs matching weights, means and covariances");
        }
        if weights.iter().any(|w| !(*w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return invalid("mixture weights must be positive and sum to one");
        }
        let p = means[0].len();
        for (m, c) in means.iter().zip(&covs) {
            if m.len() != p || c.nrows() != p || c.ncols() != p || cholesky(c).is_none() {
                return invalid("every component needs a matching positive definite covariance");
            }
        }
        Ok(GmmParams { weights, means, covs })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn component_logs(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.k())
            .map(|c| self.weights[c].ln() + gaussian_log_pdf_chol(x, &self.means[c], &cholesky(&self.covs[c]).expect("validated covariance")))
            .collect()
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        log_sum_exp(&self.component_logs(x))
    }

    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Vec<DVector<f64>> {
        let ls: Vec<_> = self.covs.iter().map(|c| cholesky(c).expect("validated covariance").l()).collect();
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut c = self.k() - 1;
                for (i, w) in self.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        c = i;
                        break;
                    }
                }
                let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
                &self.means[c] + &ls[c] * z
            })
            .collect()
    }

    /// `(w_1..w_{K-1}, mean_1, vech(cov_1), ..., mean_K, vech(cov_K))`; the
    /// last weight is implied by the simplex.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.weights[..self.k() - 1].to_vec();
        for (m, c) in self.means.iter().zip(&self.covs) {
            v.extend(m.iter());
            v.extend(vech(c));
        }
        v
    }

    pub fn from_vec(v: &[f64], k: usize, dim: usize) -> Result<Self> {
        let block = dim + dim * (dim + 1) / 2;
        if k == 0 || v.len() != k - 1 + k * block {
            return invalid("parameter vector has the wrong length");
        }
        let mut weights = v[..k - 1].to_vec();
        weights.push(1.0 - weights.iter().sum::<f64>());
        let mut means = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for c in 0..k {
            let b = &v[k - 1 + c * block..k - 1 + (c + 1) * block];
            means.push(DVector::from_column_slice(&b[..dim]));
            covs.push(unvech(&b[dim..], dim));
        }
        GmmParams::new(weights, means, covs)
    }

    pub fn score_vec(&self, x: &DVector<f64>) -> Vec<f64> {
        let logs = self.component_logs(x);
        let lse = log_sum_exp(&logs);
        let r: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
        let k = self.k();
        let mut s: Vec<f64> = (0..k - 1).map(|c| r[c] / self.weights[c] - r[k - 1] / self.weights[k - 1]).collect();
        for c in 0..k {
            let inv = self.covs[c].clone().try_inverse().expect("validated covariance");
            let diff = x - &self.means[c];
            s.extend((&inv * &diff).iter().map(|v| r[c] * v));
            s.extend(cov_score(&diff, &inv).into_iter().map(|v| r[c] * v));
        }
        s
    }

    /// Reorder components by `perm`, so component `i` becomes `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> GmmParams {
        GmmParams {
            weights: perm.iter().map(|&j| self.weights[j]).collect(),
            means: perm.iter().map(|&j| self.means[j].clone()).collect(),
            covs: perm.iter().map(|&j| self.covs[j].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: GmmParams,
    /// Weighted mean log-likelihood after each iteration.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    pub ridged: bool,
}

fn weighted_pick(w: &[f64], rng: &mut dyn RngCore) -> usize {
    let total: f64 = w.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, v) in w.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    w.iter().rposition(|v| *v > 0.0).unwrap_or(0)
}

/// k-means++ seeding followed by nearest-center assignment.
fn kmeanspp_assign(data: &[DVector<f64>], w: &[f64], k: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut centers = vec![data[weighted_pick(w, rng)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| (x - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let scores: Vec<f64> = d2.iter().zip(w).map(|(a, b)| a * b).collect();
        let next = if scores.iter().sum::<f64>() > 0.0 { weighted_pick(&scores, rng) } else { weighted_pick(w, rng) };
        centers.push(data[next].clone());
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min((x - &centers[centers.len() - 1]).norm_squared());
        }
    }
    data.iter()
        .map(|x| {
            (0..k)
                .min_by(|a, b| (x - &centers[*a]).norm_squared().total_cmp(&(x - &centers[*b]).norm_squared()))
                .unwrap_or(0)
        })
        .collect()
}

fn m_step(data: &[DVector<f64>], w: &[f64], resp: &[Vec<f64>], k: usize) -> Result<(GmmParams, bool)> {
    let p = data[0].len();
    let total: f64 = w.iter().sum();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    let mut ridged = false;
    for c in 0..k {
        let nk: f64 = data.iter().enumerate().map(|(i, _)| w[i] * resp[i][c]).sum();
        if !(nk > 1e-10 * total) {
            return Err(SteinError::Numerical(format!("mixture component {c} lost all its mass")));
        }
        let mut mean = DVector::zeros(p);
        for (i, x) in data.iter().enumerate() {
            mean += x * (w[i] * resp[i][c]);
        }
        mean /= nk;
        let mut cov = DMatrix::zeros(p, p);
        for (i, x) in data.iter().enumerate() {
            let d = x - &mean;
            cov += &d * d.transpose() * (w[i] * resp[i][c]);
        }
        cov /= nk;
        let (cov, r) = regularize(cov)?;
        ridged |= r;
        weights.push(nk / total);
        means.push(mean);
        covs.push(cov);
    }
    Ok((GmmParams { weights, means, covs }, ridged))
}

/// Weighted EM for a `k`-component full-covariance mixture.
pub fn fit_gmm(data: &[DVector<f64>], weights: Option<&[f64]>, k: usize, opts: EmOptions, rng: &mut dyn RngCore) -> Result<EmFit> {
    let n = data.len();
    if k == 0 || n < k {
        return invalid("need at least one component and as many points as components");
    }
    let w: Vec<f64> = weights.map(|w| w.to_vec()).unwrap_or_else(|| vec![1.0; n]);
    if w.len() != n || w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || !(w.iter().sum::<f64>() > 0.0) {
        return invalid("weights must be finite, non-negative and not all zero");
    }
    let total: f64 = w.iter().sum();
    let assign = kmeanspp_assign(data, &w, k, rng);
    let mut resp: Vec<Vec<f64>> = assign.iter().map(|a| (0..k).map(|c| if c == *a { 1.0 } else { 0.0 }).collect()).collect();
    let (mut params, mut ridged) = m_step(data, &w, &resp, k)?;
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let mut ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            let logs = params.component_logs(x);
            let lse = log_sum_exp(&logs);
            ll += w[i] * lse;
            for c in 0..k {
                resp[i][c] = (logs[c] - lse).exp();
            }
        }
        ll /= total;
        let done = trace.last().is_some_and(|prev: &f64| (ll - prev).abs() < opts.tol);
        trace.push(ll);
        if done {
            converged = true;
            break;
        }
        let (next, r) = m_step(data, &w, &resp, k)?;
        params = next;
        ridged |= r;
    }
    Ok(EmFit { params, log_likelihood: trace, converged, ridged })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Gaussian(GaussianParams),
    Gmm(GmmParams),
}

impl ModelParams {
    pub fn family(&self) -> &'static str {
        match self {
            ModelParams::Gaussian(_) => "gaussian-meancov",
            ModelParams::Gmm(_) => "gmm",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelParams::Gaussian(g) => g.dim(),
            ModelParams::Gmm(g) => g.dim(),
        }
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        match self {
            ModelParams::Gaussian(g) => g.log_pdf(x),
            ModelParams::Gmm(g) => g.log_pdf(x),
        }
    }

    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Vec<DVector<f64>> {
        match self {
            ModelParams::Gaussian(g) => g.sample(n, rng),
            ModelParams::Gmm(g) => g.sample(n, rng),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            ModelParams::Gaussian(g) => g.to_vec(),
            ModelParams::Gmm(g) => g.to_vec(),
        }
    }

    /// Rebuild with this model's shape.
    pub fn with_vec(&self, v: &[f64]) -> Result<ModelParams> {
        match self {
            ModelParams::Gaussian(g) => Ok(ModelParams::Gaussian(GaussianParams::from_vec(v, g.dim())?)),
            ModelParams::Gmm(g) => Ok(ModelParams::Gmm(GmmParams::from_vec(v, g.k(), g.dim())?)),
        }
    }

    pub fn score_vec(&self, x: &DVector<f64>) -> Vec<f64> {
        match self {
            ModelParams::Gaussian(g) => g.score_vec(x),
            ModelParams::Gmm(g) => g.score_vec(x),
        }
    }

    /// Same-family weighted MLE on new data. Returns the fit and whether a
    /// covariance needed the ridge.
    pub fn refit(&self, data: &[DVector<f64>], weights: Option<&[f64]>, opts: EmOptions, rng: &mut dyn RngCore) -> Result<(ModelParams, bool)> {
        match self {
            ModelParams::Gaussian(_) => {
                let (g, r) = gaussian_mle(data, weights)?;
                Ok((ModelParams::Gaussian(g), r))
            }
            ModelParams::Gmm(g) => {
                let fit = fit_gmm(data, weights, g.k(), opts, rng)?;
                Ok((ModelParams::Gmm(fit.params), fit.ridged))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub params: ModelParams,
    pub machine: usize,
}

/// Local MLE on one machine's data. `components = None` fits a Gaussian.
pub fn local_mle(data: &[DVector<f64>], machine: usize, components: Option<usize>, opts: EmOptions, rng: &mut dyn RngCore) -> Result<(LocalModel, Vec<String>)> {
    let mut warnings = Vec::new();
    let params = match components {
        None => {
            if data.len() <= data.first().map_or(0, |x| x.len()) {
                return invalid("a Gaussian covariance needs more points than dimensions");
            }
            let (g, ridged) = gaussian_mle(data, None)?;
            if ridged {
                warnings.push(format!("machine {machine}: singular covariance regularized"));
            }
            ModelParams::Gaussian(g)
        }
        Some(k) => {
            let fit = fit_gmm(data, None, k, opts, rng)?;
            if fit.ridged {
                warnings.push(format!("machine {machine}: singular covariance regularized"));
            }
            if !fit.converged {
                warnings.push(format!("machine {machine}: EM hit the iteration limit"));
            }
            ModelParams::Gmm(fit.params)
        }
    };
    Ok((LocalModel { params, machine }, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    KlNaive,
    KlControl,
    KlWeighted,
    LinearAverage,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::KlNaive => "kl-naive",
            Method::KlControl => "kl-control",
            Method::KlWeighted => "kl-weighted",
            Method::LinearAverage => "linear-average",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AggregationResult {
    pub method: Method,
    /// Combined parameter vector in the family's layout.
    pub vector: Vec<f64>,
    /// The same estimate as a model; `None` when the vector is not a valid
    /// parameter (a control-variate correction can break definiteness).
    pub params: Option<ModelParams>,
    pub n_bootstrap: usize,
    pub machines: usize,
    pub warnings: Vec<String>,
}

fn check_models(models: &[LocalModel]) -> Result<()> {
    let first = models.first().ok_or_else(|| SteinError::InvalidArgument("no local models".into()))?;
    let shape = |m: &ModelParams| match m {
        ModelParams::Gaussian(g) => (0, g.dim()),
        ModelParams::Gmm(g) => (g.k(), g.dim()),
    };
    if models.iter().any(|m| shape(&m.params) != shape(&first.params)) {
        return invalid("local models must share family and shape");
    }
    Ok(())
}

struct Bootstrap {
    draws: Vec<Vec<DVector<f64>>>,
}

fn bootstrap(models: &[LocalModel], n: usize, rng: &mut dyn RngCore) -> Result<Bootstrap> {
    if n == 0 {
        return invalid("need at least one bootstrap draw per machine");
    }
    Ok(Bootstrap { draws: models.iter().map(|m| m.params.sample(n, rng)).collect() })
}

fn pooled_fit(models: &[LocalModel], boot: &Bootstrap, weights: Option<&[f64]>, opts: EmOptions, rng: &mut dyn RngCore) -> Result<(ModelParams, bool)> {
    let pooled: Vec<DVector<f64>> = boot.draws.iter().flatten().cloned().collect();
    models[0].params.refit(&pooled, weights, opts, rng)
}

fn ridge_warning(ridged: bool, warnings: &mut Vec<String>) {
    if ridged {
        warnings.push("singular covariance regularized".into());
    }
}

/// MLE of the pooled `d n` bootstrap draws.
pub fn kl_naive(models: &[LocalModel], n: usize, opts: EmOptions, rng: &mut dyn RngCore) -> Result<AggregationResult> {
    check_models(models)?;
    let boot = bootstrap(models, n, rng)?;
    let (params, ridged) = pooled_fit(models, &boot, None, opts, rng)?;
    let mut warnings = Vec::new();
    ridge_warning(ridged, &mut warnings);
    Ok(AggregationResult { method: Method::KlNaive, vector: params.to_vec(), params: Some(params), n_bootstrap: n, machines: models.len(), warnings })
}

/// Align a mixture's components to a reference; Gaussians pass through.
fn aligned(reference: &ModelParams, m: ModelParams) -> Result<ModelParams> {
    match (reference, m) {
        (ModelParams::Gmm(r), ModelParams::Gmm(g)) => {
            let perm = match_components(r, &g)?;
            Ok(ModelParams::Gmm(g.permuted(&perm)))
        }
        (_, m) => Ok(m),
    }
}

/// Pooled MLE with each draw weighted by `p(x | local) / p(x | refit)`.
pub fn kl_weighted(models: &[LocalModel], n: usize, opts: EmOptions, rng: &mut dyn RngCore) -> Result<AggregationResult> {
    check_models(models)?;
    let boot = bootstrap(models, n, rng)?;
    let mut warnings = Vec::new();
    let mut weights = Vec::with_capacity(n * models.len());
    let mut clipped = 0usize;
    for (m, draws) in models.iter().zip(&boot.draws) {
        let (refit, ridged) = m.params.refit(draws, None, opts, rng)?;
        ridge_warning(ridged, &mut warnings);
        for x in draws {
            let lr = m.params.log_pdf(x) - refit.log_pdf(x);
            if lr.abs() > LOG_RATIO_CLIP {
                clipped += 1;
            }
            weights.push(lr.clamp(-LOG_RATIO_CLIP, LOG_RATIO_CLIP).exp());
        }
    }
    if clipped > 0 {
        warnings.push(format!("{clipped} importance ratios clipped at e^{LOG_RATIO_CLIP}"));
    }
    let (params, ridged) = pooled_fit(models, &boot, Some(&weights), opts, rng)?;
    ridge_warning(ridged, &mut warnings);
    Ok(AggregationResult { method: Method::KlWeighted, vector: params.to_vec(), params: Some(params), n_bootstrap: n, machines: models.len(), warnings })
}

/// Empirical Fisher `(1/n) sum_j s s'` of `params` at the given points.
pub fn empirical_fisher(params: &ModelParams, points: &[DVector<f64>]) -> DMatrix<f64> {
    let dim = params.to_vec().len();
    let mut f = DMatrix::zeros(dim, dim);
    for x in points {
        let s = DVector::from_vec(params.score_vec(x));
        f += &s * s.transpose();
    }
    f / points.len() as f64
}

/// Naive estimate corrected by `sum_k B_k (refit_k - local_k)` with
/// `B_k = -(sum_j I_j)^{-1} I_k`.
pub fn kl_control(models: &[LocalModel], n: usize, opts: EmOptions, rng: &mut dyn RngCore) -> Result<AggregationResult> {
    check_models(models)?;
    let boot = bootstrap(models, n, rng)?;
    let mut warnings = Vec::new();
    let (naive, ridged) = pooled_fit(models, &boot, None, opts, rng)?;
    ridge_warning(ridged, &mut warnings);
    let naive = aligned(&models[0].params, naive)?;
    let dim = naive.to_vec().len();
    let mut fisher_sum = DMatrix::zeros(dim, dim);
    let mut weighted_shift = DVector::zeros(dim);
    for (m, draws) in models.iter().zip(&boot.draws) {
        let (refit, ridged) = m.params.refit(draws, None, opts, rng)?;
        ridge_warning(ridged, &mut warnings);
        let refit = aligned(&m.params, refit)?;
        let fisher = empirical_fisher(&m.params, draws);
        let shift = DVector::from_vec(refit.to_vec()) - DVector::from_vec(m.params.to_vec());
        weighted_shift += &fisher * shift;
        fisher_sum += fisher;
    }
    let solve = |m: &DMatrix<f64>| m.clone().cholesky().map(|c| c.solve(&weighted_shift));
    let correction = match solve(&fisher_sum) {
        Some(c) => c,
        None => {
            warnings.push("singular Fisher sum regularized".into());
            solve(&(fisher_sum.clone() + DMatrix::identity(dim, dim) * COV_RIDGE))
                .ok_or_else(|| SteinError::Numerical("Fisher sum is not positive definite".into()))?
        }
    };
    let vector: Vec<f64> = (DVector::from_vec(naive.to_vec()) - correction).iter().copied().collect();
    let params = naive.with_vec(&vector).ok();
    if params.is_none() {
        warnings.push("control-variate correction left the parameter space".into());
    }
    Ok(AggregationResult { method: Method::KlControl, vector, params, n_bootstrap: n, machines: models.len(), warnings })
}

/// Parameter-wise mean, after matching mixture components to the first model.
pub fn linear_average(models: &[LocalModel]) -> Result<AggregationResult> {
    if let Some(first) = models.first() {
        if let ModelParams::Gmm(g0) = &first.params {
            if models.iter().any(|m| matches!(&m.params, ModelParams::Gmm(g) if g.k() != g0.k())) {
                return Err(SteinError::Unsupported("linear averaging needs equal component counts".into()));
            }
        }
    }
    check_models(models)?;
    let reference = &models[0].params;
    let mut acc = vec![0.0; reference.to_vec().len()];
    for m in models {
        let v = aligned(reference, m.params.clone())?.to_vec();
        for (a, b) in acc.iter_mut().zip(v) {
            *a += b / models.len() as f64;
        }
    }
    Ok(AggregationResult { method: Method::LinearAverage, params: Some(reference.with_vec(&acc)?), vector: acc, n_bootstrap: 0, machines: models.len(), warnings: Vec::new() })
}

/// `KL(N(m1, s1) || N(m2, s2))`.
pub fn gaussian_kl(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let c2 = cholesky(s2).ok_or_else(|| SteinError::InvalidArgument("covariance must be positive definite".into()))?;
    let c1 = cholesky(s1).ok_or_else(|| SteinError::InvalidArgument("covariance must be positive definite".into()))?;
    let p = m1.len() as f64;
    let tr = c2.solve(s1).trace();
    let d = m2 - m1;
    let quad = d.dot(&c2.solve(&d));
    let ld = |c: &Cholesky<f64, Dyn>| c.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum::<f64>();
    Ok(0.5 * (tr + quad - p + ld(&c2) - ld(&c1)))
}

/// `KL(a || b) + KL(b || a)`.
pub fn symmetric_kl(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    Ok(gaussian_kl(m1, s1, m2, s2)? + gaussian_kl(m2, s2, m1, s1)?)
}

/// Minimum-cost perfect assignment on a square matrix; `result[row] = col`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // potentials over rows (u) and columns (v), 1-based with a dummy column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}

/// Permutation `perm` with `other.permuted(&perm)` lined up against
/// `reference`, minimizing total symmetric KL between matched components.
pub fn match_components(reference: &GmmParams, other: &GmmParams) -> Result<Vec<usize>> {
    if reference.k() != other.k() || reference.dim() != other.dim() {
        return Err(SteinError::Unsupported("component matching needs equal component counts".into()));
    }
    let k = reference.k();
    let mut cost = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            cost[(a, b)] = symmetric_kl(&reference.means[a], &reference.covs[a], &other.means[b], &other.covs[b])?;
        }
    }
    Ok(hungarian(&cost))
}

/// Exact KL average of Gaussians: moment matching of the mixture
/// `(1/d) sum_k N(mean_k, cov_k)`. With a shared covariance the mean is the
/// average of the local means.
pub fn exact_kl_average_gaussian(models: &[GaussianParams]) -> Result<GaussianParams> {
    let first = models.first().ok_or_else(|| SteinError::InvalidArgument("no local models".into()))?;
    let p = first.dim();
    if models.iter().any(|m| m.dim() != p) {
        return invalid("local models must share dimension");
    }
    let d = models.len() as f64;
    let mean = models.iter().fold(DVector::zeros(p), |acc, m| acc + &m.mean) / d;
    let second = models.iter().fold(DMatrix::zeros(p, p), |acc, m| acc + &m.cov + &m.mean * m.mean.transpose()) / d;
    let cov = second - &mean * mean.transpose();
    GaussianParams::new(mean, (&cov + cov.transpose()) * 0.5)
}

/// Sampling distribution of the Gaussian MLE from `big_n` points: the mean
/// is normal and `big_n` times the covariance is Wishart with `big_n - 1`
/// degrees of freedom (Bartlett construction).
pub fn draw_local_mle(truth: &GaussianParams, big_n: f64, rng: &mut dyn RngCore) -> Result<GaussianParams> {
    let p = truth.dim();
    if !(big_n > p as f64 + 1.0) {
        return invalid("the local sample size must exceed the dimension plus one");
    }
    let l = cholesky(&truth.cov).ok_or_else(|| SteinError::InvalidArgument("covariance must be positive definite".into()))?.l();
    let z = DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
    let mean = &truth.mean + &l * z / big_n.sqrt();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(big_n - 1.0 - i as f64).map_err(|e| SteinError::Numerical(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = &l * a;
    let cov = &la * la.transpose() / big_n;
    GaussianParams::new(mean, (&cov + cov.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    pub machines: usize,
    pub dim: usize,
    /// Points per machine behind each local MLE.
    pub local_n: f64,
    pub grid: Vec<usize>,
    pub trials: usize,
    pub methods: Vec<Method>,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            machines: 10,
            dim: 5,
            local_n: 1e6,
            grid: vec![50, 100, 200, 400, 800],
            trials: 200,
            methods: vec![Method::KlNaive, Method::KlControl, Method::KlWeighted],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub method: Method,
    pub d: usize,
    pub n: usize,
    pub trial: usize,
    pub mse: f64,
}

/// Fixed ground truth for the rate simulation, drawn from its own stream.
pub fn rate_truth(dim: usize, seed: u64) -> Result<GaussianParams> {
    let mut rng = substream(seed, u32::MAX as u64, 0);
    let mean = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
    let b = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.5..0.5));
    let cov = &b * b.transpose() + DMatrix::identity(dim, dim);
    GaussianParams::new(mean, cov)
}

/// Squared parameter error of every method against the exact KL average, per
/// trial and bootstrap size. Trial `t` uses streams `(seed, t, *)`.
pub fn simulate_rates(cfg: &RateConfig, seed: u64) -> Result<Vec<RateRow>> {
    if cfg.machines == 0 || cfg.dim == 0 || cfg.trials == 0 || cfg.grid.is_empty() {
        return invalid("rate simulation needs machines, dimension, trials and a grid");
    }
    let truth = rate_truth(cfg.dim, seed)?;
    let per_trial: Vec<Result<Vec<RateRow>>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(seed, t as u64, 0);
            let locals = (0..cfg.machines)
                .map(|k| Ok(LocalModel { params: ModelParams::Gaussian(draw_local_mle(&truth, cfg.local_n, &mut rng)?), machine: k }))
                .collect::<Result<Vec<_>>>()?;
            let gaussians: Vec<GaussianParams> = locals
                .iter()
                .map(|m| match &m.params {
                    ModelParams::Gaussian(g) => g.clone(),
                    ModelParams::Gmm(_) => unreachable!("rate simulation uses Gaussians"),
                })
                .collect();
            let target = exact_kl_average_gaussian(&gaussians)?.to_vec();
            let mut rows = Vec::new();
            for (gi, &n) in cfg.grid.iter().enumerate() {
                for (mi, method) in cfg.methods.iter().enumerate() {
                    let mut r = substream(seed, t as u64, 1 + (gi * cfg.methods.len() + mi) as u64);
                    let est = aggregate(*method, &locals, n, EmOptions::default(), &mut r)?;
                    let mse = est.vector.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
                    rows.push(RateRow { method: *method, d: cfg.machines, n, trial: t, mse });
                }
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_trial {
        out.extend(r?);
    }
    Ok(out)
}

pub fn aggregate(method: Method, models: &[LocalModel], n: usize, opts: EmOptions, rng: &mut dyn RngCore) -> Result<AggregationResult> {
    match method {
        Method::KlNaive => kl_naive(models, n, opts, rng),
        Method::KlControl => kl_control(models, n, opts, rng),
        Method::KlWeighted => kl_weighted(models, n, opts, rng),
        Method::LinearAverage => linear_average(models),
    }
}

/// Mean MSE per bootstrap size for one method, in grid order.
pub fn mean_mse(rows: &[RateRow], method: Method) -> Vec<(usize, f64)> {
    let mut ns: Vec<usize> = rows.iter().filter(|r| r.method == method).map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let v: Vec<f64> = rows.iter().filter(|r| r.method == method && r.n == n).map(|r| r.mse).collect();
            (n, crate::mat::mean(&v))
        })
        .collect()
}

/// Least-squares slope of log mean MSE on log n.
pub fn rate_slope(rows: &[RateRow], method: Method) -> f64 {
    let m = mean_mse(rows, method);
    let x: Vec<f64> = m.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let y: Vec<f64> = m.iter().map(|(_, v)| v.ln()).collect();
    ols_slope(&x, &y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn fd_score(m: &ModelParams, x: &DVector<f64>) -> Vec<f64> {
        let v = m.to_vec();
        (0..v.len())
            .map(|i| {
                let h = 1e-6;
                let mut a = v.clone();
                let mut b = v.clone();
                a[i] += h;
                b[i] -= h;
                (m.with_vec(&a).unwrap().log_pdf(x) - m.with_vec(&b).unwrap().log_pdf(x)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gaussian_mle_two_points() {
        let (g, _) = gaussian_mle(&[dv(&[0.0]), dv(&[2.0])], None).unwrap();
        assert_eq!(g.mean[0], 1.0);
        assert_eq!(g.cov[(0, 0)], 1.0);
    }

    #[test]
    fn singular_covariance_gets_ridge() {
        let data = vec![dv(&[0.0, 0.0]), dv(&[1.0, 1.0]), dv(&[2.0, 2.0])];
        let (m, warnings) = local_mle(&data, 3, None, EmOptions::default(), &mut stream(70, 0)).unwrap();
        assert_eq!(warnings.len(), 1);
        match m.params {
            ModelParams::Gaussian(g) => assert!(g.cov.clone().cholesky().is_some()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn scores_match_finite_differences() {
        let mut rng = stream(71, 0);
        let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.5..0.5));
        let g = GaussianParams::new(dv(&[0.3, -0.2, 1.0]), &b * b.transpose() + DMatrix::identity(3, 3)).unwrap();
        let gmm = GmmParams::new(
            vec![0.3, 0.5, 0.2],
            vec![dv(&[0.0, 0.0, 0.0]), dv(&[1.0, -1.0, 0.5]), dv(&[-1.0, 1.0, 0.0])],
            vec![g.cov.clone(), DMatrix::identity(3, 3) * 0.7, DMatrix::from_diagonal(&dv(&[1.0, 2.0, 0.5]))],
        )
        .unwrap();
        for m in [ModelParams::Gaussian(g), ModelParams::Gmm(gmm)] {
            for _ in 0..5 {
                let x = DVector::from_fn(3, |_, _| rng.random_range(-1.5..1.5));
                let a = m.score_vec(&x);
                let b = fd_score(&m, &x);
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() < 1e-6 * u.abs().max(1.0), "{u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn em_single_component_is_gaussian_mle() {
        let mut rng = stream(72, 0);
        let data: Vec<DVector<f64>> = (0..200).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))).collect();
        let fit = fit_gmm(&data, None, 1, EmOptions::default(), &mut rng).unwrap();
        let (g, _) = gaussian_mle(&data, None).unwrap();
        assert!((&fit.params.means[0] - &g.mean).norm() < 1e-12);
        assert!((&fit.params.covs[0] - &g.cov).norm() < 1e-12);
    }

    #[test]
    fn em_is_monotone_and_finds_clusters() {
        let truth = GmmParams::new(
            vec![0.4, 0.6],
            vec![dv(&[-3.0, 0.0]), dv(&[3.0, 1.0])],
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.5],
        )
        .unwrap();
        let mut rng = stream(73, 0);
        let data = truth.sample(2000, &mut rng);
        let fit = fit_gmm(&data, None, 2, EmOptions::default(), &mut rng).unwrap();
        assert!(fit.converged);
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        let perm = match_components(&truth, &fit.params).unwrap();
        let aligned = fit.params.permuted(&perm);
        for c in 0..2 {
            assert!((&aligned.means[c] - &truth.means[c]).norm() < 0.15);
        }
    }

    #[test]
    fn symmetric_kl_closed_form() {
        let one = DMatrix::identity(1, 1);
        let v = symmetric_kl(&dv(&[0.0]), &one, &dv(&[1.0]), &one).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let s2 = DMatrix::identity(1, 1) * 4.0;
        // KL(N(0,1) || N(0,4)) = (1/4 - 1 + ln 4) / 2
        let kl = gaussian_kl(&dv(&[0.0]), &one, &dv(&[0.0]), &s2).unwrap();
        assert!((kl - 0.5 * (0.25 - 1.0 + 4f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = stream(74, 0);
        for n in 1..=6 {
            let c = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..10.0));
            let got = hungarian(&c);
            let total = |p: &[usize]| p.iter().enumerate().map(|(i, j)| c[(i, *j)]).sum::<f64>();
            let mut best = f64::INFINITY;
            let mut perm: Vec<usize> = (0..n).collect();
            permute(&mut perm, 0, &mut |p| best = best.min(total(p)));
            assert!((total(&got) - best).abs() < 1e-12);
        }
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn swapped_mixture_is_recovered() {
        let a = GmmParams::new(vec![0.3, 0.7], vec![dv(&[0.0]), dv(&[5.0])], vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1) * 2.0]).unwrap();
        let b = a.permuted(&[1, 0]);
        assert_eq!(match_components(&a, &b).unwrap(), vec![1, 0]);
        let models = vec![LocalModel { params: ModelParams::Gmm(a.clone()), machine: 0 }, LocalModel { params: ModelParams::Gmm(b), machine: 1 }];
        let avg = linear_average(&models).unwrap();
        assert_eq!(avg.vector, a.to_vec());
        let three = GmmParams::new(vec![0.2, 0.3, 0.5], vec![dv(&[0.0]), dv(&[1.0]), dv(&[2.0])], vec![DMatrix::identity(1, 1); 3]).unwrap();
        let bad = vec![models[0].clone(), LocalModel { params: ModelParams::Gmm(three), machine: 2 }];
        assert!(matches!(linear_average(&bad), Err(SteinError::Unsupported(_))));
    }

    #[test]
    fn exact_average_examples() {
        let one = DMatrix::identity(1, 1);
        let a = GaussianParams::new(dv(&[0.0]), one.clone()).unwrap();
        let b = GaussianParams::new(dv(&[2.0]), one.clone()).unwrap();
        let e = exact_kl_average_gaussian(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(e.mean[0], 1.0);
        let f = exact_kl_average_gaussian(&[b, a]).unwrap();
        assert_eq!(e, f);
    }

    fn identical_locals(d: usize) -> Vec<LocalModel> {
        let g = GaussianParams::new(dv(&[0.5, -0.5]), DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])).unwrap();
        (0..d).map(|k| LocalModel { params: ModelParams::Gaussian(g.clone()), machine: k }).collect()
    }

    #[test]
    fn single_machine_naive_is_its_bootstrap_mle() {
        let locals = identical_locals(1);
        let est = kl_naive(&locals, 300, EmOptions::default(), &mut stream(75, 0)).unwrap();
        let draws = locals[0].params.sample(300, &mut stream(75, 0));
        let (g, _) = gaussian_mle(&draws, None).unwrap();
        assert_eq!(est.params, Some(ModelParams::Gaussian(g)));
    }

    #[test]
    fn weighted_with_unit_ratios_is_naive() {
        // the pooled weighted MLE with all-ones weights equals the unweighted one
        let locals = identical_locals(3);
        let boot = bootstrap(&locals, 50, &mut stream(76, 0)).unwrap();
        let (a, _) = pooled_fit(&locals, &boot, None, EmOptions::default(), &mut stream(76, 1)).unwrap();
        let ones = vec![1.0; 150];
        let (b, _) = pooled_fit(&locals, &boot, Some(&ones), EmOptions::default(), &mut stream(76, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weighted_mean_matches_numeric_maximizer() {
        // known-variance 1D: maximize sum_i w_i log N(x_i | mu, 1) by bisection
        // on a central-difference derivative of the objective
        let mut rng = stream(77, 0);
        let xs: Vec<DVector<f64>> = (0..40).map(|_| dv(&[rng.random_range(-2.0..3.0)])).collect();
        let ws: Vec<f64> = (0..40).map(|_| rng.random_range(0.1..2.0)).collect();
        let (g, _) = gaussian_mle(&xs, Some(&ws)).unwrap();
        let obj = |mu: f64| -> f64 { xs.iter().zip(&ws).map(|(x, w)| -0.5 * w * (x[0] - mu).powi(2)).sum() };
        let slope = |mu: f64| (obj(mu + 1e-3) - obj(mu - 1e-3)) / 2e-3;
        let (mut lo, mut hi) = (-5.0f64, 5.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((g.mean[0] - 0.5 * (lo + hi)).abs() < 1e-8);
    }

    #[test]
    fn fisher_blocks_sum_to_minus_identity() {
        let locals = identical_locals(4);
        let boot = bootstrap(&locals, 400, &mut stream(78, 0)).unwrap();
        let fs: Vec<DMatrix<f64>> = locals.iter().zip(&boot.draws).map(|(m, d)| empirical_fisher(&m.params, d)).collect();
        let sum = fs.iter().fold(DMatrix::zeros(5, 5), |a, f| a + f);
        let inv = sum.clone().try_inverse().unwrap();
        let total = fs.iter().fold(DMatrix::zeros(5, 5), |a, f| a - &inv * f);
        assert!((total + DMatrix::identity(5, 5)).norm() < 1e-10);
    }

    #[test]
    fn control_correction_vanishes_for_large_n() {
        let locals = identical_locals(2);
        let est = kl_control(&locals, 100_000, EmOptions::default(), &mut stream(79, 0)).unwrap();
        let naive = kl_naive(&locals, 100_000, EmOptions::default(), &mut stream(79, 0)).unwrap();
        let d: f64 = est.vector.iter().zip(&naive.vector).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = locals[0].params.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(d < 1e-2 * norm, "{d}");
    }

    #[test]
    fn naive_converges_to_exact_average() {
        let one = DMatrix::identity(1, 1);
        let locals: Vec<LocalModel> = [0.0, 1.0, 3.0]
            .iter()
            .enumerate()
            .map(|(k, m)| LocalModel { params: ModelParams::Gaussian(GaussianParams::new(dv(&[*m]), one.clone()).unwrap()), machine: k })
            .collect();
        let exact = 4.0 / 3.0;
        let mut means = Vec::new();
        for s in 0..20 {
            match kl_naive(&locals, 100_000, EmOptions::default(), &mut stream(80, s)).unwrap().params {
                Some(ModelParams::Gaussian(g)) => means.push(g.mean[0]),
                _ => unreachable!(),
            }
        }
        let se = crate::mat::std_dev(&means) / (means.len() as f64).sqrt();
        assert!((crate::mat::mean(&means) - exact).abs() < 3.0 * se);
    }

    #[test]
    fn wishart_draw_moments() {
        let truth = rate_truth(3, 1).unwrap();
        let mut rng = stream(81, 0);
        let big_n = 50.0;
        let draws: Vec<GaussianParams> = (0..4000).map(|_| draw_local_mle(&truth, big_n, &mut rng).unwrap()).collect();
        // E[cov_mle] = (N - 1) / N cov
        let avg = draws.iter().fold(DMatrix::zeros(3, 3), |a, g| a + &g.cov) / 4000.0;
        let expect = &truth.cov * ((big_n - 1.0) / big_n);
        assert!((avg - expect).abs().max() < 0.05);
        let mavg = draws.iter().fold(DVector::zeros(3), |a, g| a + &g.mean) / 4000.0;
        assert!((mavg - &truth.mean).abs().max() < 0.02);
    }
}
