//! Kernelized Stein discrepancies: the score-based Stein kernel, its
//! gradient-free importance-weighted form, the alpha-weighted variant,
//! U/V statistics, and black-box importance weights from a simplex QP.

use crate::error::{invalid, Result, SteinError};
use crate::kernels::rbf;
use crate::mat::{dot, sq_dist, Mat};
use crate::models::{require_score, ContinuousTarget};
use rayon::prelude::*;

/// Stein kernel of an RBF base kernel given precomputed scores at both points.
pub fn stein_kernel_with_scores(x: &[f64], y: &[f64], sx: &[f64], sy: &[f64], h: f64) -> f64 {
    let d = x.len() as f64;
    let k = rbf(x, y, h);
    let r2 = sq_dist(x, y);
    let c = 2.0 / h * k;
    let mut cross_y = 0.0; // s_x . grad_y k
    let mut cross_x = 0.0; // s_y . grad_x k
    for a in 0..x.len() {
        let diff = x[a] - y[a];
        cross_y += sx[a] * c * diff;
        cross_x -= sy[a] * c * diff;
    }
    let trace = k * (2.0 * d / h - 4.0 * r2 / (h * h));
    dot(sx, sy) * k + cross_y + cross_x + trace
}

pub fn stein_kernel(x: &[f64], y: &[f64], target: &dyn ContinuousTarget, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return invalid("bandwidth must be positive");
    }
    let sx = require_score(target, x)?;
    let sy = require_score(target, y)?;
    Ok(stein_kernel_with_scores(x, y, &sx, &sy, h))
}

/// `w(x) k_rho(x, y) w(y)` with `w = rho / p`, weights formed in log space.
pub fn gf_stein_kernel(
    x: &[f64],
    y: &[f64],
    surrogate: &dyn ContinuousTarget,
    target: &dyn ContinuousTarget,
    h: f64,
) -> Result<f64> {
    let base = stein_kernel(x, y, surrogate, h)?;
    let lwx = surrogate.log_density(x) - target.log_density(x);
    let lwy = surrogate.log_density(y) - target.log_density(y);
    let w = (lwx + lwy).exp();
    if w == 0.0 {
        return Ok(0.0);
    }
    Ok(w * base)
}

/// Alpha-weighted Stein kernel. `p^alpha` uses the unnormalized density, so
/// the overall scale depends on the target's normalization.
pub fn alpha_stein_kernel(x: &[f64], y: &[f64], target: &dyn ContinuousTarget, alpha: f64, h: f64) -> Result<f64> {
    let sx = require_score(target, x)?;
    let sy = require_score(target, y)?;
    Ok(alpha_stein_kernel_with_scores(x, y, &sx, &sy, target.log_density(x), target.log_density(y), alpha, h))
}

#[allow(clippy::too_many_arguments)]
fn alpha_stein_kernel_with_scores(x: &[f64], y: &[f64], sx: &[f64], sy: &[f64], lpx: f64, lpy: f64, alpha: f64, h: f64) -> f64 {
    let d = x.len() as f64;
    let k = rbf(x, y, h);
    let r2 = sq_dist(x, y);
    let c = 2.0 / h * k;
    let a1 = alpha + 1.0;
    let mut cross_y = 0.0;
    let mut cross_x = 0.0;
    for a in 0..x.len() {
        let diff = x[a] - y[a];
        cross_y += sx[a] * c * diff;
        cross_x -= sy[a] * c * diff;
    }
    let trace = k * (2.0 * d / h - 4.0 * r2 / (h * h));
    let inner = a1 * a1 * dot(sx, sy) * k + a1 * cross_y + a1 * cross_x + trace;
    if alpha == 0.0 {
        return inner;
    }
    (alpha * (lpx + lpy)).exp() * inner
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFlavor {
    Score,
    GradientFree,
    AlphaWeighted,
}

/// Symmetric matrix of Stein-kernel values. The true entries are
/// `values * exp(log_scale)`; the scale is split off so importance weights
/// in high dimension do not overflow.
#[derive(Debug, Clone)]
pub struct SteinKernelMatrix {
    pub values: Mat,
    pub log_scale: f64,
    pub flavor: KernelFlavor,
}

impl SteinKernelMatrix {
    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn v_statistic(&self) -> f64 {
        v_statistic_matrix(&self.values) * self.log_scale.exp()
    }

    pub fn u_statistic(&self) -> Result<f64> {
        Ok(u_statistic_matrix(&self.values)? * self.log_scale.exp())
    }
}

fn symmetric_fill(n: usize, entry: impl Fn(usize, usize) -> f64 + Sync) -> Mat {
    let upper: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| (i..n).map(|j| entry(i, j)).collect()).collect();
    let mut m = Mat::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (off, v) in row.iter().enumerate() {
            m[(i, i + off)] = *v;
            m[(i + off, i)] = *v;
        }
    }
    m
}

fn score_rows(t: &dyn ContinuousTarget, points: &Mat) -> Result<Vec<Vec<f64>>> {
    points.iter_rows().map(|x| require_score(t, x)).collect()
}

pub fn stein_kernel_matrix(points: &Mat, target: &dyn ContinuousTarget, h: f64) -> Result<SteinKernelMatrix> {
    let s = score_rows(target, points)?;
    let values = symmetric_fill(points.rows(), |i, j| stein_kernel_with_scores(points.row(i), points.row(j), &s[i], &s[j], h));
    Ok(SteinKernelMatrix { values, log_scale: 0.0, flavor: KernelFlavor::Score })
}

/// Log importance weights `log rho(x_i) - log p(x_i)`.
pub fn log_importance_weights(points: &Mat, surrogate: &dyn ContinuousTarget, target: &dyn ContinuousTarget) -> Vec<f64> {
    points.iter_rows().map(|x| surrogate.log_density(x) - target.log_density(x)).collect()
}

pub fn gf_stein_kernel_matrix(
    points: &Mat,
    surrogate: &dyn ContinuousTarget,
    target: &dyn ContinuousTarget,
    h: f64,
) -> Result<SteinKernelMatrix> {
    let lw = log_importance_weights(points, surrogate, target);
    let top = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() || lw.iter().any(|v| v.is_nan()) {
        return Err(SteinError::DegenerateWeights { reason: "no finite importance weight".into(), max_log_weight: top });
    }
    let f: Vec<f64> = lw.iter().map(|v| (v - top).exp()).collect();
    let s = score_rows(surrogate, points)?;
    let values = symmetric_fill(points.rows(), |i, j| {
        f[i] * f[j] * stein_kernel_with_scores(points.row(i), points.row(j), &s[i], &s[j], h)
    });
    Ok(SteinKernelMatrix { values, log_scale: 2.0 * top, flavor: KernelFlavor::GradientFree })
}

pub fn alpha_stein_kernel_matrix(points: &Mat, target: &dyn ContinuousTarget, alpha: f64, h: f64) -> Result<SteinKernelMatrix> {
    let s = score_rows(target, points)?;
    let lp: Vec<f64> = points.iter_rows().map(|x| target.log_density(x)).collect();
    let values = symmetric_fill(points.rows(), |i, j| {
        alpha_stein_kernel_with_scores(points.row(i), points.row(j), &s[i], &s[j], lp[i], lp[j], alpha, h)
    });
    Ok(SteinKernelMatrix { values, log_scale: 0.0, flavor: KernelFlavor::AlphaWeighted })
}

/// `(1/n^2) sum_ij kappa(x_i, x_j)`.
pub fn v_statistic(points: &Mat, kernel: impl Fn(&[f64], &[f64]) -> f64) -> Result<f64> {
    let n = points.rows();
    if n < 1 {
        return invalid("V-statistic needs at least one point");
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += kernel(points.row(i), points.row(j));
        }
    }
    Ok(s / (n * n) as f64)
}

/// `(1/(n(n-1))) sum_{i != j} kappa(x_i, x_j)`.
pub fn u_statistic(points: &Mat, kernel: impl Fn(&[f64], &[f64]) -> f64) -> Result<f64> {
    let n = points.rows();
    if n < 2 {
        return invalid("U-statistic needs at least two points");
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += kernel(points.row(i), points.row(j));
            }
        }
    }
    Ok(s / (n * (n - 1)) as f64)
}

pub fn v_statistic_matrix(k: &Mat) -> f64 {
    let n = k.rows();
    k.as_slice().iter().sum::<f64>() / (n * n) as f64
}

pub fn u_statistic_matrix(k: &Mat) -> Result<f64> {
    let n = k.rows();
    if n < 2 {
        return invalid("U-statistic needs at least two points");
    }
    let total: f64 = k.as_slice().iter().sum();
    let diag: f64 = (0..n).map(|i| k[(i, i)]).sum();
    Ok((total - diag) / (n * (n - 1)) as f64)
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct BbisOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for BbisOptions {
    fn default() -> Self {
        BbisOptions { max_iter: 10_000, tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct BbisResult {
    pub weights: Vec<f64>,
    /// `u'Ku` for the matrix that was passed in.
    pub objective: f64,
    pub iterations: usize,
    /// False when `max_iter` ran out; the best iterate is still returned.
    pub converged: bool,
    /// Objective after every accepted step.
    pub trace: Vec<f64>,
}

fn quad(k: &Mat, u: &[f64]) -> f64 {
    dot(u, &k.matvec(u))
}

/// Minimize `u'Ku` over the probability simplex by accelerated projected
/// gradient. Step `1/L` with `L` the Gershgorin bound on the Hessian `2K`;
/// the step is halved and momentum reset whenever the objective goes up.
pub fn bbis_weights_matrix(k: &Mat, opts: BbisOptions) -> Result<BbisResult> {
    let n = k.rows();
    if n == 0 || k.cols() != n {
        return invalid("BBIS needs a nonempty square matrix");
    }
    if !k.all_finite() {
        return Err(SteinError::Numerical("kernel matrix has non-finite entries".into()));
    }
    let mut u = vec![1.0 / n as f64; n];
    let mut f = quad(k, &u);
    let lip = 2.0 * k.norm_inf();
    if n == 1 || lip == 0.0 {
        return Ok(BbisResult { weights: u, objective: f, iterations: 0, converged: true, trace: vec![f] });
    }
    let mut step = 1.0 / lip;
    let mut y = u.clone();
    let mut t: f64 = 1.0;
    let mut trace = vec![f];
    let rel = |drop: f64, f: f64| drop <= opts.tol * f.abs().max(1e-300);
    for it in 1..=opts.max_iter {
        let g = k.matvec(&y);
        let cand: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - step * 2.0 * gi).collect();
        let next = project_simplex(&cand);
        let f_next = quad(k, &next);
        if f_next > f {
            step *= 0.5;
            y = u.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        y = next.iter().zip(&u).map(|(a, b)| a + mom * (a - b)).collect();
        let drop = f - f_next;
        u = next;
        f = f_next;
        t = t_next;
        trace.push(f);
        if rel(drop, f) {
            // confirm with a plain projected-gradient step from the iterate
            let g = k.matvec(&u);
            let pg = project_simplex(&u.iter().zip(&g).map(|(a, b)| a - 2.0 * b / lip).collect::<Vec<_>>());
            let moved = pg.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if rel(f - quad(k, &pg), f) && moved <= 1e-2 * opts.tol.sqrt() {
                return Ok(BbisResult { weights: u, objective: f, iterations: it, converged: true, trace });
            }
        }
    }
    Ok(BbisResult { weights: u, objective: f, iterations: opts.max_iter, converged: false, trace })
}

/// Gradient-free black-box importance weights for an arbitrary point set.
pub fn bbis_weights(
    points: &Mat,
    surrogate: &dyn ContinuousTarget,
    target: &dyn ContinuousTarget,
    h: f64,
    opts: BbisOptions,
) -> Result<(BbisResult, SteinKernelMatrix)> {
    let km = gf_stein_kernel_matrix(points, surrogate, target, h)?;
    let res = bbis_weights_matrix(&km.values, opts)?;
    Ok((res, km))
}

/// `sqrt(u' K u)` in the true scale of the kernel matrix.
pub fn bbis_error_bound(weights: &[f64], km: &SteinKernelMatrix) -> Result<f64> {
    if weights.len() != km.n() {
        return invalid("weight count does not match kernel matrix");
    }
    let q = quad(&km.values, weights);
    if q < -1e-10 * km.values.norm_inf().max(1.0) {
        return Err(SteinError::Numerical(format!("negative quadratic form {q}")));
    }
    Ok((q.max(0.0) * km.log_scale.exp()).sqrt())
}
