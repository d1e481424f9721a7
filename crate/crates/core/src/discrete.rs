//! Discrete distributions through a continuous parameterization.
//!
//! Each coordinate's real line is cut into `K` quantile bins of a base
//! distribution `p0`, each holding mass `1/K`. Reweighting the bins by the
//! discrete masses gives a piecewise-smooth density `p_c` whose bin
//! assignment `Γ(x)` is distributed exactly as the discrete target.

use crate::error::{invalid, Result, SteinError};
use crate::gfsvgd::{run_gf_svgd, GfOptions};
use crate::kernels::KernelSpec;
use crate::mat::{log_sum_exp, Mat};
use crate::models::{BernoulliRbm, Categorical, ContinuousTarget, DiscreteTarget, Ising, RelaxableTarget};
use crate::svgd::{ParticleEnsemble, StepSchedule};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::{PI, SQRT_2};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

pub fn normal_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * PI).ln()
}

fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00];
    const LOW: f64 = 0.02425;
    if p < LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Inverse standard normal CDF: rational approximation plus one Newton step.
pub fn inverse_normal_cdf(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return invalid(format!("quantile level must lie in (0, 1), got {u}"));
    }
    if u == 0.5 {
        return Ok(0.0);
    }
    if u > 0.5 {
        return Ok(-inverse_normal_cdf(1.0 - u)?);
    }
    let x = acklam(u);
    let resid = normal_cdf(x) - u;
    Ok(x - resid / normal_log_pdf(x).exp())
}

/// One-dimensional base distribution applied to every coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BaseDistribution {
    #[default]
    StandardNormal,
    /// Experimental: a 1D Gaussian mixture, quantiles by bisection.
    Mixture { weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64> },
}

impl BaseDistribution {
    fn validate(&self) -> Result<()> {
        if let BaseDistribution::Mixture { weights, means, sds } = self {
            if weights.is_empty() || weights.len() != means.len() || weights.len() != sds.len() {
                return invalid("mixture base needs matching weights, means and sds");
            }
            if weights.iter().any(|w| !(*w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 || sds.iter().any(|s| !(*s > 0.0)) {
                return invalid("mixture base weights must be positive and sum to 1, sds positive");
            }
        }
        Ok(())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            BaseDistribution::StandardNormal => normal_cdf(x),
            BaseDistribution::Mixture { weights, means, sds } => {
                weights.iter().zip(means).zip(sds).map(|((w, m), s)| w * normal_cdf((x - m) / s)).sum()
            }
        }
    }

    fn component_logs(weights: &[f64], means: &[f64], sds: &[f64], x: f64) -> Vec<f64> {
        weights
            .iter()
            .zip(means)
            .zip(sds)
            .map(|((w, m), s)| w.ln() + normal_log_pdf((x - m) / s) - s.ln())
            .collect()
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        match self {
            BaseDistribution::StandardNormal => normal_log_pdf(x),
            BaseDistribution::Mixture { weights, means, sds } => log_sum_exp(&Self::component_logs(weights, means, sds, x)),
        }
    }

    pub fn dlog_pdf(&self, x: f64) -> f64 {
        match self {
            BaseDistribution::StandardNormal => -x,
            BaseDistribution::Mixture { weights, means, sds } => {
                let logs = Self::component_logs(weights, means, sds, x);
                let lse = log_sum_exp(&logs);
                logs.iter().zip(means).zip(sds).map(|((l, m), s)| (l - lse).exp() * -(x - m) / (s * s)).sum()
            }
        }
    }

    pub fn quantile(&self, u: f64) -> Result<f64> {
        match self {
            BaseDistribution::StandardNormal => inverse_normal_cdf(u),
            BaseDistribution::Mixture { means, sds, .. } => {
                if !(u > 0.0 && u < 1.0) {
                    return invalid(format!("quantile level must lie in (0, 1), got {u}"));
                }
                let mut lo = means.iter().zip(sds).map(|(m, s)| m - 40.0 * s).fold(f64::INFINITY, f64::min);
                let mut hi = means.iter().zip(sds).map(|(m, s)| m + 40.0 * s).fold(f64::NEG_INFINITY, f64::max);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid) < u {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
                        break;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        match self {
            BaseDistribution::StandardNormal => StandardNormal.sample(rng),
            BaseDistribution::Mixture { weights, means, sds } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                let z: f64 = StandardNormal.sample(rng);
                means[pick] + sds[pick] * z
            }
        }
    }
}

/// Even partition of every coordinate into `K` base-quantile bins.
#[derive(Debug, Clone)]
pub struct ContinuousParameterization {
    pub dims: usize,
    pub alphabet: Vec<f64>,
    /// Inner cut points `η_1 < ... < η_{K-1}`.
    pub thresholds: Vec<f64>,
    pub base: BaseDistribution,
}

impl ContinuousParameterization {
    pub fn new(dims: usize, alphabet: Vec<f64>, base: BaseDistribution) -> Result<Self> {
        let k = alphabet.len();
        if k < 2 || dims == 0 {
            return invalid("need at least one dimension and two states");
        }
        base.validate()?;
        let thresholds = (1..k).map(|i| base.quantile(i as f64 / k as f64)).collect::<Result<Vec<_>>>()?;
        if thresholds.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SteinError::Numerical("partition thresholds are not increasing".into()));
        }
        Ok(ContinuousParameterization { dims, alphabet, thresholds, base })
    }

    pub fn for_target(target: &dyn DiscreteTarget) -> Result<Self> {
        ContinuousParameterization::new(target.dims(), target.alphabet().to_vec(), BaseDistribution::StandardNormal)
    }

    pub fn k(&self) -> usize {
        self.alphabet.len()
    }

    /// Bin of a scalar, half-open `[η_{i-1}, η_i)`.
    pub fn bin(&self, x: f64) -> usize {
        self.thresholds.partition_point(|t| *t <= x)
    }

    pub fn gamma_indices(&self, x: &[f64]) -> Vec<usize> {
        x.iter().map(|v| self.bin(*v)).collect()
    }

    pub fn position_of(&self, value: f64) -> Option<usize> {
        self.alphabet.iter().position(|a| *a == value)
    }

    pub fn base_log_density(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| self.base.log_pdf(*v)).sum()
    }

    pub fn base_score(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| self.base.dlog_pdf(*v)).collect()
    }
}

pub fn gamma_map(x: &[f64], param: &ContinuousParameterization) -> Vec<f64> {
    x.iter().map(|v| param.alphabet[param.bin(*v)]).collect()
}

pub fn pc_log_density(x: &[f64], param: &ContinuousParameterization, target: &dyn DiscreteTarget) -> f64 {
    param.base_log_density(x) + target.log_mass(&gamma_map(x, param))
}

/// `p_c` as a (score-free) continuous target.
pub struct Pc<'a> {
    pub param: &'a ContinuousParameterization,
    pub target: &'a dyn DiscreteTarget,
}

impl ContinuousTarget for Pc<'_> {
    fn dim(&self) -> usize {
        self.param.dims
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        pc_log_density(x, self.param, self.target)
    }
}

/// The base density `p0` itself as surrogate.
pub struct BaseSurrogate<'a>(pub &'a ContinuousParameterization);

impl ContinuousTarget for BaseSurrogate<'_> {
    fn dim(&self) -> usize {
        self.0.dims
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.0.base_log_density(x)
    }
    fn score(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(self.0.base_score(x))
    }
}

/// Gaussian-form surrogate `exp(b'x - x'(A + λI)x / 2)` of an Ising model.
#[derive(Debug, Clone)]
pub struct IsingSurrogate {
    pub precision: Mat,
    pub field: Vec<f64>,
    pub lambda: f64,
}

/// `1 + max_i sum_j |A_ij|`, diagonally dominant by construction.
pub fn default_ising_lambda(model: &Ising) -> f64 {
    1.0 + model.coupling_matrix().norm_inf()
}

pub fn ising_surrogate(model: &Ising, lambda: Option<f64>) -> Result<IsingSurrogate> {
    let lambda = lambda.unwrap_or_else(|| default_ising_lambda(model));
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(SteinError::InvalidLambda(format!("lambda must be positive, got {lambda}")));
    }
    let mut precision = model.coupling_matrix();
    let d = precision.rows();
    for i in 0..d {
        precision[(i, i)] += lambda;
    }
    let m = nalgebra::DMatrix::from_row_slice(d, d, precision.as_slice());
    if m.cholesky().is_none() {
        return Err(SteinError::InvalidLambda(format!("A + {lambda} I is not positive definite")));
    }
    Ok(IsingSurrogate { precision, field: vec![0.0; d], lambda })
}

impl ContinuousTarget for IsingSurrogate {
    fn dim(&self) -> usize {
        self.field.len()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let px = self.precision.matvec(x);
        crate::mat::dot(&self.field, x) - 0.5 * crate::mat::dot(x, &px)
    }
    fn score(&self, x: &[f64]) -> Option<Vec<f64>> {
        let px = self.precision.matvec(x);
        Some(self.field.iter().zip(&px).map(|(b, v)| b - v).collect())
    }
}

/// `2 / (1 + e^{-t}) - 1`, a smooth stand-in for `sign(t)`.
pub fn relaxation_sigma(t: f64) -> f64 {
    (0.5 * t).tanh()
}

/// `d σ(τ x) / dx = τ 2 e^{-τx} / (1 + e^{-τx})^2`.
pub fn relaxation_sigma_deriv(x: f64, tau: f64) -> f64 {
    let s = relaxation_sigma(tau * x);
    0.5 * tau * (1.0 - s * s)
}

pub const DEFAULT_TAU: f64 = 10.0;

/// `p0(x) exp(E(σ(τx)))` with `E` the model's energy on relaxed spins.
pub struct RelaxedSurrogate<'a> {
    pub target: &'a dyn RelaxableTarget,
    pub param: &'a ContinuousParameterization,
    pub tau: f64,
}

pub fn smooth_relaxation_surrogate<'a>(
    target: &'a dyn RelaxableTarget,
    param: &'a ContinuousParameterization,
    tau: f64,
) -> Result<RelaxedSurrogate<'a>> {
    if param.alphabet != [-1.0, 1.0] {
        return invalid("sign relaxation needs the alphabet {-1, +1}");
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return invalid("relaxation temperature must be positive");
    }
    Ok(RelaxedSurrogate { target, param, tau })
}

impl ContinuousTarget for RelaxedSurrogate<'_> {
    fn dim(&self) -> usize {
        self.param.dims
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let z: Vec<f64> = x.iter().map(|v| relaxation_sigma(self.tau * v)).collect();
        self.param.base_log_density(x) + self.target.relaxed_log_mass(&z)
    }
    fn score(&self, x: &[f64]) -> Option<Vec<f64>> {
        let z: Vec<f64> = x.iter().map(|v| relaxation_sigma(self.tau * v)).collect();
        let g = self.target.relaxed_grad(&z);
        let b = self.param.base_score(x);
        Some((0..x.len()).map(|i| b[i] + g[i] * relaxation_sigma_deriv(x[i], self.tau)).collect())
    }
}

/// Discrete models the samplers and tests know how to build surrogates for.
#[derive(Debug, Clone)]
pub enum DiscreteModel {
    Ising(Ising),
    BernoulliRbm(BernoulliRbm),
    Categorical(Categorical),
}

impl DiscreteModel {
    pub fn as_target(&self) -> &dyn DiscreteTarget {
        match self {
            DiscreteModel::Ising(m) => m,
            DiscreteModel::BernoulliRbm(m) => m,
            DiscreteModel::Categorical(m) => m,
        }
    }

    pub fn as_relaxable(&self) -> Option<&dyn RelaxableTarget> {
        match self {
            DiscreteModel::Ising(m) => Some(m),
            DiscreteModel::BernoulliRbm(m) => Some(m),
            DiscreteModel::Categorical(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SurrogateMode {
    /// `rho = p0`; weights are `1 / p*(Γ(x))`.
    #[default]
    Base,
    /// Gaussian-form Ising surrogate (Ising models only).
    Ising { lambda: Option<f64> },
    /// Sign relaxation of the model energy (binary models).
    Relaxed { tau: f64 },
}

pub fn build_surrogate<'a>(
    model: &'a DiscreteModel,
    param: &'a ContinuousParameterization,
    mode: SurrogateMode,
) -> Result<Box<dyn ContinuousTarget + 'a>> {
    match mode {
        SurrogateMode::Base => Ok(Box::new(BaseSurrogate(param))),
        SurrogateMode::Ising { lambda } => match model {
            DiscreteModel::Ising(m) => Ok(Box::new(ising_surrogate(m, lambda)?)),
            _ => invalid("the Ising surrogate needs an Ising model"),
        },
        SurrogateMode::Relaxed { tau } => {
            let t = model.as_relaxable().ok_or_else(|| SteinError::InvalidArgument("model has no relaxed energy".into()))?;
            Ok(Box::new(smooth_relaxation_surrogate(t, param, tau)?))
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscreteSamples {
    /// State values, one row per particle.
    pub states: Vec<Vec<f64>>,
    /// Alphabet positions, one row per particle.
    pub indices: Vec<Vec<usize>>,
    pub ensemble: ParticleEnsemble,
    pub ess: Vec<f64>,
}

/// GF-SVGD on `p_c` from base draws, then `z_i = Γ(x_i)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_discrete(
    model: &DiscreteModel,
    param: &ContinuousParameterization,
    mode: SurrogateMode,
    n: usize,
    iters: usize,
    kernel: &KernelSpec,
    schedule: &StepSchedule,
    opts: &GfOptions,
    rng: &mut dyn RngCore,
) -> Result<DiscreteSamples> {
    let target = model.as_target();
    if param.dims != target.dims() || param.alphabet != target.alphabet() {
        return invalid("parameterization does not match the target");
    }
    let d = param.dims;
    let mut x = Mat::zeros(n, d);
    for v in x.as_mut_slice() {
        *v = param.base.sample(rng);
    }
    let pc = Pc { param, target };
    let rho = build_surrogate(model, param, mode)?;
    let (ens, ess) = run_gf_svgd(ParticleEnsemble::new(x)?, &pc, rho.as_ref(), iters, kernel, schedule, opts, |_| {})?;
    let indices: Vec<Vec<usize>> = ens.positions.iter_rows().map(|r| param.gamma_indices(r)).collect();
    let states = indices.iter().map(|ix| ix.iter().map(|i| param.alphabet[*i]).collect()).collect();
    Ok(DiscreteSamples { states, indices, ensemble: ens, ess })
}

/// Random continuous points whose bins are the given states.
pub fn continuize_data(z: &[Vec<f64>], param: &ContinuousParameterization, rng: &mut dyn RngCore) -> Result<Mat> {
    let k = param.k() as f64;
    let mut x = Mat::zeros(z.len(), param.dims);
    for (r, zi) in z.iter().enumerate() {
        if zi.len() != param.dims {
            return invalid("state has the wrong dimension");
        }
        for (c, v) in zi.iter().enumerate() {
            let i = param.position_of(*v).ok_or_else(|| SteinError::InvalidArgument(format!("state value {v} is not in the alphabet")))?;
            // redraw in the (rare) event rounding lands on a neighbouring bin
            loop {
                let u: f64 = rng.random();
                if u == 0.0 {
                    continue;
                }
                let level = (i as f64 + u) / k;
                if !(level < 1.0) {
                    continue;
                }
                let xv = param.base.quantile(level)?;
                if param.bin(xv) == i {
                    x[(r, c)] = xv;
                    break;
                }
            }
        }
    }
    Ok(x)
}
