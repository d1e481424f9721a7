//! Gradient-free SVGD: the target only supplies log-density values, the
//! drift comes from a surrogate's score, and importance weights
//! `w = rho / p` correct the bias.

use crate::error::{Result, SteinError};
use crate::kernels::{Bandwidth, KernelSpec};
use crate::mat::{log_sum_exp, sq_dist, Mat};
use crate::models::{scores_of, ContinuousTarget};
use crate::svgd::{annealed_targets, bandwidth_for, weighted_direction, ParticleEnsemble, StepSchedule};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// `w_j / sum w`
    #[default]
    SelfNormalized,
    /// `w_j / n`
    Plain,
    /// rank weights `n / #{mu >= mu_j}`, normalized
    Rank,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GfOptions {
    pub weight_mode: WeightMode,
    /// Steps fail when the effective sample size drops below this.
    pub min_ess: f64,
    /// Scale particle `i`'s move by `n * w_i` (normalized weights), the
    /// per-particle step-size reading of the update.
    pub weight_scaled_steps: bool,
}

impl Default for GfOptions {
    fn default() -> Self {
        GfOptions { weight_mode: WeightMode::SelfNormalized, min_ess: 2.0, weight_scaled_steps: false }
    }
}

#[derive(Debug, Clone)]
pub struct WeightTrack {
    pub log_weights: Vec<f64>,
    /// Weights actually applied in the direction, summing to one except in
    /// plain mode.
    pub applied: Vec<f64>,
    pub ess: f64,
}

/// `gamma_j = n / #{k : mu_k >= mu_j}`, computed from log-weights (ranks only).
pub fn rank_normalized_weights(log_w: &[f64]) -> Vec<f64> {
    let n = log_w.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| log_w[a].total_cmp(&log_w[b]));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        // group ties so they share the inclusive count
        let mut end = start + 1;
        while end < n && log_w[order[end]] == log_w[order[start]] {
            end += 1;
        }
        let at_least = (n - start) as f64;
        for &j in &order[start..end] {
            out[j] = n as f64 / at_least;
        }
        start = end;
    }
    out
}

pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    s * s / s2
}

pub fn importance_weights(
    positions: &Mat,
    target: &dyn ContinuousTarget,
    surrogate: &dyn ContinuousTarget,
    mode: WeightMode,
    min_ess: f64,
) -> Result<WeightTrack> {
    let n = positions.rows();
    let log_weights: Vec<f64> = positions.iter_rows().map(|x| surrogate.log_density(x) - target.log_density(x)).collect();
    let top = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = |reason: &str| SteinError::DegenerateWeights { reason: reason.into(), max_log_weight: top };
    if !top.is_finite() || log_weights.iter().any(|v| v.is_nan()) {
        return Err(degenerate("all importance weights underflow or are undefined"));
    }
    let applied: Vec<f64> = match mode {
        WeightMode::SelfNormalized => {
            let e: Vec<f64> = log_weights.iter().map(|l| (l - top).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
        WeightMode::Plain => {
            let nf = n as f64;
            let w: Vec<f64> = log_weights.iter().map(|l| l.exp() / nf).collect();
            if w.iter().any(|v| !v.is_finite()) {
                return Err(degenerate("plain weights overflow"));
            }
            if w.iter().all(|v| *v == 0.0) {
                return Err(degenerate("all plain weights underflow to zero"));
            }
            w
        }
        WeightMode::Rank => {
            let g = rank_normalized_weights(&log_weights);
            let s: f64 = g.iter().sum();
            g.into_iter().map(|v| v / s).collect()
        }
    };
    let ess = effective_sample_size(&applied);
    if n >= 2 && ess < min_ess {
        return Err(SteinError::DegenerateWeights {
            reason: format!("effective sample size {ess:.3} below {min_ess}"),
            max_log_weight: top,
        });
    }
    Ok(WeightTrack { log_weights, applied, ess })
}

/// Row `i` = `sum_j wbar_j [s_rho(x_j) k(x_j, x_i) + grad_{x_j} k(x_j, x_i)]`.
pub fn gf_svgd_direction(
    positions: &Mat,
    target: &dyn ContinuousTarget,
    surrogate: &dyn ContinuousTarget,
    kernel: &KernelSpec,
    opts: &GfOptions,
) -> Result<(Mat, WeightTrack)> {
    let track = importance_weights(positions, target, surrogate, opts.weight_mode, opts.min_ess)?;
    let scores = scores_of(surrogate, positions)?;
    let h = bandwidth_for(positions, kernel)?;
    let mut dir = weighted_direction(positions, &scores, &track.applied, h);
    if opts.weight_scaled_steps {
        let n = positions.rows() as f64;
        let total: f64 = track.applied.iter().sum();
        for i in 0..positions.rows() {
            let f = n * track.applied[i] / total;
            dir.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
    }
    Ok((dir, track))
}

pub fn gf_svgd_step(
    ens: &mut ParticleEnsemble,
    target: &dyn ContinuousTarget,
    surrogate: &dyn ContinuousTarget,
    kernel: &KernelSpec,
    schedule: &StepSchedule,
    opts: &GfOptions,
) -> Result<WeightTrack> {
    let (dir, track) = gf_svgd_direction(&ens.positions, target, surrogate, kernel, opts)?;
    ens.apply(&dir, schedule)?;
    Ok(track)
}

/// Runs the loop; returns the final ensemble and the ESS before every step.
#[allow(clippy::too_many_arguments)]
pub fn run_gf_svgd(
    mut ens: ParticleEnsemble,
    target: &dyn ContinuousTarget,
    surrogate: &dyn ContinuousTarget,
    iters: usize,
    kernel: &KernelSpec,
    schedule: &StepSchedule,
    opts: &GfOptions,
    mut observe: impl FnMut(&ParticleEnsemble),
) -> Result<(ParticleEnsemble, Vec<f64>)> {
    schedule.validate()?;
    let mut ess = Vec::with_capacity(iters);
    observe(&ens);
    for _ in 0..iters {
        let track = gf_svgd_step(&mut ens, target, surrogate, kernel, schedule, opts)?;
        ess.push(track.ess);
        observe(&ens);
    }
    Ok((ens, ess))
}

/// Smoothed density `rho(x) ∝ sum_j p(x_j) exp(-|x_j - x|^2 / h)` through
/// anchor points with known log-density values.
#[derive(Debug, Clone)]
pub struct KernelCurve {
    pub anchors: Mat,
    pub anchor_logp: Vec<f64>,
    pub h: f64,
}

pub fn kernel_curve_surrogate(anchors: Mat, anchor_logp: Vec<f64>, h: f64) -> Result<KernelCurve> {
    if anchors.rows() == 0 || anchors.rows() != anchor_logp.len() {
        return crate::error::invalid("kernel curve needs one log-density per anchor");
    }
    if !(h > 0.0 && h.is_finite()) {
        return crate::error::invalid("kernel curve bandwidth must be positive");
    }
    Ok(KernelCurve { anchors, anchor_logp, h })
}

impl KernelCurve {
    fn terms(&self, x: &[f64]) -> Vec<f64> {
        self.anchors
            .iter_rows()
            .zip(&self.anchor_logp)
            .map(|(a, lp)| lp - sq_dist(a, x) / self.h)
            .collect()
    }
}

impl ContinuousTarget for KernelCurve {
    fn dim(&self) -> usize {
        self.anchors.cols()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.terms(x))
    }
    fn score(&self, x: &[f64]) -> Option<Vec<f64>> {
        let t = self.terms(x);
        let lse = log_sum_exp(&t);
        let mut s = vec![0.0; x.len()];
        for (tj, a) in t.iter().zip(self.anchors.iter_rows()) {
            let r = (tj - lse).exp();
            for k in 0..x.len() {
                s[k] += r * 2.0 * (a[k] - x[k]) / self.h;
            }
        }
        Some(s)
    }
}

/// Annealed gradient-free SVGD: at each temperature the surrogate is a kernel
/// curve through the current particles, followed by one weighted step.
#[allow(clippy::too_many_arguments)]
pub fn run_agf_svgd(
    mut ens: ParticleEnsemble,
    target: &dyn ContinuousTarget,
    base: &dyn ContinuousTarget,
    betas: &[f64],
    kernel: &KernelSpec,
    schedule: &StepSchedule,
    smoothing: Bandwidth,
    opts: &GfOptions,
    mut observe: impl FnMut(&ParticleEnsemble),
) -> Result<(ParticleEnsemble, Vec<f64>)> {
    schedule.validate()?;
    let path = annealed_targets(base, target, betas)?;
    let mut ess = Vec::with_capacity(path.len());
    observe(&ens);
    for p in path.iter().skip(1) {
        let anchors = ens.positions.clone();
        let logp: Vec<f64> = anchors.iter_rows().map(|x| p.log_density(x)).collect();
        let h = bandwidth_for(&anchors, &KernelSpec { bandwidth: smoothing })?;
        let rho = kernel_curve_surrogate(anchors, logp, h)?;
        let track = gf_svgd_step(&mut ens, p, &rho, kernel, schedule, opts)?;
        ess.push(track.ess);
        observe(&ens);
    }
    Ok((ens, ess))
}
