//! Stein variational importance sampling.
//!
//! Leader particles build each SVGD transport map; follower particles are
//! pushed through the same map and keep a running log-density by
//! subtracting the log-Jacobian of every step. The final followers are an
//! importance sample with exact (up to the determinant approximation)
//! proposal densities, which gives an unbiased estimate of `Z`.

use crate::error::{invalid, Result, SteinError};
use crate::kernels::{rbf, KernelSpec};
use crate::ksd::stein_kernel_matrix;
use crate::mat::{log_sum_exp, Mat};
use crate::models::{scores_of, ContinuousTarget, Proposal};
use crate::svgd::{bandwidth_for, weighted_direction, StepSchedule, DIVERGENCE_LIMIT};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Singular-pivot threshold for the LU log-determinant.
pub const PIVOT_TOL: f64 = 1e-14;

/// SVGD velocity field built from a frozen set of leaders.
#[derive(Debug, Clone)]
pub struct LeaderField {
    leaders: Mat,
    scores: Mat,
    h: f64,
}

impl LeaderField {
    pub fn new(leaders: &Mat, target: &dyn ContinuousTarget, h: f64) -> Result<Self> {
        if leaders.rows() == 0 {
            return invalid("need at least one leader");
        }
        if !(h > 0.0) {
            return invalid("bandwidth must be positive");
        }
        Ok(LeaderField { leaders: leaders.clone(), scores: scores_of(target, leaders)?, h })
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    /// Velocity only.
    pub fn velocity(&self, y: &[f64]) -> Vec<f64> {
        let d = y.len();
        let h = self.h;
        let mut phi = vec![0.0; d];
        for (x, s) in self.leaders.iter_rows().zip(self.scores.iter_rows()) {
            let k = rbf(x, y, h);
            for a in 0..d {
                phi[a] += s[a] * k - 2.0 / h * (x[a] - y[a]) * k;
            }
        }
        let n = self.leaders.rows() as f64;
        phi.iter_mut().for_each(|v| *v /= n);
        phi
    }

    /// Velocity and its Jacobian `A[a][b] = d phi_a / d y_b`.
    pub fn eval(&self, y: &[f64]) -> (Vec<f64>, Mat) {
        let d = y.len();
        let h = self.h;
        let c = 2.0 / h;
        let mut phi = vec![0.0; d];
        let mut jac = Mat::zeros(d, d);
        let mut diff = vec![0.0; d];
        for (x, s) in self.leaders.iter_rows().zip(self.scores.iter_rows()) {
            let k = rbf(x, y, h);
            for a in 0..d {
                diff[a] = x[a] - y[a];
                phi[a] += s[a] * k - c * diff[a] * k;
            }
            for a in 0..d {
                for b in 0..d {
                    let delta = if a == b { 1.0 } else { 0.0 };
                    jac[(a, b)] += s[a] * c * diff[b] * k + c * k * (delta - c * diff[a] * diff[b]);
                }
            }
        }
        let n = self.leaders.rows() as f64;
        phi.iter_mut().for_each(|v| *v /= n);
        jac.as_mut_slice().iter_mut().for_each(|v| *v /= n);
        (phi, jac)
    }
}

pub fn leader_velocity_field(leaders: &Mat, target: &dyn ContinuousTarget, kernel: &KernelSpec) -> Result<LeaderField> {
    let h = bandwidth_for(leaders, kernel)?;
    LeaderField::new(leaders, target, h)
}

/// `(sign, log|det m|)` by LU with partial pivoting.
pub fn lu_sign_logdet(m: &Mat) -> Result<(f64, f64)> {
    let n = m.rows();
    if m.cols() != n {
        return invalid("determinant of a non-square matrix");
    }
    let mut a = m.clone();
    let mut sign = 1.0;
    let mut logdet = 0.0;
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[(r, col)].abs() > a[(piv, col)].abs() {
                piv = r;
            }
        }
        let p = a[(piv, col)];
        if !(p.abs() >= PIVOT_TOL) {
            return Err(SteinError::SingularTransform(format!("pivot {p:e} in column {col}")));
        }
        if piv != col {
            for c in 0..n {
                let t = a[(col, c)];
                a[(col, c)] = a[(piv, c)];
                a[(piv, c)] = t;
            }
            sign = -sign;
        }
        if p < 0.0 {
            sign = -sign;
        }
        logdet += p.abs().ln();
        for r in col + 1..n {
            let f = a[(r, col)] / p;
            if f != 0.0 {
                for c in col..n {
                    a[(r, c)] -= f * a[(col, c)];
                }
            }
        }
    }
    Ok((sign, logdet))
}

fn shifted_identity(a: &Mat, eps: f64) -> Mat {
    let d = a.rows();
    Mat::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 } + eps * a[(i, j)])
}

/// `log|det(I + eps A)|`.
pub fn logdet_exact(a: &Mat, eps: f64) -> Result<f64> {
    Ok(lu_sign_logdet(&shifted_identity(a, eps))?.1)
}

/// First-order approximation `sum_k log(1 + eps a_kk)`.
pub fn logdet_firstorder(a: &Mat, eps: f64) -> Result<f64> {
    if a.rows() != a.cols() {
        return invalid("determinant of a non-square matrix");
    }
    if !(eps.abs() * a.norm_inf() < 1.0) {
        return Err(SteinError::InvalidApproximation(format!(
            "eps * |A|_inf = {} is not below 1",
            eps.abs() * a.norm_inf()
        )));
    }
    let mut s = 0.0;
    for k in 0..a.rows() {
        let f = 1.0 + eps * a[(k, k)];
        if !(f > 0.0) {
            return Err(SteinError::InvalidApproximation(format!("diagonal factor {f} is not positive")));
        }
        s += f.ln();
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetMode {
    Exact,
    FirstOrder,
    /// Exact when `eps > 0.1` or a diagonal factor falls below 0.5 in
    /// magnitude; first order otherwise.
    #[default]
    Auto,
}

/// Which determinant rule a given step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetChoice {
    Exact,
    FirstOrder,
}

pub fn choose_det(a: &Mat, eps: f64, mode: DetMode) -> DetChoice {
    match mode {
        DetMode::Exact => DetChoice::Exact,
        DetMode::FirstOrder => DetChoice::FirstOrder,
        DetMode::Auto => {
            let weak_diag = (0..a.rows()).any(|k| (1.0 + eps * a[(k, k)]).abs() < 0.5);
            if eps > 0.1 || weak_diag || eps * a.norm_inf() >= 1.0 {
                DetChoice::Exact
            } else {
                DetChoice::FirstOrder
            }
        }
    }
}

/// Log-determinant for the map at one follower, or None when the map is not
/// locally one-to-one (non-positive or singular factor).
fn follower_logdet(a: &Mat, eps: f64, mode: DetMode) -> Option<f64> {
    match choose_det(a, eps, mode) {
        DetChoice::Exact => match lu_sign_logdet(&shifted_identity(a, eps)) {
            Ok((s, l)) if s > 0.0 => Some(l),
            _ => None,
        },
        DetChoice::FirstOrder => logdet_firstorder(a, eps).ok(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderFollowerEnsemble {
    pub leaders: Mat,
    pub followers: Mat,
    pub follower_log_q: Vec<f64>,
    pub eps_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SteinIsConfig {
    pub n_leaders: usize,
    pub n_followers: usize,
    pub iterations: usize,
    pub kernel: KernelSpec,
    pub schedule: StepSchedule,
    pub det_mode: DetMode,
    pub max_halvings: usize,
}

impl Default for SteinIsConfig {
    fn default() -> Self {
        SteinIsConfig {
            n_leaders: 100,
            n_followers: 100,
            iterations: 800,
            kernel: KernelSpec::median(),
            schedule: StepSchedule::Decay { alpha: 0.1, beta: 0.5 },
            det_mode: DetMode::Auto,
            max_halvings: 5,
        }
    }
}

/// Importance sample: positions and log-weights, plus normalized weights.
#[derive(Debug, Clone)]
pub struct WeightedSample {
    pub positions: Mat,
    pub log_weights: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl WeightedSample {
    pub fn new(positions: Mat, log_weights: Vec<f64>) -> Result<Self> {
        if positions.rows() != log_weights.len() {
            return invalid("one log-weight per position required");
        }
        let top = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() || log_weights.iter().any(|v| v.is_nan()) {
            return Err(SteinError::DegenerateWeights { reason: "no positive finite weight".into(), max_log_weight: top });
        }
        let lse = log_sum_exp(&log_weights);
        let normalized = log_weights.iter().map(|l| (l - lse).exp()).collect();
        Ok(WeightedSample { positions, log_weights, normalized })
    }

    /// Equal weights.
    pub fn uniform(positions: Mat) -> Result<Self> {
        let n = positions.rows();
        WeightedSample::new(positions, vec![0.0; n])
    }

    /// `log((1/n) sum_i w_i)`.
    pub fn log_mean_weight(&self) -> f64 {
        log_sum_exp(&self.log_weights) - (self.log_weights.len() as f64).ln()
    }

    pub fn ess(&self) -> f64 {
        1.0 / self.normalized.iter().map(|w| w * w).sum::<f64>()
    }
}

pub fn self_normalized_expectation(sample: &WeightedSample, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for (x, w) in sample.positions.iter_rows().zip(&sample.normalized) {
        let v = f(x);
        let a = acc.get_or_insert_with(|| vec![0.0; v.len()]);
        if *w > 0.0 {
            for (ai, vi) in a.iter_mut().zip(&v) {
                *ai += w * vi;
            }
        }
    }
    acc.ok_or_else(|| SteinError::DegenerateWeights { reason: "empty sample".into(), max_log_weight: f64::NEG_INFINITY })
}

#[derive(Debug, Clone)]
pub struct SteinIsOutput {
    pub sample: WeightedSample,
    pub log_z_hat: f64,
    pub z_hat: f64,
    pub state: LeaderFollowerEnsemble,
}

fn check_schedule(s: &StepSchedule) -> Result<()> {
    s.validate()?;
    if s.is_adaptive() {
        return Err(SteinError::Unsupported(
            "per-coordinate adaptive steps break the shared transport map; use a constant or decay schedule".into(),
        ));
    }
    Ok(())
}

fn check_bounds(m: &Mat, iteration: usize) -> Result<()> {
    if let Some(bad) = m.as_slice().iter().find(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        return Err(SteinError::Overflow { iteration, detail: format!("coordinate reached {bad:e}") });
    }
    Ok(())
}

/// Draws leaders and followers from `q0` and records the followers' log-density.
pub fn initial_state(q0: &dyn Proposal, n_leaders: usize, n_followers: usize, rng: &mut dyn RngCore) -> Result<LeaderFollowerEnsemble> {
    let d = q0.dim();
    let draw = |n: usize, rng: &mut dyn RngCore| {
        let mut m = Mat::zeros(n, d);
        for i in 0..n {
            let x = q0.sample(rng);
            m.row_mut(i).copy_from_slice(&x);
        }
        m
    };
    let leaders = draw(n_leaders, rng);
    let followers = draw(n_followers, rng);
    let follower_log_q = followers.iter_rows().map(|x| q0.log_pdf(x)).collect();
    Ok(LeaderFollowerEnsemble { leaders, followers, follower_log_q, eps_history: Vec::new() })
}

/// Advances an existing state by `cfg.iterations` transforms.
pub fn advance(state: &mut LeaderFollowerEnsemble, target: &dyn ContinuousTarget, cfg: &SteinIsConfig) -> Result<()> {
    check_schedule(&cfg.schedule)?;
    let start = state.eps_history.len();
    for l in start..start + cfg.iterations {
        let field = leader_velocity_field(&state.leaders, target, &cfg.kernel)?;
        let mut eps = cfg.schedule.base_step(l);
        let mut moves = None;
        for _ in 0..=cfg.max_halvings {
            let tried: Vec<Option<(Vec<f64>, f64)>> = (0..state.followers.rows())
                .into_par_iter()
                .map(|i| {
                    let (phi, jac) = field.eval(state.followers.row(i));
                    follower_logdet(&jac, eps, cfg.det_mode).map(|ld| (phi, ld))
                })
                .collect();
            if tried.iter().all(|t| t.is_some()) {
                moves = Some(tried.into_iter().map(|t| t.unwrap()).collect::<Vec<_>>());
                break;
            }
            eps *= 0.5;
        }
        let moves = moves.ok_or_else(|| {
            SteinError::SingularTransform(format!("map not one-to-one at iteration {l} after {} halvings", cfg.max_halvings))
        })?;
        let mut followers = state.followers.clone();
        for (i, (phi, ld)) in moves.iter().enumerate() {
            for (x, v) in followers.row_mut(i).iter_mut().zip(phi) {
                *x += eps * v;
            }
            state.follower_log_q[i] -= ld;
        }
        let mut leaders = state.leaders.clone();
        for i in 0..leaders.rows() {
            let phi = field.velocity(state.leaders.row(i));
            for (x, v) in leaders.row_mut(i).iter_mut().zip(&phi) {
                *x += eps * v;
            }
        }
        check_bounds(&followers, l)?;
        check_bounds(&leaders, l)?;
        state.followers = followers;
        state.leaders = leaders;
        state.eps_history.push(eps);
    }
    Ok(())
}

/// Importance weights `p(x)/q_K(x)` of the current followers.
pub fn finish(state: LeaderFollowerEnsemble, target: &dyn ContinuousTarget) -> Result<SteinIsOutput> {
    let log_w: Vec<f64> = state
        .followers
        .iter_rows()
        .zip(&state.follower_log_q)
        .map(|(x, lq)| target.log_density(x) - lq)
        .collect();
    let sample = WeightedSample::new(state.followers.clone(), log_w)?;
    let log_z_hat = sample.log_mean_weight();
    Ok(SteinIsOutput { z_hat: log_z_hat.exp(), log_z_hat, sample, state })
}

pub fn run_steinis(target: &dyn ContinuousTarget, q0: &dyn Proposal, cfg: &SteinIsConfig, rng: &mut dyn RngCore) -> Result<SteinIsOutput> {
    if cfg.n_leaders == 0 || cfg.n_followers == 0 {
        return invalid("need at least one leader and one follower");
    }
    if q0.dim() != target.dim() {
        return invalid("proposal and target dimensions differ");
    }
    check_schedule(&cfg.schedule)?;
    let mut state = initial_state(q0, cfg.n_leaders, cfg.n_followers, rng)?;
    advance(&mut state, target, cfg)?;
    finish(state, target)
}

#[derive(Debug, Clone, Copy)]
pub struct PathConfig {
    pub n: usize,
    pub iterations: usize,
    pub kernel: KernelSpec,
    pub schedule: StepSchedule,
    /// Fresh proposal draws for the cross-entropy term.
    pub m0: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig { n: 200, iterations: 100, kernel: KernelSpec::median(), schedule: StepSchedule::Constant { eps: 0.05 }, m0: 10_000 }
    }
}

#[derive(Debug, Clone)]
pub struct PathEstimate {
    pub log_z: f64,
    /// Accumulated `sum eps * KSD^2`, the KL drop along the path.
    pub kl_drop: f64,
    /// Monte Carlo `E_q0[log q0 - log p]`.
    pub log_ratio: f64,
    /// V-statistic KSD^2 before every step.
    pub ksd_trace: Vec<f64>,
}

/// `log Z ≈ sum_l eps_l KSD^2(q_l, p) - E_q0[log(q0 / p)]` along an SVGD run
/// started from `q0`.
pub fn path_integration_logz(target: &dyn ContinuousTarget, q0: &dyn Proposal, cfg: &PathConfig, rng: &mut dyn RngCore) -> Result<PathEstimate> {
    check_schedule(&cfg.schedule)?;
    if cfg.n == 0 || cfg.m0 == 0 {
        return invalid("need particles and proposal draws");
    }
    let d = q0.dim();
    let mut x = Mat::zeros(cfg.n, d);
    for i in 0..cfg.n {
        let s = q0.sample(rng);
        x.row_mut(i).copy_from_slice(&s);
    }
    let w = vec![1.0 / cfg.n as f64; cfg.n];
    let mut kl_drop = 0.0;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for l in 0..cfg.iterations {
        let h = bandwidth_for(&x, &cfg.kernel)?;
        let ksd2 = stein_kernel_matrix(&x, target, h)?.v_statistic();
        let eps = cfg.schedule.base_step(l);
        kl_drop += eps * ksd2;
        trace.push(ksd2);
        let scores = scores_of(target, &x)?;
        let dir = weighted_direction(&x, &scores, &w, h);
        for (xi, di) in x.as_mut_slice().iter_mut().zip(dir.as_slice()) {
            *xi += eps * di;
        }
        check_bounds(&x, l)?;
    }
    let mut acc = 0.0;
    for _ in 0..cfg.m0 {
        let s = q0.sample(rng);
        acc += q0.log_pdf(&s) - target.log_density(&s);
    }
    let log_ratio = acc / cfg.m0 as f64;
    Ok(PathEstimate { log_z: kl_drop - log_ratio, kl_drop, log_ratio, ksd_trace: trace })
}
