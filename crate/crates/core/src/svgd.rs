//! Stein variational gradient descent and its annealed form.

use crate::error::{invalid, Result, SteinError};
use crate::kernels::{rbf, KernelSpec};
use crate::mat::Mat;
use crate::models::{scores_of, ContinuousTarget};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Coordinates beyond this magnitude abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StepSchedule {
    Constant { eps: f64 },
    Adam {
        eps: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_delta")]
        delta: f64,
    },
    /// `alpha / (1 + iteration)^beta`
    Decay { alpha: f64, beta: f64 },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_delta() -> f64 {
    1e-8
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::adam(0.05)
    }
}

impl StepSchedule {
    pub fn adam(eps: f64) -> Self {
        StepSchedule::Adam { eps, beta1: 0.9, beta2: 0.999, delta: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant { eps } => eps >= 0.0 && eps.is_finite(),
            StepSchedule::Adam { eps, beta1, beta2, delta } => {
                eps >= 0.0 && eps.is_finite() && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && delta > 0.0
            }
            StepSchedule::Decay { alpha, beta } => alpha >= 0.0 && alpha.is_finite() && beta >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            invalid(format!("bad step schedule {self:?}"))
        }
    }

    /// Scalar step for iteration `iter` (0-based). Adam reports its base step.
    pub fn base_step(&self, iter: usize) -> f64 {
        match *self {
            StepSchedule::Constant { eps } | StepSchedule::Adam { eps, .. } => eps,
            StepSchedule::Decay { alpha, beta } => alpha / (1.0 + iter as f64).powf(beta),
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, StepSchedule::Adam { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: u32,
}

/// Particle positions plus the iteration counter and optimizer memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: Mat,
    pub iteration: usize,
    pub adam: Option<AdamState>,
}

impl ParticleEnsemble {
    pub fn new(positions: Mat) -> Result<Self> {
        if positions.rows() == 0 || positions.cols() == 0 {
            return invalid("ensemble needs at least one particle and one dimension");
        }
        if !positions.all_finite() {
            return invalid("initial positions must be finite");
        }
        Ok(ParticleEnsemble { positions, iteration: 0, adam: None })
    }

    pub fn n(&self) -> usize {
        self.positions.rows()
    }

    pub fn dim(&self) -> usize {
        self.positions.cols()
    }

    /// Move particles along `direction` using the schedule. Checks the
    /// divergence guard before committing.
    pub fn apply(&mut self, direction: &Mat, schedule: &StepSchedule) -> Result<()> {
        let len = direction.as_slice().len();
        let delta: Vec<f64> = match *schedule {
            StepSchedule::Constant { .. } | StepSchedule::Decay { .. } => {
                let eps = schedule.base_step(self.iteration);
                direction.as_slice().iter().map(|g| eps * g).collect()
            }
            StepSchedule::Adam { eps, beta1, beta2, delta } => {
                let st = self.adam.get_or_insert_with(|| AdamState { first: vec![0.0; len], second: vec![0.0; len], steps: 0 });
                st.steps += 1;
                let c1 = 1.0 - beta1.powi(st.steps as i32);
                let c2 = 1.0 - beta2.powi(st.steps as i32);
                let mut out = Vec::with_capacity(len);
                for (k, g) in direction.as_slice().iter().enumerate() {
                    st.first[k] = beta1 * st.first[k] + (1.0 - beta1) * g;
                    st.second[k] = beta2 * st.second[k] + (1.0 - beta2) * g * g;
                    let m = st.first[k] / c1;
                    let v = st.second[k] / c2;
                    out.push(eps * m / (v.sqrt() + delta));
                }
                out
            }
        };
        let mut next = self.positions.clone();
        for (x, dx) in next.as_mut_slice().iter_mut().zip(&delta) {
            *x += dx;
        }
        if let Some(bad) = next.as_slice().iter().find(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(SteinError::Overflow {
                iteration: self.iteration,
                detail: format!("coordinate reached {bad:e}"),
            });
        }
        self.positions = next;
        self.iteration += 1;
        Ok(())
    }
}

/// Row `i` = `sum_j weights_j [s_j k(x_j, x_i) + grad_{x_j} k(x_j, x_i)]`.
///
/// Both SVGD (weights `1/n`) and the gradient-free variant go through this
/// routine, so the two agree bit for bit when the weights do.
pub fn weighted_direction(positions: &Mat, scores: &Mat, weights: &[f64], h: f64) -> Mat {
    let n = positions.rows();
    let d = positions.cols();
    let mut out = Mat::zeros(n, d);
    out.as_mut_slice().par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        let xi = positions.row(i);
        for j in 0..n {
            let xj = positions.row(j);
            let k = rbf(xj, xi, h);
            let w = weights[j];
            let sj = scores.row(j);
            for a in 0..d {
                // grad_{x_j} k(x_j, x_i) = -(2/h)(x_j - x_i) k
                row[a] += w * (sj[a] * k - 2.0 / h * (xj[a] - xi[a]) * k);
            }
        }
    });
    out
}

pub fn svgd_direction(positions: &Mat, target: &dyn ContinuousTarget, kernel: &KernelSpec) -> Result<Mat> {
    let scores = scores_of(target, positions)?;
    let h = bandwidth_for(positions, kernel)?;
    let w = vec![1.0 / positions.rows() as f64; positions.rows()];
    Ok(weighted_direction(positions, &scores, &w, h))
}

/// Resolves the bandwidth; a single particle has no pairwise distances, so
/// the median rule falls back to 1 there (the repulsive term vanishes anyway).
pub(crate) fn bandwidth_for(positions: &Mat, kernel: &KernelSpec) -> Result<f64> {
    if positions.rows() < 2 && matches!(kernel.bandwidth, crate::kernels::Bandwidth::MedianHeuristic) {
        return Ok(1.0);
    }
    kernel.resolve(positions)
}

pub fn svgd_step(ens: &mut ParticleEnsemble, target: &dyn ContinuousTarget, kernel: &KernelSpec, schedule: &StepSchedule) -> Result<()> {
    let dir = svgd_direction(&ens.positions, target, kernel)?;
    ens.apply(&dir, schedule)
}

/// Runs `iters` SVGD steps, calling `observe` before the first step and after each one.
pub fn run_svgd(
    mut ens: ParticleEnsemble,
    target: &dyn ContinuousTarget,
    iters: usize,
    kernel: &KernelSpec,
    schedule: &StepSchedule,
    mut observe: impl FnMut(&ParticleEnsemble),
) -> Result<ParticleEnsemble> {
    schedule.validate()?;
    observe(&ens);
    for _ in 0..iters {
        svgd_step(&mut ens, target, kernel, schedule)?;
        observe(&ens);
    }
    Ok(ens)
}

/// Geometric path `p0^(1-beta) p^beta` between two targets.
pub struct Annealed<'a> {
    pub base: &'a dyn ContinuousTarget,
    pub target: &'a dyn ContinuousTarget,
    pub beta: f64,
}

impl ContinuousTarget for Annealed<'_> {
    fn dim(&self) -> usize {
        self.target.dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        if self.beta == 0.0 {
            return self.base.log_density(x);
        }
        if self.beta == 1.0 {
            return self.target.log_density(x);
        }
        (1.0 - self.beta) * self.base.log_density(x) + self.beta * self.target.log_density(x)
    }
    fn score(&self, x: &[f64]) -> Option<Vec<f64>> {
        if self.beta == 0.0 {
            return self.base.score(x);
        }
        if self.beta == 1.0 {
            return self.target.score(x);
        }
        let s0 = self.base.score(x)?;
        let s1 = self.target.score(x)?;
        Some(s0.iter().zip(&s1).map(|(a, b)| (1.0 - self.beta) * a + self.beta * b).collect())
    }
}

/// Checks `0 = beta_0 < ... < beta_T = 1`.
pub fn validate_betas(betas: &[f64]) -> Result<()> {
    if betas.len() < 2 || betas[0] != 0.0 || *betas.last().unwrap() != 1.0 {
        return invalid("temperatures must start at 0 and end at 1");
    }
    if betas.windows(2).any(|w| !(w[1] > w[0])) {
        return invalid("temperatures must be strictly increasing");
    }
    Ok(())
}

/// Evenly spaced temperatures `0, 1/T, ..., 1`.
pub fn linear_betas(steps: usize) -> Vec<f64> {
    (0..=steps).map(|l| l as f64 / steps as f64).collect()
}

/// One annealed target per temperature, including `beta_0`.
pub fn annealed_targets<'a>(
    base: &'a dyn ContinuousTarget,
    target: &'a dyn ContinuousTarget,
    betas: &[f64],
) -> Result<Vec<Annealed<'a>>> {
    validate_betas(betas)?;
    Ok(betas.iter().map(|&beta| Annealed { base, target, beta }).collect())
}

/// `m` SVGD steps against each intermediate target `p_1, ..., p_T`.
#[allow(clippy::too_many_arguments)]
pub fn run_annealed_svgd(
    mut ens: ParticleEnsemble,
    base: &dyn ContinuousTarget,
    target: &dyn ContinuousTarget,
    betas: &[f64],
    steps_per_temperature: usize,
    kernel: &KernelSpec,
    schedule: &StepSchedule,
    mut observe: impl FnMut(&ParticleEnsemble),
) -> Result<ParticleEnsemble> {
    schedule.validate()?;
    let path = annealed_targets(base, target, betas)?;
    observe(&ens);
    for p in path.iter().skip(1) {
        for _ in 0..steps_per_temperature {
            svgd_step(&mut ens, p, kernel, schedule)?;
            observe(&ens);
        }
    }
    Ok(ens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{gaussian_target, gmm_target, Shifted};
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_particle_examples() {
        let p = gaussian_target(vec![0.0], 1.0).unwrap();
        let at_mode = Mat::from_rows(&[vec![0.0]]).unwrap();
        assert_eq!(svgd_direction(&at_mode, &p, &KernelSpec::median()).unwrap().as_slice(), &[0.0]);
        let off = Mat::from_rows(&[vec![2.0]]).unwrap();
        let dir = svgd_direction(&off, &p, &KernelSpec::fixed(0.37).unwrap()).unwrap();
        assert_eq!(dir.as_slice(), &[-2.0]);
    }

    #[test]
    fn mirror_symmetry() {
        let p = gaussian_target(vec![0.0], 1.0).unwrap();
        let pts = Mat::from_rows(&[vec![-0.7], vec![0.7]]).unwrap();
        let dir = svgd_direction(&pts, &p, &KernelSpec::median()).unwrap();
        assert_eq!(dir[(0, 0)], -dir[(1, 0)]);
    }

    #[test]
    fn zero_step_leaves_positions() {
        let p = gaussian_target(vec![0.0, 0.0], 1.0).unwrap();
        let mut rng = stream(20, 0);
        let pts = Mat::from_fn(10, 2, |_, _| rng.sample(StandardNormal));
        let mut ens = ParticleEnsemble::new(pts.clone()).unwrap();
        svgd_step(&mut ens, &p, &KernelSpec::median(), &StepSchedule::Constant { eps: 0.0 }).unwrap();
        assert_eq!(ens.positions, pts);
        assert_eq!(ens.iteration, 1);
    }

    #[test]
    fn direction_ignores_log_density_constant() {
        let p = gaussian_target(vec![0.5], 2.0).unwrap();
        let s = Shifted { inner: &p, shift: 17.0 };
        let pts = Mat::from_rows(&[vec![0.1], vec![1.4], vec![-2.0]]).unwrap();
        let a = svgd_direction(&pts, &p, &KernelSpec::median()).unwrap();
        let b = svgd_direction(&pts, &s, &KernelSpec::median()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_guard_trips() {
        let p = gaussian_target(vec![0.0], 1.0).unwrap();
        let mut ens = ParticleEnsemble::new(Mat::from_rows(&[vec![1.0]]).unwrap()).unwrap();
        let err = svgd_step(&mut ens, &p, &KernelSpec::median(), &StepSchedule::Constant { eps: 1e9 }).unwrap_err();
        assert!(matches!(err, SteinError::Overflow { iteration: 0, .. }));
    }

    #[test]
    fn missing_score_is_unsupported() {
        let p = gaussian_target(vec![0.0], 1.0).unwrap();
        let hidden = crate::models::ScoreHidden(&p);
        let pts = Mat::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(svgd_direction(&pts, &hidden, &KernelSpec::median()), Err(SteinError::Unsupported(_))));
    }

    #[test]
    fn bimodal_moments_after_adam() {
        let p = gmm_target(&[0.5, 0.5], Mat::from_rows(&[vec![-2.0], vec![2.0]]).unwrap(), 1.0).unwrap();
        let mut rng = stream(21, 0);
        let pts = Mat::from_fn(200, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ens = run_svgd(ParticleEnsemble::new(pts).unwrap(), &p, 1000, &KernelSpec::median(), &StepSchedule::default(), |_| {}).unwrap();
        let xs = ens.positions.as_slice();
        let m = crate::mat::mean(xs);
        let m2 = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        assert!(m.abs() < 0.1, "mean {m}");
        assert!((m2 - 5.0).abs() < 0.5, "second moment {m2}");
    }

    #[test]
    fn annealed_endpoints_and_gaussian_product() {
        let p0 = gaussian_target(vec![1.0], 4.0).unwrap();
        let p = gaussian_target(vec![-1.0], 0.5).unwrap();
        let path = annealed_targets(&p0, &p, &[0.0, 0.3, 1.0]).unwrap();
        let x = [0.37];
        assert_eq!(path[0].log_density(&x), p0.log_density(&x));
        assert_eq!(path[2].log_density(&x), p.log_density(&x));
        // intermediate: precision (1-b)/s0 + b/s, mean precision-weighted
        let b = 0.3;
        let prec = (1.0 - b) / 4.0 + b / 0.5;
        let mean = ((1.0 - b) * 1.0 / 4.0 + b * -1.0 / 0.5) / prec;
        let s = path[1].score(&x).unwrap()[0];
        assert!((s - (-(x[0] - mean) * prec)).abs() < 1e-14);
        let l1 = path[1].log_density(&[0.9]) - path[1].log_density(&x);
        let l2 = -0.5 * prec * ((0.9 - mean) * (0.9 - mean) - (x[0] - mean) * (x[0] - mean));
        assert!((l1 - l2).abs() < 1e-13);
        assert!(annealed_targets(&p0, &p, &[0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(annealed_targets(&p0, &p, &[0.1, 1.0]).is_err());
    }

    #[test]
    fn single_temperature_is_plain_svgd() {
        let p0 = gaussian_target(vec![0.0], 3.0).unwrap();
        let p = gaussian_target(vec![1.0], 1.0).unwrap();
        let mut rng = stream(22, 0);
        let pts = Mat::from_fn(20, 1, |_, _| rng.sample::<f64, _>(StandardNormal) * 3f64.sqrt());
        let ens = ParticleEnsemble::new(pts).unwrap();
        let sched = StepSchedule::default();
        let a = run_annealed_svgd(ens.clone(), &p0, &p, &[0.0, 1.0], 30, &KernelSpec::median(), &sched, |_| {}).unwrap();
        let b = run_svgd(ens, &p, 30, &KernelSpec::median(), &sched, |_| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flat_base_scales_drift_by_beta() {
        struct Flat;
        impl ContinuousTarget for Flat {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, _x: &[f64]) -> f64 {
                0.0
            }
            fn score(&self, _x: &[f64]) -> Option<Vec<f64>> {
                Some(vec![0.0])
            }
        }
        let p = gaussian_target(vec![0.0], 1.0).unwrap();
        let beta = 0.25;
        let ann = Annealed { base: &Flat, target: &p, beta };
        let pts = Mat::from_rows(&[vec![-1.0], vec![0.3], vec![2.0]]).unwrap();
        let h = 0.8;
        let dir = svgd_direction(&pts, &ann, &KernelSpec::fixed(h).unwrap()).unwrap();
        // beta * (1/n) sum_j [s k + (1/beta) grad k]
        for i in 0..3 {
            let xi = pts[(i, 0)];
            let mut acc = 0.0;
            for j in 0..3 {
                let xj = pts[(j, 0)];
                let k = (-(xj - xi) * (xj - xi) / h).exp();
                acc += -xj * k + (1.0 / beta) * (-2.0 / h * (xj - xi) * k);
            }
            let expect = beta * acc / 3.0;
            assert!((dir[(i, 0)] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_first_step_has_unit_scale() {
        let mut ens = ParticleEnsemble::new(Mat::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        let dir = Mat::from_rows(&[vec![3.0, -0.01]]).unwrap();
        ens.apply(&dir, &StepSchedule::adam(0.1)).unwrap();
        assert!((ens.positions[(0, 0)] - 0.1).abs() < 1e-8);
        assert!((ens.positions[(0, 1)] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn decay_schedule_values() {
        let s = StepSchedule::Decay { alpha: 0.5, beta: 0.5 };
        assert_eq!(s.base_step(0), 0.5);
        assert!((s.base_step(3) - 0.25).abs() < 1e-15);
        assert!(StepSchedule::Constant { eps: -1.0 }.validate().is_err());
    }
}
