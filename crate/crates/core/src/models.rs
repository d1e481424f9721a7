//! Target distributions: continuous densities with scores, discrete mass
//! functions, brute-force oracles and a Gibbs baseline.

use crate::error::{invalid, Result, SteinError};
use crate::mat::{dot, log_sum_exp, sq_dist, Mat};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

/// Unnormalized log-density with an optional analytic score.
pub trait ContinuousTarget: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
    fn score(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// A distribution we can both draw from and evaluate exactly (normalized).
pub trait Proposal: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn log_pdf(&self, x: &[f64]) -> f64;
}

/// Unnormalized log-mass on a product space with a common alphabet.
pub trait DiscreteTarget: Sync {
    fn dims(&self) -> usize;
    fn alphabet(&self) -> &[f64];
    fn log_mass(&self, z: &[f64]) -> f64;
}

/// Discrete targets whose energy also makes sense for real-valued states.
pub trait RelaxableTarget: DiscreteTarget {
    fn relaxed_log_mass(&self, z: &[f64]) -> f64;
    fn relaxed_grad(&self, z: &[f64]) -> Vec<f64>;
}

pub(crate) fn require_score(t: &dyn ContinuousTarget, x: &[f64]) -> Result<Vec<f64>> {
    t.score(x)
        .ok_or_else(|| SteinError::Unsupported("target has no analytic score; use a gradient-free method".into()))
}

/// Scores of every row, as a matrix of the same shape.
pub fn scores_of(t: &dyn ContinuousTarget, points: &Mat) -> Result<Mat> {
    let mut out = Mat::zeros(points.rows(), points.cols());
    for i in 0..points.rows() {
        let s = require_score(t, points.row(i))?;
        out.row_mut(i).copy_from_slice(&s);
    }
    Ok(out)
}

pub fn finite_difference_score(t: &dyn ContinuousTarget, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return invalid("finite-difference step must be positive");
    }
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for a in 0..x.len() {
        xp[a] = x[a] + eps;
        let fp = t.log_density(&xp);
        xp[a] = x[a] - eps;
        let fm = t.log_density(&xp);
        xp[a] = x[a];
        g[a] = (fp - fm) / (2.0 * eps);
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Continuous targets

/// Isotropic Gaussian `N(mu, sigma I)`; `sigma` is the variance.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub mu: Vec<f64>,
    pub sigma: f64,
}

pub fn gaussian_target(mu: Vec<f64>, sigma: f64) -> Result<Gaussian> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return invalid(format!("gaussian variance must be positive, got {sigma}"));
    }
    if mu.is_empty() {
        return invalid("gaussian needs at least one dimension");
    }
    Ok(Gaussian { mu, sigma })
}

impl ContinuousTarget for Gaussian {
    fn dim(&self) -> usize {
        self.mu.len()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        -sq_dist(x, &self.mu) / (2.0 * self.sigma)
    }
    fn score(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(x.iter().zip(&self.mu).map(|(a, m)| -(a - m) / self.sigma).collect())
    }
}

impl Proposal for Gaussian {
    fn dim(&self) -> usize {
        self.mu.len()
    }
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let sd = self.sigma.sqrt();
        self.mu
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + sd * z
            })
            .collect()
    }
    fn log_pdf(&self, x: &[f64]) -> f64 {
        self.log_density(x) - 0.5 * self.mu.len() as f64 * (2.0 * PI * self.sigma).ln()
    }
}

/// Isotropic Gaussian mixture. `log_density` is the normalized log-pdf.
#[derive(Debug, Clone)]
pub struct Gmm {
    pub log_weights: Vec<f64>,
    pub means: Mat,
    pub sigma: f64,
}

pub fn gmm_target(weights: &[f64], means: Mat, sigma: f64) -> Result<Gmm> {
    if weights.is_empty() || means.rows() != weights.len() || means.cols() == 0 {
        return invalid("mixture needs matching nonempty weights and means");
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return invalid("mixture weights must be nonnegative and sum to 1");
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return invalid("mixture variance must be positive");
    }
    Ok(Gmm { log_weights: weights.iter().map(|w| w.ln()).collect(), means, sigma })
}

impl Gmm {
    fn component_logs(&self, x: &[f64]) -> Vec<f64> {
        self.log_weights
            .iter()
            .zip(self.means.iter_rows())
            .map(|(lw, m)| lw - sq_dist(x, m) / (2.0 * self.sigma))
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.means.cols()];
        for (lw, m) in self.log_weights.iter().zip(self.means.iter_rows()) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += lw.exp() * v;
            }
        }
        out
    }
}

impl ContinuousTarget for Gmm {
    fn dim(&self) -> usize {
        self.means.cols()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.means.cols() as f64;
        log_sum_exp(&self.component_logs(x)) - 0.5 * d * (2.0 * PI * self.sigma).ln()
    }
    fn score(&self, x: &[f64]) -> Option<Vec<f64>> {
        let logs = self.component_logs(x);
        let lse = log_sum_exp(&logs);
        let mut s = vec![0.0; x.len()];
        for (l, m) in logs.iter().zip(self.means.iter_rows()) {
            let r = (l - lse).exp();
            for a in 0..x.len() {
                s[a] += r * (m[a] - x[a]) / self.sigma;
            }
        }
        Some(s)
    }
}

impl Proposal for Gmm {
    fn dim(&self) -> usize {
        self.means.cols()
    }
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.log_weights.len() - 1;
        for (i, lw) in self.log_weights.iter().enumerate() {
            acc += lw.exp();
            if u < acc {
                pick = i;
                break;
            }
        }
        let sd = self.sigma.sqrt();
        self.means
            .row(pick)
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + sd * z
            })
            .collect()
    }
    fn log_pdf(&self, x: &[f64]) -> f64 {
        self.log_density(x)
    }
}

/// `log(e^t + e^-t)` without overflow.
pub(crate) fn log_2cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p()
}

pub(crate) fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Gauss-Bernoulli RBM with hidden units in {-1, +1}, marginalized over the
/// hidden layer. `coupling` is visible-by-hidden.
#[derive(Debug, Clone)]
pub struct GaussBernoulliRbm {
    pub coupling: Mat,
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
}

pub fn gauss_bernoulli_rbm_target(coupling: Mat, visible_bias: Vec<f64>, hidden_bias: Vec<f64>) -> Result<GaussBernoulliRbm> {
    if coupling.rows() != visible_bias.len() || coupling.cols() != hidden_bias.len() || visible_bias.is_empty() {
        return invalid("rbm shapes do not match");
    }
    if !coupling.all_finite() || visible_bias.iter().chain(&hidden_bias).any(|v| !v.is_finite()) {
        return invalid("rbm parameters must be finite");
    }
    Ok(GaussBernoulliRbm { coupling, visible_bias, hidden_bias })
}

impl GaussBernoulliRbm {
    /// Coupling entries uniform on {-0.5, 0.5}, biases standard normal.
    pub fn random(visible: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let coupling = Mat::from_fn(visible, hidden, |_, _| if rng.random::<bool>() { 0.5 } else { -0.5 });
        let visible_bias = (0..visible).map(|_| rng.sample(StandardNormal)).collect();
        let hidden_bias = (0..hidden).map(|_| rng.sample(StandardNormal)).collect();
        GaussBernoulliRbm { coupling, visible_bias, hidden_bias }
    }

    fn hidden_field(&self, x: &[f64]) -> Vec<f64> {
        (0..self.coupling.cols())
            .map(|k| self.hidden_bias[k] + (0..x.len()).map(|i| self.coupling[(i, k)] * x[i]).sum::<f64>())
            .collect()
    }
}

impl ContinuousTarget for GaussBernoulliRbm {
    fn dim(&self) -> usize {
        self.visible_bias.len()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let field = self.hidden_field(x);
        dot(&self.visible_bias, x) - 0.5 * dot(x, x) + field.iter().map(|f| log_2cosh(*f)).sum::<f64>()
    }
    fn score(&self, x: &[f64]) -> Option<Vec<f64>> {
        let t: Vec<f64> = self.hidden_field(x).into_iter().map(f64::tanh).collect();
        Some(
            (0..x.len())
                .map(|i| self.visible_bias[i] - x[i] + dot(self.coupling.row(i), &t))
                .collect(),
        )
    }
}

/// Hides the score of a target so only gradient-free methods can use it.
pub struct ScoreHidden<'a>(pub &'a dyn ContinuousTarget);

impl ContinuousTarget for ScoreHidden<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.0.log_density(x)
    }
}

/// Adds a constant to another target's log-density.
pub struct Shifted<'a> {
    pub inner: &'a dyn ContinuousTarget,
    pub shift: f64,
}

impl ContinuousTarget for Shifted<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.inner.log_density(x) + self.shift
    }
    fn score(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.inner.score(x)
    }
}

// ---------------------------------------------------------------------------
// Discrete targets

pub const SPINS: [f64; 2] = [-1.0, 1.0];

/// Pairwise Ising model with mass proportional to `exp(sum theta_ij z_i z_j)`.
#[derive(Debug, Clone)]
pub struct Ising {
    dims: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

pub fn ising_target(dims: usize, edges: Vec<(usize, usize, f64)>) -> Result<Ising> {
    if dims == 0 {
        return invalid("ising model needs at least one site");
    }
    for &(i, j, t) in &edges {
        if !(i < j && j < dims) || !t.is_finite() {
            return invalid(format!("bad edge ({i}, {j}, {t})"));
        }
    }
    Ok(Ising { dims, edges })
}

impl Ising {
    /// Nearest-neighbour grid with a common coupling.
    pub fn grid(rows: usize, cols: usize, theta: f64) -> Self {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1, theta));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols, theta));
                }
            }
        }
        Ising { dims: rows * cols, edges }
    }

    /// Symmetric matrix with `A_ij = A_ji = -theta_ij`, so the energy is `-z'Az/2`.
    pub fn coupling_matrix(&self) -> Mat {
        let mut a = Mat::zeros(self.dims, self.dims);
        for &(i, j, t) in &self.edges {
            a[(i, j)] -= t;
            a[(j, i)] -= t;
        }
        a
    }

    pub fn scaled(&self, factor: f64) -> Ising {
        Ising { dims: self.dims, edges: self.edges.iter().map(|&(i, j, t)| (i, j, t * factor)).collect() }
    }
}

impl DiscreteTarget for Ising {
    fn dims(&self) -> usize {
        self.dims
    }
    fn alphabet(&self) -> &[f64] {
        &SPINS
    }
    fn log_mass(&self, z: &[f64]) -> f64 {
        self.relaxed_log_mass(z)
    }
}

impl RelaxableTarget for Ising {
    fn relaxed_log_mass(&self, z: &[f64]) -> f64 {
        self.edges.iter().map(|&(i, j, t)| t * z[i] * z[j]).sum()
    }
    fn relaxed_grad(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dims];
        for &(i, j, t) in &self.edges {
            g[i] += t * z[j];
            g[j] += t * z[i];
        }
        g
    }
}

/// Bernoulli RBM over visible spins with free energy
/// `z'b + sum_k log(1 + exp(W[:,k]'z + c_k))`.
#[derive(Debug, Clone)]
pub struct BernoulliRbm {
    pub weights: Mat,
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
}

pub fn bernoulli_rbm_target(weights: Mat, visible_bias: Vec<f64>, hidden_bias: Vec<f64>) -> Result<BernoulliRbm> {
    if weights.rows() != visible_bias.len() || weights.cols() != hidden_bias.len() || visible_bias.is_empty() {
        return invalid("rbm shapes do not match");
    }
    Ok(BernoulliRbm { weights, visible_bias, hidden_bias })
}

impl BernoulliRbm {
    /// `W ~ N(0, 1/M)`, biases standard normal.
    pub fn random(visible: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let sd = 1.0 / (hidden as f64).sqrt();
        let weights = Mat::from_fn(visible, hidden, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
        let visible_bias = (0..visible).map(|_| rng.sample(StandardNormal)).collect();
        let hidden_bias = (0..hidden).map(|_| rng.sample(StandardNormal)).collect();
        BernoulliRbm { weights, visible_bias, hidden_bias }
    }

    fn activations(&self, z: &[f64]) -> Vec<f64> {
        (0..self.weights.cols())
            .map(|k| self.hidden_bias[k] + (0..z.len()).map(|i| self.weights[(i, k)] * z[i]).sum::<f64>())
            .collect()
    }
}

impl DiscreteTarget for BernoulliRbm {
    fn dims(&self) -> usize {
        self.visible_bias.len()
    }
    fn alphabet(&self) -> &[f64] {
        &SPINS
    }
    fn log_mass(&self, z: &[f64]) -> f64 {
        self.relaxed_log_mass(z)
    }
}

impl RelaxableTarget for BernoulliRbm {
    fn relaxed_log_mass(&self, z: &[f64]) -> f64 {
        dot(&self.visible_bias, z) + self.activations(z).into_iter().map(softplus).sum::<f64>()
    }
    fn relaxed_grad(&self, z: &[f64]) -> Vec<f64> {
        let gate: Vec<f64> = self.activations(z).into_iter().map(sigmoid).collect();
        (0..z.len()).map(|i| self.visible_bias[i] + dot(self.weights.row(i), &gate)).collect()
    }
}

/// One-dimensional categorical distribution over arbitrary state values.
#[derive(Debug, Clone)]
pub struct Categorical {
    values: Vec<f64>,
    log_masses: Vec<f64>,
}

pub fn categorical_target(values: Vec<f64>, masses: &[f64]) -> Result<Categorical> {
    if values.len() < 2 || values.len() != masses.len() {
        return invalid("categorical needs at least two states with matching masses");
    }
    if masses.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
        return invalid("categorical masses must be positive");
    }
    Ok(Categorical { values, log_masses: masses.iter().map(|m| m.ln()).collect() })
}

impl DiscreteTarget for Categorical {
    fn dims(&self) -> usize {
        1
    }
    fn alphabet(&self) -> &[f64] {
        &self.values
    }
    fn log_mass(&self, z: &[f64]) -> f64 {
        match self.values.iter().position(|v| *v == z[0]) {
            Some(i) => self.log_masses[i],
            None => f64::NEG_INFINITY,
        }
    }
}

/// State `index` in lexicographic order (first coordinate most significant).
pub fn state_from_index(mut index: usize, dims: usize, alphabet: &[f64]) -> Vec<f64> {
    let k = alphabet.len();
    let mut z = vec![0.0; dims];
    for slot in z.iter_mut().rev() {
        *slot = alphabet[index % k];
        index /= k;
    }
    z
}

/// Lexicographic index of a state given as alphabet positions.
pub fn index_of_state(positions: &[usize], k: usize) -> usize {
    positions.iter().fold(0, |acc, &p| acc * k + p)
}

const MAX_ENUMERATION: usize = 1 << 20;

/// Exact normalized masses over all `K^d` states, lexicographic order.
pub fn brute_force_distribution(t: &dyn DiscreteTarget) -> Result<Vec<f64>> {
    let d = t.dims();
    let k = t.alphabet().len();
    let total = (k as f64).powi(d as i32);
    if total > MAX_ENUMERATION as f64 {
        return Err(SteinError::ResourceLimit(format!("{k}^{d} states exceeds enumeration limit 2^20")));
    }
    let total = total as usize;
    let logs: Vec<f64> = (0..total).map(|i| t.log_mass(&state_from_index(i, d, t.alphabet()))).collect();
    if logs.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(SteinError::Numerical("log-mass is not finite on some state".into()));
    }
    let lse = log_sum_exp(&logs);
    Ok(logs.iter().map(|l| (l - lse).exp()).collect())
}

/// `n` independent draws from the brute-force distribution.
pub fn sample_exact(t: &dyn DiscreteTarget, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
    let probs = brute_force_distribution(t)?;
    let pick = WeightedIndex::new(&probs).map_err(|e| SteinError::Numerical(e.to_string()))?;
    Ok((0..n).map(|_| state_from_index(pick.sample(rng), t.dims(), t.alphabet())).collect())
}

/// Per-coordinate means under the brute-force distribution.
pub fn brute_force_means(t: &dyn DiscreteTarget) -> Result<Vec<f64>> {
    let probs = brute_force_distribution(t)?;
    let d = t.dims();
    let mut m = vec![0.0; d];
    for (i, p) in probs.iter().enumerate() {
        let z = state_from_index(i, d, t.alphabet());
        for a in 0..d {
            m[a] += p * z[a];
        }
    }
    Ok(m)
}

/// One systematic-scan Gibbs sweep, updating `state` in place.
pub fn gibbs_sweep(t: &dyn DiscreteTarget, state: &mut [f64], rng: &mut dyn RngCore) {
    let alphabet = t.alphabet().to_vec();
    let mut logs = vec![0.0; alphabet.len()];
    for a in 0..state.len() {
        for (l, v) in logs.iter_mut().zip(&alphabet) {
            state[a] = *v;
            *l = t.log_mass(state);
        }
        let probs = conditional(&logs);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = alphabet.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        state[a] = alphabet[pick];
    }
}

/// Normalized conditional from log-masses. Exposed for testing.
pub fn conditional(logs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logs);
    let mut p: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
    // close the last entry so the probabilities sum to one
    let k = p.len();
    let head: f64 = p[..k - 1].iter().sum();
    p[k - 1] = (1.0 - head).max(0.0);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn fd_check(t: &dyn ContinuousTarget, x: &[f64]) {
        let s = t.score(x).unwrap();
        let scale = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let fd = finite_difference_score(t, x, 1e-5 * scale).unwrap();
        let num: f64 = s.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = s.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        assert!(num / den < 1e-5, "score {s:?} vs fd {fd:?}");
    }

    #[test]
    fn gaussian_examples() {
        let g = gaussian_target(vec![0.0, 0.0], 2.0).unwrap();
        assert_eq!(g.score(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!((g.log_density(&[1.0, 1.0]) - g.log_density(&[0.0, 0.0]) + 0.5).abs() < 1e-15);
        assert!(gaussian_target(vec![0.0], 0.0).is_err());
        let mut rng = stream(1, 0);
        let g = gaussian_target(vec![0.5, -1.0, 2.0], 0.7).unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
            fd_check(&g, &x);
        }
    }

    #[test]
    fn gmm_examples() {
        let one = gmm_target(&[1.0], Mat::from_rows(&[vec![1.0, 2.0]]).unwrap(), 1.5).unwrap();
        let g = gaussian_target(vec![1.0, 2.0], 1.5).unwrap();
        let x = [0.3, -0.7];
        assert!((one.score(&x).unwrap()[0] - g.score(&x).unwrap()[0]).abs() < 1e-14);
        let two = gmm_target(&[0.5, 0.5], Mat::from_rows(&[vec![-1.0], vec![3.0]]).unwrap(), 1.0).unwrap();
        assert!(two.score(&[1.0]).unwrap()[0].abs() < 1e-14);
        assert!(gmm_target(&[], Mat::zeros(0, 1), 1.0).is_err());
        assert!(gmm_target(&[0.4, 0.4], Mat::zeros(2, 1), 1.0).is_err());
        let mut rng = stream(2, 0);
        let means = Mat::from_fn(4, 2, |_, _| rng.random_range(-2.0..2.0));
        let mix = gmm_target(&[0.1, 0.2, 0.3, 0.4], means, 0.8).unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            fd_check(&mix, &x);
        }
    }

    #[test]
    fn gmm_log_density_is_normalized_in_1d() {
        let mix = gmm_target(&[0.3, 0.7], Mat::from_rows(&[vec![-1.0], vec![2.0]]).unwrap(), 0.5).unwrap();
        let step = 1e-3;
        let total: f64 = (-15000..15000).map(|i| mix.log_density(&[i as f64 * step]).exp() * step).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gb_rbm_decoupled_is_gaussian() {
        let rbm = gauss_bernoulli_rbm_target(Mat::zeros(3, 2), vec![1.0, -1.0, 0.5], vec![0.2, 0.1]).unwrap();
        let x = [0.3, 0.4, -2.0];
        let s = rbm.score(&x).unwrap();
        for i in 0..3 {
            assert!((s[i] - (rbm.visible_bias[i] - x[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn gb_rbm_matches_hidden_enumeration() {
        let mut rng = stream(3, 0);
        let rbm = GaussBernoulliRbm::random(4, 10, &mut rng);
        let brute = |x: &[f64]| {
            let terms: Vec<f64> = (0..1usize << 10)
                .map(|m| {
                    let h = state_from_index(m, 10, &SPINS);
                    let xbh: f64 = (0..4).map(|i| x[i] * dot(rbm.coupling.row(i), &h)).sum();
                    xbh + dot(&rbm.visible_bias, x) + dot(&rbm.hidden_bias, &h) - 0.5 * dot(x, x)
                })
                .collect();
            log_sum_exp(&terms)
        };
        let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let diffs: Vec<f64> = xs.iter().map(|x| brute(x) - rbm.log_density(x)).collect();
        for d in &diffs {
            assert!((d - diffs[0]).abs() < 1e-8);
        }
        for x in &xs {
            fd_check(&rbm, x);
        }
    }

    #[test]
    fn log_2cosh_does_not_overflow() {
        assert!((log_2cosh(800.0) - 800.0).abs() < 1e-12);
        assert!((log_2cosh(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((log_2cosh(1.3) - (2.0 * 1.3f64.cosh()).ln()).abs() < 1e-14);
    }

    #[test]
    fn ising_examples() {
        let free = ising_target(3, vec![]).unwrap();
        for p in brute_force_distribution(&free).unwrap() {
            assert!((p - 0.125).abs() < 1e-15);
        }
        let one = ising_target(2, vec![(0, 1, 1.0)]).unwrap();
        let r = one.log_mass(&[1.0, 1.0]) - one.log_mass(&[1.0, -1.0]);
        assert!((r - 2.0).abs() < 1e-15);
        let p = brute_force_distribution(&one).unwrap();
        let e = 1f64.exp();
        let z = 2.0 * e + 2.0 / e;
        let expect = [e / z, 1.0 / e / z, 1.0 / e / z, e / z];
        for (a, b) in p.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(ising_target(2, vec![(1, 0, 1.0)]).is_err());
    }

    #[test]
    fn ising_coupling_matrix_reproduces_energy() {
        let m = Ising::grid(2, 3, 0.4);
        let a = m.coupling_matrix();
        let z = [1.0, -1.0, 1.0, 1.0, 1.0, -1.0];
        let quad = -0.5 * dot(&z, &a.matvec(&z));
        assert!((quad - m.log_mass(&z)).abs() < 1e-14);
    }

    #[test]
    fn bernoulli_rbm_examples() {
        let zero = bernoulli_rbm_target(Mat::zeros(3, 4), vec![0.5, -0.2, 1.0], vec![0.0; 4]).unwrap();
        let z = [1.0, -1.0, 1.0];
        assert!((zero.log_mass(&z) - (dot(&z, &zero.visible_bias) + 4.0 * 2f64.ln())).abs() < 1e-14);

        let mut rng = stream(4, 0);
        let rbm = BernoulliRbm::random(10, 5, &mut rng);
        let p = brute_force_distribution(&rbm).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let m = brute_force_means(&rbm).unwrap();
        let mut flipped = rbm.clone();
        flipped.visible_bias.iter_mut().for_each(|b| *b = -*b);
        flipped.weights.as_mut_slice().iter_mut().for_each(|w| *w = -*w);
        let mf = brute_force_means(&flipped).unwrap();
        for (a, b) in m.iter().zip(&mf) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn bernoulli_rbm_sign_flip_of_bias_without_coupling() {
        let rbm = bernoulli_rbm_target(Mat::zeros(3, 2), vec![0.7, -0.1, 0.3], vec![0.2, -0.5]).unwrap();
        let mut neg = rbm.clone();
        neg.visible_bias.iter_mut().for_each(|b| *b = -*b);
        let m = brute_force_means(&rbm).unwrap();
        let mn = brute_force_means(&neg).unwrap();
        for (a, b) in m.iter().zip(&mn) {
            assert!((a + b).abs() < 1e-15);
        }
    }

    #[test]
    fn brute_force_is_shift_invariant() {
        struct Plus<'a>(&'a Ising, f64);
        impl DiscreteTarget for Plus<'_> {
            fn dims(&self) -> usize {
                self.0.dims()
            }
            fn alphabet(&self) -> &[f64] {
                self.0.alphabet()
            }
            fn log_mass(&self, z: &[f64]) -> f64 {
                self.0.log_mass(z) + self.1
            }
        }
        let m = Ising::grid(2, 2, 0.7);
        let a = brute_force_distribution(&m).unwrap();
        let b = brute_force_distribution(&Plus(&m, 123.0)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn brute_force_refuses_huge_spaces() {
        let m = Ising::grid(5, 5, 0.1);
        assert!(matches!(brute_force_distribution(&m), Err(SteinError::ResourceLimit(_))));
    }

    #[test]
    fn gibbs_on_free_model_has_zero_mean() {
        let m = ising_target(4, vec![]).unwrap();
        let mut rng = stream(5, 0);
        let mut state = vec![1.0; 4];
        let sweeps = 20000;
        let mut sum = 0.0;
        for _ in 0..sweeps {
            gibbs_sweep(&m, &mut state, &mut rng);
            sum += state[0];
        }
        let mean = sum / sweeps as f64;
        assert!(mean.abs() < 3.0 / (sweeps as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn gibbs_agreement_frequency_matches_enumeration() {
        let m = ising_target(2, vec![(0, 1, 3.0)]).unwrap();
        let p = brute_force_distribution(&m).unwrap();
        let agree = p[0] + p[3];
        let mut rng = stream(6, 0);
        let mut state = vec![1.0, -1.0];
        let sweeps = 200_000;
        let mut hits = 0usize;
        for _ in 0..sweeps {
            gibbs_sweep(&m, &mut state, &mut rng);
            if state[0] == state[1] {
                hits += 1;
            }
        }
        assert!((hits as f64 / sweeps as f64 - agree).abs() < 0.02);
    }

    #[test]
    fn conditional_sums_to_one() {
        for i in 0..200 {
            let c = conditional(&[0.3, -1.7 + 0.05 * i as f64]);
            assert_eq!(c[0] + c[1], 1.0);
        }
    }

    #[test]
    fn gibbs_kernel_fixes_exact_distribution() {
        // explicit 4x4 transition matrix of one systematic sweep, d=2, K=2
        let m = ising_target(2, vec![(0, 1, 0.8)]).unwrap();
        let p = brute_force_distribution(&m).unwrap();
        let cond = |z: &[f64], a: usize, v: f64| {
            let mut s = z.to_vec();
            let logs: Vec<f64> = SPINS.iter().map(|w| {
                s[a] = *w;
                m.log_mass(&s)
            }).collect();
            let c = conditional(&logs);
            if v < 0.0 { c[0] } else { c[1] }
        };
        let mut trans = Mat::zeros(4, 4);
        for from in 0..4 {
            let z = state_from_index(from, 2, &SPINS);
            for to in 0..4 {
                let t = state_from_index(to, 2, &SPINS);
                let p0 = cond(&z, 0, t[0]);
                let mid = [t[0], z[1]];
                trans[(from, to)] = p0 * cond(&mid, 1, t[1]);
            }
        }
        for to in 0..4 {
            let v: f64 = (0..4).map(|from| p[from] * trans[(from, to)]).sum();
            assert!((v - p[to]).abs() < 1e-14);
        }
    }

    #[test]
    fn fd_score_is_exact_for_linear_log_density() {
        struct Linear;
        impl ContinuousTarget for Linear {
            fn dim(&self) -> usize {
                2
            }
            fn log_density(&self, x: &[f64]) -> f64 {
                3.0 * x[0] - 0.5 * x[1]
            }
        }
        let g = finite_difference_score(&Linear, &[0.25, 0.5], 0.125).unwrap();
        assert_eq!(g, vec![3.0, -0.5]);
    }

    #[test]
    fn fd_score_error_shrinks_quadratically() {
        let mix = gmm_target(&[0.5, 0.5], Mat::from_rows(&[vec![-1.0], vec![1.5]]).unwrap(), 0.6).unwrap();
        let x = [0.37];
        let s = mix.score(&x).unwrap()[0];
        let e1 = (finite_difference_score(&mix, &x, 1e-2).unwrap()[0] - s).abs();
        let e2 = (finite_difference_score(&mix, &x, 5e-3).unwrap()[0] - s).abs();
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn state_index_round_trip() {
        let alphabet = [-1.0, 0.0, 1.0];
        for i in 0..27 {
            let z = state_from_index(i, 3, &alphabet);
            let pos: Vec<usize> = z.iter().map(|v| alphabet.iter().position(|a| a == v).unwrap()).collect();
            assert_eq!(index_of_state(&pos, 3), i);
        }
    }
}
