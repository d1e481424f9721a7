//! Goodness-of-fit testing for discrete models with the gradient-free KSD.
//!
//! Data are continuized into `p_c` space, a surrogate supplies the scores,
//! and the null distribution of the U-statistic comes from a multinomial
//! bootstrap that reuses one kernel matrix.

use crate::discrete::{build_surrogate, continuize_data, ContinuousParameterization, DiscreteModel, Pc, SurrogateMode};
use crate::error::{invalid, Result};
use crate::kernels::{rbf, KernelSpec};
use crate::ksd::{gf_stein_kernel_matrix, SteinKernelMatrix};
use crate::mat::Mat;
use nalgebra::DMatrix;
use crate::rng::stream;
use crate::steinis::WeightedSample;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Matrix of `w(x_i) κ_ρ(x_i, x_j) w(x_j)` on continuized data.
pub fn gof_kernel_matrix(
    x: &Mat,
    model: &DiscreteModel,
    param: &ContinuousParameterization,
    mode: SurrogateMode,
    kernel: &KernelSpec,
) -> Result<SteinKernelMatrix> {
    let rho = build_surrogate(model, param, mode)?;
    let pc = Pc { param, target: model.as_target() };
    let h = kernel.resolve(x)?;
    gf_stein_kernel_matrix(x, rho.as_ref(), &pc, h)
}

/// Off-diagonal U-statistic of the gradient-free Stein kernel on the data.
pub fn gof_statistic(
    z: &[Vec<f64>],
    model: &DiscreteModel,
    param: &ContinuousParameterization,
    mode: SurrogateMode,
    kernel: &KernelSpec,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if z.len() < 2 {
        return invalid("the statistic needs at least two data points");
    }
    let x = continuize_data(z, param, rng)?;
    gof_kernel_matrix(&x, model, param, mode, kernel)?.u_statistic()
}

/// Centered multinomial weights `u - 1/n` with `u ~ Mult(n; 1/n) / n`.
pub fn multinomial_offsets(n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    let inv = 1.0 / n as f64;
    let mut counts = vec![0usize; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1;
    }
    counts.iter().map(|c| *c as f64 * inv - inv).collect()
}

/// First stream id used by bootstrap replicates; lower ids are left for
/// continuization.
pub const BOOTSTRAP_STREAM: u64 = 1 << 32;
const BLOCK: usize = 128;

/// Bootstrap replicates `sum_{i != j} (u_i - 1/n) K_ij (u_j - 1/n)`, in the
/// matrix's stored scale. Replicate `r` draws from stream
/// `(seed, BOOTSTRAP_STREAM + r)`; blocks of replicates share one
/// matrix product.
pub fn bootstrap_null_scaled(k: &Mat, m: usize, seed: u64) -> Result<Vec<f64>> {
    if m == 0 {
        return invalid("need at least one bootstrap replicate");
    }
    let n = k.rows();
    // K is symmetric, so the row-major buffer reads the same column-major
    let kmat = DMatrix::from_column_slice(n, n, k.as_slice());
    let diag: Vec<f64> = (0..n).map(|i| k[(i, i)]).collect();
    let blocks: Vec<(usize, usize)> = (0..m).step_by(BLOCK).map(|s| (s, (s + BLOCK).min(m))).collect();
    let out: Vec<Vec<f64>> = blocks
        .into_par_iter()
        .map(|(start, end)| {
            let mut c = DMatrix::zeros(n, end - start);
            for (col, r) in (start..end).enumerate() {
                let a = multinomial_offsets(n, &mut stream(seed, BOOTSTRAP_STREAM + r as u64));
                c.column_mut(col).copy_from_slice(&a);
            }
            let kc = &kmat * &c;
            (0..end - start)
                .map(|col| {
                    let a = c.column(col);
                    let full = a.dot(&kc.column(col));
                    let own: f64 = a.iter().zip(&diag).map(|(v, d)| v * v * d).sum();
                    full - own
                })
                .collect()
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}

pub fn bootstrap_null(km: &SteinKernelMatrix, m: usize, seed: u64) -> Result<Vec<f64>> {
    let scale = km.log_scale.exp();
    Ok(bootstrap_null_scaled(&km.values, m, seed)?.into_iter().map(|v| v * scale).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GofOptions {
    pub alpha: f64,
    pub replicates: usize,
    pub kernel: KernelSpec,
    pub surrogate: SurrogateMode,
}

impl Default for GofOptions {
    fn default() -> Self {
        GofOptions { alpha: 0.05, replicates: 1000, kernel: KernelSpec::default(), surrogate: SurrogateMode::Relaxed { tau: crate::discrete::DEFAULT_TAU } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub replicates: usize,
    pub alpha: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub reject: bool,
    pub seed: u64,
}

/// Decision from a statistic and its bootstrap replicates. The critical
/// value is the order statistic for which `stat > crit` exactly when the
/// corrected p-value `(r + 1) / (m + 1)` is below `alpha`.
pub fn decide(statistic: f64, replicates: &[f64], alpha: f64, seed: u64) -> Result<TestReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let m = replicates.len();
    if m == 0 {
        return invalid("need at least one bootstrap replicate");
    }
    let exceed = replicates.iter().filter(|r| **r >= statistic).count();
    let p_value = (exceed + 1) as f64 / (m + 1) as f64;
    let mut desc = replicates.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let allowed = (alpha * (m + 1) as f64).ceil() as i64 - 2;
    let critical_value = if allowed < 0 { f64::INFINITY } else { desc[(allowed as usize).min(m - 1)] };
    let reject = p_value < alpha;
    Ok(TestReport { statistic, replicates: m, alpha, critical_value, p_value, reject, seed })
}

/// Full test: continuize with stream `(seed, 0)`, then bootstrap.
pub fn gof_test(
    z: &[Vec<f64>],
    model: &DiscreteModel,
    param: &ContinuousParameterization,
    opts: &GofOptions,
    seed: u64,
) -> Result<TestReport> {
    if z.len() < 2 {
        return invalid("the test needs at least two data points");
    }
    let x = continuize_data(z, param, &mut stream(seed, 0))?;
    let km = gof_kernel_matrix(&x, model, param, opts.surrogate, &opts.kernel)?;
    // decisions are scale free, so stay in the stored scale
    let stat = crate::ksd::u_statistic_matrix(&km.values)?;
    let reps = bootstrap_null_scaled(&km.values, opts.replicates, seed)?;
    let mut report = decide(stat, &reps, opts.alpha, seed)?;
    let scale = km.log_scale.exp();
    report.statistic *= scale;
    report.critical_value *= scale;
    Ok(report)
}

/// Normalized Hamming kernel `exp(-H(z, z') / d)`.
pub fn hamming_kernel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).filter(|(u, v)| u != v).count();
    (-(diff as f64) / a.len() as f64).exp()
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], k: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let mut s = 0.0;
    for u in a {
        for v in b {
            s += k(u, v);
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Biased MMD² between two discrete sample sets under the Hamming kernel.
pub fn mmd_hamming(first: &[Vec<f64>], second: &[Vec<f64>]) -> Result<f64> {
    if first.is_empty() || second.is_empty() {
        return invalid("both sample sets must be non-empty");
    }
    let d = first[0].len();
    if d == 0 || first.iter().chain(second).any(|z| z.len() != d) {
        return invalid("samples must share one positive dimension");
    }
    Ok(mean_kernel(first, first, hamming_kernel) + mean_kernel(second, second, hamming_kernel) - 2.0 * mean_kernel(first, second, hamming_kernel))
}

/// Importance-weighted MMD² between a weighted sample and exact draws.
pub fn weighted_mmd(x: &WeightedSample, y: &Mat, kernel: &KernelSpec) -> Result<f64> {
    let xs = &x.positions;
    if y.rows() == 0 || xs.cols() != y.cols() {
        return invalid("weighted sample and exact draws must share dimension");
    }
    let h = match kernel.bandwidth {
        crate::kernels::Bandwidth::Fixed(_) => kernel.resolve(y)?,
        crate::kernels::Bandwidth::MedianHeuristic => {
            let mut rows = xs.to_rows();
            rows.extend(y.to_rows());
            kernel.resolve(&Mat::from_rows(&rows)?)?
        }
    };
    let w = &x.normalized;
    let m = y.rows() as f64;
    let mut xx = 0.0;
    let mut xy = 0.0;
    for i in 0..xs.rows() {
        for j in 0..xs.rows() {
            xx += w[i] * w[j] * rbf(xs.row(i), xs.row(j), h);
        }
        for j in 0..y.rows() {
            xy += w[i] * rbf(xs.row(i), y.row(j), h);
        }
    }
    let mut yy = 0.0;
    for i in 0..y.rows() {
        for j in 0..y.rows() {
            yy += rbf(y.row(i), y.row(j), h);
        }
    }
    Ok(xx - 2.0 * xy / m + yy / (m * m))
}
