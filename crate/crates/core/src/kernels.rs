//! RBF kernel `k(x, y) = exp(-|x - y|^2 / h)`, its derivatives, and the
//! median bandwidth rule.
//!
//! Note the bandwidth convention: `h` divides the squared distance directly,
//! there is no `2 h^2`.

use crate::error::{invalid, Result, SteinError};
use crate::mat::{median_in_place, sq_dist, Mat};
use serde::{Deserialize, Serialize};

/// Fixed bandwidth or the median rule over the current points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    Fixed(f64),
    MedianHeuristic,
}

/// Kernel choice. Only the RBF family is provided.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub bandwidth: Bandwidth,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { bandwidth: Bandwidth::MedianHeuristic }
    }
}

impl KernelSpec {
    pub fn fixed(h: f64) -> Result<Self> {
        check_h(h)?;
        Ok(KernelSpec { bandwidth: Bandwidth::Fixed(h) })
    }

    pub fn median() -> Self {
        KernelSpec::default()
    }

    /// Concrete bandwidth for this point set.
    pub fn resolve(&self, points: &Mat) -> Result<f64> {
        match self.bandwidth {
            Bandwidth::Fixed(h) => {
                check_h(h)?;
                Ok(h)
            }
            Bandwidth::MedianHeuristic => median_bandwidth(points),
        }
    }
}

fn check_h(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return invalid(format!("bandwidth must be positive and finite, got {h}"));
    }
    Ok(())
}

fn check_pair(x: &[f64], y: &[f64], h: f64) -> Result<()> {
    check_h(h)?;
    if x.is_empty() || x.len() != y.len() {
        return invalid(format!("dimension mismatch: {} vs {}", x.len(), y.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return invalid("non-finite kernel input");
    }
    Ok(())
}

#[inline]
pub(crate) fn rbf(x: &[f64], y: &[f64], h: f64) -> f64 {
    (-sq_dist(x, y) / h).exp()
}

pub fn rbf_eval(x: &[f64], y: &[f64], h: f64) -> Result<f64> {
    check_pair(x, y, h)?;
    Ok(rbf(x, y, h))
}

/// Gradient in the first argument: `-(2/h)(x - y) k(x, y)`.
pub fn rbf_grad_x(x: &[f64], y: &[f64], h: f64) -> Result<Vec<f64>> {
    check_pair(x, y, h)?;
    let k = rbf(x, y, h);
    Ok(x.iter().zip(y).map(|(a, b)| -2.0 / h * (a - b) * k).collect())
}

/// Gradient in the second argument, equal to minus the first-argument gradient.
pub fn rbf_grad_y(x: &[f64], y: &[f64], h: f64) -> Result<Vec<f64>> {
    Ok(rbf_grad_x(x, y, h)?.into_iter().map(|v| -v).collect())
}

/// `med^2 / (2 ln(n + 1))` where `med` is the exact median pairwise distance.
pub fn median_bandwidth(points: &Mat) -> Result<f64> {
    let n = points.rows();
    if n < 2 {
        return invalid("median bandwidth needs at least two points");
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(sq_dist(points.row(i), points.row(j)).sqrt());
        }
    }
    let med = median_in_place(&mut dists).unwrap_or(0.0);
    if !(med > 0.0) || !med.is_finite() {
        return Err(SteinError::DegenerateEnsemble(format!(
            "median pairwise distance is {med} over {n} points"
        )));
    }
    Ok(med * med / (2.0 * ((n + 1) as f64).ln()))
}

/// `w_x w_y k(x, y)`, the importance-weighted kernel.
pub fn weighted_kernel_eval(x: &[f64], y: &[f64], w_x: f64, w_y: f64, h: f64) -> Result<f64> {
    if !(w_x >= 0.0 && w_y >= 0.0) {
        return invalid(format!("kernel weights must be nonnegative, got {w_x}, {w_y}"));
    }
    Ok(w_x * w_y * rbf_eval(x, y, h)?)
}

/// Gram matrix of the RBF kernel over a point set.
pub fn gram_matrix(points: &Mat, h: f64) -> Result<Mat> {
    check_h(h)?;
    let n = points.rows();
    Ok(Mat::from_fn(n, n, |i, j| rbf(points.row(i), points.row(j), h)))
}
