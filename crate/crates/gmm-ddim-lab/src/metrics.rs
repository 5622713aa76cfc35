//! Two-sample and moment-based quality metrics.
//!
//! Desk-scale stand-ins for image-domain scores: unbiased MMD^2 with an RBF
//! kernel, sliced squared Wasserstein-2 over random projections, and exact
//! moment errors against the analytic data moments. Covariances use
//! population (1/n) normalization throughout, matching the analytic targets.

use nalgebra::{DMatrix, DVector};

use crate::data::MixtureDistribution;
use crate::error::{LabError, Result};
use crate::stream::{role, standard_normal_vector, StreamFactory};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled batches.
    Median,
    Fixed(f64),
}

fn check_batches(x: &[DVector<f64>], y: &[DVector<f64>], min_len: usize) -> Result<usize> {
    if x.len() < min_len || y.len() < min_len {
        return Err(LabError::InvalidParameter {
            field: "metrics.batch",
            message: format!("batches need at least {min_len} points"),
        });
    }
    let d = x[0].len();
    for v in x.iter().chain(y.iter()) {
        if v.len() != d {
            return Err(LabError::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
    }
    Ok(d)
}

/// Unbiased MMD^2 U-statistic with the Gaussian kernel
/// `k(a, b) = exp(-|a-b|^2 / (2 h^2))`. Slightly negative values are
/// expected under the null.
pub fn mmd_squared(x: &[DVector<f64>], y: &[DVector<f64>], bandwidth: Bandwidth) -> Result<f64> {
    check_batches(x, y, 2)?;
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => {
            return Err(LabError::InvalidParameter {
                field: "metrics.mmd_bandwidth",
                message: format!("{h} must be positive and finite"),
            })
        }
        Bandwidth::Median => {
            let h = pooled_median_distance(x, y);
            if h <= 0.0 {
                return Err(LabError::InvalidParameter {
                    field: "metrics.mmd_bandwidth",
                    message: "median pairwise distance is zero (all points identical)".into(),
                });
            }
            h
        }
    };
    let gamma = 1.0 / (2.0 * h * h);
    let kernel_sum_within = |b: &[DVector<f64>]| {
        let mut acc = 0.0;
        for i in 0..b.len() {
            for j in (i + 1)..b.len() {
                acc += (-gamma * (&b[i] - &b[j]).norm_squared()).exp();
            }
        }
        2.0 * acc
    };
    let m = x.len() as f64;
    let n = y.len() as f64;
    let mut cross = 0.0;
    for xi in x {
        for yj in y {
            cross += (-gamma * (xi - yj).norm_squared()).exp();
        }
    }
    Ok(kernel_sum_within(x) / (m * (m - 1.0)) + kernel_sum_within(y) / (n * (n - 1.0))
        - 2.0 * cross / (m * n))
}

fn pooled_median_distance(x: &[DVector<f64>], y: &[DVector<f64>]) -> f64 {
    let pooled: Vec<&DVector<f64>> = x.iter().chain(y.iter()).collect();
    let n = pooled.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push((pooled[i] - pooled[j]).norm());
        }
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    }
}

/// Average over `projections` random unit directions of the squared 1-D
/// Wasserstein-2 distance between the projected empirical distributions.
/// Equal batch sizes pair sorted samples; unequal sizes integrate the
/// squared quantile difference exactly over the merged step grid.
pub fn sliced_wasserstein2(
    x: &[DVector<f64>],
    y: &[DVector<f64>],
    projections: usize,
    factory: &StreamFactory,
) -> Result<f64> {
    let d = check_batches(x, y, 1)?;
    if projections == 0 {
        return Err(LabError::InvalidParameter {
            field: "metrics.swd_projections",
            message: "must be at least 1".into(),
        });
    }
    let mut total = 0.0;
    for p in 0..projections {
        let mut rng = factory.rng(&[role::PROJECTION, p as u64]);
        let mut dir = standard_normal_vector(d, &mut rng);
        let norm = dir.norm();
        if norm == 0.0 {
            // Probability-zero draw; the next block of the same stream keeps
            // the direction reproducible.
            dir = standard_normal_vector(d, &mut rng);
        }
        dir /= dir.norm();
        let mut px: Vec<f64> = x.iter().map(|v| dir.dot(v)).collect();
        let mut py: Vec<f64> = y.iter().map(|v| dir.dot(v)).collect();
        px.sort_by(f64::total_cmp);
        py.sort_by(f64::total_cmp);
        total += w2_squared_1d(&px, &py);
    }
    Ok(total / projections as f64)
}

/// Squared W2 between two sorted 1-D empirical distributions.
fn w2_squared_1d(px: &[f64], py: &[f64]) -> f64 {
    let m = px.len();
    let n = py.len();
    if m == n {
        return px
            .iter()
            .zip(py)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / m as f64;
    }
    // Quantile functions are step functions with breakpoints i/m and j/n;
    // integrate (Fx^-1 - Fy^-1)^2 piecewise between merged breakpoints.
    let mut acc = 0.0;
    let mut q = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < m && j < n {
        let qi = (i + 1) as f64 / m as f64;
        let qj = (j + 1) as f64 / n as f64;
        let q_next = qi.min(qj);
        let diff = px[i] - py[j];
        acc += diff * diff * (q_next - q);
        q = q_next;
        if qi <= q_next {
            i += 1;
        }
        if qj <= q_next {
            j += 1;
        }
    }
    acc
}

/// Infinity-norm mean error and Frobenius covariance error of a batch
/// against the mixture's exact moments, with population (1/n) covariance.
pub fn moment_errors(x: &[DVector<f64>], dist: &MixtureDistribution) -> Result<(f64, f64)> {
    if x.is_empty() {
        return Err(LabError::InvalidParameter {
            field: "metrics.batch",
            message: "moment errors need at least one point".into(),
        });
    }
    let d = dist.dim();
    if x[0].len() != d {
        return Err(LabError::DimensionMismatch {
            expected: d,
            got: x[0].len(),
        });
    }
    let n = x.len() as f64;
    let mut mean = DVector::zeros(d);
    for v in x {
        mean += v;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in x {
        let c = v - &mean;
        cov.syger(1.0 / n, &c, &c, 1.0);
    }
    cov.fill_upper_triangle_with_lower_triangle();
    let mean_err = (&mean - dist.mean()).amax();
    let cov_err = (cov - dist.covariance()).norm();
    Ok((mean_err, cov_err))
}

/// Mean log-density of the batch under the exact data distribution.
pub fn avg_loglik(x: &[DVector<f64>], dist: &MixtureDistribution) -> Result<f64> {
    if x.is_empty() {
        return Err(LabError::InvalidParameter {
            field: "metrics.batch",
            message: "log-likelihood needs at least one point".into(),
        });
    }
    let total: f64 = x.iter().map(|v| dist.log_density(v)).sum();
    Ok(total / x.len() as f64)
}
