//! Synthetic target distributions with exact densities and moments.
//!
//! Two substrates: [`MixtureDistribution`] (Gaussian mixture with optional
//! per-component class labels) and [`PointCloud`] (weighted Dirac atoms).
//! Both expose exact first/second moments and deterministic sampling, and
//! both induce an exact noisy marginal at any diffusion step, which is what
//! the closed-form denoisers and the guidance terms are built from.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{LabError, Result};
use crate::schedule::Schedule;

const LN_2PI: f64 = 1.8378770664093453;
/// Jitter added to a covariance whose Cholesky fails on the first try.
const CHOL_JITTER: f64 = 1e-12;
const WEIGHT_TOL: f64 = 1e-12;

/// One Gaussian component with cached Cholesky factor and normalizer.
#[derive(Debug, Clone)]
pub struct GaussComponent {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl GaussComponent {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(LabError::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        let chol = match cov.clone().cholesky() {
            Some(c) => c,
            None => {
                let jittered = &cov + DMatrix::identity(d, d) * CHOL_JITTER;
                jittered.cholesky().ok_or_else(|| {
                    let min_eig = cov
                        .clone()
                        .symmetric_eigen()
                        .eigenvalues
                        .iter()
                        .copied()
                        .fold(f64::INFINITY, f64::min);
                    LabError::NotPositiveSemidefinite(min_eig)
                })?
            }
        };
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|l| l.ln()).sum::<f64>() * 2.0;
        let log_norm = -0.5 * (d as f64 * LN_2PI + log_det);
        let chol_l = chol.l_dirty().lower_triangle();
        Ok(GaussComponent {
            mean,
            cov,
            chol,
            chol_l,
            log_norm,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let solved = self.chol.solve(&diff);
        self.log_norm - 0.5 * diff.dot(&solved)
    }

    /// Gradient of `log_density` at x: `-cov^{-1} (x - mean)`.
    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        -self.chol.solve(&(x - &self.mean))
    }

    /// Solves `cov * z = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Lower Cholesky factor of the covariance.
    pub fn chol_l(&self) -> &DMatrix<f64> {
        &self.chol_l
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.mean.len();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.chol_l * z
    }
}

#[derive(Debug, Clone)]
pub struct MixtureDistribution {
    weights: Vec<f64>,
    components: Vec<GaussComponent>,
    labels: Option<Vec<usize>>,
}

impl MixtureDistribution {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(LabError::InvalidParameter {
                field: "mixture.weights",
                message: "mixture needs at least one component".into(),
            });
        }
        if means.len() != n || covs.len() != n {
            return Err(LabError::DimensionMismatch {
                expected: n,
                got: means.len().min(covs.len()),
            });
        }
        if let Some(ls) = &labels {
            if ls.len() != n {
                return Err(LabError::DimensionMismatch {
                    expected: n,
                    got: ls.len(),
                });
            }
        }
        if weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(LabError::InvalidParameter {
                field: "mixture.weights",
                message: "weights must be positive and finite".into(),
            });
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(LabError::InvalidParameter {
                field: "mixture.weights",
                message: format!("weights sum to {total}, expected 1"),
            });
        }
        let dim = means[0].len();
        let mut components = Vec::with_capacity(n);
        for (mean, cov) in means.into_iter().zip(covs) {
            if mean.len() != dim {
                return Err(LabError::DimensionMismatch {
                    expected: dim,
                    got: mean.len(),
                });
            }
            components.push(GaussComponent::new(mean, cov)?);
        }
        Ok(MixtureDistribution {
            weights,
            components,
            labels,
        })
    }

    /// Convenience constructor for isotropic components with uniform weights.
    pub fn isotropic(means: Vec<DVector<f64>>, var: f64, labels: Option<Vec<usize>>) -> Result<Self> {
        let n = means.len();
        if n == 0 {
            return Err(LabError::InvalidParameter {
                field: "mixture.means",
                message: "mixture needs at least one component".into(),
            });
        }
        let dim = means[0].len();
        let cov = DMatrix::identity(dim, dim) * var;
        MixtureDistribution::new(vec![1.0 / n as f64; n], means, vec![cov; n], labels)
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean().len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn component(&self, i: usize) -> &GaussComponent {
        &self.components[i]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Distinct labels in declaration order.
    pub fn distinct_labels(&self) -> Vec<usize> {
        let mut seen = Vec::new();
        if let Some(ls) = &self.labels {
            for &l in ls {
                if !seen.contains(&l) {
                    seen.push(l);
                }
            }
        }
        seen
    }

    /// Sub-mixture of the components carrying label `y`, renormalized.
    pub fn restrict_to_label(&self, y: usize) -> Result<MixtureDistribution> {
        let ls = self.labels.as_ref().ok_or(LabError::UnknownLabel(y))?;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| ls[i] == y).collect();
        if idx.is_empty() {
            return Err(LabError::UnknownLabel(y));
        }
        let total: f64 = idx.iter().map(|&i| self.weights[i]).sum();
        MixtureDistribution::new(
            idx.iter().map(|&i| self.weights[i] / total).collect(),
            idx.iter().map(|&i| self.components[i].mean().clone()).collect(),
            idx.iter().map(|&i| self.components[i].cov().clone()).collect(),
            Some(idx.iter().map(|&i| ls[i]).collect()),
        )
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, c) in self.weights.iter().zip(&self.components) {
            m += c.mean() * *w;
        }
        m
    }

    /// Exact covariance: `sum_i w_i (cov_i + mu_i mu_i^T) - mean mean^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut second = DMatrix::zeros(d, d);
        for (w, c) in self.weights.iter().zip(&self.components) {
            second += (c.cov() + c.mean() * c.mean().transpose()) * *w;
        }
        let m = self.mean();
        second - &m * m.transpose()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_density(x))
            .collect();
        log_sum_exp(&logs)
    }

    /// Gradient of the mixture log-density (responsibility-weighted
    /// component scores).
    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        let r = self.responsibilities(x);
        let mut g = DVector::zeros(self.dim());
        for (ri, c) in r.iter().zip(&self.components) {
            if *ri > 0.0 {
                g += c.score(x) * *ri;
            }
        }
        g
    }

    /// Posterior component probabilities at x (sums to 1).
    pub fn responsibilities(&self, x: &DVector<f64>) -> Vec<f64> {
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_density(x))
            .collect();
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let k = draw_categorical(&self.weights, rng);
        self.components[k].sample(rng)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    /// Distribution of `sqrt(a) x0 + sqrt(1-a) noise` at step t: component
    /// means scale by `sqrt(alpha_cum)`, covariances become
    /// `alpha_cum * cov + (1 - alpha_cum) I`.
    pub fn noisy_marginal(&self, schedule: &Schedule, t: usize) -> Result<MixtureDistribution> {
        let a = schedule.alpha_cum(t);
        let d = self.dim();
        let eye = DMatrix::identity(d, d);
        MixtureDistribution::new(
            self.weights.clone(),
            self.components.iter().map(|c| c.mean() * a.sqrt()).collect(),
            self.components
                .iter()
                .map(|c| c.cov() * a + &eye * (1.0 - a))
                .collect(),
            self.labels.clone(),
        )
    }
}

/// Weighted atoms; the empirical substrate for denoising-posterior checks.
#[derive(Debug, Clone)]
pub struct PointCloud {
    points: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(LabError::InvalidParameter {
                field: "cloud.points",
                message: "point cloud needs at least one point".into(),
            });
        }
        if points.len() != weights.len() {
            return Err(LabError::DimensionMismatch {
                expected: points.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(LabError::InvalidParameter {
                field: "cloud.weights",
                message: "weights must be positive and finite".into(),
            });
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(LabError::InvalidParameter {
                field: "cloud.weights",
                message: format!("weights sum to {total}, expected 1"),
            });
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(LabError::DimensionMismatch {
                expected: dim,
                got: 0,
            });
        }
        Ok(PointCloud { points, weights })
    }

    pub fn uniform(points: Vec<DVector<f64>>) -> Result<Self> {
        let n = points.len();
        PointCloud::new(points, vec![1.0 / n.max(1) as f64; n.max(1)])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.points[draw_categorical(&self.weights, rng)].clone()
    }

    /// Noisy marginal at step t >= 1: isotropic mixture centered at the
    /// scaled atoms.
    pub fn noisy_marginal(&self, schedule: &Schedule, t: usize) -> Result<MixtureDistribution> {
        let a = schedule.alpha_cum(t);
        if a >= 1.0 {
            return Err(LabError::SingularStep(t));
        }
        let d = self.dim();
        let cov = DMatrix::identity(d, d) * (1.0 - a);
        MixtureDistribution::new(
            self.weights.clone(),
            self.points.iter().map(|p| p * a.sqrt()).collect(),
            vec![cov; self.len()],
            None,
        )
    }
}

/// Either data substrate, as consumed by samplers and denoisers.
#[derive(Debug, Clone)]
pub enum DataDistribution {
    Mixture(MixtureDistribution),
    Points(PointCloud),
}

impl DataDistribution {
    pub fn dim(&self) -> usize {
        match self {
            DataDistribution::Mixture(m) => m.dim(),
            DataDistribution::Points(p) => p.dim(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
        match self {
            DataDistribution::Mixture(m) => m.sample(n, rng),
            DataDistribution::Points(p) => (0..n).map(|_| p.sample_one(rng)).collect(),
        }
    }

    pub fn noisy_marginal(&self, schedule: &Schedule, t: usize) -> Result<MixtureDistribution> {
        match self {
            DataDistribution::Mixture(m) => m.noisy_marginal(schedule, t),
            DataDistribution::Points(p) => p.noisy_marginal(schedule, t),
        }
    }

    pub fn as_mixture(&self) -> Option<&MixtureDistribution> {
        match self {
            DataDistribution::Mixture(m) => Some(m),
            DataDistribution::Points(_) => None,
        }
    }
}

pub(crate) fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

fn draw_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Draws a component index from normalized weights; shared by samplers so the
/// component substream consumption is identical everywhere.
pub fn draw_component<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    draw_categorical(weights, rng)
}

/// 8 isotropic modes on the unit circle, variance 0.01, labels 0..8.
pub fn ring8() -> MixtureDistribution {
    let means = (0..8)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / 8.0;
            DVector::from_vec(vec![theta.cos(), theta.sin()])
        })
        .collect();
    MixtureDistribution::isotropic(means, 0.01, Some((0..8).collect())).expect("ring8 is valid")
}

/// 5x5 grid of isotropic modes on {-2,-1,0,1,2}^2, variance 0.01, labels 0..25.
pub fn grid25() -> MixtureDistribution {
    let mut means = Vec::with_capacity(25);
    for i in 0..5 {
        for j in 0..5 {
            means.push(DVector::from_vec(vec![i as f64 - 2.0, j as f64 - 2.0]));
        }
    }
    MixtureDistribution::isotropic(means, 0.01, Some((0..25).collect())).expect("grid25 is valid")
}

/// Two interleaved half-circles approximated by 5 components each, variance
/// 0.01, centered at the origin; labels are the moon index (0 upper, 1 lower).
pub fn two_moons_gmm() -> MixtureDistribution {
    let mut means = Vec::with_capacity(10);
    let mut labels = Vec::with_capacity(10);
    // Upper moon: arc of radius 1 around (-0.5, -0.25); lower moon: its
    // point reflection. The pair keeps the interleaved-crescent geometry
    // with an exactly zero mixture mean.
    for i in 0..5 {
        let theta = std::f64::consts::PI * i as f64 / 4.0;
        means.push(DVector::from_vec(vec![theta.cos() - 0.5, theta.sin() - 0.25]));
        labels.push(0);
    }
    for i in 0..5 {
        let theta = std::f64::consts::PI * i as f64 / 4.0;
        means.push(DVector::from_vec(vec![0.5 - theta.cos(), 0.25 - theta.sin()]));
        labels.push(1);
    }
    MixtureDistribution::isotropic(means, 0.01, Some(labels)).expect("two_moons_gmm is valid")
}

/// Single standard normal component, for reduction checks.
pub fn standard_normal(dim: usize) -> MixtureDistribution {
    MixtureDistribution::isotropic(vec![DVector::zeros(dim)], 1.0, None)
        .expect("standard normal is valid")
}

/// Looks up a built-in distribution by config name.
pub fn builtin(name: &str) -> Option<MixtureDistribution> {
    match name {
        "ring8" => Some(ring8()),
        "grid25" => Some(grid25()),
        "two_moons_gmm" => Some(two_moons_gmm()),
        _ => None,
    }
}

/// Loads a mixture from a plain-text component table. One row per component:
/// `weight  mean_1..mean_D  var_1..var_D` (diagonal covariance), whitespace
/// separated, `#` starts a comment.
pub fn load_component_table(path: &std::path::Path) -> Result<MixtureDistribution> {
    let text = std::fs::read_to_string(path)?;
    parse_component_table(&text)
}

pub fn parse_component_table(text: &str) -> Result<MixtureDistribution> {
    let mut weights = Vec::new();
    let mut means = Vec::new();
    let mut covs = Vec::new();
    let mut dim = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| LabError::Config(format!(
                    "component table line {}: `{tok}` is not a number",
                    lineno + 1
                )))
            })
            .collect::<Result<_>>()?;
        if vals.len() < 3 || vals.len() % 2 == 0 {
            return Err(LabError::Config(format!(
                "component table line {}: expected `weight mean.. var..` with equal mean/var counts",
                lineno + 1
            )));
        }
        let d = (vals.len() - 1) / 2;
        if *dim.get_or_insert(d) != d {
            return Err(LabError::Config(format!(
                "component table line {}: dimension {} conflicts with {}",
                lineno + 1,
                d,
                dim.unwrap()
            )));
        }
        weights.push(vals[0]);
        means.push(DVector::from_vec(vals[1..=d].to_vec()));
        covs.push(DMatrix::from_diagonal(&DVector::from_vec(
            vals[d + 1..].to_vec(),
        )));
    }
    MixtureDistribution::new(weights, means, covs, None)
}
