//! Closed-form epsilon predictors.
//!
//! When the data distribution is a known mixture (or point cloud), the
//! posterior mean of the clean sample given a noisy one is exact:
//!
//! ```text
//! E[x0 | x_t] = sum_i r_i(x_t) (mu_i + sqrt(a) S_i C_i^{-1} (x_t - sqrt(a) mu_i)),
//! C_i = a S_i + (1-a) I,   r_i ∝ w_i N(x_t; sqrt(a) mu_i, C_i),
//! ```
//!
//! and the epsilon prediction is `(x_t - sqrt(a) E[x0|x_t]) / sqrt(1-a)`,
//! which equals `-sqrt(1-a)` times the score of the noisy marginal. The
//! estimator caches per-step component quantities for the steps a sampler
//! visits; other steps are computed on the fly.
//!
//! Guidance composes two estimators: classifier guidance shifts epsilon by
//! the (exact) gradient of the class log-posterior, classifier-free guidance
//! interpolates between unconditional and class-restricted predictions.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::data::{DataDistribution, GaussComponent, MixtureDistribution};
use crate::error::{LabError, Result};
use crate::schedule::Schedule;

/// Predicts the noise component of a noisy sample at step t (1..=T).
pub trait EpsilonEstimator: Sync {
    fn dim(&self) -> usize;
    fn epsilon(&self, x_t: &DVector<f64>, t: usize) -> Result<DVector<f64>>;
}

struct CompCache {
    log_w: f64,
    /// Distribution of x_t under this component: N(sqrt(a) mu, a S + (1-a) I).
    noisy: GaussComponent,
    /// Clean-sample mean of the component (mu_i, or the atom for clouds).
    x0_mean: DVector<f64>,
    /// Posterior gain: sqrt(a) S_i C_i^{-1}; zero matrix for point clouds.
    gain: Option<DMatrix<f64>>,
}

struct StepCache {
    sqrt_a: f64,
    sqrt_one_minus_a: f64,
    comps: Vec<CompCache>,
}

/// Exact posterior-mean denoiser for a data distribution under a schedule.
pub struct ExactDenoiser {
    data: DataDistribution,
    schedule: Schedule,
    cache: HashMap<usize, StepCache>,
}

fn build_step_cache(data: &DataDistribution, schedule: &Schedule, t: usize) -> Result<StepCache> {
    let a = schedule.alpha_cum(t);
    if a >= 1.0 {
        return Err(LabError::SingularStep(t));
    }
    let d = data.dim();
    let eye = DMatrix::identity(d, d);
    let mut comps = Vec::new();
    match data {
        DataDistribution::Mixture(m) => {
            for (i, w) in m.weights().iter().enumerate() {
                let c = m.component(i);
                let noisy_cov = c.cov() * a + &eye * (1.0 - a);
                let noisy = GaussComponent::new(c.mean() * a.sqrt(), noisy_cov.clone())?;
                // gain = sqrt(a) S C^{-1}, via C^{-1} S = solve(C, S) transposed
                // (C and S symmetric).
                let cinv_s = noisy_cov
                    .clone()
                    .cholesky()
                    .ok_or(LabError::NotPositiveSemidefinite(0.0))?
                    .solve(c.cov());
                let gain = cinv_s.transpose() * a.sqrt();
                comps.push(CompCache {
                    log_w: w.ln(),
                    noisy,
                    x0_mean: c.mean().clone(),
                    gain: Some(gain),
                });
            }
        }
        DataDistribution::Points(p) => {
            let noisy_cov = &eye * (1.0 - a);
            for (x0, w) in p.points().iter().zip(p.weights()) {
                comps.push(CompCache {
                    log_w: w.ln(),
                    noisy: GaussComponent::new(x0 * a.sqrt(), noisy_cov.clone())?,
                    x0_mean: x0.clone(),
                    gain: None,
                });
            }
        }
    }
    Ok(StepCache {
        sqrt_a: a.sqrt(),
        sqrt_one_minus_a: (1.0 - a).sqrt(),
        comps,
    })
}

impl ExactDenoiser {
    /// Builds the denoiser, precomputing caches for the schedule's step
    /// subsequence.
    pub fn new(data: DataDistribution, schedule: Schedule) -> Result<Self> {
        let mut cache = HashMap::new();
        for &t in schedule.tau() {
            cache.insert(t, build_step_cache(&data, &schedule, t)?);
        }
        Ok(ExactDenoiser {
            data,
            schedule,
            cache,
        })
    }

    pub fn data(&self) -> &DataDistribution {
        &self.data
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn with_step<T>(&self, t: usize, f: impl FnOnce(&StepCache) -> T) -> Result<T> {
        match self.cache.get(&t) {
            Some(c) => Ok(f(c)),
            None => Ok(f(&build_step_cache(&self.data, &self.schedule, t)?)),
        }
    }

    /// Responsibility weights of the noisy marginal's components at x_t.
    fn responsibilities(cache: &StepCache, x_t: &DVector<f64>) -> Vec<f64> {
        let logs: Vec<f64> = cache
            .comps
            .iter()
            .map(|c| c.log_w + c.noisy.log_density(x_t))
            .collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    /// Exact posterior mean of the clean sample.
    pub fn posterior_mean_x0(&self, x_t: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        self.with_step(t, |cache| {
            let r = Self::responsibilities(cache, x_t);
            let mut m = DVector::zeros(x_t.len());
            for (ri, c) in r.iter().zip(&cache.comps) {
                if *ri == 0.0 {
                    continue;
                }
                match &c.gain {
                    Some(g) => {
                        let centered = x_t - c.noisy.mean();
                        m += (&c.x0_mean + g * centered) * *ri;
                    }
                    None => m += &c.x0_mean * *ri,
                }
            }
            m
        })
    }

    /// Full posterior over the clean sample: weights, per-component means and
    /// covariances (zero covariance for point-cloud atoms).
    pub fn posterior_x0(&self, x_t: &DVector<f64>, t: usize) -> Result<PosteriorX0> {
        let a = self.schedule.alpha_cum(t);
        if a >= 1.0 {
            return Err(LabError::SingularStep(t));
        }
        self.with_step(t, |cache| {
            let r = Self::responsibilities(cache, x_t);
            let d = x_t.len();
            let mut means = Vec::with_capacity(cache.comps.len());
            let mut covs = Vec::with_capacity(cache.comps.len());
            for (i, c) in cache.comps.iter().enumerate() {
                match &c.gain {
                    Some(g) => {
                        let centered = x_t - c.noisy.mean();
                        means.push(&c.x0_mean + g * centered);
                        // V = S - sqrt(a) gain S  (= S - a S C^{-1} S)
                        let s = match &self.data {
                            DataDistribution::Mixture(m) => m.component(i).cov(),
                            DataDistribution::Points(_) => unreachable!(),
                        };
                        covs.push(s - g * s * cache.sqrt_a);
                    }
                    None => {
                        means.push(c.x0_mean.clone());
                        covs.push(DMatrix::zeros(d, d));
                    }
                }
            }
            PosteriorX0 {
                weights: r,
                means,
                covs,
            }
        })
    }

    /// Score of the noisy marginal at x_t (responsibility-weighted component
    /// scores); used by guidance and verification.
    pub fn marginal_score(&self, x_t: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        self.with_step(t, |cache| {
            let r = Self::responsibilities(cache, x_t);
            let mut g = DVector::zeros(x_t.len());
            for (ri, c) in r.iter().zip(&cache.comps) {
                if *ri > 0.0 {
                    g += c.noisy.score(x_t) * *ri;
                }
            }
            g
        })
    }
}

impl EpsilonEstimator for ExactDenoiser {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn epsilon(&self, x_t: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        let x0 = self.posterior_mean_x0(x_t, t)?;
        self.with_step(t, |cache| {
            (x_t - x0 * cache.sqrt_a) / cache.sqrt_one_minus_a
        })
    }
}

/// Posterior over the clean sample given a noisy one.
#[derive(Debug, Clone)]
pub struct PosteriorX0 {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    None,
    Classifier,
    ClassifierFree,
}

#[derive(Debug, Clone, Copy)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub scale: f64,
    pub target_label: Option<usize>,
}

impl GuidanceConfig {
    pub fn none() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::None,
            scale: 0.0,
            target_label: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode != GuidanceMode::None && self.target_label.is_none() {
            return Err(LabError::InvalidParameter {
                field: "guidance.label",
                message: "guidance requires a target label".into(),
            });
        }
        if !self.scale.is_finite() {
            return Err(LabError::InvalidParameter {
                field: "guidance.scale",
                message: "scale must be finite".into(),
            });
        }
        Ok(())
    }
}

/// Class posterior p(y | x_t) under the noisy marginal, by label in
/// declaration order. Probabilities sum to 1.
pub fn class_posterior(
    mixture: &MixtureDistribution,
    schedule: &Schedule,
    x_t: &DVector<f64>,
    t: usize,
) -> Result<Vec<(usize, f64)>> {
    let labels = mixture
        .labels()
        .ok_or(LabError::UnknownLabel(usize::MAX))?
        .to_vec();
    let marg = mixture.noisy_marginal(schedule, t)?;
    let r = marg.responsibilities(x_t);
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match out.iter_mut().find(|(ol, _)| *ol == l) {
            Some((_, p)) => *p += r[i],
            None => out.push((l, r[i])),
        }
    }
    Ok(out)
}

/// Guided estimator wrapping a base estimator with exact conditional /
/// marginal quantities from the labeled mixture.
pub struct GuidedDenoiser<'a, E: EpsilonEstimator> {
    base: &'a E,
    cfg: GuidanceConfig,
    full: ExactDenoiser,
    cond: ExactDenoiser,
    sqrt_one_minus_a: HashMap<usize, f64>,
}

impl<'a, E: EpsilonEstimator> GuidedDenoiser<'a, E> {
    pub fn new(
        base: &'a E,
        mixture: &MixtureDistribution,
        schedule: &Schedule,
        cfg: GuidanceConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let y = cfg.target_label.ok_or(LabError::InvalidParameter {
            field: "guidance.label",
            message: "guidance requires a target label".into(),
        })?;
        let restricted = mixture.restrict_to_label(y)?;
        let full = ExactDenoiser::new(
            DataDistribution::Mixture(mixture.clone()),
            schedule.clone(),
        )?;
        let cond = ExactDenoiser::new(DataDistribution::Mixture(restricted), schedule.clone())?;
        let sqrt_one_minus_a = schedule
            .tau()
            .iter()
            .map(|&t| (t, (1.0 - schedule.alpha_cum(t)).sqrt()))
            .collect();
        Ok(GuidedDenoiser {
            base,
            cfg,
            full,
            cond,
            sqrt_one_minus_a,
        })
    }

    fn sqrt_one_minus_a(&self, t: usize) -> f64 {
        match self.sqrt_one_minus_a.get(&t) {
            Some(&v) => v,
            None => (1.0 - self.full.schedule().alpha_cum(t)).sqrt(),
        }
    }

    /// Gradient of log p(y | x_t): conditional marginal score minus
    /// unconditional marginal score (the label prior drops out).
    pub fn class_log_posterior_gradient(
        &self,
        x_t: &DVector<f64>,
        t: usize,
    ) -> Result<DVector<f64>> {
        Ok(self.cond.marginal_score(x_t, t)? - self.full.marginal_score(x_t, t)?)
    }
}

impl<E: EpsilonEstimator> EpsilonEstimator for GuidedDenoiser<'_, E> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn epsilon(&self, x_t: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        let w = self.cfg.scale;
        match self.cfg.mode {
            GuidanceMode::None => self.base.epsilon(x_t, t),
            GuidanceMode::Classifier => {
                let base = self.base.epsilon(x_t, t)?;
                let grad = self.class_log_posterior_gradient(x_t, t)?;
                Ok(base - grad * (w * self.sqrt_one_minus_a(t)))
            }
            GuidanceMode::ClassifierFree => {
                // (1-w) * uncond + w * cond; exact at the endpoints.
                let uncond = self.base.epsilon(x_t, t)?;
                let cond = self.cond.epsilon(x_t, t)?;
                Ok(uncond * (1.0 - w) + cond * w)
            }
        }
    }
}
