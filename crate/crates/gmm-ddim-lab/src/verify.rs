//! Independent oracles for the moment-matching and bound claims.
//!
//! The mixture kernels are built to preserve the plain kernel's per-step
//! moments. This module certifies that from two directions that share no
//! code with the samplers:
//!
//! * a closed-form recursion that enumerates the product mixture of all
//!   per-step components and reports exact (formal) moment errors against
//!   the forward-process targets `sqrt(a_t) x0`, `(1 - a_t) I`;
//! * Monte Carlo simulation of the inference-direction kernel with the true
//!   `x0` plugged in, for the exact covariance and for the two diagonal
//!   approximations the samplers actually use, with aggregate z-scores so
//!   "agrees within noise" is a checkable statement.
//!
//! Also here: the per-step bound weights `w_t`, an evaluator for the bound
//! on a sample set, the exact multimodal denoising posterior, and the
//! forward conditional log-density ratio (the one that stops being Gaussian
//! as soon as K > 1 and s > 0).
//!
//! The closed-form recursion with the true x0 plugged into the kernel mean
//! turns each transition into an affine map: with
//! `A = sqrt(1 - a_prev - sigma^2)/sqrt(1 - a_cur)`, a component (w, shift,
//! C) at the current level maps to (w pi_k, A shift + delta_k,
//! A^2 C + sigma^2 I - Delta_k) for each kernel component k, where `shift`
//! is measured relative to `sqrt(a_t) x0`. Shifts and covariances are
//! independent of x0, so the enumeration is done once per bank.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{self, DataDistribution, GaussComponent, MixtureDistribution};
use crate::denoiser::{EpsilonEstimator, ExactDenoiser};
use crate::error::{LabError, Result};
use crate::kernel::{GmmKernelParams, KernelBank, KernelScheme};
use crate::schedule::Schedule;
use crate::stream::{role, standard_normal_vector, StreamFactory};

pub const COMPONENT_CAP: usize = 4096;
pub const NU_FLOOR: f64 = 1e-12;
/// Eigenvalues of a nominally-PSD covariance above this are clamped to zero;
/// below it the matrix is rejected.
const PSD_SLACK: f64 = -1e-10;

// Sub-tags under the ORACLE role, so oracles never share streams with
// samplers or with each other.
const TAG_MC: u64 = 1;
const TAG_ELBO: u64 = 2;

/// Affine-map coefficients of one reverse transition with the true x0:
/// mean = x0_coef * x0 + xt_coef * x_t (+ delta_k), noise variance sigma^2.
#[derive(Debug, Clone, Copy)]
pub struct TransitionCoeffs {
    pub t_cur: usize,
    pub t_prev: usize,
    pub a_cur: f64,
    pub a_prev: f64,
    pub sigma: f64,
    pub x0_coef: f64,
    pub xt_coef: f64,
}

pub fn transition_coeffs(schedule: &Schedule, idx: usize, eta: f64) -> Result<TransitionCoeffs> {
    let (t_cur, t_prev) = schedule.step_pair(idx);
    let a_cur = schedule.alpha_cum(t_cur);
    let a_prev = schedule.alpha_cum(t_prev);
    let sigma = schedule.sigma_for_step(idx, eta)?;
    let limit = 1.0 - a_prev;
    let sigma_sq = sigma * sigma;
    if sigma_sq > limit + 1e-15 {
        return Err(LabError::VarianceOverflow { sigma_sq, limit });
    }
    let dir_coef = (limit - sigma_sq).max(0.0).sqrt();
    let sqrt_one_minus_a_cur = (1.0 - a_cur).sqrt();
    let xt_coef = dir_coef / sqrt_one_minus_a_cur;
    let x0_coef = a_prev.sqrt() - xt_coef * a_cur.sqrt();
    Ok(TransitionCoeffs {
        t_cur,
        t_prev,
        a_cur,
        a_prev,
        sigma,
        x0_coef,
        xt_coef,
    })
}

/// One component of a level marginal, relative to the target mean: the
/// actual component is N(sqrt(a_t) x0 + shift, cov).
#[derive(Debug, Clone)]
pub struct MarginalComponent {
    pub weight: f64,
    pub shift: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Enumerates the marginal components at every tau level, top down: entry i
/// describes the level tau[S-1-i]. Component counts multiply by K per
/// transition; exceeding `cap` is refused.
pub fn marginal_levels(
    schedule: &Schedule,
    bank: &KernelBank,
    eta: f64,
    cap: usize,
) -> Result<Vec<(usize, Vec<MarginalComponent>)>> {
    let steps = schedule.step_count();
    let dim = bank.at(0).dim();
    let top_t = schedule.tau()[steps - 1];
    let mut comps = vec![MarginalComponent {
        weight: 1.0,
        shift: DVector::zeros(dim),
        cov: DMatrix::identity(dim, dim) * (1.0 - schedule.alpha_cum(top_t)),
    }];
    let mut levels = vec![(top_t, comps.clone())];
    for idx in (1..steps).rev() {
        let co = transition_coeffs(schedule, idx, eta)?;
        let params = bank.at(idx);
        let kk = params.components();
        let required = comps.len() * kk;
        if required > cap {
            return Err(LabError::ComponentCapExceeded { required, cap });
        }
        let sigma_sq = co.sigma * co.sigma;
        let deltas_full: Vec<DMatrix<f64>> = (0..kk).map(|k| params.full_delta(k)).collect();
        let mut next = Vec::with_capacity(required);
        for c in &comps {
            for k in 0..kk {
                let shift = &c.shift * co.xt_coef + params.delta(k);
                let mut cov = &c.cov * (co.xt_coef * co.xt_coef);
                for j in 0..dim {
                    cov[(j, j)] += sigma_sq;
                }
                cov -= &deltas_full[k];
                next.push(MarginalComponent {
                    weight: c.weight * params.priors()[k],
                    shift,
                    cov,
                });
            }
        }
        comps = next;
        levels.push((co.t_prev, comps.clone()));
    }
    Ok(levels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McVariant {
    FullCov,
    DiagApprox,
    VubClipped,
}

impl McVariant {
    pub fn name(&self) -> &'static str {
        match self {
            McVariant::FullCov => "full_cov",
            McVariant::DiagApprox => "diag_approx",
            McVariant::VubClipped => "vub_clipped",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepMoments {
    /// Noise level t the moments are measured at.
    pub t: usize,
    /// Infinity norm of (mean - sqrt(a_t) x0).
    pub mean_err: f64,
    /// Frobenius norm of (cov - (1 - a_t) I).
    pub cov_err: f64,
    /// Aggregate z-scores of the errors against Monte Carlo noise
    /// (chi-square statistic, standardized); absent for closed form.
    pub mean_z: Option<f64>,
    pub cov_z: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MomentReport {
    pub method: &'static str,
    pub steps: Vec<StepMoments>,
    pub chains: usize,
    pub components: usize,
}

impl MomentReport {
    pub fn max_mean_err(&self) -> f64 {
        self.steps.iter().map(|s| s.mean_err).fold(0.0, f64::max)
    }

    pub fn max_cov_err(&self) -> f64 {
        self.steps.iter().map(|s| s.cov_err).fold(0.0, f64::max)
    }

    pub fn max_abs_z(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| [s.mean_z, s.cov_z])
            .flatten()
            .map(f64::abs)
            .fold(0.0, f64::max)
    }
}

/// Exact (formal) moment errors of the enumerated marginals at every level
/// below the top, ending with the post-final-transition point mass at x0.
/// The enumeration is pure moment algebra, so it applies to any bank
/// regardless of whether sigma^2 I - Delta_k is a realizable covariance.
pub fn closed_form_marginals(
    x0: &DVector<f64>,
    schedule: &Schedule,
    bank: &KernelBank,
    eta: f64,
    cap: usize,
) -> Result<MomentReport> {
    let dim = x0.len();
    if bank.at(0).dim() != dim {
        return Err(LabError::DimensionMismatch {
            expected: dim,
            got: bank.at(0).dim(),
        });
    }
    let levels = marginal_levels(schedule, bank, eta, cap)?;
    let components = levels.last().map_or(1, |(_, c)| c.len());
    let mut steps = Vec::new();
    // Skip the top level: it is the starting exact Gaussian.
    for (t, comps) in levels.iter().skip(1) {
        let a = schedule.alpha_cum(*t);
        let (mean_err, cov_err) = aggregate_moment_errors(comps, dim, a);
        steps.push(StepMoments {
            t: *t,
            mean_err,
            cov_err,
            mean_z: None,
            cov_z: None,
        });
    }
    // Final plain transition: coefficients collapse to the point x0
    // (A = 0, sigma = 0), so shifts and covariances vanish identically.
    let co = transition_coeffs(schedule, 0, eta)?;
    let (_, last) = levels.last().expect("at least the top level");
    let mut shift_sum = DVector::zeros(dim);
    let mut cov_sum = DMatrix::zeros(dim, dim);
    for c in last {
        shift_sum += &c.shift * (co.xt_coef * c.weight);
        cov_sum += &c.cov * (co.xt_coef * co.xt_coef * c.weight);
    }
    steps.push(StepMoments {
        t: 0,
        mean_err: shift_sum.amax(),
        cov_err: cov_sum.norm(),
        mean_z: None,
        cov_z: None,
    });
    Ok(MomentReport {
        method: "closed_form",
        steps,
        chains: 0,
        components,
    })
}

fn aggregate_moment_errors(comps: &[MarginalComponent], dim: usize, a: f64) -> (f64, f64) {
    let mut mean = DVector::zeros(dim);
    for c in comps {
        mean += &c.shift * c.weight;
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for c in comps {
        cov += (&c.cov + &c.shift * c.shift.transpose()) * c.weight;
    }
    cov -= &mean * mean.transpose();
    for j in 0..dim {
        cov[(j, j)] -= 1.0 - a;
    }
    (mean.amax(), cov.norm())
}

/// Square root of a symmetric nominally-PSD matrix; eigenvalues in
/// [PSD_SLACK, 0) are clamped to zero, anything lower is an error.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < PSD_SLACK {
        return Err(LabError::NotPositiveSemidefinite(min));
    }
    let mut v = eig.eigenvectors;
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    Ok(v)
}

enum McNoise {
    Full(Vec<DMatrix<f64>>),
    Diag(Vec<DVector<f64>>),
    Rotated {
        basis: DMatrix<f64>,
        coeffs: Vec<Vec<f64>>,
    },
}

struct McStep {
    co: TransitionCoeffs,
    priors: Vec<f64>,
    deltas: Vec<DVector<f64>>,
    noise: McNoise,
}

/// Simulates the inference-direction kernel (true x0 in the mean) and
/// reports empirical moment errors per level with aggregate z-scores.
pub fn monte_carlo_marginals(
    x0: &DVector<f64>,
    schedule: &Schedule,
    bank: &KernelBank,
    eta: f64,
    variant: McVariant,
    chains: usize,
    factory: &StreamFactory,
) -> Result<MomentReport> {
    let dim = x0.len();
    if bank.at(0).dim() != dim {
        return Err(LabError::DimensionMismatch {
            expected: dim,
            got: bank.at(0).dim(),
        });
    }
    if chains < 2 {
        return Err(LabError::InvalidParameter {
            field: "verify.chains",
            message: "need at least 2 chains".into(),
        });
    }
    let steps = schedule.step_count();
    let mut plan = Vec::with_capacity(steps.saturating_sub(1));
    for idx in (1..steps).rev() {
        let co = transition_coeffs(schedule, idx, eta)?;
        let params = bank.at(idx);
        let kk = params.components();
        let sigma_sq = co.sigma * co.sigma;
        let noise = match variant {
            McVariant::FullCov => {
                let mut mats = Vec::with_capacity(kk);
                for k in 0..kk {
                    let mut cov = -params.full_delta(k);
                    for j in 0..dim {
                        cov[(j, j)] += sigma_sq;
                    }
                    mats.push(psd_sqrt(&cov)?);
                }
                McNoise::Full(mats)
            }
            McVariant::DiagApprox => {
                if params.scheme() == KernelScheme::OrthoVub {
                    return Err(LabError::InvalidParameter {
                        field: "verify.variant",
                        message: "diagonal approximation is defined in the standard basis; \
                                  use vub_clipped for bound-based parameters"
                            .into(),
                    });
                }
                let (vars, _) = params.clipped_variances(sigma_sq);
                McNoise::Diag(vars.into_iter().map(|v| v.map(f64::sqrt)).collect())
            }
            McVariant::VubClipped => {
                let basis = params.basis().ok_or(LabError::InvalidParameter {
                    field: "verify.variant",
                    message: "vub_clipped needs an orthonormal-basis kernel".into(),
                })?;
                let coeffs = (0..kk)
                    .map(|k| {
                        let off = params.cov_diag_offsets(k);
                        (0..kk)
                            .map(|j| co.sigma - (sigma_sq - off[j]).max(0.0).sqrt())
                            .collect()
                    })
                    .collect();
                McNoise::Rotated {
                    basis: basis.clone(),
                    coeffs,
                }
            }
        };
        plan.push(McStep {
            co,
            priors: params.priors().to_vec(),
            deltas: (0..kk).map(|k| params.delta(k).clone()).collect(),
            noise,
        });
    }
    let top_t = schedule.tau()[steps - 1];
    let top_std = (1.0 - schedule.alpha_cum(top_t)).sqrt();
    let sqrt_a_top = schedule.alpha_cum(top_t).sqrt();
    // Per-chain trajectories of the states at each recorded level.
    let trajectories: Vec<Vec<DVector<f64>>> = (0..chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = factory.rng(&[role::ORACLE, TAG_MC, chain as u64]);
            let mut x = standard_normal_vector(dim, &mut rng) * top_std + x0 * sqrt_a_top;
            let mut states = Vec::with_capacity(plan.len());
            for step in &plan {
                let k = data::draw_component(&step.priors, &mut rng);
                let mut mean = x0 * step.co.x0_coef + &x * step.co.xt_coef;
                mean += &step.deltas[k];
                let xi = standard_normal_vector(dim, &mut rng);
                x = match &step.noise {
                    McNoise::Full(mats) => mean + &mats[k] * xi,
                    McNoise::Diag(stds) => {
                        for j in 0..dim {
                            mean[j] += stds[k][j] * xi[j];
                        }
                        mean
                    }
                    McNoise::Rotated { basis, coeffs } => {
                        for j in 0..dim {
                            mean[j] += step.co.sigma * xi[j];
                        }
                        for (c, coef) in coeffs[k].iter().enumerate() {
                            if *coef != 0.0 {
                                let u = basis.column(c);
                                let proj = u.dot(&xi);
                                mean.axpy(-coef * proj, &u.into_owned(), 1.0);
                            }
                        }
                        mean
                    }
                };
                states.push(x.clone());
            }
            states
        })
        .collect();
    let mut report_steps = Vec::with_capacity(plan.len());
    for (level, step) in plan.iter().enumerate() {
        let t = step.co.t_prev;
        let a = schedule.alpha_cum(t);
        let states: Vec<&DVector<f64>> = trajectories.iter().map(|tr| &tr[level]).collect();
        report_steps.push(empirical_step_moments(&states, t, a, x0));
    }
    Ok(MomentReport {
        method: variant.name(),
        steps: report_steps,
        chains,
        components: bank.at(0).components(),
    })
}

fn empirical_step_moments(states: &[&DVector<f64>], t: usize, a: f64, x0: &DVector<f64>) -> StepMoments {
    let dim = x0.len();
    let n = states.len() as f64;
    let mut mean = DVector::zeros(dim);
    for x in states {
        mean += *x;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for x in states {
        let r = *x - &mean;
        cov.syger(1.0 / n, &r, &r, 1.0);
    }
    cov.fill_upper_triangle_with_lower_triangle();
    let target_mean = x0 * a.sqrt();
    let dm = &mean - &target_mean;
    let mean_err = dm.amax();
    let mut cov_err_sq = 0.0;
    for j in 0..dim {
        for l in 0..dim {
            let target = if j == l { 1.0 - a } else { 0.0 };
            let e = cov[(j, l)] - target;
            cov_err_sq += e * e;
        }
    }
    // Mean z: standardized chi-square of per-coordinate errors against the
    // empirical per-coordinate variance of the mean estimator.
    let mut q_mean = 0.0;
    for j in 0..dim {
        q_mean += dm[j] * dm[j] / (cov[(j, j)] / n);
    }
    let dof_mean = dim as f64;
    let mean_z = (q_mean - dof_mean) / (2.0 * dof_mean).sqrt();
    // Covariance z: per-entry chi-square with empirically estimated entry
    // variances (variance of the centered products).
    let mut q_cov = 0.0;
    for j in 0..dim {
        for l in j..dim {
            let mut m2 = 0.0;
            for x in states {
                let p = (x[j] - mean[j]) * (x[l] - mean[l]);
                m2 += p * p;
            }
            m2 /= n;
            let var_entry = (m2 - cov[(j, l)] * cov[(j, l)]).max(f64::MIN_POSITIVE) / n;
            let target = if j == l { 1.0 - a } else { 0.0 };
            let e = cov[(j, l)] - target;
            q_cov += e * e / var_entry;
        }
    }
    let dof_cov = (dim * (dim + 1) / 2) as f64;
    let cov_z = (q_cov - dof_cov) / (2.0 * dof_cov).sqrt();
    StepMoments {
        t,
        mean_err,
        cov_err: cov_err_sq.sqrt(),
        mean_z: Some(mean_z),
        cov_z: Some(cov_z),
    }
}

#[derive(Debug, Clone)]
pub struct ElboStep {
    pub step_idx: usize,
    /// Level the transition starts from.
    pub t: usize,
    /// Per-component minimum clipped diagonal variance, floored.
    pub nu: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct ElboReport {
    pub steps: Vec<ElboStep>,
    pub k2: f64,
    /// Some nu hit the floor: the bound diverges in the exact limit and the
    /// reported value uses the floor.
    pub degenerate: bool,
}

/// Per-step bound weights `w_t = (sum_k pi_k / nu_t^k) (1 - a_t)/(2 a_t)`,
/// with `nu_t^k` the minimum clipped diagonal variance of component k, and
/// the final-step coefficient `(1 - a_1)/(2 sigma_1^2 a_1)`.
pub fn elbo_weights(
    schedule: &Schedule,
    bank: &KernelBank,
    eta: f64,
    sigma_1: f64,
) -> Result<ElboReport> {
    if !(sigma_1 > 0.0 && sigma_1.is_finite()) {
        return Err(LabError::InvalidParameter {
            field: "verify.sigma_1",
            message: format!("{sigma_1} must be positive and finite"),
        });
    }
    let steps = schedule.step_count();
    let mut out = Vec::with_capacity(steps.saturating_sub(1));
    let mut degenerate = false;
    for idx in 1..steps {
        let co = transition_coeffs(schedule, idx, eta)?;
        let params = bank.at(idx);
        let (vars, _) = params.clipped_variances(co.sigma * co.sigma);
        let nu: Vec<f64> = vars
            .iter()
            .map(|v| {
                let m = v.min();
                if m < NU_FLOOR {
                    degenerate = true;
                    NU_FLOOR
                } else {
                    m
                }
            })
            .collect();
        let a = co.a_cur;
        let inv_sum: f64 = params
            .priors()
            .iter()
            .zip(&nu)
            .map(|(pi, nu_k)| pi / nu_k)
            .sum();
        out.push(ElboStep {
            step_idx: idx,
            t: co.t_cur,
            nu,
            weight: inv_sum * (1.0 - a) / (2.0 * a),
        });
    }
    let a1 = schedule.alpha_cum(schedule.tau()[0]);
    let k2 = (1.0 - a1) / (2.0 * sigma_1 * sigma_1 * a1);
    Ok(ElboReport {
        steps: out,
        k2,
        degenerate,
    })
}

#[derive(Debug, Clone)]
pub struct ElboEvaluation {
    pub value: f64,
    /// Marginal components whose covariance needed negative-eigenvalue
    /// clamping before sampling.
    pub clamped_components: usize,
}

/// Evaluates the bound on a sample set: for each x0 and each weighted level,
/// draws a component of the enumerated level marginal, forms
/// `x_t = sqrt(a_t) x0 + shift_l + sqrt(C_l) eps`, and accumulates
/// `w_t |eps_hat(x_t, t) - eps|^2` (and the final-step term with its own
/// coefficient).
pub fn evaluate_elbo_bound(
    schedule: &Schedule,
    bank: &KernelBank,
    eta: f64,
    sigma_1: f64,
    estimator: &dyn EpsilonEstimator,
    x0s: &[DVector<f64>],
    factory: &StreamFactory,
    cap: usize,
) -> Result<ElboEvaluation> {
    if x0s.is_empty() {
        return Err(LabError::InvalidParameter {
            field: "verify.samples",
            message: "bound evaluation needs at least one sample".into(),
        });
    }
    let dim = estimator.dim();
    let report = elbo_weights(schedule, bank, eta, sigma_1)?;
    let levels = marginal_levels(schedule, bank, eta, cap)?;
    let steps = schedule.step_count();
    // Terms are weighted by w at the level the transition *lands* on for
    // steps down to tau[0]; level tau[idx] marginal is levels[steps-1-idx].
    let mut clamped = 0usize;
    let mut prepared: Vec<(usize, f64, Vec<MarginalComponent>, Vec<DMatrix<f64>>)> = Vec::new();
    for step in &report.steps {
        let (t, comps) = &levels[steps - 1 - step.step_idx];
        debug_assert_eq!(*t, step.t);
        let mut roots = Vec::with_capacity(comps.len());
        for c in comps {
            let eig = c.cov.clone().symmetric_eigen();
            if eig.eigenvalues.min() < 0.0 {
                clamped += 1;
            }
            let mut v = eig.eigenvectors;
            for (j, lam) in eig.eigenvalues.iter().enumerate() {
                v.column_mut(j).scale_mut(lam.max(0.0).sqrt());
            }
            roots.push(v);
        }
        prepared.push((step.t, step.weight, comps.clone(), roots));
    }
    // Final-step term at level tau[0].
    {
        let (t, comps) = &levels[steps - 1];
        let mut roots = Vec::with_capacity(comps.len());
        for c in comps {
            let eig = c.cov.clone().symmetric_eigen();
            if eig.eigenvalues.min() < 0.0 {
                clamped += 1;
            }
            let mut v = eig.eigenvectors;
            for (j, lam) in eig.eigenvalues.iter().enumerate() {
                v.column_mut(j).scale_mut(lam.max(0.0).sqrt());
            }
            roots.push(v);
        }
        prepared.push((*t, report.k2, comps.clone(), roots));
    }
    let total: f64 = x0s
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut rng = factory.rng(&[role::ORACLE, TAG_ELBO, i as u64]);
            let mut acc = 0.0;
            for (t, weight, comps, roots) in &prepared {
                let ws: Vec<f64> = comps.iter().map(|c| c.weight).collect();
                let l = data::draw_component(&ws, &mut rng);
                let eps = standard_normal_vector(dim, &mut rng);
                let a = schedule
                    .alpha_cum(*t);
                let x_t = x0 * a.sqrt() + &comps[l].shift + &roots[l] * &eps;
                let eps_hat = estimator.epsilon(&x_t, *t)?;
                acc += weight * (eps_hat - &eps).norm_squared();
            }
            Ok(acc)
        })
        .sum::<Result<f64>>()?;
    Ok(ElboEvaluation {
        value: total / x0s.len() as f64,
        clamped_components: clamped,
    })
}

/// Exact posterior over the next (less noisy) state given x_t: a mixture
/// over (data component i, kernel component k) with weights r_i(x_t) pi_k,
/// means `x0_coef m_i + xt_coef x_t + delta_k`, and covariances
/// `x0_coef^2 V_i + sigma^2 I - Delta_k`, where (m_i, V_i) is the Gaussian
/// posterior of x0 under data component i. Point-cloud data has V_i = 0.
pub fn exact_denoising_posterior(
    data: &DataDistribution,
    schedule: &Schedule,
    params: &GmmKernelParams,
    step_idx: usize,
    eta: f64,
    x_t: &DVector<f64>,
) -> Result<MixtureDistribution> {
    let dim = data.dim();
    if x_t.len() != dim || params.dim() != dim {
        return Err(LabError::DimensionMismatch {
            expected: dim,
            got: x_t.len().max(params.dim()),
        });
    }
    let co = transition_coeffs(schedule, step_idx, eta)?;
    let den = ExactDenoiser::new(data.clone(), schedule.clone())?;
    let post = den.posterior_x0(x_t, co.t_cur)?;
    let kk = params.components();
    let sigma_sq = co.sigma * co.sigma;
    let noise_covs: Vec<DMatrix<f64>> = (0..kk)
        .map(|k| {
            let mut cov = -params.full_delta(k);
            for j in 0..dim {
                cov[(j, j)] += sigma_sq;
            }
            cov
        })
        .collect();
    let mut weights = Vec::with_capacity(post.weights.len() * kk);
    let mut means = Vec::with_capacity(weights.capacity());
    let mut covs = Vec::with_capacity(weights.capacity());
    let mut labels = Vec::with_capacity(weights.capacity());
    for (i, (w_i, (m_i, v_i))) in post
        .weights
        .iter()
        .zip(post.means.iter().zip(&post.covs))
        .enumerate()
    {
        let base_mean = m_i * co.x0_coef + x_t * co.xt_coef;
        let base_cov = v_i * (co.x0_coef * co.x0_coef);
        for k in 0..kk {
            weights.push(w_i * params.priors()[k]);
            means.push(&base_mean + params.delta(k));
            covs.push(&base_cov + &noise_covs[k]);
            labels.push(i);
        }
    }
    MixtureDistribution::new(weights, means, covs, Some(labels))
}

/// Log-density of the forward conditional q(x_t | x_{t-1}, x0) via the Bayes
/// ratio: reverse-kernel density at x_{t-1} plus the level-t marginal
/// log-density minus the level-(t-1) marginal log-density.
pub fn forward_conditional_logdensity(
    x0: &DVector<f64>,
    schedule: &Schedule,
    bank: &KernelBank,
    eta: f64,
    step_idx: usize,
    x_t: &DVector<f64>,
    x_prev: &DVector<f64>,
    cap: usize,
) -> Result<f64> {
    if step_idx == 0 {
        return Err(LabError::InvalidParameter {
            field: "verify.step_idx",
            message: "the final transition conditions on level 0; pick step_idx >= 1".into(),
        });
    }
    let co = transition_coeffs(schedule, step_idx, eta)?;
    let params = bank.at(step_idx);
    let dim = x0.len();
    let sigma_sq = co.sigma * co.sigma;
    // Reverse-kernel mixture density at x_prev.
    let mut logs = Vec::with_capacity(params.components());
    for k in 0..params.components() {
        let mean = x0 * co.x0_coef + x_t * co.xt_coef + params.delta(k);
        let mut cov = -params.full_delta(k);
        for j in 0..dim {
            cov[(j, j)] += sigma_sq;
        }
        let comp = GaussComponent::new(mean, cov)?;
        logs.push(params.priors()[k].ln() + comp.log_density(x_prev));
    }
    let log_kernel = data::log_sum_exp(&logs);
    let levels = marginal_levels(schedule, bank, eta, cap)?;
    let steps = schedule.step_count();
    let log_marg = |level_idx: usize, x: &DVector<f64>| -> Result<f64> {
        let (t, comps) = &levels[steps - 1 - level_idx];
        let sqrt_a = schedule.alpha_cum(*t).sqrt();
        let mut logs = Vec::with_capacity(comps.len());
        for c in comps {
            let comp = GaussComponent::new(x0 * sqrt_a + &c.shift, c.cov.clone())?;
            logs.push(c.weight.ln() + comp.log_density(x));
        }
        Ok(data::log_sum_exp(&logs))
    };
    Ok(log_kernel + log_marg(step_idx, x_t)? - log_marg(step_idx - 1, x_prev)?)
}

/// Central finite-difference gradient, for checking analytic scores.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |j, _| {
        let mut hi = x.clone();
        hi[j] += h;
        let mut lo = x.clone();
        lo[j] -= h;
        (f(&hi) - f(&lo)) / (2.0 * h)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PointCloud;
    use crate::kernel::{make_ortho, make_ortho_vub, make_rand, BankSpec};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn schedule(total: usize, steps: usize) -> Schedule {
        Schedule::linear(total, 1e-2, 2e-1)
            .unwrap()
            .with_substeps(steps)
            .unwrap()
    }

    fn bank(scheme: KernelScheme, dim: usize, k: usize, s: f64, steps: usize, seed: u64) -> KernelBank {
        let spec = BankSpec {
            scheme,
            components: k,
            scale: s,
            priors: None,
            share_across_steps: false,
        };
        KernelBank::build(&spec, dim, steps, &StreamFactory::new(seed)).unwrap()
    }

    #[test]
    fn closed_form_single_component_machine_precision() {
        let sch = schedule(60, 5);
        let b = bank(KernelScheme::Ortho, 3, 1, 2.0, 5, 1);
        let x0 = DVector::from_vec(vec![0.3, -1.2, 0.5]);
        let rep = closed_form_marginals(&x0, &sch, &b, 0.7, COMPONENT_CAP).unwrap();
        assert_eq!(rep.steps.len(), 5);
        assert!(rep.max_mean_err() < 1e-12, "{}", rep.max_mean_err());
        assert!(rep.max_cov_err() < 1e-12, "{}", rep.max_cov_err());
    }

    #[test]
    fn closed_form_mixture_kernels_match_targets() {
        for (scheme, k, s) in [
            (KernelScheme::Ortho, 2, 1.0),
            (KernelScheme::Rand, 4, 10.0),
            (KernelScheme::OrthoVub, 8, 0.1),
        ] {
            let sch = schedule(80, 3);
            let b = bank(scheme, 8, k, s, 3, 5);
            let x0 = DVector::from_fn(8, |j, _| 0.1 * j as f64 - 0.3);
            let rep = closed_form_marginals(&x0, &sch, &b, 1.0, COMPONENT_CAP).unwrap();
            assert!(
                rep.max_mean_err() < 1e-10 * s.max(1.0),
                "{scheme:?} mean {}",
                rep.max_mean_err()
            );
            assert!(
                rep.max_cov_err() < 1e-9 * (s * s).max(1.0),
                "{scheme:?} cov {}",
                rep.max_cov_err()
            );
        }
    }

    #[test]
    fn closed_form_component_counts_and_cap() {
        let sch = schedule(80, 4);
        let b = bank(KernelScheme::Ortho, 8, 8, 1.0, 4, 2);
        let x0 = DVector::zeros(8);
        let rep = closed_form_marginals(&x0, &sch, &b, 1.0, COMPONENT_CAP).unwrap();
        assert_eq!(rep.components, 8 * 8 * 8);
        let sch8 = schedule(80, 8);
        let b8 = bank(KernelScheme::Ortho, 8, 4, 1.0, 8, 3);
        let err = closed_form_marginals(&x0, &sch8, &b8, 1.0, COMPONENT_CAP);
        assert!(matches!(err, Err(LabError::ComponentCapExceeded { .. })));
    }

    #[test]
    fn monte_carlo_full_cov_within_noise_of_targets() {
        // Small scale keeps sigma^2 I - Delta positive semidefinite at every
        // step so the exact kernel is realizable.
        let sch = schedule(100, 3);
        let b = bank(KernelScheme::Ortho, 2, 2, 0.05, 3, 7);
        let x0 = DVector::from_vec(vec![0.8, -0.4]);
        let f = StreamFactory::new(21);
        let rep =
            monte_carlo_marginals(&x0, &sch, &b, 1.0, McVariant::FullCov, 40_000, &f).unwrap();
        assert_eq!(rep.steps.len(), 2);
        assert!(rep.max_abs_z() < 3.0, "z {}", rep.max_abs_z());
        // And it agrees with the closed form, whose errors are ~0.
        let cf = closed_form_marginals(&x0, &sch, &b, 1.0, COMPONENT_CAP).unwrap();
        assert!(cf.max_mean_err() < 1e-12);
    }

    #[test]
    fn monte_carlo_clipped_variants_report_gap() {
        // Large offsets relative to sigma: the clipped approximations lose
        // variance and the covariance z-score must flag it.
        let sch = schedule(100, 3);
        let x0 = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let f = StreamFactory::new(22);
        let diag = bank(KernelScheme::Ortho, 3, 2, 2.0, 3, 8);
        let rep =
            monte_carlo_marginals(&x0, &sch, &diag, 1.0, McVariant::DiagApprox, 20_000, &f)
                .unwrap();
        assert!(rep.steps.iter().any(|s| s.cov_z.unwrap() > 3.0));
        let vub = bank(KernelScheme::OrthoVub, 3, 2, 2.0, 3, 9);
        let rep =
            monte_carlo_marginals(&x0, &sch, &vub, 1.0, McVariant::VubClipped, 20_000, &f)
                .unwrap();
        assert!(rep.steps.iter().any(|s| s.cov_z.unwrap() > 3.0));
    }

    #[test]
    fn monte_carlo_variant_guards() {
        let sch = schedule(100, 3);
        let f = StreamFactory::new(23);
        let x0 = DVector::zeros(3);
        let vub = bank(KernelScheme::OrthoVub, 3, 2, 1.0, 3, 10);
        assert!(matches!(
            monte_carlo_marginals(&x0, &sch, &vub, 1.0, McVariant::DiagApprox, 100, &f),
            Err(LabError::InvalidParameter { .. })
        ));
        let rand = bank(KernelScheme::Rand, 3, 2, 1.0, 3, 11);
        assert!(matches!(
            monte_carlo_marginals(&x0, &sch, &rand, 1.0, McVariant::VubClipped, 100, &f),
            Err(LabError::InvalidParameter { .. })
        ));
        // Unrealizable exact kernel: sigma^2 far below the offsets.
        let big = bank(KernelScheme::Ortho, 3, 2, 10.0, 3, 12);
        assert!(matches!(
            monte_carlo_marginals(&x0, &sch, &big, 1.0, McVariant::FullCov, 100, &f),
            Err(LabError::NotPositiveSemidefinite(_))
        ));
    }

    #[test]
    fn elbo_weight_hand_formulas() {
        let sch = schedule(60, 4);
        let b = bank(KernelScheme::Ortho, 4, 2, 0.05, 4, 13);
        let rep = elbo_weights(&sch, &b, 1.0, 0.1).unwrap();
        assert_eq!(rep.steps.len(), 3);
        assert!(!rep.degenerate);
        for step in &rep.steps {
            // Brute-force recomputation of the weight from the nu vector.
            let params = b.at(step.step_idx);
            let mut inv_sum = 0.0;
            for (pi, nu) in params.priors().iter().zip(&step.nu) {
                inv_sum += pi / nu;
            }
            let a = sch.alpha_cum(step.t);
            let expect = inv_sum * (1.0 - a) / (2.0 * a);
            assert_relative_eq!(step.weight, expect, max_relative = 1e-12);
            assert!(step.weight > 0.0);
        }
        // K2 coefficient.
        let a1 = sch.alpha_cum(sch.tau()[0]);
        assert_relative_eq!(rep.k2, (1.0 - a1) / (2.0 * 0.1f64 * 0.1 * a1), max_relative = 1e-14);
    }

    #[test]
    fn elbo_single_component_recovers_standard_weight() {
        // K = 1, zero offsets: nu = sigma_t^2, the classical weight.
        let sch = schedule(60, 4);
        let b = bank(KernelScheme::Ortho, 3, 1, 5.0, 4, 14);
        let rep = elbo_weights(&sch, &b, 0.8, 0.1).unwrap();
        for step in &rep.steps {
            let sigma = sch.sigma_for_step(step.step_idx, 0.8).unwrap();
            let a = sch.alpha_cum(step.t);
            assert_relative_eq!(
                step.weight,
                (1.0 - a) / (2.0 * sigma * sigma * a),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn elbo_weight_monotone_in_nu() {
        // Shrinking any nu strictly increases the weight.
        let nu = [0.3, 0.5];
        let pi = [0.5, 0.5];
        let base: f64 = pi.iter().zip(&nu).map(|(p, n)| p / n).sum();
        for j in 0..2 {
            let mut smaller = nu;
            smaller[j] *= 0.5;
            let bigger: f64 = pi.iter().zip(&smaller).map(|(p, n)| p / n).sum();
            assert!(bigger > base);
        }
    }

    #[test]
    fn elbo_degenerate_at_deterministic_steps() {
        // eta = 0 clips every variance to zero; weights stay finite at the
        // floor and the report is flagged.
        let sch = schedule(60, 3);
        let b = bank(KernelScheme::Ortho, 3, 2, 1.0, 3, 15);
        let rep = elbo_weights(&sch, &b, 0.0, 0.1).unwrap();
        assert!(rep.degenerate);
        for step in &rep.steps {
            assert!(step.weight.is_finite());
            for nu in &step.nu {
                assert_eq!(*nu, NU_FLOOR);
            }
        }
    }

    #[test]
    fn elbo_bound_evaluates_on_samples() {
        let sch = schedule(60, 3);
        let b = bank(KernelScheme::Ortho, 2, 2, 0.05, 3, 16);
        let data = DataDistribution::Mixture(data::standard_normal(2));
        let den = ExactDenoiser::new(data.clone(), sch.clone()).unwrap();
        let f = StreamFactory::new(24);
        let mut rng = f.rng(&[role::DATA, 0]);
        let x0s = data.sample(64, &mut rng);
        let eval =
            evaluate_elbo_bound(&sch, &b, 1.0, 0.1, &den, &x0s, &f, COMPONENT_CAP).unwrap();
        assert!(eval.value.is_finite() && eval.value > 0.0, "{}", eval.value);
        assert_eq!(eval.clamped_components, 0);
    }

    #[test]
    fn posterior_symmetric_points_single_kernel() {
        let sch = schedule(60, 4);
        let a = DVector::from_vec(vec![1.5]);
        let cloud = PointCloud::uniform(vec![a.clone(), -a.clone()]).unwrap();
        let data = DataDistribution::Points(cloud);
        let params = GmmKernelParams::from_parts(0.0, vec![1.0], vec![DVector::zeros(1)]).unwrap();
        let x_t = DVector::zeros(1);
        let post = exact_denoising_posterior(&data, &sch, &params, 2, 1.0, &x_t).unwrap();
        assert_eq!(post.len(), 2);
        assert_relative_eq!(post.weights()[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(post.weights()[1], 0.5, max_relative = 1e-12);
        assert_abs_diff_eq!(
            post.component(0).mean()[0],
            -post.component(1).mean()[0],
            epsilon = 1e-12
        );
    }

    #[test]
    fn posterior_single_point_matches_transition_mean() {
        let sch = schedule(60, 4);
        let p = DVector::from_vec(vec![0.7, -0.2]);
        let data = DataDistribution::Points(PointCloud::uniform(vec![p.clone()]).unwrap());
        let params = GmmKernelParams::from_parts(0.0, vec![1.0], vec![DVector::zeros(2)]).unwrap();
        let x_t = DVector::from_vec(vec![0.3, 0.9]);
        let post = exact_denoising_posterior(&data, &sch, &params, 3, 0.5, &x_t).unwrap();
        assert_eq!(post.len(), 1);
        let co = transition_coeffs(&sch, 3, 0.5).unwrap();
        let expect = &p * co.x0_coef + &x_t * co.xt_coef;
        assert_relative_eq!((post.component(0).mean() - expect).amax(), 0.0, epsilon = 1e-13);
        // Covariance is the plain sigma^2 I.
        assert_relative_eq!(
            post.component(0).cov()[(0, 0)],
            co.sigma * co.sigma,
            max_relative = 1e-13
        );
    }

    #[test]
    fn posterior_matches_quadrature_point_cloud() {
        // Two points, two kernel components in 1-D via hand-built offsets;
        // the posterior density must match direct Bayes quadrature.
        let sch = schedule(60, 3);
        let pts = vec![DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0])];
        let data = DataDistribution::Points(PointCloud::uniform(pts.clone()).unwrap());
        let s = 0.05;
        let params = GmmKernelParams::from_parts(
            s,
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![s]), DVector::from_vec(vec![-s])],
        )
        .unwrap();
        let x_t = DVector::from_vec(vec![0.4]);
        let idx = 2;
        let post = exact_denoising_posterior(&data, &sch, &params, idx, 1.0, &x_t).unwrap();
        assert_eq!(post.len(), 4);
        let total: f64 = post.weights().iter().sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-12);
        // Oracle: mixture over points of kernel densities, weighted by the
        // noisy-likelihood responsibilities, evaluated directly.
        let co = transition_coeffs(&sch, idx, 1.0).unwrap();
        let a = co.a_cur;
        let lik = |p: &DVector<f64>| {
            let d = x_t[0] - a.sqrt() * p[0];
            (-d * d / (2.0 * (1.0 - a))).exp()
        };
        let z: f64 = pts.iter().map(|p| lik(p)).sum();
        let sigma_sq = co.sigma * co.sigma;
        let delta_sq = s * s; // full Delta for these offsets is s^2 in 1-D
        for x_prev in [-1.2, -0.3, 0.1, 0.8, 1.4] {
            let mut oracle = 0.0;
            for p in &pts {
                let r = lik(p) / z;
                for (pi, dl) in [(0.5, s), (0.5, -s)] {
                    let mean = co.x0_coef * p[0] + co.xt_coef * x_t[0] + dl;
                    let var = sigma_sq - delta_sq;
                    let diff = x_prev - mean;
                    oracle += r * pi * (-diff * diff / (2.0 * var)).exp()
                        / (2.0 * std::f64::consts::PI * var).sqrt();
                }
            }
            let got = post.log_density(&DVector::from_vec(vec![x_prev])).exp();
            assert_relative_eq!(got, oracle, max_relative = 1e-10);
        }
    }

    #[test]
    fn posterior_matches_quadrature_mixture_data() {
        // Gaussian-mixture data: the (i, k) closed form must agree with
        // numerical integration of kernel x posterior over x0.
        let sch = schedule(60, 3);
        let mix = MixtureDistribution::isotropic(
            vec![DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.5])],
            0.05,
            None,
        )
        .unwrap();
        let data = DataDistribution::Mixture(mix);
        let s = 0.04;
        let params = GmmKernelParams::from_parts(
            s,
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![s]), DVector::from_vec(vec![-s])],
        )
        .unwrap();
        let x_t = DVector::from_vec(vec![0.2]);
        let idx = 2;
        let eta = 1.0;
        let post = exact_denoising_posterior(&data, &sch, &params, idx, eta, &x_t).unwrap();
        let co = transition_coeffs(&sch, idx, eta).unwrap();
        let den = ExactDenoiser::new(data.clone(), sch.clone()).unwrap();
        let x0_post = den.posterior_x0(&x_t, co.t_cur).unwrap();
        let sigma_sq = co.sigma * co.sigma;
        let var_k = sigma_sq - s * s;
        // Quadrature over x0 on a wide grid.
        let (lo, hi, n) = (-4.0, 4.0, 16_000);
        let h = (hi - lo) / n as f64;
        for x_prev in [-0.8, 0.0, 0.6, 1.2] {
            let mut integral = 0.0;
            for g in 0..=n {
                let x0 = lo + g as f64 * h;
                // Posterior density of x0 given x_t.
                let mut px0 = 0.0;
                for ((w, m), v) in x0_post
                    .weights
                    .iter()
                    .zip(&x0_post.means)
                    .zip(&x0_post.covs)
                {
                    let vv = v[(0, 0)];
                    let d = x0 - m[0];
                    px0 += w * (-d * d / (2.0 * vv)).exp()
                        / (2.0 * std::f64::consts::PI * vv).sqrt();
                }
                // Kernel density of x_prev given x0.
                let mut pk = 0.0;
                for (pi, dl) in [(0.5, s), (0.5, -s)] {
                    let mean = co.x0_coef * x0 + co.xt_coef * x_t[0] + dl;
                    let d = x_prev - mean;
                    pk += pi * (-d * d / (2.0 * var_k)).exp()
                        / (2.0 * std::f64::consts::PI * var_k).sqrt();
                }
                let w = if g == 0 || g == n { 0.5 } else { 1.0 };
                integral += w * px0 * pk * h;
            }
            let got = post.log_density(&DVector::from_vec(vec![x_prev])).exp();
            assert_relative_eq!(got, integral, max_relative = 1e-4);
        }
    }

    #[test]
    fn forward_conditional_single_component_is_quadratic() {
        let sch = schedule(60, 3);
        let b = bank(KernelScheme::Ortho, 2, 1, 1.0, 3, 17);
        let x0 = DVector::from_vec(vec![0.5, -0.5]);
        let x_prev = DVector::from_vec(vec![0.2, 0.1]);
        let dir = DVector::from_vec(vec![0.6, -0.8]);
        let base = DVector::from_vec(vec![-0.1, 0.4]);
        let f = |u: f64| {
            forward_conditional_logdensity(
                &x0,
                &sch,
                &b,
                1.0,
                2,
                &(&base + &dir * u),
                &x_prev,
                COMPONENT_CAP,
            )
            .unwrap()
        };
        // Constant second differences along the line.
        let h = 0.05;
        let mut second = Vec::new();
        for g in -10..=10 {
            let u = g as f64 * h;
            second.push(f(u + h) - 2.0 * f(u) + f(u - h));
        }
        let spread = second.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - second.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-8, "second-difference spread {spread}");
    }

    #[test]
    fn forward_conditional_mixture_is_not_quadratic() {
        let sch = schedule(60, 3);
        // Offsets comparable to sigma: a small s hides the mixture terms in
        // their locally-quadratic regime.
        let s = 0.9 * sch.sigma_for_step(2, 1.0).unwrap();
        let params = GmmKernelParams::from_parts(
            s,
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![s]), DVector::from_vec(vec![-s])],
        )
        .unwrap();
        let b = KernelBank::from_single(params);
        let x0 = DVector::from_vec(vec![0.3]);
        let x_prev = DVector::from_vec(vec![0.1]);
        let f = |u: f64| {
            forward_conditional_logdensity(
                &x0,
                &sch,
                &b,
                1.0,
                2,
                &DVector::from_vec(vec![u]),
                &x_prev,
                COMPONENT_CAP,
            )
            .unwrap()
        };
        let h = 0.1;
        let mut second = Vec::new();
        for g in -15..=15 {
            let u = g as f64 * h;
            second.push(f(u + h) - 2.0 * f(u) + f(u - h));
        }
        let spread = second.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - second.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread > 1e-6, "unexpectedly quadratic: spread {spread}");
    }

    #[test]
    fn forward_conditional_normalizes_over_x_t() {
        let sch = schedule(60, 3);
        let s = 0.05;
        let params = GmmKernelParams::from_parts(
            s,
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![s]), DVector::from_vec(vec![-s])],
        )
        .unwrap();
        let b = KernelBank::from_single(params);
        let x0 = DVector::from_vec(vec![0.4]);
        let x_prev = DVector::from_vec(vec![-0.2]);
        let (lo, hi, n) = (-10.0, 10.0, 40_000);
        let h = (hi - lo) / n as f64;
        let mut integral = 0.0;
        for g in 0..=n {
            let u = lo + g as f64 * h;
            let ld = forward_conditional_logdensity(
                &x0,
                &sch,
                &b,
                1.0,
                1,
                &DVector::from_vec(vec![u]),
                &x_prev,
                COMPONENT_CAP,
            )
            .unwrap();
            let w = if g == 0 || g == n { 0.5 } else { 1.0 };
            integral += w * ld.exp() * h;
        }
        assert_relative_eq!(integral, 1.0, max_relative = 1e-4);
    }

    #[test]
    fn fd_gradient_matches_analytic_quadratic() {
        let f = |x: &DVector<f64>| 0.5 * x.norm_squared() + x[0] * 2.0;
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let g = fd_gradient(f, &x, 1e-5);
        assert_relative_eq!(g[0], x[0] + 2.0, max_relative = 1e-8);
        assert_relative_eq!(g[1], x[1], max_relative = 1e-7);
    }

    #[test]
    fn rand_constructor_kernels_certify_too() {
        // The certification path exercised end to end on a rand-scheme bank.
        let sch = schedule(100, 3);
        let mut rng = StreamFactory::new(30).rng(&[role::KERNEL, 0]);
        let params = make_rand(4, 4, 0.05, &[0.25; 4], &mut rng).unwrap();
        let b = KernelBank::from_single(params);
        let x0 = DVector::from_vec(vec![0.1, 0.2, -0.4, 0.0]);
        let cf = closed_form_marginals(&x0, &sch, &b, 1.0, COMPONENT_CAP).unwrap();
        assert!(cf.max_mean_err() < 1e-12);
        let f = StreamFactory::new(31);
        let mc =
            monte_carlo_marginals(&x0, &sch, &b, 1.0, McVariant::FullCov, 30_000, &f).unwrap();
        assert!(mc.max_abs_z() < 3.0, "z {}", mc.max_abs_z());
    }

    #[test]
    fn vub_and_ortho_constructor_smoke() {
        let mut rng = StreamFactory::new(32).rng(&[role::KERNEL, 0]);
        let p1 = make_ortho(4, 2, 0.1, &[0.5, 0.5], &mut rng).unwrap();
        let p2 = make_ortho_vub(4, 2, 0.1, &[0.5, 0.5], &mut rng).unwrap();
        assert!(p1.validate().passes(1e-8));
        assert!(p2.validate().passes(1e-8));
    }
}
