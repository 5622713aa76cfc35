//! Mixture-kernel parameter construction.
//!
//! A K-component mixture transition kernel replaces the single Gaussian DDIM
//! kernel while preserving its first two moments. Component k gets a mean
//! offset `delta_k` and a covariance reduction `Delta_k`, constrained by
//!
//! ```text
//! sum_k pi_k delta_k = 0,
//! Delta_k = (1 / (K pi_k)) sum_l pi_l delta_l delta_l^T,
//! ```
//!
//! so the mixture's mean and covariance match the plain kernel exactly.
//! Three constructions:
//!
//! * `rand`: centered standard-normal columns rescaled to norm `s`. Rescaling
//!   breaks the weighted-mean constraint for K >= 3, so the construction
//!   alternates centering and rescaling to a fixed point satisfying both.
//!   Feasible only when every prior is at most 1/2 (a norm-s solution with
//!   zero weighted mean cannot exist otherwise).
//! * `ortho`: offsets `s (u_k - u_bar)` from an orthonormal basis of a random
//!   D x K matrix (QR factorization). Offset norms vary by component here;
//!   only the weighted mean constraint is enforced by construction.
//! * `ortho_vub`: same offsets as `ortho`, but the sampler never materializes
//!   `Delta_k`; instead each of the K rotated directions carries an eigenvalue
//!   upper bound, and the per-direction variance reduction uses the bound.
//!
//! For `ortho`-family parameters, `Delta_k` in the basis frame is
//! `(s^2/(K pi_k)) (diag(pi) - pi pi^T)`, a diagonal matrix minus a rank-one
//! downdate, so its eigenvalues interlace the sorted priors. With priors
//! sorted ascending, eigenvalue i of the K nonzero spectrum lies in
//! `[pi_(i-1), pi_(i)]` (scaled), and the smallest lies in
//! `[pi_(1) - sum pi^2, pi_(1)]` (scaled). The bounds in `cov_diag_offsets`
//! are the upper endpoints, one per rotated direction in ascending order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{LabError, Result};
use crate::stream::{role, StreamFactory};

const CONSTRAINT_TOL: f64 = 1e-13;
const MAX_FIXED_POINT_ITERS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelScheme {
    Rand,
    Ortho,
    OrthoVub,
}

impl KernelScheme {
    pub fn name(&self) -> &'static str {
        match self {
            KernelScheme::Rand => "rand",
            KernelScheme::Ortho => "ortho",
            KernelScheme::OrthoVub => "ortho_vub",
        }
    }
}

/// Parameters of one step's mixture kernel.
#[derive(Debug, Clone)]
pub struct GmmKernelParams {
    scheme: KernelScheme,
    scale: f64,
    priors: Vec<f64>,
    deltas: Vec<DVector<f64>>,
    /// Per-component variance reductions. Standard-basis diagonal of
    /// `Delta_k` for `rand`/`ortho`; rotated-frame eigenvalue upper bounds in
    /// the first K entries for `ortho_vub`.
    cov_diag_offsets: Vec<DVector<f64>>,
    /// Orthonormal D x K basis for `ortho`/`ortho_vub`.
    basis: Option<DMatrix<f64>>,
}

impl GmmKernelParams {
    /// Hand-built parameters from explicit offsets; diagonal covariance
    /// offsets are derived from the offsets. Constraints are not enforced
    /// here — `validate` reports them — which permits deliberately
    /// infeasible sets in tests.
    pub fn from_parts(
        scale: f64,
        priors: Vec<f64>,
        deltas: Vec<DVector<f64>>,
    ) -> Result<GmmKernelParams> {
        if priors.is_empty() || priors.len() != deltas.len() {
            return Err(LabError::DimensionMismatch {
                expected: priors.len(),
                got: deltas.len(),
            });
        }
        let d = deltas[0].len();
        if deltas.iter().any(|dl| dl.len() != d) {
            return Err(LabError::InvalidParameter {
                field: "kernel.deltas",
                message: "offset dimensions differ".into(),
            });
        }
        let cov_diag_offsets = diag_offsets(&priors, &deltas);
        Ok(GmmKernelParams {
            scheme: KernelScheme::Rand,
            scale,
            priors,
            deltas,
            cov_diag_offsets,
            basis: None,
        })
    }

    pub fn scheme(&self) -> KernelScheme {
        self.scheme
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn components(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.deltas[0].len()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn delta(&self, k: usize) -> &DVector<f64> {
        &self.deltas[k]
    }

    pub fn cov_diag_offsets(&self, k: usize) -> &DVector<f64> {
        &self.cov_diag_offsets[k]
    }

    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        self.basis.as_ref()
    }

    /// Materializes the exact covariance offset
    /// `Delta_k = (1/(K pi_k)) sum_l pi_l delta_l delta_l^T`.
    pub fn full_delta(&self, k: usize) -> DMatrix<f64> {
        let d = self.dim();
        let mut acc = DMatrix::zeros(d, d);
        for (pi, delta) in self.priors.iter().zip(&self.deltas) {
            acc += delta * delta.transpose() * *pi;
        }
        acc / (self.components() as f64 * self.priors[k])
    }

    /// Eigenvalue brackets for the K nonzero-spectrum directions of
    /// `Delta_k`, ascending. Only meaningful for `ortho`-family parameters
    /// (the derivation uses orthonormality of the basis).
    pub fn eigenvalue_brackets(&self, k: usize) -> Result<Vec<(f64, f64)>> {
        if self.scheme == KernelScheme::Rand {
            return Err(LabError::InvalidParameter {
                field: "kernel.scheme",
                message: "eigenvalue brackets require an orthonormal-basis construction".into(),
            });
        }
        Ok(vub_brackets(&self.priors, self.scale, k))
    }

    /// Per-component clipped noise variances at a given `sigma^2`, plus the
    /// number of clipped coordinates. Entry j of component k is
    /// `max(0, sigma^2 - offset_kj)` in the component's own frame
    /// (standard basis, or rotated basis for `ortho_vub`).
    pub fn clipped_variances(&self, sigma_sq: f64) -> (Vec<DVector<f64>>, usize) {
        let mut clipped = 0usize;
        let vars = self
            .cov_diag_offsets
            .iter()
            .map(|off| {
                DVector::from_fn(off.len(), |j, _| {
                    let v = sigma_sq - off[j];
                    if v < 0.0 {
                        clipped += 1;
                        0.0
                    } else {
                        v
                    }
                })
            })
            .collect();
        (vars, clipped)
    }

    /// Residuals of the moment constraints and construction identities; all
    /// should be below ~1e-8 for a valid parameter set.
    pub fn validate(&self) -> ConstraintReport {
        let kk = self.components();
        let d = self.dim();
        // Weighted mean of offsets.
        let mut mean = DVector::zeros(d);
        for (pi, delta) in self.priors.iter().zip(&self.deltas) {
            mean += delta * *pi;
        }
        let mean_residual = mean.amax();
        // Offset norms (rand only promises norm s).
        let norm_residual = match self.scheme {
            KernelScheme::Rand if kk > 1 => Some(
                self.deltas
                    .iter()
                    .map(|dl| (dl.norm() - self.scale).abs())
                    .fold(0.0, f64::max),
            ),
            _ => None,
        };
        // Stored diagonal offsets vs the materialized Delta.
        let mut offset_residual = 0.0f64;
        let mut bracket_violations = 0usize;
        let mut trace_residual = 0.0f64;
        for k in 0..kk {
            let full = self.full_delta(k);
            match self.scheme {
                KernelScheme::Rand | KernelScheme::Ortho => {
                    for j in 0..d {
                        offset_residual =
                            offset_residual.max((full[(j, j)] - self.cov_diag_offsets[k][j]).abs());
                    }
                }
                KernelScheme::OrthoVub => {
                    // Ascending nonzero-spectrum eigenvalues vs brackets, and
                    // bound dominance.
                    let mut eigs: Vec<f64> =
                        full.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
                    eigs.sort_by(f64::total_cmp);
                    let top_k = &eigs[d - kk..];
                    let brackets = vub_brackets(&self.priors, self.scale, k);
                    for (i, (&eig, &(lo, hi))) in top_k.iter().zip(&brackets).enumerate() {
                        if eig < lo - 1e-8 || eig > hi + 1e-8 {
                            bracket_violations += 1;
                        }
                        let bound = self.cov_diag_offsets[k][i];
                        if eig > bound + 1e-8 {
                            bracket_violations += 1;
                        }
                    }
                    for &eig in &eigs[..d - kk] {
                        if eig.abs() > 1e-8 {
                            bracket_violations += 1;
                        }
                    }
                }
            }
            // trace(Delta_k) = (s^2/(K pi_k)) (1 - |u_bar|^2) for ortho-family;
            // for every scheme trace equals the weighted mean square norm scaled.
            let expected_trace: f64 = self
                .priors
                .iter()
                .zip(&self.deltas)
                .map(|(pi, dl)| pi * dl.norm_squared())
                .sum::<f64>()
                / (kk as f64 * self.priors[k]);
            trace_residual = trace_residual.max((full.trace() - expected_trace).abs());
        }
        ConstraintReport {
            mean_residual,
            norm_residual,
            offset_residual,
            trace_residual,
            bracket_violations,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConstraintReport {
    /// Infinity norm of `sum_k pi_k delta_k`.
    pub mean_residual: f64,
    /// Max deviation of offset norms from the scale (`rand` only).
    pub norm_residual: Option<f64>,
    /// Max deviation of stored diagonal offsets from the materialized Delta.
    pub offset_residual: f64,
    /// Max deviation of trace(Delta_k) from its closed form.
    pub trace_residual: f64,
    /// Eigenvalues outside their brackets / above their bounds (`ortho_vub`).
    pub bracket_violations: usize,
}

impl ConstraintReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.mean_residual <= tol
            && self.norm_residual.map_or(true, |r| r <= tol)
            && self.offset_residual <= tol
            && self.trace_residual <= tol
            && self.bracket_violations == 0
    }
}

/// Eigenvalue brackets of `Delta_k` for ortho-family parameters: with priors
/// sorted ascending and `c = s^2/(K pi_k)`, the K-spectrum eigenvalues
/// (ascending) satisfy
/// `c (pi_(1) - sum pi^2) <= eig_1 <= c pi_(1)` and
/// `c pi_(i-1) <= eig_i <= c pi_(i)`.
pub fn vub_brackets(priors: &[f64], scale: f64, k: usize) -> Vec<(f64, f64)> {
    let kk = priors.len();
    let s2 = scale * scale;
    let mut sorted = priors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sum_sq: f64 = priors.iter().map(|p| p * p).sum();
    // Each endpoint is s^2 p / (K pi_k); forming the prior ratio first makes
    // the uniform-priors bounds land exactly on s^2 / K.
    let bound = |p: f64| s2 * (p / priors[k]) / kk as f64;
    let mut out = Vec::with_capacity(kk);
    out.push((bound(sorted[0] - sum_sq), bound(sorted[0])));
    for i in 1..kk {
        out.push((bound(sorted[i - 1]), bound(sorted[i])));
    }
    out
}

fn validate_spec(dim: usize, components: usize, scale: f64, priors: &[f64]) -> Result<()> {
    if components == 0 {
        return Err(LabError::InvalidParameter {
            field: "kernel.components",
            message: "must be at least 1".into(),
        });
    }
    if components > dim {
        return Err(LabError::InvalidParameter {
            field: "kernel.components",
            message: format!("{components} components exceed data dimension {dim}"),
        });
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(LabError::InvalidParameter {
            field: "kernel.scale",
            message: format!("{scale} must be finite and nonnegative"),
        });
    }
    if priors.len() != components {
        return Err(LabError::DimensionMismatch {
            expected: components,
            got: priors.len(),
        });
    }
    if priors.iter().any(|&p| p <= 0.0 || !p.is_finite()) {
        return Err(LabError::InvalidParameter {
            field: "kernel.priors",
            message: "priors must be positive".into(),
        });
    }
    let total: f64 = priors.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(LabError::InvalidParameter {
            field: "kernel.priors",
            message: format!("priors sum to {total}, expected 1"),
        });
    }
    Ok(())
}

fn weighted_mean(priors: &[f64], vecs: &[DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(vecs[0].len());
    for (pi, v) in priors.iter().zip(vecs) {
        m += v * *pi;
    }
    m
}

fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `rand` construction: centered, norm-`s` offsets with zero weighted mean.
pub fn make_rand(
    dim: usize,
    components: usize,
    scale: f64,
    priors: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<GmmKernelParams> {
    validate_spec(dim, components, scale, priors)?;
    if components == 1 || scale == 0.0 {
        // Centering annihilates a single column; zero scale kills all offsets.
        let deltas = vec![DVector::zeros(dim); components];
        return Ok(GmmKernelParams {
            scheme: KernelScheme::Rand,
            scale,
            priors: priors.to_vec(),
            cov_diag_offsets: vec![DVector::zeros(dim); components],
            deltas,
            basis: None,
        });
    }
    let max_prior = priors.iter().copied().fold(0.0, f64::max);
    if max_prior > 0.5 + 1e-12 {
        return Err(LabError::DegenerateDraw(format!(
            "equal-norm offsets with zero weighted mean are infeasible: max prior {max_prior} > 1/2"
        )));
    }
    for attempt in 0..2 {
        match rand_fixed_point(dim, components, scale, priors, rng) {
            Ok(deltas) => {
                let cov_diag_offsets = diag_offsets(priors, &deltas);
                return Ok(GmmKernelParams {
                    scheme: KernelScheme::Rand,
                    scale,
                    priors: priors.to_vec(),
                    deltas,
                    cov_diag_offsets,
                    basis: None,
                });
            }
            Err(e) if attempt == 0 => {
                // One redraw on a degenerate draw; a second failure is real.
                let _ = e;
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

fn rand_fixed_point(
    dim: usize,
    components: usize,
    scale: f64,
    priors: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DVector<f64>>> {
    let o = standard_normal_matrix(dim, components, rng);
    let mut deltas: Vec<DVector<f64>> = (0..components).map(|k| o.column(k).into_owned()).collect();
    let tiny = 1e-14 * scale.max(1.0);
    let tol = CONSTRAINT_TOL * scale.max(1.0);
    for _ in 0..MAX_FIXED_POINT_ITERS {
        let mean = weighted_mean(priors, &deltas);
        let mut max_norm_err = 0.0f64;
        for delta in deltas.iter_mut() {
            *delta -= &mean;
            let norm = delta.norm();
            if norm < tiny {
                return Err(LabError::DegenerateDraw(
                    "centered offset column has vanishing norm".into(),
                ));
            }
            max_norm_err = max_norm_err.max((norm - scale).abs());
            *delta *= scale / norm;
        }
        if mean.amax() <= tol && max_norm_err <= tol {
            return Ok(deltas);
        }
    }
    Err(LabError::DegenerateDraw(format!(
        "offset centering/rescaling did not converge in {MAX_FIXED_POINT_ITERS} iterations"
    )))
}

fn diag_offsets(priors: &[f64], deltas: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let kk = priors.len();
    let d = deltas[0].len();
    let mut pooled = DVector::zeros(d);
    for (pi, delta) in priors.iter().zip(deltas) {
        for j in 0..d {
            pooled[j] += pi * delta[j] * delta[j];
        }
    }
    (0..kk)
        .map(|k| &pooled / (kk as f64 * priors[k]))
        .collect()
}

fn ortho_deltas(
    dim: usize,
    components: usize,
    scale: f64,
    priors: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<DVector<f64>>, DMatrix<f64>)> {
    for _ in 0..2 {
        let o = standard_normal_matrix(dim, components, rng);
        let qr = o.clone().qr();
        let r = qr.r();
        let min_diag = (0..components)
            .map(|i| r[(i, i)].abs())
            .fold(f64::INFINITY, f64::min);
        if min_diag < 1e-10 {
            continue; // rank-deficient draw; retry once
        }
        let q = qr.q();
        let cols: Vec<DVector<f64>> = (0..components).map(|k| q.column(k).into_owned()).collect();
        let u_bar = weighted_mean(priors, &cols);
        let deltas = cols.iter().map(|u| (u - &u_bar) * scale).collect();
        return Ok((deltas, q));
    }
    Err(LabError::DegenerateDraw(
        "random matrix was rank deficient twice".into(),
    ))
}

/// `ortho` construction: offsets from an orthonormal basis, diagonal
/// covariance offsets in the standard basis.
pub fn make_ortho(
    dim: usize,
    components: usize,
    scale: f64,
    priors: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<GmmKernelParams> {
    validate_spec(dim, components, scale, priors)?;
    let (deltas, basis) = ortho_deltas(dim, components, scale, priors, rng)?;
    let cov_diag_offsets = diag_offsets(priors, &deltas);
    Ok(GmmKernelParams {
        scheme: KernelScheme::Ortho,
        scale,
        priors: priors.to_vec(),
        deltas,
        cov_diag_offsets,
        basis: Some(basis),
    })
}

/// `ortho_vub` construction: ortho offsets plus rotated-frame eigenvalue
/// upper bounds as the variance reductions.
pub fn make_ortho_vub(
    dim: usize,
    components: usize,
    scale: f64,
    priors: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<GmmKernelParams> {
    validate_spec(dim, components, scale, priors)?;
    let (deltas, basis) = ortho_deltas(dim, components, scale, priors, rng)?;
    // K = 1 forces delta = 0 and hence a zero spectrum; storing the exact
    // zeros (rather than the loose bound s^2) keeps the single-component
    // kernel bitwise inert, like the other schemes.
    let cov_diag_offsets = (0..components)
        .map(|k| {
            if components == 1 {
                return DVector::zeros(dim);
            }
            let brackets = vub_brackets(priors, scale, k);
            DVector::from_fn(dim, |j, _| if j < components { brackets[j].1 } else { 0.0 })
        })
        .collect();
    Ok(GmmKernelParams {
        scheme: KernelScheme::OrthoVub,
        scale,
        priors: priors.to_vec(),
        deltas,
        cov_diag_offsets,
        basis: Some(basis),
    })
}

/// Bank-level kernel description, as read from config.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSpec {
    pub scheme: KernelScheme,
    pub components: usize,
    pub scale: f64,
    /// Uniform if absent.
    pub priors: Option<Vec<f64>>,
    pub share_across_steps: bool,
}

/// Kernel parameters for every reverse transition of a run.
#[derive(Debug, Clone)]
pub struct KernelBank {
    entries: Vec<GmmKernelParams>,
    shared: bool,
}

impl KernelBank {
    /// One parameter set per step slot (or a single shared set). Slot i
    /// corresponds to the transition out of `tau[i]`; slot 0 is never used by
    /// samplers (the final transition is plain) but is constructed anyway so
    /// slot indexing matches step indexing.
    pub fn build(
        spec: &BankSpec,
        dim: usize,
        steps: usize,
        factory: &StreamFactory,
    ) -> Result<KernelBank> {
        let priors = match &spec.priors {
            Some(p) => p.clone(),
            None => vec![1.0 / spec.components as f64; spec.components],
        };
        let slots = if spec.share_across_steps { 1 } else { steps };
        let mut entries = Vec::with_capacity(slots);
        for slot in 0..slots {
            let mut rng = factory.rng(&[role::KERNEL, slot as u64]);
            let params = match spec.scheme {
                KernelScheme::Rand => {
                    make_rand(dim, spec.components, spec.scale, &priors, &mut rng)?
                }
                KernelScheme::Ortho => {
                    make_ortho(dim, spec.components, spec.scale, &priors, &mut rng)?
                }
                KernelScheme::OrthoVub => {
                    make_ortho_vub(dim, spec.components, spec.scale, &priors, &mut rng)?
                }
            };
            entries.push(params);
        }
        Ok(KernelBank {
            entries,
            shared: spec.share_across_steps,
        })
    }

    pub fn from_single(params: GmmKernelParams) -> KernelBank {
        KernelBank {
            entries: vec![params],
            shared: true,
        }
    }

    pub fn shared(&self) -> bool {
        self.shared
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn at(&self, step_idx: usize) -> &GmmKernelParams {
        if self.shared {
            &self.entries[0]
        } else {
            &self.entries[step_idx]
        }
    }
}
