//! Sampling laboratory for diffusion reverse processes on synthetic targets.
//!
//! The lab pairs closed-form denoisers (the data distribution is a known
//! Gaussian mixture or point cloud, so the posterior mean of the clean sample
//! is exact) with three reverse-process families:
//!
//! * `ddpm`: ancestral sampling over the full schedule,
//! * `ddim`: the non-Markovian deterministic/stochastic family over a step
//!   subsequence, controlled by `eta`,
//! * `ddim_gmm`: DDIM whose per-step transition kernel is a K-component
//!   Gaussian mixture that matches the single-Gaussian kernel's first two
//!   moments, so the marginals of the sampled process are preserved.
//!
//! Everything is deterministic given a master seed: random draws come from
//! counter-derived substreams keyed by (chain, step, role), so parallel and
//! serial execution produce bitwise-identical output, and degenerate kernel
//! settings (K = 1 or zero offset scale) reproduce plain DDIM bitwise.
//!
//! Modules mirror the pipeline: [`schedule`] (noise schedule and step
//! subsequences), [`data`] (synthetic targets), [`denoiser`] (exact epsilon
//! predictors and guidance), [`kernel`] (mixture-kernel parameter
//! construction), [`sampler`] (the three samplers), [`verify`] (moment
//! oracles, bound accounting, posterior cross-checks), [`metrics`] (sample
//! quality), and [`run`] (config-driven sweep runner behind the CLI).

pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod run;
pub mod sampler;
pub mod schedule;
pub mod stream;
pub mod verify;

pub use error::{LabError, Result};
