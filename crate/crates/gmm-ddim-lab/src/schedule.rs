//! Noise schedule and reverse-step subsequences.
//!
//! A schedule holds the per-step noise rates `beta_t` for t = 1..=T and the
//! cumulative products `alpha_cum_t = prod_{i<=t} (1 - beta_i)`, plus the
//! subsequence `tau` of steps a sampler actually visits (the full range for
//! ancestral sampling). The virtual step t = 0 has `alpha_cum = 1` and is the
//! target of the final reverse transition.

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    total_steps: usize,
    betas: Vec<f64>,
    alphas_cum: Vec<f64>,
    tau: Vec<usize>,
}

impl Schedule {
    /// Linear schedule: `beta` interpolates from `beta_start` to `beta_end`
    /// inclusive over T steps (a single step uses `beta_start`). `tau` starts
    /// as the full range 1..=T.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
        if total_steps == 0 {
            return Err(LabError::InvalidParameter {
                field: "schedule.total_steps",
                message: "must be at least 1".into(),
            });
        }
        for (field, value) in [("schedule.beta_start", beta_start), ("schedule.beta_end", beta_end)] {
            if !(value > 0.0 && value < 1.0) {
                return Err(LabError::InvalidParameter {
                    field,
                    message: format!("{value} is outside (0, 1)"),
                });
            }
        }
        if beta_end < beta_start {
            return Err(LabError::InvalidParameter {
                field: "schedule.beta_end",
                message: format!("{beta_end} is below beta_start = {beta_start}"),
            });
        }
        let betas: Vec<f64> = if total_steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..total_steps)
                .map(|i| beta_start + span * i as f64 / (total_steps - 1) as f64)
                .collect()
        };
        let mut alphas_cum = Vec::with_capacity(total_steps);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alphas_cum.push(acc);
        }
        Ok(Schedule {
            total_steps,
            betas,
            alphas_cum,
            tau: (1..=total_steps).collect(),
        })
    }

    /// Evenly spaced subsequence of `count` steps: `tau_i = floor(1 + i*T/count)`
    /// for i = 0..count. Strictly increasing, starts at 1, ends at most T.
    pub fn with_substeps(&self, count: usize) -> Result<Schedule> {
        if count == 0 || count > self.total_steps {
            return Err(LabError::InvalidParameter {
                field: "sampler.steps",
                message: format!("{count} is outside 1..={}", self.total_steps),
            });
        }
        let mut tau: Vec<usize> = (0..count)
            .map(|i| 1 + i * self.total_steps / count)
            .collect();
        tau.dedup();
        debug_assert!(tau.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(*tau.last().unwrap() <= self.total_steps);
        Ok(Schedule {
            tau,
            ..self.clone()
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Number of reverse transitions a sampler performs (= |tau|; the last
    /// transition targets the virtual step 0).
    pub fn step_count(&self) -> usize {
        self.tau.len()
    }

    pub fn tau(&self) -> &[usize] {
        &self.tau
    }

    pub fn is_full_range(&self) -> bool {
        self.tau.len() == self.total_steps
    }

    /// `beta_t` for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative alpha at t, with the t = 0 convention `alpha_cum = 1`.
    pub fn alpha_cum(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cum[t - 1]
        }
    }

    /// Step in `tau` at position `idx`, and its predecessor (0 = virtual step).
    pub fn step_pair(&self, idx: usize) -> (usize, usize) {
        let cur = self.tau[idx];
        let prev = if idx == 0 { 0 } else { self.tau[idx - 1] };
        (cur, prev)
    }

    /// Stochasticity of the transition out of `tau[idx]`:
    /// `sigma = eta * sqrt((1-a_prev)/(1-a_cur)) * sqrt(1 - a_cur/a_prev)`.
    /// At idx = 0 the predecessor is the virtual step (alpha 1), so sigma = 0
    /// for every eta and the final transition is deterministic.
    pub fn sigma_for_step(&self, idx: usize, eta: f64) -> Result<f64> {
        if eta < 0.0 {
            return Err(LabError::InvalidParameter {
                field: "sampler.eta",
                message: format!("{eta} is negative"),
            });
        }
        let (cur, prev) = self.step_pair(idx);
        let a_cur = self.alpha_cum(cur);
        let a_prev = self.alpha_cum(prev);
        if a_cur >= a_prev {
            return Err(LabError::ScheduleOrder(format!(
                "alpha_cum({cur}) = {a_cur} >= alpha_cum({prev}) = {a_prev}"
            )));
        }
        Ok(eta * ((1.0 - a_prev) / (1.0 - a_cur)).sqrt() * (1.0 - a_cur / a_prev).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_step_cumulative_products() {
        let s = Schedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas, vec![0.1, 0.2]);
        assert_relative_eq!(s.alpha_cum(1), 0.9, max_relative = 1e-15);
        assert_relative_eq!(s.alpha_cum(2), 0.72, max_relative = 1e-15);
        assert_eq!(s.alpha_cum(0), 1.0);
    }

    #[test]
    fn single_step_schedule() {
        let s = Schedule::linear(1, 0.02, 0.02).unwrap();
        assert_eq!(s.betas, vec![0.02]);
        assert_relative_eq!(s.alpha_cum(1), 0.98, max_relative = 1e-15);
    }

    #[test]
    fn default_schedule_alphas_monotone_and_in_range() {
        let s = Schedule::linear(1000, 0.0015, 0.0195).unwrap();
        assert_relative_eq!(s.beta(1), 0.0015);
        assert_relative_eq!(s.beta(1000), 0.0195);
        for t in 1..=1000 {
            assert!(s.alpha_cum(t) > 0.0 && s.alpha_cum(t) < 1.0);
            assert!(s.alpha_cum(t) < s.alpha_cum(t - 1));
        }
    }

    #[test]
    fn substeps_even_spacing() {
        let s = Schedule::linear(1000, 0.0015, 0.0195).unwrap();
        let sub = s.with_substeps(10).unwrap();
        let expected: Vec<usize> = (0..10).map(|i| 1 + 100 * i).collect();
        assert_eq!(sub.tau(), &expected[..]);
        assert_eq!(sub.tau(), &[1, 101, 201, 301, 401, 501, 601, 701, 801, 901]);
    }

    #[test]
    fn substeps_tiny_cases() {
        let s = Schedule::linear(4, 0.1, 0.2).unwrap();
        assert_eq!(s.with_substeps(2).unwrap().tau(), &[1, 3]);
        assert_eq!(s.with_substeps(4).unwrap().tau(), &[1, 2, 3, 4]);
        assert!(s.with_substeps(0).is_err());
        assert!(s.with_substeps(5).is_err());
    }

    #[test]
    fn full_range_identity() {
        let s = Schedule::linear(1000, 0.0015, 0.0195).unwrap();
        let sub = s.with_substeps(1000).unwrap();
        assert_eq!(sub.tau(), s.tau());
        assert!(sub.is_full_range());
    }

    #[test]
    fn sigma_matches_hand_value() {
        // alpha_cum = [0.9, 0.72] with the two-step schedule above; the
        // transition 2 -> 1 at eta = 0.5 has
        // sigma = 0.5*sqrt(0.1/0.28)*sqrt(1-0.8) = 0.13363062095621217.
        let s = Schedule::linear(2, 0.1, 0.2).unwrap();
        let sigma = s.sigma_for_step(1, 0.5).unwrap();
        assert_relative_eq!(sigma, 0.13363062095621217, max_relative = 1e-13);
    }

    #[test]
    fn sigma_final_transition_is_zero_for_any_eta() {
        let s = Schedule::linear(2, 0.1, 0.2).unwrap();
        for eta in [0.0, 0.2, 0.5, 1.0] {
            assert_eq!(s.sigma_for_step(0, eta).unwrap(), 0.0);
        }
    }

    #[test]
    fn sigma_linear_in_eta() {
        let s = Schedule::linear(100, 0.001, 0.05).unwrap().with_substeps(10).unwrap();
        for idx in 1..s.step_count() {
            let base = s.sigma_for_step(idx, 1.0).unwrap();
            for eta in [0.0, 0.2, 0.5] {
                assert_relative_eq!(s.sigma_for_step(idx, eta).unwrap(), eta * base, max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn eta_one_recovers_ancestral_variance() {
        // For consecutive steps, sigma^2 at eta = 1 is the ancestral posterior
        // variance (1-a_{t-1})/(1-a_t) * beta_t.
        let s = Schedule::linear(50, 0.002, 0.04).unwrap();
        for idx in 1..50 {
            let t = idx + 1;
            let sigma = s.sigma_for_step(idx, 1.0).unwrap();
            let expect = (1.0 - s.alpha_cum(t - 1)) / (1.0 - s.alpha_cum(t)) * s.beta(t);
            assert_relative_eq!(sigma * sigma, expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(Schedule::linear(0, 0.1, 0.2).is_err());
        assert!(Schedule::linear(10, 0.0, 0.2).is_err());
        assert!(Schedule::linear(10, 0.1, 1.0).is_err());
        assert!(Schedule::linear(10, 0.3, 0.2).is_err());
        let s = Schedule::linear(10, 0.01, 0.05).unwrap();
        assert!(s.sigma_for_step(3, -0.1).is_err());
    }
}
