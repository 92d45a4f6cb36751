//! Cosine-annealing learning-rate schedule with warm restarts: each cycle
//! decays from `eta_max` to `eta_min` along a half cosine, then restarts at
//! `eta_max` with the cycle length multiplied by `t_mult`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub eta_max: f64,
    pub eta_min: f64,
    /// First cycle length in epochs.
    pub t_0: f64,
    /// Cycle length multiplier applied at each restart.
    pub t_mult: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            eta_max: 1e-3,
            eta_min: 1e-6,
            t_0: 10.0,
            t_mult: 2.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_max.is_finite() && self.eta_min.is_finite()) {
            return Err(Error::Config("learning rates must be finite".into()));
        }
        if self.eta_min <= 0.0 || self.eta_max < self.eta_min {
            return Err(Error::Config(format!(
                "need 0 < eta_min <= eta_max, got eta_min={} eta_max={}",
                self.eta_min, self.eta_max
            )));
        }
        if self.t_0 <= 0.0 || self.t_mult < 1.0 {
            return Err(Error::Config(format!(
                "need t_0 > 0 and t_mult >= 1, got t_0={} t_mult={}",
                self.t_0, self.t_mult
            )));
        }
        Ok(())
    }
}

/// Learning rate within a single cycle:
/// `eta_min + (eta_max - eta_min) * (1 + cos(pi * t_cur / t_i)) / 2`.
/// `t_cur = 0` gives exactly `eta_max`; `t_cur = t_i` gives exactly `eta_min`.
pub fn cosine_lr(t_cur: f64, t_i: f64, sched: &ScheduleConfig) -> f64 {
    if t_cur <= 0.0 {
        return sched.eta_max;
    }
    if t_cur >= t_i {
        return sched.eta_min;
    }
    sched.eta_min
        + (sched.eta_max - sched.eta_min) * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos()) / 2.0
}

/// Learning rate at absolute `progress` epochs since the start of training.
/// Progress at or past a cycle boundary belongs to the next cycle, so the
/// rate snaps back to `eta_max` there.
pub fn lr_at(progress: f64, sched: &ScheduleConfig) -> f64 {
    let mut t = progress.max(0.0);
    let mut t_i = sched.t_0;
    while t >= t_i {
        t -= t_i;
        t_i *= sched.t_mult;
    }
    cosine_lr(t, t_i, sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cycle_endpoints_are_exact() {
        let s = ScheduleConfig::default();
        assert_eq!(cosine_lr(0.0, 10.0, &s), s.eta_max);
        assert_eq!(cosine_lr(10.0, 10.0, &s), s.eta_min);
        // Midpoint: exactly the average of the extremes.
        assert_abs_diff_eq!(
            cosine_lr(5.0, 10.0, &s),
            (s.eta_max + s.eta_min) / 2.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn restarts_double_the_cycle_length() {
        // t_0=10, t_mult=2: cycles cover [0,10), [10,30), [30,70).
        let s = ScheduleConfig::default();
        assert_eq!(lr_at(0.0, &s), s.eta_max);
        assert_eq!(lr_at(10.0, &s), s.eta_max);
        assert_eq!(lr_at(30.0, &s), s.eta_max);
        // Mid-cycle in the second cycle: t_cur=10 of t_i=20.
        assert_abs_diff_eq!(lr_at(20.0, &s), (s.eta_max + s.eta_min) / 2.0, epsilon = 1e-15);
        // Just before each restart the rate approaches eta_min.
        assert!(lr_at(9.999, &s) < lr_at(9.0, &s));
        assert!(lr_at(29.999, &s) < 2.0 * s.eta_min);
    }

    #[test]
    fn default_run_never_leaves_the_band() {
        let s = ScheduleConfig::default();
        for epoch in 0..39 {
            let lr = lr_at(epoch as f64, &s);
            assert!(lr >= s.eta_min && lr <= s.eta_max, "epoch {epoch}: {lr}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut s = ScheduleConfig::default();
        s.eta_min = 0.0;
        assert!(s.validate().is_err());
        let mut s = ScheduleConfig::default();
        s.t_mult = 0.5;
        assert!(s.validate().is_err());
        let mut s = ScheduleConfig::default();
        s.eta_max = 1e-7; // below eta_min
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn rate_stays_in_band_and_decays_within_a_cycle(
            t in 0.0f64..200.0,
            dt in 1e-6f64..1.0,
        ) {
            let s = ScheduleConfig::default();
            let lr = lr_at(t, &s);
            prop_assert!(lr >= s.eta_min && lr <= s.eta_max);

            // Monotone non-increasing within a cycle: compare only when both
            // points fall in the same cycle.
            let cycle = |mut x: f64| {
                let mut t_i = s.t_0;
                let mut k = 0;
                while x >= t_i {
                    x -= t_i;
                    t_i *= s.t_mult;
                    k += 1;
                }
                k
            };
            if cycle(t) == cycle(t + dt) {
                prop_assert!(lr_at(t + dt, &s) <= lr + 1e-15);
            }
        }
    }
}
