//! Continuous and discrete bridges sharing one time grid.

pub mod continuous;
pub mod discrete;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Horizon, noise scale, and step count shared by training and generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub horizon: f64,
    pub sigma: f64,
    pub steps: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            sigma: 0.2,
            steps: 50,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be > 0, got {}", self.horizon)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Uniform step size `h = T / steps`, also the clamp on `T - t`.
    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Grid time of step `k`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.step_size()
    }

    pub(crate) fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Range {
                what: "t",
                value: t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        Ok(())
    }

    /// `h / (T - t)` with `T - t` clamped below at one step. Ratios within
    /// rounding of 1 snap to exactly 1 so the final grid step is exact.
    pub fn step_ratio(&self, t: f64, h: f64) -> f64 {
        let remaining = (self.horizon - t).max(self.step_size());
        let r = h / remaining;
        if (r - 1.0).abs() <= 1e-9 {
            1.0
        } else {
            r
        }
    }

    /// Training times are drawn uniformly on `[0, T - h]`.
    pub fn max_train_time(&self) -> f64 {
        self.horizon - self.step_size()
    }
}

/// Sinusoidal time features: `sin`/`cos` of `t/T` at `width / 2` frequencies
/// spaced geometrically from 1 to 1000.
pub fn time_features(t: f64, horizon: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let tau = t / horizon;
    let mut out = Vec::with_capacity(width);
    for k in 0..half {
        let freq = if half > 1 {
            1000f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push((freq * tau).sin());
        out.push((freq * tau).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_step() {
        let c = BridgeConfig::default();
        assert_eq!(c.step_size(), 0.02);
        assert!(c.validate().is_ok());
        assert!(BridgeConfig { steps: 0, ..c }.validate().is_err());
        assert!(BridgeConfig { horizon: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn final_ratio_is_exactly_one() {
        for steps in [1, 3, 7, 50, 97] {
            let c = BridgeConfig {
                steps,
                horizon: 1.3,
                ..Default::default()
            };
            assert_eq!(c.step_ratio(c.time(steps - 1), c.step_size()), 1.0);
        }
    }

    #[test]
    fn time_feature_shape() {
        let f = time_features(0.0, 1.0, 16);
        assert_eq!(f.len(), 16);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 1.0);
    }
}
