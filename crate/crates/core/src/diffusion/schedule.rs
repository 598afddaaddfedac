//! Inference noise ladder and training noise distribution.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// Number of denoising steps `N`.
    pub steps: usize,
    pub sigma_max: f64,
    /// `σ_{N−1}`, the last non-zero level.
    pub sigma_min: f64,
    pub rho: f64,
    /// Training levels follow `ln σ ~ N(p_mean, p_std²)`.
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            steps: 5,
            sigma_max: 80.0,
            sigma_min: 0.002,
            rho: 7.0,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl NoiseSchedule {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    /// `σ_0 > … > σ_{N−1} > σ_N = 0`.
    pub fn sigmas(&self) -> Result<Vec<f64>> {
        schedule_sigmas(self.steps, self.sigma_max, self.sigma_min, self.rho)
    }

    pub fn sample_training_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let normal = Normal::new(self.p_mean, self.p_std).expect("finite std");
        normal.sample(rng).exp()
    }

    pub fn validate(&self) -> Result<()> {
        self.sigmas()?;
        if !(self.p_std > 0.0 && self.p_mean.is_finite()) {
            return Err(Error::Config("training noise needs finite mean and positive std".into()));
        }
        Ok(())
    }
}

/// `σ_i = (σ_0^{1/ρ} + i/(N−1) (σ_last^{1/ρ} − σ_0^{1/ρ}))^ρ` for `i < N`,
/// then `σ_N = 0`. Both endpoints are returned exactly as given.
pub fn schedule_sigmas(n: usize, sigma_0: f64, sigma_last: f64, rho: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("noise schedule needs N >= 2, got {n}")));
    }
    if !(sigma_0 > 0.0 && sigma_0.is_finite()) {
        return Err(Error::InvalidInput(format!("σ_0 must be positive, got {sigma_0}")));
    }
    if !(sigma_last > 0.0 && sigma_last < sigma_0) {
        return Err(Error::InvalidInput(format!(
            "σ_last must lie in (0, σ_0), got {sigma_last}"
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidInput(format!("ρ must be positive, got {rho}")));
    }
    let a = sigma_0.powf(1.0 / rho);
    let b = sigma_last.powf(1.0 / rho);
    let mut out: Vec<f64> = (0..n)
        .map(|i| (a + i as f64 / (n - 1) as f64 * (b - a)).powf(rho))
        .collect();
    out[0] = sigma_0;
    out[n - 1] = sigma_last;
    out.push(0.0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ladder() {
        let s = NoiseSchedule::default().sigmas().unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s[0], 80.0);
        assert_eq!(s[4], 0.002);
        assert_eq!(s[5], 0.0);
        // Extended-precision evaluation of the interpolation formula.
        let oracle = [17.52783196464411098331063, 2.515218976147158578827532, 0.1697527562687640281083078];
        for (got, want) in s[1..4].iter().zip(oracle) {
            assert!((got - want).abs() < 1e-12 * want.max(1.0), "{got} vs {want}");
        }
        assert!(s.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(schedule_sigmas(1, 80.0, 0.002, 7.0).is_err());
        assert!(schedule_sigmas(5, 0.0, 0.002, 7.0).is_err());
        assert!(schedule_sigmas(5, -1.0, 0.002, 7.0).is_err());
    }
}
