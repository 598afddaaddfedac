//! Noise-dependent projection curriculum.
//!
//! `p(σ)` is the probability of skipping the projection of a transition:
//! one above `σ_max`, zero below `σ_min`, linear in between.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurriculumMode {
    /// Project from the first denoising step on.
    Pre,
    /// Project with growing probability as σ falls below `σ_max`.
    Mid,
    /// Project only at the final noise level.
    Post,
    /// Never project.
    Off,
    Custom,
}

pub const CURRICULUM_NAMES: &[&str] = &["pre", "mid", "post", "off"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub mode: CurriculumMode,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self::mid()
    }
}

impl Curriculum {
    pub fn pre() -> Self {
        Self {
            mode: CurriculumMode::Pre,
            sigma_min: 80.0,
            sigma_max: 80.0,
        }
    }

    pub fn mid() -> Self {
        Self {
            mode: CurriculumMode::Mid,
            sigma_min: 0.0021,
            sigma_max: 0.2,
        }
    }

    pub fn post() -> Self {
        Self {
            mode: CurriculumMode::Post,
            sigma_min: 0.0021,
            sigma_max: 0.0021,
        }
    }

    pub fn off() -> Self {
        Self {
            mode: CurriculumMode::Off,
            sigma_min: f64::INFINITY,
            sigma_max: f64::INFINITY,
        }
    }

    pub fn custom(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        let c = Self {
            mode: CurriculumMode::Custom,
            sigma_min,
            sigma_max,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "pre" => Ok(Self::pre()),
            "mid" => Ok(Self::mid()),
            "post" => Ok(Self::post()),
            "off" => Ok(Self::off()),
            other => Err(Error::unknown("curriculum", other, CURRICULUM_NAMES)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.mode {
            CurriculumMode::Pre => "pre",
            CurriculumMode::Mid => "mid",
            CurriculumMode::Post => "post",
            CurriculumMode::Off => "off",
            CurriculumMode::Custom => "custom",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == CurriculumMode::Off {
            return Ok(());
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) || self.sigma_min.is_nan() {
            return Err(Error::Config(format!(
                "curriculum needs 0 < σ_min <= σ_max, got {} / {}",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    /// Probability of skipping the projection at noise level `σ`.
    pub fn skip_probability(&self, sigma: f64) -> f64 {
        if self.mode == CurriculumMode::Off {
            return 1.0;
        }
        if sigma > self.sigma_max {
            1.0
        } else if sigma <= self.sigma_min {
            0.0
        } else {
            (sigma - self.sigma_min) / (self.sigma_max - self.sigma_min)
        }
    }

    /// One Bernoulli draw; `true` means project.
    pub fn gate<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> bool {
        let p = self.skip_probability(sigma);
        if p >= 1.0 {
            return false;
        }
        if p <= 0.0 {
            return true;
        }
        !rng.random_bool(p)
    }
}

/// `n` independent per-transition gates at level `σ`.
pub fn curriculum_gate<R: Rng + ?Sized>(curr: &Curriculum, sigma: f64, n: usize, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| curr.gate(sigma, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn skip_probability_branches() {
        let c = Curriculum::mid();
        assert_eq!(c.skip_probability(0.3), 1.0);
        assert_eq!(c.skip_probability(0.001), 0.0);
        let mid = 0.5 * (c.sigma_min + c.sigma_max);
        assert!((c.skip_probability(mid) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn named_modes() {
        let pre = Curriculum::pre();
        assert_eq!(pre.skip_probability(80.0), 0.0);
        assert_eq!(pre.skip_probability(80.5), 1.0);
        let post = Curriculum::post();
        assert_eq!(post.skip_probability(0.002), 0.0);
        assert_eq!(post.skip_probability(0.17), 1.0);
        let off = Curriculum::off();
        assert_eq!(off.skip_probability(0.0), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(curriculum_gate(&off, 1e-9, 100, &mut rng).iter().all(|g| !g));
        assert!(Curriculum::by_name("late").is_err());
    }

    #[test]
    fn rejects_inverted_bounds() {
        assert!(Curriculum::custom(0.3, 0.2).is_err());
        assert!(Curriculum::custom(0.0, 0.2).is_err());
        assert!(Curriculum::custom(0.1, 0.1).is_ok());
    }
}
