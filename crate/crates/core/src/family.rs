//! Exponential-family observation models on the natural-parameter scale.
//!
//! Log-densities are reported without the `log c(y)` normalizer: it is
//! constant in the natural parameter, so values are comparable only within a
//! fixed dataset.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound on `|x|` for the Poisson natural parameter.
pub const DEFAULT_POISSON_CAP: f64 = 50.0;

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function `1 / (1 + e^-x)`, evaluated on the stable branch.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Bernoulli,
    Poisson,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Bernoulli => "bernoulli",
            FamilyKind::Poisson => "poisson",
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(FamilyKind::Gaussian),
            "bernoulli" | "binary" => Ok(FamilyKind::Bernoulli),
            "poisson" | "count" => Ok(FamilyKind::Poisson),
            other => Err(Error::InvalidValue(format!("unknown family '{other}'"))),
        }
    }
}

/// Observation family with known dispersion `phi0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub kind: FamilyKind,
    pub phi0: f64,
    #[serde(default = "default_cap")]
    pub natural_cap: f64,
}

fn default_cap() -> f64 {
    DEFAULT_POISSON_CAP
}

impl Family {
    pub fn gaussian(phi0: f64) -> Result<Self> {
        if !(phi0 > 0.0 && phi0.is_finite()) {
            return Err(Error::InvalidValue(format!("dispersion must be positive, got {phi0}")));
        }
        Ok(Self { kind: FamilyKind::Gaussian, phi0, natural_cap: DEFAULT_POISSON_CAP })
    }

    pub fn bernoulli() -> Self {
        Self { kind: FamilyKind::Bernoulli, phi0: 1.0, natural_cap: DEFAULT_POISSON_CAP }
    }

    pub fn poisson() -> Self {
        Self { kind: FamilyKind::Poisson, phi0: 1.0, natural_cap: DEFAULT_POISSON_CAP }
    }

    /// Family of the given kind; `phi0` is only honoured for gaussian.
    pub fn from_kind(kind: FamilyKind, phi0: f64) -> Result<Self> {
        match kind {
            FamilyKind::Gaussian => Self::gaussian(phi0),
            FamilyKind::Bernoulli => Ok(Self::bernoulli()),
            FamilyKind::Poisson => Ok(Self::poisson()),
        }
    }

    pub fn with_cap(mut self, cap: f64) -> Self {
        self.natural_cap = cap;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi0 > 0.0 && self.phi0.is_finite()) {
            return Err(Error::InvalidValue(format!("dispersion must be positive, got {}", self.phi0)));
        }
        if self.kind != FamilyKind::Gaussian && self.phi0 != 1.0 {
            return Err(Error::InvalidValue(format!("{} family requires phi0 = 1", self.kind)));
        }
        Ok(())
    }

    fn check_natural(&self, x: f64) -> Result<()> {
        if !x.is_finite() {
            return Err(Error::InvalidValue(format!("non-finite natural parameter {x}")));
        }
        if self.kind == FamilyKind::Poisson && x.abs() > self.natural_cap {
            return Err(Error::NaturalParameterOverflow { x, cap: self.natural_cap });
        }
        Ok(())
    }

    /// Cumulant function `psi(x)`.
    pub fn cumulant(&self, x: f64) -> Result<f64> {
        self.check_natural(x)?;
        Ok(match self.kind {
            FamilyKind::Gaussian => 0.5 * x * x,
            FamilyKind::Bernoulli => softplus(x),
            FamilyKind::Poisson => x.exp(),
        })
    }

    /// `psi'(x)`, the mean of the observation.
    pub fn cumulant_d1(&self, x: f64) -> Result<f64> {
        self.check_natural(x)?;
        Ok(match self.kind {
            FamilyKind::Gaussian => x,
            FamilyKind::Bernoulli => logistic(x),
            FamilyKind::Poisson => x.exp(),
        })
    }

    /// `psi''(x)`, the variance function (up to `phi0`).
    pub fn cumulant_d2(&self, x: f64) -> Result<f64> {
        self.check_natural(x)?;
        Ok(match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::Bernoulli => {
                let s = logistic(x);
                s * (1.0 - s)
            }
            FamilyKind::Poisson => x.exp(),
        })
    }

    pub fn check_support(&self, y: f64) -> Result<()> {
        let ok = match self.kind {
            FamilyKind::Gaussian => y.is_finite(),
            FamilyKind::Bernoulli => y == 0.0 || y == 1.0,
            FamilyKind::Poisson => y >= 0.0 && y.is_finite() && y.fract() == 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Support { family: self.kind.name(), y })
        }
    }

    /// `(y x - psi(x)) / phi0`.
    pub fn loglik_entry(&self, y: f64, x: f64) -> Result<f64> {
        self.check_support(y)?;
        Ok((y * x - self.cumulant(x)?) / self.phi0)
    }

    /// One observation drawn at natural parameter `x`.
    pub fn sample<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => {
                let normal = Normal::new(x, self.phi0.sqrt()).expect("finite mean and positive sd");
                normal.sample(rng)
            }
            FamilyKind::Bernoulli => {
                if rng.random::<f64>() < logistic(x) {
                    1.0
                } else {
                    0.0
                }
            }
            FamilyKind::Poisson => {
                let mean = x.exp();
                if mean <= 0.0 {
                    return 0.0;
                }
                Poisson::new(mean).expect("positive finite Poisson mean").sample(rng)
            }
        }
    }

    /// Per-entry data term with its first and second derivative in `x`.
    /// Returns `None` when `x` lies outside the admissible natural range.
    #[inline]
    pub(crate) fn data_terms(&self, y: f64, x: f64) -> Option<(f64, f64, f64)> {
        let inv = 1.0 / self.phi0;
        match self.kind {
            FamilyKind::Gaussian => Some(((y * x - 0.5 * x * x) * inv, (y - x) * inv, -inv)),
            FamilyKind::Bernoulli => {
                let e = (-x.abs()).exp();
                let sp = x.max(0.0) + e.ln_1p();
                let s = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                Some((y * x - sp, y - s, -s * (1.0 - s)))
            }
            FamilyKind::Poisson => {
                if !(x.abs() <= self.natural_cap) {
                    return None;
                }
                let ex = x.exp();
                Some((y * x - ex, y - ex, -ex))
            }
        }
    }

    /// Link applied to a mean estimate: the natural parameter with that mean.
    pub(crate) fn link(&self, mean: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => mean,
            FamilyKind::Bernoulli => (mean / (1.0 - mean)).ln(),
            FamilyKind::Poisson => mean.ln(),
        }
    }
}
