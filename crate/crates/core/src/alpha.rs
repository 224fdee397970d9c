//! The primary-filter fraction α as an exact rational.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Fraction of a layer's filters that are primary, in `(0, 1]`.
///
/// Kept exact so that `α·f` integrality is decided without rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Alpha(Ratio<u64>);

impl Alpha {
    pub const HALF: Alpha = Alpha(Ratio::new_raw(1, 2));
    pub const ONE: Alpha = Alpha(Ratio::new_raw(1, 1));

    pub fn new(numer: u64, denom: u64) -> Result<Self> {
        if denom == 0 {
            return Err(Error::config("alpha denominator is zero"));
        }
        let r = Ratio::new(numer, denom);
        if r.is_zero() || r > Ratio::from_integer(1) {
            return Err(Error::config(format!("alpha must lie in (0, 1], got {r}")));
        }
        Ok(Self(r))
    }

    pub fn numer(self) -> u64 {
        *self.0.numer()
    }

    pub fn denom(self) -> u64 {
        *self.0.denom()
    }

    pub fn to_f64(self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    pub fn is_one(self) -> bool {
        self == Self::ONE
    }

    /// `α·filters` when it is an integer.
    pub fn primary_count(self, filters: usize) -> Option<usize> {
        let scaled = self.0 * Ratio::from_integer(filters as u64);
        scaled.is_integer().then(|| scaled.to_integer() as usize)
    }

    /// `(1−α)·filters` when it is an integer.
    pub fn secondary_count(self, filters: usize) -> Option<usize> {
        self.primary_count(filters).map(|p| filters - p)
    }

    /// Checks that both filter groups are non-empty integers.
    pub fn split(self, filters: usize) -> Result<(usize, usize)> {
        match self.primary_count(filters) {
            Some(p) if p > 0 && p < filters => Ok((p, filters - p)),
            _ => Err(Error::config(format!(
                "alpha {self} splits {filters} filters into {:.3} primary and {:.3} secondary \
                 (both must be positive integers)",
                self.to_f64() * filters as f64,
                (1.0 - self.to_f64()) * filters as f64
            ))),
        }
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Alpha {
    type Err = Error;

    /// Accepts `p/q` or a finite decimal such as `0.125`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::config(format!("cannot parse alpha {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse::<u64>().map_err(|_| bad())?;
            let d = d.trim().parse::<u64>().map_err(|_| bad())?;
            return Alpha::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 12 || (int.is_empty() && frac.is_empty()) {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        if !digits.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let numer = digits.parse::<u64>().map_err(|_| bad())?;
        Alpha::new(numer, 10u64.pow(frac.len() as u32))
    }
}
