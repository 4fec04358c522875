//! Exact rational pass rates and display rounding.
//!
//! Every metric in the engine (trial pass rate, condition mean, cross-model
//! average, baseline delta) is computed in exact rational arithmetic and
//! rounded only when formatted for display. Display rounding is one decimal,
//! half away from zero.

use num_rational::Rational64;
use num_traits::{One, Zero};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::cmp::Ordering;
use std::fmt;

/// A rational value in `[0, 1]` representing a pass rate.
///
/// Serialized as a two-element `[numerator, denominator]` array, always in
/// reduced form with a positive denominator.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rate(Rational64);

/// Errors constructing a [`Rate`].
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RateError {
    #[error("rate denominator must be nonzero")]
    ZeroDenominator,
    #[error("rate {0}/{1} is outside [0, 1]")]
    OutOfRange(i64, i64),
}

impl Rate {
    /// Builds the exact rate `num/den`, reduced. `den` must be nonzero and
    /// the value must lie in `[0, 1]`.
    pub fn new(num: i64, den: i64) -> Result<Rate, RateError> {
        if den == 0 {
            return Err(RateError::ZeroDenominator);
        }
        let r = Rational64::new(num, den);
        if r < Rational64::zero() || r > Rational64::one() {
            return Err(RateError::OutOfRange(num, den));
        }
        Ok(Rate(r))
    }

    pub fn zero() -> Rate {
        Rate(Rational64::zero())
    }

    pub fn one() -> Rate {
        Rate(Rational64::one())
    }

    /// Wraps an already-validated ratio. Panics outside `[0, 1]`.
    pub fn from_ratio(r: Rational64) -> Rate {
        assert!(
            r >= Rational64::zero() && r <= Rational64::one(),
            "rate {r} outside [0, 1]"
        );
        Rate(r)
    }

    pub fn ratio(&self) -> Rational64 {
        self.0
    }

    pub fn numer(&self) -> i64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i64 {
        *self.0.denom()
    }

    /// Percentage with one decimal, e.g. `"54.0"`. Rounding only happens
    /// here; the underlying value stays exact.
    pub fn percent_1dp(&self) -> String {
        let tenths = round_scaled_half_away(self.0, 1000);
        format!("{}.{}", tenths / 10, tenths % 10)
    }
}

impl fmt::Debug for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        (*self.0.numer(), *self.0.denom()).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Rate, D::Error> {
        let (num, den) = <(i64, i64)>::deserialize(deserializer)?;
        Rate::new(num, den).map_err(D::Error::custom)
    }
}

/// Rounds `x * scale` to the nearest integer, ties away from zero.
pub fn round_scaled_half_away(x: Rational64, scale: i64) -> i64 {
    let t = x * Rational64::from_integer(scale);
    let n = *t.numer();
    let d = *t.denom();
    let q = n.div_euclid(d);
    let r = n.rem_euclid(d);
    match (2 * r).cmp(&d) {
        Ordering::Less => q,
        Ordering::Greater => q + 1,
        // Exact half: away from zero.
        Ordering::Equal => {
            if n >= 0 {
                q + 1
            } else {
                q
            }
        }
    }
}

/// Formats a percentage-point delta with one decimal and an explicit sign,
/// e.g. `"+3.0"`, `"-1.1"`, `"+0.0"`.
pub fn format_delta_pp(delta_pp: Rational64) -> String {
    let tenths = round_scaled_half_away(delta_pp, 10);
    let sign = if tenths < 0 { "-" } else { "+" };
    let a = tenths.abs();
    format!("{}{}.{}", sign, a / 10, a % 10)
}

/// Formats a percentage-point delta without a forced sign (baseline rows).
pub fn format_delta_pp_unsigned(delta_pp: Rational64) -> String {
    let tenths = round_scaled_half_away(delta_pp, 10);
    if tenths < 0 {
        let a = tenths.abs();
        format!("-{}.{}", a / 10, a % 10)
    } else {
        format!("{}.{}", tenths / 10, tenths % 10)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_construction_reduces() {
        let r = Rate::new(7, 14).unwrap();
        assert_eq!((r.numer(), r.denom()), (1, 2));
        assert_eq!(Rate::new(0, 11).unwrap(), Rate::zero());
        assert_eq!(Rate::new(12, 12).unwrap(), Rate::one());
    }

    #[test]
    fn rejects_bad_rates() {
        assert_eq!(Rate::new(1, 0), Err(RateError::ZeroDenominator));
        assert_eq!(Rate::new(3, 2), Err(RateError::OutOfRange(3, 2)));
        assert_eq!(Rate::new(-1, 2), Err(RateError::OutOfRange(-1, 2)));
    }

    #[test]
    fn display_rounding_half_away_from_zero() {
        // 54.05% -> "54.1" only under half-away rounding of the exact value.
        let r = Rate::new(5405, 10000).unwrap();
        assert_eq!(r.percent_1dp(), "54.1");
        assert_eq!(Rate::new(499, 1000).unwrap().percent_1dp(), "49.9");
        assert_eq!(Rate::new(1, 2).unwrap().percent_1dp(), "50.0");
    }

    #[test]
    fn delta_formatting() {
        assert_eq!(format_delta_pp(Rational64::new(30, 10)), "+3.0");
        assert_eq!(format_delta_pp(Rational64::new(-11, 10)), "-1.1");
        assert_eq!(format_delta_pp(Rational64::new(0, 1)), "+0.0");
        assert_eq!(format_delta_pp_unsigned(Rational64::new(0, 1)), "0.0");
        // Ties away from zero in both directions.
        assert_eq!(format_delta_pp(Rational64::new(25, 100)), "+0.3");
        assert_eq!(format_delta_pp(Rational64::new(-25, 100)), "-0.3");
    }

    #[test]
    fn serde_round_trip() {
        let r = Rate::new(7, 14).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(json, "[1,2]");
        let back: Rate = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(serde_json::from_str::<Rate>("[1,0]").is_err());
        assert!(serde_json::from_str::<Rate>("[5,2]").is_err());
    }
}
