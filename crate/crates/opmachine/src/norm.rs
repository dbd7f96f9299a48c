//! The exponent family shared by the carousel, schedule and machine layers.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::traits::{One, Signed};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Sequence-space exponent: lp with p in {1, 2} or the sup norm (c0 / l-infinity).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PNorm {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "inf")]
    Inf,
}

impl PNorm {
    /// Integer p for the finite cases.
    pub fn finite_p(self) -> Option<u32> {
        match self {
            PNorm::One => Some(1),
            PNorm::Two => Some(2),
            PNorm::Inf => None,
        }
    }

    /// p+1 as a rational exponent numerator; the profile mass exponent (p+1)/p
    /// only ever appears applied to integers, so powers stay exact.
    pub fn is_finite(self) -> bool {
        !matches!(self, PNorm::Inf)
    }
}

impl fmt::Display for PNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PNorm::One => write!(f, "1"),
            PNorm::Two => write!(f, "2"),
            PNorm::Inf => write!(f, "inf"),
        }
    }
}

/// |r|^p for finite p.
pub fn abs_pow_p(r: &BigRational, p: u32) -> BigRational {
    let a = r.abs();
    match p {
        1 => a,
        2 => &a * &a,
        _ => {
            let mut acc = BigRational::one();
            for _ in 0..p {
                acc *= &a;
            }
            acc
        }
    }
}

/// n^k over big integers.
pub fn bigint_pow(n: u64, k: u32) -> BigInt {
    BigInt::from(n).pow(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::parse_rational;

    #[test]
    fn pow_p() {
        let r = parse_rational("-3/2").unwrap();
        assert_eq!(abs_pow_p(&r, 2), parse_rational("9/4").unwrap());
        assert_eq!(abs_pow_p(&r, 1), parse_rational("3/2").unwrap());
    }

    #[test]
    fn serde_names() {
        assert_eq!(serde_json::to_string(&PNorm::Inf).unwrap(), "\"inf\"");
        assert_eq!(serde_json::from_str::<PNorm>("\"2\"").unwrap(), PNorm::Two);
    }
}
