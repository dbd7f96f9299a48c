//! Exact rational helpers shared across modules: parsing, deterministic
//! formatting, and lossless f64 conversion.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::traits::{Signed, ToPrimitive, Zero};

/// Parses "n", "-n", "n/d" or a plain decimal like "0.25" into an exact rational.
pub fn parse_rational(s: &str) -> Option<BigRational> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let n: BigInt = num.trim().parse().ok()?;
        let d: BigInt = den.trim().parse().ok()?;
        if d.is_zero() {
            return None;
        }
        return Some(BigRational::new(n, d));
    }
    if let Some((int, frac)) = s.split_once('.') {
        if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let neg = int.trim_start().starts_with('-');
        let i: BigInt = if int == "-" || int.is_empty() {
            BigInt::zero()
        } else {
            int.parse().ok()?
        };
        let f: BigInt = frac.parse().ok()?;
        let scale = BigInt::from(10u32).pow(frac.len() as u32);
        let abs = BigRational::new(i.abs() * &scale + f, scale);
        return Some(if neg { -abs } else { abs });
    }
    let n: BigInt = s.parse().ok()?;
    Some(BigRational::from_integer(n))
}

/// Formats a rational as "num/den" ("num" when the denominator is 1).
pub fn format_rational(r: &BigRational) -> String {
    if r.denom() == &BigInt::from(1) {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Exact conversion of a finite f64 into a rational (dyadic) value.
pub fn rational_from_f64(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite float")
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Formats a float with 15 significant digits, locale-independent.
pub fn format_sig15(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let s = format!("{:.*e}", 14, x);
    // Re-render exponent-free when the magnitude is moderate.
    if x.abs() >= 1e-4 && x.abs() < 1e15 {
        let digits = x.abs().log10().floor() as i32;
        let decimals = (14 - digits).max(0) as usize;
        let t = format!("{:.*}", decimals, x);
        let t = t.trim_end_matches('0').trim_end_matches('.').to_string();
        if t == "-0" {
            return "0".to_string();
        }
        return t;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fractions_and_decimals() {
        assert_eq!(parse_rational("-3/2").unwrap(), BigRational::new(BigInt::from(-3), BigInt::from(2)));
        assert_eq!(parse_rational("0.25").unwrap(), BigRational::new(BigInt::from(1), BigInt::from(4)));
        assert_eq!(parse_rational("7").unwrap(), BigRational::from_integer(BigInt::from(7)));
        assert!(parse_rational("1/0").is_none());
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let r = rational_from_f64(0.1);
        assert_eq!(rational_to_f64(&r), 0.1);
    }

    #[test]
    fn sig15_is_stable() {
        assert_eq!(format_sig15(0.0), "0");
        assert_eq!(format_sig15(1.5), "1.5");
        assert_eq!(format_sig15(2.0f64.sqrt()), "1.4142135623731");
    }
}
