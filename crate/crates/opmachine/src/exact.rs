//! Exact scalar layer for orbit norms: values of the form
//! q + r*sqrt(m) per slot (m the block width, fixed per block), and norm
//! accumulators rational + sum of c_m sqrt(m) over radicands m. Squaring a
//! slot value never mixes two radicands, so sums of squares stay in this
//! class and compare exactly.

use num::bigint::BigInt;
use num::integer::Roots;
use num::rational::BigRational;
use num::{Signed, ToPrimitive, Zero};
use std::collections::BTreeMap;

/// q + r*sqrt(radicand); the radicand is carried by the owning block.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotVal {
    pub q: BigRational,
    pub r: BigRational,
}

impl SlotVal {
    pub fn zero() -> Self {
        SlotVal { q: BigRational::zero(), r: BigRational::zero() }
    }

    pub fn from_q(q: BigRational) -> Self {
        SlotVal { q, r: BigRational::zero() }
    }

    pub fn is_zero(&self) -> bool {
        self.q.is_zero() && self.r.is_zero()
    }

    /// The rational value, if the radical part vanishes.
    pub fn as_rational(&self) -> Option<&BigRational> {
        self.r.is_zero().then_some(&self.q)
    }

    /// |q + r sqrt(m)| <= |q| + |r| sqrt(m), evaluated in floats.
    pub fn abs_f64(&self, radicand: u64) -> f64 {
        let q = self.q.to_f64().unwrap_or(0.0);
        let r = self.r.to_f64().unwrap_or(0.0);
        (q + r * (radicand as f64).sqrt()).abs()
    }

    /// Exact square (q + r sqrt(m))^2 = q^2 + r^2 m + 2qr sqrt(m).
    pub fn square_into(&self, radicand: u64, acc: &mut ExactVal) {
        let m = BigRational::from_integer(BigInt::from(radicand));
        acc.rat += &self.q * &self.q + &self.r * &self.r * m;
        let cross = BigRational::from_integer(BigInt::from(2)) * &self.q * &self.r;
        acc.add_radical(radicand, cross);
    }
}

/// rat + sum over radicands m of rads[m]*sqrt(m), with square radicands
/// folded into the rational part, so equal values have equal representations.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ExactVal {
    pub rat: BigRational,
    rads: BTreeMap<u64, BigRational>,
}

impl ExactVal {
    pub fn zero() -> Self {
        ExactVal::default()
    }

    pub fn from_rat(rat: BigRational) -> Self {
        ExactVal { rat, rads: BTreeMap::new() }
    }

    pub fn add_rat(&mut self, v: &BigRational) {
        self.rat += v;
    }

    pub fn add_radical(&mut self, radicand: u64, coef: BigRational) {
        if coef.is_zero() {
            return;
        }
        let root = radicand.sqrt();
        if root * root == radicand {
            self.rat += coef * BigRational::from_integer(BigInt::from(root));
            return;
        }
        let entry = self.rads.entry(radicand).or_insert_with(BigRational::zero);
        *entry += coef;
        if entry.is_zero() {
            self.rads.remove(&radicand);
        }
    }

    pub fn add(&mut self, other: &ExactVal) {
        self.rat += &other.rat;
        for (&m, coef) in &other.rads {
            self.add_radical(m, coef.clone());
        }
    }

    pub fn is_zero(&self) -> bool {
        self.rat.is_zero() && self.rads.is_empty()
    }

    pub fn is_rational(&self) -> bool {
        self.rads.is_empty()
    }

    pub fn as_rational(&self) -> Option<&BigRational> {
        self.is_rational().then_some(&self.rat)
    }

    pub fn eval_f64(&self) -> f64 {
        let mut v = self.rat.to_f64().unwrap_or(0.0);
        for (&m, coef) in &self.rads {
            v += coef.to_f64().unwrap_or(0.0) * (m as f64).sqrt();
        }
        v
    }

    /// Exact comparison against a rational, valid for values known to be
    /// sums of squares (every radical term then has non-negative sign
    /// structure only when the value itself is rational). Only used where
    /// the radical part is empty.
    pub fn eq_rational(&self, v: &BigRational) -> bool {
        self.is_rational() && self.rat == *v
    }
}

/// abs of a rational.
pub fn rat_abs(v: &BigRational) -> BigRational {
    v.abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::One;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn squares_fold_radicands() {
        let mut acc = ExactVal::zero();
        // (1/2 + (1/3) sqrt(21))^2 = 1/4 + 21/9 + (1/3) sqrt(21)
        let v = SlotVal { q: rat(1, 2), r: rat(1, 3) };
        v.square_into(21, &mut acc);
        assert_eq!(acc.rat, rat(1, 4) + rat(21, 9));
        assert!(!acc.is_rational());
        // Adding the mirrored value cancels the radical exactly.
        let w = SlotVal { q: rat(1, 2), r: rat(-1, 3) };
        w.square_into(21, &mut acc);
        assert!(acc.is_rational());
        assert_eq!(acc.rat, (rat(1, 4) + rat(21, 9)) * rat(2, 1));
    }

    #[test]
    fn square_radicands_are_rationalized() {
        let mut acc = ExactVal::zero();
        // (0 + (1/2) sqrt(4))^2 contributes 1; cross term sqrt(4) folds to 2.
        let v = SlotVal { q: BigRational::one(), r: rat(1, 2) };
        v.square_into(4, &mut acc);
        assert!(acc.is_rational());
        // 1 + 1/4*4 + 2*1*(1/2)*2 = 1 + 1 + 2 = 4.
        assert_eq!(acc.rat, rat(4, 1));
    }

    #[test]
    fn eval_matches_f64() {
        let mut acc = ExactVal::zero();
        acc.add_rat(&rat(3, 2));
        acc.add_radical(2, rat(1, 1));
        assert!((acc.eval_f64() - (1.5 + 2f64.sqrt())).abs() < 1e-14);
    }
}
