//! Block schedule: periods T_k and arm widths m_k driven by a growth variant
//! and the stage of each block, plus the per-block feed scale eps_k.
//!
//! Recurrences: T_0 = 1, m_1 = 1, m_k = T_{k-1} - m_{k-1},
//! T_k = g(n_k) * T_{k-1} with g the variant's stage factor. Entries are kept
//! exact in big integers; simulation-sized prefixes project to u64.

use crate::norm::PNorm;
use num::bigint::BigInt;
use num::rational::BigRational;
use num::{BigUint, One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("toy growth factor {0} too small: need at least 5")]
    ToyFactorTooSmall(u64),
    #[error("dimension {0} too small for the geometric growth variant")]
    BadDimension(u32),
    #[error("stage map must be non-empty, start at 1, and step by at most 1")]
    BadStageMap,
}

/// How fast block periods multiply per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum GrowthVariant {
    /// Stage-n factor 5^(d n) + 1: the scale at which the width estimates
    /// dominate every earlier block.
    Geometric { d: u32 },
    /// Constant factor per step, desk-scale runs; factor >= 5 keeps 4m <= T.
    Toy { factor: u64 },
}

impl GrowthVariant {
    fn factor(&self, stage: u32) -> BigUint {
        match *self {
            GrowthVariant::Geometric { d } => {
                BigUint::from(5u32).pow(d * stage) + BigUint::one()
            }
            GrowthVariant::Toy { factor } => BigUint::from(factor),
        }
    }

    fn validate(&self) -> Result<(), ScheduleError> {
        match *self {
            GrowthVariant::Geometric { d } if d < 2 => Err(ScheduleError::BadDimension(d)),
            GrowthVariant::Toy { factor } if factor < 5 => {
                Err(ScheduleError::ToyFactorTooSmall(factor))
            }
            _ => Ok(()),
        }
    }
}

/// Stage map for blocks 1..=N under the dyadic budget 2^(n(d-1)) per stage.
pub fn dyadic_stage_map(d: u32, blocks: usize) -> Vec<u32> {
    let mut stages = Vec::with_capacity(blocks);
    let mut stage = 1u32;
    let mut left = 2u64.pow(stage * (d - 1));
    for _ in 0..blocks {
        if left == 0 {
            stage += 1;
            left = 2u64.pow(stage * (d - 1));
        }
        stages.push(stage);
        left -= 1;
    }
    stages
}

/// Exact per-block feed scale eps_k = n / m^((p+1)/p) (n / m when p = inf).
/// Rational for p in {1, inf}; for p = 2 it is (n/m^2) * sqrt(m).
#[derive(Clone, Debug, PartialEq)]
pub struct EpsExact {
    pub stage: u32,
    pub m: BigUint,
    pub p: PNorm,
}

impl EpsExact {
    /// eps^p as an exact rational (the p-th power clears the radical);
    /// for p = inf this is eps itself.
    pub fn pow_p(&self) -> BigRational {
        let n = BigInt::from(self.stage);
        let m = BigInt::from(self.m.clone());
        match self.p.finite_p() {
            None => BigRational::new(n, m),
            Some(p) => BigRational::new(n.pow(p), m.pow(p + 1)),
        }
    }

    /// Exact rational value when one exists (p in {1, inf}).
    pub fn as_rational(&self) -> Option<BigRational> {
        let n = BigInt::from(self.stage);
        let m = BigInt::from(self.m.clone());
        match self.p {
            PNorm::Inf => Some(BigRational::new(n, m)),
            PNorm::One => Some(BigRational::new(n, m.pow(2))),
            PNorm::Two => None,
        }
    }

    /// For p = 2: eps = coeff * sqrt(radicand) with coeff = n/m^2, radicand = m.
    pub fn radical_parts(&self) -> Option<(BigRational, BigUint)> {
        match self.p {
            PNorm::Two => Some((
                BigRational::new(BigInt::from(self.stage), BigInt::from(self.m.clone()).pow(2)),
                self.m.clone(),
            )),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> f64 {
        let n = self.stage as f64;
        let m = self.m.to_f64().unwrap_or(f64::INFINITY);
        match self.p {
            PNorm::Inf => n / m,
            PNorm::One => n / (m * m),
            PNorm::Two => n / m.powf(1.5),
        }
    }
}

/// The full schedule for blocks 1..=len: periods, widths, stages, scales.
#[derive(Clone, Debug)]
pub struct BlockSchedule {
    pub variant: GrowthVariant,
    pub p: PNorm,
    stages: Vec<u32>,
    /// t[k] = T_k for k = 0..=len; t[0] = 1.
    t: Vec<BigUint>,
    /// m[k-1] = m_k for k = 1..=len.
    m: Vec<BigUint>,
}

impl BlockSchedule {
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// T_k, defined for 0 <= k <= len.
    pub fn t_k(&self, k: usize) -> &BigUint {
        &self.t[k]
    }

    /// m_k, defined for 1 <= k <= len.
    pub fn m_k(&self, k: usize) -> &BigUint {
        &self.m[k - 1]
    }

    pub fn stage_of(&self, k: usize) -> u32 {
        self.stages[k - 1]
    }

    pub fn eps_k(&self, k: usize) -> EpsExact {
        EpsExact { stage: self.stage_of(k), m: self.m_k(k).clone(), p: self.p }
    }

    /// Offset sum_{l<k} T_l of block k's copy inside each tail component.
    pub fn offset(&self, k: usize) -> BigUint {
        let mut o = BigUint::zero();
        for l in 1..k {
            o += &self.t[l];
        }
        o
    }

    pub fn t_u64(&self, k: usize) -> Option<u64> {
        self.t[k].to_u64()
    }

    pub fn m_u64(&self, k: usize) -> Option<u64> {
        self.m[k - 1].to_u64()
    }

    /// Largest k whose period still fits the simulation word size.
    pub fn simulable_len(&self) -> usize {
        (1..=self.len()).take_while(|&k| self.t_u64(k).is_some()).count()
    }
}

pub fn build_schedule(
    variant: GrowthVariant,
    p: PNorm,
    stages: &[u32],
) -> Result<BlockSchedule, ScheduleError> {
    variant.validate()?;
    if stages.is_empty() || stages[0] != 1 {
        return Err(ScheduleError::BadStageMap);
    }
    for w in stages.windows(2) {
        if w[1] < w[0] || w[1] > w[0] + 1 {
            return Err(ScheduleError::BadStageMap);
        }
    }
    let mut t = vec![BigUint::one()];
    let mut m: Vec<BigUint> = Vec::with_capacity(stages.len());
    for (i, &stage) in stages.iter().enumerate() {
        let k = i + 1;
        let mk = if k == 1 {
            BigUint::one()
        } else {
            &t[k - 1] - &m[k - 2]
        };
        t.push(variant.factor(stage) * &t[k - 1]);
        m.push(mk);
    }
    Ok(BlockSchedule { variant, p, stages: stages.to_vec(), t, m })
}

/// Grows the stage map under the dyadic budget until T_k first reaches
/// `t_limit`, then builds that prefix.
pub fn build_until(
    variant: GrowthVariant,
    p: PNorm,
    d: u32,
    t_limit: &BigUint,
) -> Result<BlockSchedule, ScheduleError> {
    variant.validate()?;
    let mut stages = Vec::new();
    let mut stage = 1u32;
    let mut left = 2u64.pow(stage * (d - 1));
    let mut t = BigUint::one();
    loop {
        if left == 0 {
            stage += 1;
            left = 2u64.pow(stage * (d - 1));
        }
        stages.push(stage);
        left -= 1;
        t *= variant.factor(stage);
        if &t >= t_limit {
            break;
        }
    }
    build_schedule(variant, p, &stages)
}

/// Result of checking the three schedule laws. `width_growth` is None for
/// variants whose stage factor does not dominate (toy runs).
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantReport {
    pub four_m_bound: bool,
    pub divisibility: bool,
    pub width_growth: Option<bool>,
    pub first_violation: Option<String>,
}

impl InvariantReport {
    pub fn all_hold(&self) -> bool {
        self.four_m_bound && self.divisibility && self.width_growth.unwrap_or(true)
    }
}

/// Checks 4 m_k <= T_k, T_l | T_r for l <= r, and (geometric variant only)
/// m_{k+1} >= 5^(d n_k) m_k.
pub fn check_invariants(s: &BlockSchedule) -> InvariantReport {
    let mut report = InvariantReport {
        four_m_bound: true,
        divisibility: true,
        width_growth: matches!(s.variant, GrowthVariant::Geometric { .. }).then_some(true),
        first_violation: None,
    };
    let note = |report: &mut InvariantReport, msg: String| {
        if report.first_violation.is_none() {
            report.first_violation = Some(msg);
        }
    };
    for k in 1..=s.len() {
        if BigUint::from(4u32) * s.m_k(k) > *s.t_k(k) {
            report.four_m_bound = false;
            note(&mut report, format!("4 m_{k} > T_{k}"));
        }
        if (s.t_k(k) % s.t_k(k - 1)) != BigUint::zero() {
            report.divisibility = false;
            note(&mut report, format!("T_{} does not divide T_{}", k - 1, k));
        }
    }
    if let GrowthVariant::Geometric { d } = s.variant {
        for k in 1..s.len() {
            let factor = BigUint::from(5u32).pow(d * s.stage_of(k));
            if *s.m_k(k + 1) < factor * s.m_k(k) {
                report.width_growth = Some(false);
                note(&mut report, format!("m_{} < 5^(d n) m_{}", k + 1, k));
            }
        }
    }
    report
}

/// Same checks against an arbitrary (possibly corrupted) period list; widths
/// are re-derived from the periods.
pub fn check_period_list(t: &[BigUint]) -> InvariantReport {
    let mut report = InvariantReport {
        four_m_bound: true,
        divisibility: true,
        width_growth: None,
        first_violation: None,
    };
    let mut m = BigUint::one();
    for k in 1..t.len() {
        if BigUint::from(4u32) * &m > t[k] {
            report.four_m_bound = false;
            if report.first_violation.is_none() {
                report.first_violation = Some(format!("4 m_{k} > T_{k}"));
            }
        }
        if (&t[k] % &t[k - 1]) != BigUint::zero() {
            report.divisibility = false;
            if report.first_violation.is_none() {
                report.first_violation = Some(format!("T_{} does not divide T_{}", k - 1, k));
            }
        }
        if k + 1 < t.len() {
            m = &t[k] - &m;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy5(blocks: usize) -> BlockSchedule {
        let stages = dyadic_stage_map(2, blocks);
        build_schedule(GrowthVariant::Toy { factor: 5 }, PNorm::Two, &stages).unwrap()
    }

    #[test]
    fn toy_factor_five_matches_known_table() {
        let s = toy5(10);
        let t_expect: [u64; 6] = [5, 25, 125, 625, 3125, 15625];
        for (k, &t) in t_expect.iter().enumerate() {
            assert_eq!(s.t_u64(k + 1), Some(t));
        }
        let m_expect: [u64; 10] = [1, 4, 21, 104, 521, 2604, 13021, 65104, 325521, 1627604];
        for (k, &m) in m_expect.iter().enumerate() {
            assert_eq!(s.m_u64(k + 1), Some(m));
        }
        assert_eq!(s.t_u64(0), Some(1));
        assert!(check_invariants(&s).all_hold());
        assert_eq!(check_invariants(&s).width_growth, None);
    }

    #[test]
    fn geometric_d2_first_steps() {
        let stages = dyadic_stage_map(2, 6);
        assert_eq!(stages, vec![1, 1, 2, 2, 2, 2]);
        let s = build_schedule(GrowthVariant::Geometric { d: 2 }, PNorm::Two, &stages).unwrap();
        assert_eq!(s.t_u64(1), Some(26));
        assert_eq!(s.m_u64(2), Some(25));
        assert_eq!(s.t_u64(2), Some(26 * 26));
        assert_eq!(s.m_u64(3), Some(676 - 25));
        assert!(check_invariants(&s).all_hold());
        assert_eq!(check_invariants(&s).width_growth, Some(true));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(
            build_schedule(GrowthVariant::Toy { factor: 4 }, PNorm::One, &[1]).unwrap_err(),
            ScheduleError::ToyFactorTooSmall(4)
        );
        assert_eq!(
            build_schedule(GrowthVariant::Toy { factor: 5 }, PNorm::One, &[2]).unwrap_err(),
            ScheduleError::BadStageMap
        );
        assert_eq!(
            build_schedule(GrowthVariant::Toy { factor: 5 }, PNorm::One, &[1, 3]).unwrap_err(),
            ScheduleError::BadStageMap
        );
    }

    #[test]
    fn eps_exact_forms() {
        let s = toy5(4);
        // Block 2: stage 1, m = 4, p = 2: eps = (1/16) sqrt(4) = 1/8.
        let eps = s.eps_k(2);
        let (coeff, rad) = eps.radical_parts().unwrap();
        assert_eq!(coeff, BigRational::new(BigInt::from(1), BigInt::from(16)));
        assert_eq!(rad, BigUint::from(4u32));
        assert!((eps.as_f64() - 0.125).abs() < 1e-15);
        // eps^2 = 1/64.
        assert_eq!(eps.pow_p(), BigRational::new(BigInt::from(1), BigInt::from(64)));

        let s1 = build_schedule(GrowthVariant::Toy { factor: 5 }, PNorm::One, &[1, 1, 2]).unwrap();
        let eps = s1.eps_k(3);
        // Block 3: stage 2, m = 21: eps = 2/441 exactly.
        assert_eq!(
            eps.as_rational().unwrap(),
            BigRational::new(BigInt::from(2), BigInt::from(441))
        );

        let sinf = build_schedule(GrowthVariant::Toy { factor: 5 }, PNorm::Inf, &[1, 1]).unwrap();
        assert_eq!(
            sinf.eps_k(2).as_rational().unwrap(),
            BigRational::new(BigInt::from(1), BigInt::from(4))
        );
    }

    #[test]
    fn offsets_accumulate_periods() {
        let s = toy5(4);
        assert_eq!(s.offset(1), BigUint::zero());
        assert_eq!(s.offset(3), BigUint::from(30u32));
        assert_eq!(s.offset(4), BigUint::from(155u32));
    }

    #[test]
    fn corrupted_period_breaks_divisibility() {
        let s = toy5(5);
        let mut t: Vec<BigUint> = (0..=5).map(|k| s.t_k(k).clone()).collect();
        assert!(check_period_list(&t).divisibility);
        t[3] += BigUint::one();
        let report = check_period_list(&t);
        assert!(!report.divisibility);
        assert!(report.first_violation.unwrap().contains("divide"));
    }

    #[test]
    fn build_until_reaches_limit() {
        let limit = BigUint::from(2u32).pow(256);
        let s = build_until(GrowthVariant::Geometric { d: 2 }, PNorm::Two, 2, &limit).unwrap();
        assert!(s.t_k(s.len()) >= &limit);
        assert!(s.t_k(s.len() - 1) < &limit);
        assert!(check_invariants(&s).all_hold());
        // Entries quickly leave u64 range but stay exact.
        assert!(s.simulable_len() < s.len());
    }

    #[test]
    fn stage_map_shapes() {
        assert_eq!(dyadic_stage_map(2, 7), vec![1, 1, 2, 2, 2, 2, 3]);
        assert_eq!(dyadic_stage_map(3, 5), vec![1, 1, 1, 1, 2]);
    }
}
