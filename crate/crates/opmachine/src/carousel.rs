//! Single-block carousel: a cyclic shift of period T fed by a two-sided bump
//! of width m, scaled by eps and the standing amplitude. All state arithmetic
//! is exact. The closed-form evaluator `state_at` is the production path; the
//! iterative `step` exists as its cross-check oracle and for small T.

use crate::norm::{abs_pow_p, PNorm};
use num::bigint::BigInt;
use num::rational::BigRational;
use num::traits::{Signed, ToPrimitive, Zero};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CarouselError {
    #[error("period {t} too short for bump width {m}: need 4m <= T")]
    PeriodTooShort { t: u64, m: u64 },
    #[error("bump width must be positive")]
    ZeroWidth,
    #[error("feed scale eps must be positive")]
    NonPositiveEps,
}

/// Parameters of one carousel block. Positions are 1-based, 1..=t_period.
#[derive(Clone, Debug, PartialEq)]
pub struct CarouselParams {
    pub t_period: u64,
    pub m: u64,
    pub eps: BigRational,
    pub p: PNorm,
}

impl CarouselParams {
    pub fn new(t_period: u64, m: u64, eps: BigRational, p: PNorm) -> Result<Self, CarouselError> {
        if m == 0 {
            return Err(CarouselError::ZeroWidth);
        }
        if 4 * m > t_period {
            return Err(CarouselError::PeriodTooShort { t: t_period, m });
        }
        if eps <= BigRational::zero() {
            return Err(CarouselError::NonPositiveEps);
        }
        Ok(CarouselParams { t_period, m, eps, p })
    }
}

/// Sparse orbit state R^time(a, 0) restricted to the cyclic coordinates.
///
/// Every coordinate equals `eps * amplitude * count`; the integer counts are
/// the net deposit numbers N+ - N-, so the profile is stored exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct CarouselProfile {
    pub params: CarouselParams,
    pub amplitude: BigRational,
    pub time: u64,
    counts: BTreeMap<u64, i64>,
}

impl CarouselProfile {
    /// Net deposit count per position (positions absent count zero).
    pub fn counts(&self) -> &BTreeMap<u64, i64> {
        &self.counts
    }

    /// Coordinate values eps * amplitude * count, sparse over 1..=T.
    pub fn values(&self) -> BTreeMap<u64, BigRational> {
        let scale = &self.params.eps * &self.amplitude;
        self.counts
            .iter()
            .map(|(&i, &c)| (i, &scale * BigRational::from_integer(BigInt::from(c))))
            .collect()
    }

    pub fn value_at(&self, pos: u64) -> BigRational {
        match self.counts.get(&pos) {
            Some(&c) => &self.params.eps * &self.amplitude * BigRational::from_integer(BigInt::from(c)),
            None => BigRational::zero(),
        }
    }

    pub fn support_len(&self) -> usize {
        self.counts.len()
    }
}

/// F(a): +eps*a on positions 1..=m, -eps*a on m+1..=2m.
pub fn feed_vector(params: &CarouselParams, amplitude: &BigRational) -> CarouselProfile {
    let mut counts = BTreeMap::new();
    if !amplitude.is_zero() {
        for i in 1..=params.m {
            counts.insert(i, 1);
        }
        for i in params.m + 1..=2 * params.m {
            counts.insert(i, -1);
        }
    }
    CarouselProfile {
        params: params.clone(),
        amplitude: amplitude.clone(),
        time: 1,
        counts,
    }
}

/// One cyclic shift of a value map over positions 1..=t_period:
/// the entry at position i moves to i+1, position T wraps to 1.
pub fn shift_apply(
    values: &BTreeMap<u64, BigRational>,
    t_period: u64,
) -> BTreeMap<u64, BigRational> {
    values
        .iter()
        .map(|(&i, v)| (i % t_period + 1, v.clone()))
        .collect()
}

fn shift_counts(counts: &BTreeMap<u64, i64>, t_period: u64) -> BTreeMap<u64, i64> {
    counts.iter().map(|(&i, &c)| (i % t_period + 1, c)).collect()
}

/// One step of the block recursion: state <- S(state) + F(a).
pub fn step(profile: &CarouselProfile) -> CarouselProfile {
    let mut counts = shift_counts(&profile.counts, profile.params.t_period);
    if !profile.amplitude.is_zero() {
        for i in 1..=profile.params.m {
            add_count(&mut counts, i, 1);
        }
        for i in profile.params.m + 1..=2 * profile.params.m {
            add_count(&mut counts, i, -1);
        }
    }
    CarouselProfile {
        params: profile.params.clone(),
        amplitude: profile.amplitude.clone(),
        time: profile.time + 1,
        counts,
    }
}

fn add_count(counts: &mut BTreeMap<u64, i64>, pos: u64, delta: i64) {
    let e = counts.entry(pos).or_insert(0);
    *e += delta;
    if *e == 0 {
        counts.remove(&pos);
    }
}

/// Number of elements of the cyclic interval [start, start+len) mod T that lie
/// in [0, upper). Requires len <= T and upper <= T.
fn cyclic_overlap(t: u64, start: u64, len: u64, upper: u64) -> u64 {
    if len == 0 || upper == 0 {
        return 0;
    }
    let start = start % t;
    // Head segment [start, min(start+len, T)).
    let head_end = (start + len).min(t);
    let head = head_end.min(upper).saturating_sub(start);
    // Wrapped tail [0, start+len-T).
    let tail = if start + len > t {
        (start + len - t).min(upper)
    } else {
        0
    };
    head + tail
}

/// Net deposit counts of R^t(a, 0) for a block (T, m), independent of eps/a.
///
/// Position x (0-based) receives a positive deposit at step s iff
/// s mod T lies in [x-m+1, x] mod T, a negative one iff in [x-2m+1, x-m];
/// full cycles cancel, so only the partial window [0, t mod T) matters.
pub fn bump_counts(t_period: u64, m: u64, t: u64) -> BTreeMap<u64, i64> {
    let rem = t % t_period;
    let mut counts = BTreeMap::new();
    if rem == 0 {
        return counts;
    }
    // Counts can differ from zero only within 2m of the window boundaries 0, rem.
    let mut candidates = std::collections::BTreeSet::new();
    for &b in &[0u64, rem] {
        let lo = b as i64 - 2 * m as i64;
        for off in 0..=(4 * m as i64) {
            let x = (lo + off).rem_euclid(t_period as i64) as u64;
            candidates.insert(x);
        }
    }
    for x in candidates {
        let plus_start = (x + 2 * t_period - (m - 1)) % t_period;
        let minus_start = (x + 2 * t_period - (2 * m - 1)) % t_period;
        let g_plus = cyclic_overlap(t_period, plus_start, m, rem);
        let g_minus = cyclic_overlap(t_period, minus_start, m, rem);
        let d = g_plus as i64 - g_minus as i64;
        if d != 0 {
            counts.insert(x + 1, d);
        }
    }
    counts
}

/// Net deposit count at a single 1-based position, O(1).
pub fn count_at(t_period: u64, m: u64, t: u64, pos: u64) -> i64 {
    let rem = t % t_period;
    if rem == 0 {
        return 0;
    }
    let x = pos - 1;
    let plus_start = (x + 2 * t_period - (m - 1)) % t_period;
    let minus_start = (x + 2 * t_period - (2 * m - 1)) % t_period;
    let g_plus = cyclic_overlap(t_period, plus_start, m, rem);
    let g_minus = cyclic_overlap(t_period, minus_start, m, rem);
    g_plus as i64 - g_minus as i64
}

/// Exact power sums of the deposit counts of R^t(a, 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BumpSums {
    /// sum of |c| over all positions.
    pub abs_sum: BigInt,
    /// sum of c^2 over all positions.
    pub sq_sum: BigInt,
    /// max of |c| over all positions.
    pub max_abs: i64,
}

impl BumpSums {
    pub fn zero() -> Self {
        BumpSums { abs_sum: BigInt::zero(), sq_sum: BigInt::zero(), max_abs: 0 }
    }
}

/// Sum of the run v0 + i*s for i in [0, k).
fn run_sum(v0: i128, s: i128, k: i128) -> i128 {
    k * v0 + s * (k * (k - 1) / 2)
}

/// Same sums as materializing `bump_counts`, but in constant work: the count
/// profile is affine between slope breaks, which occur only where a deposit
/// window edge meets an edge of the partial cycle [0, t mod T) -- at most 18
/// positions -- so each affine run contributes a closed-form partial sum.
pub fn bump_sums(t_period: u64, m: u64, t: u64) -> BumpSums {
    let rem = t % t_period;
    if rem == 0 {
        return BumpSums::zero();
    }
    let value = |x: u64| count_at(t_period, m, t, x % t_period + 1);
    // Slope from x to x+1 changes only at x = e + c - 1 (mod T); including the
    // neighbors on both sides makes every run between consecutive breakpoints
    // affine, since a breakpoint landing inside a run would split it.
    let mut breaks = std::collections::BTreeSet::new();
    for e in [0, rem] {
        for c in [0, m, 2 * m] {
            let b = (e + c) % t_period;
            breaks.insert(b);
            breaks.insert((b + 1) % t_period);
            breaks.insert((b + t_period - 1) % t_period);
        }
    }
    let pts: Vec<u64> = breaks.into_iter().collect();
    let n = pts.len();
    let mut abs_sum: i128 = 0;
    let mut sq_sum: i128 = 0;
    let mut max_abs: i64 = 0;
    for i in 0..n {
        let start = pts[i];
        let len = if i + 1 < n {
            pts[i + 1] - start
        } else {
            pts[0] + t_period - start
        };
        if len == 0 {
            continue;
        }
        let v0 = value(start) as i128;
        let s = if len == 1 { 0 } else { value(start + 1) as i128 - v0 };
        let k = len as i128;
        let vlast = v0 + s * (k - 1);
        debug_assert_eq!(value(start + len - 1) as i128, vlast);
        debug_assert_eq!(value(start + len / 2) as i128, v0 + s * (len / 2) as i128);
        sq_sum += k * v0 * v0 + 2 * v0 * s * (k * (k - 1) / 2) + s * s * ((k - 1) * k * (2 * k - 1) / 6);
        max_abs = max_abs.max(v0.abs().max(vlast.abs()) as i64);
        abs_sum += if v0 >= 0 && vlast >= 0 {
            run_sum(v0, s, k)
        } else if v0 <= 0 && vlast <= 0 {
            -run_sum(v0, s, k)
        } else if s > 0 {
            // v0 < 0 < vlast: negatives occupy the prefix i < ceil(-v0/s).
            let neg = ((-v0) + s - 1) / s;
            run_sum(v0, s, k) - 2 * run_sum(v0, s, neg)
        } else {
            // v0 > 0 > vlast: positives occupy the prefix i < ceil(v0/-s).
            let pos = (v0 + (-s) - 1) / (-s);
            2 * run_sum(v0, s, pos) - run_sum(v0, s, k)
        };
    }
    BumpSums {
        abs_sum: BigInt::from(abs_sum),
        sq_sum: BigInt::from(sq_sum),
        max_abs,
    }
}

/// Closed-form R^t(a, 0): O(m) work, independent of t.
pub fn state_at(params: &CarouselParams, amplitude: &BigRational, t: u64) -> CarouselProfile {
    let counts = if amplitude.is_zero() {
        BTreeMap::new()
    } else {
        bump_counts(params.t_period, params.m, t)
    };
    debug_assert_eq!(counts.values().map(|&c| c as i128).sum::<i128>(), 0);
    CarouselProfile {
        params: params.clone(),
        amplitude: amplitude.clone(),
        time: t,
        counts,
    }
}

/// Exact p-norm of a profile: the value itself for p in {1, inf}, the squared
/// value for p = 2 (kept squared so comparisons stay rational).
#[derive(Clone, Debug, PartialEq)]
pub struct PNormValue {
    pub p: PNorm,
    /// ||.||^p for finite p; ||.||_inf itself for p = inf.
    pub powp: BigRational,
}

impl PNormValue {
    pub fn value_f64(&self) -> f64 {
        let v = self.powp.to_f64().unwrap_or(f64::NAN);
        match self.p {
            PNorm::One | PNorm::Inf => v,
            PNorm::Two => v.sqrt(),
        }
    }
}

/// Sum of |count|^p over the support (max for p = inf), as a big integer.
pub fn count_power_sum(counts: &BTreeMap<u64, i64>, p: PNorm) -> BigInt {
    match p {
        PNorm::One => BigInt::from(counts.values().map(|&c| (c as i128).unsigned_abs() as u128).sum::<u128>()),
        PNorm::Two => BigInt::from(counts.values().map(|&c| (c as i128 * c as i128) as u128).sum::<u128>()),
        PNorm::Inf => BigInt::from(counts.values().map(|&c| c.unsigned_abs()).max().unwrap_or(0)),
    }
}

pub fn profile_norm(profile: &CarouselProfile, p: PNorm) -> PNormValue {
    let scale = (&profile.params.eps * &profile.amplitude).abs();
    let sum = BigRational::from_integer(count_power_sum(&profile.counts, p));
    let powp = match p {
        PNorm::One => scale * sum,
        PNorm::Two => &scale * &scale * sum,
        PNorm::Inf => scale * sum,
    };
    PNormValue { p, powp }
}

/// L^p for the uniform/small-time constant: 2^(p+3)/(p+1) for finite p, 1 for sup.
pub fn estimate_constant_l_pow(p: PNorm) -> BigRational {
    match p {
        PNorm::One => BigRational::from_integer(BigInt::from(8)),
        PNorm::Two => BigRational::new(BigInt::from(32), BigInt::from(3)),
        PNorm::Inf => BigRational::from_integer(BigInt::from(1)),
    }
}

pub fn estimate_constant_l(p: PNorm) -> f64 {
    match p {
        PNorm::One => 8.0,
        PNorm::Two => (32.0f64 / 3.0).sqrt(),
        PNorm::Inf => 1.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundKind {
    /// Window lower bound on [m, T-m].
    Lower,
    /// Uniform upper bound at all times.
    Uniform,
    /// Growth upper bound for t <= m.
    SmallTime,
}

#[derive(Clone, Debug)]
pub struct BoundCheck {
    pub kind: BoundKind,
    /// Bound on ||.||^p (finite p) or on ||.||_inf, matching PNormValue.
    pub bound_powp: BigRational,
    pub satisfied: bool,
}

#[derive(Clone, Debug)]
pub struct EstimateRecord {
    pub t: u64,
    pub norm_powp: BigRational,
    pub checks: Vec<BoundCheck>,
}

#[derive(Clone, Debug)]
pub struct EstimateReport {
    pub params: CarouselParams,
    pub amplitude: BigRational,
    /// L^p (1 for p = inf).
    pub l_pow_p: BigRational,
    pub records: Vec<EstimateRecord>,
    pub violations: usize,
}

impl EstimateReport {
    pub fn all_satisfied(&self) -> bool {
        self.violations == 0
    }
}

/// Checks the three local estimates at every t in 0..=T, comparing p-th powers
/// exactly. mass = eps^p * m^(p+1) * |a|^p is the common scale for finite p.
pub fn verify_estimates(params: &CarouselParams, amplitude: &BigRational) -> EstimateReport {
    let m = params.m;
    let t_period = params.t_period;
    let l_pow = estimate_constant_l_pow(params.p);
    let abs_a = amplitude.abs();
    let mut records = Vec::with_capacity(t_period as usize + 1);
    let mut violations = 0usize;

    for t in 0..=t_period {
        let profile = state_at(params, amplitude, t);
        let norm = profile_norm(&profile, params.p);
        let mut checks = Vec::new();

        match params.p.finite_p() {
            Some(p) => {
                let scale = abs_pow_p(&params.eps, p) * abs_pow_p(&abs_a, p);
                let m_pow = BigRational::from_integer(BigInt::from(m).pow(p + 1));
                let mass = &scale * &m_pow;
                if t >= m && t <= t_period - m {
                    let bound = BigRational::new(BigInt::from(2), BigInt::from(p + 1)) * &mass;
                    let satisfied = norm.powp >= bound;
                    checks.push(BoundCheck { kind: BoundKind::Lower, bound_powp: bound, satisfied });
                }
                let bound = &l_pow * &mass;
                let satisfied = norm.powp <= bound;
                checks.push(BoundCheck { kind: BoundKind::Uniform, bound_powp: bound, satisfied });
                if t <= m {
                    let t_pow = BigRational::from_integer(BigInt::from(t).pow(p));
                    let bound = &l_pow * scale * BigRational::from_integer(BigInt::from(m)) * t_pow;
                    let satisfied = norm.powp <= bound;
                    checks.push(BoundCheck { kind: BoundKind::SmallTime, bound_powp: bound, satisfied });
                }
            }
            None => {
                let scale = &params.eps * &abs_a;
                let mass = &scale * BigRational::from_integer(BigInt::from(m));
                if t >= m && t <= t_period - m {
                    let satisfied = norm.powp >= mass;
                    checks.push(BoundCheck { kind: BoundKind::Lower, bound_powp: mass.clone(), satisfied });
                }
                let satisfied = norm.powp <= mass;
                checks.push(BoundCheck { kind: BoundKind::Uniform, bound_powp: mass.clone(), satisfied });
                if t <= m {
                    let bound = scale * BigRational::from_integer(BigInt::from(t));
                    let satisfied = norm.powp <= bound;
                    checks.push(BoundCheck { kind: BoundKind::SmallTime, bound_powp: bound, satisfied });
                }
            }
        }

        violations += checks.iter().filter(|c| !c.satisfied).count();
        records.push(EstimateRecord { t, norm_powp: norm.powp, checks });
    }

    EstimateReport {
        params: params.clone(),
        amplitude: amplitude.clone(),
        l_pow_p: l_pow,
        records,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::parse_rational;
    use num::traits::One;
    use proptest::prelude::*;

    fn rat(s: &str) -> BigRational {
        parse_rational(s).unwrap()
    }

    #[test]
    fn bump_sums_match_materialized_counts() {
        for t_period in 4..=40u64 {
            for m in 1..=t_period / 4 {
                for t in 0..=2 * t_period + 3 {
                    let counts = bump_counts(t_period, m, t);
                    let want = BumpSums {
                        abs_sum: BigInt::from(counts.values().map(|c| c.abs() as i128).sum::<i128>()),
                        sq_sum: BigInt::from(
                            counts.values().map(|&c| c as i128 * c as i128).sum::<i128>(),
                        ),
                        max_abs: counts.values().map(|c| c.abs()).max().unwrap_or(0),
                    };
                    assert_eq!(bump_sums(t_period, m, t), want, "T={t_period} m={m} t={t}");
                    for (&pos, &c) in &counts {
                        assert_eq!(count_at(t_period, m, t, pos), c);
                    }
                    let in_support: std::collections::BTreeSet<u64> = counts.keys().copied().collect();
                    for pos in 1..=t_period {
                        if !in_support.contains(&pos) {
                            assert_eq!(count_at(t_period, m, t, pos), 0, "T={t_period} m={m} t={t} pos={pos}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bump_sums_large_block_spot_checks() {
        // One representative of each window regime on a block too large to
        // materialize comfortably in a debug loop.
        let (t_period, m) = (1_953_125u64, 325_521u64);
        for t in [1, m - 1, m, m + 1, 390_625, t_period - m, t_period - 1, t_period, 3 * t_period + 17] {
            let sums = bump_sums(t_period, m, t);
            let rem = t % t_period;
            if rem == 0 {
                assert_eq!(sums, BumpSums::zero());
                continue;
            }
            // Counts sum to zero, so |.| mass splits evenly; the peak is the
            // bump height min(rem, m), except near the cycle end where the
            // last T - rem steps' worth is all that remains uncancelled.
            assert_eq!(sums.max_abs as u64, rem.min(m).min(t_period - rem));
            assert!(sums.sq_sum > BigInt::zero());
            assert_eq!(&sums.abs_sum % BigInt::from(2), BigInt::zero());
        }
    }

    fn params(t: u64, m: u64, eps: &str, p: PNorm) -> CarouselParams {
        CarouselParams::new(t, m, rat(eps), p).unwrap()
    }

    fn dense(profile: &CarouselProfile) -> Vec<BigRational> {
        let mut v = vec![BigRational::zero(); profile.params.t_period as usize];
        for (i, val) in profile.values() {
            v[(i - 1) as usize] = val;
        }
        v
    }

    fn dense_ints(profile: &CarouselProfile) -> Vec<i64> {
        let mut v = vec![0i64; profile.params.t_period as usize];
        for (&i, &c) in profile.counts() {
            v[(i - 1) as usize] = c;
        }
        v
    }

    #[test]
    fn rejects_bad_params() {
        assert_eq!(
            CarouselParams::new(7, 2, BigRational::one(), PNorm::One).unwrap_err(),
            CarouselError::PeriodTooShort { t: 7, m: 2 }
        );
        assert!(CarouselParams::new(8, 0, BigRational::one(), PNorm::One).is_err());
        assert!(CarouselParams::new(8, 2, BigRational::zero(), PNorm::One).is_err());
    }

    #[test]
    fn feed_examples() {
        let pr = feed_vector(&params(8, 2, "1", PNorm::Two), &rat("1"));
        assert_eq!(dense_ints(&pr), vec![1, 1, -1, -1, 0, 0, 0, 0]);

        let pr = feed_vector(&params(8, 2, "1", PNorm::Two), &rat("0"));
        assert!(pr.counts().is_empty());

        let pr = feed_vector(&params(4, 1, "1", PNorm::One), &rat("2"));
        let v = dense(&pr);
        assert_eq!(v, vec![rat("2"), rat("-2"), rat("0"), rat("0")]);
    }

    #[test]
    fn shift_examples() {
        let vals: BTreeMap<u64, BigRational> =
            (1..=4).map(|i| (i, BigRational::from_integer(BigInt::from(i)))).collect();
        let shifted = shift_apply(&vals, 4);
        let out: Vec<BigRational> = (1..=4).map(|i| shifted.get(&i).cloned().unwrap()).collect();
        assert_eq!(out, vec![rat("4"), rat("1"), rat("2"), rat("3")]);

        assert!(shift_apply(&BTreeMap::new(), 4).is_empty());

        let mut v = vals.clone();
        for _ in 0..4 {
            v = shift_apply(&v, 4);
        }
        assert_eq!(v, vals);
    }

    #[test]
    fn step_example() {
        let p = params(8, 2, "1", PNorm::Two);
        let t1 = feed_vector(&p, &rat("1"));
        let t2 = step(&t1);
        assert_eq!(dense_ints(&t2), vec![1, 2, 0, -2, -1, 0, 0, 0]);
        assert_eq!(t2.time, 2);

        // Zero amplitude: stepping shifts only.
        let z = state_at(&p, &rat("0"), 3);
        assert!(step(&z).counts().is_empty());
    }

    #[test]
    fn state_at_examples() {
        let p = params(8, 2, "1", PNorm::Two);
        let s4 = state_at(&p, &rat("1"), 4);
        assert_eq!(dense_ints(&s4), vec![1, 2, 1, 0, -1, -2, -1, 0]);

        // One full period cancels exactly.
        assert!(state_at(&p, &rat("1"), 8).counts().is_empty());
        assert!(state_at(&p, &rat("-3"), 16).counts().is_empty());

        // t = 1 is the feed vector.
        assert_eq!(state_at(&p, &rat("1"), 1), feed_vector(&p, &rat("1")));
    }

    #[test]
    fn norm_examples() {
        let p = params(8, 2, "1", PNorm::Two);
        let s4 = state_at(&p, &rat("1"), 4);
        assert_eq!(profile_norm(&s4, PNorm::Inf).powp, rat("2"));
        assert_eq!(profile_norm(&s4, PNorm::One).powp, rat("8"));
        assert_eq!(profile_norm(&s4, PNorm::Two).powp, rat("12"));

        let z = state_at(&p, &rat("0"), 4);
        assert_eq!(profile_norm(&z, PNorm::Two).powp, rat("0"));
    }

    #[test]
    fn l_constants() {
        assert_eq!(estimate_constant_l_pow(PNorm::One), rat("8"));
        assert_eq!(estimate_constant_l_pow(PNorm::Two), rat("32/3"));
        assert_eq!(estimate_constant_l_pow(PNorm::Inf), rat("1"));
        assert!((estimate_constant_l(PNorm::Two) - (32.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn estimates_at_window_edge_hold_with_equality_for_sup() {
        // T=8, m=2, eps=1, a=1, p=inf: at t=4 the norm equals eps*m*|a| = 2.
        let p = params(8, 2, "1", PNorm::Inf);
        let report = verify_estimates(&p, &rat("1"));
        assert!(report.all_satisfied());
        let rec = &report.records[4];
        assert_eq!(rec.norm_powp, rat("2"));
        let lower = rec.checks.iter().find(|c| c.kind == BoundKind::Lower).unwrap();
        assert_eq!(lower.bound_powp, rat("2"));
    }

    #[test]
    fn estimates_small_grid() {
        for p in [PNorm::One, PNorm::Two, PNorm::Inf] {
            for m in 1..=6u64 {
                for t_period in [4 * m, 5 * m, 8 * m] {
                    for a in ["1", "-3", "1/2"] {
                        let pars = params(t_period, m, "1", p);
                        let report = verify_estimates(&pars, &rat(a));
                        assert!(
                            report.all_satisfied(),
                            "violation p={p} m={m} T={t_period} a={a}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn stepper_matches_closed_form() {
        let p = params(12, 3, "1/2", PNorm::One);
        let mut cur = state_at(&p, &rat("-3"), 0);
        for t in 0..=2 * p.t_period {
            assert_eq!(cur.counts(), state_at(&p, &rat("-3"), t).counts(), "t={t}");
            cur = step(&cur);
        }
    }

    proptest! {
        #[test]
        fn closed_form_equals_stepper(m in 1u64..6, extra in 0u64..20, t in 0u64..60, num in -6i64..6, den in 1i64..4) {
            let t_period = 4 * m + extra;
            let a = BigRational::new(BigInt::from(num), BigInt::from(den));
            let pars = CarouselParams::new(t_period, m, BigRational::one(), PNorm::One).unwrap();
            let mut cur = state_at(&pars, &a, 0);
            for _ in 0..t {
                cur = step(&cur);
            }
            let closed = state_at(&pars, &a, t);
            prop_assert_eq!(cur.counts(), closed.counts());
        }

        #[test]
        fn profile_invariants(m in 1u64..6, extra in 0u64..20, t in 0u64..200) {
            let t_period = 4 * m + extra;
            let pars = CarouselParams::new(t_period, m, BigRational::one(), PNorm::Two).unwrap();
            let pr = state_at(&pars, &BigRational::one(), t);
            // Support bound, zero total mass, T-periodicity.
            prop_assert!(pr.support_len() <= 4 * m as usize);
            prop_assert_eq!(pr.counts().values().sum::<i64>(), 0);
            let again = state_at(&pars, &BigRational::one(), t + t_period);
            prop_assert_eq!(pr.counts(), again.counts());
        }

        #[test]
        fn state_is_linear_in_amplitude(m in 1u64..5, extra in 0u64..12, t in 0u64..50, num in 1i64..5) {
            let t_period = 4 * m + extra;
            let pars = CarouselParams::new(t_period, m, BigRational::one(), PNorm::One).unwrap();
            let a = BigRational::from_integer(BigInt::from(num));
            let one = state_at(&pars, &BigRational::one(), t);
            let scaled = state_at(&pars, &a, t);
            for (i, v) in scaled.values() {
                prop_assert_eq!(v, one.value_at(i) * &a);
            }
            prop_assert_eq!(one.counts(), scaled.counts());
        }
    }
}
