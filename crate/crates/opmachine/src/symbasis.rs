//! Vector systems over a symmetric basis: disjoint slot blocks carrying
//! n vectors z_1..z_n and a slot permutation of order n that simulates the
//! coefficient cycle tau = (1 ... n). Three constructions (averaged blocks,
//! dual-selected blocks, Walsh signs) plus the plain unit-vector system the
//! orbit engine uses.
//!
//! Vector coordinates are integers with one shared scale per system, so the
//! permutation property is checked in exact arithmetic.

use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SymBasisError {
    #[error("block averaging hypothesis fails: lambda({nm})/lambda({m}) = {ratio} >= 2")]
    AveragingHypothesis { nm: u64, m: u64, ratio: f64 },
    #[error("dual growth hypothesis fails: mu({nm})/mu({m}) = {ratio} >= 2")]
    DualHypothesis { nm: u64, m: u64, ratio: f64 },
    #[error("slot block must contain exactly n distinct slots")]
    BadBlock,
    #[error("n must be positive")]
    ZeroN,
}

/// Norm on finitely supported coefficient vectors, invariant under
/// permutations and sign flips, with ||e_1|| = 1.
pub trait SymmetricNorm {
    fn eval(&self, coeffs: &[f64]) -> f64;
    fn describe(&self) -> String;
}

/// The ambient norms the machine instantiates: sup (c0 / l-inf) or l^p.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmbientNorm {
    Sup,
    Lp { p: f64 },
}

impl SymmetricNorm for AmbientNorm {
    fn eval(&self, coeffs: &[f64]) -> f64 {
        match *self {
            AmbientNorm::Sup => coeffs.iter().fold(0.0, |a, c| a.max(c.abs())),
            AmbientNorm::Lp { p } => coeffs.iter().map(|c| c.abs().powf(p)).sum::<f64>().powf(1.0 / p),
        }
    }

    fn describe(&self) -> String {
        match *self {
            AmbientNorm::Sup => "sup".to_string(),
            AmbientNorm::Lp { p } => format!("l^{p}"),
        }
    }
}

/// lambda(n) = ||e_1 + ... + e_n|| and mu(n) = ||e*_1 + ... + e*_n||.
/// For a symmetric norm the functional sum x_1 + ... + x_n is maximized over
/// the unit ball at the normalized constant block (averaging any maximizer
/// over permutations and signs cannot decrease the value), so mu(n) =
/// n / lambda(n) exactly.
pub fn lambda_mu(norm: &dyn SymmetricNorm, n: u64) -> (f64, f64) {
    let lambda = norm.eval(&vec![1.0; n as usize]);
    (lambda, n as f64 / lambda)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZCase {
    AveragedBlocks,
    DualBlocks,
    WalshSigns,
    Unit,
}

/// n vectors with integer coordinates on a finite slot block, a shared
/// positive scale divisor (scale_m = m means the true vectors are divided by
/// lambda(m)), and the slot permutation of order n.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZSystem {
    pub case: ZCase,
    pub n: usize,
    /// F_n, ascending.
    pub slots: Vec<u64>,
    /// Integer coordinates of z_l on the slots (missing = 0).
    pub vectors: Vec<BTreeMap<u64, i64>>,
    /// Slot permutation pi_n.
    pub perm: BTreeMap<u64, u64>,
    /// The m whose lambda(m) divides the integer coordinates, if any.
    pub scale_m: Option<u64>,
}

impl ZSystem {
    /// Image of z_l under the operator S e_i = e_{pi(i)}, in integer
    /// coordinates.
    fn permuted_vector(&self, l: usize) -> BTreeMap<u64, i64> {
        self.vectors[l]
            .iter()
            .map(|(slot, &c)| (self.perm[slot], c))
            .collect()
    }

    /// Dense coefficient view of z_l over the slot block, scaled by
    /// 1/lambda(scale_m) under the given norm.
    pub fn dense(&self, l: usize, norm: &dyn SymmetricNorm) -> Vec<f64> {
        let scale = match self.scale_m {
            Some(m) => lambda_mu(norm, m).0,
            None => 1.0,
        };
        self.slots
            .iter()
            .map(|s| *self.vectors[l].get(s).unwrap_or(&0) as f64 / scale)
            .collect()
    }

    /// Order of pi_n, by iterating the cycle through the first slot's orbit
    /// until the whole permutation returns to the identity.
    pub fn perm_order(&self) -> usize {
        let mut current: BTreeMap<u64, u64> = self.slots.iter().map(|&s| (s, s)).collect();
        for order in 1..=self.slots.len() {
            for v in current.values_mut() {
                *v = self.perm[v];
            }
            if current.iter().all(|(s, v)| s == v) {
                return order;
            }
        }
        usize::MAX
    }
}

/// Averaged-block system: z_l = (e_{start+(l-1)m+1} + ... + e_{start+lm}) /
/// lambda(m), valid when lambda(n m)/lambda(m) < 2. The permutation
/// translates block l to block l+1 (mod n) pointwise.
pub fn case1_system(
    n: usize,
    m: u64,
    norm: &dyn SymmetricNorm,
    start: u64,
) -> Result<ZSystem, SymBasisError> {
    if n == 0 || m == 0 {
        return Err(SymBasisError::ZeroN);
    }
    let (lam_nm, _) = lambda_mu(norm, n as u64 * m);
    let (lam_m, _) = lambda_mu(norm, m);
    let ratio = lam_nm / lam_m;
    if !(ratio < 2.0) {
        return Err(SymBasisError::AveragingHypothesis { nm: n as u64 * m, m, ratio });
    }
    Ok(block_translation_system(ZCase::AveragedBlocks, n, m, start, true))
}

/// Dual-selected system, concrete only over l1: mu is constant there, and the
/// norming functional z*_l (the averaged dual block / mu(m)) attains value 1
/// at the first unit vector of block l, which is therefore selected as z_l.
pub fn case2_system_l1(n: usize, m: u64, start: u64) -> Result<ZSystem, SymBasisError> {
    if n == 0 || m == 0 {
        return Err(SymBasisError::ZeroN);
    }
    let l1 = AmbientNorm::Lp { p: 1.0 };
    let (_, mu_nm) = lambda_mu(&l1, n as u64 * m);
    let (_, mu_m) = lambda_mu(&l1, m);
    let ratio = mu_nm / mu_m;
    if !(ratio < 2.0) {
        return Err(SymBasisError::DualHypothesis { nm: n as u64 * m, m, ratio });
    }
    Ok(block_translation_system(ZCase::DualBlocks, n, m, start, false))
}

fn block_translation_system(case: ZCase, n: usize, m: u64, start: u64, full_block: bool) -> ZSystem {
    let slots: Vec<u64> = (1..=n as u64 * m).map(|i| start + i).collect();
    let vectors = (0..n)
        .map(|l| {
            let lo = start + l as u64 * m;
            if full_block {
                (lo + 1..=lo + m).map(|s| (s, 1i64)).collect()
            } else {
                BTreeMap::from([(lo + 1, 1i64)])
            }
        })
        .collect();
    let perm = slots
        .iter()
        .map(|&s| {
            let off = s - start - 1;
            let (block, pos) = (off / m, off % m);
            (s, start + ((block + 1) % n as u64) * m + pos + 1)
        })
        .collect();
    ZSystem {
        case,
        n,
        slots,
        vectors,
        perm,
        scale_m: full_block.then_some(m),
    }
}

/// Walsh-sign system on 2^n slots: slot b (0-based within the block) encodes
/// the sign function sigma_b with sigma_b(l) = +1 iff bit (n-l) of b is set,
/// which lists sign functions lexicographically with -1 < 1. Then
/// z_l[b] = sigma_b(l) and the permutation is right bit rotation, which
/// realizes sigma -> sigma o tau^{-1} on indices.
pub fn case3_system(n: usize, start: u64) -> Result<ZSystem, SymBasisError> {
    if n == 0 || n > 20 {
        return Err(SymBasisError::ZeroN);
    }
    let size = 1u64 << n;
    let slots: Vec<u64> = (0..size).map(|b| start + 1 + b).collect();
    let vectors = (1..=n)
        .map(|l| {
            (0..size)
                .map(|b| {
                    let sign = if b >> (n - l) & 1 == 1 { 1i64 } else { -1 };
                    (start + 1 + b, sign)
                })
                .collect()
        })
        .collect();
    let perm = (0..size)
        .map(|b| {
            let rotated = (b >> 1) | ((b & 1) << (n - 1));
            (start + 1 + b, start + 1 + rotated)
        })
        .collect();
    Ok(ZSystem { case: ZCase::WalshSigns, n, slots, vectors, perm, scale_m: None })
}

/// Unit-vector system: z_l is the l-th slot of F, pi the n-cycle on F in
/// ascending order. The system the orbit engine instantiates on c0 and l^p.
pub fn unit_system(slots: &[u64]) -> Result<ZSystem, SymBasisError> {
    let n = slots.len();
    if n == 0 {
        return Err(SymBasisError::ZeroN);
    }
    let mut sorted = slots.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != n {
        return Err(SymBasisError::BadBlock);
    }
    let vectors = sorted.iter().map(|&s| BTreeMap::from([(s, 1i64)])).collect();
    let perm = (0..n).map(|i| (sorted[i], sorted[(i + 1) % n])).collect();
    Ok(ZSystem { case: ZCase::Unit, n, slots: sorted, vectors, perm, scale_m: None })
}

/// Exact check of the simulation property: the slot permutation sends z_l to
/// z_{tau(l)} for every l, with tau the coefficient cycle (1 ... n).
pub fn shift_simulation_check(sys: &ZSystem) -> bool {
    (0..sys.n).all(|l| sys.permuted_vector(l) == sys.vectors[(l + 1) % sys.n])
}

/// Inner bracketing of the constants relating ||sum a_l z_l|| to the
/// coefficient l^p norm: extrema of the ratio over spikes, the constant
/// vector, the alternating vector, and seeded random directions.
#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceEstimate {
    pub n: usize,
    pub norm: String,
    pub coeff_norm: String,
    pub lower: f64,
    pub upper: f64,
}

pub fn equivalence_estimate(
    sys: &ZSystem,
    ambient: &dyn SymmetricNorm,
    coeff: AmbientNorm,
    trials: u64,
    seed: u64,
) -> EquivalenceEstimate {
    let mut patterns: Vec<Vec<f64>> = Vec::new();
    for l in 0..sys.n {
        let mut spike = vec![0.0; sys.n];
        spike[l] = 1.0;
        patterns.push(spike);
    }
    patterns.push(vec![1.0; sys.n]);
    patterns.push((0..sys.n).map(|l| if l % 2 == 0 { 1.0 } else { -1.0 }).collect());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        patterns.push((0..sys.n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }

    let dense: Vec<Vec<f64>> = (0..sys.n).map(|l| sys.dense(l, ambient)).collect();
    let mut lower = f64::INFINITY;
    let mut upper = 0.0f64;
    for a in &patterns {
        let denom = coeff.eval(a);
        if denom < 1e-12 {
            continue;
        }
        let mut combo = vec![0.0; sys.slots.len()];
        for (l, &al) in a.iter().enumerate() {
            for (c, z) in combo.iter_mut().zip(&dense[l]) {
                *c += al * z;
            }
        }
        let ratio = ambient.eval(&combo) / denom;
        lower = lower.min(ratio);
        upper = upper.max(ratio);
    }
    EquivalenceEstimate {
        n: sys.n,
        norm: ambient.describe(),
        coeff_norm: coeff.describe(),
        lower,
        upper,
    }
}

/// Finite-horizon witness search for the block-averaging or dual-growth
/// hypotheses at a given n. No witness within m_max proves nothing beyond the
/// horizon; that outcome is reported, not defaulted.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "case", rename_all = "snake_case")]
pub enum CaseDetection {
    AveragedBlocks { m: u64, ratio: f64 },
    DualBlocks { m: u64, ratio: f64 },
    NoWitness { m_max: u64 },
}

pub fn detect_case(norm: &dyn SymmetricNorm, n: u64, m_max: u64) -> CaseDetection {
    for m in 1..=m_max {
        let (lam_nm, mu_nm) = lambda_mu(norm, n * m);
        let (lam_m, mu_m) = lambda_mu(norm, m);
        let ratio = lam_nm / lam_m;
        if ratio < 2.0 {
            return CaseDetection::AveragedBlocks { m, ratio };
        }
        let ratio = mu_nm / mu_m;
        if ratio < 2.0 {
            return CaseDetection::DualBlocks { m, ratio };
        }
    }
    CaseDetection::NoWitness { m_max }
}
