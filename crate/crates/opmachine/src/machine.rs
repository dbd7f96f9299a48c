//! The full operator on l2_d (+) X^{d-1}_2 with X = c0 or l^p and unit-vector
//! block systems: R(u, x) fixes u, shifts every block cyclically, and feeds
//! block k with the two-arm pattern scaled by eps_k a_{k,j}, where a_{k,j} =
//! <u, e_{w_k,j}> / rho(w_k, E).
//!
//! Per-block evaluation is independent given (T_k, m_k, eps_k, a_{k,j},
//! t mod T_k); norms reduce deterministically in block order. Floats appear
//! only in rho, the amplitudes (frozen to exact rationals once computed), and
//! final reporting; slot and norm arithmetic is exact.

use crate::carousel::{bump_counts, bump_sums, BumpSums};
use crate::exact::{ExactVal, SlotVal};
use crate::norm::PNorm;
use crate::rational::rational_from_f64;
use crate::schedule::{build_schedule, BlockSchedule, GrowthVariant, ScheduleError};
use crate::sphere::{
    build_net, enumerate_feeds, perp_basis, rho_to_set, BudgetRule, FeedEnumeration, Net,
    SphereError, SymmetricSet, UnitVector,
};
use num::bigint::BigInt;
use num::rational::BigRational;
use num::{Signed, ToPrimitive, Zero};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MachineError {
    #[error(transparent)]
    Sphere(#[from] SphereError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("k_max {k_max} exceeds the enumerated feed horizon {horizon}")]
    KMaxBeyondHorizon { k_max: usize, horizon: u64 },
    #[error("block {k} period does not fit the simulation word size")]
    BlockTooLarge { k: usize },
    #[error("dimension mismatch: machine expects d = {expect}")]
    DimensionMismatch { expect: usize },
    #[error("x must have exactly {expect} copies")]
    WrongCopyCount { expect: usize },
    #[error("x support at copy {copy}, slot {slot} lies outside the {dim} simulated slots")]
    SupportOutsideBlocks { copy: usize, slot: u64, dim: u64 },
    #[error("point lies in the target set; divergence certificates require membership conversely")]
    InTargetSet,
    #[error("point is outside the target set; use near_return for such points")]
    NotInTargetSet,
    #[error("stage {n} has no blocks within the simulated truncation")]
    StageOutOfRange { n: u32 },
    #[error("stage {n} not past the point's threshold stage {n0}")]
    StageTooEarly { n: u32, n0: u32 },
    #[error("oracle budget exceeded: {updates} coordinate updates > {budget}")]
    OracleBudget { updates: u64, budget: u64 },
    #[error("operation requires a unit sphere component")]
    NotUnit,
    #[error("coordinates must be finite")]
    BadCoordinates,
    #[error("functional references copy {copy}, slot {slot} outside the simulated slots")]
    BadFunctional { copy: usize, slot: u64 },
}

pub const ORACLE_BUDGET: u64 = 10_000_000;

#[derive(Clone, Debug)]
pub struct MachineConfig {
    pub d: usize,
    pub p: PNorm,
    pub set: SymmetricSet,
    /// Number of net stages N; feeds enumerate stages 1..=N.
    pub stages: u32,
    pub budget: BudgetRule,
    pub variant: GrowthVariant,
    /// Simulated block truncation; blocks beyond contribute tail bounds only.
    pub k_max: usize,
}

/// Simulated block k: period, width, and the contiguous slot range
/// (offset, offset + t_period] it occupies in every copy.
#[derive(Clone, Debug)]
pub struct BlockInfo {
    pub stage: u32,
    pub t_period: u64,
    pub m: u64,
    pub offset: u64,
}

pub struct Machine {
    pub config: MachineConfig,
    pub schedule: BlockSchedule,
    pub feeds: FeedEnumeration,
    pub blocks: Vec<BlockInfo>,
    /// Perpendicular frames e_{w_k, j} for every enumerated k.
    frames: Vec<Vec<UnitVector>>,
    /// L from the width estimates, as (L^p numerator view) and float.
    pub l_const: f64,
}

pub fn build_machine(config: MachineConfig) -> Result<Machine, MachineError> {
    if config.d < 2 || config.set.dim() != config.d {
        return Err(MachineError::DimensionMismatch { expect: config.set.dim().max(2) });
    }
    let nets: Vec<Net> = (1..=config.stages)
        .map(|n| build_net(config.d, n, &config.set))
        .collect::<Result<_, _>>()?;
    let feeds = enumerate_feeds(&nets, config.budget)?;
    let horizon = feeds.horizon();
    if config.k_max == 0 || config.k_max as u64 > horizon {
        return Err(MachineError::KMaxBeyondHorizon { k_max: config.k_max, horizon });
    }
    let stage_vec: Vec<u32> = (1..=horizon).map(|k| feeds.stage_of(k)).collect();
    let schedule = build_schedule(config.variant, config.p, &stage_vec)?;
    let mut blocks = Vec::with_capacity(config.k_max);
    let mut offset: u64 = 0;
    for k in 1..=config.k_max {
        let t_period = schedule.t_u64(k).ok_or(MachineError::BlockTooLarge { k })?;
        let m = schedule.m_u64(k).ok_or(MachineError::BlockTooLarge { k })?;
        blocks.push(BlockInfo { stage: feeds.stage_of(k as u64), t_period, m, offset });
        offset = offset.checked_add(t_period).ok_or(MachineError::BlockTooLarge { k })?;
    }
    let frames = (1..=horizon)
        .map(|k| {
            let w = &feeds.feed(k).point;
            debug_assert!(rho_to_set(w, &config.set) > 0.0);
            perp_basis(w)
        })
        .collect();
    let l_const = crate::carousel::estimate_constant_l(config.p);
    Ok(Machine { config, schedule, feeds, blocks, frames, l_const })
}

/// Finitely supported exact content of the d-1 copies of X.
#[derive(Clone, Debug, Default)]
pub struct XVector {
    pub copies: Vec<BTreeMap<u64, BigRational>>,
}

impl XVector {
    pub fn zero(d: usize) -> Self {
        XVector { copies: vec![BTreeMap::new(); d - 1] }
    }

    pub fn is_zero(&self) -> bool {
        self.copies.iter().all(|c| c.values().all(|v| v.is_zero()))
    }
}

/// A prepared point (u, x): exact u coordinates and the frozen amplitude
/// table. Amplitudes are computed once in floats and rationalized exactly, so
/// every downstream route shares identical exact inputs.
pub struct PointState<'a> {
    pub machine: &'a Machine,
    pub u: Vec<BigRational>,
    pub u_norm_sq: BigRational,
    pub x: XVector,
    /// Exact amplitudes for simulated blocks: amps[k-1][j].
    amps: Vec<Vec<BigRational>>,
    /// Float amplitudes for every enumerated block (tail bounds).
    amps_f64: Vec<Vec<f64>>,
}

/// One evaluated time step.
#[derive(Clone, Debug, PartialEq)]
pub struct OrbitRecord {
    pub t: u64,
    pub stage: u32,
    pub total: f64,
    pub shift_part: f64,
    /// Norm of the deposit content alone (all blocks, copies combined).
    pub perturb_part: f64,
    /// Pure-perturbation norm of each simulated block, copies combined.
    pub perturb_blocks: Vec<f64>,
    pub tail: f64,
    /// Exact ||R^t(u,x)||^2.
    pub total_sq: ExactVal,
    /// Exact squared norm of the shifted x part alone.
    pub shift_sq: BigRational,
}

struct EpsParts {
    /// Rational eps (p in {1, inf}) or the coefficient of sqrt(m) (p = 2).
    coeff: BigRational,
    /// Radicand m for p = 2; unused otherwise.
    radicand: u64,
    radical: bool,
}

impl Machine {
    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn copies(&self) -> usize {
        self.config.d - 1
    }

    pub fn k_max(&self) -> usize {
        self.config.k_max
    }

    /// Total simulated slots per copy.
    pub fn slot_dim(&self) -> u64 {
        self.blocks.last().map_or(0, |b| b.offset + b.t_period)
    }

    pub fn horizon(&self) -> u64 {
        self.feeds.horizon()
    }

    fn eps_parts(&self, k: usize) -> EpsParts {
        let eps = self.schedule.eps_k(k);
        match eps.as_rational() {
            Some(r) => EpsParts { coeff: r, radicand: 1, radical: false },
            None => {
                let (coeff, rad) = eps.radical_parts().expect("p = 2 radical form");
                EpsParts { coeff, radicand: rad.to_u64().expect("simulated width"), radical: true }
            }
        }
    }

    /// Block containing a slot (1-based slot in (offset, offset + T]).
    fn block_of_slot(&self, slot: u64) -> Option<usize> {
        if slot == 0 || slot > self.slot_dim() {
            return None;
        }
        let i = self
            .blocks
            .partition_point(|b| b.offset < slot);
        Some(i - 1)
    }

    /// Prepares a point for orbit evaluation. `u` is any finite vector of the
    /// ambient dimension (the operator is defined off the sphere too; u = 0
    /// yields the pure shift), x any exact content on simulated slots.
    pub fn state<'a>(&'a self, u: &[f64], x: XVector) -> Result<PointState<'a>, MachineError> {
        if u.len() != self.config.d {
            return Err(MachineError::DimensionMismatch { expect: self.config.d });
        }
        if u.iter().any(|c| !c.is_finite()) {
            return Err(MachineError::BadCoordinates);
        }
        if x.copies.len() != self.copies() {
            return Err(MachineError::WrongCopyCount { expect: self.copies() });
        }
        let dim = self.slot_dim();
        for (j, copy) in x.copies.iter().enumerate() {
            for &slot in copy.keys() {
                if slot == 0 || slot > dim {
                    return Err(MachineError::SupportOutsideBlocks { copy: j, slot, dim });
                }
            }
        }
        let u_rat: Vec<BigRational> = u.iter().map(|&c| rational_from_f64(c)).collect();
        let u_norm_sq = u_rat.iter().map(|c| c * c).sum();
        let mut amps = Vec::with_capacity(self.config.k_max);
        let mut amps_f64 = Vec::with_capacity(self.horizon() as usize);
        for k in 1..=self.horizon() {
            let feed = self.feeds.feed(k);
            let row: Vec<f64> = self.frames[(k - 1) as usize]
                .iter()
                .map(|e| {
                    let dot: f64 = e.coords().iter().zip(u).map(|(a, b)| a * b).sum();
                    dot / feed.rho_e
                })
                .collect();
            if k as usize <= self.config.k_max {
                amps.push(row.iter().map(|&a| rational_from_f64(a)).collect());
            }
            amps_f64.push(row);
        }
        Ok(PointState { machine: self, u: u_rat, u_norm_sq, x, amps, amps_f64 })
    }

    /// Stage of the width window [m_k, m_{k+1}) containing t; 0 before m_1.
    pub fn stage_at(&self, t: u64) -> u32 {
        let mut stage = 0;
        for k in 1..=self.horizon() as usize {
            match self.schedule.m_u64(k) {
                Some(m) if m <= t => stage = self.schedule.stage_of(k),
                _ => break,
            }
        }
        stage
    }
}

/// Norm accumulator for one copy of X.
enum CopyNorm {
    L1(BigRational),
    L2(ExactVal),
    Sup(BigRational),
}

impl CopyNorm {
    fn new(p: PNorm) -> Self {
        match p {
            PNorm::One => CopyNorm::L1(BigRational::zero()),
            PNorm::Two => CopyNorm::L2(ExactVal::zero()),
            PNorm::Inf => CopyNorm::Sup(BigRational::zero()),
        }
    }

    fn add_slot(&mut self, val: &SlotVal, radicand: u64) {
        match self {
            CopyNorm::L1(acc) => {
                debug_assert!(val.r.is_zero());
                *acc += val.q.abs();
            }
            CopyNorm::L2(acc) => val.square_into(radicand, acc),
            CopyNorm::Sup(acc) => {
                debug_assert!(val.r.is_zero());
                let a = val.q.abs();
                if a > *acc {
                    *acc = a;
                }
            }
        }
    }

    /// Bulk pure-perturbation update from closed-form count sums scaled by
    /// `scale` (the per-slot factor eps*a in the representation the norm
    /// needs).
    fn add_sums(&mut self, sums: &BumpSums, scale: &BigRational, radicand: u64) {
        match self {
            CopyNorm::L1(acc) => {
                *acc += scale.abs() * BigRational::from_integer(sums.abs_sum.clone());
            }
            CopyNorm::L2(acc) => {
                // (scale * c * sqrt(m))^2 summed: scale^2 * m * sum c^2.
                let m = BigRational::from_integer(BigInt::from(radicand));
                acc.add_rat(&(scale * scale * m * BigRational::from_integer(sums.sq_sum.clone())));
            }
            CopyNorm::Sup(acc) => {
                let v = scale.abs() * BigRational::from_integer(BigInt::from(sums.max_abs));
                if v > *acc {
                    *acc = v;
                }
            }
        }
    }

    /// Contribution of this copy to the squared total norm.
    fn into_sq(self) -> ExactVal {
        match self {
            CopyNorm::L1(v) | CopyNorm::Sup(v) => ExactVal::from_rat(&v * &v),
            CopyNorm::L2(acc) => acc,
        }
    }

    /// Squared value as a plain rational; panics on radical leftovers, which
    /// cannot occur for shift-only content.
    fn into_rational_sq(self) -> BigRational {
        let sq = self.into_sq();
        sq.as_rational().cloned().expect("shift part is rational")
    }
}

impl<'a> PointState<'a> {
    fn p(&self) -> PNorm {
        self.machine.config.p
    }

    pub fn amplitude(&self, k: usize, j: usize) -> &BigRational {
        &self.amps[k - 1][j]
    }

    pub fn amplitude_f64(&self, k: u64, j: usize) -> f64 {
        self.amps_f64[(k - 1) as usize][j]
    }

    /// l2 norm of the amplitude row of block k (= ||Delta_{w_k}(u)||_2).
    pub fn amp_row_l2(&self, k: u64) -> f64 {
        self.amps_f64[(k - 1) as usize].iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// Shifted x slots of copy j at time t: slot -> rational value.
    fn shifted_x(&self, j: usize, t: u64) -> BTreeMap<u64, BigRational> {
        let mut out = BTreeMap::new();
        for (&slot, v) in &self.x.copies[j] {
            let b = &self.machine.blocks[self.machine.block_of_slot(slot).expect("validated")];
            let pos0 = slot - b.offset - 1;
            let new_slot = b.offset + (pos0 + t % b.t_period) % b.t_period + 1;
            out.insert(new_slot, v.clone());
        }
        out
    }

    /// Complete slot values of copy j at time t (shift + perturbation).
    /// Values are (q, r) with r multiplying sqrt of the block's width.
    pub fn copy_values(&self, j: usize, t: u64) -> BTreeMap<u64, SlotVal> {
        let mut values: BTreeMap<u64, SlotVal> = self
            .shifted_x(j, t)
            .into_iter()
            .map(|(slot, q)| (slot, SlotVal::from_q(q)))
            .collect();
        for (k, block) in self.machine.blocks.iter().enumerate() {
            let a = &self.amps[k][j];
            if a.is_zero() {
                continue;
            }
            let eps = self.machine.eps_parts(k + 1);
            let scale = &eps.coeff * a;
            for (pos, &c) in &bump_counts(block.t_period, block.m, t) {
                let slot = block.offset + pos;
                let entry = values.entry(slot).or_insert_with(SlotVal::zero);
                let add = &scale * BigRational::from_integer(BigInt::from(c));
                if eps.radical {
                    entry.r += add;
                } else {
                    entry.q += add;
                }
                if entry.is_zero() {
                    values.remove(&slot);
                }
            }
        }
        values
    }

    /// Evaluates one time step: exact totals, split diagnostics, tail bound.
    pub fn orbit_norm(&self, t: u64) -> OrbitRecord {
        let machine = self.machine;
        let p = self.p();
        let copies = machine.copies();
        // Per-block deposit power sums at this time, shared across copies.
        // Counts are materialized only where deposits must be merged slotwise
        // with shifted x content; everywhere else the closed form suffices.
        let fed: Vec<bool> = (0..machine.blocks.len())
            .map(|k| (0..copies).any(|j| !self.amps[k][j].is_zero()))
            .collect();
        let sums: Vec<BumpSums> = machine
            .blocks
            .iter()
            .enumerate()
            .map(|(k, b)| {
                if fed[k] {
                    bump_sums(b.t_period, b.m, t)
                } else {
                    BumpSums::zero()
                }
            })
            .collect();
        let counts: Vec<BTreeMap<u64, i64>> = machine
            .blocks
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let range = b.offset + 1..=b.offset + b.t_period;
                if fed[k]
                    && (0..copies).any(|j| self.x.copies[j].range(range.clone()).next().is_some())
                {
                    bump_counts(b.t_period, b.m, t)
                } else {
                    BTreeMap::new()
                }
            })
            .collect();

        let mut total_sq = ExactVal::from_rat(self.u_norm_sq.clone());
        let mut shift_sq = BigRational::zero();
        let mut perturb_total_sq = ExactVal::zero();
        let mut perturb_sq: Vec<ExactVal> = vec![ExactVal::zero(); machine.blocks.len()];

        for j in 0..copies {
            let shifted = self.shifted_x(j, t);
            let mut copy_norm = CopyNorm::new(p);
            let mut shift_norm = CopyNorm::new(p);
            let mut deposit_norm = CopyNorm::new(p);
            for (k, block) in machine.blocks.iter().enumerate() {
                let a = &self.amps[k][j];
                let range = block.offset + 1..=block.offset + block.t_period;
                let block_x: Vec<(u64, BigRational)> =
                    shifted.range(range).map(|(&s, v)| (s, v.clone())).collect();
                if a.is_zero() && block_x.is_empty() {
                    continue;
                }
                let eps = machine.eps_parts(k + 1);
                let scale = &eps.coeff * a;
                let radicand = if eps.radical { eps.radicand } else { 1 };
                // Per-block pure perturbation norm (diagnostic).
                if !a.is_zero() {
                    let mut alone = CopyNorm::new(p);
                    alone.add_sums(&sums[k], &scale, radicand);
                    perturb_sq[k].add(&alone.into_sq());
                    deposit_norm.add_sums(&sums[k], &scale, radicand);
                }
                for (_, q) in &block_x {
                    shift_norm.add_slot(&SlotVal::from_q(q.clone()), radicand);
                }
                if block_x.is_empty() {
                    copy_norm.add_sums(&sums[k], &scale, radicand);
                    continue;
                }
                // Slotwise union of shifted x and deposits inside this block.
                let mut slots: BTreeMap<u64, SlotVal> = block_x
                    .into_iter()
                    .map(|(slot, q)| (slot, SlotVal::from_q(q)))
                    .collect();
                if !a.is_zero() {
                    for (pos, &c) in &counts[k] {
                        let slot = block.offset + pos;
                        let entry = slots.entry(slot).or_insert_with(SlotVal::zero);
                        let add = &scale * BigRational::from_integer(BigInt::from(c));
                        if eps.radical {
                            entry.r += add;
                        } else {
                            entry.q += add;
                        }
                    }
                }
                for val in slots.values() {
                    copy_norm.add_slot(val, radicand);
                }
            }
            total_sq.add(&copy_norm.into_sq());
            shift_sq += shift_norm.into_rational_sq();
            perturb_total_sq.add(&deposit_norm.into_sq());
        }

        OrbitRecord {
            t,
            stage: machine.stage_at(t),
            total: total_sq.eval_f64().max(0.0).sqrt(),
            shift_part: shift_sq.to_f64().unwrap_or(0.0).max(0.0).sqrt(),
            perturb_part: perturb_total_sq.eval_f64().max(0.0).sqrt(),
            perturb_blocks: perturb_sq.iter().map(|e| e.eval_f64().max(0.0).sqrt()).collect(),
            tail: self.tail_bound_at(machine.config.k_max, t),
            total_sq,
            shift_sq,
        }
    }

    /// Sup-over-time truncation bound: copies combine in l2, blocks beyond
    /// `from_k` contribute the uniform width estimate L n_k |a_{k,j}|.
    pub fn tail_bound(&self, from_k: usize) -> f64 {
        self.tail_with_factor(from_k, |_| 1.0)
    }

    /// Time-aware refinement: before t reaches m_k the deposit mass is still
    /// growing, met by the small-time estimate factor min(1, t/m_k).
    pub fn tail_bound_at(&self, from_k: usize, t: u64) -> f64 {
        self.tail_with_factor(from_k, |k| {
            match self.machine.schedule.m_k(k).to_f64() {
                Some(m) if m > 0.0 => (t as f64 / m).min(1.0),
                _ => 1.0,
            }
        })
    }

    fn tail_with_factor(&self, from_k: usize, factor: impl Fn(usize) -> f64) -> f64 {
        let machine = self.machine;
        let l = machine.l_const;
        let mut sq = 0.0;
        for j in 0..machine.copies() {
            let mut s = 0.0;
            for k in (from_k + 1)..=machine.horizon() as usize {
                let n = machine.schedule.stage_of(k) as f64;
                let a = self.amps_f64[k - 1][j].abs();
                s += l * n * factor(k) * a;
            }
            sq += s * s;
        }
        sq.sqrt()
    }
}

/// Stage certificate from a divergence run: every sampled t in the stage
/// window satisfies total >= bound - tail.
#[derive(Clone, Debug)]
pub struct StageCertificate {
    pub stage: u32,
    pub block: usize,
    pub window: (u64, u64),
    pub samples: Vec<u64>,
    pub min_total: f64,
    /// (2/(p+1))^(1/p) * n * l2(amplitude row).
    pub bound: f64,
    pub max_tail: f64,
    /// min over samples of total - (bound - tail).
    pub min_slack: f64,
}

/// Near-return measurement at one stage.
#[derive(Clone, Debug)]
pub struct NearReturn {
    pub stage: u32,
    pub k_n: usize,
    pub t: u64,
    pub deficit: f64,
    pub deficit_sq: ExactVal,
    /// Width-estimate envelope on the deficit.
    pub bound: f64,
    /// ||Delta_{w_{k_n}}(u)||_2.
    pub delta_l2: f64,
}

impl<'a> PointState<'a> {
    /// Lower-bound constant (2/(p+1))^(1/p), = 1 for the sup norm.
    fn divergence_constant(&self) -> f64 {
        match self.p().finite_p() {
            Some(p) => (2.0 / (p as f64 + 1.0)).powf(1.0 / p as f64),
            None => 1.0,
        }
    }

    /// Blocks of stage n within the simulated truncation, 1-based.
    fn stage_blocks(&self, n: u32) -> Result<Vec<usize>, MachineError> {
        let range = self
            .machine
            .feeds
            .stage_range(n)
            .ok_or(MachineError::StageOutOfRange { n })?;
        let ks: Vec<usize> = range
            .filter(|&k| k <= self.machine.config.k_max as u64)
            .map(|k| k as usize)
            .collect();
        if ks.is_empty() {
            return Err(MachineError::StageOutOfRange { n });
        }
        Ok(ks)
    }

    /// For u in the target set: per-stage certified growth. The representative
    /// block maximizes the amplitude row; sampled times cover the window
    /// edges, its interior, and the period quarters.
    pub fn divergence_trace(&self, stages: &[u32]) -> Result<Vec<StageCertificate>, MachineError> {
        if !self.in_target_set() {
            return Err(MachineError::NotInTargetSet);
        }
        let mut out = Vec::new();
        for &n in stages {
            let ks = self.stage_blocks(n)?;
            let rep = *ks
                .iter()
                .max_by(|&&a, &&b| {
                    self.amp_row_l2(a as u64)
                        .partial_cmp(&self.amp_row_l2(b as u64))
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .unwrap();
            let block = &self.machine.blocks[rep - 1];
            let (m, t_per) = (block.m, block.t_period);
            let window = (m, t_per - m);
            let mut samples: Vec<u64> = [
                m,
                m + 1,
                2 * m,
                t_per / 4,
                t_per / 2,
                t_per - 2 * m,
                t_per - m - 1,
            ]
            .into_iter()
            .filter(|&t| t >= window.0 && t < window.1)
            .collect();
            samples.sort_unstable();
            samples.dedup();
            let bound = self.divergence_constant() * n as f64 * self.amp_row_l2(rep as u64);
            let mut min_total = f64::INFINITY;
            let mut max_tail: f64 = 0.0;
            let mut min_slack = f64::INFINITY;
            for &t in &samples {
                let rec = self.orbit_norm(t);
                min_total = min_total.min(rec.total);
                max_tail = max_tail.max(rec.tail);
                min_slack = min_slack.min(rec.total - (bound - rec.tail));
            }
            out.push(StageCertificate {
                stage: n,
                block: rep,
                window,
                samples,
                min_total,
                bound,
                max_tail,
                min_slack,
            });
        }
        Ok(out)
    }

    fn unit_u(&self) -> Result<UnitVector, MachineError> {
        let coords: Vec<f64> = self.u.iter().map(|c| c.to_f64().unwrap_or(0.0)).collect();
        UnitVector::new(coords).map_err(|_| MachineError::NotUnit)
    }

    pub fn in_target_set(&self) -> bool {
        self.unit_u().map(|u| self.machine.config.set.contains(&u)).unwrap_or(false)
    }

    /// Threshold stage n0: smallest n0 >= 0 with rho(u, E) >= 2^-n0.
    pub fn threshold_stage(&self) -> Result<u32, MachineError> {
        let u = self.unit_u()?;
        let dist = rho_to_set(&u, &self.machine.config.set);
        if dist <= crate::sphere::MEMBERSHIP_TOL {
            return Err(MachineError::InTargetSet);
        }
        let mut n0 = 0u32;
        while dist < 0.5f64.powi(n0 as i32) {
            n0 += 1;
        }
        Ok(n0)
    }

    /// For u outside the target set and n past its threshold stage: the
    /// orbit's return deficit ||R^{T_{k_n - 1}}(u, 0) - (u, 0)|| at the
    /// stage-n block whose feed best approximates u. Blocks before k_n
    /// contribute exactly zero by period divisibility.
    pub fn near_return(&self, n: u32) -> Result<NearReturn, MachineError> {
        let n0 = self.threshold_stage()?;
        if n <= n0 {
            return Err(MachineError::StageTooEarly { n, n0 });
        }
        let ks = self.stage_blocks(n)?;
        let k_n = *ks
            .iter()
            .min_by(|&&a, &&b| {
                self.amp_row_l2(a as u64)
                    .partial_cmp(&self.amp_row_l2(b as u64))
                    .unwrap()
                    .then(a.cmp(&b))
            })
            .unwrap();
        let machine = self.machine;
        let t = machine
            .schedule
            .t_u64(k_n - 1)
            .ok_or(MachineError::BlockTooLarge { k: k_n - 1 })?;

        let mut deficit_sq = ExactVal::zero();
        for j in 0..machine.copies() {
            let mut copy_norm = CopyNorm::new(self.p());
            for (k, block) in machine.blocks.iter().enumerate() {
                let a = &self.amps[k][j];
                if a.is_zero() {
                    continue;
                }
                if k + 1 < k_n {
                    debug_assert_eq!(t % block.t_period, 0, "periods divide T_{}", k_n - 1);
                    continue;
                }
                let sums = bump_sums(block.t_period, block.m, t);
                let eps = machine.eps_parts(k + 1);
                let radicand = if eps.radical { eps.radicand } else { 1 };
                copy_norm.add_sums(&sums, &(&eps.coeff * a), radicand);
            }
            deficit_sq.add(&copy_norm.into_sq());
        }

        // Envelope: uniform estimate at k_n, small-time estimates after it.
        let l = machine.l_const;
        let mut bound_sq = 0.0;
        for j in 0..machine.copies() {
            let mut s = l * n as f64 * self.amps_f64[k_n - 1][j].abs();
            for r in (k_n + 1)..=machine.horizon() as usize {
                let nr = machine.schedule.stage_of(r) as f64;
                let ratio = match machine.schedule.m_k(r).to_f64() {
                    Some(m) if m > 0.0 => (t as f64 / m).min(1.0),
                    _ => 1.0,
                };
                s += l * nr * ratio * self.amps_f64[r - 1][j].abs();
            }
            bound_sq += s * s;
        }

        Ok(NearReturn {
            stage: n,
            k_n,
            t,
            deficit: deficit_sq.eval_f64().max(0.0).sqrt(),
            deficit_sq,
            bound: bound_sq.sqrt(),
            delta_l2: self.amp_row_l2(k_n as u64),
        })
    }

    /// f(R^{T_k}(u,x)) - f(u,x) for a finitely supported functional on the
    /// copies, exactly. Zero whenever u = 0 and x lives on blocks <= k.
    pub fn weak_probe(
        &self,
        functional: &[(usize, u64, BigRational)],
        k: usize,
    ) -> Result<ExactVal, MachineError> {
        let dim = self.machine.slot_dim();
        for (copy, slot, _) in functional {
            if *copy >= self.machine.copies() || *slot == 0 || *slot > dim {
                return Err(MachineError::BadFunctional { copy: *copy, slot: *slot });
            }
        }
        let t = self
            .machine
            .schedule
            .t_u64(k)
            .ok_or(MachineError::BlockTooLarge { k })?;
        let mut diff = ExactVal::zero();
        let mut per_copy: BTreeMap<usize, Vec<(u64, BigRational)>> = BTreeMap::new();
        for (copy, slot, coef) in functional {
            per_copy.entry(*copy).or_default().push((*slot, coef.clone()));
        }
        for (copy, coeffs) in per_copy {
            let values = self.copy_values(copy, t);
            for (slot, coef) in coeffs {
                let val = values.get(&slot).cloned().unwrap_or_else(SlotVal::zero);
                let base = self.x.copies[copy].get(&slot).cloned().unwrap_or_else(BigRational::zero);
                diff.add_rat(&(&coef * (&val.q - base)));
                if !val.r.is_zero() {
                    let block = self.machine.block_of_slot(slot).expect("validated");
                    let eps = self.machine.eps_parts(block + 1);
                    debug_assert!(eps.radical);
                    diff.add_radical(eps.radicand, &coef * &val.r);
                }
            }
        }
        Ok(diff)
    }

    /// Brute-force oracle: materialize every simulated coordinate and apply
    /// the operator definition step by step (rotate each block, then deposit
    /// the two-arm feeds). Returns records for t = 0..=steps.
    pub fn dense_oracle(&self, steps: u64) -> Result<Vec<OrbitRecord>, MachineError> {
        let machine = self.machine;
        let dim = machine.slot_dim();
        let copies = machine.copies() as u64;
        let updates = (steps + 1).saturating_mul(dim).saturating_mul(copies);
        if updates > ORACLE_BUDGET {
            return Err(MachineError::OracleBudget { updates, budget: ORACLE_BUDGET });
        }

        let mut state: Vec<Vec<SlotVal>> = Vec::with_capacity(copies as usize);
        let mut shift_state: Vec<Vec<BigRational>> = Vec::with_capacity(copies as usize);
        for j in 0..machine.copies() {
            let mut dense = vec![SlotVal::zero(); dim as usize];
            let mut shift_dense = vec![BigRational::zero(); dim as usize];
            for (&slot, v) in &self.x.copies[j] {
                dense[(slot - 1) as usize] = SlotVal::from_q(v.clone());
                shift_dense[(slot - 1) as usize] = v.clone();
            }
            state.push(dense);
            shift_state.push(shift_dense);
        }

        let eps: Vec<EpsParts> = (1..=machine.config.k_max).map(|k| machine.eps_parts(k)).collect();
        let mut records = Vec::with_capacity(steps as usize + 1);
        for t in 0..=steps {
            records.push(self.record_from_dense(t, &state, &shift_state));
            if t == steps {
                break;
            }
            for j in 0..machine.copies() {
                for (k, block) in machine.blocks.iter().enumerate() {
                    let lo = block.offset as usize;
                    let hi = lo + block.t_period as usize;
                    state[j][lo..hi].rotate_right(1);
                    shift_state[j][lo..hi].rotate_right(1);
                    let a = &self.amps[k][j];
                    if a.is_zero() {
                        continue;
                    }
                    let feed = &eps[k].coeff * a;
                    for i in 0..block.m as usize {
                        let plus = &mut state[j][lo + i];
                        if eps[k].radical {
                            plus.r += &feed;
                        } else {
                            plus.q += &feed;
                        }
                        let minus = &mut state[j][lo + block.m as usize + i];
                        if eps[k].radical {
                            minus.r -= &feed;
                        } else {
                            minus.q -= &feed;
                        }
                    }
                }
            }
        }
        Ok(records)
    }

    fn record_from_dense(
        &self,
        t: u64,
        state: &[Vec<SlotVal>],
        shift_state: &[Vec<BigRational>],
    ) -> OrbitRecord {
        let machine = self.machine;
        let p = self.p();
        let mut total_sq = ExactVal::from_rat(self.u_norm_sq.clone());
        let mut shift_sq = BigRational::zero();
        let mut perturb_total_sq = ExactVal::zero();
        let mut perturb_sq: Vec<ExactVal> = vec![ExactVal::zero(); machine.blocks.len()];
        for j in 0..machine.copies() {
            let mut copy_norm = CopyNorm::new(p);
            let mut shift_norm = CopyNorm::new(p);
            let mut deposit_norm = CopyNorm::new(p);
            for (k, block) in machine.blocks.iter().enumerate() {
                let eps = machine.eps_parts(k + 1);
                let radicand = if eps.radical { eps.radicand } else { 1 };
                let lo = block.offset as usize;
                let hi = lo + block.t_period as usize;
                let mut alone = CopyNorm::new(p);
                for (val, base) in state[j][lo..hi].iter().zip(&shift_state[j][lo..hi]) {
                    if !val.is_zero() {
                        copy_norm.add_slot(val, radicand);
                    }
                    if !base.is_zero() {
                        shift_norm.add_slot(&SlotVal::from_q(base.clone()), radicand);
                    }
                    let pert = SlotVal { q: &val.q - base, r: val.r.clone() };
                    if !pert.is_zero() {
                        alone.add_slot(&pert, radicand);
                        deposit_norm.add_slot(&pert, radicand);
                    }
                }
                perturb_sq[k].add(&alone.into_sq());
            }
            total_sq.add(&copy_norm.into_sq());
            shift_sq += shift_norm.into_rational_sq();
            perturb_total_sq.add(&deposit_norm.into_sq());
        }
        OrbitRecord {
            t,
            stage: machine.stage_at(t),
            total: total_sq.eval_f64().max(0.0).sqrt(),
            shift_part: shift_sq.to_f64().unwrap_or(0.0).max(0.0).sqrt(),
            perturb_part: perturb_total_sq.eval_f64().max(0.0).sqrt(),
            perturb_blocks: perturb_sq.iter().map(|e| e.eval_f64().max(0.0).sqrt()).collect(),
            tail: self.tail_bound_at(machine.config.k_max, t),
            total_sq,
            shift_sq,
        }
    }
}

/// Worst-case one-step feed norms per stage: sum over stage-n blocks of
/// L * n * 2^(n+1) / m_k, the chain that makes the whole operator bounded.
/// On geometric schedules this is dominated by n * (4/5)^(dn) envelopes.
pub fn boundedness_series(machine: &Machine) -> Vec<(u32, f64)> {
    let l = machine.l_const;
    let mut out: Vec<(u32, f64)> = Vec::new();
    for k in 1..=machine.horizon() as usize {
        let n = machine.schedule.stage_of(k);
        let m = machine.schedule.m_k(k).to_f64().unwrap_or(f64::INFINITY);
        let term = l * n as f64 * 2f64.powi(n as i32 + 1) / m;
        match out.last_mut() {
            Some((stage, sum)) if *stage == n => *sum += term,
            _ => out.push((n, term)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::One;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    fn pair_e1() -> SymmetricSet {
        SymmetricSet::pair(UnitVector::basis(2, 0))
    }

    fn toy_machine(p: PNorm, stages: u32, k_max: usize) -> Machine {
        build_machine(MachineConfig {
            d: 2,
            p,
            set: pair_e1(),
            stages,
            budget: BudgetRule::Fixed { per_stage: 2 },
            variant: GrowthVariant::Toy { factor: 5 },
            k_max,
        })
        .unwrap()
    }

    #[test]
    fn toy_machine_layout() {
        let m = toy_machine(PNorm::Two, 2, 3);
        assert_eq!(m.horizon(), 4);
        let periods: Vec<u64> = m.blocks.iter().map(|b| b.t_period).collect();
        let widths: Vec<u64> = m.blocks.iter().map(|b| b.m).collect();
        assert_eq!(periods, vec![5, 25, 125]);
        assert_eq!(widths, vec![1, 4, 21]);
        assert_eq!(m.blocks[2].offset, 30);
        assert_eq!(m.slot_dim(), 155);
        assert_eq!(m.blocks.iter().map(|b| b.stage).collect::<Vec<_>>(), vec![1, 1, 2]);
    }

    #[test]
    fn record_at_t0_is_initial_norm() {
        let m = toy_machine(PNorm::Two, 2, 3);
        let mut x = XVector::zero(2);
        x.copies[0].insert(3, rat(1, 2));
        x.copies[0].insert(140, rat(-2, 1));
        let st = m.state(&[0.0, 1.0], x).unwrap();
        let rec = st.orbit_norm(0);
        assert_eq!(rec.stage, 0);
        // ||u||^2 = 1, ||x||^2 = 1/4 + 4.
        assert!(rec.total_sq.eq_rational(&rat(21, 4)));
        assert_eq!(rec.shift_sq, rat(17, 4));
        assert!(rec.perturb_blocks.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_matches_closed_form_with_mixing() {
        let m = toy_machine(PNorm::Two, 2, 3);
        let mut x = XVector::zero(2);
        x.copies[0].insert(2, rat(3, 7));
        x.copies[0].insert(31, rat(-1, 3));
        let st = m.state(&[0.0, 1.0], x).unwrap();
        let records = st.dense_oracle(30).unwrap();
        for (t, rec) in records.iter().enumerate() {
            assert_eq!(*rec, st.orbit_norm(t as u64), "t = {t}");
        }
    }

    #[test]
    fn oracle_matches_closed_form_l1_and_sup() {
        for p in [PNorm::One, PNorm::Inf] {
            let m = toy_machine(p, 2, 2);
            let mut x = XVector::zero(2);
            x.copies[0].insert(7, rat(2, 5));
            let st = m.state(&[0.6, 0.8], x).unwrap();
            let records = st.dense_oracle(26).unwrap();
            for (t, rec) in records.iter().enumerate() {
                assert_eq!(*rec, st.orbit_norm(t as u64), "p = {p:?}, t = {t}");
            }
        }
    }

    #[test]
    fn single_block_matches_carousel_counts() {
        let m = toy_machine(PNorm::Two, 1, 1);
        let st = m.state(&[0.0, 1.0], XVector::zero(2)).unwrap();
        let a = st.amplitude(1, 0).clone();
        assert!(!a.is_zero());
        // eps_1 = n/m^2 = 1; value coefficient of sqrt(1) per count.
        for t in 0..12u64 {
            let counts = bump_counts(5, 1, t);
            let sq: i64 = counts.values().map(|c| c * c).sum();
            let expect = &a * &a * rat(sq, 1) + BigRational::one();
            assert!(st.orbit_norm(t).total_sq.eq_rational(&expect), "t = {t}");
        }
    }

    #[test]
    fn shift_alone_is_isometric_and_periodic() {
        let m = toy_machine(PNorm::Two, 2, 3);
        let mut x = XVector::zero(2);
        x.copies[0].insert(1, rat(1, 3));
        x.copies[0].insert(9, rat(5, 2));
        x.copies[0].insert(154, rat(-7, 4));
        let st = m.state(&[0.0, 0.0], x.clone()).unwrap();
        let norm_sq = rat(1, 9) + rat(25, 4) + rat(49, 16);
        for t in 0..40u64 {
            let rec = st.orbit_norm(t);
            assert!(rec.total_sq.eq_rational(&norm_sq), "t = {t}");
            assert_eq!(rec.shift_sq, norm_sq);
        }
        // All periods divide T_3 = 125: exact coordinate return.
        let back = st.copy_values(0, 125);
        let expect: BTreeMap<u64, SlotVal> = x.copies[0]
            .iter()
            .map(|(&s, v)| (s, SlotVal::from_q(v.clone())))
            .collect();
        assert_eq!(back, expect);
    }

    #[test]
    fn weak_probe_vanishes_at_supported_periods() {
        let m = toy_machine(PNorm::Two, 2, 3);
        let mut x = XVector::zero(2);
        x.copies[0].insert(7, rat(1, 1));
        let st = m.state(&[0.0, 0.0], x).unwrap();
        // Functional on block 2 content; u = 0 so no deposits at all.
        let probe = st.weak_probe(&[(0, 7, rat(2, 3)), (0, 12, rat(-1, 2))], 2).unwrap();
        assert!(probe.is_zero());
        let bad = st.weak_probe(&[(0, 200, rat(1, 1))], 2);
        assert!(matches!(bad, Err(MachineError::BadFunctional { .. })));
    }

    #[test]
    fn unit_amplitudes_on_target_set() {
        let m = toy_machine(PNorm::Two, 3, 6);
        let st = m.state(&[1.0, 0.0], XVector::zero(2)).unwrap();
        for k in 1..=m.horizon() {
            assert!(
                (st.amp_row_l2(k) - 1.0).abs() < 1e-9,
                "k = {k}: {}",
                st.amp_row_l2(k)
            );
        }
    }

    #[test]
    fn own_feed_point_gets_no_deposit() {
        let m = toy_machine(PNorm::Two, 2, 2);
        let w = m.feeds.feed(1).point.clone();
        let st = m.state(w.coords(), XVector::zero(2)).unwrap();
        assert!(st.amplitude_f64(1, 0).abs() < 1e-10);
    }

    #[test]
    fn divergence_trace_certifies_stage_windows() {
        let m = toy_machine(PNorm::Two, 2, 4);
        let st = m.state(&[1.0, 0.0], XVector::zero(2)).unwrap();
        let certs = st.divergence_trace(&[1, 2]).unwrap();
        assert_eq!(certs.len(), 2);
        for cert in &certs {
            assert!(!cert.samples.is_empty());
            assert!(cert.min_slack > 0.0, "stage {}: {:?}", cert.stage, cert);
            let c = (2.0f64 / 3.0).sqrt();
            assert!((cert.bound - c * cert.stage as f64 * 1.0).abs() < 1e-9);
        }
        let off = m.state(&[0.0, 1.0], XVector::zero(2)).unwrap();
        assert!(matches!(
            off.divergence_trace(&[1]),
            Err(MachineError::NotInTargetSet)
        ));
    }

    #[test]
    fn tail_bound_shrinks_and_vanishes_at_horizon() {
        let m = toy_machine(PNorm::Two, 3, 6);
        let st = m.state(&[1.0, 0.0], XVector::zero(2)).unwrap();
        assert_eq!(st.tail_bound(6), 0.0);
        let mut prev = f64::INFINITY;
        for k in 1..=6 {
            let b = st.tail_bound(k);
            assert!(b <= prev);
            prev = b;
        }
        assert!(st.tail_bound_at(4, 1) <= st.tail_bound(4));
    }

    #[test]
    fn near_return_deficit_within_envelope() {
        let m = toy_machine(PNorm::Two, 3, 6);
        // rho(u, E) = 0.8: threshold stage 1.
        let st = m.state(&[0.6, 0.8], XVector::zero(2)).unwrap();
        assert_eq!(st.threshold_stage().unwrap(), 1);
        assert!(matches!(
            st.near_return(1),
            Err(MachineError::StageTooEarly { n: 1, n0: 1 })
        ));
        for n in [2u32, 3] {
            let nr = st.near_return(n).unwrap();
            assert_eq!(nr.stage, n);
            assert!(nr.deficit <= nr.bound * (1.0 + 1e-9), "{nr:?}");
            assert!(nr.deficit_sq.eval_f64() >= 0.0);
        }
        let on = m.state(&[1.0, 0.0], XVector::zero(2)).unwrap();
        assert!(matches!(on.near_return(2), Err(MachineError::InTargetSet)));
    }

    #[test]
    fn stage_windows_partition_time() {
        let m = toy_machine(PNorm::Two, 2, 4);
        // widths 1, 4, 21, 104.
        assert_eq!(m.stage_at(0), 0);
        assert_eq!(m.stage_at(1), 1);
        assert_eq!(m.stage_at(3), 1);
        assert_eq!(m.stage_at(4), 1);
        assert_eq!(m.stage_at(21), 2);
        assert_eq!(m.stage_at(500), 2);
    }

    #[test]
    fn boundedness_series_decays_under_geometric_envelope() {
        let m = build_machine(MachineConfig {
            d: 2,
            p: PNorm::Two,
            set: pair_e1(),
            stages: 4,
            budget: BudgetRule::Fixed { per_stage: 2 },
            variant: GrowthVariant::Geometric { d: 2 },
            k_max: 1,
        })
        .unwrap();
        let series = boundedness_series(&m);
        assert_eq!(series.len(), 4);
        let envelope = |n: u32| n as f64 * 0.8f64.powi(2 * n as i32);
        let c = series[0].1 / envelope(1);
        for &(n, s) in &series[1..] {
            assert!(s <= c * envelope(n) * (1.0 + 1e-9), "stage {n}: {s}");
        }
        for w in series.windows(2) {
            assert!(w[1].1 < w[0].1);
        }
    }

    #[test]
    fn state_validation() {
        let m = toy_machine(PNorm::Two, 2, 2);
        assert!(matches!(
            m.state(&[1.0], XVector::zero(2)),
            Err(MachineError::DimensionMismatch { .. })
        ));
        let mut x = XVector::zero(2);
        x.copies[0].insert(31, rat(1, 1));
        assert!(matches!(
            m.state(&[1.0, 0.0], x),
            Err(MachineError::SupportOutsideBlocks { slot: 31, .. })
        ));
        assert!(matches!(
            build_machine(MachineConfig {
                d: 2,
                p: PNorm::Two,
                set: pair_e1(),
                stages: 2,
                budget: BudgetRule::Fixed { per_stage: 2 },
                variant: GrowthVariant::Toy { factor: 5 },
                k_max: 9,
            }),
            Err(MachineError::KMaxBeyondHorizon { k_max: 9, horizon: 4 })
        ));
    }
}
