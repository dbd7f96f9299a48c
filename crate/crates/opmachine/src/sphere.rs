//! Real sphere geometry under the projective pseudometric
//! rho(u,v) = sqrt(1 - <u,v>^2), which identifies antipodal points: symmetric
//! target sets, perpendicular frames, deterministic covering nets per stage,
//! and the enumeration that feeds net points to machine blocks.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Membership tolerance: rho-to-set at or below this counts as "in the set".
pub const MEMBERSHIP_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SphereError {
    #[error("vector dimension {got} invalid: need d >= 2")]
    BadDimension { got: usize },
    #[error("cannot normalize a (near-)zero or non-finite vector")]
    NotNormalizable,
    #[error("symmetric set must have at least one component")]
    EmptySet,
    #[error("cap radius {0} outside (0, 1]")]
    BadCapRadius(f64),
    #[error("dimension mismatch: set is in R^{set}, vector in R^{vec}")]
    DimensionMismatch { set: usize, vec: usize },
    #[error("point lies in the target set (rho = {rho:.3e}); no transversal frame")]
    PointInSet { rho: f64 },
    #[error("stage net {stage} is empty; the set swallows the whole sphere at this mesh")]
    EmptyNet { stage: u32 },
    #[error("stage budget must be positive")]
    ZeroBudget,
}

/// Unit vector in R^d, d >= 2, renormalized on construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector {
    coords: Vec<f64>,
}

impl UnitVector {
    pub fn new(coords: Vec<f64>) -> Result<Self, SphereError> {
        if coords.len() < 2 {
            return Err(SphereError::BadDimension { got: coords.len() });
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(SphereError::NotNormalizable);
        }
        let norm = coords.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Err(SphereError::NotNormalizable);
        }
        let coords = coords.into_iter().map(|c| c / norm).collect();
        Ok(UnitVector { coords })
    }

    pub fn basis(d: usize, i: usize) -> Self {
        let mut coords = vec![0.0; d];
        coords[i] = 1.0;
        UnitVector { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        self.coords.iter().zip(&other.coords).map(|(a, b)| a * b).sum()
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = SphereError;
    fn try_from(v: Vec<f64>) -> Result<Self, SphereError> {
        UnitVector::new(v)
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(u: UnitVector) -> Vec<f64> {
        u.coords
    }
}

/// rho(u, v) = sqrt(1 - <u,v>^2); zero iff u = +/-v.
pub fn rho(u: &UnitVector, v: &UnitVector) -> f64 {
    let dot = u.dot(v).clamp(-1.0, 1.0);
    (1.0 - dot * dot).max(0.0).sqrt()
}

/// One symmetric component: an antipodal pair {+/-center} or a closed cap of
/// given rho-radius around {+/-center}.
#[derive(Clone, Debug, PartialEq)]
pub enum SetComponent {
    Pair { center: UnitVector },
    Cap { center: UnitVector, radius: f64 },
}

impl SetComponent {
    fn center(&self) -> &UnitVector {
        match self {
            SetComponent::Pair { center } | SetComponent::Cap { center, .. } => center,
        }
    }

    fn distance(&self, u: &UnitVector) -> f64 {
        match self {
            SetComponent::Pair { center } => rho(u, center),
            SetComponent::Cap { center, radius } => (rho(u, center) - radius).max(0.0),
        }
    }
}

/// Finite union of symmetric components; closed and antipodally symmetric by
/// construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricSet {
    components: Vec<SetComponent>,
    dim: usize,
}

impl SymmetricSet {
    pub fn new(components: Vec<SetComponent>) -> Result<Self, SphereError> {
        let dim = match components.first() {
            Some(c) => c.center().dim(),
            None => return Err(SphereError::EmptySet),
        };
        for c in &components {
            if c.center().dim() != dim {
                return Err(SphereError::DimensionMismatch { set: dim, vec: c.center().dim() });
            }
            if let SetComponent::Cap { radius, .. } = c {
                if !(*radius > 0.0 && *radius <= 1.0) {
                    return Err(SphereError::BadCapRadius(*radius));
                }
            }
        }
        Ok(SymmetricSet { components, dim })
    }

    pub fn pair(center: UnitVector) -> Self {
        let dim = center.dim();
        SymmetricSet { components: vec![SetComponent::Pair { center }], dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[SetComponent] {
        &self.components
    }

    pub fn contains(&self, u: &UnitVector) -> bool {
        rho_to_set(u, self) <= MEMBERSHIP_TOL
    }
}

/// rho(u, E) = min over components.
pub fn rho_to_set(u: &UnitVector, set: &SymmetricSet) -> f64 {
    set.components
        .iter()
        .map(|c| c.distance(u))
        .fold(f64::INFINITY, f64::min)
}

/// Orthonormal frame of the orthogonal complement of v: Gram-Schmidt over the
/// canonical basis vectors except the one with the largest |<v, e_i>| (lowest
/// index on ties), processed in index order.
pub fn perp_basis(v: &UnitVector) -> Vec<UnitVector> {
    let d = v.dim();
    let mut excluded = 0usize;
    for i in 1..d {
        if v.coords[i].abs() > v.coords[excluded].abs() {
            excluded = i;
        }
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d - 1);
    for i in 0..d {
        if i == excluded {
            continue;
        }
        let mut w = vec![0.0; d];
        w[i] = 1.0;
        // Two Gram-Schmidt sweeps for numerical orthogonality.
        for _ in 0..2 {
            let dv: f64 = w.iter().zip(&v.coords).map(|(a, b)| a * b).sum();
            for (wc, vc) in w.iter_mut().zip(&v.coords) {
                *wc -= dv * vc;
            }
            for b in &basis {
                let db: f64 = w.iter().zip(b).map(|(a, c)| a * c).sum();
                for (wc, bc) in w.iter_mut().zip(b) {
                    *wc -= db * bc;
                }
            }
        }
        let norm = w.iter().map(|c| c * c).sum::<f64>().sqrt();
        for wc in w.iter_mut() {
            *wc /= norm;
        }
        basis.push(w);
    }
    basis.into_iter().map(|coords| UnitVector { coords }).collect()
}

/// Direction profile Delta_v(u) = (<u, e_{v,j}>)_j / rho(v, E).
/// Its Euclidean norm equals rho(u, v) / rho(v, E).
pub fn delta(v: &UnitVector, set: &SymmetricSet, u: &UnitVector) -> Result<Vec<f64>, SphereError> {
    if v.dim() != set.dim() || u.dim() != v.dim() {
        return Err(SphereError::DimensionMismatch { set: set.dim(), vec: v.dim().max(u.dim()) });
    }
    let dist = rho_to_set(v, set);
    if dist <= MEMBERSHIP_TOL {
        return Err(SphereError::PointInSet { rho: dist });
    }
    Ok(perp_basis(v).iter().map(|e| u.dot(e) / dist).collect())
}

pub fn delta_norm(d: &[f64]) -> f64 {
    d.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Stage-n covering net: deterministic offset angular grid, generated at
/// rho-mesh 2^-(n+1) and filtered to points with rho(., E) >= 2^-(n+1).
/// Every u with rho(u, E) >= 2^-n then has a net point within 2^-n.
#[derive(Clone, Debug)]
pub struct Net {
    pub stage: u32,
    pub d: usize,
    /// Guaranteed covering radius 2^-n for the filtered working set.
    pub covering_mesh: f64,
    /// Membership threshold and generation mesh 2^-(n+1).
    pub threshold: f64,
    pub points: Vec<UnitVector>,
    pub rho_e: Vec<f64>,
    dims: Vec<usize>,
    grid_map: HashMap<Vec<u32>, usize>,
}

fn angles_to_point(d: usize, polar: &[f64], azim: f64) -> Vec<f64> {
    // u = (cos p1, sin p1 cos p2, ..., sin p1 ... sin p_{d-2} cos a, ... sin a)
    let mut coords = Vec::with_capacity(d);
    let mut sin_prod = 1.0;
    for &p in polar {
        coords.push(sin_prod * p.cos());
        sin_prod *= p.sin();
    }
    coords.push(sin_prod * azim.cos());
    coords.push(sin_prod * azim.sin());
    coords
}

fn grid_dims(d: usize, n: u32) -> Vec<usize> {
    let delta = 0.5f64.powi(n as i32 + 1);
    if d == 2 {
        // Half circle with antipodal identification; even count, half-offset.
        let m = 2 * (std::f64::consts::PI * 2f64.powi(n as i32)).ceil() as usize;
        return vec![m];
    }
    let s = delta / (d - 1) as f64;
    let m_polar = (std::f64::consts::PI / s).ceil() as usize;
    let m_azim = (2.0 * std::f64::consts::PI / s).ceil() as usize;
    let mut dims = vec![m_polar; d - 2];
    dims.push(m_azim);
    dims
}

fn grid_point(d: usize, dims: &[usize], idx: &[u32]) -> Vec<f64> {
    if d == 2 {
        let theta = (idx[0] as f64 + 0.5) * std::f64::consts::PI / dims[0] as f64;
        return vec![theta.cos(), theta.sin()];
    }
    let polar: Vec<f64> = idx[..d - 2]
        .iter()
        .zip(dims)
        .map(|(&i, &m)| (i as f64 + 0.5) * std::f64::consts::PI / m as f64)
        .collect();
    let azim = idx[d - 2] as f64 * 2.0 * std::f64::consts::PI / dims[d - 2] as f64;
    angles_to_point(d, &polar, azim)
}

/// Multi-indices of u's grid cell plus a +/-2 window along each axis.
fn grid_window(d: usize, dims: &[usize], u: &UnitVector) -> Vec<Vec<u32>> {
    let mut centers: Vec<i64> = Vec::with_capacity(d - 1);
    if d == 2 {
        let mut theta = u.coords()[1].atan2(u.coords()[0]);
        if theta < 0.0 {
            theta += std::f64::consts::PI; // antipodal identification
        }
        if theta >= std::f64::consts::PI {
            theta -= std::f64::consts::PI;
        }
        centers.push((theta / std::f64::consts::PI * dims[0] as f64 - 0.5).round() as i64);
    } else {
        let mut rest: f64 = 1.0;
        for (axis, &m) in dims[..d - 2].iter().enumerate() {
            let c = (u.coords()[axis] / rest.max(1e-300)).clamp(-1.0, 1.0);
            let phi = c.acos();
            centers.push((phi / std::f64::consts::PI * m as f64 - 0.5).round() as i64);
            rest = (rest * rest - u.coords()[axis] * u.coords()[axis]).max(0.0).sqrt();
        }
        let azim = u.coords()[d - 1].atan2(u.coords()[d - 2]);
        let azim = if azim < 0.0 { azim + 2.0 * std::f64::consts::PI } else { azim };
        let m = dims[d - 2] as f64;
        centers.push((azim / (2.0 * std::f64::consts::PI) * m).round() as i64);
    }
    let mut out = vec![Vec::new()];
    for (axis, &c) in centers.iter().enumerate() {
        let m = dims[axis] as i64;
        let mut next = Vec::new();
        for base in &out {
            for off in -2i64..=2 {
                let i = (c + off).rem_euclid(m) as u32;
                let mut b = base.clone();
                b.push(i);
                next.push(b);
            }
        }
        out = next;
    }
    out
}

/// Builds the stage-n net for the working set W_n relative to `set`.
pub fn build_net(d: usize, n: u32, set: &SymmetricSet) -> Result<Net, SphereError> {
    if d < 2 {
        return Err(SphereError::BadDimension { got: d });
    }
    if set.dim() != d {
        return Err(SphereError::DimensionMismatch { set: set.dim(), vec: d });
    }
    let threshold = 0.5f64.powi(n as i32 + 1);
    let dims = grid_dims(d, n);
    let mut points = Vec::new();
    let mut rho_e = Vec::new();
    let mut grid_map = HashMap::new();

    let mut idx = vec![0u32; d - 1];
    loop {
        let coords = grid_point(d, &dims, &idx);
        if let Ok(u) = UnitVector::new(coords) {
            let dist = rho_to_set(&u, set);
            if dist >= threshold {
                grid_map.insert(idx.clone(), points.len());
                points.push(u);
                rho_e.push(dist);
            }
        }
        // Odometer increment over the multi-index.
        let mut axis = d - 1;
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            idx[axis] += 1;
            if (idx[axis] as usize) < dims[axis] {
                break;
            }
            idx[axis] = 0;
            if axis == 0 {
                return Ok(Net {
                    stage: n,
                    d,
                    covering_mesh: 0.5f64.powi(n as i32),
                    threshold,
                    points,
                    rho_e,
                    dims,
                    grid_map,
                });
            }
        }
        if idx.iter().all(|&i| i == 0) {
            break;
        }
    }
    Ok(Net {
        stage: n,
        d,
        covering_mesh: 0.5f64.powi(n as i32),
        threshold,
        points,
        rho_e,
        dims,
        grid_map,
    })
}

impl Net {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest net point found in the local grid window around u, with its
    /// rho distance; falls back to a full scan when the window misses.
    pub fn nearest(&self, u: &UnitVector) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for idx in grid_window(self.d, &self.dims, u) {
            if let Some(&pos) = self.grid_map.get(&idx) {
                let dist = rho(u, &self.points[pos]);
                if best.map_or(true, |(_, b)| dist < b) {
                    best = Some((pos, dist));
                }
            }
        }
        if best.map_or(true, |(_, d)| d > self.covering_mesh) {
            for (pos, p) in self.points.iter().enumerate() {
                let dist = rho(u, p);
                if best.map_or(true, |(_, b)| dist < b) {
                    best = Some((pos, dist));
                }
            }
        }
        best
    }
}

/// Per-stage slot budget for the feed enumeration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetRule {
    /// K * 2^(n(d-1)) slots at stage n: the default geometric rule.
    Dyadic { k: u64 },
    /// The same number of slots at every stage (desk-scale configurations).
    Fixed { per_stage: u64 },
}

impl BudgetRule {
    pub fn slots(&self, d: usize, n: u32) -> u64 {
        match *self {
            BudgetRule::Dyadic { k } => k * 2u64.pow(n * (d as u32 - 1)),
            BudgetRule::Fixed { per_stage } => per_stage,
        }
    }
}

/// Smallest K whose dyadic budget holds every provided net without truncation.
pub fn fitting_k(nets: &[Net]) -> u64 {
    nets.iter()
        .map(|net| {
            let denom = 2u64.pow(net.stage * (net.d as u32 - 1));
            (net.len() as u64).div_ceil(denom)
        })
        .max()
        .unwrap_or(1)
        .max(1)
}

#[derive(Clone, Debug)]
pub struct Feed {
    pub point: UnitVector,
    pub rho_e: f64,
    pub stage: u32,
    pub net_index: usize,
}

/// Stage-blocked enumeration w_k of net points, k = 1, 2, ...; stage n owns
/// the index block [C_n, C_{n+1}).
#[derive(Clone, Debug)]
pub struct FeedEnumeration {
    pub budget: BudgetRule,
    /// Reported uniform size bound (the K of the dyadic rule, or the fixed width).
    pub k_bound: u64,
    /// Boundaries C_1 = 1, ..., C_{N+1}.
    pub boundaries: Vec<u64>,
    feeds: Vec<Feed>,
}

impl FeedEnumeration {
    /// Total number of enumerated feeds (the horizon C_{N+1} - 1).
    pub fn horizon(&self) -> u64 {
        self.feeds.len() as u64
    }

    /// w_k for 1-based k <= horizon.
    pub fn feed(&self, k: u64) -> &Feed {
        &self.feeds[(k - 1) as usize]
    }

    pub fn stage_of(&self, k: u64) -> u32 {
        self.feed(k).stage
    }

    /// 1-based k range [C_n, C_{n+1}) of a stage.
    pub fn stage_range(&self, n: u32) -> Option<std::ops::Range<u64>> {
        let i = n as usize;
        if i == 0 || i >= self.boundaries.len() {
            return None;
        }
        Some(self.boundaries[i - 1]..self.boundaries[i])
    }
}

/// Fills each stage block: a net no larger than the budget is repeated
/// cyclically in grid order; a larger net is truncated to the slots farthest
/// from the target set (rank order), keeping the working core represented.
pub fn enumerate_feeds(nets: &[Net], budget: BudgetRule) -> Result<FeedEnumeration, SphereError> {
    let mut boundaries = vec![1u64];
    let mut feeds = Vec::new();
    let mut k_bound = match budget {
        BudgetRule::Dyadic { k } => k,
        BudgetRule::Fixed { per_stage } => per_stage,
    };
    if k_bound == 0 {
        return Err(SphereError::ZeroBudget);
    }
    for net in nets {
        let slots = budget.slots(net.d, net.stage);
        if slots == 0 {
            return Err(SphereError::ZeroBudget);
        }
        if net.is_empty() {
            return Err(SphereError::EmptyNet { stage: net.stage });
        }
        let order: Vec<usize> = if (net.len() as u64) <= slots {
            (0..net.len()).collect()
        } else {
            let mut ranked: Vec<usize> = (0..net.len()).collect();
            ranked.sort_by(|&a, &b| {
                net.rho_e[b].partial_cmp(&net.rho_e[a]).unwrap().then(a.cmp(&b))
            });
            ranked.truncate(slots as usize);
            ranked
        };
        for slot in 0..slots {
            let i = order[(slot % order.len() as u64) as usize];
            feeds.push(Feed {
                point: net.points[i].clone(),
                rho_e: net.rho_e[i],
                stage: net.stage,
                net_index: i,
            });
        }
        k_bound = k_bound.max(slots);
        boundaries.push(1 + feeds.len() as u64);
    }
    Ok(FeedEnumeration { budget, k_bound, boundaries, feeds })
}

/// Serde-facing description of a symmetric set, as used in CLI configs.
pub mod serde_support {
    use super::*;

    #[derive(Clone, Debug, Serialize, Deserialize)]
    #[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
    pub enum CapSpec {
        Pair { center: Vec<f64> },
        Cap { center: Vec<f64>, radius: f64 },
    }

    pub fn set_from_specs(specs: &[CapSpec]) -> Result<SymmetricSet, SphereError> {
        let mut comps = Vec::new();
        for s in specs {
            comps.push(match s {
                CapSpec::Pair { center } => SetComponent::Pair { center: UnitVector::new(center.clone())? },
                CapSpec::Cap { center, radius } => SetComponent::Cap {
                    center: UnitVector::new(center.clone())?,
                    radius: *radius,
                },
            });
        }
        SymmetricSet::new(comps)
    }

    pub fn specs_from_set(set: &SymmetricSet) -> Vec<CapSpec> {
        set.components()
            .iter()
            .map(|c| match c {
                SetComponent::Pair { center } => CapSpec::Pair { center: center.coords().to_vec() },
                SetComponent::Cap { center, radius } => {
                    CapSpec::Cap { center: center.coords().to_vec(), radius: *radius }
                }
            })
            .collect()
    }
}

pub use serde_support::set_from_specs;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn uv(v: &[f64]) -> UnitVector {
        UnitVector::new(v.to_vec()).unwrap()
    }

    fn pair_e1(d: usize) -> SymmetricSet {
        SymmetricSet::pair(UnitVector::basis(d, 0))
    }

    #[test]
    fn rho_examples() {
        let e1 = uv(&[1.0, 0.0]);
        let e2 = uv(&[0.0, 1.0]);
        assert_eq!(rho(&e1, &e1), 0.0);
        assert_eq!(rho(&e1, &e2), 1.0);
        let diag = uv(&[1.0, 1.0]);
        assert!((rho(&e1, &diag) - (0.5f64).sqrt()).abs() < 1e-15);
        let neg = uv(&[-1.0, 0.0]);
        assert!(rho(&e1, &neg) < 1e-12);
    }

    #[test]
    fn rho_to_set_examples() {
        let set = pair_e1(2);
        assert_eq!(rho_to_set(&uv(&[0.0, 1.0]), &set), 1.0);
        let theta: f64 = 0.3;
        let u = uv(&[theta.cos(), theta.sin()]);
        assert!((rho_to_set(&u, &set) - theta.sin()).abs() < 1e-12);
        assert!(set.contains(&uv(&[1.0, 0.0])));
        assert!(SymmetricSet::new(vec![]).is_err());

        let cap = SymmetricSet::new(vec![SetComponent::Cap {
            center: UnitVector::basis(3, 0),
            radius: 0.3,
        }])
        .unwrap();
        let v = uv(&[0.9, 0.4358898943540673, 0.0]);
        let d = rho(&v, &UnitVector::basis(3, 0));
        assert!((rho_to_set(&v, &cap) - (d - 0.3).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn cap_radius_validation() {
        assert!(SymmetricSet::new(vec![SetComponent::Cap {
            center: UnitVector::basis(2, 0),
            radius: 0.0,
        }])
        .is_err());
        assert!(SymmetricSet::new(vec![SetComponent::Cap {
            center: UnitVector::basis(2, 0),
            radius: 1.0,
        }])
        .is_ok());
    }

    #[test]
    fn perp_basis_examples() {
        let b = perp_basis(&UnitVector::basis(3, 0));
        assert_eq!(b.len(), 2);
        assert!((b[0].coords()[1] - 1.0).abs() < 1e-15);
        assert!((b[1].coords()[2] - 1.0).abs() < 1e-15);

        let v = uv(&[1.0, 1.0, 0.0]);
        let b = perp_basis(&v);
        // First frame vector lies in span(e1, e2), orthogonal to v.
        assert!(b[0].coords()[2].abs() < 1e-15);
        assert!(v.dot(&b[0]).abs() < 1e-14);

        let theta: f64 = 0.7;
        let v2 = uv(&[theta.cos(), theta.sin()]);
        let b2 = perp_basis(&v2);
        assert_eq!(b2.len(), 1);
        assert!(v2.dot(&b2[0]).abs() < 1e-14);
        assert!((b2[0].coords()[0].abs() - theta.sin()).abs() < 1e-14);

        // Orthonormality on a deterministic sample.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if let Ok(v) = UnitVector::new(v) {
                let b = perp_basis(&v);
                for (i, bi) in b.iter().enumerate() {
                    assert!(v.dot(bi).abs() < 1e-12);
                    for bj in &b[i + 1..] {
                        assert!(bi.dot(bj).abs() < 1e-12);
                    }
                    assert!((bi.dot(bi) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn delta_examples() {
        let set = pair_e1(2);
        let theta: f64 = 1.1;
        let v = uv(&[theta.cos(), theta.sin()]);
        // Delta_v(v) = 0.
        let d = delta(&v, &set, &v).unwrap();
        assert!(delta_norm(&d) < 1e-14);
        // Norm identity rho(u,v)/rho(v,E).
        let u = uv(&[0.3, -0.8]);
        let d = delta(&v, &set, &u).unwrap();
        assert!((delta_norm(&d) - rho(&u, &v) / rho_to_set(&v, &set)).abs() < 1e-10);
        // u in E: norm at least 1.
        let d = delta(&v, &set, &uv(&[1.0, 0.0])).unwrap();
        assert!(delta_norm(&d) >= 1.0 - 1e-12);
        // v in E rejected.
        assert!(matches!(
            delta(&uv(&[1.0, 0.0]), &set, &u),
            Err(SphereError::PointInSet { .. })
        ));
    }

    #[test]
    fn net_d2_stage1() {
        let set = pair_e1(2);
        let net = build_net(2, 1, &set).unwrap();
        assert!(!net.is_empty());
        for (p, dist) in net.points.iter().zip(&net.rho_e) {
            assert!((p.coords()[1].abs() - dist).abs() < 1e-12);
            assert!(*dist >= 0.25);
        }
        // Consecutive surviving grid points are within the generation mesh.
        for w in net.points.windows(2) {
            assert!(rho(&w[0], &w[1]) <= 0.25 + 1e-12);
        }
    }

    #[test]
    fn net_covers_working_set() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for d in [2usize, 3] {
            let set = pair_e1(d);
            for n in 1..=3u32 {
                let net = build_net(d, n, &set).unwrap();
                let mesh = net.covering_mesh;
                let mut checked = 0;
                while checked < 200 {
                    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let Ok(u) = UnitVector::new(v) else { continue };
                    if rho_to_set(&u, &set) < mesh {
                        continue;
                    }
                    checked += 1;
                    let (_, dist) = net.nearest(&u).unwrap();
                    assert!(dist <= mesh, "d={d} n={n} miss at {dist} > {mesh}");
                }
            }
        }
    }

    #[test]
    fn whole_sphere_cap_gives_empty_net() {
        let set = SymmetricSet::new(vec![SetComponent::Cap {
            center: UnitVector::basis(2, 0),
            radius: 1.0,
        }])
        .unwrap();
        let net = build_net(2, 2, &set).unwrap();
        assert!(net.is_empty());
        assert_eq!(
            enumerate_feeds(&[net], BudgetRule::Fixed { per_stage: 2 }).unwrap_err(),
            SphereError::EmptyNet { stage: 2 }
        );
    }

    #[test]
    fn enumeration_boundaries_and_repetition() {
        let set = pair_e1(2);
        let nets: Vec<Net> = (1..=3).map(|n| build_net(2, n, &set).unwrap()).collect();

        // Dyadic rule: C_2 = 1 + 2K for d = 2.
        let k = fitting_k(&nets);
        let feeds = enumerate_feeds(&nets, BudgetRule::Dyadic { k }).unwrap();
        assert_eq!(feeds.boundaries[0], 1);
        assert_eq!(feeds.boundaries[1], 1 + 2 * k);
        assert_eq!(feeds.stage_of(1), 1);
        assert_eq!(feeds.horizon(), (1..=3u32).map(|n| k * 2u64.pow(n)).sum::<u64>());

        // A single-point net cyclically fills a 4-slot block.
        let one = Net {
            stage: 1,
            d: 2,
            covering_mesh: 0.5,
            threshold: 0.25,
            points: vec![uv(&[0.0, 1.0])],
            rho_e: vec![1.0],
            dims: vec![1],
            grid_map: HashMap::new(),
        };
        let feeds = enumerate_feeds(&[one], BudgetRule::Fixed { per_stage: 4 }).unwrap();
        assert_eq!(feeds.horizon(), 4);
        for k in 1..=4 {
            assert_eq!(feeds.feed(k).point.coords(), &[0.0, 1.0]);
        }
    }

    #[test]
    fn truncated_stage_keeps_far_core() {
        let set = pair_e1(2);
        let net = build_net(2, 3, &set).unwrap();
        let feeds = enumerate_feeds(&[net.clone()], BudgetRule::Fixed { per_stage: 2 }).unwrap();
        let best = net.rho_e.iter().cloned().fold(0.0, f64::max);
        assert!((feeds.feed(1).rho_e - best).abs() < 1e-12);
        // Both selected points sit next to the set's far pole e2.
        for k in 1..=2 {
            assert!(rho(&feeds.feed(k).point, &uv(&[0.0, 1.0])) < 0.05);
        }
    }
}
