//! Finite-dimensional orbit trichotomy. A square real matrix splits the space
//! into generalized eigenspaces; Z collects those with |lambda| < 1, Y adds
//! the chain heads on the unit circle, and a vector's orbit diverges, stays
//! bounded away from zero, or decays according to where it sits relative to
//! Y and Z. Floating point cannot see an exact Jordan form, so eigenvalues
//! are clustered, chains come from a kernel staircase with a fixed rank
//! tolerance, and anything hugging the unit circle is rejected rather than
//! guessed: the trichotomy is discontinuous there.

use num::complex::Complex64;
use num::Zero;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pivot threshold for kernel/rank extraction, relative to the matrix scale.
pub const RANK_TOL: f64 = 1e-8;
/// |.|lambda| - 1| at or below this counts as on the unit circle.
pub const CIRCLE_TOL: f64 = 1e-6;
/// Cluster radius beyond which computed eigenvalues are distinct; between
/// CIRCLE_TOL and this the case is declared ill-conditioned.
pub const CLUSTER_TOL: f64 = 1e-4;
/// Membership band: coefficient ratios below the band are zero, above it
/// nonzero, inside it borderline (rejected).
pub const MEMBER_BAND: (f64, f64) = (1e-9, 1e-7);

pub const MAX_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum JordanError {
    #[error("matrix must be square, nonempty, at most {MAX_DIM} x {MAX_DIM}, with finite entries")]
    BadMatrix,
    #[error("ill-conditioned trichotomy: {0}")]
    IllConditioned(String),
    #[error("vector dimension {got} does not match matrix dimension {expect}")]
    DimensionMismatch { got: usize, expect: usize },
    #[error("orbit classification requires a nonzero vector")]
    ZeroVector,
    #[error("oracle needs at least 50 steps")]
    TooFewSteps,
}

#[derive(Clone, Debug)]
pub struct MatrixOperator {
    n: usize,
    rows: Vec<Vec<f64>>,
}

impl MatrixOperator {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, JordanError> {
        let n = rows.len();
        if n == 0 || n > MAX_DIM || rows.iter().any(|r| r.len() != n) {
            return Err(JordanError::BadMatrix);
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(JordanError::BadMatrix);
        }
        Ok(MatrixOperator { n, rows })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    fn complex(&self) -> Vec<Vec<Complex64>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&v| Complex64::new(v, 0.0)).collect())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OrbitClass {
    Diverges,
    BoundedAway,
    Decays,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EmpiricalClass {
    Diverges,
    BoundedAway,
    Decays,
    Undecided,
}

/// One Jordan chain: vectors[0] is the eigenvector head e_1 and
/// T e_{k+1} = lambda e_{k+1} + e_k up to the recorded residual.
#[derive(Clone, Debug)]
pub struct JordanChain {
    pub lambda: Complex64,
    pub vectors: Vec<Vec<Complex64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CoeffClass {
    /// Any chain vector with |lambda| > 1, or a non-head vector on the circle.
    Diverging,
    /// Chain head with |lambda| = 1.
    Head,
    /// Generalized eigenvector with |lambda| < 1.
    ZPart,
}

pub struct TrichotomyDecomposition {
    pub n: usize,
    pub chains: Vec<JordanChain>,
    /// Spectral radius of the restriction to Z (max inside-cluster modulus).
    pub alpha: f64,
    /// Worst chain-relation residual ||T e - lambda e - prev|| over norms.
    pub max_residual: f64,
    /// Basis change: column j of `basis` is the j-th chain vector in
    /// enumeration order; `inv` maps a vector to its chain coefficients.
    basis: Vec<Vec<Complex64>>,
    inv: Vec<Vec<Complex64>>,
    classes: Vec<CoeffClass>,
}

impl TrichotomyDecomposition {
    pub fn z_dim(&self) -> usize {
        self.classes.iter().filter(|c| **c == CoeffClass::ZPart).count()
    }

    pub fn y_dim(&self) -> usize {
        self.classes.iter().filter(|c| **c != CoeffClass::Diverging).count()
    }

    /// Chain coefficients of x in enumeration order.
    pub fn coefficients(&self, x: &[f64]) -> Vec<Complex64> {
        let xc: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        mat_vec(&self.inv, &xc)
    }

    /// Max coefficient leakage of T applied to Y-basis vectors onto the
    /// diverging directions, and of Z-basis vectors onto the rest; both are
    /// invariant subspaces, so this measures numerical drift only.
    pub fn invariance_defect(&self, t: &MatrixOperator) -> f64 {
        let tc = t.complex();
        let mut worst: f64 = 0.0;
        for (j, class) in self.classes.iter().enumerate() {
            let col: Vec<Complex64> = self.basis.iter().map(|row| row[j]).collect();
            let image = mat_vec(&tc, &col);
            let coeffs = mat_vec(&self.inv, &image);
            let scale = coeffs.iter().map(|c| c.norm()).fold(1.0, f64::max);
            for (i, c) in coeffs.iter().enumerate() {
                let leaks = match class {
                    CoeffClass::Diverging => false,
                    CoeffClass::Head => self.classes[i] == CoeffClass::Diverging,
                    CoeffClass::ZPart => self.classes[i] != CoeffClass::ZPart,
                };
                if leaks {
                    worst = worst.max(c.norm() / scale);
                }
            }
        }
        worst
    }
}

fn mat_vec(a: &[Vec<Complex64>], v: &[Complex64]) -> Vec<Complex64> {
    a.iter()
        .map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

fn mat_mul(a: &[Vec<Complex64>], b: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
    let n = a.len();
    let mut out = vec![vec![Complex64::zero(); n]; n];
    for i in 0..n {
        for (k, aik) in a[i].iter().enumerate() {
            if aik.norm_sqr() == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn mat_scale(a: &[Vec<Complex64>]) -> f64 {
    a.iter().flatten().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Row echelon with partial pivoting; returns pivot column list. `rows` is
/// modified in place.
fn echelon(rows: &mut Vec<Vec<Complex64>>, tol: f64) -> Vec<usize> {
    let nrows = rows.len();
    let ncols = if nrows == 0 { 0 } else { rows[0].len() };
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..ncols {
        let (best, best_val) = (r..nrows)
            .map(|i| (i, rows[i][c].norm()))
            .fold((r, 0.0), |acc, it| if it.1 > acc.1 { it } else { acc });
        if best_val <= tol {
            continue;
        }
        rows.swap(r, best);
        let inv = Complex64::new(1.0, 0.0) / rows[r][c];
        for j in c..ncols {
            rows[r][j] *= inv;
        }
        for i in 0..nrows {
            if i != r && rows[i][c].norm() > 0.0 {
                let f = rows[i][c];
                for j in c..ncols {
                    let sub = f * rows[r][j];
                    rows[i][j] -= sub;
                }
            }
        }
        pivots.push(c);
        r += 1;
        if r == nrows {
            break;
        }
    }
    pivots
}

/// Kernel basis of a (possibly rectangular stack of) rows.
fn kernel_basis(a: &[Vec<Complex64>], tol: f64) -> Vec<Vec<Complex64>> {
    let ncols = if a.is_empty() { 0 } else { a[0].len() };
    let mut rows = a.to_vec();
    let pivots = echelon(&mut rows, tol);
    let pivot_set: std::collections::HashSet<usize> = pivots.iter().copied().collect();
    let mut basis = Vec::new();
    for free in 0..ncols {
        if pivot_set.contains(&free) {
            continue;
        }
        let mut v = vec![Complex64::zero(); ncols];
        v[free] = Complex64::new(1.0, 0.0);
        for (r, &pc) in pivots.iter().enumerate() {
            v[pc] = -rows[r][free];
        }
        basis.push(v);
    }
    basis
}

fn rank_of(a: &[Vec<Complex64>], tol: f64) -> usize {
    let mut rows = a.to_vec();
    echelon(&mut rows, tol).len()
}

/// Inverts a square complex matrix; None when a pivot falls under tol.
fn invert(a: &[Vec<Complex64>], tol: f64) -> Option<Vec<Vec<Complex64>>> {
    let n = a.len();
    let mut aug: Vec<Vec<Complex64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| {
                if i == j {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::zero()
                }
            }));
            r
        })
        .collect();
    for c in 0..n {
        let (best, best_val) = (c..n)
            .map(|i| (i, aug[i][c].norm()))
            .fold((c, 0.0), |acc, it| if it.1 > acc.1 { it } else { acc });
        if best_val <= tol {
            return None;
        }
        aug.swap(c, best);
        let inv = Complex64::new(1.0, 0.0) / aug[c][c];
        for j in 0..2 * n {
            aug[c][j] *= inv;
        }
        for i in 0..n {
            if i != c && aug[i][c].norm() > 0.0 {
                let f = aug[i][c];
                for j in 0..2 * n {
                    let sub = f * aug[c][j];
                    aug[i][j] -= sub;
                }
            }
        }
    }
    Some(aug.into_iter().map(|r| r[n..].to_vec()).collect())
}

fn vec_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Eigenvalue clusters: (representative, multiplicity), grouped within
/// CLUSTER_TOL * (1 + max modulus).
fn cluster_eigenvalues(eigs: &[Complex64]) -> Vec<(Complex64, usize)> {
    let scale = 1.0 + eigs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let tol = CLUSTER_TOL * scale;
    let mut clusters: Vec<(Complex64, usize)> = Vec::new();
    for &e in eigs {
        match clusters.iter_mut().find(|(rep, _)| (*rep - e).norm() <= tol) {
            Some((rep, count)) => {
                // Running mean keeps the representative centered.
                *rep = (*rep * (*count as f64) + e) / (*count as f64 + 1.0);
                *count += 1;
            }
            None => clusters.push((e, 1)),
        }
    }
    clusters
}

/// Kernel staircase: Jordan chains of B = A - lambda I restricted to the
/// cluster of algebraic multiplicity mu. Chains come back head-first.
fn staircase_chains(
    b: &[Vec<Complex64>],
    mu: usize,
    tol: f64,
) -> Result<Vec<Vec<Vec<Complex64>>>, JordanError> {
    let n = b.len();
    let mut kernels: Vec<Vec<Vec<Complex64>>> = vec![Vec::new()]; // kernels[j] = ker(B^j)
    let mut dims = vec![0usize];
    let mut power: Vec<Vec<Complex64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        Complex64::new(1.0, 0.0)
                    } else {
                        Complex64::zero()
                    }
                })
                .collect()
        })
        .collect();
    while *dims.last().unwrap() < mu {
        if kernels.len() > n + 1 {
            return Err(JordanError::IllConditioned(
                "kernel staircase does not reach the cluster multiplicity".into(),
            ));
        }
        power = mat_mul(&power, b);
        let scale = mat_scale(&power).max(1.0);
        let ker = kernel_basis(&power, tol * scale);
        if ker.len() < *dims.last().unwrap() {
            return Err(JordanError::IllConditioned("kernel dimensions not monotone".into()));
        }
        dims.push(ker.len());
        kernels.push(ker);
    }
    let m_max = kernels.len() - 1;
    if dims[m_max] != mu {
        return Err(JordanError::IllConditioned(format!(
            "cluster multiplicity {mu} vs kernel dimension {}",
            dims[m_max]
        )));
    }

    let mut chains: Vec<Vec<Vec<Complex64>>> = Vec::new();
    for j in (1..=m_max).rev() {
        let target = dims[j] - dims[j - 1];
        // Height-j vectors of chains already generated at higher levels.
        let mut height: Vec<Vec<Complex64>> =
            chains.iter().filter(|c| c.len() > j).map(|c| c[c.len() - j].clone()).collect();
        while height.len() < target {
            // Pick a kernel vector independent of ker(B^{j-1}) + current picks.
            let mut base: Vec<Vec<Complex64>> = kernels[j - 1].clone();
            base.extend(height.iter().cloned());
            let base_rank = rank_of(&transpose(&base, n), RANK_TOL);
            let mut found = false;
            for cand in &kernels[j] {
                let mut stack = base.clone();
                stack.push(cand.clone());
                if rank_of(&transpose(&stack, n), RANK_TOL) > base_rank {
                    // Generator of a new length-j chain.
                    let mut chain = vec![cand.clone()];
                    for _ in 1..j {
                        let next = mat_vec(b, chain.last().unwrap());
                        chain.push(next);
                    }
                    chain.reverse(); // head (eigenvector) first
                    let head_norm = vec_norm(&chain[0]);
                    if head_norm <= RANK_TOL {
                        continue;
                    }
                    for v in &mut chain {
                        for c in v.iter_mut() {
                            *c /= head_norm;
                        }
                    }
                    height.push(chain[chain.len() - j].clone());
                    chains.push(chain);
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(JordanError::IllConditioned(
                    "could not complete the chain staircase".into(),
                ));
            }
        }
    }
    let total: usize = chains.iter().map(|c| c.len()).sum();
    if total != mu {
        return Err(JordanError::IllConditioned(format!(
            "chain lengths sum to {total}, cluster multiplicity is {mu}"
        )));
    }
    Ok(chains)
}

/// Columns-as-vectors helper: stack of row vectors -> matrix whose rows are
/// those vectors (rank/kernel routines operate on rows).
fn transpose(vectors: &[Vec<Complex64>], n: usize) -> Vec<Vec<Complex64>> {
    let mut out = vec![vec![Complex64::zero(); vectors.len()]; n];
    for (j, v) in vectors.iter().enumerate() {
        for i in 0..n {
            out[i][j] = v[i];
        }
    }
    out
}

pub fn decompose(t: &MatrixOperator) -> Result<TrichotomyDecomposition, JordanError> {
    let n = t.dim();
    let na = nalgebra::DMatrix::from_fn(n, n, |i, j| t.rows[i][j]);
    let eigs: Vec<Complex64> = na.complex_eigenvalues().iter().copied().collect();
    let clusters = cluster_eigenvalues(&eigs);

    // Conditioning gate: every cluster clearly on, inside, or outside.
    for (rep, _) in &clusters {
        let dist = (rep.norm() - 1.0).abs();
        if dist > CIRCLE_TOL && dist <= CLUSTER_TOL {
            return Err(JordanError::IllConditioned(format!(
                "eigenvalue modulus {} within {CLUSTER_TOL} of the unit circle",
                rep.norm()
            )));
        }
    }

    let tc = t.complex();
    let mut chains = Vec::new();
    let mut alpha: f64 = 0.0;
    for &(rep, mu) in &clusters {
        let b: Vec<Vec<Complex64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            tc[i][j] - rep
                        } else {
                            tc[i][j]
                        }
                    })
                    .collect()
            })
            .collect();
        for vectors in staircase_chains(&b, mu, RANK_TOL)? {
            chains.push(JordanChain { lambda: rep, vectors });
        }
        if rep.norm() < 1.0 - CIRCLE_TOL {
            alpha = alpha.max(rep.norm());
        }
    }

    // Assemble the change of basis and coefficient classes.
    let mut columns: Vec<Vec<Complex64>> = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for chain in &chains {
        let modulus = chain.lambda.norm();
        for (k, v) in chain.vectors.iter().enumerate() {
            columns.push(v.clone());
            classes.push(if (modulus - 1.0).abs() <= CIRCLE_TOL {
                if k == 0 {
                    CoeffClass::Head
                } else {
                    CoeffClass::Diverging
                }
            } else if modulus > 1.0 {
                CoeffClass::Diverging
            } else {
                CoeffClass::ZPart
            });
        }
    }
    if columns.len() != n {
        return Err(JordanError::IllConditioned(format!(
            "chain count {} does not span dimension {n}",
            columns.len()
        )));
    }
    let basis = transpose(&columns, n);
    let scale = mat_scale(&basis).max(1.0);
    let inv = invert(&basis, 1e-10 * scale)
        .ok_or_else(|| JordanError::IllConditioned("chain basis is numerically singular".into()))?;

    // Chain relation residuals: T e_{k+1} = lambda e_{k+1} + e_k, T e_1 = lambda e_1.
    let mut max_residual: f64 = 0.0;
    for chain in &chains {
        for (k, v) in chain.vectors.iter().enumerate() {
            let mut image = mat_vec(&tc, v);
            for (i, c) in image.iter_mut().enumerate() {
                *c -= chain.lambda * v[i];
                if k > 0 {
                    *c -= chain.vectors[k - 1][i];
                }
            }
            max_residual = max_residual.max(vec_norm(&image) / vec_norm(v).max(1e-300));
        }
    }

    Ok(TrichotomyDecomposition { n, chains, alpha, max_residual, basis, inv, classes })
}

pub fn classify(
    t: &MatrixOperator,
    x: &[f64],
    dec: &TrichotomyDecomposition,
) -> Result<OrbitClass, JordanError> {
    if x.len() != t.dim() || dec.n != t.dim() {
        return Err(JordanError::DimensionMismatch { got: x.len(), expect: t.dim() });
    }
    let coeffs = dec.coefficients(x);
    let top = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if top == 0.0 {
        return Err(JordanError::ZeroVector);
    }
    let mass = |class: CoeffClass| -> f64 {
        coeffs
            .iter()
            .zip(&dec.classes)
            .filter(|(_, c)| **c == class)
            .map(|(v, _)| v.norm())
            .fold(0.0, f64::max)
    };
    let clear = |m: f64| -> Result<bool, JordanError> {
        let r = m / top;
        if r > MEMBER_BAND.0 && r < MEMBER_BAND.1 {
            return Err(JordanError::IllConditioned(format!(
                "component ratio {r:.3e} inside the membership band"
            )));
        }
        Ok(r >= MEMBER_BAND.1)
    };
    if clear(mass(CoeffClass::Diverging))? {
        Ok(OrbitClass::Diverges)
    } else if clear(mass(CoeffClass::Head))? {
        Ok(OrbitClass::BoundedAway)
    } else {
        Ok(OrbitClass::Decays)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OracleThresholds {
    /// Final norm above grow * initial (with an increasing trend) reads as
    /// divergence.
    pub grow: f64,
    /// Final norm below decay * initial reads as decay.
    pub decay: f64,
}

impl Default for OracleThresholds {
    fn default() -> Self {
        OracleThresholds { grow: 1e4, decay: 1e-4 }
    }
}

/// Power iteration cross-check. Never guesses: trends that fit no clear
/// pattern come back Undecided.
pub fn orbit_oracle(
    t: &MatrixOperator,
    x: &[f64],
    n_steps: u64,
    thresholds: OracleThresholds,
) -> Result<EmpiricalClass, JordanError> {
    if n_steps < 50 {
        return Err(JordanError::TooFewSteps);
    }
    if x.len() != t.dim() {
        return Err(JordanError::DimensionMismatch { got: x.len(), expect: t.dim() });
    }
    let init = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if init == 0.0 {
        return Err(JordanError::ZeroVector);
    }
    let mut v = x.to_vec();
    let mut norms = vec![init];
    for _ in 0..n_steps {
        v = t.apply(&v);
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        norms.push(norm);
        if !norm.is_finite() || norm > 1e100 * init {
            // Escaped all finite windows: unambiguous divergence.
            return Ok(EmpiricalClass::Diverges);
        }
        if norm < 1e-100 * init {
            return Ok(EmpiricalClass::Decays);
        }
    }
    let final_norm = *norms.last().unwrap();
    let three_quarter = norms[(norms.len() - 1) * 3 / 4];
    if final_norm > thresholds.grow * init {
        if final_norm >= three_quarter {
            return Ok(EmpiricalClass::Diverges);
        }
        return Ok(EmpiricalClass::Undecided);
    }
    if final_norm < thresholds.decay * init {
        return Ok(EmpiricalClass::Decays);
    }
    // Neither threshold: bounded away only when the whole tail stayed inside
    // the window; anything else is left undecided.
    let tail = &norms[norms.len() / 2..];
    let lo = tail.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = tail.iter().copied().fold(0.0, f64::max);
    if lo >= thresholds.decay * init && hi <= thresholds.grow * init {
        Ok(EmpiricalClass::BoundedAway)
    } else {
        Ok(EmpiricalClass::Undecided)
    }
}

impl From<OrbitClass> for EmpiricalClass {
    fn from(c: OrbitClass) -> Self {
        match c {
            OrbitClass::Diverges => EmpiricalClass::Diverges,
            OrbitClass::BoundedAway => EmpiricalClass::BoundedAway,
            OrbitClass::Decays => EmpiricalClass::Decays,
        }
    }
}

/// Seeded well-conditioned instance: real canonical blocks with moduli kept
/// off the unit circle band (or exactly on it), conjugated by a random
/// change of basis with a pivot-ratio floor. Returns the matrix, a vector
/// with clear components on every block, and the expected class of that
/// vector's orbit.
pub fn random_instance<R: Rng>(rng: &mut R, max_dim: usize) -> (MatrixOperator, Vec<f64>, OrbitClass) {
    assert!(max_dim >= 2);
    loop {
        let n = rng.gen_range(2..=max_dim);
        let mut blocks: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut moduli: Vec<Complex64> = Vec::new();
        let mut filled = 0usize;
        let mut has_diverging = false;
        let mut has_head = false;
        while filled < n {
            let room = n - filled;
            let kind = rng.gen_range(0..4);
            let block: Option<(Vec<Vec<f64>>, Vec<Complex64>, bool, bool)> = match kind {
                // Real eigenvalue inside or outside, chain length 1 or 2.
                0 | 1 => {
                    let inside = kind == 0;
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let modulus = if inside {
                        rng.gen_range(0.2..0.8)
                    } else {
                        rng.gen_range(1.2..2.2)
                    };
                    let lam = sign * modulus;
                    let len = if room >= 2 && rng.gen_bool(0.4) { 2 } else { 1 };
                    let rows = if len == 1 {
                        vec![vec![lam]]
                    } else {
                        vec![vec![lam, 1.0], vec![0.0, lam]]
                    };
                    Some((rows, vec![Complex64::new(lam, 0.0); len], !inside, false))
                }
                // Unit-circle real eigenvalue, chain length 1 or 2.
                2 => {
                    let lam = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let len = if room >= 2 && rng.gen_bool(0.4) { 2 } else { 1 };
                    let rows = if len == 1 {
                        vec![vec![lam]]
                    } else {
                        vec![vec![lam, 1.0], vec![0.0, lam]]
                    };
                    Some((rows, vec![Complex64::new(lam, 0.0); len], len > 1, true))
                }
                // Rotation pair r e^{+-i theta}.
                _ => {
                    if room < 2 {
                        None
                    } else {
                        let r = match rng.gen_range(0..3) {
                            0 => rng.gen_range(0.2..0.8),
                            1 => 1.0,
                            _ => rng.gen_range(1.2..2.2),
                        };
                        let th: f64 = rng.gen_range(0.3..2.8);
                        let rows = vec![
                            vec![r * th.cos(), -r * th.sin()],
                            vec![r * th.sin(), r * th.cos()],
                        ];
                        let lam = Complex64::from_polar(r, th);
                        Some((rows, vec![lam, lam.conj()], r > 1.0, (r - 1.0).abs() < 1e-12))
                    }
                }
            };
            let Some((rows, lams, diverging, head)) = block else { continue };
            // Pairwise separation keeps clusters honest.
            if lams
                .iter()
                .any(|l| moduli.iter().any(|m| (l - m).norm() < 0.05))
            {
                continue;
            }
            filled += rows.len();
            has_diverging |= diverging;
            has_head |= head;
            moduli.extend(lams);
            blocks.push(rows);
        }
        let mut j = vec![vec![0.0; n]; n];
        let mut at = 0;
        for b in &blocks {
            for (i, row) in b.iter().enumerate() {
                for (jj, &v) in row.iter().enumerate() {
                    j[at + i][at + jj] = v;
                }
            }
            at += b.len();
        }
        // Random change of basis with a conditioning floor.
        let p: Vec<Vec<Complex64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), 0.0))
                    .collect()
            })
            .collect();
        let Some(p_inv) = invert(&p, 1e-3) else { continue };
        let jc: Vec<Vec<Complex64>> = j
            .iter()
            .map(|r| r.iter().map(|&v| Complex64::new(v, 0.0)).collect())
            .collect();
        let a = mat_mul(&mat_mul(&p, &jc), &p_inv);
        let rows: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|c| c.re).collect()).collect();
        let Ok(op) = MatrixOperator::new(rows) else { continue };

        // Clear components on every canonical direction.
        let coeffs: Vec<f64> = (0..n)
            .map(|_| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.gen_range(0.5..1.5)
            })
            .collect();
        let x: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|k| p[i][k].re * coeffs[k]).sum())
            .collect();
        let class = if has_diverging {
            OrbitClass::Diverges
        } else if has_head {
            OrbitClass::BoundedAway
        } else {
            OrbitClass::Decays
        };
        return (op, x, class);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn op(rows: &[&[f64]]) -> MatrixOperator {
        MatrixOperator::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn diagonal_trichotomy() {
        let t = op(&[&[2.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 0.5]]);
        let dec = decompose(&t).unwrap();
        assert_eq!(dec.chains.len(), 3);
        assert_eq!(dec.z_dim(), 1);
        assert_eq!(dec.y_dim(), 2);
        assert!((dec.alpha - 0.5).abs() < 1e-9);
        assert!(dec.max_residual < 1e-8);
        assert_eq!(classify(&t, &[1.0, 0.0, 0.0], &dec).unwrap(), OrbitClass::Diverges);
        assert_eq!(classify(&t, &[0.0, 1.0, 0.0], &dec).unwrap(), OrbitClass::BoundedAway);
        assert_eq!(classify(&t, &[0.0, 0.0, 1.0], &dec).unwrap(), OrbitClass::Decays);
        assert_eq!(classify(&t, &[0.0, 1.0, 3.0], &dec).unwrap(), OrbitClass::BoundedAway);
        assert_eq!(classify(&t, &[0.2, 1.0, 3.0], &dec).unwrap(), OrbitClass::Diverges);
    }

    #[test]
    fn unit_jordan_block() {
        let t = op(&[&[1.0, 1.0], &[0.0, 1.0]]);
        let dec = decompose(&t).unwrap();
        assert_eq!(dec.chains.len(), 1);
        assert_eq!(dec.chains[0].vectors.len(), 2);
        assert!((dec.chains[0].lambda - Complex64::new(1.0, 0.0)).norm() < 1e-6);
        assert_eq!(dec.z_dim(), 0);
        assert_eq!(dec.y_dim(), 1);
        // e_2 rides the nilpotent part: n-growth. e_1 is the head: constant.
        assert_eq!(classify(&t, &[0.0, 1.0], &dec).unwrap(), OrbitClass::Diverges);
        assert_eq!(classify(&t, &[1.0, 0.0], &dec).unwrap(), OrbitClass::BoundedAway);
        assert!(dec.invariance_defect(&t) < 1e-8);
    }

    #[test]
    fn nilpotent_is_all_z() {
        let t = op(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let dec = decompose(&t).unwrap();
        assert_eq!(dec.z_dim(), 2);
        assert_eq!(dec.alpha, 0.0);
        assert_eq!(classify(&t, &[1.0, 1.0], &dec).unwrap(), OrbitClass::Decays);
    }

    #[test]
    fn rotation_is_bounded_away() {
        let (s, c) = (0.7f64.sin(), 0.7f64.cos());
        let t = op(&[&[c, -s], &[s, c]]);
        let dec = decompose(&t).unwrap();
        assert_eq!(dec.y_dim(), 2);
        assert_eq!(dec.z_dim(), 0);
        assert_eq!(classify(&t, &[1.0, 0.0], &dec).unwrap(), OrbitClass::BoundedAway);
        let oracle = orbit_oracle(&t, &[1.0, 0.0], 500, OracleThresholds::default()).unwrap();
        assert_eq!(oracle, EmpiricalClass::BoundedAway);
    }

    #[test]
    fn transient_growth_still_decays() {
        let t = op(&[&[0.5, 100.0], &[0.0, 0.5]]);
        let dec = decompose(&t).unwrap();
        assert_eq!(classify(&t, &[0.0, 1.0], &dec).unwrap(), OrbitClass::Decays);
        let oracle = orbit_oracle(&t, &[0.0, 1.0], 200, OracleThresholds::default()).unwrap();
        assert_eq!(oracle, EmpiricalClass::Decays);
        // The transient peak must not fool the early exits.
        let norms_peak = t.apply(&[0.0, 1.0]);
        assert!(norms_peak.iter().map(|v| v * v).sum::<f64>().sqrt() > 50.0);
    }

    #[test]
    fn hugging_the_circle_is_rejected() {
        let t = op(&[&[1.0 + 5e-5, 0.0], &[0.0, 0.5]]);
        assert!(matches!(decompose(&t), Err(JordanError::IllConditioned(_))));
    }

    #[test]
    fn borderline_membership_is_rejected() {
        let t = op(&[&[2.0, 0.0], &[0.0, 0.5]]);
        let dec = decompose(&t).unwrap();
        let r = classify(&t, &[1e-8, 1.0], &dec);
        assert!(matches!(r, Err(JordanError::IllConditioned(_))), "{r:?}");
    }

    #[test]
    fn oracle_catches_exponential_divergence() {
        let t = op(&[&[2.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 0.5]]);
        let v = orbit_oracle(&t, &[1.0, 0.0, 0.0], 60, OracleThresholds::default()).unwrap();
        assert_eq!(v, EmpiricalClass::Diverges);
        assert!(matches!(
            orbit_oracle(&t, &[1.0, 0.0, 0.0], 10, OracleThresholds::default()),
            Err(JordanError::TooFewSteps)
        ));
    }

    #[test]
    fn classify_agrees_with_oracle_on_seeded_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let thresholds = OracleThresholds { grow: 1e3, decay: 1e-3 };
        for trial in 0..25 {
            let (t, x, expected) = random_instance(&mut rng, 6);
            let dec = decompose(&t).unwrap_or_else(|e| panic!("trial {trial}: {e}"));
            assert!(dec.max_residual < 1e-6, "trial {trial}: residual {}", dec.max_residual);
            assert!(dec.invariance_defect(&t) < 1e-6, "trial {trial}");
            let got = classify(&t, &x, &dec).unwrap_or_else(|e| panic!("trial {trial}: {e}"));
            assert_eq!(got, expected, "trial {trial}");
            let oracle = orbit_oracle(&t, &x, 20_000, thresholds).unwrap();
            assert_eq!(oracle, EmpiricalClass::from(got), "trial {trial}");
        }
    }

    #[test]
    fn invalid_matrices_are_rejected() {
        assert!(matches!(MatrixOperator::new(vec![]), Err(JordanError::BadMatrix)));
        assert!(matches!(
            MatrixOperator::new(vec![vec![1.0], vec![2.0]]),
            Err(JordanError::BadMatrix)
        ));
        assert!(matches!(
            MatrixOperator::new(vec![vec![f64::NAN]]),
            Err(JordanError::BadMatrix)
        ));
    }
}
