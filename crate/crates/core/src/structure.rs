//! Enclosures, irreducibility, the recurrent/transient decomposition and the
//! recurrence trichotomy.

use std::collections::BTreeSet;

use serde::Serialize;
use serde_json::Value;

use crate::error::{OqwError, Result};
use crate::extended::Extended;
use crate::hitting::{self, DIVERGENCE_GAP};
use crate::linalg::{self, c, CMatrix, CVector};
use crate::model::{self, full_superoperator, DiagonalState, WalkSpec};

/// Relative threshold for rank and support decisions.
pub const RANK_TOL: f64 = 1e-8;
/// Support threshold for Perron vectors, which carry a small resolvent bias.
const PERRON_SUPPORT_TOL: f64 = 1e-6;

/// Per-site subspaces `𝔥ᵏ_i ⊆ 𝔥_i`, each given by orthonormal columns.
#[derive(Clone, Debug)]
pub struct Enclosure {
    pub bases: Vec<CMatrix>,
}

impl Enclosure {
    pub fn zero(walk: &WalkSpec) -> Self {
        Enclosure { bases: walk.dims().iter().map(|&d| CMatrix::zeros(d, 0)).collect() }
    }

    pub fn full(walk: &WalkSpec) -> Self {
        Enclosure { bases: walk.dims().iter().map(|&d| linalg::identity(d)).collect() }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.bases.iter().map(|b| b.ncols()).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.bases.iter().map(|b| b.ncols()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.total_dim() == 0
    }

    pub fn is_full(&self) -> bool {
        self.bases.iter().all(|b| b.ncols() == b.nrows())
    }

    /// Sites with a nonzero subspace (`V^κ`).
    pub fn sites(&self) -> BTreeSet<usize> {
        (0..self.bases.len()).filter(|&i| self.bases[i].ncols() > 0).collect()
    }

    pub fn projector(&self, i: usize) -> CMatrix {
        &self.bases[i] * self.bases[i].adjoint()
    }

    /// `max_{i,j} ‖(Id − P_i) L_{i,j} P_j‖`.
    pub fn closure_defect(&self, walk: &WalkSpec) -> f64 {
        walk.transitions()
            .map(|(&(i, j), l)| {
                let d = walk.dim(i);
                let leak = (linalg::identity(d) - self.projector(i)) * l * self.projector(j);
                linalg::operator_norm(&leak)
            })
            .fold(0.0, f64::max)
    }

    /// Per-site orthogonal complement.
    pub fn complement(&self) -> Enclosure {
        Enclosure {
            bases: self
                .bases
                .iter()
                .map(|b| {
                    let d = b.nrows();
                    // Projector eigenvalues are 0 or 1 up to roundoff.
                    let (vals, vecs) = linalg::eigh(&(linalg::identity(d) - b * b.adjoint()));
                    let keep: Vec<usize> = (0..d).filter(|&k| vals[k] > 0.5).collect();
                    CMatrix::from_fn(d, keep.len(), |r, k| vecs[(r, keep[k])])
                })
                .collect(),
        }
    }

    pub fn to_value(&self, walk: &WalkSpec) -> Value {
        let map: serde_json::Map<String, Value> = self
            .bases
            .iter()
            .enumerate()
            .filter(|(_, b)| b.ncols() > 0)
            .map(|(i, b)| (walk.site_id(i).to_string(), serde_json::to_value(crate::io::matrix_to_json(b)).unwrap()))
            .collect();
        Value::Object(map)
    }
}

/// Smallest transition-closed family containing the seed vectors.
pub fn enclosure_closure(walk: &WalkSpec, seeds: &[(usize, CVector)]) -> Result<Enclosure> {
    let mut enc = Enclosure::zero(walk);
    let mut work: Vec<(usize, CVector)> = Vec::new();
    let push = |enc: &mut Enclosure, work: &mut Vec<(usize, CVector)>, i: usize, v: CVector| {
        let norm = v.norm();
        if norm <= 1e-12 {
            return;
        }
        let cand = CMatrix::from_column_slice(v.len(), 1, (v / c(norm)).as_slice());
        if linalg::extend_basis(&mut enc.bases[i], &cand, RANK_TOL) > 0 {
            let k = enc.bases[i].ncols() - 1;
            work.push((i, enc.bases[i].column(k).into_owned()));
        }
    };
    for (i, v) in seeds {
        if *i >= walk.n_sites() || v.len() != walk.dim(*i) {
            return Err(OqwError::Structural(format!("seed at site index {i} has the wrong shape")));
        }
        if v.norm() == 0.0 {
            return Err(OqwError::Input("seed vectors must be nonzero".into()));
        }
        push(&mut enc, &mut work, *i, v.clone());
    }
    while let Some((j, v)) = work.pop() {
        for i in walk.successors(j) {
            let w = walk.transition(i, j).unwrap() * &v;
            push(&mut enc, &mut work, i, w);
        }
    }
    Ok(enc)
}

/// Closure of the union of the per-site subspaces of `enc`.
fn close(walk: &WalkSpec, enc: &Enclosure) -> Result<Enclosure> {
    let seeds: Vec<(usize, CVector)> = enc
        .bases
        .iter()
        .enumerate()
        .flat_map(|(i, b)| (0..b.ncols()).map(move |k| (i, b.column(k).into_owned())))
        .collect();
    enclosure_closure(walk, &seeds)
}

/// Per-site support of a PSD block family, relative threshold `tol`.
fn support(blocks: &[CMatrix], tol: f64) -> Enclosure {
    let scale = blocks.iter().map(linalg::max_eigenvalue).fold(0.0, f64::max);
    Enclosure {
        bases: blocks
            .iter()
            .map(|b| {
                let (vals, vecs) = linalg::eigh(b);
                let keep: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] > tol * scale).collect();
                CMatrix::from_fn(b.nrows(), keep.len(), |r, k| vecs[(r, keep[k])])
            })
            .collect(),
    }
}

fn is_definite(blocks: &[CMatrix], tol: f64) -> bool {
    let scale = blocks.iter().map(linalg::max_eigenvalue).fold(0.0, f64::max);
    scale > 0.0 && blocks.iter().all(|b| linalg::min_eigenvalue(b) > tol * scale)
}

#[derive(Clone, Debug)]
pub struct IrreducibilityReport {
    pub irreducible: bool,
    /// Proper nonzero enclosure when reducible.
    pub witness: Option<Enclosure>,
    pub spectral_radius: f64,
    /// Geometric multiplicity of the Perron eigenvalue.
    pub perron_multiplicity: usize,
}

/// Hermitian, trace-positive block family from a packed vector.
fn hermitian_blocks(walk: &WalkSpec, sources: &[usize], v: &CVector) -> Vec<CMatrix> {
    let mut blocks = vec![CMatrix::zeros(0, 0); walk.n_sites()];
    model::unpack_into(walk, sources, v, &mut blocks);
    let mut h: Vec<CMatrix> = blocks.iter().map(linalg::hermitian_part).collect();
    let tr: f64 = h.iter().map(|b| b.trace().re).sum();
    if tr < 0.0 {
        for b in &mut h {
            *b = -b.clone();
        }
    }
    h
}

fn eigenspace(m: &CMatrix, r: f64) -> CMatrix {
    let n = m.nrows();
    let scale = linalg::max_abs(m).max(1.0);
    let shifted = m - linalg::identity(n) * c(r);
    for tol in [1e-10, 1e-9, 1e-8, 1e-7, 1e-6] {
        let ns = linalg::null_space(&shifted, tol * scale);
        if ns.ncols() > 0 {
            return ns;
        }
    }
    CMatrix::zeros(n, 0)
}

/// Perron vector of `m` (acting on packed block families) inside the
/// eigenspace `basis`: the resolvent `(s − m)^{-1}(Id)` just above the
/// spectral radius, projected onto the eigenspace.
fn perron_vector(m: &CMatrix, id: &CVector, basis: &CMatrix, r: f64) -> Option<CVector> {
    let n = m.nrows();
    let s = r * (1.0 + 1e-9) + 1e-12;
    let x = linalg::solve(&(linalg::identity(n) * c(s) - m), &CMatrix::from_column_slice(n, 1, id.as_slice()))?;
    let coeffs = basis.adjoint() * x;
    Some(CVector::from_column_slice((basis * coeffs).as_slice()))
}

/// Irreducibility via the Perron eigenvalue of `𝔐`: the walk is irreducible
/// iff the spectral radius is a simple eigenvalue whose eigenvectors for `𝔐`
/// and `𝔐*` are positive definite. On failure, a proper enclosure is
/// extracted from the offending eigenvector.
pub fn irreducibility(walk: &WalkSpec) -> Result<IrreducibilityReport> {
    // Enclosures are unchanged by per-site scalar rescaling; balancing keeps
    // the Perron vectors away from underflow on long drifting chains.
    let balanced = balance(walk)?;
    let full = full_superoperator(&balanced);
    let m = &full.matrix;
    let n = m.nrows();
    let walk = &balanced;
    let total: usize = walk.dims().iter().sum();
    if total == 1 {
        return Ok(IrreducibilityReport { irreducible: true, witness: None, spectral_radius: linalg::spectral_radius(m), perron_multiplicity: 1 });
    }
    let r = linalg::spectral_radius(m);
    let reducible = |witness: Enclosure, mult: usize| -> Result<IrreducibilityReport> {
        let witness = close(walk, &witness)?;
        if witness.is_zero() || witness.is_full() {
            return Err(OqwError::numerical("irreducibility witness degenerated under closure"));
        }
        Ok(IrreducibilityReport { irreducible: false, witness: Some(witness), spectral_radius: r, perron_multiplicity: mult })
    };
    if r < 1e-10 {
        // Nilpotent: the last nonzero iterate Z of 𝔐 on Id has 𝔐(Z) = 0, so
        // its support is closed; if Z is faithful, 𝔐 = 0.
        let id_blocks: Vec<CMatrix> = walk.dims().iter().map(|&d| linalg::identity(d)).collect();
        let mut z = model::pack_blocks(walk, &full.sources, &id_blocks);
        for _ in 0..n {
            let next = m * &z;
            if next.norm() <= 1e-12 * z.norm().max(1e-300) {
                break;
            }
            z = next;
        }
        let blocks = hermitian_blocks(walk, &full.sources, &z);
        let mut enc = support(&blocks, RANK_TOL);
        if enc.is_full() {
            enc = Enclosure::zero(walk);
            let first = (0..walk.n_sites()).next().unwrap();
            enc.bases[first] = CMatrix::from_column_slice(walk.dim(first), 1, linalg::basis_vector(walk.dim(first), 0).as_slice());
        }
        return reducible(enc, 0);
    }
    let right = eigenspace(m, r);
    let left = eigenspace(&m.adjoint(), r);
    let mult = right.ncols();
    let id_blocks: Vec<CMatrix> = walk.dims().iter().map(|&d| linalg::identity(d)).collect();
    let id = model::pack_blocks(walk, &full.sources, &id_blocks);
    let x = perron_vector(m, &id, &right, r).ok_or_else(|| OqwError::numerical("Perron resolvent is singular"))?;
    let y = perron_vector(&m.adjoint(), &id, &left, r).ok_or_else(|| OqwError::numerical("Perron resolvent is singular"))?;
    let xb = hermitian_blocks(walk, &full.sources, &x);
    let yb = hermitian_blocks(walk, &full.sources, &y);
    if !is_definite(&yb, PERRON_SUPPORT_TOL) {
        // ker Y is closed: Tr(Y 𝔐(X)) = r Tr(Y X) = 0 for X supported there.
        return reducible(support(&yb, PERRON_SUPPORT_TOL).complement(), mult);
    }
    if !is_definite(&xb, PERRON_SUPPORT_TOL) {
        return reducible(support(&xb, PERRON_SUPPORT_TOL), mult);
    }
    if mult <= 1 {
        return Ok(IrreducibilityReport { irreducible: true, witness: None, spectral_radius: r, perron_multiplicity: mult });
    }
    // Degenerate Perron eigenvalue with a faithful Perron vector X: for a
    // Hermitian eigenvector H independent of X, H − tX with
    // t = min spec(X^{-1/2} H X^{-1/2}) is a singular positive eigenvector.
    let h = most_independent(walk, &full.sources, &right, &xb);
    let w = singular_shift(&h, &xb);
    reducible(support(&w, PERRON_SUPPORT_TOL), mult)
}

/// Osborne balancing of the site weights `a_{i,j} = ‖L_{i,j}‖²`: returns the
/// walk with `L_{i,j} ← (c_i/c_j)^{1/2} L_{i,j}` where `diag(c) a diag(c)^{-1}`
/// has matching off-diagonal row and column sums.
fn balance(walk: &WalkSpec) -> Result<WalkSpec> {
    let n = walk.n_sites();
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| walk.transition(i, j).map_or(0.0, |l| l.norm_squared())).collect())
        .collect();
    let mut scale = vec![1.0f64; n];
    for _ in 0..200 {
        let mut converged = true;
        for i in 0..n {
            let row: f64 = (0..n).filter(|&j| j != i).map(|j| scale[i] * a[i][j] / scale[j]).sum();
            let col: f64 = (0..n).filter(|&j| j != i).map(|j| scale[j] * a[j][i] / scale[i]).sum();
            if row > 0.0 && col > 0.0 {
                let f = (col / row).sqrt();
                if (f - 1.0).abs() > 1e-3 {
                    converged = false;
                }
                scale[i] *= f;
            }
        }
        if converged {
            break;
        }
    }
    let mut out = walk.clone();
    for (&(i, j), l) in walk.transitions() {
        out.set_transition_at(i, j, l * c((scale[i] / scale[j]).sqrt()))?;
    }
    Ok(out)
}

/// Hermitian element of the eigenspace farthest from the direction of `x`.
fn most_independent(walk: &WalkSpec, sources: &[usize], basis: &CMatrix, x: &[CMatrix]) -> Vec<CMatrix> {
    let xx: f64 = x.iter().map(|b| b.norm_squared()).sum();
    let mut best: Option<(f64, Vec<CMatrix>)> = None;
    for k in 0..basis.ncols() {
        let v = basis.column(k).into_owned();
        let mut blocks = vec![CMatrix::zeros(0, 0); walk.n_sites()];
        model::unpack_into(walk, sources, &v, &mut blocks);
        for part in [
            blocks.iter().map(linalg::hermitian_part).collect::<Vec<_>>(),
            blocks.iter().map(|b| (b - b.adjoint()) * linalg::C64::new(0.0, -0.5)).collect(),
        ] {
            let proj: f64 = part.iter().zip(x).map(|(h, xb)| (h.adjoint() * xb).trace().re).sum::<f64>() / xx;
            let rest: Vec<CMatrix> = part.iter().zip(x).map(|(h, xb)| h - xb * c(proj)).collect();
            let size = rest.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(s, _)| size > *s) {
                best = Some((size, rest));
            }
        }
    }
    best.map(|(_, h)| h).unwrap_or_default()
}

/// `H − tX` with `t` the smallest eigenvalue of `X^{-1/2} H X^{-1/2}` over all
/// blocks; `X` must be positive definite.
fn singular_shift(h: &[CMatrix], x: &[CMatrix]) -> Vec<CMatrix> {
    let t = h
        .iter()
        .zip(x)
        .map(|(hb, xb)| {
            let s = linalg::hermitian_function(xb, |v| 1.0 / v.sqrt());
            linalg::min_eigenvalue(&(&s * hb * &s))
        })
        .fold(f64::INFINITY, f64::min);
    h.iter().zip(x).map(|(hb, xb)| linalg::hermitian_part(&(hb - xb * c(t)))).collect()
}

pub fn is_irreducible(walk: &WalkSpec) -> Result<(bool, Option<Enclosure>)> {
    let rep = irreducibility(walk)?;
    Ok((rep.irreducible, rep.witness))
}

/// The walk induced on an enclosure: sites with `𝔥ᵏ_i ≠ {0}` and
/// `L^κ_{i,j} = Q_i^† L_{i,j} Q_j`. Returns the walk and the original index of
/// each of its sites.
pub fn restrict(walk: &WalkSpec, enc: &Enclosure) -> Result<(WalkSpec, Vec<usize>)> {
    let sites: Vec<usize> = enc.sites().into_iter().collect();
    let mut rw = WalkSpec::new(sites.iter().map(|&i| (walk.site_id(i).to_string(), enc.bases[i].ncols())))?
        .with_tolerance(walk.tolerance);
    for (a, &i) in sites.iter().enumerate() {
        for (b, &j) in sites.iter().enumerate() {
            if let Some(l) = walk.transition(i, j) {
                let lk = enc.bases[i].adjoint() * l * &enc.bases[j];
                if linalg::max_abs(&lk) > 1e-14 {
                    rw.set_transition_at(a, b, lk)?;
                }
            }
        }
        if walk.is_leaky(i) {
            rw.set_leaky_at(a);
        }
    }
    Ok((rw, sites))
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    /// Minimal enclosures `𝓗^κ` whose sum is `𝓡`.
    pub recurrent_part: Vec<Enclosure>,
    /// `𝓓 = 𝓡^⊥`.
    pub transient_part: Enclosure,
    /// Complex dimension of the fixed space of `𝔐`.
    pub fixed_space_dim: usize,
    pub warnings: Vec<String>,
}

impl Decomposition {
    pub fn recurrent_space(&self, walk: &WalkSpec) -> Enclosure {
        self.transient_part.complement_in(walk)
    }

    pub fn to_value(&self, walk: &WalkSpec) -> Value {
        serde_json::json!({
            "recurrent_part": self.recurrent_part.iter().map(|e| e.to_value(walk)).collect::<Vec<_>>(),
            "transient_part": self.transient_part.to_value(walk),
            "fixed_space_dim": self.fixed_space_dim,
            "warnings": self.warnings,
        })
    }
}

impl Enclosure {
    fn complement_in(&self, _walk: &WalkSpec) -> Enclosure {
        self.complement()
    }
}

/// `𝓗 = 𝓓 ⊕ ⨁_κ 𝓗^κ`: `𝓡` is the support of a maximal invariant state and is
/// split into minimal enclosures by repeated bisection along non-faithful
/// fixed points.
pub fn decompose(walk: &WalkSpec) -> Result<Decomposition> {
    let inv = model::invariant_state(walk)?;
    let mut warnings = Vec::new();
    let Some(tau) = inv.state else {
        return Ok(Decomposition {
            recurrent_part: Vec::new(),
            transient_part: Enclosure::full(walk),
            fixed_space_dim: inv.fixed_space_dim,
            warnings: vec!["no invariant state: everything is transient".into()],
        });
    };
    let r_space = support(&tau.blocks, RANK_TOL);
    let mut parts = Vec::new();
    split(walk, r_space.clone(), &mut parts)?;
    parts.sort_by_key(|e| {
        let first = e.sites().into_iter().next().unwrap_or(usize::MAX);
        (first, std::cmp::Reverse(e.total_dim()))
    });
    if inv.fixed_space_dim > parts.len() {
        warnings.push(format!(
            "non-unique: fixed space has dimension {} for {} minimal enclosures",
            inv.fixed_space_dim,
            parts.len()
        ));
    }
    Ok(Decomposition {
        recurrent_part: parts,
        transient_part: r_space.complement(),
        fixed_space_dim: inv.fixed_space_dim,
        warnings,
    })
}

fn split(walk: &WalkSpec, enc: Enclosure, out: &mut Vec<Enclosure>) -> Result<()> {
    let (rw, sites) = restrict(walk, &enc)?;
    let (basis, dim) = model::fixed_points(&rw);
    if dim <= 1 {
        out.push(enc);
        return Ok(());
    }
    let tau = model::invariant_state(&rw)?
        .state
        .ok_or_else(|| OqwError::numerical("enclosure inside the recurrent space carries no invariant state"))?;
    if !is_definite(&tau.blocks, RANK_TOL) {
        return Err(OqwError::numerical("invariant state is not faithful on its own support"));
    }
    // Pick the fixed point farthest from τ.
    let tt: f64 = tau.blocks.iter().map(|b| b.norm_squared()).sum();
    let h = basis
        .iter()
        .map(|h: &DiagonalState| {
            let proj: f64 = h.blocks.iter().zip(&tau.blocks).map(|(a, b)| (a.adjoint() * b).trace().re).sum::<f64>() / tt;
            h.blocks.iter().zip(&tau.blocks).map(|(a, b)| a - b * c(proj)).collect::<Vec<_>>()
        })
        .max_by(|a, b| {
            let na: f64 = a.iter().map(|m| m.norm_squared()).sum();
            let nb: f64 = b.iter().map(|m| m.norm_squared()).sum();
            na.total_cmp(&nb)
        })
        .unwrap();
    let w = singular_shift(&h, &tau.blocks);
    let k1 = support(&w, RANK_TOL);
    if k1.is_zero() || k1.is_full() {
        // Numerically indistinguishable from a multiple of τ.
        out.push(enc);
        return Ok(());
    }
    let k2 = k1.complement();
    for local in [k1, k2] {
        let mut sub = Enclosure::zero(walk);
        for (a, &i) in sites.iter().enumerate() {
            sub.bases[i] = &enc.bases[i] * &local.bases[a];
        }
        if !sub.is_zero() {
            split(walk, sub, out)?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrenceCase {
    /// Every state returns surely and visits are infinite.
    Recurrent,
    /// No state returns surely; visits are finite.
    Transient,
    /// Some states return surely, others do not.
    Mixed,
}

impl RecurrenceCase {
    pub fn number(self) -> u8 {
        match self {
            RecurrenceCase::Recurrent => 1,
            RecurrenceCase::Transient => 2,
            RecurrenceCase::Mixed => 3,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MixedWitness {
    /// Supported on the eigenvalue-1 eigenspace of `𝔓*_{i,i}(Id)`.
    #[serde(with = "crate::io::matrix")]
    pub rho: CMatrix,
    pub passage_rho: f64,
    /// Maximally mixed state.
    #[serde(with = "crate::io::matrix")]
    pub rho_prime: CMatrix,
    pub passage_rho_prime: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RecurrenceVerdict {
    pub site: String,
    pub case: RecurrenceCase,
    /// `𝔓*_{i,i}(Id)`.
    #[serde(with = "crate::io::matrix")]
    pub return_dual_identity: CMatrix,
    pub return_dual_eigenvalues: Vec<f64>,
    /// Spectral radius of `𝔓_{i,i}`; visits are finite iff it is below 1, which
    /// should happen exactly when the case is not `Recurrent`.
    pub return_spectral_radius: f64,
    pub consistent_with_visits: bool,
    pub witnesses: Option<MixedWitness>,
    /// The walk has leaky sites, so the verdict is about a truncated model.
    pub truncated: bool,
}

pub const CLASSIFY_TOL: f64 = 1e-6;

pub fn classify_recurrence(walk: &WalkSpec, i: usize) -> Result<RecurrenceVerdict> {
    if i >= walk.n_sites() {
        return Err(OqwError::Input(format!("site index {i} out of range")));
    }
    if !irreducibility(walk)?.irreducible {
        return Err(OqwError::Precondition(
            "walk is reducible; classify the irreducible parts returned by decompose".into(),
        ));
    }
    let op = hitting::passage_operator(walk, i, i)?;
    let p_star = linalg::hermitian_part(&op.dual_identity());
    let d = walk.dim(i);
    let (vals, vecs) = linalg::eigh(&p_star);
    let radius = op.spectral_radius();
    let near_one: Vec<usize> = (0..d).filter(|&k| (vals[k] - 1.0).abs() <= CLASSIFY_TOL).collect();
    let case = if linalg::max_abs(&(&p_star - linalg::identity(d))) <= CLASSIFY_TOL {
        RecurrenceCase::Recurrent
    } else if near_one.is_empty() {
        RecurrenceCase::Transient
    } else {
        RecurrenceCase::Mixed
    };
    let witnesses = if case == RecurrenceCase::Mixed {
        let mut rho = CMatrix::zeros(d, d);
        for &k in &near_one {
            let v = vecs.column(k).into_owned();
            rho += linalg::projector(&v);
        }
        rho /= c(near_one.len() as f64);
        let rho_prime = linalg::identity(d) / c(d as f64);
        let passage_rho = op.apply(&rho).trace().re.clamp(0.0, 1.0);
        let passage_rho_prime = op.apply(&rho_prime).trace().re.clamp(0.0, 1.0);
        Some(MixedWitness { rho, passage_rho, rho_prime, passage_rho_prime })
    } else {
        None
    };
    let visits_finite = radius < 1.0 - DIVERGENCE_GAP;
    Ok(RecurrenceVerdict {
        site: walk.site_id(i).to_string(),
        case,
        return_dual_identity: p_star,
        return_dual_eigenvalues: vals,
        return_spectral_radius: radius,
        consistent_with_visits: visits_finite == (case != RecurrenceCase::Recurrent),
        witnesses,
        truncated: walk.leaky_sites().next().is_some(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundRow {
    pub quantity: String,
    pub lhs: Extended,
    pub rhs: Extended,
    pub holds: bool,
    pub equal: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundsReport {
    pub rows: Vec<BoundRow>,
    /// `supp ρ ⊆ 𝓡`, in which case every row should be an equality.
    pub support_in_recurrent_space: bool,
    pub equalities_as_expected: bool,
}

const BOUND_TOL: f64 = 1e-8;

fn row(quantity: &str, lhs: Extended, rhs: Extended) -> BoundRow {
    let (holds, equal) = match (lhs, rhs) {
        (Extended::Infinite, Extended::Infinite) => (true, true),
        (Extended::Infinite, Extended::Finite(_)) => (true, false),
        (Extended::Finite(_), Extended::Infinite) => (false, false),
        (Extended::Finite(a), Extended::Finite(b)) => {
            let tol = BOUND_TOL * a.abs().max(b.abs()).max(1.0);
            (a >= b - tol, (a - b).abs() <= tol)
        }
    };
    BoundRow { quantity: quantity.into(), lhs, rhs, holds, equal }
}

fn weighted_add(acc: Extended, w: f64, v: Extended) -> Extended {
    match (acc, v) {
        (Extended::Infinite, _) => Extended::Infinite,
        (_, Extended::Infinite) if w > 0.0 => Extended::Infinite,
        (Extended::Finite(a), Extended::Finite(b)) => Extended::Finite(a + w * b),
        (a, _) => a,
    }
}

/// Compares passage, visit, return-time and exit quantities of the whole walk
/// with the weighted sums over the minimal enclosures of `decomposition`.
pub fn check_decomposition_bounds(
    walk: &WalkSpec,
    decomposition: &Decomposition,
    i: usize,
    rho: &CMatrix,
    j: usize,
    domain: Option<&BTreeSet<usize>>,
) -> Result<BoundsReport> {
    let lhs_p = Extended::Finite(hitting::passage_probability(walk, i, rho, j)?.value);
    let lhs_n = hitting::expected_visits(walk, i, rho, j)?.value;
    let lhs_t = hitting::expected_return_time(walk, i, rho, j)?.value;
    let lhs_e = match domain {
        Some(d) => Some(Extended::Finite(hitting::exit_probability(walk, d, i, rho)?)),
        None => None,
    };
    let (mut rp, mut rn, mut rt, mut re) = (Extended::Finite(0.0), Extended::Finite(0.0), Extended::Finite(0.0), Extended::Finite(0.0));
    for enc in &decomposition.recurrent_part {
        let q = &enc.bases[i];
        if q.ncols() == 0 {
            continue;
        }
        let rho_k = q.adjoint() * rho * q;
        let w = rho_k.trace().re;
        if w <= 1e-14 {
            continue;
        }
        let rho_k = linalg::hermitian_part(&(rho_k / c(w)));
        let (rw, sites) = restrict(walk, enc)?;
        let local = |s: usize| sites.iter().position(|&x| x == s);
        let ii = local(i).unwrap();
        if let Some(jj) = local(j) {
            rp = weighted_add(rp, w, Extended::Finite(hitting::passage_probability(&rw, ii, &rho_k, jj)?.value));
            rn = weighted_add(rn, w, hitting::expected_visits(&rw, ii, &rho_k, jj)?.value);
            rt = weighted_add(rt, w, hitting::expected_return_time(&rw, ii, &rho_k, jj)?.value);
        }
        if let Some(d) = domain {
            let dk: BTreeSet<usize> = d.iter().filter_map(|&s| local(s)).collect();
            if dk.contains(&ii) && !hitting::boundary(&rw, &dk).is_empty() {
                re = weighted_add(re, w, Extended::Finite(hitting::exit_probability(&rw, &dk, ii, &rho_k)?));
            }
        }
    }
    let mut rows = vec![
        row("passage_probability", lhs_p, rp),
        row("expected_visits", lhs_n, rn),
        row("expected_return_time", lhs_t, rt),
    ];
    if let Some(e) = lhs_e {
        rows.push(row("exit_probability", e, re));
    }
    let dproj: f64 = {
        let q = &decomposition.transient_part.bases[i];
        if q.ncols() == 0 {
            0.0
        } else {
            linalg::max_abs(&(q.adjoint() * rho * q))
        }
    };
    let support_in = dproj <= 1e-10;
    let equalities_as_expected = !support_in || rows.iter().all(|r| r.equal);
    Ok(BoundsReport { rows, support_in_recurrent_space: support_in, equalities_as_expected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::linalg::{basis_vector, diag, max_abs};

    fn seed(i: usize, d: usize, k: usize) -> (usize, CVector) {
        (i, basis_vector(d, k))
    }

    #[test]
    fn closure_of_single_identity_site() {
        let mut w = WalkSpec::new([("0", 2)]).unwrap();
        w.set_transition("0", "0", linalg::identity(2)).unwrap();
        let e = enclosure_closure(&w, &[seed(0, 2, 0)]).unwrap();
        assert_eq!(e.dims(), vec![1]);
        assert!(e.closure_defect(&w) < 1e-12);
    }

    #[test]
    fn example_5_1_closure_from_e2() {
        let w = fixtures::example_5_1();
        let e = enclosure_closure(&w, &[seed(0, 2, 1)]).unwrap();
        assert_eq!(e.dims(), vec![1, 0, 1]);
        assert!((e.projector(2)[(1, 1)].re - 1.0).abs() < 1e-12);
        assert!(e.closure_defect(&w) < 1e-12);
    }

    #[test]
    fn example_5_4_closure_from_e1_is_not_everything() {
        // e2 at site 3 is never generated; site 0 absorbs.
        let w = fixtures::example_5_4();
        let e = enclosure_closure(&w, &[seed(1, 2, 0)]).unwrap();
        assert_eq!(e.dims(), vec![1, 2, 2, 1]);
        let e0 = enclosure_closure(&w, &[seed(0, 1, 0)]).unwrap();
        assert_eq!(e0.dims(), vec![1, 0, 0, 0]);
    }

    #[test]
    fn irreducibility_verdicts() {
        let (irr, wit) = is_irreducible(&fixtures::example_5_1()).unwrap();
        assert!(!irr);
        let wit = wit.unwrap();
        assert!(wit.closure_defect(&fixtures::example_5_1()) < 1e-8);
        assert!(!wit.is_full() && !wit.is_zero());
        for n in [2, 5, 12] {
            assert!(is_irreducible(&fixtures::example_5_2(0.25, n).unwrap()).unwrap().0);
        }
        assert!(is_irreducible(&fixtures::symmetric_cycle(5)).unwrap().0);
        assert!(is_irreducible(&fixtures::asymmetric_three_cycle()).unwrap().0);
        assert!(!is_irreducible(&fixtures::example_5_4()).unwrap().0);
        assert!(!is_irreducible(&fixtures::gamblers_ruin(4, 0.5).unwrap()).unwrap().0);
    }

    #[test]
    fn witness_hidden_from_basis_seeds() {
        // Both fibers carry the same unitary dynamics, so span{(e1 + e2)/√2}
        // at every site is closed, yet every basis seed generates everything
        // only if the dynamics mixes; here it does not mix e1+e2 with e1−e2.
        let h = linalg::real_matrix(2, 2, &[1.0, 1.0, 1.0, -1.0]) / c(2f64.sqrt());
        let swap = linalg::real_matrix(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let mut w = WalkSpec::new([("a", 2), ("b", 2)]).unwrap();
        let l = &swap / c(2f64.sqrt());
        w.set_transition("a", "b", l.clone()).unwrap();
        w.set_transition("b", "a", l.clone()).unwrap();
        w.set_transition("a", "a", l.clone()).unwrap();
        w.set_transition("b", "b", l).unwrap();
        let basis_closure = enclosure_closure(&w, &[seed(0, 2, 0)]).unwrap();
        assert_eq!(basis_closure.dims(), vec![2, 2]);
        let (irr, wit) = is_irreducible(&w).unwrap();
        assert!(!irr);
        let wit = wit.unwrap();
        assert_eq!(wit.total_dim(), 2);
        let plus = h.column(0).into_owned();
        let p = wit.projector(0);
        assert!((&p * &plus - &plus).norm() < 1e-8 || (&p * &plus).norm() < 1e-8);
    }

    #[test]
    fn irreducibility_is_unitarily_invariant() {
        let w = fixtures::quantum_ring(4, 2, 3);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
        let us: Vec<CMatrix> = (0..4).map(|_| fixtures::random_unitary(2, &mut rng)).collect();
        let mut v = WalkSpec::new((0..4).map(|k| (k.to_string(), 2))).unwrap();
        for (&(i, j), l) in w.transitions() {
            v.set_transition_at(i, j, &us[i] * l * us[j].adjoint()).unwrap();
        }
        assert_eq!(is_irreducible(&w).unwrap().0, is_irreducible(&v).unwrap().0);
        let red = fixtures::example_5_1();
        let mut v = WalkSpec::new((0..3).map(|k| (k.to_string(), 2))).unwrap();
        for (&(i, j), l) in red.transitions() {
            v.set_transition_at(i, j, &us[i] * l * us[j].adjoint()).unwrap();
        }
        assert!(!is_irreducible(&v).unwrap().0);
    }

    #[test]
    fn nilpotent_walk_is_reducible() {
        let mut w = WalkSpec::new([("a", 1), ("b", 1)]).unwrap();
        w.set_transition("b", "a", linalg::identity(1)).unwrap();
        w.set_leaky("b").unwrap();
        let (irr, wit) = is_irreducible(&w).unwrap();
        assert!(!irr);
        assert_eq!(wit.unwrap().dims(), vec![0, 1]);
        let single = WalkSpec::new([("a", 1)]).unwrap();
        assert!(is_irreducible(&single).unwrap().0);
    }

    #[test]
    fn decomposition_of_irreducible_walk() {
        let w = fixtures::quantum_ring(3, 2, 1);
        let d = decompose(&w).unwrap();
        assert_eq!(d.recurrent_part.len(), 1);
        assert!(d.recurrent_part[0].is_full());
        assert!(d.transient_part.is_zero());
    }

    #[test]
    fn decomposition_of_example_5_1() {
        let w = fixtures::example_5_1();
        let d = decompose(&w).unwrap();
        // The e1 loop through 0 and 1, plus site 2 split into two lines.
        assert_eq!(d.recurrent_part.len(), 3);
        assert_eq!(d.transient_part.dims(), vec![1, 1, 0]);
        let t0 = d.transient_part.projector(0);
        assert!((t0[(1, 1)].re - 1.0).abs() < 1e-10);
        assert!(d.warnings.iter().any(|m| m.contains("non-unique")));
        for e in &d.recurrent_part {
            assert!(e.closure_defect(&w) < 1e-8);
            let (rw, _) = restrict(&w, e).unwrap();
            assert!(is_irreducible(&rw).unwrap().0);
        }
        check_partition(&w, &d);
    }

    fn check_partition(w: &WalkSpec, d: &Decomposition) {
        for i in 0..w.n_sites() {
            let mut sum = d.transient_part.projector(i);
            for e in &d.recurrent_part {
                sum += e.projector(i);
            }
            assert!(max_abs(&(sum - linalg::identity(w.dim(i)))) < 1e-8);
        }
    }

    #[test]
    fn direct_sum_recovers_two_blocks() {
        let a = fixtures::quantum_ring(3, 1, 2);
        let b = fixtures::quantum_ring(3, 2, 9);
        let w = fixtures::fiber_direct_sum(&a, &b).unwrap();
        let d = decompose(&w).unwrap();
        assert_eq!(d.recurrent_part.len(), 2);
        let mut dims: Vec<usize> = d.recurrent_part.iter().map(|e| e.total_dim()).collect();
        dims.sort();
        assert_eq!(dims, vec![3, 6]);
        assert!(d.transient_part.is_zero());
        check_partition(&w, &d);
    }

    #[test]
    fn classification_of_dilations_is_recurrent() {
        for w in [fixtures::symmetric_cycle(5), fixtures::asymmetric_three_cycle(), fixtures::deterministic_cycle(4)] {
            let v = classify_recurrence(&w, 0).unwrap();
            assert_eq!(v.case, RecurrenceCase::Recurrent);
            assert!(v.consistent_with_visits);
        }
    }

    #[test]
    fn classification_refuses_reducible() {
        assert!(matches!(
            classify_recurrence(&fixtures::example_5_1(), 0),
            Err(OqwError::Precondition(_))
        ));
    }

    #[test]
    fn example_5_2_mixed_case() {
        let w = fixtures::example_5_2(0.25, 40).unwrap();
        let v = classify_recurrence(&w, 0).unwrap();
        assert_eq!(v.case, RecurrenceCase::Mixed);
        let wit = v.witnesses.unwrap();
        assert!(max_abs(&(&wit.rho - diag(&[0.0, 1.0]))) < 1e-6);
        assert!(wit.passage_rho >= 1.0 - 1e-6);
        assert!(wit.passage_rho_prime <= 1.0 - 1e-3);
        assert!(v.truncated && v.consistent_with_visits);
    }

    #[test]
    fn leaky_line_is_transient() {
        let w = fixtures::leaky_biased_line(8, 0.7).unwrap();
        let v = classify_recurrence(&w, 0).unwrap();
        assert_eq!(v.case, RecurrenceCase::Transient);
        assert!(v.consistent_with_visits);
    }

    #[test]
    fn bounds_for_example_5_1() {
        let w = fixtures::example_5_1();
        let d = decompose(&w).unwrap();
        let rho = diag(&[0.5, 0.5]);
        let rep = check_decomposition_bounds(&w, &d, 0, &rho, 0, Some(&[0, 1].into())).unwrap();
        assert!(!rep.support_in_recurrent_space);
        assert!(rep.rows.iter().all(|r| r.holds));
        assert_eq!(rep.rows[0].lhs, Extended::Finite(0.5));
        let rho = diag(&[1.0, 0.0]);
        let rep = check_decomposition_bounds(&w, &d, 0, &rho, 1, None).unwrap();
        assert!(rep.support_in_recurrent_space && rep.equalities_as_expected);
    }

    #[test]
    fn bounds_equal_on_direct_sum() {
        let a = fixtures::quantum_ring(3, 1, 2);
        let b = fixtures::quantum_ring(3, 2, 9);
        let w = fixtures::fiber_direct_sum(&a, &b).unwrap();
        let d = decompose(&w).unwrap();
        let rho = linalg::identity(3) / c(3.0);
        let rep = check_decomposition_bounds(&w, &d, 0, &rho, 2, Some(&[0, 1].into())).unwrap();
        assert!(rep.support_in_recurrent_space);
        assert!(rep.rows.iter().all(|r| r.equal), "{:?}", rep.rows);
    }
}
