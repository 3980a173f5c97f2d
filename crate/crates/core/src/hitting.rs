//! Taboo-path operators: passage probabilities, visit counts, return times,
//! exit statistics and harmonic measures.
//!
//! Every operator is a capture series `D + Σ_k C S^k E` where, for a path
//! `i → w_1 → ... → w_k → j`, `E` is the first step from `i` into the
//! allowed set `W = V ∖ taboo ∖ {j}`, `S` moves inside `W`, `C` captures into
//! `j`, and `D` is the direct step `i → j`. Intermediate vertices avoid the
//! taboo set; the endpoints are unconstrained.

use std::collections::{BTreeSet, VecDeque};

use serde::Serialize;

use crate::error::{OqwError, Result};
use crate::extended::Extended;
use crate::linalg::{self, c, CMatrix, CVector, C64};
use crate::model::{self, assemble_superoperator, DiagonalObservable, WalkSpec};

/// Spectral radii within this distance of 1 are treated as divergent.
pub const DIVERGENCE_GAP: f64 = 1e-7;
pub const ALPHA_GRID: [f64; 4] = [0.9, 0.99, 0.999, 0.9999];
/// Passage probabilities at least `1 − PASSAGE_ONE_TOL` count as certain.
pub const PASSAGE_ONE_TOL: f64 = 1e-8;
/// Dense Schur decompositions are only run on systems up to this size when a
/// cheaper certificate already settled convergence.
const EXACT_RADIUS_MAX_DIM: usize = 256;
const KRYLOV_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Solve,
    AlphaLimit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusKind {
    Exact,
    UpperBound,
}

#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    /// Spectral radius of the interior map `S` (or an upper bound).
    pub spectral_radius: f64,
    pub spectral_radius_kind: RadiusKind,
    pub method: Method,
    /// Dimension of the interior after pruning unreachable sites.
    pub interior_dim: usize,
    /// Dimension of the minimal realization, when one was needed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduced_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduced_spectral_radius: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub alpha_values: Vec<(f64, f64)>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Diagnostics {
    fn trivial() -> Self {
        Diagnostics {
            spectral_radius: 0.0,
            spectral_radius_kind: RadiusKind::Exact,
            method: Method::Solve,
            interior_dim: 0,
            reduced_dim: None,
            reduced_spectral_radius: None,
            alpha_values: Vec::new(),
            notes: Vec::new(),
        }
    }
}

/// A completely positive map `T_1(h_source) → T_1(h_target)` stored as a
/// `d_target² × d_source²` matrix on column-vectorized operators.
#[derive(Clone, Debug)]
pub struct CPMapBlock {
    pub source: usize,
    pub target: usize,
    pub taboo: BTreeSet<usize>,
    pub alpha: Option<f64>,
    pub matrix: CMatrix,
    pub diagnostics: Diagnostics,
}

impl CPMapBlock {
    pub fn source_dim(&self) -> usize {
        (self.matrix.ncols() as f64).sqrt().round() as usize
    }

    pub fn target_dim(&self) -> usize {
        (self.matrix.nrows() as f64).sqrt().round() as usize
    }

    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let v = &self.matrix * linalg::vectorize(rho);
        linalg::unvectorize(v.as_slice(), self.target_dim())
    }

    pub fn apply_dual(&self, x: &CMatrix) -> CMatrix {
        let v = self.matrix.adjoint() * linalg::vectorize(x);
        linalg::unvectorize(v.as_slice(), self.source_dim())
    }

    /// `Φ*(Id)`.
    pub fn dual_identity(&self) -> CMatrix {
        self.apply_dual(&linalg::identity(self.target_dim()))
    }

    /// Choi matrix `Σ_{a,b} E_ab ⊗ Φ(E_ab)`.
    pub fn choi(&self) -> CMatrix {
        let ds = self.source_dim();
        let dt = self.target_dim();
        let mut out = CMatrix::zeros(ds * dt, ds * dt);
        for a in 0..ds {
            for b in 0..ds {
                let col = self.matrix.column(a + b * ds);
                let block = linalg::unvectorize(col.as_slice(), dt);
                out.view_mut((a * dt, b * dt), (dt, dt)).copy_from(&block);
            }
        }
        out
    }

    pub fn is_completely_positive(&self, tol: f64) -> bool {
        let choi = self.choi();
        linalg::hermiticity_defect(&choi) <= tol && linalg::min_eigenvalue(&choi) >= -tol
    }

    /// Eigenvalues of `Φ*(Id)` lie in `[−tol, 1 + tol]`.
    pub fn is_contraction(&self, tol: f64) -> bool {
        let (vals, _) = linalg::eigh(&self.dual_identity());
        vals.iter().all(|&x| x >= -tol && x <= 1.0 + tol)
    }

    pub fn spectral_radius(&self) -> f64 {
        if self.matrix.nrows() != self.matrix.ncols() {
            return f64::NAN;
        }
        linalg::spectral_radius(&self.matrix)
    }
}

/// The pieces of a capture series, restricted to the pruned interior.
struct CaptureSystem {
    s: CMatrix,
    e: CMatrix,
    c: CMatrix,
    d: CMatrix,
    /// Stacked `vec(Id)` over the interior blocks.
    id: CVector,
    block_dims: Vec<usize>,
}

fn capture_system(walk: &WalkSpec, i: usize, j: usize, taboo: &BTreeSet<usize>) -> CaptureSystem {
    let n = walk.n_sites();
    let allowed: Vec<bool> = (0..n).map(|w| w != j && !taboo.contains(&w)).collect();

    let mut forward = vec![false; n];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for w in walk.successors(i) {
        if allowed[w] && !forward[w] {
            forward[w] = true;
            queue.push_back(w);
        }
    }
    while let Some(u) = queue.pop_front() {
        for w in walk.successors(u) {
            if allowed[w] && !forward[w] {
                forward[w] = true;
                queue.push_back(w);
            }
        }
    }
    let mut backward = vec![false; n];
    for w in walk.predecessors(j) {
        if allowed[w] && !backward[w] {
            backward[w] = true;
            queue.push_back(w);
        }
    }
    while let Some(u) = queue.pop_front() {
        for w in walk.predecessors(u) {
            if allowed[w] && !backward[w] {
                backward[w] = true;
                queue.push_back(w);
            }
        }
    }
    let interior: BTreeSet<usize> = (0..n).filter(|&w| forward[w] && backward[w]).collect();
    let src: BTreeSet<usize> = [i].into();
    let tgt: BTreeSet<usize> = [j].into();
    let s = assemble_superoperator(walk, &interior, &interior).matrix;
    let e = assemble_superoperator(walk, &src, &interior).matrix;
    let cm = assemble_superoperator(walk, &interior, &tgt).matrix;
    let d = match walk.transition(j, i) {
        Some(l) => linalg::sandwich(l),
        None => CMatrix::zeros(walk.dim(j).pow(2), walk.dim(i).pow(2)),
    };
    let sites: Vec<usize> = interior.iter().copied().collect();
    let id_blocks: Vec<CMatrix> = walk.dims().iter().map(|&k| linalg::identity(k)).collect();
    let id = model::pack_blocks(walk, &sites, &id_blocks);
    let block_dims = sites.iter().map(|&w| walk.dim(w)).collect();
    CaptureSystem { s, e, c: cm, d, id, block_dims }
}

struct RadiusInfo {
    value: f64,
    kind: RadiusKind,
    below: bool,
}

/// Decides `r(S) < 1 − gap` for a completely positive `S` (with `r(S) ≤ 1`).
///
/// If `Y = (I − S*)^{-1}(Id)` exists and is positive, every Perron eigenvector
/// `X ≥ 0` of `S` satisfies `Tr(XY) = Tr X/(1 − r)`, hence
/// `r ≤ 1 − 1/max‖Y_w‖`. Only when this certificate fails is a Schur
/// decomposition run.
fn cp_radius(sys: &CaptureSystem) -> RadiusInfo {
    let n = sys.s.nrows();
    if n == 0 {
        return RadiusInfo { value: 0.0, kind: RadiusKind::Exact, below: true };
    }
    let a = linalg::identity(n) - sys.s.adjoint();
    let rhs = CMatrix::from_column_slice(n, 1, sys.id.as_slice());
    let mut bound = None;
    if let Some(y) = linalg::solve(&a, &rhs) {
        if linalg::is_finite(&y) {
            let y = CVector::from_column_slice(y.as_slice());
            let mut max_norm: f64 = 0.0;
            let mut min_eig = f64::INFINITY;
            let mut offset = 0;
            for &d in &sys.block_dims {
                let blk = linalg::unvectorize(&y.as_slice()[offset..offset + d * d], d);
                let (vals, _) = linalg::eigh(&blk);
                min_eig = min_eig.min(vals[0]);
                max_norm = max_norm.max(*vals.last().unwrap());
                offset += d * d;
            }
            if min_eig >= 1.0 - 1e-6 && max_norm < 0.5 / DIVERGENCE_GAP {
                bound = Some(1.0 - 1.0 / max_norm);
            }
        }
    }
    match bound {
        Some(b) if n > EXACT_RADIUS_MAX_DIM => RadiusInfo { value: b.max(0.0), kind: RadiusKind::UpperBound, below: true },
        Some(_) => {
            let r = linalg::spectral_radius(&sys.s);
            RadiusInfo { value: r, kind: RadiusKind::Exact, below: true }
        }
        None => {
            let r = linalg::spectral_radius(&sys.s);
            RadiusInfo { value: r, kind: RadiusKind::Exact, below: r < 1.0 - DIVERGENCE_GAP }
        }
    }
}

/// Orthonormal basis of the Krylov space `span{B, AB, A²B, ...}`.
pub(crate) fn krylov_basis(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let n = a.nrows();
    let scale = linalg::max_abs(b).max(1e-300);
    let mut q = CMatrix::zeros(n, 0);
    let mut added = linalg::extend_basis(&mut q, &(b / c(scale)), KRYLOV_TOL);
    while added > 0 && q.ncols() < n {
        let last = q.columns(q.ncols() - added, added).into_owned();
        let cand = a * last;
        added = linalg::extend_basis(&mut q, &cand, KRYLOV_TOL);
    }
    q
}

/// Minimal realization `(S_m, E_m, C_m)` with the same Markov parameters
/// `C S^k E`: restrict to the reachable space of `E`, then to the part
/// observable through `C`.
fn minimal_realization(s: &CMatrix, e: &CMatrix, cm: &CMatrix) -> (CMatrix, CMatrix, CMatrix) {
    let q = krylov_basis(s, e);
    let s_r = q.adjoint() * s * &q;
    let e_r = q.adjoint() * e;
    let c_r = cm * &q;
    let p = krylov_basis(&s_r.adjoint(), &c_r.adjoint());
    let s_m = p.adjoint() * &s_r * &p;
    let e_m = p.adjoint() * &e_r;
    let c_m = &c_r * &p;
    (s_m, e_m, c_m)
}

/// A capture system whose interior map is known to have spectral radius below
/// `1 − DIVERGENCE_GAP`, or the original system flagged for the α-limit.
struct Solvable {
    s: CMatrix,
    e: CMatrix,
    c: CMatrix,
    d: CMatrix,
    alpha_only: bool,
    diagnostics: Diagnostics,
}

fn prepare(walk: &WalkSpec, i: usize, j: usize, taboo: &BTreeSet<usize>) -> (CaptureSystem, Solvable) {
    let sys = capture_system(walk, i, j, taboo);
    let radius = cp_radius(&sys);
    let mut diagnostics = Diagnostics {
        spectral_radius: radius.value,
        spectral_radius_kind: radius.kind,
        method: Method::Solve,
        interior_dim: sys.s.nrows(),
        ..Diagnostics::trivial()
    };
    if radius.below {
        let solvable = Solvable {
            s: sys.s.clone(),
            e: sys.e.clone(),
            c: sys.c.clone(),
            d: sys.d.clone(),
            alpha_only: false,
            diagnostics,
        };
        return (sys, solvable);
    }
    let (s_m, e_m, c_m) = minimal_realization(&sys.s, &sys.e, &sys.c);
    let r_m = linalg::spectral_radius(&s_m);
    diagnostics.reduced_dim = Some(s_m.nrows());
    diagnostics.reduced_spectral_radius = Some(r_m);
    if r_m < 1.0 - DIVERGENCE_GAP {
        let solvable = Solvable { s: s_m, e: e_m, c: c_m, d: sys.d.clone(), alpha_only: false, diagnostics };
        return (sys, solvable);
    }
    diagnostics.method = Method::AlphaLimit;
    let solvable = Solvable {
        s: sys.s.clone(),
        e: sys.e.clone(),
        c: sys.c.clone(),
        d: sys.d.clone(),
        alpha_only: true,
        diagnostics,
    };
    (sys, solvable)
}

fn solve_or_fail(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    linalg::solve(a, b).ok_or_else(|| OqwError::numerical("singular system in capture series"))
}

/// `α D + α² C (I − αS)^{-1} E` on a capture system.
fn alpha_series(s: &CMatrix, e: &CMatrix, cm: &CMatrix, d: &CMatrix, alpha: f64) -> Result<CMatrix> {
    let n = s.nrows();
    if n == 0 {
        return Ok(d * c(alpha));
    }
    let x = solve_or_fail(&(linalg::identity(n) - s * c(alpha)), e)?;
    Ok(d * c(alpha) + cm * x * c(alpha * alpha))
}

/// `d/dα` of [`alpha_series`].
fn alpha_series_derivative(s: &CMatrix, e: &CMatrix, cm: &CMatrix, d: &CMatrix, alpha: f64) -> Result<CMatrix> {
    let n = s.nrows();
    if n == 0 {
        return Ok(d.clone());
    }
    let a = linalg::identity(n) - s * c(alpha);
    let x = solve_or_fail(&a, e)?;
    let y = solve_or_fail(&a, &(s * &x))?;
    Ok(d + cm * &x * c(2.0 * alpha) + cm * y * c(alpha * alpha))
}

enum AlphaLimit {
    Converged(CMatrix),
    Diverged,
    Inconclusive,
}

/// Limit of a sequence evaluated on [`ALPHA_GRID`]. Converged when the
/// increments shrink geometrically (then extrapolated), diverged when they do
/// not shrink.
fn alpha_limit(values: &[CMatrix]) -> AlphaLimit {
    let k = values.len();
    let diffs: Vec<f64> = (1..k).map(|m| linalg::max_abs(&(&values[m] - &values[m - 1]))).collect();
    let last = diffs[diffs.len() - 1];
    let prev = diffs[diffs.len() - 2];
    let scale = linalg::max_abs(&values[k - 1]).max(1.0);
    if last <= 1e-9 * scale {
        return AlphaLimit::Converged(values[k - 1].clone());
    }
    let ratio = last / prev;
    if ratio < 0.5 {
        let step = &values[k - 1] - &values[k - 2];
        return AlphaLimit::Converged(&values[k - 1] + step * c(ratio / (1.0 - ratio)));
    }
    if ratio > 0.9 {
        AlphaLimit::Diverged
    } else {
        AlphaLimit::Inconclusive
    }
}

fn block_from(walk: &WalkSpec, i: usize, j: usize, taboo: &BTreeSet<usize>, alpha: Option<f64>, matrix: CMatrix, diagnostics: Diagnostics) -> CPMapBlock {
    let _ = walk;
    CPMapBlock { source: i, target: j, taboo: taboo.clone(), alpha, matrix, diagnostics }
}

fn check_site(walk: &WalkSpec, i: usize) -> Result<()> {
    if i < walk.n_sites() {
        Ok(())
    } else {
        Err(OqwError::Input(format!("site index {i} out of range")))
    }
}

/// `ρ ↦ Σ_π L_π ρ L_π^†` over paths `i → j` of length ≥ 1 whose intermediate
/// vertices avoid `taboo ∪ {j}`.
pub fn taboo_operator(walk: &WalkSpec, i: usize, j: usize, taboo: &BTreeSet<usize>) -> Result<CPMapBlock> {
    check_site(walk, i)?;
    check_site(walk, j)?;
    let (_, sol) = prepare(walk, i, j, taboo);
    let mut diagnostics = sol.diagnostics;
    if !sol.alpha_only {
        let n = sol.s.nrows();
        let matrix = if n == 0 {
            sol.d.clone()
        } else {
            let x = solve_or_fail(&(linalg::identity(n) - &sol.s), &sol.e)?;
            &sol.d + &sol.c * x
        };
        return Ok(block_from(walk, i, j, taboo, None, matrix, diagnostics));
    }
    let values = ALPHA_GRID
        .iter()
        .map(|&a| alpha_series(&sol.s, &sol.e, &sol.c, &sol.d, a))
        .collect::<Result<Vec<_>>>()?;
    match alpha_limit(&values) {
        AlphaLimit::Converged(m) => {
            diagnostics.notes.push("value obtained as the α → 1 limit".into());
            Ok(block_from(walk, i, j, taboo, None, m, diagnostics))
        }
        _ => Err(OqwError::Numerical {
            message: "capture series has no monotone α-limit".into(),
            residual: None,
            spectral_radius: Some(diagnostics.spectral_radius),
        }),
    }
}

/// Length-weighted operator `Σ_π α^{ℓ(π)} L_π ρ L_π^†`.
pub fn alpha_operator(walk: &WalkSpec, i: usize, j: usize, taboo: &BTreeSet<usize>, alpha: f64) -> Result<CPMapBlock> {
    check_site(walk, i)?;
    check_site(walk, j)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(OqwError::Input(format!("α = {alpha} must lie in (0, 1)")));
    }
    let sys = capture_system(walk, i, j, taboo);
    let matrix = alpha_series(&sys.s, &sys.e, &sys.c, &sys.d, alpha)?;
    let diagnostics = Diagnostics { interior_dim: sys.s.nrows(), ..Diagnostics::trivial() };
    Ok(block_from(walk, i, j, taboo, Some(alpha), matrix, diagnostics))
}

pub fn first_passage_taboo(j: usize) -> BTreeSet<usize> {
    [j].into()
}

/// `𝔓_{j,i}`: first passage from `i` to `j`.
pub fn passage_operator(walk: &WalkSpec, i: usize, j: usize) -> Result<CPMapBlock> {
    taboo_operator(walk, i, j, &first_passage_taboo(j))
}

pub(crate) fn check_state(walk: &WalkSpec, i: usize, rho: &CMatrix) -> Result<()> {
    check_site(walk, i)?;
    let d = walk.dim(i);
    if rho.shape() != (d, d) {
        return Err(OqwError::Structural(format!(
            "state has shape {:?}, site {} has dimension {d}",
            rho.shape(),
            walk.site_id(i)
        )));
    }
    let tol = 1e-8;
    if linalg::hermiticity_defect(rho) > tol || linalg::min_eigenvalue(rho) < -tol {
        return Err(OqwError::Input("state must be Hermitian positive semidefinite".into()));
    }
    if (rho.trace().re - 1.0).abs() > tol {
        return Err(OqwError::Input(format!("state has trace {}, expected 1", rho.trace().re)));
    }
    Ok(())
}

fn probability(x: f64, what: &str) -> Result<f64> {
    if !(-1e-6..=1.0 + 1e-6).contains(&x) {
        return Err(OqwError::Numerical {
            message: format!("{what} {x} lies outside [0, 1]"),
            residual: None,
            spectral_radius: None,
        });
    }
    Ok(x.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalarResult {
    pub value: f64,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtendedResult {
    pub value: Extended,
    pub diagnostics: Diagnostics,
}

/// `P_{i,ρ}(t_j < ∞) = Tr 𝔓_{j,i}(ρ)`.
pub fn passage_probability(walk: &WalkSpec, i: usize, rho: &CMatrix, j: usize) -> Result<ScalarResult> {
    check_state(walk, i, rho)?;
    let op = passage_operator(walk, i, j)?;
    let value = probability(op.apply(rho).trace().re, "passage probability")?;
    Ok(ScalarResult { value, diagnostics: op.diagnostics })
}

/// Analyzes `Σ_{k≥0} Tr A^k(σ)` for a completely positive `A` on one block.
/// The sum is infinite exactly when the minimal realization of the scalar
/// sequence has a mode of modulus ≥ 1.
fn trace_series(a: &CMatrix, sigma: &CMatrix) -> (Extended, Diagnostics) {
    let d = sigma.nrows();
    let b = CMatrix::from_column_slice(d * d, 1, linalg::vectorize(sigma).as_slice());
    let cv = CMatrix::from_column_slice(d * d, 1, linalg::vectorize(&linalg::identity(d)).as_slice());
    let r = linalg::spectral_radius(a);
    let mut diagnostics = Diagnostics {
        spectral_radius: r,
        interior_dim: a.nrows(),
        ..Diagnostics::trivial()
    };
    // α-grid cross-check of growth.
    for &alpha in &ALPHA_GRID {
        let m = linalg::identity(a.nrows()) - a * c(alpha);
        if let Some(x) = linalg::solve(&m, &b) {
            let v = (cv.adjoint() * x)[(0, 0)].re;
            diagnostics.alpha_values.push((alpha, v));
        }
    }
    if linalg::max_abs(&b) == 0.0 {
        return (Extended::Finite(0.0), diagnostics);
    }
    let (s_m, e_m, c_m) = if r < 1.0 - DIVERGENCE_GAP {
        (a.clone(), b.clone(), cv.adjoint())
    } else {
        let (s_m, e_m, c_m) = minimal_realization(a, &b, &cv.adjoint());
        diagnostics.reduced_dim = Some(s_m.nrows());
        (s_m, e_m, c_m)
    };
    let n = s_m.nrows();
    if n == 0 {
        return (Extended::Finite(0.0), diagnostics);
    }
    let r_m = linalg::spectral_radius(&s_m);
    if diagnostics.reduced_dim.is_some() {
        diagnostics.reduced_spectral_radius = Some(r_m);
    }
    if r_m >= 1.0 - DIVERGENCE_GAP {
        diagnostics.notes.push("a mode of modulus ≥ 1 is excited and observed".into());
        return (Extended::Infinite, diagnostics);
    }
    match linalg::solve(&(linalg::identity(n) - &s_m), &e_m) {
        Some(x) => (Extended::Finite((c_m * x)[(0, 0)].re.max(0.0)), diagnostics),
        None => (Extended::Infinite, diagnostics),
    }
}

/// `E_{i,ρ}(n_j) = Tr 𝔑_{j,i}(ρ)` with `𝔑_{j,i} = (Id − 𝔓_{j,j})^{-1} 𝔓_{j,i}`;
/// visits are counted at times `n ≥ 1`.
pub fn expected_visits(walk: &WalkSpec, i: usize, rho: &CMatrix, j: usize) -> Result<ExtendedResult> {
    check_state(walk, i, rho)?;
    let p_ji = passage_operator(walk, i, j)?;
    let p_jj = if i == j { p_ji.clone() } else { passage_operator(walk, j, j)? };
    let sigma = p_ji.apply(rho);
    let (value, diagnostics) = trace_series(&p_jj.matrix, &sigma);
    Ok(ExtendedResult { value, diagnostics })
}

/// `𝔑_{j,i}` as an operator; requires `r(𝔓_{j,j}) < 1`.
pub fn visit_operator(walk: &WalkSpec, i: usize, j: usize) -> Result<CPMapBlock> {
    let p_ji = passage_operator(walk, i, j)?;
    let p_jj = if i == j { p_ji.clone() } else { passage_operator(walk, j, j)? };
    resolvent_compose(&p_jj, p_ji, "expected visits diverge")
}

fn resolvent_compose(p_jj: &CPMapBlock, mut p_ji: CPMapBlock, what: &str) -> Result<CPMapBlock> {
    let r = p_jj.spectral_radius();
    if r >= 1.0 - DIVERGENCE_GAP {
        return Err(OqwError::Numerical {
            message: format!("{what}: return map has spectral radius {r:.6}"),
            residual: None,
            spectral_radius: Some(r),
        });
    }
    let n = p_jj.matrix.nrows();
    p_ji.matrix = solve_or_fail(&(linalg::identity(n) - &p_jj.matrix), &p_ji.matrix)?;
    Ok(p_ji)
}

/// `𝔗_{j,i} = D + C(R + R²)E`, the passage operator weighted by path length.
pub fn time_operator(walk: &WalkSpec, i: usize, j: usize) -> Result<Option<CPMapBlock>> {
    let taboo = first_passage_taboo(j);
    let (_, sol) = prepare(walk, i, j, &taboo);
    if sol.alpha_only {
        return Ok(None);
    }
    let n = sol.s.nrows();
    let matrix = if n == 0 {
        sol.d.clone()
    } else {
        let a = linalg::identity(n) - &sol.s;
        let x = solve_or_fail(&a, &sol.e)?;
        let x2 = solve_or_fail(&a, &x)?;
        &sol.d + &sol.c * (x + x2)
    };
    Ok(Some(block_from(walk, i, j, &taboo, None, matrix, sol.diagnostics)))
}

#[derive(Clone, Debug, Serialize)]
pub struct ReturnTimeResult {
    pub value: Extended,
    pub passage_probability: f64,
    /// Central difference of `α ↦ Tr 𝔓^{(α)}_{j,i}(ρ)` just below 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_derivative: Option<f64>,
    pub diagnostics: Diagnostics,
}

/// `E_{i,ρ}(t_j)`, infinite whenever the passage probability is below one.
pub fn expected_return_time(walk: &WalkSpec, i: usize, rho: &CMatrix, j: usize) -> Result<ReturnTimeResult> {
    check_state(walk, i, rho)?;
    let passage = passage_probability(walk, i, rho, j)?;
    let taboo = first_passage_taboo(j);
    let alpha_derivative = {
        let (a0, h) = (1.0 - 2e-5, 1e-5);
        let up = alpha_operator(walk, i, j, &taboo, a0 + h)?.apply(rho).trace().re;
        let down = alpha_operator(walk, i, j, &taboo, a0 - h)?.apply(rho).trace().re;
        Some((up - down) / (2.0 * h))
    };
    if passage.value < 1.0 - PASSAGE_ONE_TOL {
        let mut diagnostics = passage.diagnostics;
        diagnostics.notes.push("passage probability below one".into());
        return Ok(ReturnTimeResult {
            value: Extended::Infinite,
            passage_probability: passage.value,
            alpha_derivative,
            diagnostics,
        });
    }
    match time_operator(walk, i, j)? {
        Some(t) => Ok(ReturnTimeResult {
            value: Extended::Finite(t.apply(rho).trace().re),
            passage_probability: passage.value,
            alpha_derivative,
            diagnostics: t.diagnostics,
        }),
        None => {
            // Interior has an observed mode on the unit circle: use the
            // derivative of the α-series.
            let sys = capture_system(walk, i, j, &taboo);
            let values = ALPHA_GRID
                .iter()
                .map(|&a| alpha_series_derivative(&sys.s, &sys.e, &sys.c, &sys.d, a))
                .collect::<Result<Vec<_>>>()?;
            let mut diagnostics = passage.diagnostics;
            diagnostics.method = Method::AlphaLimit;
            diagnostics.alpha_values = ALPHA_GRID
                .iter()
                .zip(&values)
                .map(|(&a, m)| (a, linalg::unvectorize((m * linalg::vectorize(rho)).as_slice(), walk.dim(j)).trace().re))
                .collect();
            let value = match alpha_limit(&values) {
                AlphaLimit::Converged(m) => {
                    Extended::Finite(linalg::unvectorize((m * linalg::vectorize(rho)).as_slice(), walk.dim(j)).trace().re)
                }
                AlphaLimit::Diverged => {
                    diagnostics.notes.push("time-weighted series diverges although passage is certain".into());
                    Extended::Infinite
                }
                AlphaLimit::Inconclusive => {
                    return Err(OqwError::Numerical {
                        message: "time-weighted α-series is inconclusive".into(),
                        residual: None,
                        spectral_radius: Some(diagnostics.spectral_radius),
                    })
                }
            };
            Ok(ReturnTimeResult { value, passage_probability: passage.value, alpha_derivative, diagnostics })
        }
    }
}

/// `𝔓_{j,i}(ρ) / Tr 𝔓_{j,i}(ρ)`.
pub fn conditional_state_at_hit(walk: &WalkSpec, i: usize, rho: &CMatrix, j: usize) -> Result<CMatrix> {
    check_state(walk, i, rho)?;
    let op = passage_operator(walk, i, j)?;
    let out = op.apply(rho);
    let t = out.trace().re;
    if t <= 1e-12 {
        return Err(OqwError::Precondition(format!(
            "site {} is reached with probability {t:.3e}; the conditional state is undefined",
            walk.site_id(j)
        )));
    }
    Ok(linalg::hermitian_part(&(out / c(t))))
}

/// `∂D = {i ∉ D : L_{i,j} ≠ 0 for some j ∈ D}`.
pub fn boundary(walk: &WalkSpec, domain: &BTreeSet<usize>) -> BTreeSet<usize> {
    (0..walk.n_sites())
        .filter(|i| !domain.contains(i))
        .filter(|&i| domain.iter().any(|&j| walk.has_edge(i, j)))
        .collect()
}

/// Taboo set realizing `{t_j ≤ t_∂D}`: `V ∖ D` for boundary targets and
/// `(V ∖ D) ∪ {j}` for interior ones.
pub fn domain_taboo(walk: &WalkSpec, domain: &BTreeSet<usize>, j: usize) -> BTreeSet<usize> {
    let mut taboo: BTreeSet<usize> = (0..walk.n_sites()).filter(|k| !domain.contains(k)).collect();
    if domain.contains(&j) {
        taboo.insert(j);
    }
    taboo
}

fn check_domain(walk: &WalkSpec, domain: &BTreeSet<usize>, i: usize) -> Result<BTreeSet<usize>> {
    if domain.iter().any(|&k| k >= walk.n_sites()) {
        return Err(OqwError::Input("domain contains an unknown site".into()));
    }
    if !domain.contains(&i) {
        return Err(OqwError::Input(format!("start site {} is not in the domain", walk.site_id(i))));
    }
    let b = boundary(walk, domain);
    if b.is_empty() {
        return Err(OqwError::Input("domain has empty boundary".into()));
    }
    Ok(b)
}

/// `𝔓^D_{j,i}` for `i ∈ D` and `j ∈ D ∪ ∂D`.
pub fn domain_passage_operator(walk: &WalkSpec, domain: &BTreeSet<usize>, i: usize, j: usize) -> Result<CPMapBlock> {
    taboo_operator(walk, i, j, &domain_taboo(walk, domain, j))
}

/// `P_{i,ρ}(t_∂D < ∞) = Σ_{j∈∂D} Tr 𝔓^D_{j,i}(ρ)`.
pub fn exit_probability(walk: &WalkSpec, domain: &BTreeSet<usize>, i: usize, rho: &CMatrix) -> Result<f64> {
    Ok(harmonic_measure(walk, domain, i, rho)?.total)
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundaryMass {
    pub site: String,
    pub mass: f64,
    /// `E(ρ_{t_∂D} | x_{t_∂D} = j)`; absent when the mass vanishes.
    #[serde(with = "crate::io::option_matrix")]
    pub exit_state: Option<CMatrix>,
}

#[derive(Clone, Debug, Serialize)]
pub struct HarmonicMeasure {
    pub masses: Vec<BoundaryMass>,
    pub total: f64,
}

impl HarmonicMeasure {
    pub fn mass_at(&self, site: &str) -> Option<f64> {
        self.masses.iter().find(|m| m.site == site).map(|m| m.mass)
    }
}

pub fn harmonic_measure(walk: &WalkSpec, domain: &BTreeSet<usize>, i: usize, rho: &CMatrix) -> Result<HarmonicMeasure> {
    check_state(walk, i, rho)?;
    let b = check_domain(walk, domain, i)?;
    let mut masses = Vec::new();
    let mut total = 0.0;
    for &j in &b {
        let out = domain_passage_operator(walk, domain, i, j)?.apply(rho);
        let mass = probability(out.trace().re, "harmonic measure")?;
        total += mass;
        let exit_state = (mass > 1e-12).then(|| linalg::hermitian_part(&(out / c(mass))));
        masses.push(BoundaryMass { site: walk.site_id(j).to_string(), mass, exit_state });
    }
    if total > 1.0 + 1e-8 {
        return Err(OqwError::Numerical {
            message: format!("harmonic measure has total mass {total}"),
            residual: Some(total - 1.0),
            spectral_radius: None,
        });
    }
    Ok(HarmonicMeasure { masses, total: total.min(1.0) })
}

/// `𝔑^D_{j,i} = (Id − 𝔓^D_{j,j})^{-1} 𝔓^D_{j,i}` for `j ∈ D`; for `j ∈ ∂D`
/// this is `𝔓^D_{j,i}`.
pub fn domain_visit_operator(walk: &WalkSpec, domain: &BTreeSet<usize>, i: usize, j: usize) -> Result<CPMapBlock> {
    let p_ji = domain_passage_operator(walk, domain, i, j)?;
    if !domain.contains(&j) {
        return Ok(p_ji);
    }
    let p_jj = if i == j { p_ji.clone() } else { domain_passage_operator(walk, domain, j, j)? };
    resolvent_compose(&p_jj, p_ji, "domain visits diverge (reducible walk? see structure::decompose)")
}

/// `E_{i,ρ}(n^D_j)`, visits to `j ∈ D` at times `1 ≤ n ≤ t_∂D`.
pub fn expected_domain_visits(walk: &WalkSpec, domain: &BTreeSet<usize>, i: usize, rho: &CMatrix, j: usize) -> Result<ScalarResult> {
    check_state(walk, i, rho)?;
    check_domain(walk, domain, i)?;
    if !domain.contains(&j) {
        return Err(OqwError::Input(format!("target {} is not in the domain", walk.site_id(j))));
    }
    let p_ji = domain_passage_operator(walk, domain, i, j)?;
    let p_jj = if i == j { p_ji.clone() } else { domain_passage_operator(walk, domain, j, j)? };
    let sigma = p_ji.apply(rho);
    let (value, diagnostics) = trace_series(&p_jj.matrix, &sigma);
    match value {
        Extended::Finite(v) => Ok(ScalarResult { value: v, diagnostics }),
        Extended::Infinite => Err(OqwError::Numerical {
            message: "expected domain visits diverge (reducible walk? see structure::decompose)".into(),
            residual: None,
            spectral_radius: Some(diagnostics.spectral_radius),
        }),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PathSums {
    /// Contribution of paths of each length `1..=max_len` (index 0 is length 1).
    pub by_length: Vec<f64>,
    /// Cumulative sums.
    pub partial: Vec<f64>,
    pub nodes_visited: usize,
}

pub const DEFAULT_NODE_BUDGET: usize = 5_000_000;

/// Literal enumeration of taboo paths `i → j` up to `max_len` steps,
/// returning `Tr L_π ρ L_π^†` summed per length.
pub fn brute_force_path_sum(
    walk: &WalkSpec,
    i: usize,
    rho: &CMatrix,
    j: usize,
    taboo: &BTreeSet<usize>,
    max_len: usize,
    node_budget: usize,
) -> Result<PathSums> {
    check_site(walk, i)?;
    check_site(walk, j)?;
    let mut by_length = vec![0.0; max_len];
    let mut nodes = 0usize;
    // Explicit stack of (site, unnormalized state, length so far).
    let mut stack: Vec<(usize, CMatrix, usize)> = vec![(i, rho.clone(), 0)];
    while let Some((site, state, len)) = stack.pop() {
        if len == max_len {
            continue;
        }
        for next in walk.successors(site) {
            nodes += 1;
            if nodes > node_budget {
                return Err(OqwError::Numerical {
                    message: format!("path enumeration exceeded the node budget of {node_budget}"),
                    residual: None,
                    spectral_radius: None,
                });
            }
            let l = walk.transition(next, site).expect("successor has a transition");
            let out = l * &state * l.adjoint();
            let mass = out.trace().re;
            if mass <= 0.0 {
                continue;
            }
            if next == j {
                by_length[len] += mass;
            } else if !taboo.contains(&next) {
                stack.push((next, out, len + 1));
            }
        }
    }
    let mut partial = Vec::with_capacity(max_len);
    let mut acc = 0.0;
    for &x in &by_length {
        acc += x;
        partial.push(acc);
    }
    Ok(PathSums { by_length, partial, nodes_visited: nodes })
}

/// Dual `𝔓*_{j,i}(Id)` packaged as an observable at `i`.
pub fn passage_dual_identity(walk: &WalkSpec, i: usize, j: usize) -> Result<DiagonalObservable> {
    let op = passage_operator(walk, i, j)?;
    Ok(DiagonalObservable::concentrated(walk, i, op.dual_identity()))
}

/// Helper for tests and callers holding a ket: `|v⟩⟨v| / ⟨v|v⟩`.
pub fn pure_state(v: &[C64]) -> CMatrix {
    let v = CVector::from_column_slice(v);
    let n = v.norm_squared();
    linalg::projector(&v) / c(n)
}
