//! Walks, block-diagonal states and observables, and the one-step map.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{OqwError, Result};
use crate::linalg::{self, c, CMatrix, CVector, C64};

pub const DEFAULT_TOLERANCE: f64 = 1e-9;

/// An open quantum walk on a finite vertex set.
///
/// `transitions[(i, j)]` holds `L_{i,j}`, the operator applied when the walker
/// moves from site `j` to site `i` (shape `d_i × d_j`). Sites flagged as
/// leaky may satisfy `Σ_i L_{i,j}^† L_{i,j} ≤ Id` instead of equality: the
/// missing mass is the probability of leaving the modelled window.
#[derive(Clone, Debug)]
pub struct WalkSpec {
    sites: Vec<String>,
    dims: Vec<usize>,
    index: HashMap<String, usize>,
    transitions: BTreeMap<(usize, usize), CMatrix>,
    leaky: BTreeSet<usize>,
    pub tolerance: f64,
}

impl WalkSpec {
    pub fn new<S: Into<String>>(sites: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut walk = WalkSpec {
            sites: Vec::new(),
            dims: Vec::new(),
            index: HashMap::new(),
            transitions: BTreeMap::new(),
            leaky: BTreeSet::new(),
            tolerance: DEFAULT_TOLERANCE,
        };
        for (id, dim) in sites {
            let id = id.into();
            if dim == 0 {
                return Err(OqwError::Structural(format!("site {id} has dimension 0")));
            }
            if walk.index.insert(id.clone(), walk.sites.len()).is_some() {
                return Err(OqwError::Structural(format!("duplicate site id {id}")));
            }
            walk.sites.push(id);
            walk.dims.push(dim);
        }
        Ok(walk)
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    /// Sets `L_{to,from}`. Zero matrices remove the transition.
    pub fn set_transition(&mut self, to: &str, from: &str, l: CMatrix) -> Result<()> {
        let i = self.index_of(to)?;
        let j = self.index_of(from)?;
        self.set_transition_at(i, j, l)
    }

    pub fn set_transition_at(&mut self, i: usize, j: usize, l: CMatrix) -> Result<()> {
        if l.shape() != (self.dims[i], self.dims[j]) {
            return Err(OqwError::Structural(format!(
                "transition ({}, {}) has shape {:?}, expected ({}, {})",
                self.sites[i],
                self.sites[j],
                l.shape(),
                self.dims[i],
                self.dims[j]
            )));
        }
        if !linalg::is_finite(&l) {
            return Err(OqwError::Input(format!(
                "transition ({}, {}) has non-finite entries",
                self.sites[i], self.sites[j]
            )));
        }
        if linalg::max_abs(&l) == 0.0 {
            self.transitions.remove(&(i, j));
        } else {
            self.transitions.insert((i, j), l);
        }
        Ok(())
    }

    pub fn set_leaky(&mut self, id: &str) -> Result<()> {
        let i = self.index_of(id)?;
        self.leaky.insert(i);
        Ok(())
    }

    pub fn set_leaky_at(&mut self, i: usize) {
        self.leaky.insert(i);
    }

    pub fn is_leaky(&self, i: usize) -> bool {
        self.leaky.contains(&i)
    }

    pub fn leaky_sites(&self) -> impl Iterator<Item = usize> + '_ {
        self.leaky.iter().copied()
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn site_id(&self, i: usize) -> &str {
        &self.sites[i]
    }

    pub fn site_ids(&self) -> &[String] {
        &self.sites
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| OqwError::Input(format!("unknown site id {id}")))
    }

    pub fn indices_of<S: AsRef<str>>(&self, ids: &[S]) -> Result<BTreeSet<usize>> {
        ids.iter().map(|s| self.index_of(s.as_ref())).collect()
    }

    pub fn transition(&self, i: usize, j: usize) -> Option<&CMatrix> {
        self.transitions.get(&(i, j))
    }

    /// All stored transitions as `((to, from), L)`, sorted by key.
    pub fn transitions(&self) -> impl Iterator<Item = (&(usize, usize), &CMatrix)> {
        self.transitions.iter()
    }

    /// `L_{i,j}` counts as present when its largest entry exceeds the tolerance.
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.transitions
            .get(&(i, j))
            .is_some_and(|l| linalg::max_abs(l) > self.tolerance)
    }

    /// Targets reachable from `j` in one step, in increasing index order.
    pub fn successors(&self, j: usize) -> Vec<usize> {
        (0..self.n_sites()).filter(|&i| self.has_edge(i, j)).collect()
    }

    pub fn predecessors(&self, i: usize) -> Vec<usize> {
        (0..self.n_sites()).filter(|&j| self.has_edge(i, j)).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn all_sites(&self) -> BTreeSet<usize> {
        (0..self.n_sites()).collect()
    }
}

/// Block-diagonal state `Σ_i τ(i) ⊗ |i⟩⟨i|`; may be sub-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalState {
    pub blocks: Vec<CMatrix>,
}

impl DiagonalState {
    pub fn zeros(walk: &WalkSpec) -> Self {
        DiagonalState {
            blocks: walk.dims().iter().map(|&d| linalg::zeros(d, d)).collect(),
        }
    }

    /// `ρ ⊗ |i⟩⟨i|`.
    pub fn concentrated(walk: &WalkSpec, i: usize, rho: CMatrix) -> Self {
        let mut s = Self::zeros(walk);
        s.blocks[i] = rho;
        s
    }

    pub fn trace(&self) -> f64 {
        self.blocks.iter().map(|b| b.trace().re).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        DiagonalState {
            blocks: self.blocks.iter().map(|b| b * c(factor)).collect(),
        }
    }

    /// Smallest eigenvalue over all blocks.
    pub fn min_eigenvalue(&self) -> f64 {
        self.blocks
            .iter()
            .map(linalg::min_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }

    /// Checks Hermiticity and positivity, and unit trace when `normalized`.
    pub fn check(&self, walk: &WalkSpec, normalized: bool) -> Result<()> {
        check_block_shapes(walk, &self.blocks)?;
        let tol = walk.tolerance.max(1e-9);
        for (i, b) in self.blocks.iter().enumerate() {
            if linalg::hermiticity_defect(b) > tol {
                return Err(OqwError::Input(format!(
                    "state block at {} is not Hermitian",
                    walk.site_id(i)
                )));
            }
            if linalg::min_eigenvalue(b) < -tol {
                return Err(OqwError::Input(format!(
                    "state block at {} is not positive semidefinite",
                    walk.site_id(i)
                )));
            }
        }
        if normalized && (self.trace() - 1.0).abs() > tol {
            return Err(OqwError::Input(format!(
                "state has trace {} instead of 1",
                self.trace()
            )));
        }
        Ok(())
    }

    /// Total trace norm of the block differences.
    pub fn distance(&self, other: &DiagonalState) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| linalg::trace_norm(&(a - b)))
            .sum()
    }
}

/// Block-diagonal observable `Σ_i A_i ⊗ |i⟩⟨i|`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalObservable {
    pub blocks: Vec<CMatrix>,
}

impl DiagonalObservable {
    pub fn zeros(walk: &WalkSpec) -> Self {
        DiagonalObservable {
            blocks: walk.dims().iter().map(|&d| linalg::zeros(d, d)).collect(),
        }
    }

    pub fn identity(walk: &WalkSpec) -> Self {
        DiagonalObservable {
            blocks: walk.dims().iter().map(|&d| linalg::identity(d)).collect(),
        }
    }

    /// Identity on the given sites, zero elsewhere.
    pub fn identity_on(walk: &WalkSpec, sites: &BTreeSet<usize>) -> Self {
        let mut o = Self::zeros(walk);
        for &i in sites {
            o.blocks[i] = linalg::identity(walk.dim(i));
        }
        o
    }

    pub fn concentrated(walk: &WalkSpec, i: usize, a: CMatrix) -> Self {
        let mut o = Self::zeros(walk);
        o.blocks[i] = a;
        o
    }

    pub fn max_block_norm(&self) -> f64 {
        self.blocks.iter().map(linalg::operator_norm).fold(0.0, f64::max)
    }

    pub fn check(&self, walk: &WalkSpec) -> Result<()> {
        check_block_shapes(walk, &self.blocks)?;
        for (i, b) in self.blocks.iter().enumerate() {
            if linalg::hermiticity_defect(b) > walk.tolerance.max(1e-9) {
                return Err(OqwError::Input(format!(
                    "observable block at {} is not Hermitian",
                    walk.site_id(i)
                )));
            }
        }
        Ok(())
    }

    pub fn sub(&self, other: &DiagonalObservable) -> Self {
        DiagonalObservable {
            blocks: self.blocks.iter().zip(&other.blocks).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &DiagonalObservable) -> Self {
        DiagonalObservable {
            blocks: self.blocks.iter().zip(&other.blocks).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scaled(&self, factor: C64) -> Self {
        DiagonalObservable {
            blocks: self.blocks.iter().map(|b| b * factor).collect(),
        }
    }

    /// `Σ_i Tr A_i`.
    pub fn trace(&self) -> C64 {
        self.blocks.iter().map(|b| b.trace()).sum()
    }
}

fn check_block_shapes(walk: &WalkSpec, blocks: &[CMatrix]) -> Result<()> {
    if blocks.len() != walk.n_sites() {
        return Err(OqwError::Structural(format!(
            "{} blocks for {} sites",
            blocks.len(),
            walk.n_sites()
        )));
    }
    for (i, b) in blocks.iter().enumerate() {
        let d = walk.dim(i);
        if b.shape() != (d, d) {
            return Err(OqwError::Structural(format!(
                "block at {} has shape {:?}, expected ({d}, {d})",
                walk.site_id(i),
                b.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ValidationReport {
    /// `(site id, ‖Σ_i L_{i,j}^† L_{i,j} − Id‖)` per source site. For leaky
    /// sites only the excess above `Id` counts.
    pub residuals: Vec<(String, f64)>,
    pub max_residual: f64,
    pub tolerance: f64,
    pub accepted: bool,
}

pub fn validate_walk(walk: &WalkSpec) -> Result<ValidationReport> {
    let n = walk.n_sites();
    let mut sums: Vec<CMatrix> = (0..n).map(|j| linalg::zeros(walk.dim(j), walk.dim(j))).collect();
    for (&(i, j), l) in walk.transitions() {
        if l.shape() != (walk.dim(i), walk.dim(j)) {
            return Err(OqwError::Structural(format!(
                "transition ({}, {}) has shape {:?}",
                walk.site_id(i),
                walk.site_id(j),
                l.shape()
            )));
        }
        sums[j] += l.adjoint() * l;
    }
    let residuals: Vec<(String, f64)> = sums
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let defect = s - linalg::identity(walk.dim(j));
            let r = if walk.is_leaky(j) {
                linalg::max_eigenvalue(&defect).max(0.0)
            } else {
                linalg::hermitian_norm(&defect)
            };
            (walk.site_id(j).to_string(), r)
        })
        .collect();
    let max_residual = residuals.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(ValidationReport {
        accepted: max_residual <= walk.tolerance,
        residuals,
        max_residual,
        tolerance: walk.tolerance,
    })
}

/// Errors unless the walk passes validation.
pub fn require_valid(walk: &WalkSpec) -> Result<()> {
    let report = validate_walk(walk)?;
    if report.accepted {
        Ok(())
    } else {
        Err(OqwError::Input(format!(
            "walk is not stochastic: max residual {:.3e}",
            report.max_residual
        )))
    }
}

/// `𝔐(τ)_i = Σ_j L_{i,j} τ(j) L_{i,j}^†`.
pub fn apply_step(walk: &WalkSpec, state: &DiagonalState) -> Result<DiagonalState> {
    check_block_shapes(walk, &state.blocks)?;
    let mut out = DiagonalState::zeros(walk);
    for (&(i, j), l) in walk.transitions() {
        out.blocks[i] += l * &state.blocks[j] * l.adjoint();
    }
    Ok(out)
}

/// `𝔐*(A)_j = Σ_i L_{i,j}^† A_i L_{i,j}`.
pub fn dual_apply(walk: &WalkSpec, obs: &DiagonalObservable) -> Result<DiagonalObservable> {
    check_block_shapes(walk, &obs.blocks)?;
    let mut out = DiagonalObservable::zeros(walk);
    for (&(i, j), l) in walk.transitions() {
        out.blocks[j] += l.adjoint() * &obs.blocks[i] * l;
    }
    Ok(out)
}

/// Offsets of the vectorized blocks of `sites` in a stacked vector.
pub fn block_offsets(walk: &WalkSpec, sites: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(sites.len());
    let mut total = 0;
    for &s in sites {
        offsets.push(total);
        total += walk.dim(s) * walk.dim(s);
    }
    (offsets, total)
}

/// Matrix of the one-step map restricted to transitions `source → target`
/// with source in `sources` and target in `targets`. Acts on stacked
/// column-vectorized blocks, ordered as the (sorted) masks.
#[derive(Clone, Debug)]
pub struct Superoperator {
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    pub source_offsets: Vec<usize>,
    pub target_offsets: Vec<usize>,
    pub matrix: CMatrix,
}

impl Superoperator {
    pub fn source_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Stacks the source blocks of `state`.
    pub fn pack(&self, walk: &WalkSpec, state: &DiagonalState) -> CVector {
        pack_blocks(walk, &self.sources, &state.blocks)
    }

    pub fn apply(&self, walk: &WalkSpec, state: &DiagonalState) -> DiagonalState {
        let v = &self.matrix * self.pack(walk, state);
        let mut out = DiagonalState::zeros(walk);
        unpack_into(walk, &self.targets, &v, &mut out.blocks);
        out
    }

    /// Applies the dual map to an observable supported on the targets.
    pub fn apply_dual(&self, walk: &WalkSpec, obs: &DiagonalObservable) -> DiagonalObservable {
        let v = self.matrix.adjoint() * pack_blocks(walk, &self.targets, &obs.blocks);
        let mut out = DiagonalObservable::zeros(walk);
        unpack_into(walk, &self.sources, &v, &mut out.blocks);
        out
    }
}

pub fn pack_blocks(walk: &WalkSpec, sites: &[usize], blocks: &[CMatrix]) -> CVector {
    let (offsets, total) = block_offsets(walk, sites);
    let mut v = CVector::zeros(total);
    for (k, &s) in sites.iter().enumerate() {
        let d2 = walk.dim(s) * walk.dim(s);
        v.rows_mut(offsets[k], d2).copy_from_slice(blocks[s].as_slice());
    }
    v
}

pub fn unpack_into(walk: &WalkSpec, sites: &[usize], v: &CVector, blocks: &mut [CMatrix]) {
    let (offsets, _) = block_offsets(walk, sites);
    for (k, &s) in sites.iter().enumerate() {
        let d = walk.dim(s);
        blocks[s] = linalg::unvectorize(&v.as_slice()[offsets[k]..offsets[k] + d * d], d);
    }
}

pub fn assemble_superoperator(
    walk: &WalkSpec,
    source_mask: &BTreeSet<usize>,
    target_mask: &BTreeSet<usize>,
) -> Superoperator {
    let sources: Vec<usize> = source_mask.iter().copied().collect();
    let targets: Vec<usize> = target_mask.iter().copied().collect();
    let (source_offsets, ns) = block_offsets(walk, &sources);
    let (target_offsets, nt) = block_offsets(walk, &targets);
    let mut matrix = CMatrix::zeros(nt, ns);
    for (ti, &i) in targets.iter().enumerate() {
        for (sj, &j) in sources.iter().enumerate() {
            if let Some(l) = walk.transition(i, j) {
                let block = linalg::sandwich(l);
                matrix
                    .view_mut((target_offsets[ti], source_offsets[sj]), block.shape())
                    .copy_from(&block);
            }
        }
    }
    Superoperator {
        sources,
        targets,
        source_offsets,
        target_offsets,
        matrix,
    }
}

pub fn full_superoperator(walk: &WalkSpec) -> Superoperator {
    let all = walk.all_sites();
    assemble_superoperator(walk, &all, &all)
}

/// Hermitian basis of `{X : 𝔐(X) = X}` together with its complex dimension.
pub fn fixed_points(walk: &WalkSpec) -> (Vec<DiagonalState>, usize) {
    let m = full_superoperator(walk);
    let n = m.matrix.nrows();
    let shifted = &m.matrix - linalg::identity(n);
    let scale = linalg::max_abs(&m.matrix).max(1.0);
    let ns = linalg::null_space(&shifted, 1e-9 * scale);
    let mut hermitian = Vec::new();
    for k in 0..ns.ncols() {
        let mut blocks = vec![CMatrix::zeros(0, 0); walk.n_sites()];
        unpack_into(walk, &m.sources, &ns.column(k).into_owned(), &mut blocks);
        let re: Vec<CMatrix> = blocks.iter().map(linalg::hermitian_part).collect();
        let im: Vec<CMatrix> = blocks
            .iter()
            .map(|b| (b - b.adjoint()) * C64::new(0.0, -0.5))
            .collect();
        for part in [re, im] {
            if part.iter().map(linalg::max_abs).fold(0.0, f64::max) > 1e-10 {
                hermitian.push(DiagonalState { blocks: part });
            }
        }
    }
    (hermitian, ns.ncols())
}

/// Positive part of a Hermitian block family, normalized; tries the negation
/// when the positive part is negligible.
pub fn positive_normalized(h: &DiagonalState) -> Option<DiagonalState> {
    for sign in [1.0, -1.0] {
        let p = DiagonalState {
            blocks: h.blocks.iter().map(|b| linalg::positive_part(&(b * c(sign)))).collect(),
        };
        let t = p.trace();
        if t >= 1e-8 {
            return Some(p.scaled(1.0 / t));
        }
    }
    None
}

#[derive(Clone, Debug)]
pub struct InvariantState {
    pub state: Option<DiagonalState>,
    /// Complex dimension of the eigenvalue-1 eigenspace of `𝔐`.
    pub fixed_space_dim: usize,
    /// `‖𝔐(τ) − τ‖₁` for the returned state.
    pub residual: f64,
}

/// Normalized fixed point of `𝔐` with maximal support: the average of the
/// normalized positive and negative parts of a Hermitian basis of the fixed
/// space.
pub fn invariant_state(walk: &WalkSpec) -> Result<InvariantState> {
    let (basis, dim) = fixed_points(walk);
    let mut parts = Vec::new();
    for h in &basis {
        if let Some(p) = positive_normalized(h) {
            parts.push(p);
        }
        let neg = h.scaled(-1.0);
        if let Some(p) = positive_normalized(&neg) {
            parts.push(p);
        }
    }
    if parts.is_empty() {
        return Ok(InvariantState {
            state: None,
            fixed_space_dim: dim,
            residual: 0.0,
        });
    }
    let mut avg = DiagonalState::zeros(walk);
    for p in &parts {
        for (a, b) in avg.blocks.iter_mut().zip(&p.blocks) {
            *a += b;
        }
    }
    let avg = avg.scaled(1.0 / avg.trace());
    let residual = apply_step(walk, &avg)?.distance(&avg);
    if residual > 1e-6 {
        return Err(OqwError::Numerical {
            message: "fixed-point extraction did not produce an invariant state".into(),
            residual: Some(residual),
            spectral_radius: None,
        });
    }
    Ok(InvariantState {
        state: Some(avg),
        fixed_space_dim: dim,
        residual,
    })
}

#[derive(Clone, Debug)]
pub struct DetailedBalanceReport {
    pub sufficient_condition_holds: bool,
    /// `max_{i,j} ‖τ(i)^{1/2} L_{j,i}^† − L_{i,j} τ(j)^{1/2}‖`.
    pub sufficient_residual: f64,
    pub selfadjoint_within_tol: bool,
    /// Largest entry of `G m − m^† G` where `m` represents `𝔐*` and `G` the
    /// Gram matrix of the weighted inner product.
    pub selfadjoint_residual: f64,
}

pub fn is_faithful(walk: &WalkSpec, tau: &DiagonalState) -> bool {
    tau.blocks.len() == walk.n_sites()
        && tau
            .blocks
            .iter()
            .all(|b| linalg::min_eigenvalue(b) > walk.tolerance.max(1e-12))
}

pub fn require_faithful(walk: &WalkSpec, tau: &DiagonalState) -> Result<()> {
    check_block_shapes(walk, &tau.blocks)?;
    if is_faithful(walk, tau) {
        Ok(())
    } else {
        Err(OqwError::Precondition(
            "reference state is not faithful (some block is singular)".into(),
        ))
    }
}

/// Block-diagonal Gram matrix `conj(s_i) ⊗ s_i`, `s_i = τ(i)^{1/2}`, so that
/// `⟨X, Y⟩⋄ = vec(X)^† G vec(Y)`.
pub fn diamond_gram(walk: &WalkSpec, tau: &DiagonalState) -> CMatrix {
    let sites: Vec<usize> = (0..walk.n_sites()).collect();
    let (offsets, total) = block_offsets(walk, &sites);
    let mut g = CMatrix::zeros(total, total);
    for (k, &i) in sites.iter().enumerate() {
        let s = linalg::psd_sqrt(&tau.blocks[i]);
        let block = linalg::sandwich(&s);
        g.view_mut((offsets[k], offsets[k]), block.shape()).copy_from(&block);
    }
    g
}

pub fn check_detailed_balance(walk: &WalkSpec, tau: &DiagonalState) -> Result<DetailedBalanceReport> {
    require_faithful(walk, tau)?;
    let roots: Vec<CMatrix> = tau.blocks.iter().map(linalg::psd_sqrt).collect();
    let mut sufficient_residual: f64 = 0.0;
    for i in 0..walk.n_sites() {
        for j in 0..walk.n_sites() {
            let zero_ij = linalg::zeros(walk.dim(i), walk.dim(j));
            let zero_ji = linalg::zeros(walk.dim(j), walk.dim(i));
            let l_ij = walk.transition(i, j).unwrap_or(&zero_ij);
            let l_ji = walk.transition(j, i).unwrap_or(&zero_ji);
            let lhs = &roots[i] * l_ji.adjoint();
            let rhs = l_ij * &roots[j];
            sufficient_residual = sufficient_residual.max(linalg::max_abs(&(lhs - rhs)));
        }
    }
    let m = full_superoperator(walk).matrix.adjoint();
    let g = diamond_gram(walk, tau);
    let selfadjoint_residual = linalg::max_abs(&(&g * &m - m.adjoint() * &g));
    let tol = walk.tolerance.max(1e-9);
    Ok(DetailedBalanceReport {
        sufficient_condition_holds: sufficient_residual <= tol,
        sufficient_residual,
        selfadjoint_within_tol: selfadjoint_residual <= tol,
        selfadjoint_residual,
    })
}

/// Minimal dilation `L_{i,j} = √t_{i,j}` of a column-stochastic matrix given
/// as rows (`t[i][j]` is the probability of `j → i`).
pub fn minimal_dilation<S: AsRef<str>>(t: &[Vec<f64>], labels: &[S]) -> Result<WalkSpec> {
    let n = t.len();
    if labels.len() != n || t.iter().any(|row| row.len() != n) {
        return Err(OqwError::Input("transition matrix must be square and match the labels".into()));
    }
    for j in 0..n {
        let mut sum = 0.0;
        for (i, row) in t.iter().enumerate() {
            let x = row[j];
            if !x.is_finite() || x < 0.0 {
                return Err(OqwError::Input(format!("entry ({i}, {j}) is negative or not finite")));
            }
            sum += x;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(OqwError::Input(format!("column {j} sums to {sum}, not 1")));
        }
    }
    let mut walk = WalkSpec::new(labels.iter().map(|l| (l.as_ref().to_string(), 1)))?;
    for (i, row) in t.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            if x > 0.0 {
                walk.set_transition_at(i, j, CMatrix::from_element(1, 1, c(x.sqrt())))?;
            }
        }
    }
    Ok(walk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::linalg::{diag, max_abs, real_matrix};

    #[test]
    fn identity_walk_validates() {
        let mut w = WalkSpec::new([("0", 1)]).unwrap();
        w.set_transition("0", "0", linalg::identity(1)).unwrap();
        let r = validate_walk(&w).unwrap();
        assert!(r.accepted);
        assert_eq!(r.max_residual, 0.0);
    }

    #[test]
    fn scaled_transition_is_rejected_with_residual() {
        let mut w = fixtures::example_5_1();
        let l = w.transition(1, 0).unwrap() * c(1.1);
        w.set_transition_at(1, 0, l).unwrap();
        let r = validate_walk(&w).unwrap();
        assert!(!r.accepted);
        assert!((r.residuals[0].1 - 0.21).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_names_pair() {
        let mut w = WalkSpec::new([("a", 2), ("b", 1)]).unwrap();
        let err = w.set_transition("a", "b", linalg::identity(2)).unwrap_err();
        assert!(matches!(err, OqwError::Structural(ref m) if m.contains("(a, b)")));
    }

    #[test]
    fn example_5_1_step_moves_e1_to_site_1() {
        let w = fixtures::example_5_1();
        let s = DiagonalState::concentrated(&w, 0, diag(&[1.0, 0.0]));
        let out = apply_step(&w, &s).unwrap();
        assert!(max_abs(&(&out.blocks[1] - diag(&[1.0, 0.0]))) < 1e-15);
        assert!(max_abs(&out.blocks[0]) == 0.0 && max_abs(&out.blocks[2]) == 0.0);
    }

    #[test]
    fn dilation_step_is_matrix_vector_product() {
        let w = minimal_dilation(&[vec![0.3, 0.6], vec![0.7, 0.4]], &["0", "1"]).unwrap();
        let s = DiagonalState::concentrated(&w, 0, linalg::identity(1));
        let out = apply_step(&w, &s).unwrap();
        assert!((out.blocks[0][(0, 0)].re - 0.3).abs() < 1e-15);
        assert!((out.blocks[1][(0, 0)].re - 0.7).abs() < 1e-15);
    }

    #[test]
    fn superoperator_matches_direct_step() {
        let w = fixtures::example_5_4();
        let rho = real_matrix(2, 2, &[0.6, 0.2, 0.2, 0.4]);
        let s = DiagonalState::concentrated(&w, 1, rho);
        let m = full_superoperator(&w);
        let a = m.apply(&w, &s);
        let b = apply_step(&w, &s).unwrap();
        assert!(a.distance(&b) < 1e-12);
    }

    #[test]
    fn dual_of_identity_is_identity() {
        for w in [fixtures::example_5_1(), fixtures::example_5_4()] {
            let id = DiagonalObservable::identity(&w);
            let out = dual_apply(&w, &id).unwrap();
            for (a, b) in out.blocks.iter().zip(&id.blocks) {
                assert!(max_abs(&(a - b)) < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_two_cycle_has_uniform_invariant_state() {
        let w = minimal_dilation(&[vec![0.0, 1.0], vec![1.0, 0.0]], &["a", "b"]).unwrap();
        let inv = invariant_state(&w).unwrap();
        let s = inv.state.unwrap();
        assert!((s.blocks[0][(0, 0)].re - 0.5).abs() < 1e-10);
        assert_eq!(inv.fixed_space_dim, 1);
    }

    #[test]
    fn unitary_single_site_gives_maximally_mixed() {
        let mut w = WalkSpec::new([("0", 2)]).unwrap();
        let u = CMatrix::from_fn(2, 2, |r, k| match (r, k) {
            (0, 0) => C64::new(0.0, 1.0),
            (1, 1) => C64::new(-1.0, 0.0),
            _ => C64::new(0.0, 0.0),
        });
        w.set_transition("0", "0", u).unwrap();
        let s = invariant_state(&w).unwrap().state.unwrap();
        assert!(max_abs(&(&s.blocks[0] - diag(&[0.5, 0.5]))) < 1e-10);
    }

    #[test]
    fn example_5_1_invariant_state_matches_iteration() {
        let w = fixtures::example_5_1();
        let inv = invariant_state(&w).unwrap();
        assert_eq!(inv.fixed_space_dim, 5);
        let s = inv.state.unwrap();
        assert!(inv.residual < 1e-8);
        // No mass on the e2 direction at sites 0 and 1.
        assert!(s.blocks[0][(1, 1)].norm() < 1e-12 && s.blocks[1][(1, 1)].norm() < 1e-12);
        // Brute-force Cesàro average from the maximally mixed state.
        let mut cur = DiagonalState {
            blocks: (0..3).map(|_| diag(&[1.0 / 6.0, 1.0 / 6.0])).collect(),
        };
        // Two burn-in steps flush the e2 mass at sites 0 and 1 into site 2.
        for _ in 0..2 {
            cur = apply_step(&w, &cur).unwrap();
        }
        let mut avg = DiagonalState::zeros(&w);
        for _ in 0..200 {
            cur = apply_step(&w, &cur).unwrap();
            for (a, b) in avg.blocks.iter_mut().zip(&cur.blocks) {
                *a += b / c(200.0);
            }
        }
        let fixed = apply_step(&w, &avg).unwrap();
        assert!(fixed.distance(&avg) < 1e-2);
        assert!(avg.blocks[0][(1, 1)].norm() < 1e-12);
    }

    #[test]
    fn detailed_balance_for_birth_death_chain() {
        let t = vec![
            vec![0.5, 0.25, 0.0],
            vec![0.5, 0.5, 0.5],
            vec![0.0, 0.25, 0.5],
        ];
        let w = minimal_dilation(&t, &["0", "1", "2"]).unwrap();
        let tau = invariant_state(&w).unwrap().state.unwrap();
        let r = check_detailed_balance(&w, &tau).unwrap();
        assert!(r.sufficient_condition_holds && r.selfadjoint_within_tol);
    }

    #[test]
    fn asymmetric_cycle_violates_detailed_balance() {
        let w = fixtures::asymmetric_three_cycle();
        let tau = invariant_state(&w).unwrap().state.unwrap();
        let r = check_detailed_balance(&w, &tau).unwrap();
        assert!(!r.sufficient_condition_holds);
        assert!(r.selfadjoint_residual > 0.1, "{}", r.selfadjoint_residual);
    }

    #[test]
    fn doubly_stochastic_ring_balances_with_uniform_state() {
        let w = fixtures::quantum_ring(4, 2, 7);
        let d = w.total_dim() as f64;
        let tau = DiagonalState {
            blocks: w.dims().iter().map(|&k| linalg::identity(k) / c(d)).collect(),
        };
        let r = check_detailed_balance(&w, &tau).unwrap();
        assert!(r.sufficient_condition_holds && r.selfadjoint_within_tol);
    }

    #[test]
    fn non_faithful_reference_is_refused() {
        let w = fixtures::example_5_1();
        let tau = invariant_state(&w).unwrap().state.unwrap();
        assert!(matches!(
            check_detailed_balance(&w, &tau),
            Err(OqwError::Precondition(_))
        ));
    }

    #[test]
    fn dilation_rejects_bad_columns() {
        assert!(minimal_dilation(&[vec![0.5, 0.5], vec![0.4, 0.5]], &["a", "b"]).is_err());
        assert!(minimal_dilation(&[vec![1.5, 0.5], vec![-0.5, 0.5]], &["a", "b"]).is_err());
    }
}
