//! Dirichlet problems on the whole vertex set and on finite domains, quantum
//! harmonic measure operators, the ⋄-inner product and Dirichlet forms.

use std::collections::BTreeSet;

use nalgebra::Cholesky;
use serde_json::{json, Value};

use crate::error::{OqwError, Result};
use crate::hitting;
use crate::io;
use crate::linalg::{self, c, CMatrix, CVector, C64};
use crate::model::{self, block_offsets, DiagonalObservable, DiagonalState, WalkSpec};
use crate::structure;

/// Residual threshold above which a computed solution is rejected.
const RESIDUAL_REJECT: f64 = 1e-6;
/// Above this many unknowns the variational system is solved by conjugate
/// gradients instead of a dense Cholesky factorization.
pub const DENSE_LIMIT: usize = 4096;
const COERCIVITY_TOL: f64 = 1e-10;

/// Inner data `A` on `D` and boundary data `B` on `∂D`.
#[derive(Clone, Debug)]
pub struct DirichletProblem {
    pub domain: BTreeSet<usize>,
    pub a: DiagonalObservable,
    pub b: DiagonalObservable,
}

impl DirichletProblem {
    pub fn new(walk: &WalkSpec, domain: BTreeSet<usize>, a: DiagonalObservable, b: DiagonalObservable) -> Result<Self> {
        if domain.is_empty() {
            return Err(OqwError::Input("domain is empty".into()));
        }
        if domain.iter().any(|&k| k >= walk.n_sites()) {
            return Err(OqwError::Input("domain contains an unknown site".into()));
        }
        a.check(walk)?;
        b.check(walk)?;
        let bd = hitting::boundary(walk, &domain);
        if bd.is_empty() {
            return Err(OqwError::Input("domain has empty boundary".into()));
        }
        for i in 0..walk.n_sites() {
            if !domain.contains(&i) && linalg::max_abs(&a.blocks[i]) > 0.0 {
                return Err(OqwError::Input(format!("inner data is nonzero at {} outside the domain", walk.site_id(i))));
            }
            if !bd.contains(&i) && linalg::max_abs(&b.blocks[i]) > 0.0 {
                return Err(OqwError::Input(format!("boundary data is nonzero at {} outside ∂D", walk.site_id(i))));
            }
        }
        Ok(DirichletProblem { domain, a, b })
    }

    /// Reads `{"domain": [ids], "A": {id: matrix}, "B": {id: matrix}}`;
    /// missing data blocks are zero.
    pub fn from_value(walk: &WalkSpec, value: &Value) -> Result<Self> {
        let ids: Vec<String> = value
            .get("domain")
            .and_then(Value::as_array)
            .ok_or_else(|| OqwError::Input("problem needs a \"domain\" array".into()))?
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                _ => Err(OqwError::Input("domain entries must be site ids".into())),
            })
            .collect::<Result<_>>()?;
        let domain = walk.indices_of(&ids)?;
        let a = io::observable_from_value(walk, value.get("A").unwrap_or(&Value::Null))?;
        let b = io::observable_from_value(walk, value.get("B").unwrap_or(&Value::Null))?;
        Self::new(walk, domain, a, b)
    }

    pub fn boundary(&self, walk: &WalkSpec) -> BTreeSet<usize> {
        hitting::boundary(walk, &self.domain)
    }
}

#[derive(Clone, Debug)]
pub struct DirichletSolution {
    /// Supported on `D ∪ ∂D`.
    pub z: DiagonalObservable,
    /// `(site, ‖(Id − 𝔐*)(Z)_i − A_i‖)` for `i ∈ D`.
    pub residuals: Vec<(usize, f64)>,
    pub max_residual: f64,
    /// Smallest eigenvalue of `Σ_{j∈∂D} 𝔓^{D*}_{j,i}(Id)` over `i ∈ D`.
    pub min_exit_probability: f64,
    pub notes: Vec<String>,
}

impl DirichletSolution {
    pub fn to_value(&self, walk: &WalkSpec) -> Value {
        let residuals: serde_json::Map<String, Value> =
            self.residuals.iter().map(|&(i, r)| (walk.site_id(i).to_string(), json!(r))).collect();
        json!({
            "solution": io::observable_to_value(walk, &self.z),
            "residuals": residuals,
            "max_residual": self.max_residual,
            "min_exit_probability": self.min_exit_probability,
            "notes": self.notes,
        })
    }
}

/// `(Id − 𝔐*)(Z)`.
pub fn generator_dual(walk: &WalkSpec, z: &DiagonalObservable) -> Result<DiagonalObservable> {
    Ok(z.sub(&model::dual_apply(walk, z)?))
}

fn domain_residuals(walk: &WalkSpec, domain: &BTreeSet<usize>, z: &DiagonalObservable, a: &DiagonalObservable) -> Result<Vec<(usize, f64)>> {
    let g = generator_dual(walk, z)?;
    Ok(domain.iter().map(|&i| (i, linalg::operator_norm(&(&g.blocks[i] - &a.blocks[i])))).collect())
}

fn reject_if_large(max_residual: f64, scale: f64, what: &str) -> Result<()> {
    if max_residual > RESIDUAL_REJECT * scale.max(1.0) {
        return Err(OqwError::Numerical {
            message: format!("{what}: residual {max_residual:.3e} is too large"),
            residual: Some(max_residual),
            spectral_radius: None,
        });
    }
    Ok(())
}

/// Closed-form solution `Z = A + B + Σ_{i∈D}(Σ_{j∈D} 𝔑^{D*}_{j,i}(A_j) +
/// Σ_{j∈∂D} 𝔓^{D*}_{j,i}(B_j))`, set to zero outside `D ∪ ∂D`.
///
/// Only convergence of the domain visit operators is required, which covers
/// reducible walks whose exit from `D` is certain (e.g. absorbing chains).
pub fn solve_dirichlet_domain(walk: &WalkSpec, problem: &DirichletProblem) -> Result<DirichletSolution> {
    model::require_valid(walk)?;
    let domain = &problem.domain;
    let bd = problem.boundary(walk);
    let mut z = DiagonalObservable::zeros(walk);
    for &j in &bd {
        z.blocks[j] = problem.b.blocks[j].clone();
    }
    let mut min_exit = f64::INFINITY;
    for &i in domain {
        let mut zi = problem.a.blocks[i].clone();
        let mut exit = linalg::zeros(walk.dim(i), walk.dim(i));
        for &j in &bd {
            let p = hitting::domain_passage_operator(walk, domain, i, j)?;
            exit += p.dual_identity();
            if linalg::max_abs(&problem.b.blocks[j]) > 0.0 {
                zi += p.apply_dual(&problem.b.blocks[j]);
            }
        }
        for &j in domain {
            if linalg::max_abs(&problem.a.blocks[j]) > 0.0 {
                zi += hitting::domain_visit_operator(walk, domain, i, j)?.apply_dual(&problem.a.blocks[j]);
            }
        }
        min_exit = min_exit.min(linalg::min_eigenvalue(&exit));
        z.blocks[i] = zi;
    }
    let residuals = domain_residuals(walk, domain, &z, &problem.a)?;
    let max_residual = residuals.iter().map(|r| r.1).fold(0.0, f64::max);
    let scale = problem.a.max_block_norm().max(problem.b.max_block_norm());
    reject_if_large(max_residual, scale, "closed-form Dirichlet solution")?;
    let mut notes = Vec::new();
    let covered = domain.len() + bd.len();
    if covered < walk.n_sites() {
        notes.push(format!(
            "unique on D ∪ ∂D; values on the other {} sites are free and set to zero",
            walk.n_sites() - covered
        ));
    } else {
        notes.push("unique".into());
    }
    if min_exit < 1.0 - 1e-8 {
        notes.push(format!("exit from D is not certain from every state (min probability {min_exit:.6})"));
    }
    Ok(DirichletSolution { z, residuals, max_residual, min_exit_probability: min_exit.min(1.0), notes })
}

#[derive(Clone, Debug)]
pub struct GlobalSolution {
    pub z: DiagonalObservable,
    pub max_residual: f64,
    /// `max_i Σ_j ‖𝔑*_{j,i}(A_j)‖`; finite graphs are always summable, the
    /// value is reported so large truncations can be inspected.
    pub summability_bound: f64,
    /// `λ` subtracted as `λ Id` to make `Z` traceless, when `Id` is harmonic.
    pub gauge_shift: Option<f64>,
    pub notes: Vec<String>,
}

impl GlobalSolution {
    pub fn to_value(&self, walk: &WalkSpec) -> Value {
        json!({
            "solution": io::observable_to_value(walk, &self.z),
            "max_residual": self.max_residual,
            "summability_bound": self.summability_bound,
            "gauge_shift": self.gauge_shift,
            "notes": self.notes,
        })
    }
}

/// `Z = A + Σ_i (Σ_j 𝔑*_{j,i}(A_j)) ⊗ |i⟩⟨i|`, a solution of `(Id − 𝔐*)(Z) = A`
/// when every expected number of visits is finite.
pub fn solve_dirichlet_global(walk: &WalkSpec, a: &DiagonalObservable) -> Result<GlobalSolution> {
    model::require_valid(walk)?;
    a.check(walk)?;
    let n = walk.n_sites();
    for j in 0..n {
        let r = hitting::passage_operator(walk, j, j)?.spectral_radius();
        if r >= 1.0 - hitting::DIVERGENCE_GAP {
            return Err(OqwError::Precondition(format!(
                "global Dirichlet problem is unsupported: expected visits to {} are infinite (return map radius {r:.6})",
                walk.site_id(j)
            )));
        }
    }
    let mut z = a.clone();
    let mut summability_bound: f64 = 0.0;
    for i in 0..n {
        let mut bound = 0.0;
        for j in 0..n {
            if linalg::max_abs(&a.blocks[j]) == 0.0 {
                continue;
            }
            let term = hitting::visit_operator(walk, i, j)?.apply_dual(&a.blocks[j]);
            bound += linalg::operator_norm(&term);
            z.blocks[i] += term;
        }
        summability_bound = summability_bound.max(bound);
    }
    let mut notes = Vec::new();
    let id = DiagonalObservable::identity(walk);
    let id_harmonic = generator_dual(walk, &id)?.max_block_norm() <= walk.tolerance.max(1e-9);
    let gauge_shift = if id_harmonic {
        let lambda = z.trace().re / walk.total_dim() as f64;
        z = z.sub(&id.scaled(c(lambda)));
        notes.push("solutions differ by multiples of Id; the traceless one is returned".into());
        Some(lambda)
    } else {
        notes.push("Id is not harmonic, so the solution is unique".into());
        None
    };
    let all: BTreeSet<usize> = walk.all_sites();
    let max_residual = domain_residuals(walk, &all, &z, a)?.iter().map(|r| r.1).fold(0.0, f64::max);
    reject_if_large(max_residual, a.max_block_norm(), "global Dirichlet solution")?;
    Ok(GlobalSolution { z, max_residual, summability_bound, gauge_shift, notes })
}

/// `I^D_j = Σ_{i∈D} 𝔓^{D*}_{j,i}(Id) ⊗ |i⟩⟨i| + Id ⊗ |j⟩⟨j|` for `j ∈ ∂D`.
pub fn harmonic_operator(walk: &WalkSpec, domain: &BTreeSet<usize>, j: usize) -> Result<DiagonalObservable> {
    let bd = hitting::boundary(walk, domain);
    if !bd.contains(&j) {
        return Err(OqwError::Input(format!("{} is not on the boundary of the domain", walk.site_id(j))));
    }
    let mut out = DiagonalObservable::zeros(walk);
    out.blocks[j] = linalg::identity(walk.dim(j));
    for &i in domain {
        out.blocks[i] = hitting::domain_passage_operator(walk, domain, i, j)?.dual_identity();
    }
    Ok(out)
}

fn require_faithful_blocks(tau: &DiagonalState) -> Result<()> {
    let scale = tau.blocks.iter().map(linalg::max_eigenvalue).fold(0.0, f64::max);
    if scale <= 0.0 || tau.blocks.iter().any(|b| linalg::min_eigenvalue(b) <= 1e-12 * scale) {
        return Err(OqwError::Precondition("reference state τ⋄ is not faithful".into()));
    }
    Ok(())
}

/// `⟨X, Y⟩⋄ = Σ_i Tr(s_i X_i^† s_i Y_i)`, `s_i = τ⋄(i)^{1/2}`.
pub fn diamond_inner(tau: &DiagonalState, x: &DiagonalObservable, y: &DiagonalObservable) -> Result<C64> {
    require_faithful_blocks(tau)?;
    if x.blocks.len() != tau.blocks.len() || y.blocks.len() != tau.blocks.len() {
        return Err(OqwError::Structural("observable and state have different site counts".into()));
    }
    let mut acc = C64::new(0.0, 0.0);
    for ((t, xi), yi) in tau.blocks.iter().zip(&x.blocks).zip(&y.blocks) {
        if xi.shape() != t.shape() || yi.shape() != t.shape() {
            return Err(OqwError::Structural("block shapes differ".into()));
        }
        let s = linalg::psd_sqrt(t);
        acc += (&s * xi.adjoint() * &s * yi).trace();
    }
    Ok(acc)
}

/// `ℰ(X, Y) = ⟨X, (Id − 𝔐*)(Y)⟩⋄`.
pub fn dirichlet_form(walk: &WalkSpec, tau: &DiagonalState, x: &DiagonalObservable, y: &DiagonalObservable) -> Result<C64> {
    diamond_inner(tau, x, &generator_dual(walk, y)?)
}

/// `ℰ(X)`; real under detailed balance (the imaginary part is dropped).
pub fn dirichlet_energy(walk: &WalkSpec, tau: &DiagonalState, x: &DiagonalObservable) -> Result<f64> {
    Ok(dirichlet_form(walk, tau, x, x)?.re)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearMethod {
    Cholesky,
    ConjugateGradient,
}

#[derive(Clone, Debug)]
pub struct VariationalSolution {
    /// Minimizer, supported on `D`.
    pub x0: DiagonalObservable,
    /// `B + X₀`.
    pub z: DiagonalObservable,
    /// `E(X₀) = ½ℰ(X₀) + ℰ(X₀, B) − ⟨A, X₀⟩⋄`.
    pub energy: f64,
    /// Smallest eigenvalue of the form on `D`-supported observables relative
    /// to `⟨·,·⟩⋄` (dense path); smallest observed Rayleigh quotient along
    /// the search directions (conjugate-gradient path).
    pub coercivity: f64,
    pub method: LinearMethod,
    pub iterations: usize,
    /// `max ‖Z_i − Z^closed_i‖` over `D ∪ ∂D`, when the closed form converges.
    pub closed_form_difference: Option<f64>,
    pub notes: Vec<String>,
}

impl VariationalSolution {
    pub fn to_value(&self, walk: &WalkSpec) -> Value {
        json!({
            "solution": io::observable_to_value(walk, &self.z),
            "minimizer": io::observable_to_value(walk, &self.x0),
            "energy": self.energy,
            "coercivity": self.coercivity,
            "method": self.method,
            "iterations": self.iterations,
            "closed_form_difference": self.closed_form_difference,
            "notes": self.notes,
        })
    }
}

/// Minimizes `E(X) = ½ℰ(X) + ℰ(X, B) − ⟨A, X⟩⋄` over observables supported on
/// `D`. Stationarity reads `ℰ(T, X) = ⟨T, A − C⟩⋄` for all such `T`, with
/// `C = (Id − 𝔐*)(B)`, which is a Hermitian positive-definite system under
/// detailed balance.
pub fn variational_solve(walk: &WalkSpec, tau: &DiagonalState, problem: &DirichletProblem) -> Result<VariationalSolution> {
    variational_solve_with(walk, tau, problem, DENSE_LIMIT)
}

pub fn variational_solve_with(
    walk: &WalkSpec,
    tau: &DiagonalState,
    problem: &DirichletProblem,
    dense_limit: usize,
) -> Result<VariationalSolution> {
    model::require_valid(walk)?;
    model::require_faithful(walk, tau)?;
    let db = model::check_detailed_balance(walk, tau)?;
    if !db.selfadjoint_within_tol {
        return Err(OqwError::Precondition(format!(
            "detailed balance fails for the given τ⋄ (self-adjointness residual {:.3e}, sufficient-condition residual {:.3e})",
            db.selfadjoint_residual, db.sufficient_residual
        )));
    }
    if !structure::is_irreducible(walk)?.0 {
        return Err(OqwError::Precondition("walk is reducible; see structure::decompose".into()));
    }
    let sites: Vec<usize> = problem.domain.iter().copied().collect();
    let (offsets, n) = block_offsets(walk, &sites);
    let position = |k: usize| sites.iter().position(|&s| s == k);

    // Dense matrix of (Id − 𝔐*) restricted to D.
    let build_generator = || {
        let mut m = linalg::identity(n);
        for (&(i, j), l) in walk.transitions() {
            if let (Some(pi), Some(pj)) = (position(i), position(j)) {
                let block = linalg::sandwich(&l.adjoint());
                let mut view = m.view_mut((offsets[pj], offsets[pi]), block.shape());
                view -= block;
            }
        }
        m
    };
    let gram: Vec<CMatrix> = sites.iter().map(|&i| linalg::sandwich(&linalg::psd_sqrt(&tau.blocks[i]))).collect();
    let apply_gram = |v: &CVector| {
        let mut out = v.clone();
        for (k, g) in gram.iter().enumerate() {
            let len = g.nrows();
            let seg = g * v.rows(offsets[k], len);
            out.rows_mut(offsets[k], len).copy_from(&seg);
        }
        out
    };
    let c_obs = generator_dual(walk, &problem.b)?;
    let rhs_obs = problem.a.sub(&c_obs);
    let rhs_blocks: Vec<CMatrix> = rhs_obs.blocks.clone();
    let rhs = apply_gram(&model::pack_blocks(walk, &sites, &rhs_blocks));

    let (x, method, iterations, coercivity) = if n <= dense_limit {
        let gen = build_generator();
        let gram_full = {
            let mut g = CMatrix::zeros(n, n);
            for (k, b) in gram.iter().enumerate() {
                g.view_mut((offsets[k], offsets[k]), b.shape()).copy_from(b);
            }
            g
        };
        let k = &gram_full * &gen;
        let asym = linalg::max_abs(&(&k - k.adjoint()));
        if asym > 1e-8 * linalg::max_abs(&k).max(1.0) {
            return Err(OqwError::numerical(format!("stationarity matrix is not Hermitian (defect {asym:.3e})")));
        }
        let k = linalg::hermitian_part(&k);
        // Coercivity relative to ⟨·,·⟩⋄: spectrum of G^{-1/2} K G^{-1/2}.
        let mut g_inv_half = CMatrix::zeros(n, n);
        for (kk, &i) in sites.iter().enumerate() {
            let quarter = linalg::hermitian_function(&tau.blocks[i], |x| x.powf(-0.25));
            let b = linalg::sandwich(&quarter);
            g_inv_half.view_mut((offsets[kk], offsets[kk]), b.shape()).copy_from(&b);
        }
        let lambda = linalg::min_eigenvalue(&(&g_inv_half * &k * &g_inv_half));
        if lambda <= COERCIVITY_TOL {
            return Err(OqwError::Numerical {
                message: format!("Dirichlet form is not coercive on D (smallest eigenvalue {lambda:.3e})"),
                residual: None,
                spectral_radius: None,
            });
        }
        let chol = Cholesky::new(k).ok_or_else(|| OqwError::numerical("Cholesky factorization failed"))?;
        let x = chol.solve(&CMatrix::from_column_slice(n, 1, rhs.as_slice()));
        (CVector::from_column_slice(x.as_slice()), LinearMethod::Cholesky, 1, lambda)
    } else {
        let apply_k = |v: &CVector| {
            let mut blocks = vec![CMatrix::zeros(0, 0); walk.n_sites()];
            for (i, b) in blocks.iter_mut().enumerate() {
                *b = linalg::zeros(walk.dim(i), walk.dim(i));
            }
            model::unpack_into(walk, &sites, v, &mut blocks);
            let g = generator_dual(walk, &DiagonalObservable { blocks }).expect("shapes checked");
            apply_gram(&model::pack_blocks(walk, &sites, &g.blocks))
        };
        let (x, its, min_rayleigh) = conjugate_gradient(apply_k, &apply_gram, &rhs, 1e-13, 20 * n)?;
        if min_rayleigh <= COERCIVITY_TOL {
            return Err(OqwError::numerical(format!(
                "Dirichlet form is not coercive on D (Rayleigh quotient {min_rayleigh:.3e})"
            )));
        }
        (x, LinearMethod::ConjugateGradient, its, min_rayleigh)
    };

    let mut x0 = DiagonalObservable::zeros(walk);
    model::unpack_into(walk, &sites, &x, &mut x0.blocks);
    for &i in &sites {
        x0.blocks[i] = linalg::hermitian_part(&x0.blocks[i]);
    }
    let z = problem.b.add(&x0);
    let energy = 0.5 * dirichlet_energy(walk, tau, &x0)? + dirichlet_form(walk, tau, &x0, &problem.b)?.re
        - diamond_inner(tau, &problem.a, &x0)?.re;
    let mut notes = Vec::new();
    let closed_form_difference = match solve_dirichlet_domain(walk, problem) {
        Ok(sol) => {
            let bd = problem.boundary(walk);
            let diff = problem
                .domain
                .iter()
                .chain(bd.iter())
                .map(|&i| linalg::operator_norm(&(&sol.z.blocks[i] - &z.blocks[i])))
                .fold(0.0, f64::max);
            Some(diff)
        }
        Err(e) => {
            notes.push(format!("closed-form cross-check unavailable: {e}"));
            None
        }
    };
    let residuals = domain_residuals(walk, &problem.domain, &z, &problem.a)?;
    let max_residual = residuals.iter().map(|r| r.1).fold(0.0, f64::max);
    reject_if_large(max_residual, problem.a.max_block_norm().max(problem.b.max_block_norm()), "variational solution")?;
    Ok(VariationalSolution { x0, z, energy, coercivity, method, iterations, closed_form_difference, notes })
}

/// Conjugate gradients for a Hermitian positive-definite `K`; also returns
/// the smallest Rayleigh quotient `p^†Kp / p^†Gp` seen along the way.
fn conjugate_gradient(
    apply_k: impl Fn(&CVector) -> CVector,
    apply_g: &impl Fn(&CVector) -> CVector,
    b: &CVector,
    rel_tol: f64,
    max_iter: usize,
) -> Result<(CVector, usize, f64)> {
    let mut x = CVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dotc(&r).re;
    let target = rel_tol * rel_tol * rr.max(1e-300);
    let mut min_rayleigh = f64::INFINITY;
    for it in 0..max_iter {
        if rr <= target {
            return Ok((x, it, min_rayleigh));
        }
        let kp = apply_k(&p);
        let curvature = p.dotc(&kp).re;
        let norm_g = p.dotc(&apply_g(&p)).re;
        if norm_g > 0.0 {
            min_rayleigh = min_rayleigh.min(curvature / norm_g);
        }
        if curvature <= 0.0 {
            return Err(OqwError::numerical("conjugate gradients met non-positive curvature"));
        }
        let alpha = rr / curvature;
        x += &p * c(alpha);
        r -= &kp * c(alpha);
        let rr_new = r.dotc(&r).re;
        p = &r + &p * c(rr_new / rr);
        rr = rr_new;
    }
    Err(OqwError::Numerical {
        message: format!("conjugate gradients did not converge in {max_iter} iterations"),
        residual: Some(rr.sqrt()),
        spectral_radius: None,
    })
}

/// `(∇X)_{i,j} = X_i L_{i,j} − L_{i,j} X_j` on a doubly stochastic walk.
#[derive(Clone, Debug)]
pub struct GradientForm {
    pub blocks: Vec<((usize, usize), CMatrix)>,
    /// `½ Σ Tr((∇X)_{i,j} (∇X)_{i,j}^†)`.
    pub energy: f64,
}

impl GradientForm {
    pub fn to_value(&self, walk: &WalkSpec) -> Value {
        let blocks: Vec<Value> = self
            .blocks
            .iter()
            .map(|((i, j), m)| {
                json!({
                    "to": walk.site_id(*i),
                    "from": walk.site_id(*j),
                    "matrix": io::matrix_to_json(m),
                })
            })
            .collect();
        json!({ "energy": self.energy, "gradient": blocks })
    }
}

/// Checks `L_{i,j} = L_{j,i}^†` for every pair.
pub fn require_doubly_stochastic(walk: &WalkSpec) -> Result<()> {
    let tol = walk.tolerance.max(1e-9);
    for (&(i, j), l) in walk.transitions() {
        let back = walk.transition(j, i).map(|m| m.adjoint()).unwrap_or_else(|| linalg::zeros(l.nrows(), l.ncols()));
        if linalg::max_abs(&(l - back)) > tol {
            return Err(OqwError::Precondition(format!(
                "walk is not doubly stochastic: L[{},{}] differs from L[{},{}]^†",
                walk.site_id(i),
                walk.site_id(j),
                walk.site_id(j),
                walk.site_id(i)
            )));
        }
    }
    Ok(())
}

/// Gradient blocks and `½‖∇X‖²_V`, which equals `ℰ(X)` with the unnormalized
/// reference `τ⋄ = Id` (and `D` times `ℰ(X)` for the state `Id/D`).
pub fn gradient_form(walk: &WalkSpec, x: &DiagonalObservable) -> Result<GradientForm> {
    require_doubly_stochastic(walk)?;
    if x.blocks.len() != walk.n_sites() {
        return Err(OqwError::Structural("observable has the wrong number of blocks".into()));
    }
    let mut blocks = Vec::new();
    let mut energy = 0.0;
    for (&(i, j), l) in walk.transitions() {
        let g = &x.blocks[i] * l - l * &x.blocks[j];
        energy += 0.5 * g.norm_squared();
        if linalg::max_abs(&g) > 0.0 {
            blocks.push(((i, j), g));
        }
    }
    Ok(GradientForm { blocks, energy })
}

/// `Σ_i Id_i ⊗ |i⟩⟨i|` as a reference state (not normalized).
pub fn identity_reference(walk: &WalkSpec) -> DiagonalState {
    DiagonalState { blocks: DiagonalObservable::identity(walk).blocks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::linalg::{diag, max_abs};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hermitian(walk: &WalkSpec, rng: &mut ChaCha8Rng) -> DiagonalObservable {
        DiagonalObservable {
            blocks: walk
                .dims()
                .iter()
                .map(|&d| {
                    let m = CMatrix::from_fn(d, d, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
                    linalg::hermitian_part(&m)
                })
                .collect(),
        }
    }

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    /// Oracle: solve the block system `Z_i − Σ_k L_{k,i}^† Z_k L_{k,i} = A_i`
    /// on `D` with `Z = B` on `∂D` directly.
    fn direct_domain_solve(walk: &WalkSpec, p: &DirichletProblem) -> DiagonalObservable {
        let sites: Vec<usize> = p.domain.iter().copied().collect();
        let (offsets, n) = block_offsets(walk, &sites);
        let mut m = linalg::identity(n);
        let mut rhs = model::pack_blocks(walk, &sites, &p.a.blocks);
        for (&(k, i), l) in walk.transitions() {
            let Some(pi) = sites.iter().position(|&s| s == i) else { continue };
            let len = walk.dim(i) * walk.dim(i);
            if let Some(pk) = sites.iter().position(|&s| s == k) {
                let b = linalg::sandwich(&l.adjoint());
                let mut v = m.view_mut((offsets[pi], offsets[pk]), b.shape());
                v -= b;
            } else {
                let contrib = linalg::vectorize(&(l.adjoint() * &p.b.blocks[k] * l));
                let mut seg = rhs.rows_mut(offsets[pi], len);
                seg += contrib;
            }
        }
        let x = linalg::solve(&m, &CMatrix::from_column_slice(n, 1, rhs.as_slice())).unwrap();
        let mut z = p.b.clone();
        model::unpack_into(walk, &sites, &CVector::from_column_slice(x.as_slice()), &mut z.blocks);
        z
    }

    #[test]
    fn constant_boundary_gives_identity() {
        let w = fixtures::quantum_ring(5, 2, 3);
        let d = set(&[0, 1, 2]);
        let bd = hitting::boundary(&w, &d);
        let p = DirichletProblem::new(&w, d.clone(), DiagonalObservable::zeros(&w), DiagonalObservable::identity_on(&w, &bd)).unwrap();
        let sol = solve_dirichlet_domain(&w, &p).unwrap();
        for i in d.iter().chain(&bd) {
            assert!(max_abs(&(&sol.z.blocks[*i] - linalg::identity(2))) < 1e-10);
        }
        assert!(sol.max_residual < 1e-10);
        assert!((sol.min_exit_probability - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gamblers_ruin_interpolates_linearly() {
        let w = fixtures::gamblers_ruin(10, 0.5).unwrap();
        let d: BTreeSet<usize> = (1..10).collect();
        let b = DiagonalObservable::concentrated(&w, 10, linalg::identity(1));
        let p = DirichletProblem::new(&w, d, DiagonalObservable::zeros(&w), b).unwrap();
        let sol = solve_dirichlet_domain(&w, &p).unwrap();
        for i in 0..=10 {
            assert!((sol.z.blocks[i][(0, 0)].re - i as f64 / 10.0).abs() < 1e-10, "site {i}");
        }
    }

    #[test]
    fn closed_form_matches_direct_block_solve() {
        let w = fixtures::quantum_ring(6, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = set(&[1, 2, 3]);
        let bd = hitting::boundary(&w, &d);
        let mut a = random_hermitian(&w, &mut rng);
        let mut b = random_hermitian(&w, &mut rng);
        for i in 0..6 {
            if !d.contains(&i) {
                a.blocks[i] = linalg::zeros(2, 2);
            }
            if !bd.contains(&i) {
                b.blocks[i] = linalg::zeros(2, 2);
            }
        }
        let p = DirichletProblem::new(&w, d, a, b).unwrap();
        let sol = solve_dirichlet_domain(&w, &p).unwrap();
        let oracle = direct_domain_solve(&w, &p);
        for i in 0..6 {
            assert!(max_abs(&(&sol.z.blocks[i] - &oracle.blocks[i])) < 1e-10);
        }
        assert!(sol.max_residual < 1e-8);
        assert!(sol.notes.iter().any(|n| n.contains("free")));
    }

    #[test]
    fn example_5_4_domain_visits_diverge() {
        // The e2 component bounces between sites 1 and 2 and never exits.
        let w = fixtures::example_5_4();
        let d = set(&[1, 2, 3]);
        let p = DirichletProblem::new(&w, d.clone(), DiagonalObservable::identity_on(&w, &d), DiagonalObservable::zeros(&w)).unwrap();
        let err = solve_dirichlet_domain(&w, &p).unwrap_err();
        assert!(err.to_string().contains("decompose"), "{err}");
    }

    #[test]
    fn domain_solution_counts_visits_on_exiting_chain() {
        // With A = Id on D, Tr(ρ Z_i) = 1 + Σ_{j∈D} E_{i,ρ}(n^D_j).
        let w = fixtures::gamblers_ruin(6, 0.3).unwrap();
        let d: BTreeSet<usize> = (1..6).collect();
        let p = DirichletProblem::new(&w, d.clone(), DiagonalObservable::identity_on(&w, &d), DiagonalObservable::zeros(&w)).unwrap();
        let sol = solve_dirichlet_domain(&w, &p).unwrap();
        let rho = linalg::identity(1);
        for &i in &d {
            let visits: f64 = d.iter().map(|&j| hitting::expected_domain_visits(&w, &d, i, &rho, j).unwrap().value).sum();
            assert!((sol.z.blocks[i][(0, 0)].re - 1.0 - visits).abs() < 1e-10);
        }
    }

    #[test]
    fn global_solution_is_green_column() {
        let w = fixtures::leaky_biased_line(6, 0.6).unwrap();
        let n = w.n_sites();
        let k = 2;
        let a = DiagonalObservable::concentrated(&w, k, linalg::identity(1));
        let sol = solve_dirichlet_global(&w, &a).unwrap();
        assert!(sol.gauge_shift.is_none());
        // Classical oracle: Z = (I − P)^{-1} 1_k with P[i][j] = prob(i → j).
        let mut p = nalgebra::DMatrix::<f64>::zeros(n, n);
        for (&(to, from), l) in w.transitions() {
            p[(from, to)] = l[(0, 0)].norm_sqr();
        }
        let g = (nalgebra::DMatrix::<f64>::identity(n, n) - p).try_inverse().unwrap();
        for i in 0..n {
            assert!((sol.z.blocks[i][(0, 0)].re - g[(i, k)]).abs() < 1e-9, "site {i}");
        }
        assert!(sol.max_residual < 1e-8);
    }

    #[test]
    fn global_problem_rejects_recurrent_walks() {
        let w = fixtures::symmetric_cycle(4);
        let err = solve_dirichlet_global(&w, &DiagonalObservable::zeros(&w)).unwrap_err();
        assert!(matches!(err, OqwError::Precondition(_)));
    }

    #[test]
    fn global_zero_data_gives_zero() {
        let w = fixtures::leaky_biased_line(4, 0.5).unwrap();
        let sol = solve_dirichlet_global(&w, &DiagonalObservable::zeros(&w)).unwrap();
        assert!(sol.z.max_block_norm() == 0.0);
    }

    #[test]
    fn harmonic_operators_partition_identity() {
        let w = fixtures::quantum_ring(6, 2, 5);
        let d = set(&[1, 2, 3]);
        let bd = hitting::boundary(&w, &d);
        assert_eq!(bd, set(&[0, 4]));
        let mut sum = DiagonalObservable::zeros(&w);
        for &j in &bd {
            let h = harmonic_operator(&w, &d, j).unwrap();
            let g = generator_dual(&w, &h).unwrap();
            for &i in &d {
                assert!(max_abs(&g.blocks[i]) < 1e-10);
            }
            let rho = diag(&[0.3, 0.7]);
            let mass = hitting::harmonic_measure(&w, &d, 2, &rho).unwrap().mass_at(w.site_id(j)).unwrap();
            assert!(((&rho * &h.blocks[2]).trace().re - mass).abs() < 1e-10);
            sum = sum.add(&h);
        }
        for i in d.iter().chain(&bd) {
            assert!(max_abs(&(&sum.blocks[*i] - linalg::identity(2))) < 1e-8);
        }
    }

    #[test]
    fn singleton_boundary_operator_is_identity() {
        let w = fixtures::quantum_ring(4, 2, 8);
        let d = set(&[0, 1, 2]);
        assert_eq!(hitting::boundary(&w, &d), set(&[3]));
        let h = harmonic_operator(&w, &d, 3).unwrap();
        for i in 0..4 {
            assert!(max_abs(&(&h.blocks[i] - linalg::identity(2))) < 1e-10);
        }
    }

    #[test]
    fn harmonic_operator_entries_for_gamblers_ruin() {
        let w = fixtures::gamblers_ruin(10, 0.5).unwrap();
        let d: BTreeSet<usize> = (1..10).collect();
        let h = harmonic_operator(&w, &d, 0).unwrap();
        for i in 1..10 {
            assert!((h.blocks[i][(0, 0)].re - (1.0 - i as f64 / 10.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn diamond_inner_basics() {
        let w = fixtures::quantum_ring(3, 2, 1);
        let tau = DiagonalState { blocks: vec![linalg::identity(2) / c(6.0); 3] };
        let id = DiagonalObservable::identity(&w);
        assert!((diamond_inner(&tau, &id, &id).unwrap() - c(1.0)).norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_hermitian(&w, &mut rng);
        let y = random_hermitian(&w, &mut rng);
        let plain: C64 = x.blocks.iter().zip(&y.blocks).map(|(a, b)| (a.adjoint() * b).trace()).sum();
        assert!((diamond_inner(&tau, &x, &y).unwrap() - plain / c(6.0)).norm() < 1e-12);
        assert!(diamond_inner(&tau, &x, &x).unwrap().re > 0.0);
        let bad = DiagonalState { blocks: vec![diag(&[1.0, 0.0]); 3] };
        assert!(matches!(diamond_inner(&bad, &x, &x), Err(OqwError::Precondition(_))));
    }

    fn birth_death(n: usize, p: f64) -> (WalkSpec, Vec<f64>) {
        let q = 1.0 - p;
        let mut t = vec![vec![0.0; n + 1]; n + 1];
        t[0][0] = q;
        t[n][n] = p;
        for k in 0..n {
            t[k + 1][k] = p;
            t[k][k + 1] = q;
        }
        let labels: Vec<String> = (0..=n).map(|k| k.to_string()).collect();
        let w = model::minimal_dilation(&t, &labels).unwrap();
        let raw: Vec<f64> = (0..=n).map(|k| (p / q).powi(k as i32)).collect();
        let z: f64 = raw.iter().sum();
        (w, raw.iter().map(|x| x / z).collect())
    }

    fn classical_tau(pi: &[f64]) -> DiagonalState {
        DiagonalState { blocks: pi.iter().map(|&x| diag(&[x])).collect() }
    }

    #[test]
    fn dirichlet_form_matches_classical_form() {
        let (w, pi) = birth_death(5, 0.35);
        let tau = classical_tau(&pi);
        let xs = [0.3, -1.0, 2.0, 0.5, 0.0, 1.5];
        let x = DiagonalObservable { blocks: xs.iter().map(|&v| diag(&[v])).collect() };
        let mut classical = 0.0;
        for (&(i, j), l) in w.transitions() {
            classical += 0.5 * pi[j] * l[(0, 0)].norm_sqr() * (xs[i] - xs[j]).powi(2);
        }
        assert!((dirichlet_energy(&w, &tau, &x).unwrap() - classical).abs() < 1e-12);
        let id = DiagonalObservable::identity(&w);
        assert!(dirichlet_energy(&w, &tau, &id).unwrap().abs() < 1e-12);
        assert!(dirichlet_energy(&w, &tau, &x).unwrap() > 1e-6);
    }

    #[test]
    fn variational_constant_solution() {
        let w = fixtures::quantum_ring(5, 2, 7);
        let tau = DiagonalState { blocks: vec![linalg::identity(2) / c(10.0); 5] };
        let d = set(&[0, 1]);
        let bd = hitting::boundary(&w, &d);
        let p = DirichletProblem::new(&w, d.clone(), DiagonalObservable::zeros(&w), DiagonalObservable::identity_on(&w, &bd)).unwrap();
        let sol = variational_solve(&w, &tau, &p).unwrap();
        for i in d.iter().chain(&bd) {
            assert!(max_abs(&(&sol.z.blocks[*i] - linalg::identity(2))) < 1e-10);
        }
        // E(Id_D) = −½ ℰ(Id_D) since (Id − 𝔐*)(Id_{D∪∂D}) vanishes on D.
        let id_d = DiagonalObservable::identity_on(&w, &d);
        let expected = -0.5 * dirichlet_energy(&w, &tau, &id_d).unwrap();
        assert!((sol.energy - expected).abs() < 1e-12);
        assert!(sol.coercivity > 0.0);
        assert!(sol.closed_form_difference.unwrap() < 1e-10);
    }

    #[test]
    fn variational_matches_classical_path() {
        let (w, pi) = birth_death(8, 0.4);
        let tau = classical_tau(&pi);
        let d: BTreeSet<usize> = (1..8).collect();
        let mut b = DiagonalObservable::zeros(&w);
        b.blocks[0] = diag(&[2.0]);
        b.blocks[8] = diag(&[-1.0]);
        let a = DiagonalObservable { blocks: (0..=8).map(|k| diag(&[if (1..8).contains(&k) { 0.1 * k as f64 } else { 0.0 }])).collect() };
        let p = DirichletProblem::new(&w, d, a, b).unwrap();
        let sol = variational_solve(&w, &tau, &p).unwrap();
        let oracle = direct_domain_solve(&w, &p);
        for i in 0..=8 {
            assert!((sol.z.blocks[i][(0, 0)] - oracle.blocks[i][(0, 0)]).norm() < 1e-10);
        }
        assert_eq!(sol.method, LinearMethod::Cholesky);
    }

    #[test]
    fn conjugate_gradient_path_agrees() {
        let w = fixtures::quantum_ring(6, 2, 21);
        let tau = DiagonalState { blocks: vec![linalg::identity(2) / c(12.0); 6] };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = set(&[0, 1, 2, 3]);
        let bd = hitting::boundary(&w, &d);
        let mut a = random_hermitian(&w, &mut rng);
        let mut b = random_hermitian(&w, &mut rng);
        for i in 0..6 {
            if !d.contains(&i) {
                a.blocks[i] = linalg::zeros(2, 2);
            }
            if !bd.contains(&i) {
                b.blocks[i] = linalg::zeros(2, 2);
            }
        }
        let p = DirichletProblem::new(&w, d, a, b).unwrap();
        let dense = variational_solve(&w, &tau, &p).unwrap();
        let cg = variational_solve_with(&w, &tau, &p, 0).unwrap();
        assert_eq!(cg.method, LinearMethod::ConjugateGradient);
        for i in 0..6 {
            assert!(max_abs(&(&dense.z.blocks[i] - &cg.z.blocks[i])) < 1e-9);
        }
        assert!(dense.closed_form_difference.unwrap() < 1e-9);
        assert!((dense.energy - cg.energy).abs() < 1e-9);
    }

    #[test]
    fn variational_refuses_without_detailed_balance() {
        let w = fixtures::asymmetric_three_cycle();
        let tau = DiagonalState { blocks: vec![diag(&[1.0 / 3.0]); 3] };
        let p = DirichletProblem::new(&w, set(&[0]), DiagonalObservable::zeros(&w), DiagonalObservable::zeros(&w)).unwrap();
        assert!(matches!(variational_solve(&w, &tau, &p), Err(OqwError::Precondition(_))));
    }

    #[test]
    fn gradient_identity_on_ring() {
        let w = fixtures::quantum_ring(5, 3, 13);
        let tau = identity_reference(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let x = random_hermitian(&w, &mut rng);
            let g = gradient_form(&w, &x).unwrap();
            assert!((g.energy - dirichlet_energy(&w, &tau, &x).unwrap()).abs() < 1e-10);
        }
        let id = DiagonalObservable::identity(&w);
        let g = gradient_form(&w, &id.scaled(c(2.5))).unwrap();
        assert!(g.blocks.is_empty() && g.energy == 0.0);
    }

    #[test]
    fn gradient_refuses_non_doubly_stochastic() {
        let w = fixtures::gamblers_ruin(4, 0.3).unwrap();
        let err = gradient_form(&w, &DiagonalObservable::identity(&w)).unwrap_err();
        assert!(err.to_string().contains("not doubly stochastic"));
    }
}
