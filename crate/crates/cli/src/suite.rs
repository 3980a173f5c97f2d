//! The fixture suite: every acceptance check as a PASS/FAIL line, grouped by
//! fixture. Each group starts with a validation line.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use num_complex::Complex64 as C64;
use oqw_core::dirichlet::{self, DirichletProblem};
use oqw_core::fixtures;
use oqw_core::hitting::{self, first_passage_taboo, DEFAULT_NODE_BUDGET};
use oqw_core::linalg::{self, c, CMatrix};
use oqw_core::model;
use oqw_core::structure::{self, RecurrenceCase};
use oqw_core::trajectory;
use oqw_core::{io, DiagonalObservable, Extended, Result, WalkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    /// A fixture group name, or a criterion number.
    pub only: Option<String>,
    /// Scale every transition operator by this factor.
    pub perturb: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SuiteLine {
    pub criterion: u8,
    pub group: String,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

impl SuiteLine {
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} [{}] {}: {}", self.group, self.check, self.detail)
    }

    pub fn to_value(&self) -> Value {
        json!({
            "criterion": self.criterion,
            "group": self.group,
            "check": self.check,
            "passed": self.passed,
            "detail": self.detail,
            "line": self.line(),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub lines: Vec<SuiteLine>,
    /// Digest of each fixture walk that was checked.
    pub digests: BTreeMap<String, String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }
}

pub const CRITERIA: [(u8, &str); 10] = [
    (1, "example-5.1 regimes"),
    (2, "example-5.4 passage and visits"),
    (3, "example-5.2 return time, p = 3/4"),
    (4, "example-5.2 mixed case, p = 1/4"),
    (5, "example-5.5-nonnormal recurrence"),
    (6, "classical gambler's ruin"),
    (7, "Dirichlet closed form vs variational"),
    (8, "Dirichlet form gradient identity"),
    (9, "Kac return-time formula on example-5.4"),
    (10, "path-sum and Monte Carlo oracles"),
];

/// Finite builtin walks checked against the path-sum and Monte Carlo oracles.
/// Each entry is `(group label, fixture name, N)`.
pub const ORACLE_FIXTURES: [(&str, &str, Option<usize>); 9] = [
    ("example-5.1", "example-5.1", None),
    ("example-5.4", "example-5.4", None),
    ("gamblers-ruin", "gamblers-ruin", None),
    ("leaky-biased-line", "leaky-biased-line", None),
    ("quantum-ring-3", "quantum-ring", Some(3)),
    ("quantum-ring-4", "quantum-ring", Some(4)),
    ("symmetric-cycle", "symmetric-cycle", None),
    ("deterministic-cycle", "deterministic-cycle", None),
    ("asymmetric-three-cycle", "asymmetric-three-cycle", None),
];

const ORACLE_RADIUS: f64 = 0.9;
const ORACLE_TOL: f64 = 1e-9;
const MC_TRAJ: usize = 4000;
const MC_HORIZON: usize = 400;
const MC_PAIRS: usize = 12;

struct Ctx<'a> {
    opts: &'a SuiteOptions,
    criterion: u8,
    report: SuiteReport,
}

impl Ctx<'_> {
    fn wants(&self, group: &str) -> bool {
        match self.opts.only.as_deref() {
            None => true,
            Some(s) if s.parse::<u8>().is_ok() => true,
            Some(s) => s == group,
        }
    }

    fn check(&mut self, group: &str, check: &str, passed: bool, detail: String) {
        self.report.lines.push(SuiteLine {
            criterion: self.criterion,
            group: group.into(),
            check: check.into(),
            passed,
            detail,
        });
    }

    /// Runs a computation; errors become failed lines.
    fn record(&mut self, group: &str, check: &str, f: impl FnOnce() -> Result<(bool, String)>) {
        match f() {
            Ok((passed, detail)) => self.check(group, check, passed, detail),
            Err(e) => self.check(group, check, false, format!("error: {e}")),
        }
    }

    /// Builds, perturbs and validates a fixture; the validation line is
    /// always the first line of its group.
    fn prepare(&mut self, group: &str, build: Result<WalkSpec>) -> Option<WalkSpec> {
        let walk = match build.and_then(|w| match self.opts.perturb {
            Some(f) => scaled(&w, f),
            None => Ok(w),
        }) {
            Ok(w) => w,
            Err(e) => {
                self.check(group, "validate", false, format!("error: {e}"));
                return None;
            }
        };
        self.report.digests.insert(group.into(), io::walk_digest(&walk));
        self.record(group, "validate", || {
            let r = model::validate_walk(&walk)?;
            Ok((r.accepted, format!("max residual {:.2e} (tolerance {:.0e})", r.max_residual, r.tolerance)))
        });
        Some(walk)
    }

    fn runtime(&mut self, group: &str, start: Instant, limit_s: f64) {
        let t = start.elapsed().as_secs_f64();
        self.check(group, &format!("runtime < {limit_s} s"), t < limit_s, format!("{t:.2} s"));
    }
}

/// `L_{i,j} ← factor · L_{i,j}`.
pub fn scaled(walk: &WalkSpec, factor: f64) -> Result<WalkSpec> {
    let mut out = WalkSpec::new(walk.site_ids().iter().cloned().zip(walk.dims().iter().copied()))?
        .with_tolerance(walk.tolerance);
    for (&(i, j), l) in walk.transitions() {
        out.set_transition_at(i, j, l * c(factor))?;
    }
    for k in walk.leaky_sites() {
        out.set_leaky_at(k);
    }
    Ok(out)
}

/// Runs one criterion (filtered by `opts.only` when it names a group).
pub fn run_criterion(number: u8, opts: &SuiteOptions) -> SuiteReport {
    let mut ctx = Ctx { opts, criterion: number, report: SuiteReport::default() };
    match number {
        1 => criterion_1(&mut ctx),
        2 => criterion_2(&mut ctx),
        3 => criterion_3(&mut ctx),
        4 => criterion_4(&mut ctx),
        5 => criterion_5(&mut ctx),
        6 => criterion_6(&mut ctx),
        7 => criterion_7(&mut ctx),
        8 => criterion_8(&mut ctx),
        9 => criterion_9(&mut ctx),
        10 => criterion_10(&mut ctx),
        _ => {}
    }
    ctx.report
}

pub fn run_fixture_suite(opts: &SuiteOptions) -> SuiteReport {
    let only_criterion = opts.only.as_deref().and_then(|s| s.parse::<u8>().ok());
    let mut report = SuiteReport::default();
    for (n, _) in CRITERIA {
        if only_criterion.is_some_and(|k| k != n) {
            continue;
        }
        let r = run_criterion(n, opts);
        report.lines.extend(r.lines);
        report.digests.extend(r.digests);
    }
    report
}

fn site(w: &WalkSpec, id: &str) -> Result<usize> {
    w.index_of(id)
}

fn diag2(r: f64) -> CMatrix {
    linalg::diag(&[1.0 - r, r])
}

fn criterion_1(ctx: &mut Ctx) {
    let g = "example-5.1";
    if !ctx.wants(g) {
        return;
    }
    let t0 = Instant::now();
    let Some(w) = ctx.prepare(g, Ok(fixtures::example_5_1())) else { return };
    ctx.record(g, "P(t_0 < ∞) = 1 − r, r ∈ {0, 0.3, 1}", || {
        let o = site(&w, "0")?;
        let mut worst: f64 = 0.0;
        for r in [0.0, 0.3, 1.0] {
            let v = hitting::passage_probability(&w, o, &diag2(r), o)?.value;
            worst = worst.max((v - (1.0 - r)).abs());
        }
        Ok((worst <= 1e-10, format!("max error {worst:.2e}")))
    });
    ctx.record(g, "E(t_0) from e1 = 2", || {
        let o = site(&w, "0")?;
        let v = hitting::expected_return_time(&w, o, &diag2(0.0), o)?.value;
        Ok((v.finite().is_some_and(|x| (x - 2.0).abs() <= 1e-10), format!("{v}")))
    });
    ctx.record(g, "E(n_0) = 0 from e2, ∞ from e1", || {
        let o = site(&w, "0")?;
        let e2 = hitting::expected_visits(&w, o, &diag2(1.0), o)?.value;
        let e1 = hitting::expected_visits(&w, o, &diag2(0.0), o)?.value;
        let ok = e2.finite().is_some_and(|x| x.abs() <= 1e-10) && e1.is_infinite();
        Ok((ok, format!("e2: {e2}, e1: {e1}")))
    });
    ctx.runtime(g, t0, 1.0);
}

fn criterion_2(ctx: &mut Ctx) {
    let g = "example-5.4";
    if !ctx.wants(g) {
        return;
    }
    let t0 = Instant::now();
    let Some(w) = ctx.prepare(g, Ok(fixtures::example_5_4())) else { return };
    ctx.record(g, "P_1(t_0 < ∞) = (1 + r)/2, r ∈ {0, ½, 1}", || {
        let (one, zero) = (site(&w, "1")?, site(&w, "0")?);
        let mut worst: f64 = 0.0;
        let mut got = Vec::new();
        for r in [0.0, 0.5, 1.0] {
            let v = hitting::passage_probability(&w, one, &diag2(r), zero)?.value;
            worst = worst.max((v - (1.0 + r) / 2.0).abs());
            got.push(format!("r={r}: {v:.6}"));
        }
        Ok((worst <= 1e-10, format!("{} (max error {worst:.2e})", got.join(", "))))
    });
    ctx.record(g, "𝔓*_{1,1}(Id) = diag(3/4, 1)", || {
        let one = site(&w, "1")?;
        let p = hitting::passage_operator(&w, one, one)?.dual_identity();
        let err = linalg::max_abs(&(p - linalg::diag(&[0.75, 1.0])));
        Ok((err <= 1e-10, format!("max entry error {err:.2e}")))
    });
    ctx.record(g, "E_1(n_0) = ∞, r ∈ {0, ½, 1}", || {
        let (one, zero) = (site(&w, "1")?, site(&w, "0")?);
        let mut got = Vec::new();
        let mut ok = true;
        for r in [0.0, 0.5, 1.0] {
            let v = hitting::expected_visits(&w, one, &diag2(r), zero)?.value;
            ok &= v.is_infinite();
            got.push(format!("r={r}: {v}"));
        }
        Ok((ok, got.join(", ")))
    });
    ctx.runtime(g, t0, 1.0);
}

fn return_times_5_2(w: &WalkSpec, rs: &[f64]) -> Result<Vec<Extended>> {
    let o = site(w, "0")?;
    rs.iter()
        .map(|&r| Ok(hitting::expected_return_time(w, o, &diag2(r), o)?.value))
        .collect()
}

fn criterion_3(ctx: &mut Ctx) {
    let g = "example-5.2-p0.75";
    if !ctx.wants(g) {
        return;
    }
    let t0 = Instant::now();
    let Some(w) = ctx.prepare(g, fixtures::example_5_2(0.75, 60)) else { return };
    let rs = [0.0, 0.5, 1.0];
    let lambda = 19.0 / 12.0;
    let at_60 = return_times_5_2(&w, &rs);
    let perturb = ctx.opts.perturb;
    ctx.record(g, "E(t_0) = r + 2λ(1 − r), λ = 19/12, N = 60", || {
        let vals = at_60.as_ref().map_err(|e| oqw_core::OqwError::numerical(e.to_string()))?;
        let mut ok = true;
        let mut got = Vec::new();
        for (&r, v) in rs.iter().zip(vals) {
            let want = r + 2.0 * lambda * (1.0 - r);
            ok &= v.finite().is_some_and(|x| (x - want).abs() <= 1e-3);
            got.push(format!("r={r}: {v:.6} vs {want:.6}", v = v.to_f64()));
        }
        Ok((ok, got.join(", ")))
    });
    ctx.record(g, "doubling N to 120 changes E(t_0) by < 1e-6", || {
        let vals = at_60.as_ref().map_err(|e| oqw_core::OqwError::numerical(e.to_string()))?;
        let w120 = fixtures::example_5_2(0.75, 120)?;
        let w120 = match perturb {
            Some(f) => scaled(&w120, f)?,
            None => w120,
        };
        let big = return_times_5_2(&w120, &rs)?;
        let diff = vals.iter().zip(&big).map(|(a, b)| (a.to_f64() - b.to_f64()).abs()).fold(0.0, f64::max);
        Ok((diff < 1e-6, format!("max change {diff:.2e}")))
    });
    ctx.runtime(g, t0, 10.0);
}

fn criterion_4(ctx: &mut Ctx) {
    let g = "example-5.2-p0.25";
    if !ctx.wants(g) {
        return;
    }
    let t0 = Instant::now();
    let Some(w) = ctx.prepare(g, fixtures::example_5_2(0.25, 40)) else { return };
    ctx.record(g, "P_{0,e2}(t_0 < ∞) = 1", || {
        let o = site(&w, "0")?;
        let v = hitting::passage_probability(&w, o, &diag2(1.0), o)?.value;
        Ok(((v - 1.0).abs() <= 1e-6, format!("{v:.9}")))
    });
    ctx.record(g, "E_{0,e2}(t_0) = 1", || {
        let o = site(&w, "0")?;
        let v = hitting::expected_return_time(&w, o, &diag2(1.0), o)?.value;
        Ok((v.finite().is_some_and(|x| (x - 1.0).abs() <= 1e-6), format!("{v}")))
    });
    ctx.record(g, "P_{0,Id/2}(t_0 < ∞) < 1 − 1e-3", || {
        let o = site(&w, "0")?;
        let v = hitting::passage_probability(&w, o, &diag2(0.5), o)?.value;
        Ok((v < 1.0 - 1e-3, format!("{v:.6}")))
    });
    ctx.record(g, "site 0 is in the mixed case with witnesses", || {
        let o = site(&w, "0")?;
        let v = structure::classify_recurrence(&w, o)?;
        let ok = v.case == RecurrenceCase::Mixed
            && v.witnesses.as_ref().is_some_and(|m| {
                (m.passage_rho - 1.0).abs() <= 1e-6 && m.passage_rho_prime < 1.0 - 1e-3
            });
        let detail = match &v.witnesses {
            Some(m) => format!(
                "{:?}; P(ρ) = {:.9}, P(ρ') = {:.6}",
                v.case, m.passage_rho, m.passage_rho_prime
            ),
            None => format!("{:?}; no witnesses", v.case),
        };
        Ok((ok, detail))
    });
    ctx.runtime(g, t0, 10.0);
}

fn nonnormal_return_error(n: usize, perturb: Option<f64>) -> Result<f64> {
    let mut w = fixtures::example_5_5_nonnormal(n)?;
    if let Some(f) = perturb {
        w = scaled(&w, f)?;
    }
    let o = site(&w, "0")?;
    let p = hitting::passage_operator(&w, o, o)?.dual_identity();
    Ok(linalg::operator_norm(&(p - linalg::identity(2))))
}

fn criterion_5(ctx: &mut Ctx) {
    let g = "example-5.5-nonnormal";
    if !ctx.wants(g) {
        return;
    }
    let t0 = Instant::now();
    let Some(w) = ctx.prepare(g, fixtures::example_5_5_nonnormal(50)) else { return };
    let perturb = ctx.opts.perturb;
    ctx.record(g, "𝔓*_{0,0}(Id) = Id within 2e-2, N = 50", || {
        let err = nonnormal_return_error(50, perturb)?;
        Ok((err <= 2e-2, format!("‖𝔓*(Id) − Id‖ = {err:.4e}")))
    });
    ctx.record(g, "error decreases with N", || {
        let ns = [10, 20, 30, 40, 50];
        let errs: Vec<f64> = ns.iter().map(|&n| nonnormal_return_error(n, perturb)).collect::<Result<_>>()?;
        let ok = errs.windows(2).all(|p| p[1] < p[0]);
        let detail = ns.iter().zip(&errs).map(|(n, e)| format!("N={n}: {e:.3e}")).collect::<Vec<_>>().join(", ");
        Ok((ok, detail))
    });
    ctx.record(g, "Monte Carlo P(t_0 ≤ 10^4) ≥ 0.97, 10^4 trajectories", || {
        let o = site(&w, "0")?;
        let rho = linalg::identity(2) / c(2.0);
        let est = trajectory::estimate_passage(&w, o, &rho, o, 10_000, 10_000, 55)?;
        let p = est.hit_probability.estimate;
        Ok((p >= 0.97, format!("{p:.4} ± {:.4}", est.hit_probability.standard_error)))
    });
    ctx.runtime(g, t0, 60.0);
}

fn criterion_6(ctx: &mut Ctx) {
    let g = "gamblers-ruin";
    if !ctx.wants(g) {
        return;
    }
    let t0 = Instant::now();
    let Some(w) = ctx.prepare(g, fixtures::gamblers_ruin(10, 0.5)) else { return };
    let ids: Vec<String> = (1..=9).map(|k| k.to_string()).collect();
    ctx.record(g, "harmonic measure (i/10, 1 − i/10)", || {
        let d = w.indices_of(&ids)?;
        let mut worst: f64 = 0.0;
        for k in 1..=9 {
            let i = site(&w, &k.to_string())?;
            let m = hitting::harmonic_measure(&w, &d, i, &linalg::identity(1))?;
            let top = m.mass_at("10").unwrap_or(f64::NAN);
            let bottom = m.mass_at("0").unwrap_or(f64::NAN);
            let x = k as f64 / 10.0;
            worst = worst.max((top - x).abs()).max((bottom - (1.0 - x)).abs());
        }
        Ok((worst <= 1e-10, format!("max error {worst:.2e}")))
    });
    ctx.record(g, "Dirichlet A = 0, B = 1_{10} gives Z_i = i/10", || {
        let d = w.indices_of(&ids)?;
        let top = site(&w, "10")?;
        let b = DiagonalObservable::concentrated(&w, top, linalg::identity(1));
        let p = DirichletProblem::new(&w, d.clone(), DiagonalObservable::zeros(&w), b)?;
        let s = dirichlet::solve_dirichlet_domain(&w, &p)?;
        let mut worst: f64 = 0.0;
        for k in 1..=9 {
            let i = site(&w, &k.to_string())?;
            worst = worst.max((s.z.blocks[i][(0, 0)] - c(k as f64 / 10.0)).norm());
        }
        Ok((worst <= 1e-10, format!("max error {worst:.2e}")))
    });
    ctx.runtime(g, t0, 1.0);
}

fn random_hermitian(rng: &mut ChaCha8Rng, d: usize) -> CMatrix {
    let g = CMatrix::from_fn(d, d, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    linalg::hermitian_part(&g)
}

/// The randomized doubly stochastic fixture shared by the Dirichlet checks.
fn dirichlet_ring() -> Result<WalkSpec> {
    Ok(fixtures::quantum_ring(6, 2, 7))
}

fn criterion_7(ctx: &mut Ctx) {
    let g = "quantum-ring";
    if !ctx.wants(g) {
        return;
    }
    let t0 = Instant::now();
    let Some(w) = ctx.prepare(g, dirichlet_ring()) else { return };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let domain: BTreeSet<usize> = [1, 2, 3, 4].into_iter().collect();
    let bd = hitting::boundary(&w, &domain);
    let mut a = DiagonalObservable::zeros(&w);
    let mut b = DiagonalObservable::zeros(&w);
    for &i in &domain {
        a.blocks[i] = random_hermitian(&mut rng, w.dim(i));
    }
    for &j in &bd {
        b.blocks[j] = random_hermitian(&mut rng, w.dim(j));
    }
    let problem = DirichletProblem::new(&w, domain.clone(), a, b);
    let closed = problem.as_ref().map_err(|e| e.to_string()).and_then(|p| {
        dirichlet::solve_dirichlet_domain(&w, p).map_err(|e| e.to_string())
    });
    ctx.record(g, "closed form = variational on D ∪ ∂D within 1e-7", || {
        let p = problem.as_ref().map_err(|e| oqw_core::OqwError::numerical(e.to_string()))?;
        let z = closed.as_ref().map_err(|e| oqw_core::OqwError::numerical(e.clone()))?;
        let tau = model::invariant_state(&w)?
            .state
            .ok_or_else(|| oqw_core::OqwError::numerical("no invariant state"))?;
        let v = dirichlet::variational_solve(&w, &tau, p)?;
        let diff = domain
            .iter()
            .chain(&bd)
            .map(|&i| linalg::max_abs(&(&v.z.blocks[i] - &z.z.blocks[i])))
            .fold(0.0, f64::max);
        Ok((diff <= 1e-7, format!("max difference {diff:.2e} ({:?})", v.method)))
    });
    ctx.record(g, "residual of (Id − 𝔐*)(Z) − A on D < 1e-8", || {
        let z = closed.as_ref().map_err(|e| oqw_core::OqwError::numerical(e.clone()))?;
        Ok((z.max_residual < 1e-8, format!("{:.2e}", z.max_residual)))
    });
    ctx.record(g, "Σ_j I^D_j = Id within 1e-8", || {
        let mut sum = DiagonalObservable::zeros(&w);
        for &j in &bd {
            sum = sum.add(&dirichlet::harmonic_operator(&w, &domain, j)?);
        }
        let err = domain
            .iter()
            .chain(&bd)
            .map(|&i| linalg::max_abs(&(&sum.blocks[i] - linalg::identity(w.dim(i)))))
            .fold(0.0, f64::max);
        Ok((err <= 1e-8, format!("max entry error {err:.2e}")))
    });
    ctx.runtime(g, t0, 5.0);
}

fn criterion_8(ctx: &mut Ctx) {
    let g = "quantum-ring";
    if !ctx.wants(g) {
        return;
    }
    let Some(w) = ctx.prepare(g, dirichlet_ring()) else { return };
    ctx.record(g, "ℰ(X) = ½‖∇X‖² for 20 random Hermitian X", || {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let tau = dirichlet::identity_reference(&w);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let x = DiagonalObservable {
                blocks: w.dims().iter().map(|&d| random_hermitian(&mut rng, d)).collect(),
            };
            let form = dirichlet::dirichlet_energy(&w, &tau, &x)?;
            let grad = dirichlet::gradient_form(&w, &x)?.energy;
            worst = worst.max((form - grad).abs());
        }
        Ok((worst <= 1e-10, format!("max difference {worst:.2e}")))
    });
}

fn criterion_9(ctx: &mut Ctx) {
    let g = "kac:example-5.4";
    if !ctx.wants(g) {
        return;
    }
    let t0 = Instant::now();
    let Some(w) = ctx.prepare(g, Ok(fixtures::example_5_4())) else { return };
    ctx.record(g, "t_1^(k)/k at k = 2000 matches (Tr τ(1))^-1 within 3σ", || {
        let one = site(&w, "1")?;
        let r = trajectory::estimate_kac(&w, one, 1000, 2000, 2_000_000, 9)?;
        Ok((
            r.within_3_sigma,
            format!(
                "{:.4} ± {:.4} vs {:.4} (z = {:.2})",
                r.empirical.estimate, r.empirical.standard_error, r.target, r.z_score
            ),
        ))
    });
    ctx.runtime(g, t0, 60.0);
}

/// Wynn's ε-algorithm. Returns the even-column entry whose last two
/// values agree best, with that disagreement.
pub fn wynn_epsilon(s: &[f64]) -> (f64, f64) {
    let n = s.len();
    let mut best = (s[n - 1], if n >= 2 { (s[n - 1] - s[n - 2]).abs() } else { f64::INFINITY });
    let mut prev = vec![0.0; n + 1];
    let mut cur = s.to_vec();
    let mut k = 0;
    while cur.len() >= 2 {
        k += 1;
        let next: Vec<f64> = (0..cur.len() - 1)
            .map(|m| {
                let d = cur[m + 1] - cur[m];
                prev[m + 1] + if d == 0.0 { f64::INFINITY } else { 1.0 / d }
            })
            .collect();
        if k % 2 == 0 && next.len() >= 2 {
            let last = next[next.len() - 1];
            let err = (last - next[next.len() - 2]).abs();
            if last.is_finite() && err < best.1 {
                best = (last, err);
            }
        }
        prev = cur;
        cur = next;
    }
    best
}

/// Path enumeration of growing length, extrapolated, until three successive
/// extrapolations agree or the node budget runs out.
fn path_sum_estimate(w: &WalkSpec, i: usize, rho: &CMatrix, j: usize, taboo: &BTreeSet<usize>) -> Result<(f64, usize)> {
    let mut history: Vec<f64> = Vec::new();
    let mut best = None;
    let mut len = 4;
    while len <= 80 {
        let p = match hitting::brute_force_path_sum(w, i, rho, j, taboo, len, DEFAULT_NODE_BUDGET) {
            Ok(p) => p,
            Err(e) if best.is_none() => return Err(e),
            Err(_) => break,
        };
        // Periodic walks contribute only at some lengths; repeated partial
        // sums would put zero differences into the ε-table.
        let mut seq = p.partial.clone();
        seq.dedup();
        let est = wynn_epsilon(&seq).0;
        history.push(est);
        best = Some((est, len));
        if let [.., a, b, c] = history[..] {
            let scale = c.abs().max(1.0);
            if (c - b).abs() <= 1e-13 * scale && (b - a).abs() <= 1e-13 * scale {
                break;
            }
        }
        len += 2;
    }
    Ok(best.expect("at least one enumeration"))
}

fn criterion_10(ctx: &mut Ctx) {
    for (label, name, n) in ORACLE_FIXTURES {
        let g = format!("oracle:{label}");
        if !ctx.wants(&g) {
            continue;
        }
        let params = crate::catalog::FixtureParams { n, ..Default::default() };
        let built = crate::catalog::build(name, &params).expect("oracle fixtures are builtin");
        let Some(w) = ctx.prepare(&g, built) else { continue };
        // Pairs whose first-passage interior converges fast enough.
        let mut pairs = Vec::new();
        let mut skipped = 0;
        for i in 0..w.n_sites() {
            for j in 0..w.n_sites() {
                match hitting::taboo_operator(&w, i, j, &first_passage_taboo(j)) {
                    Ok(op) if op.diagnostics.spectral_radius < ORACLE_RADIUS => pairs.push((i, j, op)),
                    _ => skipped += 1,
                }
            }
        }
        ctx.record(&g, "taboo operator = extrapolated path sums within 1e-9", || {
            let mut worst: f64 = 0.0;
            let mut max_len = 0;
            for (i, j, op) in &pairs {
                let d = w.dim(*i);
                let mut states = vec![linalg::identity(d) / c(d as f64)];
                states.push(linalg::projector(&linalg::basis_vector(d, d - 1)));
                for rho in &states {
                    let exact = op.apply(rho).trace().re;
                    let (est, len) = path_sum_estimate(&w, *i, rho, *j, &first_passage_taboo(*j))?;
                    worst = worst.max((est - exact).abs());
                    max_len = max_len.max(len);
                }
            }
            Ok((
                worst <= ORACLE_TOL,
                format!(
                    "{} pairs ({skipped} above radius {ORACLE_RADIUS}), paths up to length {max_len}, max error {worst:.2e}",
                    pairs.len()
                ),
            ))
        });
        ctx.record(&g, "Monte Carlo hitting probabilities within 3σ", || {
            let stride = pairs.len().div_ceil(MC_PAIRS).max(1);
            let mut worst_z: f64 = 0.0;
            let mut count = 0;
            let mut ok = true;
            for (k, (i, j, op)) in pairs.iter().enumerate().filter(|(k, _)| k % stride == 0) {
                let d = w.dim(*i);
                let rho = linalg::identity(d) / c(d as f64);
                let exact = op.apply(&rho).trace().re;
                let est = trajectory::estimate_passage(&w, *i, &rho, *j, MC_TRAJ, MC_HORIZON, 1000 + k as u64)?;
                let h = &est.hit_probability;
                let diff = (h.estimate - exact).abs();
                ok &= diff <= 3.0 * h.standard_error + ORACLE_TOL;
                if h.standard_error > 0.0 {
                    worst_z = worst_z.max(diff / h.standard_error);
                }
                count += 1;
            }
            Ok((ok, format!("{count} pairs, {MC_TRAJ} trajectories each, max z {worst_z:.2}")))
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wynn_sums_a_geometric_series_exactly() {
        let partial: Vec<f64> = (1..=6).map(|n| (0..n).map(|k| 0.8f64.powi(k)).sum()).collect();
        let (v, _) = wynn_epsilon(&partial);
        assert!((v - 5.0).abs() < 1e-12, "{v}");
        // Two modes need five terms.
        let partial: Vec<f64> = (1..=7)
            .map(|n| (0..n).map(|k| 0.9f64.powi(k) - 0.5 * (-0.6f64).powi(k)).sum())
            .collect();
        let want = 10.0 - 0.5 / 1.6;
        assert!((wynn_epsilon(&partial).0 - want).abs() < 1e-10);
    }

    #[test]
    fn wynn_handles_finite_sums() {
        let (v, _) = wynn_epsilon(&[0.25, 0.5, 0.5, 0.5]);
        assert_eq!(v, 0.5);
    }

    #[test]
    fn only_filter_runs_one_group() {
        let opts = SuiteOptions { only: Some("example-5.1".into()), perturb: None };
        let r = run_fixture_suite(&opts);
        assert_eq!(r.lines.len(), 5);
        assert!(r.passed(), "{:?}", r.lines);
        assert!(r.lines[0].check == "validate");
    }

    #[test]
    fn perturbed_fixture_fails_validation() {
        let opts = SuiteOptions { only: Some("example-5.1".into()), perturb: Some(1.001) };
        let r = run_fixture_suite(&opts);
        assert!(!r.lines[0].passed);
        assert_eq!(r.lines[0].check, "validate");
    }
}
