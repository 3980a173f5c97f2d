//! Seeded Monte Carlo sampling of the quantum trajectory `(x_n, ρ_n)`.
//!
//! Trajectory `k` of a run with master seed `s` draws from the ChaCha8
//! stream `k` of seed `s`, so results do not depend on the thread count.

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{OqwError, Result};
use crate::hitting;
use crate::io;
use crate::linalg::{self, c, CMatrix};
use crate::model::{self, DiagonalObservable, WalkSpec};
use crate::structure;

/// Transition probabilities below this are treated as zero.
pub const NEGLIGIBLE: f64 = 1e-14;
/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

pub fn stream_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Runs `f(k, rng_k)` for `k < n` in parallel and returns results in index order.
pub fn par_runs<T: Send>(n: usize, seed: u64, f: impl Fn(usize, &mut ChaCha8Rng) -> T + Sync) -> Vec<T> {
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k);
            f(k, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Moved {
        site: usize,
        state: CMatrix,
        /// Outgoing probabilities summed to something other than 1.
        renormalized: bool,
    },
    /// The missing mass of a leaky site was drawn.
    Left,
}

/// One step of the chain from `(j, ρ)`: site `i` with probability
/// `Tr(L_{i,j} ρ L_{i,j}^†)`, new state `L ρ L^† / Tr(·)`. Successors are
/// scanned in index order.
pub fn sample_step(walk: &WalkSpec, j: usize, rho: &CMatrix, rng: &mut impl Rng) -> Result<Step> {
    let mut outs = Vec::new();
    let mut total = 0.0;
    for i in walk.successors(j) {
        let l = walk.transition(i, j).expect("successor has a transition");
        let out = l * rho * l.adjoint();
        let p = out.trace().re;
        if p >= NEGLIGIBLE {
            total += p;
            outs.push((i, p, out));
        }
    }
    let leaky = walk.is_leaky(j);
    if outs.is_empty() {
        if leaky {
            return Ok(Step::Left);
        }
        return Err(OqwError::numerical(format!("dead end: no transition out of {} has positive probability", walk.site_id(j))));
    }
    let renormalized = !leaky && (total - 1.0).abs() > walk.tolerance.max(1e-9);
    let u: f64 = rng.random();
    let u = if leaky { u } else { u * total };
    let mut acc = 0.0;
    for (k, (i, p, out)) in outs.iter().enumerate() {
        acc += p;
        if u < acc || (!leaky && k + 1 == outs.len()) {
            let state = linalg::hermitian_part(&(out / c(*p)));
            let tr = state.trace().re;
            return Ok(Step::Moved { site: *i, state: state / c(tr), renormalized });
        }
    }
    Ok(Step::Left)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum StopRule {
    /// Run for the full horizon.
    #[default]
    Horizon,
    /// Stop at `t_j = inf{n ≥ 1 : x_n = j}`.
    HitSite(usize),
    /// Stop at `t_∂D`, the first time the walk is outside `D`.
    ExitDomain(BTreeSet<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Horizon,
    HitTarget,
    ExitedDomain,
    /// Left the truncation window through a leaky site.
    LeftWindow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub index: usize,
    /// `x_0, ..., x_T`.
    pub sites: Vec<usize>,
    /// `ρ_0, ..., ρ_T` when requested.
    pub states: Option<Vec<CMatrix>>,
    pub stop_reason: StopReason,
    /// Number of steps taken, `T`.
    pub stop_index: usize,
    pub renormalized_steps: usize,
}

impl TrajectoryRecord {
    pub fn to_value(&self, walk: &WalkSpec) -> Value {
        let mut v = json!({
            "index": self.index,
            "sites": self.sites.iter().map(|&s| walk.site_id(s)).collect::<Vec<_>>(),
            "stop_reason": self.stop_reason,
            "stop_index": self.stop_index,
        });
        if self.renormalized_steps > 0 {
            v["renormalized_steps"] = json!(self.renormalized_steps);
        }
        if let Some(states) = &self.states {
            v["states"] = json!(states.iter().map(io::matrix_to_json).collect::<Vec<_>>());
        }
        v
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl(walk: &WalkSpec, records: &[TrajectoryRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, &r.to_value(walk))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn check_stop(walk: &WalkSpec, i: usize, stop: &StopRule) -> Result<()> {
    match stop {
        StopRule::Horizon => Ok(()),
        StopRule::HitSite(j) if *j < walk.n_sites() => Ok(()),
        StopRule::HitSite(_) => Err(OqwError::Input("stop site out of range".into())),
        StopRule::ExitDomain(d) => {
            if !d.contains(&i) {
                return Err(OqwError::Input(format!("start site {} is not in the domain", walk.site_id(i))));
            }
            if d.iter().any(|&k| k >= walk.n_sites()) {
                return Err(OqwError::Input("domain contains an unknown site".into()));
            }
            Ok(())
        }
    }
}

pub fn sample_trajectory(
    walk: &WalkSpec,
    i: usize,
    rho: &CMatrix,
    horizon: usize,
    stop: &StopRule,
    keep_states: bool,
    rng: &mut impl Rng,
) -> Result<TrajectoryRecord> {
    if horizon == 0 {
        return Err(OqwError::Input("horizon must be at least 1".into()));
    }
    hitting::check_state(walk, i, rho)?;
    check_stop(walk, i, stop)?;
    run_one(walk, i, rho, horizon, stop, keep_states, 0, rng)
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    walk: &WalkSpec,
    i: usize,
    rho: &CMatrix,
    horizon: usize,
    stop: &StopRule,
    keep_states: bool,
    index: usize,
    rng: &mut impl Rng,
) -> Result<TrajectoryRecord> {
    let mut sites = vec![i];
    let mut states = keep_states.then(|| vec![rho.clone()]);
    let mut site = i;
    let mut state = rho.clone();
    let mut renormalized_steps = 0;
    let mut reason = StopReason::Horizon;
    for _ in 0..horizon {
        match sample_step(walk, site, &state, rng)? {
            Step::Left => {
                reason = StopReason::LeftWindow;
                break;
            }
            Step::Moved { site: next, state: s, renormalized } => {
                renormalized_steps += usize::from(renormalized);
                site = next;
                state = s;
                sites.push(site);
                if let Some(v) = states.as_mut() {
                    v.push(state.clone());
                }
                let stopped = match stop {
                    StopRule::Horizon => None,
                    StopRule::HitSite(j) => (site == *j).then_some(StopReason::HitTarget),
                    StopRule::ExitDomain(d) => (!d.contains(&site)).then_some(StopReason::ExitedDomain),
                };
                if let Some(r) = stopped {
                    reason = r;
                    break;
                }
            }
        }
    }
    Ok(TrajectoryRecord {
        index,
        stop_index: sites.len() - 1,
        sites,
        states,
        stop_reason: reason,
        renormalized_steps,
    })
}

/// `n_traj` independent trajectories from stream indices `0..n_traj`.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    walk: &WalkSpec,
    i: usize,
    rho: &CMatrix,
    horizon: usize,
    stop: &StopRule,
    keep_states: bool,
    n_traj: usize,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    if horizon == 0 || n_traj == 0 {
        return Err(OqwError::Input("horizon and trajectory count must be at least 1".into()));
    }
    hitting::check_state(walk, i, rho)?;
    check_stop(walk, i, stop)?;
    par_runs(n_traj, seed, |k, rng| run_one(walk, i, rho, horizon, stop, keep_states, k, rng))
        .into_iter()
        .collect()
}

/// Sample mean with a normal-approximation confidence interval.
#[derive(Clone, Debug, Serialize)]
pub struct EstimateWithCI {
    pub estimate: f64,
    pub standard_error: f64,
    pub samples: usize,
    pub confidence_level: f64,
    pub lower: f64,
    pub upper: f64,
}

impl EstimateWithCI {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = if n == 0 { f64::NAN } else { xs.iter().sum::<f64>() / n as f64 };
        let se = if n < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        EstimateWithCI {
            estimate: mean,
            standard_error: se,
            samples: n,
            confidence_level: 0.95,
            lower: mean - Z95 * se,
            upper: mean + Z95 * se,
        }
    }

    /// `|estimate − exact|` in units of the standard error; exact agreement
    /// with zero error counts as 0 and any other zero-error miss as ∞.
    pub fn z_score(&self, exact: f64) -> f64 {
        let d = (self.estimate - exact).abs();
        if self.standard_error > 0.0 {
            d / self.standard_error
        } else if d <= 1e-12 * exact.abs().max(1.0) {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn within_sigmas(&self, exact: f64, k: f64) -> bool {
        self.z_score(exact) <= k
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HittingEstimate {
    pub target: String,
    pub horizon: usize,
    /// `P(t_j ≤ horizon)`.
    pub hit_probability: EstimateWithCI,
    /// `E(t_j ∧ horizon)`: unhit trajectories contribute `horizon`.
    pub censored_time: EstimateWithCI,
    /// `E(t_j | t_j ≤ horizon)`, absent when nothing hit.
    pub time_given_hit: Option<EstimateWithCI>,
    /// `E(#{1 ≤ n ≤ horizon : x_n = j})`; only when trajectories ran to the
    /// horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub censored_visits: Option<EstimateWithCI>,
    /// Fraction of trajectories that did not hit within the horizon.
    pub censored_fraction: f64,
    pub left_window: usize,
}

/// Hitting statistics from trajectories run to the full horizon, which
/// also yields the censored visit count.
pub fn estimate_hitting(
    walk: &WalkSpec,
    i: usize,
    rho: &CMatrix,
    j: usize,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<HittingEstimate> {
    hitting_statistics(walk, i, rho, j, n_traj, horizon, seed, true)
}

/// Same streams as [`estimate_hitting`], but each trajectory stops at `t_j`,
/// so the visit count is not available. Much cheaper for long horizons.
pub fn estimate_passage(
    walk: &WalkSpec,
    i: usize,
    rho: &CMatrix,
    j: usize,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<HittingEstimate> {
    hitting_statistics(walk, i, rho, j, n_traj, horizon, seed, false)
}

#[allow(clippy::too_many_arguments)]
fn hitting_statistics(
    walk: &WalkSpec,
    i: usize,
    rho: &CMatrix,
    j: usize,
    n_traj: usize,
    horizon: usize,
    seed: u64,
    full: bool,
) -> Result<HittingEstimate> {
    if j >= walk.n_sites() {
        return Err(OqwError::Input("target site out of range".into()));
    }
    let stop = if full { StopRule::Horizon } else { StopRule::HitSite(j) };
    let records = simulate(walk, i, rho, horizon, &stop, false, n_traj, seed)?;
    let mut hits = Vec::with_capacity(n_traj);
    let mut times = Vec::with_capacity(n_traj);
    let mut hit_times = Vec::new();
    let mut visits = Vec::with_capacity(n_traj);
    let mut left = 0;
    for r in &records {
        let t = r.sites.iter().skip(1).position(|&s| s == j).map(|p| p + 1);
        hits.push(if t.is_some() { 1.0 } else { 0.0 });
        times.push(t.unwrap_or(horizon) as f64);
        if let Some(t) = t {
            hit_times.push(t as f64);
        }
        visits.push(r.sites.iter().skip(1).filter(|&&s| s == j).count() as f64);
        // A trajectory stopped at the hit cannot have left afterwards.
        left += usize::from(r.stop_reason == StopReason::LeftWindow);
    }
    let hit_probability = EstimateWithCI::from_samples(&hits);
    Ok(HittingEstimate {
        target: walk.site_id(j).to_string(),
        horizon,
        censored_fraction: 1.0 - hit_probability.estimate,
        hit_probability,
        censored_time: EstimateWithCI::from_samples(&times),
        time_given_hit: (!hit_times.is_empty()).then(|| EstimateWithCI::from_samples(&hit_times)),
        censored_visits: full.then(|| EstimateWithCI::from_samples(&visits)),
        left_window: left,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct KacEstimate {
    pub site: String,
    pub k: usize,
    /// Empirical `t_i^{(k)}/k` over trajectories that completed `k` returns.
    pub empirical: EstimateWithCI,
    /// `(Tr τ^inv(i))^{-1}`.
    pub target: f64,
    pub z_score: f64,
    pub within_3_sigma: bool,
    /// Trajectories stopped by the step cap before the `k`-th return.
    pub censored: usize,
}

/// Empirical `t_i^{(k)}/k` from `(i, τ(i)/Tr τ(i))` against `(Tr τ^inv(i))^{-1}`.
/// Each trajectory is capped at `max_steps`.
pub fn estimate_kac(walk: &WalkSpec, i: usize, n_traj: usize, k: usize, max_steps: usize, seed: u64) -> Result<KacEstimate> {
    if i >= walk.n_sites() {
        return Err(OqwError::Input("site out of range".into()));
    }
    if n_traj == 0 || k == 0 {
        return Err(OqwError::Input("trajectory count and k must be at least 1".into()));
    }
    if !structure::is_irreducible(walk)?.0 {
        return Err(OqwError::Precondition(
            "Kac limit needs an irreducible walk; this one is reducible (see structure::decompose)".into(),
        ));
    }
    let tau = model::invariant_state(walk)?
        .state
        .ok_or_else(|| OqwError::Precondition("walk has no invariant state".into()))?;
    let mass = tau.blocks[i].trace().re;
    if mass <= 1e-12 {
        return Err(OqwError::Precondition(format!("invariant state has no mass at {}", walk.site_id(i))));
    }
    let rho = linalg::hermitian_part(&(&tau.blocks[i] / c(mass)));
    let outcomes: Vec<Option<f64>> = par_runs(n_traj, seed, |_, rng| {
        let mut site = i;
        let mut state = rho.clone();
        let mut returns = 0;
        for n in 1..=max_steps {
            match sample_step(walk, site, &state, rng) {
                Ok(Step::Moved { site: s, state: st, .. }) => {
                    site = s;
                    state = st;
                    if site == i {
                        returns += 1;
                        if returns == k {
                            return Some(n as f64 / k as f64);
                        }
                    }
                }
                _ => return None,
            }
        }
        None
    });
    let done: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let censored = outcomes.len() - done.len();
    let empirical = EstimateWithCI::from_samples(&done);
    let target = 1.0 / mass;
    let z_score = empirical.z_score(target);
    Ok(KacEstimate {
        site: walk.site_id(i).to_string(),
        k,
        within_3_sigma: z_score <= 3.0 && censored == 0,
        z_score,
        target,
        empirical,
        censored,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MartingaleReport {
    pub m0: f64,
    /// Empirical `E[m_n]` for `n = 0..=horizon` (stopped process).
    pub means: Vec<f64>,
    pub standard_errors: Vec<f64>,
    /// `max_n |E[m_n] − m_0|`.
    pub max_drift: f64,
    /// `max_n |E[m_n] − m_0| / se_n` over steps with positive error.
    pub max_z: f64,
    pub within_3_sigma: bool,
    /// `‖(𝔐*(A) − A)_k‖` maximized over the sites where harmonicity is required.
    pub harmonic_residual: f64,
}

/// Tracks `m_n = Tr(ρ_n A_{x_n})`, stopped by `stop`. `A` must be harmonic on
/// every site (or on `D` when stopping at exit from `D`).
#[allow(clippy::too_many_arguments)]
pub fn martingale_diagnostic(
    walk: &WalkSpec,
    a: &DiagonalObservable,
    i: usize,
    rho: &CMatrix,
    n_traj: usize,
    horizon: usize,
    stop: &StopRule,
    seed: u64,
) -> Result<MartingaleReport> {
    a.check(walk)?;
    let defect = model::dual_apply(walk, a)?.sub(a);
    let checked: Vec<usize> = match stop {
        StopRule::ExitDomain(d) => d.iter().copied().collect(),
        _ => (0..walk.n_sites()).collect(),
    };
    let harmonic_residual = checked.iter().map(|&k| linalg::operator_norm(&defect.blocks[k])).fold(0.0, f64::max);
    let tol = 1e-8 * a.max_block_norm().max(1.0);
    if harmonic_residual > tol {
        return Err(OqwError::Precondition(format!(
            "observable is not harmonic (residual {harmonic_residual:.3e})"
        )));
    }
    let records = simulate(walk, i, rho, horizon, stop, true, n_traj, seed)?;
    let value = |site: usize, state: &CMatrix| (state * &a.blocks[site]).trace().re;
    let m0 = value(i, rho);
    let mut columns = vec![Vec::with_capacity(n_traj); horizon + 1];
    for r in &records {
        let states = r.states.as_ref().expect("states kept");
        let mut last = m0;
        for (n, col) in columns.iter_mut().enumerate() {
            if n < r.sites.len() {
                last = value(r.sites[n], &states[n]);
            } else if r.stop_reason == StopReason::LeftWindow {
                last = 0.0;
            }
            col.push(last);
        }
    }
    let mut means = Vec::with_capacity(horizon + 1);
    let mut standard_errors = Vec::with_capacity(horizon + 1);
    let mut max_drift: f64 = 0.0;
    let mut max_z: f64 = 0.0;
    let mut ok = true;
    for col in &columns {
        let e = EstimateWithCI::from_samples(col);
        let drift = (e.estimate - m0).abs();
        max_drift = max_drift.max(drift);
        let z = e.z_score(m0);
        if z.is_finite() {
            max_z = max_z.max(z);
        }
        ok &= drift <= 1e-10 * m0.abs().max(1.0) || z <= 3.0;
        means.push(e.estimate);
        standard_errors.push(e.standard_error);
    }
    Ok(MartingaleReport { m0, means, standard_errors, max_drift, max_z, within_3_sigma: ok, harmonic_residual })
}
