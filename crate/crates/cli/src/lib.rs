//! Command-line front end: walk ingestion, every computation as a subcommand,
//! builtin fixtures and the fixture suite.
//!
//! Every result document has the shape
//! `{"value" | "measure" | "solution": ..., "diagnostics": {...}, "walk_digest": "..."}`.
//! Exit codes: 0 success, 1 input or usage error, 2 numerical error.

pub mod catalog;
pub mod rho;
pub mod suite;
pub mod table;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use oqw_core::dirichlet::{self, DirichletProblem};
use oqw_core::hitting::{self, Diagnostics};
use oqw_core::model::{self, ValidationReport};
use oqw_core::structure;
use oqw_core::trajectory::{self, EstimateWithCI, StopReason, StopRule};
use oqw_core::{io, DiagonalObservable, OqwError, Result, WalkSpec};
use serde_json::{json, Map, Value};

pub use catalog::{FixtureInfo, FixtureParams, CATALOG};
pub use rho::{parse_rho, ParsedRho};
pub use suite::{run_fixture_suite, SuiteLine, SuiteOptions};

#[derive(Parser, Debug)]
#[command(
    name = "oqw",
    version,
    about = "Hitting probabilities, visits, return times, Dirichlet problems and trajectories for open quantum walks"
)]
pub struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Worker threads for Monte Carlo runs (default: one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

/// Parameters of builtin fixtures.
#[derive(Args, Debug, Clone, Default)]
pub struct ParamArgs {
    /// Step probability (example-5.2, gamblers-ruin, leaky-biased-line)
    #[arg(long)]
    pub p: Option<f64>,
    /// Truncation size, or the number of sites for rings and cycles.
    #[arg(long = "N")]
    pub n: Option<usize>,
    /// Right-step probability of the first fiber direction (example-5.5-normal)
    #[arg(long)]
    pub p1: Option<f64>,
    /// Right-step probability of the second fiber direction (example-5.5-normal)
    #[arg(long)]
    pub p2: Option<f64>,
    /// Fiber dimension (quantum-ring).
    #[arg(long)]
    pub d: Option<usize>,
    /// Seed of randomized fixtures (quantum-ring).
    #[arg(long = "fixture-seed")]
    pub fixture_seed: Option<u64>,
}

impl ParamArgs {
    fn params(&self) -> FixtureParams {
        FixtureParams {
            p: self.p,
            n: self.n,
            p1: self.p1,
            p2: self.p2,
            d: self.d,
            seed: self.fixture_seed,
        }
    }

    fn any(&self) -> bool {
        self.p.is_some()
            || self.n.is_some()
            || self.p1.is_some()
            || self.p2.is_some()
            || self.d.is_some()
            || self.fixture_seed.is_some()
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct WalkArgs {
    /// Walk JSON file, `-` for stdin, a builtin fixture name, or `dilation:<file>`.
    #[arg(long)]
    pub walk: Option<String>,
    #[command(flatten)]
    pub params: ParamArgs,
    /// Override the walk's stochasticity tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct StartArgs {
    /// Starting site id.
    #[arg(long)]
    pub from: String,
    /// Initial internal state: `diag:a,b,...`, `pure:v1,v2,...`, `mixed`, or a JSON matrix file.
    #[arg(long, default_value = "mixed")]
    pub rho: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirichletMethod {
    ClosedForm,
    Variational,
    Global,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check that the transition operators define a valid walk.
    Validate {
        #[command(flatten)]
        walk: WalkArgs,
    },
    /// Irreducibility, invariant state, detailed balance and recurrence class.
    Info {
        #[command(flatten)]
        walk: WalkArgs,
        /// Site to classify (default: the first site).
        #[arg(long)]
        site: Option<String>,
    },
    /// Probability of ever reaching `--to`.
    Hit {
        #[command(flatten)]
        walk: WalkArgs,
        #[command(flatten)]
        start: StartArgs,
        /// Target site id
        #[arg(long)]
        to: String,
        /// Also report the damped probabilities at these α values.
        #[arg(long = "alpha-grid")]
        alpha_grid: Option<String>,
    },
    /// Expected number of visits to `--to` (times n ≥ 1).
    Visits {
        #[command(flatten)]
        walk: WalkArgs,
        #[command(flatten)]
        start: StartArgs,
        /// Target site id
        #[arg(long)]
        to: String,
    },
    /// Expected first passage time to `--to`.
    ReturnTime {
        #[command(flatten)]
        walk: WalkArgs,
        #[command(flatten)]
        start: StartArgs,
        /// Target site id
        #[arg(long)]
        to: String,
    },
    /// Probability of leaving the domain.
    Exit {
        #[command(flatten)]
        walk: WalkArgs,
        #[command(flatten)]
        start: StartArgs,
        /// Site ids, comma separated; integer ranges `a..b` are inclusive.
        #[arg(long)]
        domain: String,
    },
    /// Exit distribution over the boundary of the domain.
    Harmonic {
        #[command(flatten)]
        walk: WalkArgs,
        #[command(flatten)]
        start: StartArgs,
        #[arg(long)]
        domain: String,
    },
    /// Expected visits to `--to` before leaving the domain.
    DomainVisits {
        #[command(flatten)]
        walk: WalkArgs,
        #[command(flatten)]
        start: StartArgs,
        #[arg(long)]
        domain: String,
        /// Target site id
        #[arg(long)]
        to: String,
    },
    /// Solve a Dirichlet problem read from `--problem`.
    Dirichlet {
        #[command(flatten)]
        walk: WalkArgs,
        /// `{"domain": [ids], "A": {id: matrix}, "B": {id: matrix}}`, optionally with a `"walk"` entry.
        /// For `--method global` only `"A"` is used.
        #[arg(long)]
        problem: PathBuf,
        #[arg(long, value_enum, default_value_t = DirichletMethod::ClosedForm)]
        method: DirichletMethod,
    },
    /// Dirichlet form of an observable under the invariant state.
    Dform {
        #[command(flatten)]
        walk: WalkArgs,
        /// `identity` or a JSON file `{id: matrix}`.
        #[arg(long)]
        observable: String,
    },
    /// Sample quantum trajectories.
    Simulate {
        #[command(flatten)]
        walk: WalkArgs,
        #[command(flatten)]
        start: StartArgs,
        #[arg(long, default_value_t = 1000)]
        horizon: usize,
        #[arg(long = "n-traj", default_value_t = 1000)]
        n_traj: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stop at the first visit to this site and estimate hitting statistics.
        #[arg(long)]
        to: Option<String>,
        /// Stop when leaving this domain and estimate the exit distribution.
        #[arg(long)]
        domain: Option<String>,
        /// Write every trajectory as one JSON line to this file.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Include conditioned internal states in the dump.
        #[arg(long)]
        states: bool,
    },
    /// Empirical k-th return time per return against the invariant-state formula.
    Kac {
        #[command(flatten)]
        walk: WalkArgs,
        #[arg(long)]
        site: String,
        #[arg(long = "n-traj", default_value_t = 1000)]
        n_traj: usize,
        #[arg(long, default_value_t = 2000)]
        k: usize,
        /// Step cap per trajectory (default 1000·k).
        #[arg(long = "max-steps")]
        max_steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Builtin walks.
    Fixtures {
        #[command(subcommand)]
        action: FixturesAction,
    },
    /// Run the fixture suite and print one PASS/FAIL line per check.
    Suite {
        /// Restrict to one fixture group, or to a criterion number.
        #[arg(long)]
        only: Option<String>,
        /// Scale every transition operator by this factor before checking.
        #[arg(long)]
        perturb: Option<f64>,
    },
}

#[derive(Subcommand, Debug)]
pub enum FixturesAction {
    List,
    /// Print a fixture as a walk JSON document.
    Emit {
        name: String,
        #[command(flatten)]
        params: ParamArgs,
    },
}

impl Command {
    fn walk_args(&self) -> Option<&WalkArgs> {
        match self {
            Command::Validate { walk }
            | Command::Info { walk, .. }
            | Command::Hit { walk, .. }
            | Command::Visits { walk, .. }
            | Command::ReturnTime { walk, .. }
            | Command::Exit { walk, .. }
            | Command::Harmonic { walk, .. }
            | Command::DomainVisits { walk, .. }
            | Command::Dirichlet { walk, .. }
            | Command::Dform { walk, .. }
            | Command::Simulate { walk, .. }
            | Command::Kac { walk, .. } => Some(walk),
            Command::Fixtures { .. } | Command::Suite { .. } => None,
        }
    }
}

/// What a subcommand produced: a document for stdout, warnings for stderr and
/// the exit code.
struct Outcome {
    doc: Value,
    raw: bool,
    warnings: Vec<String>,
    code: i32,
}

impl Outcome {
    fn ok(doc: Value, warnings: Vec<String>) -> Self {
        Outcome { doc, raw: false, warnings, code: 0 }
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I, stdin: &mut dyn Read, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let stdin_text = match cli.command.walk_args().and_then(|w| w.walk.as_deref()) {
        Some("-") => {
            let mut s = String::new();
            if let Err(e) = stdin.read_to_string(&mut s) {
                let _ = writeln!(err, "error: cannot read stdin: {e}");
                return 1;
            }
            Some(s)
        }
        _ => None,
    };
    let result = match cli.threads {
        Some(0) => Err(OqwError::Input("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli.command, stdin_text.as_deref())),
            Err(e) => Err(OqwError::Input(format!("cannot start thread pool: {e}"))),
        },
        None => dispatch(&cli.command, stdin_text.as_deref()),
    };
    match result {
        Ok(outcome) => {
            for w in &outcome.warnings {
                let _ = writeln!(err, "warning: {w}");
            }
            let text = if outcome.raw {
                match &outcome.doc {
                    Value::String(s) => s.clone(),
                    v => serde_json::to_string_pretty(v).expect("documents serialize"),
                }
            } else {
                match cli.format {
                    Format::Json => serde_json::to_string_pretty(&outcome.doc).expect("documents serialize"),
                    Format::Table => suite_table(&outcome.doc).unwrap_or_else(|| table::render(&outcome.doc)),
                }
            };
            let _ = writeln!(out, "{}", text.trim_end());
            outcome.code
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Suite reports read better as their PASS/FAIL lines.
fn suite_table(doc: &Value) -> Option<String> {
    let lines = doc.get("value")?.get("lines")?.as_array()?;
    let mut s = String::new();
    for l in lines {
        s.push_str(l.get("line")?.as_str()?);
        s.push('\n');
    }
    Some(s)
}

fn load_walk(args: &WalkArgs, stdin_text: Option<&str>) -> Result<WalkSpec> {
    let spec = args.walk.as_deref().ok_or_else(|| OqwError::Input("--walk is required".into()))?;
    load_walk_spec(spec, args, stdin_text, None)
}

/// `base` resolves relative walk paths found inside other files.
fn load_walk_spec(spec: &str, args: &WalkArgs, stdin_text: Option<&str>, base: Option<&Path>) -> Result<WalkSpec> {
    let walk = if spec == "-" {
        io::walk_from_str(stdin_text.unwrap_or(""))?
    } else if let Some(built) = catalog::build(spec, &args.params.params()) {
        built?
    } else {
        if args.params.any() {
            return Err(OqwError::Input(format!("{spec} is not a builtin fixture; fixture parameters do not apply")));
        }
        let mut path = PathBuf::from(spec);
        if let Some(dir) = base {
            if path.is_relative() && !path.exists() {
                path = dir.join(spec);
            }
        }
        if !path.exists() {
            return Err(OqwError::Input(format!(
                "walk {spec:?} is neither a file nor a builtin fixture (see `oqw fixtures list`)"
            )));
        }
        io::read_walk(&path)?
    };
    match args.tol {
        Some(t) if !(t >= 0.0 && t.is_finite()) => Err(OqwError::Input(format!("--tol {t} must be nonnegative"))),
        Some(t) => Ok(walk.with_tolerance(t)),
        None => Ok(walk),
    }
}

/// Comma-separated site ids; `a..b` expands to the integer ids `a, ..., b`.
pub fn parse_sites(walk: &WalkSpec, spec: &str) -> Result<BTreeSet<usize>> {
    let mut ids: Vec<String> = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let parse = |s: &str| {
                s.trim()
                    .parse::<i64>()
                    .map_err(|_| OqwError::Input(format!("range {part:?} needs integer ends")))
            };
            let (a, b) = (parse(a)?, parse(b)?);
            if a > b {
                return Err(OqwError::Input(format!("range {part:?} is empty")));
            }
            ids.extend((a..=b).map(|k| k.to_string()));
        } else {
            ids.push(part.to_string());
        }
    }
    if ids.is_empty() {
        return Err(OqwError::Input("no sites given".into()));
    }
    walk.indices_of(&ids)
}

fn start_state(walk: &WalkSpec, start: &StartArgs) -> Result<(usize, ParsedRho)> {
    let i = walk.index_of(&start.from)?;
    let rho = parse_rho(&start.rho, walk.dim(i))?;
    Ok((i, rho))
}

fn document(key: &str, value: Value, diagnostics: Value, walk: &WalkSpec) -> Value {
    let mut doc = Map::new();
    doc.insert(key.into(), value);
    doc.insert("diagnostics".into(), diagnostics);
    doc.insert("walk_digest".into(), json!(io::walk_digest(walk)));
    Value::Object(doc)
}

fn with_warnings(mut diagnostics: Value, warnings: &[String]) -> Value {
    if !warnings.is_empty() {
        if let Value::Object(map) = &mut diagnostics {
            map.insert("warnings".into(), json!(warnings));
        }
    }
    diagnostics
}

fn diag_value(d: &Diagnostics) -> Value {
    serde_json::to_value(d).expect("diagnostics serialize")
}

fn parse_alpha_grid(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(str::trim)
        .map(|s| {
            let a: f64 = s.parse().map_err(|_| OqwError::Input(format!("α value {s:?} is not a number")))?;
            if a > 0.0 && a < 1.0 {
                Ok(a)
            } else {
                Err(OqwError::Input(format!("α = {a} must lie in (0, 1)")))
            }
        })
        .collect()
}

fn validation_value(report: &ValidationReport) -> Value {
    let residuals: Map<String, Value> = report.residuals.iter().map(|(id, r)| (id.clone(), json!(r))).collect();
    json!({
        "accepted": report.accepted,
        "max_residual": report.max_residual,
        "tolerance": report.tolerance,
        "residuals": residuals,
    })
}

fn ready(args: &WalkArgs, stdin_text: Option<&str>) -> Result<WalkSpec> {
    let walk = load_walk(args, stdin_text)?;
    model::require_valid(&walk)?;
    Ok(walk)
}

fn dispatch(command: &Command, stdin_text: Option<&str>) -> Result<Outcome> {
    match command {
        Command::Validate { walk } => {
            let w = load_walk(walk, stdin_text)?;
            let report = model::validate_walk(&w)?;
            let doc = document("value", validation_value(&report), json!({}), &w);
            Ok(Outcome { code: if report.accepted { 0 } else { 1 }, ..Outcome::ok(doc, vec![]) })
        }
        Command::Info { walk, site } => {
            let w = ready(walk, stdin_text)?;
            info(&w, site.as_deref())
        }
        Command::Hit { walk, start, to, alpha_grid } => {
            let w = ready(walk, stdin_text)?;
            let (i, rho) = start_state(&w, start)?;
            let j = w.index_of(to)?;
            let mut r = hitting::passage_probability(&w, i, &rho.rho, j)?;
            if let Some(grid) = alpha_grid {
                let taboo = hitting::first_passage_taboo(j);
                r.diagnostics.alpha_values = parse_alpha_grid(grid)?
                    .into_iter()
                    .map(|a| {
                        let op = hitting::alpha_operator(&w, i, j, &taboo, a)?;
                        Ok((a, op.apply(&rho.rho).trace().re))
                    })
                    .collect::<Result<_>>()?;
            }
            let diag = with_warnings(diag_value(&r.diagnostics), &rho.warnings);
            Ok(Outcome::ok(document("value", json!(r.value), diag, &w), rho.warnings))
        }
        Command::Visits { walk, start, to } => {
            let w = ready(walk, stdin_text)?;
            let (i, rho) = start_state(&w, start)?;
            let j = w.index_of(to)?;
            let r = hitting::expected_visits(&w, i, &rho.rho, j)?;
            let diag = with_warnings(diag_value(&r.diagnostics), &rho.warnings);
            Ok(Outcome::ok(document("value", json!(r.value), diag, &w), rho.warnings))
        }
        Command::ReturnTime { walk, start, to } => {
            let w = ready(walk, stdin_text)?;
            let (i, rho) = start_state(&w, start)?;
            let j = w.index_of(to)?;
            let r = hitting::expected_return_time(&w, i, &rho.rho, j)?;
            let mut diag = diag_value(&r.diagnostics);
            diag["passage_probability"] = json!(r.passage_probability);
            if let Some(d) = r.alpha_derivative {
                diag["alpha_derivative"] = json!(d);
            }
            let diag = with_warnings(diag, &rho.warnings);
            Ok(Outcome::ok(document("value", json!(r.value), diag, &w), rho.warnings))
        }
        Command::Exit { walk, start, domain } => {
            let w = ready(walk, stdin_text)?;
            let (i, rho) = start_state(&w, start)?;
            let d = parse_sites(&w, domain)?;
            let m = hitting::harmonic_measure(&w, &d, i, &rho.rho)?;
            let diag = with_warnings(json!({ "boundary": boundary_ids(&w, &d) }), &rho.warnings);
            Ok(Outcome::ok(document("value", json!(m.total), diag, &w), rho.warnings))
        }
        Command::Harmonic { walk, start, domain } => {
            let w = ready(walk, stdin_text)?;
            let (i, rho) = start_state(&w, start)?;
            let d = parse_sites(&w, domain)?;
            let m = hitting::harmonic_measure(&w, &d, i, &rho.rho)?;
            let diag = with_warnings(
                json!({ "total": m.total, "boundary": boundary_ids(&w, &d) }),
                &rho.warnings,
            );
            let measure = serde_json::to_value(&m.masses).expect("measure serializes");
            Ok(Outcome::ok(document("measure", measure, diag, &w), rho.warnings))
        }
        Command::DomainVisits { walk, start, domain, to } => {
            let w = ready(walk, stdin_text)?;
            let (i, rho) = start_state(&w, start)?;
            let d = parse_sites(&w, domain)?;
            let j = w.index_of(to)?;
            let r = hitting::expected_domain_visits(&w, &d, i, &rho.rho, j)?;
            let diag = with_warnings(diag_value(&r.diagnostics), &rho.warnings);
            Ok(Outcome::ok(document("value", json!(r.value), diag, &w), rho.warnings))
        }
        Command::Dirichlet { walk, problem, method } => dirichlet_command(walk, problem, *method, stdin_text),
        Command::Dform { walk, observable } => {
            let w = ready(walk, stdin_text)?;
            dform(&w, observable)
        }
        Command::Simulate { walk, start, horizon, n_traj, seed, to, domain, dump, states } => {
            let w = ready(walk, stdin_text)?;
            let (i, rho) = start_state(&w, start)?;
            let opts = SimulateOpts {
                horizon: *horizon,
                n_traj: *n_traj,
                seed: *seed,
                to: to.as_deref(),
                domain: domain.as_deref(),
                dump: dump.as_deref(),
                states: *states,
            };
            simulate_command(&w, i, rho, &opts)
        }
        Command::Kac { walk, site, n_traj, k, max_steps, seed } => {
            let w = ready(walk, stdin_text)?;
            let i = w.index_of(site)?;
            let cap = max_steps.unwrap_or(k.saturating_mul(1000));
            let r = trajectory::estimate_kac(&w, i, *n_traj, *k, cap, *seed)?;
            let diag = json!({
                "target": r.target,
                "z_score": r.z_score,
                "within_3_sigma": r.within_3_sigma,
                "censored": r.censored,
                "k": r.k,
                "max_steps": cap,
                "seed": seed,
            });
            let value = serde_json::to_value(&r.empirical).expect("estimate serializes");
            Ok(Outcome::ok(document("value", value, diag, &w), vec![]))
        }
        Command::Fixtures { action } => match action {
            FixturesAction::List => {
                let list = serde_json::to_value(CATALOG).expect("catalog serializes");
                Ok(Outcome::ok(json!({ "value": list, "diagnostics": {}, "walk_digest": null }), vec![]))
            }
            FixturesAction::Emit { name, params } => {
                if name.starts_with("dilation:") && params.any() {
                    return Err(OqwError::Input("dilation fixtures take no parameters".into()));
                }
                let w = catalog::build(name, &params.params())
                    .ok_or_else(|| OqwError::Input(format!("unknown fixture {name:?} (see `oqw fixtures list`)")))??;
                Ok(Outcome { raw: true, ..Outcome::ok(Value::String(io::walk_to_string(&w)), vec![]) })
            }
        },
        Command::Suite { only, perturb } => {
            if let Some(f) = perturb {
                if !(f.is_finite() && *f > 0.0) {
                    return Err(OqwError::Input("--perturb must be a positive factor".into()));
                }
            }
            let report = run_fixture_suite(&SuiteOptions { only: only.clone(), perturb: *perturb });
            if report.lines.is_empty() {
                return Err(OqwError::Input(format!("--only {:?} matches no fixture group or criterion", only)));
            }
            let failed = report.lines.iter().filter(|l| !l.passed).count();
            let doc = json!({
                "value": {
                    "lines": report.lines.iter().map(SuiteLine::to_value).collect::<Vec<_>>(),
                    "passed": report.lines.len() - failed,
                    "failed": failed,
                },
                "diagnostics": {},
                "walk_digest": report.digests,
            });
            Ok(Outcome { code: if failed == 0 { 0 } else { 2 }, ..Outcome::ok(doc, vec![]) })
        }
    }
}

fn boundary_ids(w: &WalkSpec, d: &BTreeSet<usize>) -> Vec<String> {
    hitting::boundary(w, d).iter().map(|&k| w.site_id(k).to_string()).collect()
}

fn info(w: &WalkSpec, site: Option<&str>) -> Result<Outcome> {
    let irr = structure::irreducibility(w)?;
    let inv = model::invariant_state(w)?;
    let faithful = inv.state.as_ref().is_some_and(|t| model::is_faithful(w, t));
    let detailed_balance = match (&inv.state, faithful) {
        (Some(t), true) => {
            let r = model::check_detailed_balance(w, t)?;
            json!({
                "selfadjoint": r.selfadjoint_within_tol,
                "selfadjoint_residual": r.selfadjoint_residual,
                "sufficient_condition": r.sufficient_condition_holds,
                "sufficient_residual": r.sufficient_residual,
            })
        }
        _ => Value::Null,
    };
    let mut notes: Vec<String> = Vec::new();
    let classification = if irr.irreducible {
        let i = match site {
            Some(id) => w.index_of(id)?,
            None => 0,
        };
        serde_json::to_value(structure::classify_recurrence(w, i)?).expect("verdict serializes")
    } else {
        notes.push("reducible walk: recurrence is classified per irreducible part; see the decomposition".into());
        Value::Null
    };
    let decomposition = if irr.irreducible { Value::Null } else { structure::decompose(w)?.to_value(w) };
    let value = json!({
        "sites": w.n_sites(),
        "total_dim": w.total_dim(),
        "leaky": w.leaky_sites().map(|k| w.site_id(k).to_string()).collect::<Vec<_>>(),
        "irreducible": irr.irreducible,
        "enclosure": irr.witness.as_ref().map(|e| e.to_value(w)),
        "invariant_state": inv.state.as_ref().map(|t| io::state_to_value(w, t)),
        "invariant_faithful": faithful,
        "fixed_space_dim": inv.fixed_space_dim,
        "detailed_balance": detailed_balance,
        "doubly_stochastic": dirichlet::require_doubly_stochastic(w).is_ok(),
        "classification": classification,
        "decomposition": decomposition,
    });
    let diag = json!({
        "perron_radius": irr.spectral_radius,
        "perron_multiplicity": irr.perron_multiplicity,
        "invariant_residual": inv.residual,
        "notes": notes,
    });
    Ok(Outcome::ok(document("value", value, diag, w), vec![]))
}

fn dirichlet_command(
    args: &WalkArgs,
    problem_path: &Path,
    method: DirichletMethod,
    stdin_text: Option<&str>,
) -> Result<Outcome> {
    let text = std::fs::read_to_string(problem_path)
        .map_err(|e| OqwError::Input(format!("cannot read {}: {e}", problem_path.display())))?;
    let problem: Value = serde_json::from_str(&text).map_err(|e| OqwError::Input(format!("problem JSON: {e}")))?;
    let w = match (&args.walk, problem.get("walk")) {
        (Some(_), _) => load_walk(args, stdin_text)?,
        (None, Some(Value::String(spec))) => load_walk_spec(spec, args, stdin_text, problem_path.parent())?,
        (None, Some(v @ Value::Object(_))) => io::walk_from_value(v)?,
        _ => return Err(OqwError::Input("give --walk or a \"walk\" entry in the problem file".into())),
    };
    model::require_valid(&w)?;
    let doc = match method {
        DirichletMethod::ClosedForm => {
            let p = DirichletProblem::from_value(&w, &problem)?;
            let s = dirichlet::solve_dirichlet_domain(&w, &p)?;
            split_solution(s.to_value(&w), &w, "closed_form")
        }
        DirichletMethod::Variational => {
            let p = DirichletProblem::from_value(&w, &problem)?;
            let inv = model::invariant_state(&w)?;
            let tau = inv
                .state
                .ok_or_else(|| OqwError::Precondition("walk has no invariant state".into()))?;
            let s = dirichlet::variational_solve(&w, &tau, &p)?;
            split_solution(s.to_value(&w), &w, "variational")
        }
        DirichletMethod::Global => {
            let a = io::observable_from_value(&w, problem.get("A").unwrap_or(&Value::Null))?;
            let s = dirichlet::solve_dirichlet_global(&w, &a)?;
            split_solution(s.to_value(&w), &w, "global")
        }
    };
    Ok(Outcome::ok(doc, vec![]))
}

/// Moves everything except `"solution"` into the diagnostics.
fn split_solution(mut v: Value, w: &WalkSpec, method: &str) -> Value {
    let solution = v.as_object_mut().and_then(|m| m.remove("solution")).unwrap_or(Value::Null);
    v["method"] = json!(method);
    document("solution", solution, v, w)
}

fn dform(w: &WalkSpec, observable: &str) -> Result<Outcome> {
    let x = if observable == "identity" {
        DiagonalObservable::identity(w)
    } else {
        let text = std::fs::read_to_string(observable)
            .map_err(|e| OqwError::Input(format!("cannot read {observable}: {e}")))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| OqwError::Input(format!("observable JSON: {e}")))?;
        io::observable_from_value(w, &v)?
    };
    let inv = model::invariant_state(w)?;
    let tau = inv
        .state
        .ok_or_else(|| OqwError::Precondition("walk has no invariant state".into()))?;
    let energy = dirichlet::dirichlet_energy(w, &tau, &x)?;
    let db = model::check_detailed_balance(w, &tau)?;
    let mut diag = json!({
        "reference_state": "invariant",
        "detailed_balance": db.selfadjoint_within_tol,
        "selfadjoint_residual": db.selfadjoint_residual,
    });
    if dirichlet::require_doubly_stochastic(w).is_ok() {
        let g = dirichlet::gradient_form(w, &x)?;
        diag["gradient"] = g.to_value(w);
        diag["energy_identity_reference"] = json!(dirichlet::dirichlet_energy(w, &dirichlet::identity_reference(w), &x)?);
    }
    Ok(Outcome::ok(document("value", json!(energy), diag, w), vec![]))
}

struct SimulateOpts<'a> {
    horizon: usize,
    n_traj: usize,
    seed: u64,
    to: Option<&'a str>,
    domain: Option<&'a str>,
    dump: Option<&'a Path>,
    states: bool,
}

fn simulate_command(w: &WalkSpec, i: usize, rho: ParsedRho, o: &SimulateOpts) -> Result<Outcome> {
    if o.to.is_some() && o.domain.is_some() {
        return Err(OqwError::Input("--to and --domain are exclusive".into()));
    }
    let stop = match (o.to, o.domain) {
        (Some(t), None) => StopRule::HitSite(w.index_of(t)?),
        (None, Some(d)) => StopRule::ExitDomain(parse_sites(w, d)?),
        _ => StopRule::Horizon,
    };
    let records = trajectory::simulate(w, i, &rho.rho, o.horizon, &stop, o.states, o.n_traj, o.seed)?;
    if let Some(path) = o.dump {
        let file = std::fs::File::create(path)
            .map_err(|e| OqwError::Input(format!("cannot create {}: {e}", path.display())))?;
        trajectory::write_jsonl(w, &records, std::io::BufWriter::new(file))
            .map_err(|e| OqwError::Input(format!("cannot write {}: {e}", path.display())))?;
    }
    let mut reasons: Map<String, Value> = Map::new();
    for r in &records {
        let key = serde_json::to_value(r.stop_reason).expect("reason serializes");
        let key = key.as_str().unwrap_or("unknown").to_string();
        let n = reasons.get(&key).and_then(Value::as_u64).unwrap_or(0);
        reasons.insert(key, json!(n + 1));
    }
    let renormalized: usize = records.iter().map(|r| r.renormalized_steps).sum();
    let mut diag = json!({
        "n_traj": o.n_traj,
        "horizon": o.horizon,
        "seed": o.seed,
        "stop_reasons": reasons,
        "renormalized_steps": renormalized,
    });
    let value = match &stop {
        StopRule::HitSite(j) => {
            let est = trajectory::estimate_passage(w, i, &rho.rho, *j, o.n_traj, o.horizon, o.seed)?;
            serde_json::to_value(&est).expect("estimate serializes")
        }
        StopRule::ExitDomain(d) => {
            let bd = hitting::boundary(w, d);
            let mut exits = Map::new();
            for &b in &bd {
                let xs: Vec<f64> = records
                    .iter()
                    .map(|r| {
                        let hit = r.stop_reason == StopReason::ExitedDomain && r.sites.last() == Some(&b);
                        if hit { 1.0 } else { 0.0 }
                    })
                    .collect();
                exits.insert(w.site_id(b).to_string(), serde_json::to_value(EstimateWithCI::from_samples(&xs)).unwrap());
            }
            let times: Vec<f64> = records.iter().map(|r| r.stop_index as f64).collect();
            json!({ "exit_distribution": exits, "stop_time": EstimateWithCI::from_samples(&times) })
        }
        StopRule::Horizon => {
            let mut occupation = vec![0usize; w.n_sites()];
            for r in &records {
                if let Some(&last) = r.sites.last() {
                    occupation[last] += 1;
                }
            }
            let dist: Map<String, Value> = occupation
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(k, &c)| (w.site_id(k).to_string(), json!(c as f64 / records.len() as f64)))
                .collect();
            json!({ "final_position": dist })
        }
    };
    diag = with_warnings(diag, &rho.warnings);
    Ok(Outcome::ok(document("value", value, diag, w), rho.warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str], stdin: &str) -> (i32, String, String) {
        let mut input = stdin.as_bytes();
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("oqw").chain(args.iter().copied());
        let code = run(argv, &mut input, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    fn json_out(args: &[&str]) -> Value {
        let (code, out, err) = run_args(args, "");
        assert_eq!(code, 0, "{err}");
        serde_json::from_str(&out).unwrap()
    }

    #[test]
    fn hit_on_example_5_4_at_r_one() {
        let v = json_out(&["hit", "--walk", "example-5.4", "--from", "1", "--rho", "diag:0,1", "--to", "0"]);
        // The e2 direction never reaches 0 with the printed operators.
        assert!(v["value"].as_f64().unwrap().abs() < 1e-12);
        assert!(v["diagnostics"].is_object());
        assert_eq!(v["walk_digest"].as_str().unwrap().len(), 64);
    }

    #[test]
    fn return_time_on_example_5_2() {
        let v = json_out(&[
            "return-time", "--walk", "example-5.2", "--p", "0.75", "--N", "60", "--from", "0", "--rho", "diag:1,0",
            "--to", "0",
        ]);
        assert!((v["value"].as_f64().unwrap() - 3.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn infinite_visits_serialize_as_string() {
        let v = json_out(&["visits", "--walk", "example-5.1", "--from", "0", "--rho", "pure:1,0", "--to", "0"]);
        assert_eq!(v["value"], json!("inf"));
    }

    #[test]
    fn alpha_grid_is_reported() {
        let v = json_out(&[
            "hit", "--walk", "example-5.1", "--from", "0", "--to", "0", "--alpha-grid", "0.5,0.99",
        ]);
        let grid = v["diagnostics"]["alpha_values"].as_array().unwrap();
        assert_eq!(grid.len(), 2);
        // One step to site 1 with mass 1/2, back at step 2.
        assert!((grid[0][1].as_f64().unwrap() - 0.125).abs() < 1e-12);
        assert!((grid[1][1].as_f64().unwrap() - 0.5 * 0.99 * 0.99).abs() < 1e-12);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run_args(&["--help"], "").0, 0);
        assert_eq!(run_args(&["--version"], "").0, 0);
        assert_eq!(run_args(&["frobnicate"], "").0, 1);
        assert_eq!(run_args(&["hit", "--walk", "example-5.1", "--bogus"], "").0, 1);
        assert_eq!(run_args(&["hit", "--walk", "nowhere.json", "--from", "0", "--to", "0"], "").0, 1);
        assert_eq!(run_args(&["hit", "--walk", "example-5.1", "--from", "9", "--to", "0"], "").0, 1);
        // Global solve is impossible when some return map has radius 1.
        let dir = std::env::temp_dir().join(format!("oqw-cli-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let problem = dir.join("global.json");
        std::fs::write(&problem, r#"{"A": {"1": [[1]]}}"#).unwrap();
        let (code, _, err) = run_args(
            &["dirichlet", "--walk", "symmetric-cycle", "--problem", problem.to_str().unwrap(), "--method", "global"],
            "",
        );
        assert_eq!(code, 1, "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn numerical_errors_exit_two() {
        // A failed suite check is a numerical outcome.
        let (code, out, _) = run_args(&["suite", "--only", "example-5.1", "--perturb", "1.001"], "");
        assert_eq!(code, 2);
        assert!(out.contains("\"passed\": false"));
    }

    #[test]
    fn emit_then_validate_round_trips() {
        let (code, walk, _) = run_args(&["fixtures", "emit", "example-5.4"], "");
        assert_eq!(code, 0);
        let (code, out, err) = run_args(&["validate", "--walk", "-"], &walk);
        assert_eq!(code, 0, "{err}");
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["value"]["max_residual"].as_f64().unwrap(), 0.0);
        let direct = json_out(&["validate", "--walk", "example-5.4"]);
        assert_eq!(v["walk_digest"], direct["walk_digest"]);
    }

    #[test]
    fn invalid_walk_fails_validation() {
        let bad = r#"{"sites": [{"id": "a", "dim": 1}], "transitions": [{"to": "a", "from": "a", "matrix": [[0.9]]}]}"#;
        let (code, out, _) = run_args(&["validate", "--walk", "-"], bad);
        assert_eq!(code, 1);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["value"]["accepted"], json!(false));
        assert!((v["value"]["residuals"]["a"].as_f64().unwrap() - 0.19).abs() < 1e-12);
        // Other subcommands refuse it outright.
        let (code, _, err) = run_args(&["hit", "--walk", "-", "--from", "a", "--to", "a"], bad);
        assert_eq!(code, 1);
        assert!(err.contains("not stochastic"));
    }

    #[test]
    fn table_format_is_plain_rows() {
        let (code, out, _) = run_args(
            &["--format", "table", "hit", "--walk", "example-5.1", "--from", "0", "--rho", "diag:0.7,0.3", "--to", "0"],
            "",
        );
        assert_eq!(code, 0);
        let value_row = out.lines().find(|l| l.starts_with("value")).unwrap();
        assert!(value_row.trim_end().ends_with("0.7"));
    }

    #[test]
    fn domain_ranges_expand() {
        let w = oqw_core::fixtures::gamblers_ruin(10, 0.5).unwrap();
        let d = parse_sites(&w, "1..3,7").unwrap();
        assert_eq!(d.len(), 4);
        assert!(parse_sites(&w, "3..1").is_err());
        assert!(parse_sites(&w, "11").is_err());
    }

    #[test]
    fn harmonic_and_dirichlet_on_gamblers_ruin() {
        let v = json_out(&["harmonic", "--walk", "gamblers-ruin", "--from", "3", "--rho", "mixed", "--domain", "1..9"]);
        let masses = v["measure"].as_array().unwrap();
        let at = |id: &str| masses.iter().find(|m| m["site"] == id).unwrap()["mass"].as_f64().unwrap();
        assert!((at("10") - 0.3).abs() < 1e-10);
        assert!((at("0") - 0.7).abs() < 1e-10);

        let dir = std::env::temp_dir().join(format!("oqw-dir-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let problem = dir.join("p.json");
        std::fs::write(
            &problem,
            r#"{"walk": "gamblers-ruin", "domain": ["1","2","3","4","5","6","7","8","9"], "B": {"10": [[1]]}}"#,
        )
        .unwrap();
        let v = json_out(&["dirichlet", "--problem", problem.to_str().unwrap()]);
        let z4 = &v["solution"]["4"][0][0];
        assert!((z4[0].as_f64().unwrap() - 0.4).abs() < 1e-10);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn simulate_is_reproducible_and_dumps_jsonl() {
        let dir = std::env::temp_dir().join(format!("oqw-sim-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let dump = dir.join("t.jsonl");
        let args = [
            "simulate", "--walk", "asymmetric-three-cycle", "--from", "0", "--to", "2", "--n-traj", "200",
            "--horizon", "50", "--seed", "5", "--dump", dump.to_str().unwrap(),
        ];
        let a = json_out(&args);
        let b = json_out(&[&["--threads", "2"], &args[..]].concat());
        assert_eq!(a["value"], b["value"]);
        let lines = std::fs::read_to_string(&dump).unwrap();
        assert_eq!(lines.lines().count(), 200);
        let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first["stop_reason"], json!("hit_target"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn info_reports_structure() {
        let v = json_out(&["info", "--walk", "quantum-ring"]);
        assert_eq!(v["value"]["irreducible"], json!(true));
        assert_eq!(v["value"]["doubly_stochastic"], json!(true));
        assert_eq!(v["value"]["classification"]["case"], json!("recurrent"));
        let v = json_out(&["info", "--walk", "example-5.4"]);
        assert_eq!(v["value"]["irreducible"], json!(false));
        assert!(v["value"]["decomposition"].is_object());
    }

    #[test]
    fn dform_of_identity_vanishes() {
        let v = json_out(&["dform", "--walk", "quantum-ring", "--observable", "identity"]);
        assert!(v["value"].as_f64().unwrap().abs() < 1e-12);
        assert!(v["diagnostics"]["gradient"]["energy"].as_f64().unwrap().abs() < 1e-12);
    }
}
