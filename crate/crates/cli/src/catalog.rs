//! Named builtin walks and the parameters they accept.

use std::path::Path;

use oqw_core::fixtures;
use oqw_core::model::{self, minimal_dilation};
use oqw_core::{OqwError, Result, WalkSpec};
use serde::Serialize;
use serde_json::Value;

/// Optional fixture parameters; unset ones take the fixture's default.
#[derive(Clone, Debug, Default)]
pub struct FixtureParams {
    pub p: Option<f64>,
    pub n: Option<usize>,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub d: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FixtureInfo {
    pub name: &'static str,
    pub parameters: &'static str,
    pub description: &'static str,
}

pub const CATALOG: &[FixtureInfo] = &[
    FixtureInfo {
        name: "example-5.1",
        parameters: "",
        description: "three sites with C^2 fibers; return, escape and trap regimes at site 0",
    },
    FixtureInfo {
        name: "example-5.2",
        parameters: "--p (0.75) --N (60)",
        description: "half-line with a C^2 fiber at the origin, truncated to {0..N}, site N leaky",
    },
    FixtureInfo {
        name: "example-5.4",
        parameters: "",
        description: "four sites, absorbing site 0; dual passage operator diag(3/4, 1) at site 1",
    },
    FixtureInfo {
        name: "example-5.5-normal",
        parameters: "--p1 (0.5) --p2 (0.5) --N (50)",
        description: "homogeneous line walk on [-N, N] with diagonal L_+ and L_-",
    },
    FixtureInfo {
        name: "example-5.5-nonnormal",
        parameters: "--N (50)",
        description: "homogeneous line walk on [-N, N] with rank-one non-normal L_+ and L_-",
    },
    FixtureInfo {
        name: "gamblers-ruin",
        parameters: "--N (10) --p (0.5)",
        description: "minimal dilation of gambler's ruin on {0..N} with absorbing ends",
    },
    FixtureInfo {
        name: "leaky-biased-line",
        parameters: "--N (10) --p (0.4)",
        description: "classical walk on {0..N} reflecting at 0, leaky at N",
    },
    FixtureInfo {
        name: "quantum-ring",
        parameters: "--N (6) --d (2) --fixture-seed (7)",
        description: "doubly stochastic ring with seeded unitary hops and reflection self-loops",
    },
    FixtureInfo {
        name: "symmetric-cycle",
        parameters: "--N (4)",
        description: "symmetric classical walk on a cycle",
    },
    FixtureInfo {
        name: "deterministic-cycle",
        parameters: "--N (4)",
        description: "deterministic rotation of a cycle",
    },
    FixtureInfo {
        name: "asymmetric-three-cycle",
        parameters: "",
        description: "irreducible, non-reversible classical three-cycle",
    },
    FixtureInfo {
        name: "dilation:<file>",
        parameters: "",
        description: "minimal dilation of a row-stochastic matrix read from JSON",
    },
];

fn reject_unused(name: &str, params: &FixtureParams, allowed: &[&str]) -> Result<()> {
    let given = [
        ("p", params.p.is_some()),
        ("N", params.n.is_some()),
        ("p1", params.p1.is_some()),
        ("p2", params.p2.is_some()),
        ("d", params.d.is_some()),
        ("fixture-seed", params.seed.is_some()),
    ];
    for (flag, set) in given {
        if set && !allowed.contains(&flag) {
            return Err(OqwError::Input(format!("fixture {name} does not take --{flag}")));
        }
    }
    Ok(())
}

fn cycle_len(n: Option<usize>) -> Result<usize> {
    let n = n.unwrap_or(4);
    if n < 3 {
        return Err(OqwError::Input(format!("cycle length {n} must be at least 3")));
    }
    Ok(n)
}

/// Builds a named fixture. Returns `None` when the name is not builtin.
pub fn build(name: &str, params: &FixtureParams) -> Option<Result<WalkSpec>> {
    if let Some(path) = name.strip_prefix("dilation:") {
        return Some(reject_unused(name, params, &[]).and_then(|_| read_dilation(Path::new(path))));
    }
    let walk = match name {
        "example-5.1" => reject_unused(name, params, &[]).map(|_| fixtures::example_5_1()),
        "example-5.2" => reject_unused(name, params, &["p", "N"])
            .and_then(|_| fixtures::example_5_2(params.p.unwrap_or(0.75), params.n.unwrap_or(60))),
        "example-5.4" => reject_unused(name, params, &[]).map(|_| fixtures::example_5_4()),
        "example-5.5-normal" => reject_unused(name, params, &["p1", "p2", "N"]).and_then(|_| {
            fixtures::example_5_5_normal(params.p1.unwrap_or(0.5), params.p2.unwrap_or(0.5), params.n.unwrap_or(50))
        }),
        "example-5.5-nonnormal" => reject_unused(name, params, &["N"])
            .and_then(|_| fixtures::example_5_5_nonnormal(params.n.unwrap_or(50))),
        "gamblers-ruin" => reject_unused(name, params, &["p", "N"])
            .and_then(|_| fixtures::gamblers_ruin(params.n.unwrap_or(10), params.p.unwrap_or(0.5))),
        "leaky-biased-line" => reject_unused(name, params, &["p", "N"])
            .and_then(|_| fixtures::leaky_biased_line(params.n.unwrap_or(10), params.p.unwrap_or(0.4))),
        "quantum-ring" => reject_unused(name, params, &["N", "d", "fixture-seed"]).and_then(|_| {
            let n = params.n.unwrap_or(6);
            let d = params.d.unwrap_or(2);
            if n < 3 || d == 0 {
                return Err(OqwError::Input("quantum-ring needs N ≥ 3 and d ≥ 1".into()));
            }
            Ok(fixtures::quantum_ring(n, d, params.seed.unwrap_or(7)))
        }),
        "symmetric-cycle" => reject_unused(name, params, &["N"])
            .and_then(|_| cycle_len(params.n))
            .map(fixtures::symmetric_cycle),
        "deterministic-cycle" => reject_unused(name, params, &["N"])
            .and_then(|_| cycle_len(params.n))
            .map(fixtures::deterministic_cycle),
        "asymmetric-three-cycle" => reject_unused(name, params, &[]).map(|_| fixtures::asymmetric_three_cycle()),
        _ => return None,
    };
    Some(walk.and_then(|w| {
        // Every builtin must pass validation.
        model::require_valid(&w)?;
        Ok(w)
    }))
}

/// Reads `{"P": rows, "labels": [...]}` or a bare array of rows, where
/// `P[i][j]` is the probability of moving from `i` to `j`.
pub fn read_dilation(path: &Path) -> Result<WalkSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| OqwError::Input(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| OqwError::Input(format!("dilation JSON: {e}")))?;
    dilation_from_value(&value)
}

pub fn dilation_from_value(value: &Value) -> Result<WalkSpec> {
    let (rows, labels) = match value {
        Value::Array(_) => (value, None),
        Value::Object(map) => (
            map.get("P").ok_or_else(|| OqwError::Input("dilation file needs a \"P\" matrix".into()))?,
            map.get("labels"),
        ),
        _ => return Err(OqwError::Input("dilation file must be a matrix or an object".into())),
    };
    let p: Vec<Vec<f64>> =
        serde_json::from_value(rows.clone()).map_err(|e| OqwError::Input(format!("transition matrix: {e}")))?;
    let n = p.len();
    let labels: Vec<String> = match labels {
        Some(l) => serde_json::from_value(l.clone()).map_err(|e| OqwError::Input(format!("labels: {e}")))?,
        None => (0..n).map(|k| k.to_string()).collect(),
    };
    if p.iter().any(|row| row.len() != n) {
        return Err(OqwError::Input("transition matrix must be square".into()));
    }
    let t: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| p[j][i]).collect()).collect();
    minimal_dilation(&t, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use oqw_core::model::validate_walk;

    #[test]
    fn every_builtin_validates() {
        for info in CATALOG.iter().filter(|f| !f.name.contains(':')) {
            let w = build(info.name, &FixtureParams::default()).unwrap().unwrap();
            assert!(validate_walk(&w).unwrap().accepted, "{}", info.name);
        }
    }

    #[test]
    fn parameters_are_range_checked() {
        let bad_p = FixtureParams { p: Some(1.5), ..Default::default() };
        assert!(build("example-5.2", &bad_p).unwrap().is_err());
        let bad_n = FixtureParams { n: Some(1), ..Default::default() };
        assert!(build("example-5.5-nonnormal", &bad_n).unwrap().is_err());
        let unused = FixtureParams { p: Some(0.5), ..Default::default() };
        assert!(build("example-5.1", &unused).unwrap().is_err());
        assert!(build("no-such-walk", &FixtureParams::default()).is_none());
    }

    #[test]
    fn dilation_transposes_row_stochastic_input() {
        let v = serde_json::json!({"P": [[0.0, 1.0], [0.25, 0.75]], "labels": ["a", "b"]});
        let w = dilation_from_value(&v).unwrap();
        let a = w.index_of("a").unwrap();
        let b = w.index_of("b").unwrap();
        // a → b with probability 1.
        assert!((w.transition(b, a).unwrap()[(0, 0)].re - 1.0).abs() < 1e-15);
        assert!((w.transition(a, b).unwrap()[(0, 0)].re - 0.5).abs() < 1e-15);
        assert!(validate_walk(&w).unwrap().accepted);
    }
}
