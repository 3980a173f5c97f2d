//! JSON forms of walks, matrices and block observables.
//!
//! Complex entries are `[re, im]` pairs; a bare number is accepted on input as
//! a real entry.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{OqwError, Result};
use crate::fixtures::{line_walk, LineBoundary};
use crate::linalg::{CMatrix, C64};
use crate::model::{DiagonalObservable, DiagonalState, WalkSpec, DEFAULT_TOLERANCE};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EntryJson {
    Pair([f64; 2]),
    Real(f64),
}

pub type MatrixJson = Vec<Vec<EntryJson>>;

pub fn matrix_to_json(m: &CMatrix) -> MatrixJson {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|k| EntryJson::Pair([m[(r, k)].re, m[(r, k)].im])).collect())
        .collect()
}

pub fn matrix_from_json(rows: &MatrixJson) -> Result<CMatrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(OqwError::Structural("ragged matrix rows".into()));
    }
    let mut m = CMatrix::zeros(nrows, ncols);
    for (r, row) in rows.iter().enumerate() {
        for (k, e) in row.iter().enumerate() {
            m[(r, k)] = match *e {
                EntryJson::Pair([re, im]) => C64::new(re, im),
                EntryJson::Real(re) => C64::new(re, 0.0),
            };
        }
    }
    if !crate::linalg::is_finite(&m) {
        return Err(OqwError::Input("matrix has non-finite entries".into()));
    }
    Ok(m)
}

pub fn matrix_from_value(v: &Value) -> Result<CMatrix> {
    let rows: MatrixJson =
        serde_json::from_value(v.clone()).map_err(|e| OqwError::Input(format!("bad matrix: {e}")))?;
    matrix_from_json(&rows)
}

/// `#[serde(with = "oqw_core::io::matrix")]` for `CMatrix` fields.
pub mod matrix {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &CMatrix, s: S) -> std::result::Result<S::Ok, S::Error> {
        matrix_to_json(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<CMatrix, D::Error> {
        let rows = MatrixJson::deserialize(d)?;
        matrix_from_json(&rows).map_err(serde::de::Error::custom)
    }
}

/// Same as [`matrix`] for `Option<CMatrix>`.
pub mod option_matrix {
    use super::*;
    use serde::Serializer;

    pub fn serialize<S: Serializer>(m: &Option<CMatrix>, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.as_ref().map(matrix_to_json).serialize(s)
    }
}

/// `Vec<CMatrix>` as a list of matrices.
pub mod matrix_list {
    use super::*;
    use serde::Serializer;

    pub fn serialize<S: Serializer>(ms: &[CMatrix], s: S) -> std::result::Result<S::Ok, S::Error> {
        ms.iter().map(matrix_to_json).collect::<Vec<_>>().serialize(s)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SiteJson {
    id: String,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransitionJson {
    to: String,
    from: String,
    matrix: MatrixJson,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExplicitWalkJson {
    sites: Vec<SiteJson>,
    transitions: Vec<TransitionJson>,
    #[serde(default)]
    tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    leaky: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[allow(non_snake_case)]
struct LineTemplateJson {
    template: String,
    range: [i64; 2],
    L_plus: MatrixJson,
    L_minus: MatrixJson,
    boundary: String,
    #[serde(default)]
    tolerance: Option<f64>,
}

/// Parses either an explicit walk document or a line template.
pub fn walk_from_str(text: &str) -> Result<WalkSpec> {
    let value: Value = serde_json::from_str(text).map_err(|e| OqwError::Input(format!("walk JSON: {e}")))?;
    walk_from_value(&value)
}

pub fn walk_from_value(value: &Value) -> Result<WalkSpec> {
    if value.get("template").is_some() {
        let t: LineTemplateJson =
            serde_json::from_value(value.clone()).map_err(|e| OqwError::Input(format!("walk template: {e}")))?;
        if t.template != "line" {
            return Err(OqwError::Input(format!("unknown template {:?}", t.template)));
        }
        let boundary = match t.boundary.as_str() {
            "absorbing" => LineBoundary::Absorbing,
            "taboo" => LineBoundary::Taboo,
            other => return Err(OqwError::Input(format!("unknown boundary {other:?}"))),
        };
        let lp = matrix_from_json(&t.L_plus)?;
        let lm = matrix_from_json(&t.L_minus)?;
        let walk = line_walk(t.range[0], t.range[1], &lp, &lm, boundary)?;
        return Ok(match t.tolerance {
            Some(tol) => walk.with_tolerance(tol),
            None => walk,
        });
    }
    let w: ExplicitWalkJson =
        serde_json::from_value(value.clone()).map_err(|e| OqwError::Input(format!("walk JSON: {e}")))?;
    let mut walk = WalkSpec::new(w.sites.iter().map(|s| (s.id.clone(), s.dim)))?;
    if let Some(tol) = w.tolerance {
        if !(tol >= 0.0 && tol.is_finite()) {
            return Err(OqwError::Input(format!("tolerance {tol} must be a nonnegative number")));
        }
        walk = walk.with_tolerance(tol);
    }
    for t in &w.transitions {
        walk.set_transition(&t.to, &t.from, matrix_from_json(&t.matrix)?)?;
    }
    for id in &w.leaky {
        walk.set_leaky(id)?;
    }
    Ok(walk)
}

pub fn read_walk(path: &Path) -> Result<WalkSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| OqwError::Input(format!("cannot read {}: {e}", path.display())))?;
    walk_from_str(&text)
}

/// Explicit JSON form; transitions are listed in `(to, from)` index order.
pub fn walk_to_value(walk: &WalkSpec) -> Value {
    let doc = ExplicitWalkJson {
        sites: (0..walk.n_sites())
            .map(|i| SiteJson { id: walk.site_id(i).to_string(), dim: walk.dim(i) })
            .collect(),
        transitions: walk
            .transitions()
            .map(|(&(to, from), l)| TransitionJson {
                to: walk.site_id(to).to_string(),
                from: walk.site_id(from).to_string(),
                matrix: matrix_to_json(l),
            })
            .collect(),
        tolerance: Some(walk.tolerance),
        leaky: walk.leaky_sites().map(|i| walk.site_id(i).to_string()).collect(),
    };
    serde_json::to_value(doc).expect("walk serializes")
}

pub fn walk_to_string(walk: &WalkSpec) -> String {
    serde_json::to_string_pretty(&walk_to_value(walk)).expect("walk serializes")
}

/// SHA-256 of the compact explicit form (object keys sorted).
pub fn walk_digest(walk: &WalkSpec) -> String {
    let canonical = serde_json::to_string(&walk_to_value(walk)).expect("walk serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// `{site id: matrix}` for the nonzero blocks.
pub fn observable_to_value(walk: &WalkSpec, obs: &DiagonalObservable) -> Value {
    blocks_to_value(walk, &obs.blocks)
}

pub fn state_to_value(walk: &WalkSpec, state: &DiagonalState) -> Value {
    blocks_to_value(walk, &state.blocks)
}

fn blocks_to_value(walk: &WalkSpec, blocks: &[CMatrix]) -> Value {
    let map: BTreeMap<String, MatrixJson> = blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| crate::linalg::max_abs(b) > 0.0)
        .map(|(i, b)| (walk.site_id(i).to_string(), matrix_to_json(b)))
        .collect();
    serde_json::to_value(map).expect("blocks serialize")
}

/// Reads `{site id: matrix}`; absent sites are zero.
pub fn observable_from_value(walk: &WalkSpec, value: &Value) -> Result<DiagonalObservable> {
    let mut obs = DiagonalObservable::zeros(walk);
    let map = match value {
        Value::Null => return Ok(obs),
        Value::Object(map) => map,
        _ => return Err(OqwError::Input("observable must be an object of site → matrix".into())),
    };
    for (id, m) in map {
        let i = walk.index_of(id)?;
        let block = matrix_from_value(m)?;
        let d = walk.dim(i);
        if block.shape() != (d, d) {
            return Err(OqwError::Structural(format!(
                "block at site {id} has shape {:?}, expected ({d}, {d})",
                block.shape()
            )));
        }
        obs.blocks[i] = block;
    }
    Ok(obs)
}

pub fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::linalg::max_abs;

    #[test]
    fn walk_round_trip() {
        for w in [fixtures::example_5_1(), fixtures::example_5_4(), fixtures::example_5_2(0.25, 5).unwrap()] {
            let back = walk_from_str(&walk_to_string(&w)).unwrap();
            assert_eq!(back.site_ids(), w.site_ids());
            assert_eq!(back.leaky_sites().collect::<Vec<_>>(), w.leaky_sites().collect::<Vec<_>>());
            for (&(i, j), l) in w.transitions() {
                assert!(max_abs(&(back.transition(i, j).unwrap() - l)) == 0.0);
            }
            assert_eq!(walk_digest(&back), walk_digest(&w));
        }
    }

    #[test]
    fn digest_changes_with_content() {
        let a = fixtures::gamblers_ruin(4, 0.5).unwrap();
        let b = fixtures::gamblers_ruin(4, 0.4).unwrap();
        assert_ne!(walk_digest(&a), walk_digest(&b));
        assert_eq!(walk_digest(&a).len(), 64);
    }

    #[test]
    fn line_template_expands() {
        let text = r#"{"template":"line","range":[0,4],"L_plus":[[0.7071067811865476]],
            "L_minus":[[[0.7071067811865476,0]]],"boundary":"absorbing"}"#;
        let w = walk_from_str(text).unwrap();
        assert_eq!(w.n_sites(), 5);
        let g = fixtures::gamblers_ruin(4, 0.5).unwrap();
        assert!(crate::model::validate_walk(&w).unwrap().accepted);
        assert_eq!(w.successors(2), g.successors(2));
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(matches!(walk_from_str("{"), Err(OqwError::Input(_))));
        let bad_shape = r#"{"sites":[{"id":"a","dim":2}],"transitions":[{"to":"a","from":"a","matrix":[[1]]}]}"#;
        assert!(matches!(walk_from_str(bad_shape), Err(OqwError::Structural(_))));
        let ragged = r#"{"sites":[{"id":"a","dim":2}],"transitions":[{"to":"a","from":"a","matrix":[[1,0],[0]]}]}"#;
        assert!(walk_from_str(ragged).is_err());
    }

    #[test]
    fn observable_map() {
        let w = fixtures::example_5_1();
        let v: Value = serde_json::json!({"1": [[1, 0], [0, [2, 0.5]]]});
        let obs = observable_from_value(&w, &v).unwrap();
        assert_eq!(obs.blocks[1][(1, 1)], C64::new(2.0, 0.5));
        assert_eq!(max_abs(&obs.blocks[0]), 0.0);
        let back = observable_from_value(&w, &observable_to_value(&w, &obs)).unwrap();
        assert_eq!(back.blocks, obs.blocks);
    }
}
