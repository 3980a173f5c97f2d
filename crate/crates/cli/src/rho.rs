//! Density-matrix arguments: `diag:a,b,...`, `pure:v1,v2,...`, `mixed`, or a
//! JSON matrix file.

use std::path::Path;

use num_complex::Complex64 as C64;
use oqw_core::hitting::pure_state;
use oqw_core::io;
use oqw_core::linalg::{self, c, CMatrix};
use oqw_core::{OqwError, Result};

/// Entries and eigenvalues within this of the admissible range are accepted.
const PSD_TOL: f64 = 1e-9;
const TRACE_TOL: f64 = 1e-12;

/// A parsed state together with any warnings (renormalization).
#[derive(Clone, Debug)]
pub struct ParsedRho {
    pub rho: CMatrix,
    pub warnings: Vec<String>,
}

fn numbers(body: &str) -> Vec<&str> {
    body.split(',').map(str::trim).collect()
}

fn normalize(m: CMatrix, warnings: &mut Vec<String>) -> Result<CMatrix> {
    let tr = m.trace().re;
    if !tr.is_finite() || tr <= 0.0 {
        return Err(OqwError::Input("state has zero trace".into()));
    }
    if (tr - 1.0).abs() > TRACE_TOL {
        warnings.push(format!("state had trace {tr}; normalized to 1"));
        return Ok(m / c(tr));
    }
    Ok(m)
}

pub fn parse_rho(spec: &str, dim: usize) -> Result<ParsedRho> {
    let mut warnings = Vec::new();
    let spec = spec.trim();
    let rho = if spec == "mixed" {
        linalg::identity(dim) / c(dim as f64)
    } else if let Some(body) = spec.strip_prefix("diag:") {
        let entries: Vec<f64> = numbers(body)
            .into_iter()
            .map(|s| s.parse::<f64>().map_err(|e| OqwError::Input(format!("diag entry {s:?}: {e}"))))
            .collect::<Result<_>>()?;
        if entries.len() != dim {
            return Err(OqwError::Input(format!("diag has {} entries, fiber dimension is {dim}", entries.len())));
        }
        if let Some(x) = entries.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(OqwError::Input(format!("diag entry {x} is not a nonnegative number")));
        }
        normalize(linalg::diag(&entries), &mut warnings)?
    } else if let Some(body) = spec.strip_prefix("pure:") {
        let v: Vec<C64> = numbers(body)
            .into_iter()
            .map(|s| s.parse::<C64>().map_err(|e| OqwError::Input(format!("vector entry {s:?}: {e}"))))
            .collect::<Result<_>>()?;
        if v.len() != dim {
            return Err(OqwError::Input(format!("vector has {} entries, fiber dimension is {dim}", v.len())));
        }
        let norm2: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        if !norm2.is_finite() || norm2 <= 0.0 {
            return Err(OqwError::Input("pure state vector is zero".into()));
        }
        if (norm2 - 1.0).abs() > TRACE_TOL {
            warnings.push(format!("vector had squared norm {norm2}; normalized to 1"));
        }
        pure_state(&v)
    } else {
        let path = Path::new(spec);
        if !path.exists() {
            return Err(OqwError::Input(format!(
                "state {spec:?} is not diag:..., pure:..., mixed, or an existing file"
            )));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| OqwError::Input(format!("cannot read {}: {e}", path.display())))?;
        let value = serde_json::from_str(&text).map_err(|e| OqwError::Input(format!("state JSON: {e}")))?;
        let m = io::matrix_from_value(&value)?;
        if m.shape() != (dim, dim) {
            return Err(OqwError::Input(format!("state has shape {:?}, fiber dimension is {dim}", m.shape())));
        }
        let scale = linalg::max_abs(&m).max(1.0);
        if linalg::hermiticity_defect(&m) > PSD_TOL * scale {
            return Err(OqwError::Input("state is not Hermitian".into()));
        }
        let h = linalg::hermitian_part(&m);
        if linalg::min_eigenvalue(&h) < -PSD_TOL * scale {
            return Err(OqwError::Input("state is not positive semidefinite".into()));
        }
        normalize(h, &mut warnings)?
    };
    Ok(ParsedRho { rho, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use oqw_core::linalg::max_abs;

    #[test]
    fn grammar_examples() {
        let m = parse_rho("mixed", 2).unwrap();
        assert!(max_abs(&(m.rho - linalg::identity(2) * c(0.5))) < 1e-15);
        let p = parse_rho("pure:1,0", 2).unwrap();
        assert!(max_abs(&(p.rho - linalg::diag(&[1.0, 0.0]))) < 1e-15);
        let d = parse_rho("diag:0.7,0.3", 2).unwrap();
        assert!(max_abs(&(d.rho - linalg::diag(&[0.7, 0.3]))) < 1e-15);
        assert!(d.warnings.is_empty());
    }

    #[test]
    fn renormalizes_with_warning() {
        let d = parse_rho("diag:2,2", 2).unwrap();
        assert!(max_abs(&(d.rho - linalg::diag(&[0.5, 0.5]))) < 1e-15);
        assert_eq!(d.warnings.len(), 1);
        let p = parse_rho("pure:1,1i", 2).unwrap();
        assert!((p.rho.trace().re - 1.0).abs() < 1e-15);
        assert!((p.rho[(1, 0)] - C64::new(0.0, 0.5)).norm() < 1e-15);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_rho("diag:-0.1,1.1", 2).is_err());
        assert!(parse_rho("diag:0,0", 2).is_err());
        assert!(parse_rho("pure:0,0", 2).is_err());
        assert!(parse_rho("diag:1", 2).is_err());
        assert!(parse_rho("/no/such/file.json", 2).is_err());
    }

    #[test]
    fn reads_matrix_files() {
        let dir = std::env::temp_dir().join(format!("oqw-rho-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let good = dir.join("good.json");
        std::fs::write(&good, "[[0.5, 0], [0, 1.5]]").unwrap();
        let r = parse_rho(good.to_str().unwrap(), 2).unwrap();
        assert!(max_abs(&(r.rho - linalg::diag(&[0.25, 0.75]))) < 1e-15);
        let bad = dir.join("bad.json");
        std::fs::write(&bad, "[[1, 0], [0, -1]]").unwrap();
        assert!(parse_rho(bad.to_str().unwrap(), 2).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
