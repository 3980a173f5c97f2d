#![allow(dead_code)]

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use oqw_core::fixtures;
use oqw_core::linalg::{self, c, CMatrix};
use oqw_core::{DiagonalObservable, DiagonalState, WalkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussianish(rng: &mut ChaCha8Rng, r: usize, k: usize) -> CMatrix {
    CMatrix::from_fn(r, k, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

/// Random connected walk: each site moves to its ring successor, to itself,
/// and to other sites with probability `extra`. Columns are normalized by
/// `L = K S^{-1/2}` with `S = Σ K^†K`.
pub fn random_walk(seed: u64, n: usize, max_d: usize, extra: f64) -> WalkSpec {
    let mut rng = rng(seed);
    let dims: Vec<usize> = (0..n).map(|_| rng.random_range(1..=max_d)).collect();
    let mut w = WalkSpec::new((0..n).map(|k| (k.to_string(), dims[k]))).unwrap();
    for j in 0..n {
        let mut targets = vec![j, (j + 1) % n];
        for i in 0..n {
            if !targets.contains(&i) && rng.random_bool(extra) {
                targets.push(i);
            }
        }
        let ks: Vec<(usize, CMatrix)> = targets.iter().map(|&i| (i, gaussianish(&mut rng, dims[i], dims[j]))).collect();
        let mut s = CMatrix::zeros(dims[j], dims[j]);
        for (_, k) in &ks {
            s += k.adjoint() * k;
        }
        let s_inv_half = linalg::hermitian_function(&s, |x| 1.0 / x.sqrt());
        for (i, k) in ks {
            w.set_transition_at(i, j, k * &s_inv_half).unwrap();
        }
    }
    w
}

pub fn random_state(rng: &mut ChaCha8Rng, d: usize) -> CMatrix {
    let g = gaussianish(rng, d, d);
    let m = &g * g.adjoint();
    let t = m.trace();
    m / t
}

pub fn random_diagonal_state(rng: &mut ChaCha8Rng, walk: &WalkSpec) -> DiagonalState {
    let blocks: Vec<CMatrix> = walk.dims().iter().map(|&d| random_state(rng, d)).collect();
    let n = blocks.len() as f64;
    DiagonalState { blocks: blocks.into_iter().map(|b| b / c(n)).collect() }
}

pub fn random_hermitian(rng: &mut ChaCha8Rng, walk: &WalkSpec) -> DiagonalObservable {
    DiagonalObservable {
        blocks: walk.dims().iter().map(|&d| linalg::hermitian_part(&gaussianish(rng, d, d))).collect(),
    }
}

/// Reversible classical chain from symmetric edge weights, with its
/// stationary distribution.
pub fn reversible_dilation(seed: u64, n: usize) -> (WalkSpec, Vec<f64>) {
    let mut rng = rng(seed);
    let mut weights = DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let connected = b == a || b == a + 1 || rng.random_bool(0.3);
            if connected {
                let x = rng.random_range(0.1..1.0);
                weights[(a, b)] = x;
                weights[(b, a)] = x;
            }
        }
    }
    let row: Vec<f64> = (0..n).map(|a| weights.row(a).sum()).collect();
    let total: f64 = row.iter().sum();
    let t: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| weights[(j, i)] / row[j]).collect()).collect();
    let labels: Vec<String> = (0..n).map(|k| k.to_string()).collect();
    let w = oqw_core::model::minimal_dilation(&t, &labels).unwrap();
    (w, row.iter().map(|r| r / total).collect())
}

pub fn random_unitaries(rng: &mut ChaCha8Rng, walk: &WalkSpec) -> Vec<CMatrix> {
    walk.dims().iter().map(|&d| fixtures::random_unitary(d, rng)).collect()
}

/// `L_{i,j} ← U_i L_{i,j} U_j^†`.
pub fn conjugate(walk: &WalkSpec, us: &[CMatrix]) -> WalkSpec {
    let mut w = WalkSpec::new(walk.site_ids().iter().cloned().zip(walk.dims().iter().copied())).unwrap();
    for (&(i, j), l) in walk.transitions() {
        w.set_transition_at(i, j, &us[i] * l * us[j].adjoint()).unwrap();
    }
    w
}
