//! Shared inputs for the benchmarks in `benches/`.

use oqw_core::fixtures;
use oqw_core::linalg::{self, c, CMatrix};
use oqw_core::WalkSpec;

/// A walk with a start site, start state and target site.
pub struct Case {
    pub name: &'static str,
    pub walk: WalkSpec,
    pub from: usize,
    pub rho: CMatrix,
    pub to: usize,
}

fn mixed(walk: &WalkSpec, i: usize) -> CMatrix {
    let d = walk.dim(i);
    linalg::identity(d) / c(d as f64)
}

fn case(name: &'static str, walk: WalkSpec, from: usize, to: usize) -> Case {
    let rho = mixed(&walk, from);
    Case { name, walk, from, rho, to }
}

/// Passage targets of increasing size. The taboo operator acts on
/// `(N d)^2`-dimensional vectorized states, so cost grows quickly with N.
pub fn passage_cases() -> Vec<Case> {
    vec![
        case("example-5.4", fixtures::example_5_4(), 1, 0),
        case("gamblers-ruin-10", fixtures::gamblers_ruin(10, 0.5).unwrap(), 5, 10),
        case("quantum-ring-6", fixtures::quantum_ring(6, 2, 7), 0, 3),
        case("example-5.2-N30", fixtures::example_5_2(0.75, 30).unwrap(), 0, 0),
    ]
}

/// Walks for trajectory sampling.
pub fn trajectory_cases() -> Vec<Case> {
    vec![
        case("quantum-ring-6", fixtures::quantum_ring(6, 2, 7), 0, 3),
        case("example-5.5-nonnormal", fixtures::example_5_5_nonnormal(50).unwrap(), 0, 0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_are_in_range() {
        for k in passage_cases().into_iter().chain(trajectory_cases()) {
            assert!(k.from < k.walk.n_sites() && k.to < k.walk.n_sites(), "{}", k.name);
            assert_eq!(k.rho.nrows(), k.walk.dim(k.from));
        }
    }
}
