//! Builtin walks: the worked examples, their truncations, and small classical
//! and doubly stochastic test walks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{OqwError, Result};
use crate::linalg::{self, c, real_matrix, CMatrix, C64};
use crate::model::{minimal_dilation, WalkSpec};

/// How a line window `[a, b]` is closed off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LineBoundary {
    /// Endpoints become traps with `L = Id`.
    Absorbing,
    /// Transitions leaving the window are dropped; endpoints are leaky.
    Taboo,
}

/// Nearest-neighbour walk on `{a, ..., b}` with `L_{k+1,k} = L_+` and
/// `L_{k-1,k} = L_-`.
pub fn line_walk(a: i64, b: i64, l_plus: &CMatrix, l_minus: &CMatrix, boundary: LineBoundary) -> Result<WalkSpec> {
    if b <= a {
        return Err(OqwError::Input(format!("empty line range [{a}, {b}]")));
    }
    let d = l_plus.nrows();
    if l_plus.shape() != (d, d) || l_minus.shape() != (d, d) {
        return Err(OqwError::Structural("line template operators must be square of equal size".into()));
    }
    let mut walk = WalkSpec::new((a..=b).map(|k| (k.to_string(), d)))?;
    for k in a..=b {
        let from = k.to_string();
        let at_end = k == a || k == b;
        if boundary == LineBoundary::Absorbing && at_end {
            walk.set_transition(&from, &from, linalg::identity(d))?;
            continue;
        }
        if k < b {
            walk.set_transition(&(k + 1).to_string(), &from, l_plus.clone())?;
        }
        if k > a {
            walk.set_transition(&(k - 1).to_string(), &from, l_minus.clone())?;
        }
        if at_end {
            walk.set_leaky(&from)?;
        }
    }
    Ok(walk)
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(OqwError::Input(format!("parameter {p} must lie in (0, 1)")))
    }
}

fn check_n(n: usize) -> Result<()> {
    if n >= 2 {
        Ok(())
    } else {
        Err(OqwError::Input(format!("truncation N = {n} must be at least 2")))
    }
}

/// Three sites with `C^2` fibers: `0 → 1` on `e1`, `0 → 2` on `e2`, `1 → 0`
/// and `2 → 2` unitary.
pub fn example_5_1() -> WalkSpec {
    let mut w = WalkSpec::new([("0", 2), ("1", 2), ("2", 2)]).expect("static sites");
    w.set_transition("1", "0", linalg::diag(&[1.0, 0.0])).unwrap();
    w.set_transition("2", "0", linalg::diag(&[0.0, 1.0])).unwrap();
    w.set_transition("0", "1", linalg::identity(2)).unwrap();
    w.set_transition("2", "2", linalg::identity(2)).unwrap();
    w
}

/// Half-line walk with a two-dimensional fiber at the origin, truncated to
/// `{0, ..., N}`; site `N` is leaky.
pub fn example_5_2(p: f64, n: usize) -> Result<WalkSpec> {
    check_p(p)?;
    check_n(n)?;
    let q = 1.0 - p;
    let mut w = WalkSpec::new((0..=n).map(|k| (k.to_string(), if k == 0 { 2 } else { 1 })))?;
    w.set_transition("0", "0", real_matrix(2, 2, &[0.0, 1.0, 0.0, 0.0]))?;
    w.set_transition("1", "0", real_matrix(1, 2, &[1.0, 0.0]))?;
    let s = (p / 2.0).sqrt();
    w.set_transition("0", "1", real_matrix(2, 1, &[s, s]))?;
    for k in 1..n {
        w.set_transition(&k.to_string(), &(k + 1).to_string(), CMatrix::from_element(1, 1, c(p.sqrt())))?;
        w.set_transition(&(k + 1).to_string(), &k.to_string(), CMatrix::from_element(1, 1, c(q.sqrt())))?;
    }
    w.set_leaky(&n.to_string())?;
    Ok(w)
}

/// Four sites, `h_0 = C` (absorbing) and `C^2` elsewhere.
pub fn example_5_4() -> WalkSpec {
    let mut w = WalkSpec::new([("0", 1), ("1", 2), ("2", 2), ("3", 2)]).expect("static sites");
    // √3/2 rounded up one ulp, so that r3² + 1/4 == 1 holds in floating point.
    let r3 = f64::from_bits(0.75f64.sqrt().to_bits() + 1);
    w.set_transition("0", "0", linalg::identity(1)).unwrap();
    w.set_transition("0", "1", real_matrix(1, 2, &[0.5, 0.0])).unwrap();
    w.set_transition("2", "1", linalg::diag(&[r3, 1.0])).unwrap();
    w.set_transition("1", "2", linalg::diag(&[0.0, 1.0])).unwrap();
    w.set_transition("3", "2", linalg::diag(&[1.0, 0.0])).unwrap();
    w.set_transition("2", "3", real_matrix(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
    w
}

/// Homogeneous walk on `[-N, N]` with `L_± = diag(√p_k), diag(√q_k)`.
pub fn example_5_5_normal(p1: f64, p2: f64, n: usize) -> Result<WalkSpec> {
    check_p(p1)?;
    check_p(p2)?;
    check_n(n)?;
    let lp = linalg::diag(&[p1.sqrt(), p2.sqrt()]);
    let lm = linalg::diag(&[(1.0 - p1).sqrt(), (1.0 - p2).sqrt()]);
    line_walk(-(n as i64), n as i64, &lp, &lm, LineBoundary::Taboo)
}

/// Homogeneous walk on `[-N, N]` with rank-one non-normal `L_±`.
pub fn example_5_5_nonnormal(n: usize) -> Result<WalkSpec> {
    check_n(n)?;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let lp = real_matrix(2, 2, &[s, s, 0.0, 0.0]);
    let lm = real_matrix(2, 2, &[0.0, 0.0, s, -s]);
    line_walk(-(n as i64), n as i64, &lp, &lm, LineBoundary::Taboo)
}

/// Gambler's ruin on `{0, ..., n}` with up-probability `p` and absorbing ends.
pub fn gamblers_ruin(n: usize, p: f64) -> Result<WalkSpec> {
    check_n(n)?;
    check_p(p)?;
    let mut t = vec![vec![0.0; n + 1]; n + 1];
    t[0][0] = 1.0;
    t[n][n] = 1.0;
    for k in 1..n {
        t[k + 1][k] = p;
        t[k - 1][k] = 1.0 - p;
    }
    let labels: Vec<String> = (0..=n).map(|k| k.to_string()).collect();
    minimal_dilation(&t, &labels)
}

/// Classical walk on `{0, ..., n}` stepping up with probability `p`; site 0
/// reflects (stays with probability `1 − p`) and site `n` is leaky.
pub fn leaky_biased_line(n: usize, p: f64) -> Result<WalkSpec> {
    check_n(n)?;
    check_p(p)?;
    let mut w = WalkSpec::new((0..=n).map(|k| (k.to_string(), 1)))?;
    let one = |x: f64| CMatrix::from_element(1, 1, c(x.sqrt()));
    w.set_transition("0", "0", one(1.0 - p))?;
    for k in 0..=n {
        if k < n {
            w.set_transition(&(k + 1).to_string(), &k.to_string(), one(p))?;
        }
        if k > 0 {
            w.set_transition(&(k - 1).to_string(), &k.to_string(), one(1.0 - p))?;
        }
    }
    w.set_leaky(&n.to_string())?;
    Ok(w)
}

/// Deterministic cycle `0 → 1 → ... → n−1 → 0`.
pub fn deterministic_cycle(n: usize) -> WalkSpec {
    let mut t = vec![vec![0.0; n]; n];
    for k in 0..n {
        t[(k + 1) % n][k] = 1.0;
    }
    let labels: Vec<String> = (0..n).map(|k| k.to_string()).collect();
    minimal_dilation(&t, &labels).expect("permutation matrix")
}

/// Symmetric nearest-neighbour walk on a cycle of length `n ≥ 3`.
pub fn symmetric_cycle(n: usize) -> WalkSpec {
    let mut t = vec![vec![0.0; n]; n];
    for k in 0..n {
        t[(k + 1) % n][k] += 0.5;
        t[(k + n - 1) % n][k] += 0.5;
    }
    let labels: Vec<String> = (0..n).map(|k| k.to_string()).collect();
    minimal_dilation(&t, &labels).expect("doubly stochastic matrix")
}

/// Three-cycle that turns clockwise with probability 0.7, back with 0.2 and
/// stays with 0.1; irreducible but not reversible.
pub fn asymmetric_three_cycle() -> WalkSpec {
    let mut t = vec![vec![0.0; 3]; 3];
    for k in 0..3 {
        t[(k + 1) % 3][k] = 0.7;
        t[(k + 2) % 3][k] = 0.2;
        t[k][k] = 0.1;
    }
    minimal_dilation(&t, &["0", "1", "2"]).expect("stochastic matrix")
}

/// Random unitary from Gram-Schmidt on a matrix with uniform entries.
pub fn random_unitary(d: usize, rng: &mut impl Rng) -> CMatrix {
    loop {
        let m = CMatrix::from_fn(d, d, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let mut q = CMatrix::zeros(d, 0);
        if linalg::extend_basis(&mut q, &m, 1e-6) == d {
            return q;
        }
    }
}

/// Doubly stochastic ring: `n ≥ 3` sites with `C^d` fibers,
/// `L_{k+1,k} = U_k/√3`, `L_{k,k+1} = U_k^†/√3` and a self-loop `L_{k,k} = R_k/√3`
/// with seeded random unitaries `U_k` and reflections `R_k = Id − 2|v_k⟩⟨v_k|`.
/// Satisfies `L_{i,j} = L_{j,i}^†`, so `𝔐* = 𝔐`. The reflections break the
/// commutativity of loop holonomies, which makes the walk irreducible.
pub fn quantum_ring(n: usize, d: usize, seed: u64) -> WalkSpec {
    assert!(n >= 3, "ring needs at least three sites");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = WalkSpec::new((0..n).map(|k| (k.to_string(), d))).expect("distinct ids");
    let s = c(1.0 / 3f64.sqrt());
    for k in 0..n {
        let u = random_unitary(d, &mut rng);
        let next = (k + 1) % n;
        w.set_transition_at(next, k, &u * s).unwrap();
        w.set_transition_at(k, next, u.adjoint() * s).unwrap();
        let v = random_unitary(d, &mut rng).column(0).into_owned();
        let refl = if d == 1 { linalg::identity(1) } else { linalg::identity(d) - linalg::projector(&v) * c(2.0) };
        w.set_transition_at(k, k, refl * s).unwrap();
    }
    w
}

/// Fiberwise direct sum of two walks on the same site ids:
/// `h_i = h^a_i ⊕ h^b_i`, `L_{i,j} = L^a_{i,j} ⊕ L^b_{i,j}`.
pub fn fiber_direct_sum(a: &WalkSpec, b: &WalkSpec) -> Result<WalkSpec> {
    if a.site_ids() != b.site_ids() {
        return Err(OqwError::Input("direct sum needs identical site lists".into()));
    }
    let mut w = WalkSpec::new(
        a.site_ids()
            .iter()
            .enumerate()
            .map(|(k, id)| (id.clone(), a.dim(k) + b.dim(k))),
    )?;
    for i in 0..a.n_sites() {
        for j in 0..a.n_sites() {
            let la = a.transition(i, j).cloned().unwrap_or_else(|| linalg::zeros(a.dim(i), a.dim(j)));
            let lb = b.transition(i, j).cloned().unwrap_or_else(|| linalg::zeros(b.dim(i), b.dim(j)));
            w.set_transition_at(i, j, linalg::direct_sum(&la, &lb))?;
        }
        if a.is_leaky(i) || b.is_leaky(i) {
            w.set_leaky_at(i);
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_walk;

    #[test]
    fn every_fixture_validates() {
        let walks = vec![
            example_5_1(),
            example_5_2(0.75, 60).unwrap(),
            example_5_2(0.25, 40).unwrap(),
            example_5_4(),
            example_5_5_normal(0.5, 0.3, 10).unwrap(),
            example_5_5_nonnormal(10).unwrap(),
            gamblers_ruin(10, 0.5).unwrap(),
            leaky_biased_line(8, 0.3).unwrap(),
            deterministic_cycle(3),
            symmetric_cycle(5),
            asymmetric_three_cycle(),
            quantum_ring(5, 2, 11),
        ];
        for w in walks {
            let r = validate_walk(&w).unwrap();
            assert!(r.accepted, "max residual {}", r.max_residual);
        }
    }

    #[test]
    fn parameters_are_range_checked() {
        assert!(example_5_2(1.0, 10).is_err());
        assert!(example_5_2(0.5, 1).is_err());
        assert!(example_5_5_normal(0.0, 0.5, 10).is_err());
    }

    #[test]
    fn absorbing_line_has_traps() {
        let lp = linalg::identity(1) * c(0.5f64.sqrt());
        let w = line_walk(0, 4, &lp, &lp, LineBoundary::Absorbing).unwrap();
        assert_eq!(w.successors(0), vec![0]);
        assert_eq!(w.successors(4), vec![4]);
        assert!(validate_walk(&w).unwrap().accepted);
    }

    #[test]
    fn ring_is_doubly_stochastic() {
        let w = quantum_ring(4, 2, 3);
        for (&(i, j), l) in w.transitions() {
            let back = w.transition(j, i).unwrap();
            assert!(linalg::max_abs(&(l - back.adjoint())) < 1e-14);
        }
    }
}
