//! The position process of a minimal dilation is the classical chain.

use oqw_core::fixtures;
use oqw_core::linalg;
use oqw_core::trajectory::{self, StopRule};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn word_frequencies_pass_chi_square() {
    let w = fixtures::asymmetric_three_cycle();
    let p = |to: usize, from: usize| w.transition(to, from).map_or(0.0, |l| l[(0, 0)].norm_sqr());
    let n = 100_000;
    let recs = trajectory::simulate(&w, 0, &linalg::identity(1), 3, &StopRule::Horizon, false, n, 2024).unwrap();
    for len in 1..=3usize {
        let cells = 3usize.pow(len as u32);
        let mut observed = vec![0.0; cells];
        for r in &recs {
            let code = r.sites[1..=len].iter().fold(0, |acc, &s| acc * 3 + s);
            observed[code] += 1.0;
        }
        let mut chi2 = 0.0;
        let mut df = 0;
        for (code, &o) in observed.iter().enumerate() {
            let mut word = vec![0usize; len];
            let mut x = code;
            for k in (0..len).rev() {
                word[k] = x % 3;
                x /= 3;
            }
            let mut prob = 1.0;
            let mut prev = 0;
            for &s in &word {
                prob *= p(s, prev);
                prev = s;
            }
            if prob > 0.0 {
                let e = prob * n as f64;
                chi2 += (o - e) * (o - e) / e;
                df += 1;
            } else {
                assert_eq!(o, 0.0, "impossible word observed");
            }
        }
        let crit = ChiSquared::new((df - 1) as f64).unwrap().inverse_cdf(0.99);
        assert!(chi2 < crit, "length {len}: chi2 {chi2} ≥ {crit}");
    }
}
