//! Runs every acceptance criterion at its stated tolerance and prints one
//! PASS/FAIL line each. Failing checks are listed underneath, indented.
//! The process exits nonzero if any criterion fails.

use std::time::Instant;

use oqw_cli::suite::{run_criterion, SuiteOptions, CRITERIA};

fn main() {
    let opts = SuiteOptions::default();
    let mut failed = 0usize;
    println!("\nrunning {} acceptance criteria", CRITERIA.len());
    for (number, title) in CRITERIA {
        let start = Instant::now();
        let report = run_criterion(number, &opts);
        let secs = start.elapsed().as_secs_f64();
        let checks = report.lines.len();
        let bad: Vec<_> = report.lines.iter().filter(|l| !l.passed).collect();
        let ok = report.passed() && checks > 0;
        let tag = if ok { "PASS" } else { "FAIL" };
        println!(
            "{tag} criterion {number:>2} {title}: {}/{checks} checks passed ({secs:.1} s)",
            checks - bad.len()
        );
        for l in &bad {
            println!("       [{}] {}: {}", l.group, l.check, l.detail);
        }
        if !ok {
            failed += 1;
        }
    }
    println!(
        "\nacceptance result: {} passed; {failed} failed\n",
        CRITERIA.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
