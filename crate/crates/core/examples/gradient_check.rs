//! Analytic layer gradients against a finite-difference oracle for every
//! kernel configuration.
//!
//! cargo run --release --example gradient_check -- [seeds]

use phsic::rules::gradient_oracle_suite;

fn main() -> phsic::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse().expect("seed count")).unwrap_or(20);
    for r in gradient_oracle_suite(0..seeds)? {
        println!(
            "{:<18} {:>4} instances  worst relative {:.2e}  worst absolute (tiny entries) {:.2e}  {}",
            r.case.name,
            r.instances,
            r.worst.max_relative,
            r.worst.max_absolute_small,
            if r.passes(1e-5, 1e-8) { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
