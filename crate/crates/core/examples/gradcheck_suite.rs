//! Runs the full gradient-check suite and prints the table.
//!
//! ```bash
//! cargo run -p crpn --example gradcheck_suite
//! ```

use crpn::checks::{format_table, run_checks, suite};

fn main() {
    let results = run_checks(&suite());
    print!("{}", format_table(&results));
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
}
