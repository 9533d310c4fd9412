//! Acceptance criteria at pinned tolerances, one line per criterion.
//!
//! `POLARTOMO_CRITERIA=1,3,9` restricts the run to the listed criteria.

use std::process::ExitCode;

use polartomo::selftest::run_all;

fn main() -> ExitCode {
    let ids: Vec<u32> = std::env::var("POLARTOMO_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    let results = match run_all(&ids, |r| println!("{r}")) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("acceptance: {e}");
            return ExitCode::FAILURE;
        }
    };
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
