//! End-to-end acceptance gate: every shipping criterion must pass on the
//! toy configuration. `run_acceptance` prints one pass/fail line per
//! criterion (visible with `-- --nocapture`); the suite budget is well
//! under thirty minutes on a laptop CPU.

use std::path::PathBuf;

use stpyr_cli::acceptance::run_acceptance;
use stpyr_cli::commands::RunContext;
use stpyr_cli::config::{Config, Settings};

#[test]
fn all_acceptance_criteria_pass_on_the_toy_config() {
    let cfg = Config::default_toy();
    let settings = Settings::from_config(&cfg).expect("toy config validates");
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let ctx = RunContext { cfg, settings, seed: 0, out, variant_override: None };

    let report = run_acceptance(&ctx).expect("suite runs to completion");
    let failed: Vec<&str> =
        report.results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
