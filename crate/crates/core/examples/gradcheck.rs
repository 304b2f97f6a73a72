//! Finite-difference verification of the AFF block and the losses in 64-bit
//! precision. The `laffnet gradcheck` subcommand runs every suite.
//!
//!     cargo run --example gradcheck [seed]

use laffnet::gradcheck::{run_suite, GradcheckConfig, Suite};

fn main() -> laffnet::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = GradcheckConfig { seed, ..Default::default() };
    for suite in [Suite::Aff, Suite::Losses] {
        let report = run_suite(suite, &cfg)?;
        print!("{}", report.to_text());
        if let Some(w) = report.worst() {
            println!("worst {}: {:.2e} against {:.0e}\n", w.item, w.max_rel_err, w.threshold);
        }
        assert!(report.all_passed(), "{suite} suite failed");
    }
    Ok(())
}
