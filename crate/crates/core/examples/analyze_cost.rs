//! Parameter and MAC ledger of the default network, with the per-block
//! breakdown and both FLOP conventions at 256x256.
//!
//!     cargo run --example analyze_cost [width]

use laffnet::{build, Gate};

fn main() -> laffnet::Result<()> {
    let width = std::env::args().nth(1).and_then(|w| w.parse().ok()).unwrap_or(16);
    let model = build(width, Gate::Sigmoid, 0)?;
    let report = model.count_flops(256, 256);
    print!("{}", report.to_text());

    let (conv, ratio) = report.nearest_convention();
    println!("\nsummary: {} bias-free weights, {:.3} GMAC, nearest convention {conv:?} ({ratio:.2}x)", report.params_no_bias, report.gmacs());
    Ok(())
}
