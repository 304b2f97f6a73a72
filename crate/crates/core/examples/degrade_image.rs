//! Runs the image-formation model over a depth sweep and writes each result
//! next to the clean image.
//!
//!     cargo run --example degrade_image [out_dir]

use std::path::PathBuf;

use laffnet::metrics::{self, MetricsConfig};
use laffnet::synth::{degrade, procedural_image, DegradationParams, Depth};

fn main() -> laffnet::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("laffnet-degrade"));
    std::fs::create_dir_all(&out)?;

    let clean = procedural_image(128, 128, 0);
    clean.save(&out.join("clean.png"))?;
    // Red attenuates fastest, so deep water drifts toward blue-green.
    let base = DegradationParams {
        beta_d: [0.6, 0.25, 0.175],
        beta_b: [0.6, 0.25, 0.175],
        b_inf: [0.1, 0.5, 0.5],
        depth: Depth::Uniform(0.0),
    };
    let cfg = MetricsConfig::default();
    for z in [0.5, 1.0, 2.0, 4.0, 8.0] {
        let d = degrade(&clean, &base.at_depth(z))?;
        let name = format!("z{z:04.1}.png");
        d.image.save(&out.join(&name))?;
        println!(
            "{name}: psnr {:6.2} dB  uiqm {:.3}  clamped {:.2}%",
            metrics::psnr(&d.image, &clean, 1.0)?,
            metrics::uiqm(&d.image, &cfg),
            100.0 * d.clamp_fraction
        );
    }

    // A depth ramp: shallow at the top row, deep at the bottom.
    let ramp = DegradationParams { depth: Depth::VerticalRamp { top: 0.5, bottom: 6.0 }, ..base };
    degrade(&clean, &ramp)?.image.save(&out.join("ramp.png"))?;
    println!("wrote {}", out.display());
    Ok(())
}
