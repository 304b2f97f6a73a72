//! Full-reference and no-reference scores of synthetic degradations, with
//! the UIQM components broken out.
//!
//!     cargo run --example evaluate_metrics

use laffnet::metrics::{evaluate_batch, uiqm_components, EvalItem, MetricsConfig};
use laffnet::synth::{degrade, procedural_image, DegradationParams, Depth};

fn main() -> laffnet::Result<()> {
    let cfg = MetricsConfig::default();
    let clean = procedural_image(128, 128, 3);
    let mut items = vec![EvalItem { name: "clean".into(), image: clean.clone(), reference: Some(clean.clone()) }];
    for z in [1.0, 3.0, 6.0] {
        let p = DegradationParams {
            beta_d: [0.6, 0.25, 0.175],
            beta_b: [0.6, 0.25, 0.175],
            b_inf: [0.1, 0.5, 0.5],
            depth: Depth::Uniform(z),
        };
        let img = degrade(&clean, &p)?.image;
        let c = uiqm_components(&img, &cfg);
        println!("z = {z}: UICM {:7.3}  UISM {:6.3}  UIConM {:.4}", c.uicm, c.uism, c.uiconm);
        items.push(EvalItem { name: format!("z{z}"), image: img, reference: Some(clean.clone()) });
    }
    // Identical images report the capped PSNR rather than infinity.
    let report = evaluate_batch(&items, &cfg)?;
    print!("\n{}", report.to_text());
    Ok(())
}
