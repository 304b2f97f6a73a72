//! Compares the AFF fusion against the plain two-convolution block and the
//! alternative gates: cost at 256x256, then a short overfit on the same data.
//!
//!     cargo run --example ablation [steps]

use laffnet::metrics::MetricsConfig;
use laffnet::synth::{synth_samples, CleanSource, PairedSample, SynthConfig};
use laffnet::trainer::{evaluate, RunOptions, TrainConfig, Trainer};
use laffnet::{FusionVariant, Gate, LaffNetModel, ModelConfig};

fn main() -> laffnet::Result<()> {
    laffnet::configure_threads_from_env();
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let data: Vec<PairedSample> = synth_samples(&SynthConfig { n: 4, width: 32, height: 32, seed: 7, ..Default::default() }, &CleanSource::Procedural)?
        .into_iter()
        .map(|s| s.sample)
        .collect();

    let variants = [
        ("aff/sigmoid", ModelConfig::default()),
        ("aff/softmax", ModelConfig { gate: Gate::Softmax, ..Default::default() }),
        ("aff/no gate", ModelConfig { gate: Gate::None, ..Default::default() }),
        ("vanilla", ModelConfig { variant: FusionVariant::Vanilla, ..Default::default() }),
        ("no skips", ModelConfig { skip_connections: false, ..Default::default() }),
    ];
    println!("{:<12} {:>9} {:>8} {:>11} {:>9}", "variant", "params", "GMAC", "final loss", "PSNR");
    for (name, model) in variants {
        let cost = LaffNetModel::<f32>::build(model, 0)?.count_flops(256, 256);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: steps,
            lr_drop_epoch: steps,
            val_every: 0,
            checkpoint_every: 0,
            seed: 1,
            model,
            ..Default::default()
        };
        let mut t = Trainer::new(cfg)?;
        let s = t.run(&data, None, &RunOptions::default())?;
        let psnr = evaluate(&t.model, &data, &MetricsConfig::default())?.summary["psnr"].mean;
        let last = s.steps.last().map_or(f64::NAN, |r| r.loss_total);
        println!("{name:<12} {:>9} {:>8.3} {last:>11.4} {psnr:>9.2}", cost.params_no_bias, cost.gmacs());
    }
    Ok(())
}
