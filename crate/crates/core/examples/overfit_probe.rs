//! Overfits four synthetic pairs with full-batch Adam and prints the loss
//! curve. The acceptance suite runs the 500-step, 64x64 version of this.
//!
//!     cargo run --example overfit_probe [steps] [size]

use std::time::Instant;

use laffnet::metrics::MetricsConfig;
use laffnet::synth::{synth_samples, CleanSource, PairedSample, SynthConfig};
use laffnet::trainer::{evaluate, RunOptions, TrainConfig, Trainer};

fn main() -> laffnet::Result<()> {
    laffnet::configure_threads_from_env();
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(150);
    let size: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(32);

    let data: Vec<PairedSample> = synth_samples(
        &SynthConfig { n: 4, width: size, height: size, seed: 7, ..Default::default() },
        &CleanSource::Procedural,
    )?
    .into_iter()
    .map(|s| s.sample)
    .collect();
    let before = evaluate(&laffnet::LaffNetModel::<f32>::build(Default::default(), 1)?, &data, &MetricsConfig::default())?;

    // One batch holds the whole set, so an epoch is one step.
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: steps,
        lr_drop_epoch: steps * 4 / 5,
        val_every: 0,
        checkpoint_every: 0,
        seed: 1,
        ..Default::default()
    };
    let mut trainer = Trainer::new(cfg)?;
    let t0 = Instant::now();
    let summary = trainer.run(&data, None, &RunOptions::default())?;
    for r in summary.steps.iter().filter(|r| r.step == 1 || r.step % 10 == 0) {
        println!(
            "step {:>4}  lr {:.0e}  total {:.4}  charbonnier {:.4}  ssim {:.4}  perceptual {:.4}",
            r.step, r.lr, r.loss_total, r.loss_cha, r.loss_ssim, r.loss_per
        );
    }
    let after = evaluate(&trainer.model, &data, &MetricsConfig::default())?;
    println!(
        "train PSNR {:.2} -> {:.2} dB in {:.1} s",
        before.summary["psnr"].mean,
        after.summary["psnr"].mean,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
