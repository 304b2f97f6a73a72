//! Trains a few steps, checkpoints, resumes in a fresh trainer and shows the
//! two continuations are bit-identical.
//!
//!     cargo run --example checkpoint_roundtrip

use laffnet::checkpoint::Checkpoint;
use laffnet::synth::{synth_samples, CleanSource, PairedSample, SynthConfig};
use laffnet::trainer::{RunOptions, TrainConfig, Trainer};
use laffnet::ModelConfig;

fn main() -> laffnet::Result<()> {
    let data: Vec<PairedSample> = synth_samples(&SynthConfig { n: 4, width: 24, height: 24, seed: 2, ..Default::default() }, &CleanSource::Procedural)?
        .into_iter()
        .map(|s| s.sample)
        .collect();
    let cfg = TrainConfig {
        batch_size: 2,
        max_steps: Some(4),
        model: ModelConfig::with_width(8),
        val_every: 0,
        checkpoint_every: 0,
        ..Default::default()
    };
    let mut a = Trainer::new(cfg)?;
    a.run(&data, None, &RunOptions::default())?;

    let path = std::env::temp_dir().join("laffnet-roundtrip.laff");
    a.to_checkpoint()?.write(&path)?;
    let ck = Checkpoint::read(&path)?;
    println!("{}: {} tensors, {} bytes, step {}", path.display(), ck.manifest.tensors.len(), std::fs::metadata(&path)?.len(), a.step);

    let mut b = Trainer::resume(&ck, None)?;
    a.cfg.max_steps = Some(10);
    b.cfg.max_steps = Some(10);
    let ra = a.run(&data, None, &RunOptions::default())?;
    let rb = b.run(&data, None, &RunOptions::default())?;
    for (x, y) in ra.steps.iter().zip(&rb.steps) {
        println!("step {:>2}: {:.6} {} {:.6}", x.step, x.loss_total, if x == y { "==" } else { "!=" }, y.loss_total);
    }
    assert_eq!(a.model.params, b.model.params);
    println!("parameters after step {} are bit-identical", a.step);
    Ok(())
}
