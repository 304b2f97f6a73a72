//! Enhances one image with a saved model, or with a freshly initialized one
//! when no checkpoint is given, and writes the result.
//!
//!     cargo run --example enhance [model.laff] [input.png] [output.png]

use std::path::{Path, PathBuf};

use laffnet::synth::{degrade, procedural_image, DegradationParams};
use laffnet::{Image, LaffNetModel};

fn main() -> laffnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model = match args.first() {
        Some(p) => LaffNetModel::load(Path::new(p))?,
        None => LaffNetModel::<f32>::build(Default::default(), 0)?,
    };
    let input = match args.get(1) {
        Some(p) => Image::load(Path::new(p))?,
        None => degrade(&procedural_image(96, 96, 5), &DegradationParams::uniform(0.3, 0.4, 3.0))?.image,
    };
    let out = args.get(2).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("laffnet-enhanced.png"));

    // Any spatial size works: every layer is same-padded.
    let enhanced = model.enhance(&input.to_tensor())?;
    Image::from_tensor(&enhanced, 0)?.save(&out)?;
    println!(
        "{}x{} image through {} local blocks (width {}) -> {}",
        input.width,
        input.height,
        model.blocks.len(),
        model.width(),
        out.display()
    );
    Ok(())
}
