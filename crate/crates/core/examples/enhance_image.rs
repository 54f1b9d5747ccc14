//! Corrects one PNG with a checkpoint (or a fresh model, which is the
//! identity) and writes the result.
//!
//! cargo run --example enhance_image -- <input.png> <output.png> [checkpoint.fdvm]

use std::path::PathBuf;

use fdvm::imageio::{load_rgb, save_png};
use fdvm::model::{build_model, infer, ModelConfig};
use fdvm::train::Checkpoint;

fn main() -> fdvm::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let [input, output, rest @ ..] = &args[..] else {
        eprintln!("usage: enhance_image <input.png> <output.png> [checkpoint.fdvm]");
        std::process::exit(2);
    };
    let weights = match rest.first() {
        Some(ck) => Checkpoint::load(ck)?.weights,
        None => build_model(&ModelConfig::default(), 0)?,
    };
    let img = load_rgb(input)?;
    let [c, h, w]: [usize; 3] = img.dims().try_into().unwrap();
    let out = infer(&weights, &img.clone().reshape([1, c, h, w])?)?.reshape([c, h, w])?;
    save_png(output, &out)?;
    println!("{}x{} -> {}, mean change {:.4}", h, w, output.display(), (out.sum() - img.sum()).abs() / img.numel() as f64);
    Ok(())
}
