//! Splits an image into amplitude and phase, shows the network-form ranges,
//! and rebuilds the image from them.
//!
//! cargo run --example spectral_roundtrip -- [image.png]

use fdvm::degrade::synthetic_source;
use fdvm::imageio::load_rgb;
use fdvm::spectral::{analyze, recompose};

fn main() -> fdvm::Result<()> {
    let img = match std::env::args().nth(1) {
        Some(path) => load_rgb(path.as_ref())?,
        None => synthetic_source(48, 64, 0),
    };
    let d = img.dims().to_vec();
    let batch = img.clone().reshape([1, d[0], d[1], d[2]])?;

    let pair = analyze(&batch)?;
    println!("image {}x{}", d[1], d[2]);
    println!("log1p amplitude in [{:.3}, {:.3}]", pair.amplitude.min(), pair.amplitude.max());
    println!("phase / pi      in [{:.3}, {:.3}]", pair.phase.min(), pair.phase.max());

    let back = recompose(&pair)?;
    println!("reconstruction max abs error {:.2e}", back.max_abs_diff(&batch));
    Ok(())
}
