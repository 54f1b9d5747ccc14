//! Builds a small paired exposure dataset from procedural source images.
//!
//! cargo run --example synthesize_dataset -- <out_dir> [n_pairs]

use std::path::PathBuf;

use fdvm::degrade::{build_dataset, write_synthetic_sources, CrfModel, Split, DEFAULT_TRAIN_FRAC};

fn main() -> fdvm::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "fdvm-dataset".into()));
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(12);

    let crf = CrfModel::default();
    println!("f(0.5, k=2) = {:.5}", crf.map(0.5, 2.0));
    write_synthetic_sources(&out.join("sources"), 4, 64, 64, 0)?;
    let manifest = build_dataset(&out.join("sources"), &out, n, DEFAULT_TRAIN_FRAC, 0, &crf)?;
    for r in manifest.records.iter().take(4) {
        println!("{}  E={:+.3}  {:?}", r.degraded.display(), r.exposure, r.split);
    }
    println!(
        "{} pairs: {} train, {} test, manifest at {}",
        manifest.records.len(),
        manifest.split(Split::Train).count(),
        manifest.split(Split::Test).count(),
        out.join(fdvm::degrade::MANIFEST_FILE).display()
    );
    Ok(())
}
