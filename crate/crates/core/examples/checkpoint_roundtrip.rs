//! Saves a model to a checkpoint, reloads it and measures how far the
//! 32-bit storage moves the outputs.
//!
//! cargo run --example checkpoint_roundtrip

use fdvm::degrade::synthetic_source;
use fdvm::gradcheck::randomize_zero_params;
use fdvm::model::{build_model, infer, ModelConfig};
use fdvm::train::{AdamState, Checkpoint};

fn main() -> fdvm::Result<()> {
    let cfg = ModelConfig { channels: 8, blocks_per_path: 2, ssm_state_dim: 4, ssm_fixed_hw: 16, ..Default::default() };
    let mut weights = build_model(&cfg, 0)?;
    randomize_zero_params(&mut weights, 0.05, 1);
    let ck = Checkpoint { adam: Some(AdamState::new(&weights)), weights, rng: None, epoch: 0 };

    let path = std::env::temp_dir().join("fdvm-example.fdvm");
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    let x = synthetic_source(24, 24, 2).reshape([1, 3, 24, 24])?;
    let diff = infer(&back.weights, &x)?.max_abs_diff(&infer(&ck.weights, &x)?);
    println!(
        "{} parameters, {} bytes on disk, max output change {diff:.2e}",
        back.weights.param_count(),
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0)
    );
    Ok(())
}
