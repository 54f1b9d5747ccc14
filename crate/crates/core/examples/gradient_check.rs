//! Compares backpropagated gradients of a small model with central
//! differences, sampling parameters from every group.
//!
//! cargo run --release --example gradient_check

use fdvm::degrade::synthetic_source;
use fdvm::gradcheck::{check_model, randomize_zero_params};
use fdvm::model::{build_model, ModelConfig};

fn main() -> fdvm::Result<()> {
    let cfg = ModelConfig { channels: 4, blocks_per_path: 2, ssm_state_dim: 4, ssm_fixed_hw: 8, ..Default::default() };
    let mut weights = build_model(&cfg, 0)?;
    // Zero-initialised heads would block every upstream gradient.
    randomize_zero_params(&mut weights, 0.2, 1);
    let img = synthetic_source(8, 8, 2).reshape([1, 3, 8, 8])?;

    let report = check_model(&weights, &img, 30, 3)?;
    for e in &report.entries {
        println!("{:<40} {:>+.6e} {:>+.6e}  rel {:.1e}", format!("{}[{}]", e.name, e.index), e.analytic, e.numeric, e.rel_error());
    }
    println!("worst relative error {:.2e}", report.max_rel_error());
    Ok(())
}
