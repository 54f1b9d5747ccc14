//! Trains the full model and both ablations briefly on the same pairs and
//! prints their parameter counts, losses and PSNR.
//!
//! cargo run --release --example ablation -- [steps]

use fdvm::degrade::{lecarm_apply, synthetic_source, CrfModel};
use fdvm::metrics::psnr;
use fdvm::model::{build_model, infer, param_count, Ablation, ModelConfig};
use fdvm::train::{train_on, TrainConfig, TrainingSet};

fn main() -> fdvm::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let crf = CrfModel::default();
    let clean: Vec<_> = (0..4).map(|i| synthetic_source(32, 32, i)).collect();
    let degraded = clean
        .iter()
        .zip([-0.7, 0.6, -0.4, 0.8])
        .map(|(c, e)| lecarm_apply(c, e, &crf))
        .collect::<fdvm::Result<Vec<_>>>()?;
    let set = TrainingSet::from_pairs(degraded, clean)?;

    for ablation in Ablation::ALL {
        let cfg = ModelConfig { channels: 16, blocks_per_path: 2, ssm_state_dim: 8, ssm_fixed_hw: 32, ablation };
        let tc = TrainConfig { batch_size: 4, epochs: steps, patch_size: 32, seed: 1, ..Default::default() };
        let out = train_on(build_model(&cfg, 1)?, &set, &tc)?;
        let w = &out.checkpoint.weights;
        let mut total = 0.0;
        for (x, y) in set.inputs.iter().zip(&set.targets) {
            let pred = infer(w, &x.clone().reshape([1, 3, 32, 32])?)?.reshape([3, 32, 32])?.map(|v| v.clamp(0.0, 1.0));
            total += psnr(&pred, y)?;
        }
        println!(
            "{:<20} params {:>6}  loss {:.5} -> {:.5}  PSNR {:.2} dB",
            ablation.as_str(),
            param_count(&cfg),
            out.log.steps[0],
            out.log.steps[out.log.steps.len() - 1],
            total / set.len() as f64
        );
    }
    Ok(())
}
