//! Overfits a few synthesized pairs and reports loss and PSNR before and after.
//!
//! cargo run --release --example train_tiny -- [steps]

use fdvm::degrade::{build_dataset, write_synthetic_sources, CrfModel};
use fdvm::metrics::psnr;
use fdvm::model::{build_model, infer, ModelConfig};
use fdvm::train::{TrainConfig, Trainer, TrainingSet};
use fdvm::Tensor;

fn mean_psnr(pred: impl Fn(&Tensor) -> Tensor, set: &TrainingSet) -> f64 {
    let total: f64 = set.inputs.iter().zip(&set.targets).map(|(x, y)| psnr(&pred(x), y).unwrap()).sum();
    total / set.len() as f64
}

fn main() -> fdvm::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let dir = std::env::temp_dir().join("fdvm-train-tiny");
    write_synthetic_sources(&dir.join("src"), 4, 64, 64, 1)?;
    let manifest = build_dataset(&dir.join("src"), &dir.join("ds"), 4, 1.0, 1, &CrfModel::default())?;
    let set = TrainingSet::from_manifest(&manifest, 64, false)?;

    let model_cfg = ModelConfig { channels: 16, blocks_per_path: 2, ssm_state_dim: 8, ssm_fixed_hw: 64, ..Default::default() };
    let cfg = TrainConfig { batch_size: 4, epochs: steps, patch_size: 64, seed: 1, ..Default::default() };
    let mut trainer = Trainer::new(build_model(&model_cfg, 1)?, cfg)?;

    let baseline = mean_psnr(|x| x.clone(), &set);
    let start = std::time::Instant::now();
    for step in 0..steps {
        let loss = trainer.run_epoch(&set)?[0];
        if step % 10 == 0 || step + 1 == steps {
            println!("step {:>4}  loss {loss:.6}  ({:.1} s)", step + 1, start.elapsed().as_secs_f64());
        }
    }
    let run = |x: &Tensor| {
        let d = x.dims().to_vec();
        let out = infer(&trainer.weights, &x.clone().reshape([1, d[0], d[1], d[2]]).unwrap()).unwrap();
        out.reshape(d).unwrap().map(|v| v.clamp(0.0, 1.0))
    };
    println!("input PSNR {baseline:.3} dB, model PSNR {:.3} dB", mean_psnr(run, &set));
    Ok(())
}
