//! PSNR/SSIM on a few reference cases and a scored report.
//!
//! cargo run --example evaluate_metrics

use fdvm::degrade::{lecarm_apply, synthetic_source, CrfModel};
use fdvm::metrics::{psnr, ssim, ImageScore, MetricReport};
use fdvm::Tensor;

fn main() -> fdvm::Result<()> {
    let zero = Tensor::zeros([3, 32, 32]);
    let half = Tensor::full([3, 32, 32], 0.5);
    println!("psnr(0, 0.5)     = {:.4} dB", psnr(&zero, &half)?);
    let (lo, hi) = (Tensor::full([3, 32, 32], 0.2), Tensor::full([3, 32, 32], 0.4));
    println!("ssim(0.2, 0.4)   = {:.5}", ssim(&lo, &hi)?);

    let crf = CrfModel::default();
    let mut scores = Vec::new();
    for (i, e) in [-0.8, -0.4, 0.0, 0.5].into_iter().enumerate() {
        let clean = synthetic_source(48, 48, i as u64);
        let degraded = lecarm_apply(&clean, e, &crf)?;
        scores.push(ImageScore { path: format!("E={e:+.1}"), psnr: psnr(&degraded, &clean)?, ssim: ssim(&degraded, &clean)? });
    }
    print!("{}", MetricReport::from_scores(scores, vec![]).render());
    Ok(())
}
