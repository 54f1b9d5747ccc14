//! Runs the selective scan on a short sequence and compares it with the
//! naive reference, then shows the hand-unrolled recurrence.
//!
//! cargo run --example selective_scan

use fdvm::rng::substream;
use fdvm::ssm::{diagonal_recurrence, init_ssm, scan_reference, selective_scan};
use fdvm::Tensor;
use rand::Rng;

fn main() -> fdvm::Result<()> {
    let (batch, len, channels, state) = (1, 12, 4, 8);
    let params = init_ssm(channels, state, 7);
    println!("A (channel 0) = {:?}", &params.state_matrix().data()[..state]);

    let mut r = substream(7, "example");
    let u = Tensor::from_fn([batch, len, channels], |_| r.random_range(-1.0..1.0));
    let y = selective_scan(&u, &params)?;
    let reference = scan_reference(&u, &params)?;
    println!("output dims {:?}, identical to reference: {}", y.dims(), y == reference);
    for t in 0..4 {
        println!("  t={t}: u={:+.3} y={:+.3}", u.at(&[0, t, 0]), y.at(&[0, t, 0]));
    }

    let mut hidden = [0.0; 3];
    let unrolled = diagonal_recurrence(&[0.5; 3], &[1.0; 3], &[1.0; 3], 1, &mut hidden);
    println!("h_t = 0.5 h_(t-1) + 1 -> {unrolled:?}");
    Ok(())
}
