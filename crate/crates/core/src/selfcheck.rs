//! Fast built-in oracle suite behind `fdvm check`.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::Rng as _;

use crate::error::Result;
use crate::gradcheck;
use crate::model::{build_model, infer, ModelConfig};
use crate::rng::substream;
use crate::spectral;
use crate::ssm::{self, SsmParams};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

/// Deliberate corruption used to prove the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Perturbs the fast scan's output before it is compared to the reference.
    Ssm,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub module: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Clone, Debug, Default)]
pub struct SelfCheckReport {
    pub results: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failed_modules(&self) -> Vec<&'static str> {
        let mut m: Vec<&'static str> = self.results.iter().filter(|r| !r.passed).map(|r| r.module).collect();
        m.dedup();
        m
    }

    /// One line per check with its timing, then a summary line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            writeln!(
                s,
                "{:<4} {:<22} {:<10} {:>8.1} ms  {}",
                if r.passed { "ok" } else { "FAIL" },
                r.name,
                format!("[{}]", r.module),
                r.elapsed.as_secs_f64() * 1e3,
                r.detail
            )
            .unwrap();
        }
        if self.passed() {
            writeln!(s, "all {} checks passed", self.results.len()).unwrap();
        } else {
            writeln!(s, "failed modules: {}", self.failed_modules().join(", ")).unwrap();
        }
        s
    }
}

fn random_tensor(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = substream(seed, "selfcheck");
    Tensor::from_fn(dims, |_| r.random_range(lo..hi))
}

fn spectral_round_trip() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for (i, (h, w)) in [(4, 4), (5, 7), (17, 13), (32, 32)].into_iter().enumerate() {
        let img = random_tensor(&[1, 3, h, w], i as u64, 0.0, 1.0);
        let back = spectral::recompose(&spectral::analyze(&img)?)?;
        worst = worst.max(back.max_abs_diff(&img));
    }
    Ok((worst < 1e-9, format!("max error {worst:.2e}")))
}

fn scan_matches_reference(fault: Option<Fault>) -> Result<(bool, String)> {
    let mut mismatched = 0;
    for seed in 0..10u64 {
        let mut r = substream(seed, "selfcheck-scan");
        let (b, l, c, n) = (r.random_range(1..=2), r.random_range(1..=32), r.random_range(1..=8), r.random_range(1..=8));
        let p = SsmParams::init(c, n, &mut r);
        let u = random_tensor(&[b, l, c], seed, -1.0, 1.0);
        let mut fast = ssm::selective_scan(&u, &p)?;
        if fault == Some(Fault::Ssm) {
            fast.data_mut()[0] += 1e-3;
        }
        if fast != ssm::scan_reference(&u, &p)? {
            mismatched += 1;
        }
    }
    let mut hidden = vec![0.0; 3];
    let y = ssm::diagonal_recurrence(&[0.5; 3], &[1.0; 3], &[1.0; 3], 1, &mut hidden);
    let unrolled = y == [1.0, 1.5, 1.75];
    Ok((mismatched == 0 && unrolled, format!("{mismatched}/10 mismatched, unrolled case {}", if unrolled { "exact" } else { "wrong" })))
}

fn gradient_spot_checks() -> Result<(bool, String)> {
    let tol = 1e-4;
    let mut worst: f64 = 0.0;
    let img = random_tensor(&[1, 2, 5, 6], 1, -1.0, 1.0);
    let k = random_tensor(&[3, 2, 3, 3], 2, -0.5, 0.5);
    let bias = random_tensor(&[3], 3, -0.5, 0.5);
    worst = worst.max(gradcheck::check_function(&[img, k, bias], |g, v| g.conv2d(v[0], v[1], v[2]), 12, 1)?.max_rel_error());

    let seq = random_tensor(&[2, 5, 4], 4, -1.0, 1.0);
    let gamma = random_tensor(&[4], 5, 0.5, 1.5);
    let beta = random_tensor(&[4], 6, -0.5, 0.5);
    worst = worst.max(
        gradcheck::check_function(&[seq.clone(), gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS), 12, 2)?
            .max_rel_error(),
    );
    worst = worst.max(gradcheck::check_function(&[seq], |g, v| g.softmax(v[0], 2), 12, 3)?.max_rel_error());

    let u = random_tensor(&[1, 6, 3], 7, -1.0, 1.0);
    let p = ssm::init_ssm(3, 2, 8);
    let mut inputs = vec![u];
    inputs.extend(p.into_array());
    worst = worst.max(
        gradcheck::check_function(
            &inputs,
            |g, v| {
                let params = SsmParams {
                    a_log: v[1],
                    d_skip: v[2],
                    w_dt: v[3],
                    b_dt: v[4],
                    w_b: v[5],
                    w_c: v[6],
                };
                g.selective_scan(v[0], &params)
            },
            6,
            4,
        )?
        .max_rel_error(),
    );

    let amp = random_tensor(&[1, 1, 4, 5], 9, 0.0, 1.0);
    let phase = random_tensor(&[1, 1, 4, 5], 10, -3.0, 3.0);
    worst = worst.max(gradcheck::check_function(&[amp, phase], |g, v| g.polar_inverse_fft(v[0], v[1]), 10, 5)?.max_rel_error());
    Ok((worst < tol, format!("worst relative error {worst:.2e} (tolerance {tol:.0e})")))
}

fn identity_at_init() -> Result<(bool, String)> {
    let cfg = ModelConfig { channels: 4, blocks_per_path: 2, ssm_state_dim: 4, ssm_fixed_hw: 8, ..Default::default() };
    let w = build_model(&cfg, 0)?;
    let img = random_tensor(&[1, 3, 12, 10], 11, 0.0, 1.0);
    let err = infer(&w, &img)?.max_abs_diff(&img);
    Ok((err < 1e-6, format!("max |f(x) - x| = {err:.2e}")))
}

type CheckFn = fn(Option<Fault>) -> Result<(bool, String)>;

/// Runs every check, timing each one. Errors inside a check count as failures.
pub fn run(fault: Option<Fault>) -> SelfCheckReport {
    let checks: [(&str, &str, CheckFn); 4] = [
        ("fft round trip", "spectral", |_| spectral_round_trip()),
        ("scan vs reference", "ssm", scan_matches_reference),
        ("gradient spot checks", "tensor", |_| gradient_spot_checks()),
        ("identity at init", "model", |_| identity_at_init()),
    ];
    let mut report = SelfCheckReport::default();
    for (name, module, f) in checks {
        let start = Instant::now();
        let (passed, detail) = match f(fault) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        report.results.push(CheckResult { name, module, passed, detail, elapsed: start.elapsed() });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let report = run(None);
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.render().lines().filter(|l| l.contains(" ms ")).count(), 4);
    }

    #[test]
    fn injected_scan_fault_names_ssm() {
        let report = run(Some(Fault::Ssm));
        assert!(!report.passed());
        assert_eq!(report.failed_modules(), vec!["ssm"]);
        assert!(report.render().contains("failed modules: ssm"));
    }
}
