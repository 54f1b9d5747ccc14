//! End-to-end runs of the `fdvm` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fdvm::degrade::{synthetic_source, DatasetManifest, Split, MANIFEST_FILE};
use fdvm::imageio::{load_rgb, save_png};
use fdvm::metrics::MetricReport;
use fdvm::model::{build_model, Ablation, ModelConfig};
use fdvm::train::Checkpoint;

fn fdvm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdvm")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 12 pairs from 3 generated 24x24 sources.
fn synth(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let res = fdvm(&["synth", "--generate-sources", "3", "--source-size", "24", "--out", s(&out), "--n", "12", "--seed", "7"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    out
}

const TINY: &[&str] = &["--channels", "4", "--blocks", "1", "--state-dim", "2", "--fixed-hw", "8", "--patch", "16", "--batch", "2"];

fn train(manifest: &Path, out: &Path, epochs: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--manifest", s(manifest), "--out", s(out), "--epochs", epochs, "--seed", "3"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    fdvm(&args)
}

#[test]
fn synth_split_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a");
    let b = synth(dir.path(), "b");
    let ma = std::fs::read(a.join(MANIFEST_FILE)).unwrap();
    assert_eq!(ma, std::fs::read(b.join(MANIFEST_FILE)).unwrap());
    assert_eq!(std::fs::read(a.join("degraded/0005.png")).unwrap(), std::fs::read(b.join("degraded/0005.png")).unwrap());
    let m = DatasetManifest::load(&a.join(MANIFEST_FILE)).unwrap();
    assert_eq!((m.split(Split::Train).count(), m.split(Split::Test).count()), (10, 2));
    let cfg = std::fs::read_to_string(a.join("run_config.txt")).unwrap();
    assert!(cfg.contains("seed=7\n") && cfg.contains("n=12\n"), "{cfg}");
}

#[test]
fn synth_usage_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&fdvm(&["synth", "--generate-sources", "1", "--out", s(&out), "--n", "0"])), 2);
    assert_eq!(code(&fdvm(&["synth", "--src", s(&dir.path().join("missing")), "--out", s(&out)])), 3);
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&fdvm(&["synth", "--src", s(&empty), "--out", s(&out)])), 2);
}

#[test]
fn train_zero_epochs_is_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "ds");
    let run = dir.path().join("run");
    let res = train(&ds.join(MANIFEST_FILE), &run, "0", &[]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let ck = Checkpoint::load(&run.join("checkpoint.fdvm")).unwrap();
    let cfg = ModelConfig { channels: 4, blocks_per_path: 1, ssm_state_dim: 2, ssm_fixed_hw: 8, ablation: Ablation::Full };
    let init = build_model(&cfg, 3).unwrap();
    assert_eq!(ck.config(), &cfg);
    for ((_, a), (_, b)) in ck.weights.named_params().iter().zip(init.named_params()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x == *y as f32 as f64));
    }
}

#[test]
fn train_logs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "ds");
    let manifest = ds.join(MANIFEST_FILE);
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    assert_eq!(code(&train(&manifest, &r1, "2", &["--checkpoint-every", "1"])), 0);
    assert_eq!(code(&train(&manifest, &r2, "2", &["--checkpoint-every", "1"])), 0);
    let log = std::fs::read_to_string(r1.join("train_log.tsv")).unwrap();
    assert_eq!(log, std::fs::read_to_string(r2.join("train_log.tsv")).unwrap());
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.split('\t').count() == 2));
    assert_eq!(std::fs::read(r1.join("checkpoint.fdvm")).unwrap(), std::fs::read(r2.join("checkpoint.fdvm")).unwrap());
    let steps = std::fs::read_to_string(r1.join("steps.tsv")).unwrap();
    assert_eq!(steps.lines().count(), 10);
    assert_eq!(Checkpoint::load(&r1.join("checkpoint.fdvm")).unwrap().epoch, 2);
}

#[test]
fn ablate_and_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "ds");
    let manifest = ds.join(MANIFEST_FILE);
    let run = dir.path().join("ablate");
    let mut args = vec!["ablate", "no_ssm", "--manifest", s(&manifest), "--out", s(&run), "--epochs", "1"];
    args.extend_from_slice(TINY);
    let res = fdvm(&args);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(Checkpoint::load(&run.join("checkpoint.fdvm")).unwrap().config().ablation, Ablation::NoSsm);

    let bogus = dir.path().join("bogus.tsv");
    std::fs::write(&bogus, "not\ta manifest\n").unwrap();
    assert_eq!(code(&train(&bogus, &dir.path().join("b"), "1", &[])), 2);
    assert_eq!(code(&train(&manifest, &dir.path().join("c"), "1", &["--ablation", "nope"])), 2);
}

#[test]
fn config_file_merging() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "ds");
    let manifest = ds.join(MANIFEST_FILE);
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "# tiny run\nepochs=1\nchannels=6\nrandom_crop=true\n").unwrap();
    let run = dir.path().join("run");
    let res = train(&manifest, &run, "0", &["--config", s(&conf)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    // --epochs 0 and --channels 4 on the command line beat the file.
    let ck = Checkpoint::load(&run.join("checkpoint.fdvm")).unwrap();
    assert_eq!((ck.epoch, ck.config().channels), (0, 4));
    let resolved = std::fs::read_to_string(run.join("run_config.txt")).unwrap();
    assert!(resolved.contains("random-crop=true\n") && resolved.contains("epochs=0\n"), "{resolved}");

    std::fs::write(&conf, "wings=2\n").unwrap();
    assert_eq!(code(&train(&manifest, &run, "0", &["--config", s(&conf)])), 2);
}

#[test]
fn infer_preserves_size_and_identity_at_init() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "ds");
    let run = dir.path().join("run");
    assert_eq!(code(&train(&ds.join(MANIFEST_FILE), &run, "0", &[])), 0);
    let inputs = dir.path().join("inputs");
    save_png(&inputs.join("a.png"), &synthetic_source(48, 60, 1)).unwrap();
    save_png(&inputs.join("b.png"), &synthetic_source(100, 100, 2)).unwrap();
    let ck = run.join("checkpoint.fdvm");

    for out in ["o1", "o2"] {
        let res = fdvm(&["infer", "--checkpoint", s(&ck), "--input", s(&inputs), "--out", s(&dir.path().join(out))]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    }
    for name in ["a.png", "b.png"] {
        let x = load_rgb(&inputs.join(name)).unwrap();
        let y = load_rgb(&dir.path().join("o1").join(name)).unwrap();
        assert_eq!(x.dims(), y.dims());
        assert!(x.max_abs_diff(&y) <= 1.0 / 255.0 + 1e-12);
        assert_eq!(std::fs::read(dir.path().join("o1").join(name)).unwrap(), std::fs::read(dir.path().join("o2").join(name)).unwrap());
    }

    std::fs::write(inputs.join("broken.png"), b"not a png").unwrap();
    save_png(&inputs.join("tiny.png"), &synthetic_source(4, 4, 3)).unwrap();
    let out = dir.path().join("o3");
    let res = fdvm(&["infer", "--checkpoint", s(&ck), "--input", s(&inputs), "--out", s(&out)]);
    assert_eq!(code(&res), 4);
    assert!(out.join("a.png").exists() && out.join("b.png").exists());

    let missing = dir.path().join("nope.fdvm");
    assert_eq!(code(&fdvm(&["infer", "--checkpoint", s(&missing), "--input", s(&inputs), "--out", s(&out)])), 3);
    std::fs::write(&missing, b"FDVM\x02\0\0\0").unwrap();
    assert_eq!(code(&fdvm(&["infer", "--checkpoint", s(&missing), "--input", s(&inputs), "--out", s(&out)])), 2);
}

#[test]
fn eval_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "ds");
    let manifest = ds.join(MANIFEST_FILE);

    let report = dir.path().join("gt.tsv");
    let res = fdvm(&["eval", "--manifest", s(&manifest), "--pred", s(&ds.join("clean")), "--report", s(&report)]);
    assert_eq!(code(&res), 0);
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(stdout(&res), text);
    let parsed = MetricReport::parse(&text).unwrap();
    assert_eq!((parsed.mean_ssim, parsed.inf_count, parsed.count()), (1.0, 2, 2));
    assert_eq!(parsed.render(), text);

    let base = dir.path().join("base.tsv");
    assert_eq!(code(&fdvm(&["eval", "--manifest", s(&manifest), "--pred", s(&ds.join("degraded")), "--report", s(&base)])), 0);
    let baseline = MetricReport::parse(&std::fs::read_to_string(&base).unwrap()).unwrap();
    assert!(baseline.mean_psnr.is_finite() && baseline.mean_ssim < 1.0);
    let again = dir.path().join("again.tsv");
    fdvm(&["eval", "--manifest", s(&manifest), "--pred", s(&ds.join("degraded")), "--report", s(&again)]);
    assert_eq!(std::fs::read(&base).unwrap(), std::fs::read(&again).unwrap());

    // A freshly initialised checkpoint reproduces the input baseline.
    let run = dir.path().join("run");
    assert_eq!(code(&train(&manifest, &run, "0", &[])), 0);
    let res = fdvm(&["eval", "--manifest", s(&manifest), "--checkpoint", s(&run.join("checkpoint.fdvm"))]);
    assert_eq!(code(&res), 0);
    let model = MetricReport::parse(&stdout(&res)).unwrap();
    assert!((model.mean_psnr - baseline.mean_psnr).abs() < 0.5);

    let partial = dir.path().join("partial");
    std::fs::create_dir(&partial).unwrap();
    let res = fdvm(&["eval", "--manifest", s(&manifest), "--pred", s(&partial)]);
    assert_eq!(code(&res), 4);
    assert!(stdout(&res).contains("MISSING"));
}

#[test]
fn check_and_fault_injection() {
    let res = fdvm(&["check"]);
    assert_eq!(code(&res), 0, "{}", stdout(&res));
    assert!(stdout(&res).lines().filter(|l| l.contains(" ms ")).count() >= 4);
    let res = fdvm(&["check", "--inject-fault", "ssm"]);
    assert_eq!(code(&res), 1);
    assert!(stdout(&res).contains("failed modules: ssm"));
    assert!(String::from_utf8_lossy(&res.stderr).contains("ssm"));
}

#[test]
fn params_and_threads() {
    let res = fdvm(&["params", "--channels", "16"]);
    assert_eq!(code(&res), 0);
    assert!(stdout(&res).lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["total", "59638"]), "{}", stdout(&res));
    let res = Command::new(env!("CARGO_BIN_EXE_fdvm")).args(["params"]).env("FDVM_THREADS", "1").output().unwrap();
    assert_eq!(code(&res), 0);
    let res = Command::new(env!("CARGO_BIN_EXE_fdvm")).args(["params"]).env("FDVM_THREADS", "zero").output().unwrap();
    assert_eq!(code(&res), 2);
}
