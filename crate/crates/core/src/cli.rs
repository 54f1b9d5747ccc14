//! The `fdvm` command line.
//!
//! Every subcommand accepts `--config FILE` holding `key=value` lines (keys
//! are flag names, `#` starts a comment). Flags given on the command line win.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::degrade::{self, CrfModel, DatasetManifest};
use crate::error::{Error, Result};
use crate::imageio;
use crate::metrics::{self, Predictions};
use crate::model::{self, Ablation, ModelConfig, ParamGroup, IMAGE_CHANNELS};
use crate::selfcheck::{self, Fault};
use crate::train::{self, Checkpoint, TrainConfig};

pub const THREADS_ENV: &str = "FDVM_THREADS";
pub const RUN_CONFIG_FILE: &str = "run_config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.fdvm";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const STEP_LOG_FILE: &str = "steps.tsv";

#[derive(Parser, Debug)]
#[command(name = "fdvm", version, about = "Frequency-domain exposure correction", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a paired exposure dataset from clean PNGs.
    Synth(SynthArgs),
    /// Train a model on a manifest's train split.
    Train(TrainArgs),
    /// Correct one PNG or every PNG in a directory.
    Infer(InferArgs),
    /// Score predictions (a directory or a checkpoint) on the test split.
    Eval(EvalArgs),
    /// Train with an ablation applied.
    Ablate(AblateArgs),
    /// Run the built-in oracle suite.
    Check(CheckArgs),
    /// Print parameter counts for a configuration.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory of clean source PNGs.
    #[arg(long, required_unless_present = "generate_sources")]
    pub src: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub n: usize,
    #[arg(long, default_value_t = degrade::DEFAULT_TRAIN_FRAC)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Exposure ratio base: k = g^E.
    #[arg(long, default_value_t = CrfModel::default().gain)]
    pub g: f64,
    #[arg(long, default_value_t = CrfModel::default().a, allow_negative_numbers = true)]
    pub a: f64,
    #[arg(long, default_value_t = CrfModel::default().b, allow_negative_numbers = true)]
    pub b: f64,
    /// Write this many procedural source images first (into --src, or OUT/sources).
    #[arg(long)]
    pub generate_sources: Option<usize>,
    /// Side length of generated sources.
    #[arg(long, default_value_t = 64)]
    pub source_size: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub blocks: usize,
    #[arg(long, default_value_t = crate::ssm::DEFAULT_STATE_DIM)]
    pub state_dim: usize,
    /// Side of the grid the sequence stage runs at.
    #[arg(long, default_value_t = 64)]
    pub fixed_hw: usize,
    #[arg(long, default_value_t = 64)]
    pub patch: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "full")]
    pub ablation: String,
    /// Also checkpoint every k epochs (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Random patch crops instead of whole-image resizing.
    #[arg(long, action = ArgAction::SetTrue)]
    pub random_crop: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// full, no_cross_attention or no_ssm.
    pub tag: String,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A PNG file or a directory of PNGs.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of predictions named like the degraded images.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub pred: Option<PathBuf>,
    /// Run this checkpoint on the test split instead.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub blocks: usize,
    #[arg(long, default_value_t = crate::ssm::DEFAULT_STATE_DIM)]
    pub state_dim: usize,
    #[arg(long, default_value = "full")]
    pub ablation: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses a `key=value` config file into `(key, value)` pairs.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value, got `{raw}`", i + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn subcommand_config(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::Synth(a) => a.config.as_deref(),
        Command::Train(a) => a.config.as_deref(),
        Command::Ablate(a) => a.train.config.as_deref(),
        Command::Infer(a) => a.config.as_deref(),
        Command::Eval(a) => a.config.as_deref(),
        Command::Check(a) => a.config.as_deref(),
        Command::Params(a) => a.config.as_deref(),
    }
}

/// Rebuilds argv with config-file entries inserted ahead of the user's own
/// flags, so flags override file values.
fn merge_config(args: &[OsString], sub: &str, entries: &[(String, String)]) -> Result<Vec<OsString>> {
    let root = Cli::command();
    let cmd = root.find_subcommand(sub).expect("parsed subcommand exists");
    let pos = args.iter().position(|a| a == sub).expect("subcommand in argv");
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && !a.is_hide_set() && key != "config")
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}` for `{sub}`")))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" => injected.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(Error::Config(format!("config key `{key}` takes true or false, got `{value}`"))),
            }
        } else {
            injected.push(format!("--{key}={value}").into());
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

/// Resolved `key=value` settings of the parsed subcommand, defaults included.
fn resolved_config(matches: &clap::ArgMatches) -> String {
    let (_, sub) = matches.subcommand().expect("subcommand present");
    let mut ids: Vec<&str> = sub.ids().map(|id| id.as_str()).filter(|id| *id != "config").collect();
    ids.sort_unstable();
    let mut s = String::new();
    for id in ids {
        if let Ok(Some(vals)) = sub.try_get_raw(id) {
            let vals: Vec<String> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
            writeln!(s, "{}={}", id.replace('_', "-"), vals.join(",")).unwrap();
        }
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("thread pool already initialised; {THREADS_ENV} ignored");
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    match run_inner(&args) {
        Ok(()) => 0,
        Err(Failure::Clap(e)) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

enum Failure {
    Clap(clap::Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn run_inner(args: &[OsString]) -> std::result::Result<(), Failure> {
    let mut matches = Cli::command().try_get_matches_from(args).map_err(Failure::Clap)?;
    let mut cli = Cli::from_arg_matches(&matches).map_err(Failure::Clap)?;
    if let Some(path) = subcommand_config(&cli.command).map(Path::to_path_buf) {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries = parse_config_file(&text)?;
        let sub = matches.subcommand_name().expect("subcommand present").to_string();
        let merged = merge_config(args, &sub, &entries)?;
        matches = Cli::command().try_get_matches_from(&merged).map_err(Failure::Clap)?;
        cli = Cli::from_arg_matches(&matches).map_err(Failure::Clap)?;
    }
    configure_threads()?;
    let resolved = resolved_config(&matches);
    execute(cli.command, &resolved)?;
    Ok(())
}

fn execute(command: Command, resolved: &str) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a, resolved),
        Command::Train(a) => cmd_train(&a, None, resolved),
        Command::Ablate(a) => cmd_train(&a.train, Some(&a.tag), resolved),
        Command::Infer(a) => cmd_infer(&a, resolved),
        Command::Eval(a) => cmd_eval(&a, resolved),
        Command::Check(a) => cmd_check(&a),
        Command::Params(a) => cmd_params(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs, resolved: &str) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Input("--n must be >= 1".into()));
    }
    let crf = CrfModel { a: a.a, b: a.b, gain: a.g };
    crf.validate()?;
    let src = match (a.generate_sources, &a.src) {
        (Some(count), src) => {
            let dir = src.clone().unwrap_or_else(|| a.out.join("sources"));
            degrade::write_synthetic_sources(&dir, count, a.source_size, a.source_size, a.seed)?;
            dir
        }
        (None, Some(src)) => src.clone(),
        (None, None) => return Err(Error::Input("--src is required".into())),
    };
    let manifest = degrade::build_dataset(&src, &a.out, a.n, a.train_frac, a.seed, &crf)?;
    write_text(&a.out.join(RUN_CONFIG_FILE), resolved)?;
    let train = manifest.split(degrade::Split::Train).count();
    println!(
        "wrote {} pairs ({train} train, {} test) to {}",
        manifest.records.len(),
        manifest.records.len() - train,
        a.out.display()
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, ablation_tag: Option<&str>, resolved: &str) -> Result<()> {
    let tag = ablation_tag.unwrap_or(&a.ablation);
    let ablation: Ablation = tag.parse()?;
    let model_cfg = ModelConfig {
        channels: a.channels,
        blocks_per_path: a.blocks,
        ssm_state_dim: a.state_dim,
        ssm_fixed_hw: a.fixed_hw,
        ablation,
    };
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        patch_size: a.patch,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        checkpoint_path: Some(a.out.join(CHECKPOINT_FILE)),
        random_crop: a.random_crop,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let weights = model::build_model(&model_cfg, a.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut resolved = resolved.to_string();
    if ablation_tag.is_some() {
        writeln!(resolved, "ablation-applied={ablation}").unwrap();
    }
    write_text(&a.out.join(RUN_CONFIG_FILE), &resolved)?;
    log::info!("training {} parameters ({ablation})", weights.param_count());

    let outcome = train::train_loop(weights, &manifest, &cfg)?;
    write_text(&a.out.join(TRAIN_LOG_FILE), &outcome.log.render())?;
    write_text(&a.out.join(STEP_LOG_FILE), &outcome.log.render_steps())?;
    print!("{}", outcome.log.render());
    println!("checkpoint: {}", a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn cmd_infer(a: &InferArgs, resolved: &str) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let inputs = if a.input.is_dir() {
        let files = imageio::list_pngs(&a.input)?;
        if files.is_empty() {
            return Err(Error::Input(format!("no PNG images in {}", a.input.display())));
        }
        files
    } else {
        vec![a.input.clone()]
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_text(&a.out.join(RUN_CONFIG_FILE), resolved)?;

    let mut failed = 0;
    for path in &inputs {
        match infer_file(&ck, path, &a.out) {
            Ok(out) => println!("{} -> {}", path.display(), out.display()),
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                failed += 1;
            }
        }
    }
    if failed > 0 {
        return Err(Error::Partial { failed, total: inputs.len() });
    }
    Ok(())
}

fn infer_file(ck: &Checkpoint, path: &Path, out_dir: &Path) -> Result<PathBuf> {
    let img = imageio::load_rgb(path)?;
    let [_, h, w]: [usize; 3] = img.dims().try_into().unwrap();
    if h < 8 || w < 8 {
        return Err(Error::Input(format!("image is {h}x{w}; both sides must be >= 8")));
    }
    let y = model::infer(&ck.weights, &img.reshape([1, IMAGE_CHANNELS, h, w])?)?;
    let out = out_dir.join(path.file_name().unwrap_or_default());
    imageio::save_png(&out, &y.reshape([IMAGE_CHANNELS, h, w])?)?;
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs, resolved: &str) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let report = match (&a.pred, &a.checkpoint) {
        (Some(dir), _) => metrics::evaluate(&manifest, Predictions::Dir(dir))?,
        (None, Some(ck)) => {
            let ck = Checkpoint::load(ck)?;
            metrics::evaluate(&manifest, Predictions::Model(&ck.weights))?
        }
        (None, None) => return Err(Error::Input("one of --pred or --checkpoint is required".into())),
    };
    let text = report.render();
    print!("{text}");
    if let Some(path) = &a.report {
        write_text(path, &text)?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        write_text(&dir.join(RUN_CONFIG_FILE), resolved)?;
    }
    if !report.missing.is_empty() {
        return Err(Error::Partial { failed: report.missing.len(), total: report.missing.len() + report.count() });
    }
    Ok(())
}

pub fn cmd_check(a: &CheckArgs) -> Result<()> {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some("ssm") => Some(Fault::Ssm),
        Some(other) => return Err(Error::Config(format!("unknown fault `{other}`"))),
    };
    let report = selfcheck::run(fault);
    print!("{}", report.render());
    if !report.passed() {
        return Err(Error::Contract(format!("self-check failed in: {}", report.failed_modules().join(", "))));
    }
    Ok(())
}

pub fn cmd_params(a: &ParamsArgs) -> Result<()> {
    let cfg = ModelConfig {
        channels: a.channels,
        blocks_per_path: a.blocks,
        ssm_state_dim: a.state_dim,
        ablation: a.ablation.parse()?,
        ..ModelConfig::default()
    };
    let weights = model::build_model(&cfg, 0)?;
    let mut groups: Vec<(ParamGroup, usize)> = Vec::new();
    for (name, t) in weights.named_params() {
        let g = ParamGroup::of(&name);
        match groups.iter_mut().find(|(k, _)| *k == g) {
            Some((_, n)) => *n += t.numel(),
            None => groups.push((g, t.numel())),
        }
    }
    groups.sort();
    for (g, n) in &groups {
        println!("{:<12}{n}", format!("{g:?}"));
    }
    let total = weights.param_count();
    debug_assert_eq!(total, model::param_count(&cfg));
    println!("{:<12}{total}", "total");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(args: &[&str]) -> Vec<OsString> {
        args.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_file_parsing() {
        let entries = parse_config_file("# comment\nchannels = 16\n\nrandom_crop=true # trailing\n").unwrap();
        assert_eq!(entries, vec![("channels".into(), "16".into()), ("random-crop".into(), "true".into())]);
        assert!(parse_config_file("nonsense\n").is_err());
    }

    #[test]
    fn flags_override_config_values() {
        let args = os(&["fdvm", "train", "--manifest", "m", "--out", "o", "--channels", "8"]);
        let entries = parse_config_file("channels=16\nepochs=3\n").unwrap();
        let merged = merge_config(&args, "train", &entries).unwrap();
        let cli = Cli::try_parse_from(&merged).unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.channels, 8);
        assert_eq!(t.epochs, 3);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let args = os(&["fdvm", "params"]);
        let err = merge_config(&args, "params", &[("bogus".into(), "1".into())]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["fdvm", "synth", "--out", "x"]), 2);
        assert_eq!(run(["fdvm", "frobnicate"]), 2);
        assert_eq!(run(["fdvm", "params", "--ablation", "nope"]), 2);
        assert_eq!(run(["fdvm", "--help"]), 0);
    }

    #[test]
    fn params_runs() {
        assert_eq!(run(["fdvm", "params", "--channels", "16"]), 0);
    }

    #[test]
    fn resolved_config_lists_defaults() {
        let m = Cli::command().try_get_matches_from(["fdvm", "params", "--channels", "16"]).unwrap();
        let text = resolved_config(&m);
        assert!(text.contains("channels=16\n"));
        assert!(text.contains("blocks=8\n"));
        assert!(!text.contains("config="));
    }
}
