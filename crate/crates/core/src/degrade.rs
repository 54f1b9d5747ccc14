//! Synthetic exposure degradation and paired-dataset construction.
//!
//! Exposure changes follow the beta-gamma camera response model: for an
//! exposure ratio `k`, a pixel `P` maps to `e^{b (1 - k^a)} P^{k^a}`. An
//! exposure value `E` in `(-1, 1)` selects `k = g^E`.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::imageio;
use crate::rng;
use crate::tensor::Tensor;

/// Exposures closer to zero than this are redrawn.
pub const MIN_ABS_EXPOSURE: f64 = 0.05;
pub const DEFAULT_TRAIN_FRAC: f64 = 5.0 / 6.0;
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfModel {
    pub a: f64,
    pub b: f64,
    /// Base of the exposure ratio, `k = gain^E`.
    pub gain: f64,
}

impl Default for CrfModel {
    fn default() -> Self {
        CrfModel { a: -0.3293, b: 1.1258, gain: 2.0 }
    }
}

impl CrfModel {
    pub fn validate(&self) -> Result<()> {
        if self.a == 0.0 || !self.a.is_finite() {
            return Err(Error::Config(format!("crf a must be finite and non-zero, got {}", self.a)));
        }
        if self.gain.is_nan() || self.gain <= 0.0 || !self.gain.is_finite() {
            return Err(Error::Config(format!("crf gain must be > 0, got {}", self.gain)));
        }
        if !self.b.is_finite() {
            return Err(Error::Config(format!("crf b must be finite, got {}", self.b)));
        }
        Ok(())
    }

    pub fn ratio(&self, exposure: f64) -> f64 {
        self.gain.powf(exposure)
    }

    /// Tone map for exposure ratio `k`, clipped to `[0, 1]`.
    pub fn map(&self, p: f64, k: f64) -> f64 {
        let gamma = k.powf(self.a);
        let beta = (self.b * (1.0 - gamma)).exp();
        (beta * p.powf(gamma)).clamp(0.0, 1.0)
    }
}

/// Applies exposure `e` to an image with values in `[0, 1]`.
pub fn lecarm_apply(img: &Tensor, exposure: f64, crf: &CrfModel) -> Result<Tensor> {
    crf.validate()?;
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain("lecarm_apply", format!("pixel {v} outside [0, 1]")));
    }
    let k = crf.ratio(exposure);
    Ok(img.map(|p| crf.map(p, k)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub degraded: PathBuf,
    pub clean: PathBuf,
    pub exposure: f64,
    pub split: Split,
}

/// Paired dataset listing. Paths are stored relative to `root`, the
/// directory holding the manifest file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.root.join(path)
    }

    /// Tab-separated lines: degraded path, clean path, exposure (6 places), split.
    pub fn render(&self) -> String {
        let mut s = format!("# fdvm manifest seed={}\n", self.seed);
        for r in &self.records {
            writeln!(
                s,
                "{}\t{}\t{:.6}\t{}",
                r.degraded.display(),
                r.clean.display(),
                r.exposure,
                r.split.as_str()
            )
            .unwrap();
        }
        s
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seed = 0;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Input(format!("manifest line {}: {what}", lineno + 1));
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.split_whitespace().find_map(|w| w.strip_prefix("seed=")) {
                    seed = v.parse().map_err(|_| bad("bad seed"))?;
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [degraded, clean, exposure, split] = fields[..] else {
                return Err(bad("expected 4 tab-separated fields"));
            };
            let exposure: f64 = exposure.parse().map_err(|_| bad("bad exposure"))?;
            if !(exposure > -1.0 && exposure < 1.0) {
                return Err(bad("exposure outside (-1, 1)"));
            }
            let split = match split {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad("split must be train or test")),
            };
            records.push(Record { degraded: degraded.into(), clean: clean.into(), exposure, split });
        }
        Ok(DatasetManifest { root: root.into(), records, seed })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

/// Number of training records for `n` pairs at `train_frac`.
pub fn train_count(n: usize, train_frac: f64) -> usize {
    ((n as f64 * train_frac).round() as usize).min(n)
}

/// Draws an exposure uniformly from `(-1, 1)` excluding `|E| < MIN_ABS_EXPOSURE`,
/// rounded to the 6 places the manifest stores.
pub fn sample_exposure(rng: &mut impl Rng) -> f64 {
    loop {
        let e: f64 = rng.random_range(-1.0..1.0);
        let e = (e * 1e6).round() / 1e6;
        if e.abs() >= MIN_ABS_EXPOSURE && e.abs() < 1.0 {
            return e;
        }
    }
}

/// Degrades every source image in `src_dir` (cycling when `n_pairs` exceeds
/// the source count) and writes `clean/`, `degraded/` and the manifest into `out_dir`.
pub fn build_dataset(
    src_dir: &Path,
    out_dir: &Path,
    n_pairs: usize,
    train_frac: f64,
    seed: u64,
    crf: &CrfModel,
) -> Result<DatasetManifest> {
    crf.validate()?;
    if n_pairs == 0 {
        return Err(Error::Input("n_pairs must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::Input(format!("train_frac must be in [0, 1], got {train_frac}")));
    }
    let sources = imageio::list_pngs(src_dir)?;
    if sources.is_empty() {
        return Err(Error::Input(format!("no PNG images in {}", src_dir.display())));
    }
    let images = sources.iter().map(|p| imageio::load_rgb(p)).collect::<Result<Vec<_>>>()?;

    for sub in ["clean", "degraded"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut rng = rng::substream(seed, rng::SYNTH);
    let mut records = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let clean = &images[i % images.len()];
        let exposure = sample_exposure(&mut rng);
        let degraded = lecarm_apply(clean, exposure, crf)?;
        let name = format!("{i:04}.png");
        let (clean_rel, degraded_rel) = (Path::new("clean").join(&name), Path::new("degraded").join(&name));
        imageio::save_png(&out_dir.join(&clean_rel), clean)?;
        imageio::save_png(&out_dir.join(&degraded_rel), &degraded)?;
        records.push(Record { degraded: degraded_rel, clean: clean_rel, exposure, split: Split::Test });
    }

    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut rng);
    for &i in &order[..train_count(n_pairs, train_frac)] {
        records[i].split = Split::Train;
    }

    let manifest = DatasetManifest { root: out_dir.to_path_buf(), records, seed };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A smooth, tissue-coloured procedural image in `[0.05, 0.95]`, for when no
/// real image corpus is at hand.
pub fn synthetic_source(height: usize, width: usize, seed: u64) -> Tensor {
    let mut r = rng::substream(seed, "source");
    let base = [r.random_range(0.55..0.8), r.random_range(0.25..0.45), r.random_range(0.2..0.4)];
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..6)
        .map(|_| {
            let tint = [r.random_range(-0.3..0.3), r.random_range(-0.2..0.3), r.random_range(-0.2..0.3)];
            (r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.05..0.3), tint)
        })
        .collect();
    let (fx, fy, phase) = (r.random_range(4.0..12.0), r.random_range(4.0..12.0), r.random_range(0.0..TAU));
    Tensor::from_fn([3, height, width], |i| {
        let c = i / (height * width);
        let y = (i / width) % height;
        let x = i % width;
        let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
        let vignette = 1.0 - 0.5 * ((u - 0.5).powi(2) + (v - 0.5).powi(2));
        let mut val = base[c] * vignette;
        for (bx, by, s, tint) in &blobs {
            let d2 = (u - bx).powi(2) + (v - by).powi(2);
            val += tint[c] * (-d2 / (2.0 * s * s)).exp();
        }
        val += 0.04 * (fx * u * TAU + phase).sin() * (fy * v * TAU).cos();
        val.clamp(0.05, 0.95)
    })
}

/// Writes `count` procedural source PNGs into `dir`.
pub fn write_synthetic_sources(dir: &Path, count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("source_{i:04}.png"));
            imageio::save_png(&path, &synthetic_source(height, width, seed.wrapping_add(i as u64)))?;
            Ok(path)
        })
        .collect()
}
