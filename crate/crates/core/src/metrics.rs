//! PSNR and SSIM on `(3, H, W)` images in `[0, 1]`, and dataset reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::degrade::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::imageio;
use crate::model::{self, ModelWeights};
use crate::tensor::Tensor;

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 1.0;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` in dB; identical images give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10())
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = win.iter().enumerate().map(|(j, wj)| wj * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win.iter().enumerate().map(|(j, wj)| wj * rows[(y + j) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Gaussian-window SSIM (11x11, sigma 1.5), averaged over channels and valid
/// window positions. Images smaller than 11 pixels on a side use the largest
/// odd window that fits.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    if a.rank() < 2 {
        return Err(Error::shape("ssim", format!("need at least 2 axes, got {:?}", a.dims())));
    }
    let d = a.dims();
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    let planes = a.numel() / (h * w);
    let side = h.min(w);
    let size = if side >= WINDOW { WINDOW } else if side % 2 == 1 { side } else { side - 1 };
    let win = gaussian_window(size);
    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..planes {
        let x = &a.data()[p * h * w..][..h * w];
        let y = &b.data()[p * h * w..][..h * w];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter_valid(x, h, w, &win);
        let (my, _, _) = filter_valid(y, h, w, &win);
        let (sxx, _, _) = filter_valid(&xx, h, w, &win);
        let (syy, _, _) = filter_valid(&yy, h, w, &win);
        let (sxy, _, _) = filter_valid(&xy, h, w, &win);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub path: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores plus means. PSNR means cover finite values only; the
/// number of infinite PSNRs is reported separately.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub scores: Vec<ImageScore>,
    pub missing: Vec<String>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub inf_count: usize,
}

fn fmt_psnr(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.4}")
    }
}

fn parse_num(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        "nan" => Some(f64::NAN),
        _ => s.parse().ok(),
    }
}

impl MetricReport {
    pub fn from_scores(scores: Vec<ImageScore>, missing: Vec<String>) -> Self {
        let finite: Vec<f64> = scores.iter().map(|s| s.psnr).filter(|p| p.is_finite()).collect();
        let inf_count = scores.iter().filter(|s| s.psnr == f64::INFINITY).count();
        let mean_psnr = if !finite.is_empty() {
            finite.iter().sum::<f64>() / finite.len() as f64
        } else if inf_count > 0 {
            f64::INFINITY
        } else {
            f64::NAN
        };
        let mean_ssim = if scores.is_empty() {
            f64::NAN
        } else {
            scores.iter().map(|s| s.ssim).sum::<f64>() / scores.len() as f64
        };
        MetricReport { scores, missing, mean_psnr, mean_ssim, inf_count }
    }

    pub fn count(&self) -> usize {
        self.scores.len()
    }

    /// `path<TAB>psnr<TAB>ssim` per image, `path<TAB>MISSING` for absent
    /// predictions, then `MEAN<TAB>psnr<TAB>ssim<TAB>inf_count<TAB>count`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for sc in &self.scores {
            writeln!(s, "{}\t{}\t{:.6}", sc.path, fmt_psnr(sc.psnr), sc.ssim).unwrap();
        }
        for m in &self.missing {
            writeln!(s, "{m}\tMISSING").unwrap();
        }
        writeln!(
            s,
            "MEAN\t{}\t{}\t{}\t{}",
            fmt_psnr(self.mean_psnr),
            if self.mean_ssim.is_nan() { "nan".to_string() } else { format!("{:.6}", self.mean_ssim) },
            self.inf_count,
            self.count()
        )
        .unwrap();
        s
    }

    /// Parses [`render`](Self::render) output. Means are recomputed from the
    /// (rounded) per-image values.
    pub fn parse(text: &str) -> Result<Self> {
        let mut scores = Vec::new();
        let mut missing = Vec::new();
        let mut footer = None;
        for (i, line) in text.lines().enumerate() {
            let bad = || Error::Input(format!("report line {}: malformed `{line}`", i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            match f[..] {
                ["MEAN", p, s, inf, n] => {
                    footer = Some((
                        parse_num(p).ok_or_else(bad)?,
                        parse_num(s).ok_or_else(bad)?,
                        inf.parse::<usize>().map_err(|_| bad())?,
                        n.parse::<usize>().map_err(|_| bad())?,
                    ))
                }
                [path, "MISSING"] => missing.push(path.to_string()),
                [path, p, s] => scores.push(ImageScore {
                    path: path.to_string(),
                    psnr: parse_num(p).ok_or_else(bad)?,
                    ssim: parse_num(s).ok_or_else(bad)?,
                }),
                _ => return Err(bad()),
            }
        }
        let (mean_psnr, mean_ssim, inf_count, count) =
            footer.ok_or_else(|| Error::Input("report has no MEAN footer".into()))?;
        if count != scores.len() {
            return Err(Error::Input(format!("footer says {count} images, found {}", scores.len())));
        }
        Ok(MetricReport { scores, missing, mean_psnr, mean_ssim, inf_count })
    }
}

/// Where predictions for the test split come from.
pub enum Predictions<'a> {
    /// `dir/<file name of the degraded image>`.
    Dir(&'a Path),
    /// Run the model on each degraded image.
    Model(&'a ModelWeights),
}

/// Scores every test record of `manifest` against its clean image.
pub fn evaluate(manifest: &DatasetManifest, predictions: Predictions<'_>) -> Result<MetricReport> {
    let mut scores = Vec::new();
    let mut missing = Vec::new();
    for record in manifest.split(Split::Test) {
        let label = record.degraded.display().to_string();
        let clean = imageio::load_rgb(&manifest.resolve(&record.clean))?;
        let pred = match &predictions {
            Predictions::Dir(dir) => {
                let path: PathBuf = dir.join(record.degraded.file_name().unwrap_or_default());
                match imageio::load_rgb(&path) {
                    Ok(p) => p,
                    Err(e) => {
                        log::warn!("missing prediction for {label}: {e}");
                        missing.push(label);
                        continue;
                    }
                }
            }
            Predictions::Model(w) => {
                let input = imageio::load_rgb(&manifest.resolve(&record.degraded))?;
                let [c, h, wd]: [usize; 3] = input.dims().try_into().unwrap();
                let out = model::infer(w, &input.reshape([1, c, h, wd])?)?;
                out.reshape([c, h, wd])?.map(|v| v.clamp(0.0, 1.0))
            }
        };
        if pred.dims() != clean.dims() {
            log::warn!("prediction for {label} has shape {:?}, expected {:?}", pred.dims(), clean.dims());
            missing.push(label);
            continue;
        }
        scores.push(ImageScore { path: label, psnr: psnr(&pred, &clean)?, ssim: ssim(&pred, &clean)? });
    }
    Ok(MetricReport::from_scores(scores, missing))
}
