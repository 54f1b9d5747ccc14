//! 8-bit RGB PNG <-> `(3, H, W)` tensors in `[0, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data).unwrap()
}

/// Quantizes a `(3, H, W)` tensor to 8 bits, clamping to `[0, 1]`.
pub fn to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let [c, h, w]: [usize; 3] = t
        .dims()
        .try_into()
        .ok()
        .filter(|d: &[usize; 3]| d[0] == 3)
        .ok_or_else(|| Error::shape("save_png", format!("expected (3, H, W), got {:?}", t.dims())))?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for ch in 0..c {
            let v = t.data()[(ch * h + y as usize) * w + x as usize];
            px[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(img)
}

/// Writes a PNG with fixed encoder settings so output bytes are reproducible.
pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let img = to_rgb8(t)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PngEncoder::new_with_quality(BufWriter::new(file), CompressionType::Default, FilterType::Adaptive);
    encoder
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn is_png(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_png(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn([3, 5, 7], |i| (i as f64 * 0.013) % 1.0);
        let path = dir.path().join("a.png");
        save_png(&path, &t).unwrap();
        let back = load_rgb(&path).unwrap();
        assert_eq!(back.dims(), &[3, 5, 7]);
        assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
        let bytes = std::fs::read(&path).unwrap();
        save_png(&path, &t).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
    }

    #[test]
    fn rejects_non_rgb_tensors() {
        assert!(to_rgb8(&Tensor::zeros([1, 4, 4])).is_err());
        assert!(to_rgb8(&Tensor::zeros([4, 4])).is_err());
    }
}
