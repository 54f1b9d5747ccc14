//! Amplitude/phase decomposition of images.
//!
//! Transforms act on the last two axes of a tensor, one plane at a time, in
//! natural DFT bin order (no fftshift). Any `H x W` works; `rustfft` picks
//! mixed-radix or Bluestein plans for non-power-of-two lengths.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Amplitude and phase maps of an image spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralPair {
    pub amplitude: Tensor,
    pub phase: Tensor,
    /// Amplitude holds `ln(1 + A)` rather than `A`.
    pub compressed: bool,
    /// Phase holds `phase / pi` rather than radians.
    pub normalized_phase: bool,
}

fn plane_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let d = t.dims();
    if d.len() < 2 {
        return Err(Error::shape(op, format!("need at least 2 axes, got {d:?}")));
    }
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    Ok((t.numel() / (h * w), h, w))
}

/// In-place 2-D transform of `planes` consecutive row-major `h x w` planes. Unnormalized.
fn fft2_in_place(buf: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft(w, direction);
    let col_fft = planner.plan_fft(h, direction);
    let scratch_len = row_fft.get_inplace_scratch_len().max(col_fft.get_inplace_scratch_len());
    let mut scratch = vec![Complex64::default(); scratch_len];
    let mut column = vec![Complex64::default(); h];
    for plane in buf.chunks_exact_mut(h * w) {
        for row in plane.chunks_exact_mut(w) {
            row_fft.process_with_scratch(row, &mut scratch);
        }
        for x in 0..w {
            for (y, c) in column.iter_mut().enumerate() {
                *c = plane[y * w + x];
            }
            col_fft.process_with_scratch(&mut column, &mut scratch);
            for (y, c) in column.iter().enumerate() {
                plane[y * w + x] = *c;
            }
        }
    }
}

fn split(dims: &[usize], buf: &[Complex64]) -> (Tensor, Tensor) {
    let re = Tensor::new(dims, buf.iter().map(|c| c.re).collect()).unwrap();
    let im = Tensor::new(dims, buf.iter().map(|c| c.im).collect()).unwrap();
    (re, im)
}

/// Unnormalized forward DFT over the last two axes. Returns `(real, imag)`.
pub fn fft2(img: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = plane_dims(img, "fft2")?;
    let mut buf: Vec<Complex64> = img.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut buf, h, w, FftDirection::Forward);
    Ok(split(img.dims(), &buf))
}

/// Inverse DFT over the last two axes, scaled by `1 / (H W)`. Returns `(real, imag)`.
pub fn ifft2(re: &Tensor, im: &Tensor) -> Result<(Tensor, Tensor)> {
    if re.dims() != im.dims() {
        return Err(Error::shape("ifft2", format!("{:?} vs {:?}", re.dims(), im.dims())));
    }
    let (_, h, w) = plane_dims(re, "ifft2")?;
    let mut buf: Vec<Complex64> =
        re.data().iter().zip(im.data()).map(|(&a, &b)| Complex64::new(a, b)).collect();
    fft2_in_place(&mut buf, h, w, FftDirection::Inverse);
    let norm = 1.0 / (h * w) as f64;
    buf.iter_mut().for_each(|c| *c *= norm);
    Ok(split(re.dims(), &buf))
}

/// Polar form of a spectrum. `atan2(0, 0)` is 0 and the phase lies in `(-pi, pi]`.
pub fn decompose(re: &Tensor, im: &Tensor) -> Result<SpectralPair> {
    if re.dims() != im.dims() {
        return Err(Error::shape("decompose", format!("{:?} vs {:?}", re.dims(), im.dims())));
    }
    let amplitude = Tensor::new(re.dims(), re.data().iter().zip(im.data()).map(|(a, b)| a.hypot(*b)).collect())?;
    let phase = re
        .data()
        .iter()
        .zip(im.data())
        .map(|(&a, &b)| {
            if a == 0.0 && b == 0.0 {
                0.0
            } else {
                let p = b.atan2(a);
                if p <= -PI {
                    PI
                } else {
                    p
                }
            }
        })
        .collect();
    Ok(SpectralPair {
        amplitude,
        phase: Tensor::new(re.dims(), phase)?,
        compressed: false,
        normalized_phase: false,
    })
}

/// `ln(1 + a)`; defined for `a >= 0`.
pub fn amp_compress(a: &Tensor) -> Result<Tensor> {
    if let Some(v) = a.data().iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(Error::domain("amp_compress", format!("amplitude must be >= 0, found {v}")));
    }
    Ok(a.map(f64::ln_1p))
}

/// `e^a - 1`, the inverse of [`amp_compress`].
pub fn amp_expand(a: &Tensor) -> Tensor {
    a.map(f64::exp_m1)
}

pub fn phase_normalize(p: &Tensor) -> Tensor {
    p.map(|v| v / PI)
}

pub fn phase_denormalize(q: &Tensor) -> Tensor {
    q.map(|v| v * PI)
}

impl SpectralPair {
    /// Compresses the amplitude and normalizes the phase if not already done.
    pub fn into_network_form(mut self) -> Result<Self> {
        if !self.compressed {
            self.amplitude = amp_compress(&self.amplitude)?;
            self.compressed = true;
        }
        if !self.normalized_phase {
            self.phase = phase_normalize(&self.phase);
            self.normalized_phase = true;
        }
        Ok(self)
    }

    /// Undoes compression and normalization so the maps are raw amplitude and radians.
    pub fn into_raw_form(mut self) -> Self {
        if self.compressed {
            self.amplitude = amp_expand(&self.amplitude);
            self.compressed = false;
        }
        if self.normalized_phase {
            self.phase = phase_denormalize(&self.phase);
            self.normalized_phase = false;
        }
        self
    }
}

/// Image to network-form spectral pair: fft2, decompose, compress, normalize.
pub fn analyze(img: &Tensor) -> Result<SpectralPair> {
    let (re, im) = fft2(img)?;
    decompose(&re, &im)?.into_network_form()
}

/// Inverse of [`analyze`]: raw maps are recovered from the flags, then the
/// real part of the inverse transform of `A e^{i phase}` is returned.
pub fn recompose(pair: &SpectralPair) -> Result<Tensor> {
    let raw = pair.clone().into_raw_form();
    polar_idft(&raw.amplitude, &raw.phase)
}

/// Real part of `ifft2(amp * e^{i phase})`.
pub fn polar_idft(amp: &Tensor, phase: &Tensor) -> Result<Tensor> {
    if amp.dims() != phase.dims() {
        return Err(Error::shape("recompose", format!("amplitude {:?} vs phase {:?}", amp.dims(), phase.dims())));
    }
    let (_, h, w) = plane_dims(amp, "recompose")?;
    let mut buf: Vec<Complex64> =
        amp.data().iter().zip(phase.data()).map(|(&a, &p)| Complex64::from_polar(a, p)).collect();
    fft2_in_place(&mut buf, h, w, FftDirection::Inverse);
    let norm = 1.0 / (h * w) as f64;
    Tensor::new(amp.dims(), buf.iter().map(|c| c.re * norm).collect())
}

/// Vector-Jacobian product of [`polar_idft`] with respect to amplitude and phase.
///
/// The map from spectrum to real output is linear, and its adjoint is the
/// forward transform of the upstream gradient divided by `H W`.
pub(crate) fn polar_idft_backward(amp: &Tensor, phase: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let (_, h, w) = plane_dims(amp, "recompose").unwrap();
    let mut buf: Vec<Complex64> = grad_out.data().iter().map(|&g| Complex64::new(g, 0.0)).collect();
    fft2_in_place(&mut buf, h, w, FftDirection::Forward);
    let norm = 1.0 / (h * w) as f64;
    let mut ga = Vec::with_capacity(buf.len());
    let mut gp = Vec::with_capacity(buf.len());
    for ((g, &a), &p) in buf.iter().zip(amp.data()).zip(phase.data()) {
        let (gre, gim) = (g.re * norm, g.im * norm);
        let (s, c) = p.sin_cos();
        ga.push(gre * c + gim * s);
        gp.push(a * (gim * c - gre * s));
    }
    (Tensor::new(amp.dims(), ga).unwrap(), Tensor::new(amp.dims(), gp).unwrap())
}
