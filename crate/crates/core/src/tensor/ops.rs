//! Forward kernels and their vector-Jacobian products.
//!
//! The forward functions are public and tape-free. The `*_backward` helpers
//! take the upstream gradient plus whatever the forward pass saved and return
//! gradients for each differentiable input.

use rayon::prelude::*;

use super::{dims_n, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// conv2d: 3x3, stride 1, zero padding 1

/// `dst[y][x] += weight * src[y + dy][x + dx]` over the region where the
/// source index is in bounds.
fn accumulate_shifted(dst: &mut [f64], src: &[f64], weight: f64, dy: isize, dx: isize, h: usize, w: usize) {
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx).min(w as isize);
    if x_hi <= x_lo as isize {
        return;
    }
    let x_hi = x_hi as usize;
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let sy = sy as usize;
        let src_lo = (x_lo as isize + dx) as usize;
        let drow = &mut dst[y * w + x_lo..y * w + x_hi];
        let srow = &src[sy * w + src_lo..sy * w + src_lo + (x_hi - x_lo)];
        for (d, s) in drow.iter_mut().zip(srow) {
            *d += weight * s;
        }
    }
}

/// `sum_{y,x} a[y][x] * b[y + dy][x + dx]` over the in-bounds region.
fn shifted_dot(a: &[f64], b: &[f64], dy: isize, dx: isize, h: usize, w: usize) -> f64 {
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx).min(w as isize);
    if x_hi <= x_lo as isize {
        return 0.0;
    }
    let x_hi = x_hi as usize;
    let mut acc = 0.0;
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let sy = sy as usize;
        let src_lo = (x_lo as isize + dx) as usize;
        let arow = &a[y * w + x_lo..y * w + x_hi];
        let brow = &b[sy * w + src_lo..sy * w + src_lo + (x_hi - x_lo)];
        acc += arow.iter().zip(brow).map(|(p, q)| p * q).sum::<f64>();
    }
    acc
}

const TAPS_3X3: [(isize, isize); 9] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

struct Conv2dShape {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

fn conv2d_shape(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Conv2dShape> {
    const OP: &str = "conv2d";
    let [batch, cin, h, w] = dims_n::<4>(input, OP, "input")?;
    let [cout, kcin, kh, kw] = dims_n::<4>(kernel, OP, "kernel")?;
    if (kh, kw) != (3, 3) {
        return Err(Error::shape(OP, format!("kernel must be 3x3, got {kh}x{kw}")));
    }
    if kcin != cin {
        return Err(Error::shape(OP, format!("input has {cin} channels, kernel expects {kcin}")));
    }
    if bias.dims() != [cout] {
        return Err(Error::shape(OP, format!("bias must be [{cout}], got {:?}", bias.dims())));
    }
    Ok(Conv2dShape { batch, cin, cout, h, w })
}

/// 3x3 convolution (cross-correlation) with zero padding 1 and stride 1.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let Conv2dShape { batch, cin, cout, h, w } = conv2d_shape(input, kernel, bias)?;
    let plane = h * w;
    let (x, k, b) = (input.data(), kernel.data(), bias.data());
    let mut out = vec![0.0; batch * cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(p, o)| {
        let (bi, co) = (p / cout, p % cout);
        o.fill(b[co]);
        for ci in 0..cin {
            let src = &x[(bi * cin + ci) * plane..][..plane];
            let taps = &k[(co * cin + ci) * 9..][..9];
            for (&wt, &(dy, dx)) in taps.iter().zip(&TAPS_3X3) {
                accumulate_shifted(o, src, wt, dy, dx, h, w);
            }
        }
    });
    Tensor::new([batch, cout, h, w], out)
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [batch, cin, h, w]: [usize; 4] = input.dims().try_into().unwrap();
    let cout = kernel.dims()[0];
    let plane = h * w;
    let (x, k, gy) = (input.data(), kernel.data(), grad_out.data());

    let mut gx = vec![0.0; input.numel()];
    gx.par_chunks_mut(plane).enumerate().for_each(|(p, g)| {
        let (bi, ci) = (p / cin, p % cin);
        for co in 0..cout {
            let src = &gy[(bi * cout + co) * plane..][..plane];
            let taps = &k[(co * cin + ci) * 9..][..9];
            for (&wt, &(dy, dx)) in taps.iter().zip(&TAPS_3X3) {
                accumulate_shifted(g, src, wt, -dy, -dx, h, w);
            }
        }
    });

    let mut gk = vec![0.0; kernel.numel()];
    gk.par_chunks_mut(cin * 9).enumerate().for_each(|(co, g)| {
        for bi in 0..batch {
            let go = &gy[(bi * cout + co) * plane..][..plane];
            for ci in 0..cin {
                let src = &x[(bi * cin + ci) * plane..][..plane];
                for (t, &(dy, dx)) in TAPS_3X3.iter().enumerate() {
                    g[ci * 9 + t] += shifted_dot(go, src, dy, dx, h, w);
                }
            }
        }
    });

    let mut gb = vec![0.0; cout];
    for bi in 0..batch {
        for (co, g) in gb.iter_mut().enumerate() {
            *g += gy[(bi * cout + co) * plane..][..plane].iter().sum::<f64>();
        }
    }

    (
        Tensor::new(input.dims(), gx).unwrap(),
        Tensor::new(kernel.dims(), gk).unwrap(),
        Tensor::new([cout], gb).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// depthwise conv1d along L of a (B, L, C) sequence, width 3, zero padding 1

fn conv1d_shape(seq: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<[usize; 3]> {
    const OP: &str = "conv1d_depthwise";
    let [b, l, c] = dims_n::<3>(seq, OP, "sequence")?;
    if kernel.dims() != [c, 3] {
        return Err(Error::shape(OP, format!("kernel must be [{c}, 3], got {:?}", kernel.dims())));
    }
    if bias.dims() != [c] {
        return Err(Error::shape(OP, format!("bias must be [{c}], got {:?}", bias.dims())));
    }
    Ok([b, l, c])
}

pub fn conv1d_depthwise(seq: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [b, l, c] = conv1d_shape(seq, kernel, bias)?;
    let (x, k, bs) = (seq.data(), kernel.data(), bias.data());
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(l * c).enumerate().for_each(|(bi, o)| {
        let xs = &x[bi * l * c..][..l * c];
        for t in 0..l {
            for ch in 0..c {
                let mut acc = bs[ch];
                for j in 0..3 {
                    let src = t as isize + j as isize - 1;
                    if src >= 0 && (src as usize) < l {
                        acc += k[ch * 3 + j] * xs[src as usize * c + ch];
                    }
                }
                o[t * c + ch] = acc;
            }
        }
    });
    Tensor::new([b, l, c], out)
}

pub(crate) fn conv1d_depthwise_backward(
    seq: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [b, l, c]: [usize; 3] = seq.dims().try_into().unwrap();
    let (x, k, gy) = (seq.data(), kernel.data(), grad_out.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; 3 * c];
    let mut gb = vec![0.0; c];
    for bi in 0..b {
        let base = bi * l * c;
        for t in 0..l {
            for ch in 0..c {
                let g = gy[base + t * c + ch];
                gb[ch] += g;
                for j in 0..3 {
                    let src = t as isize + j as isize - 1;
                    if src >= 0 && (src as usize) < l {
                        let si = base + src as usize * c + ch;
                        gx[si] += k[ch * 3 + j] * g;
                        gk[ch * 3 + j] += x[si] * g;
                    }
                }
            }
        }
    }
    (
        Tensor::new(seq.dims(), gx).unwrap(),
        Tensor::new([c, 3], gk).unwrap(),
        Tensor::new([c], gb).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// layer norm over the last axis

pub(crate) struct LayerNormSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    seq: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormSaved)> {
    const OP: &str = "layer_norm";
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::domain(OP, format!("eps must be > 0, got {eps}")));
    }
    let c = *seq.dims().last().unwrap();
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::shape(
            OP,
            format!("gamma/beta must be [{c}], got {:?}/{:?}", gamma.dims(), beta.dims()),
        ));
    }
    let (g, bt) = (gamma.data(), beta.data());
    let rows = seq.numel() / c;
    let mut out = vec![0.0; seq.numel()];
    let mut xhat = vec![0.0; seq.numel()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let x = &seq.data()[r * c..][..c];
        let mean = x.iter().sum::<f64>() / c as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for ch in 0..c {
            let xh = (x[ch] - mean) * is;
            xhat[r * c + ch] = xh;
            out[r * c + ch] = g[ch] * xh + bt[ch];
        }
    }
    Ok((Tensor::new(seq.dims(), out)?, LayerNormSaved { xhat, inv_std }))
}

/// Layer normalization over the channel (last) axis, population variance.
pub fn layer_norm(seq: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_forward(seq, gamma, beta, eps).map(|(t, _)| t)
}

pub(crate) fn layer_norm_backward(
    saved: &LayerNormSaved,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gamma.numel();
    let gy = grad_out.data();
    let g = gamma.data();
    let rows = gy.len() / c;
    let mut gx = vec![0.0; gy.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for r in 0..rows {
        let xh = &saved.xhat[r * c..][..c];
        let go = &gy[r * c..][..c];
        for ch in 0..c {
            dxhat[ch] = go[ch] * g[ch];
            gg[ch] += go[ch] * xh[ch];
            gb[ch] += go[ch];
        }
        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / c as f64;
        let is = saved.inv_std[r];
        for ch in 0..c {
            gx[r * c + ch] = is * (dxhat[ch] - mean_d - xh[ch] * mean_dx);
        }
    }
    (
        Tensor::new(grad_out.dims(), gx).unwrap(),
        Tensor::new([c], gg).unwrap(),
        Tensor::new([c], gb).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// softmax along an arbitrary axis

fn axis_layout(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", t.dims())));
    }
    let (outer, n, inner) = axis_layout(t.dims(), axis);
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (x[idx(j)] - max).exp();
                total += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                out[idx(j)] = b / total;
            }
        }
    }
    Tensor::new(t.dims(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, axis: usize, grad_out: &Tensor) -> Tensor {
    let (outer, n, inner) = axis_layout(y.dims(), axis);
    let (yv, gy) = (y.data(), grad_out.data());
    let mut gx = vec![0.0; yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| gy[idx(j)] * yv[idx(j)]).sum();
            for j in 0..n {
                gx[idx(j)] = yv[idx(j)] * (gy[idx(j)] - dot);
            }
        }
    }
    Tensor::new(y.dims(), gx).unwrap()
}

// ---------------------------------------------------------------------------
// bilinear resize, half-pixel centers, edge clamping

#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn resize_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap { lo, hi, frac: pos - lo as f64 }
        })
        .collect()
}

pub fn bilinear_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    const OP: &str = "bilinear_resize";
    let [b, c, h, w] = dims_n::<4>(img, OP, "image")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(OP, "output size must be >= 1"));
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let x = img.data();
    let mut out = vec![0.0; b * c * out_h * out_w];
    out.par_chunks_mut(out_h * out_w).enumerate().for_each(|(p, o)| {
        let src = &x[p * h * w..][..h * w];
        for (oy, ry) in ty.iter().enumerate() {
            let r0 = &src[ry.lo * w..][..w];
            let r1 = &src[ry.hi * w..][..w];
            for (ox, rx) in tx.iter().enumerate() {
                let top = r0[rx.lo] + rx.frac * (r0[rx.hi] - r0[rx.lo]);
                let bot = r1[rx.lo] + rx.frac * (r1[rx.hi] - r1[rx.lo]);
                o[oy * out_w + ox] = top + ry.frac * (bot - top);
            }
        }
    });
    Tensor::new([b, c, out_h, out_w], out)
}

pub(crate) fn bilinear_resize_backward(in_dims: &[usize], grad_out: &Tensor) -> Tensor {
    let [_, _, h, w]: [usize; 4] = in_dims.try_into().unwrap();
    let [_, _, oh, ow]: [usize; 4] = grad_out.dims().try_into().unwrap();
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let gy = grad_out.data();
    let mut gx = vec![0.0; in_dims.iter().product()];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(p, g)| {
        let go = &gy[p * oh * ow..][..oh * ow];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let v = go[oy * ow + ox];
                let top = v * (1.0 - ry.frac);
                let bot = v * ry.frac;
                g[ry.lo * w + rx.lo] += top * (1.0 - rx.frac);
                g[ry.lo * w + rx.hi] += top * rx.frac;
                g[ry.hi * w + rx.lo] += bot * (1.0 - rx.frac);
                g[ry.hi * w + rx.hi] += bot * rx.frac;
            }
        }
    });
    Tensor::new(in_dims, gx).unwrap()
}

// ---------------------------------------------------------------------------
// elementwise

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    Tensor::new(a.dims(), a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect())
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("hadamard", a, b)?;
    Tensor::new(a.dims(), a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect())
}

pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    x.map(|v| v * factor)
}

// ---------------------------------------------------------------------------
// linear over the last axis

fn linear_shape(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    const OP: &str = "linear";
    let c_in = *x.dims().last().unwrap();
    let [wi, wo] = dims_n::<2>(weight, OP, "weight")?;
    if wi != c_in {
        return Err(Error::shape(OP, format!("input width {c_in} vs weight rows {wi}")));
    }
    if bias.dims() != [wo] {
        return Err(Error::shape(OP, format!("bias must be [{wo}], got {:?}", bias.dims())));
    }
    Ok((x.numel() / c_in, c_in, wo))
}

/// `y = x W + b` applied independently to every row of the last axis.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, c_in, c_out) = linear_shape(x, weight, bias)?;
    let (xv, wv, bv) = (x.data(), weight.data(), bias.data());
    let mut out = vec![0.0; rows * c_out];
    out.par_chunks_mut(c_out).enumerate().for_each(|(r, o)| {
        o.copy_from_slice(bv);
        let xr = &xv[r * c_in..][..c_in];
        for (i, &xi) in xr.iter().enumerate() {
            let wr = &wv[i * c_out..][..c_out];
            for (oj, wj) in o.iter_mut().zip(wr) {
                *oj += xi * wj;
            }
        }
    });
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = c_out;
    Tensor::new(dims, out)
}

pub(crate) fn linear_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [c_in, c_out]: [usize; 2] = weight.dims().try_into().unwrap();
    let rows = x.numel() / c_in;
    let (xv, wv, gy) = (x.data(), weight.data(), grad_out.data());
    let mut gx = vec![0.0; xv.len()];
    gx.par_chunks_mut(c_in).enumerate().for_each(|(r, g)| {
        let go = &gy[r * c_out..][..c_out];
        for (i, gi) in g.iter_mut().enumerate() {
            let wr = &wv[i * c_out..][..c_out];
            *gi = wr.iter().zip(go).map(|(a, b)| a * b).sum();
        }
    });
    let mut gw = vec![0.0; c_in * c_out];
    gw.par_chunks_mut(c_out).enumerate().for_each(|(i, g)| {
        for r in 0..rows {
            let xi = xv[r * c_in + i];
            for (gj, go) in g.iter_mut().zip(&gy[r * c_out..][..c_out]) {
                *gj += xi * go;
            }
        }
    });
    let mut gb = vec![0.0; c_out];
    for r in 0..rows {
        for (gj, go) in gb.iter_mut().zip(&gy[r * c_out..][..c_out]) {
            *gj += go;
        }
    }
    (
        Tensor::new(x.dims(), gx).unwrap(),
        Tensor::new(weight.dims(), gw).unwrap(),
        Tensor::new([c_out], gb).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// permute

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {rank}")));
    }
    let in_dims = t.dims();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_dims[i + 1];
    }
    let out_dims: Vec<usize> = perm.iter().map(|&p| in_dims[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            offset -= strides[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_dims, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel_is_exact() {
        let x = Tensor::from_fn([1, 1, 4, 4], |i| (i as f64 * 0.37).sin());
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, &Tensor::zeros([1])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_zero_input_gives_bias() {
        let x = Tensor::zeros([2, 3, 5, 4]);
        let k = Tensor::from_fn([2, 3, 3, 3], |i| i as f64 - 20.0);
        let b = t(&[2], &[0.5, -1.5]);
        let y = conv2d(&x, &k, &b).unwrap();
        for bi in 0..2 {
            for y0 in 0..5 {
                for x0 in 0..4 {
                    assert_eq!(y.at(&[bi, 0, y0, x0]), 0.5);
                    assert_eq!(y.at(&[bi, 1, y0, x0]), -1.5);
                }
            }
        }
    }

    #[test]
    fn conv2d_all_ones_on_2x2() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = conv2d(&x, &Tensor::ones([1, 1, 3, 3]), &Tensor::zeros([1])).unwrap();
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let k = Tensor::zeros([1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, &Tensor::zeros([1])), Err(Error::Shape { .. })));
        let k5 = Tensor::zeros([1, 2, 5, 5]);
        assert!(conv2d(&x, &k5, &Tensor::zeros([1])).is_err());
    }

    #[test]
    fn conv1d_cases() {
        let x = Tensor::from_fn([2, 5, 3], |i| i as f64 * 0.1 - 1.0);
        let k = Tensor::from_fn([3, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 });
        assert_eq!(conv1d_depthwise(&x, &k, &Tensor::zeros([3])).unwrap(), x);

        let z = conv1d_depthwise(&Tensor::zeros([1, 4, 2]), &k.clone().reshape([3, 3]).unwrap().clone(), &Tensor::zeros([3]));
        assert!(z.is_err(), "channel mismatch must be rejected");
        let z = conv1d_depthwise(&Tensor::zeros([1, 4, 3]), &k, &t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert!(z.data().chunks(3).all(|r| r == [1.0, 2.0, 3.0]));

        let s = t(&[1, 3, 1], &[1.0, 2.0, 3.0]);
        let y = conv1d_depthwise(&s, &Tensor::ones([1, 3]), &Tensor::zeros([1])).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::ones([3]);
        let zeros = Tensor::zeros([3]);
        let c = t(&[1, 2, 3], &[4.0, 4.0, 4.0, -2.0, -2.0, -2.0]);
        assert!(layer_norm(&c, &ones, &zeros, 1e-5).unwrap().data().iter().all(|&v| v == 0.0));

        let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let y = layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }

        let y = layer_norm(&x, &zeros, &Tensor::full([3], 5.0), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));

        assert!(matches!(
            layer_norm(&t(&[1, 1, 1], &[3.0]), &Tensor::ones([1]), &Tensor::zeros([1]), 0.0),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn softmax_cases() {
        let y = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&t(&[2], &[1000.0, 1000.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&t(&[2], &[0.0, 3f64.ln()]), 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&t(&[2], &[0.0, 0.0]), 1).is_err());
    }

    #[test]
    fn softmax_middle_axis() {
        let x = Tensor::from_fn([2, 3, 4], |i| (i as f64).cos() * 3.0);
        let y = softmax(&x, 1).unwrap();
        for a in 0..2 {
            for c in 0..4 {
                let s: f64 = (0..3).map(|b| y.at(&[a, b, c])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_cases() {
        let x = Tensor::from_fn([1, 2, 5, 3], |i| (i as f64 * 1.3).sin());
        assert_eq!(bilinear_resize(&x, 5, 3).unwrap(), x);

        let c = Tensor::full([1, 1, 3, 4], 0.7);
        let y = bilinear_resize(&c, 7, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));

        let r = bilinear_resize(&t(&[1, 1, 1, 2], &[0.0, 1.0]), 1, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn elementwise_cases() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let x = t(&[3], &[1.5, -2.0, 3.0]);
        assert_eq!(hadamard(&x, &Tensor::ones([3])).unwrap(), x);
        assert_eq!(add(&t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])).unwrap().data(), &[4.0, 6.0]);
        assert!(add(&x, &Tensor::ones([2])).is_err());
        assert!(hadamard(&x, &Tensor::ones([3, 1])).is_err());
    }

    #[test]
    fn linear_cases() {
        let x = Tensor::from_fn([2, 3, 2], |i| i as f64);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(linear(&x, &eye, &Tensor::zeros([2])).unwrap(), x);
        let y = linear(&Tensor::zeros([1, 2, 2]), &eye, &t(&[2], &[3.0, -1.0])).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0, 3.0, -1.0]);
        let y = linear(&t(&[1, 1, 2], &[1.0, 2.0]), &t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]), &Tensor::ones([2]))
            .unwrap();
        assert_eq!(y.data(), &[2.0, 5.0]);
        assert!(linear(&x, &Tensor::zeros([3, 2]), &Tensor::zeros([2])).is_err());
    }

    #[test]
    fn flatten_layout_matches_definition() {
        let (c, h, w) = (2, 2, 3);
        let x = Tensor::from_fn([1, c, h, w], |i| i as f64);
        let seq = permute(&x.clone().reshape([1, c, h * w]).unwrap(), &[0, 2, 1]).unwrap();
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    assert_eq!(seq.at(&[0, y * w + xx, ci]), x.at(&[0, ci, y, xx]));
                }
            }
        }
        let back = permute(&seq, &[0, 2, 1]).unwrap().reshape([1, c, h, w]).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn permute_rejects_non_permutations() {
        let x = Tensor::zeros([2, 3]);
        assert!(permute(&x, &[0, 0]).is_err());
        assert!(permute(&x, &[0]).is_err());
        assert!(permute(&x, &[0, 2]).is_err());
    }
}
