//! Raw forward/backward kernels over flat slices. Shape validation happens
//! in the tape; everything here assumes consistent sizes.

use super::gemm::{gemm, Layout};
use super::Elem;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad`
/// falls inside the image.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds `input` (C×H×W) into a `(C·Kh·Kw) × (Ho·Wo)` matrix.
pub(crate) fn im2col(g: &ConvGeom, input: &[Elem]) -> Vec<Elem> {
    let p = g.positions();
    let mut cols = vec![0.0; g.patch() * p];
    for ci in 0..g.c {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * g.wo + lo..oy * g.wo + hi];
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out.copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (o, s) in out.iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = *s;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` back into `dinput`.
fn col2im_add(g: &ConvGeom, cols: &[Elem], dinput: &mut [Elem]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &mut dinput[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let vals = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + (hi - lo)].iter_mut().zip(vals) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(vals) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and, when `keep_cols` is set and the unfold is not
/// the input itself, the unfolded columns for reuse in the backward pass.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[Elem],
    kernel: &[Elem],
    bias: &[Elem],
    keep_cols: bool,
) -> (Vec<Elem>, Option<Vec<Elem>>) {
    let p = g.positions();
    let mut out = vec![0.0; g.o * p];
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias[o]);
    }
    if g.is_pointwise() {
        gemm(g.o, g.patch(), p, kernel, Layout::rows(g.patch()), input, Layout::rows(p), 1.0, &mut out);
        return (out, None);
    }
    let cols = im2col(g, input);
    gemm(g.o, g.patch(), p, kernel, Layout::rows(g.patch()), &cols, Layout::rows(p), 1.0, &mut out);
    (out, keep_cols.then_some(cols))
}

/// Accumulates gradients for whichever of input/kernel/bias are requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[Elem],
    kernel: &[Elem],
    cached_cols: Option<&[Elem]>,
    dout: &[Elem],
    dinput: Option<&mut [Elem]>,
    dkernel: Option<&mut [Elem]>,
    dbias: Option<&mut [Elem]>,
) {
    let p = g.positions();
    let patch = g.patch();
    if let Some(db) = dbias {
        for (o, row) in dout.chunks(p).enumerate() {
            db[o] += row.iter().map(|&v| v as f64).sum::<f64>() as Elem;
        }
    }
    if let Some(dk) = dkernel {
        let owned;
        let cols: &[Elem] = match cached_cols {
            _ if g.is_pointwise() => input,
            Some(c) => c,
            None => {
                owned = im2col(g, input);
                &owned
            }
        };
        gemm(g.o, p, patch, dout, Layout::rows(p), cols, Layout::transposed(p), 1.0, dk);
    }
    if let Some(dx) = dinput {
        if g.is_pointwise() {
            gemm(patch, g.o, p, kernel, Layout::transposed(patch), dout, Layout::rows(p), 1.0, dx);
        } else {
            let mut dcols = vec![0.0; patch * p];
            gemm(patch, g.o, p, kernel, Layout::transposed(patch), dout, Layout::rows(p), 0.0, &mut dcols);
            col2im_add(g, &dcols, dx);
        }
    }
}

/// Per-channel normalization; returns `(output, xhat, inv_std)`.
pub(crate) fn instance_norm_forward(
    x: &[Elem],
    channels: usize,
    gain: &[Elem],
    shift: &[Elem],
    eps: f64,
) -> (Vec<Elem>, Vec<Elem>, Vec<Elem>) {
    let n = x.len() / channels;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; channels];
    for c in 0..channels {
        let xs = &x[c * n..(c + 1) * n];
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[c] = inv as Elem;
        for i in 0..n {
            let h = ((xs[i] as f64 - mean) * inv) as Elem;
            xhat[c * n + i] = h;
            out[c * n + i] = gain[c] * h + shift[c];
        }
    }
    (out, xhat, inv_std)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn instance_norm_backward(
    dout: &[Elem],
    xhat: &[Elem],
    inv_std: &[Elem],
    gain: &[Elem],
    dx: Option<&mut [Elem]>,
    dgain: Option<&mut [Elem]>,
    dshift: Option<&mut [Elem]>,
) {
    let channels = inv_std.len();
    let n = dout.len() / channels;
    if let Some(dg) = dgain {
        for c in 0..channels {
            let s: f64 = (c * n..(c + 1) * n).map(|i| dout[i] as f64 * xhat[i] as f64).sum();
            dg[c] += s as Elem;
        }
    }
    if let Some(ds) = dshift {
        for c in 0..channels {
            ds[c] += dout[c * n..(c + 1) * n].iter().map(|&v| v as f64).sum::<f64>() as Elem;
        }
    }
    if let Some(dx) = dx {
        for c in 0..channels {
            let g = gain[c] as f64;
            let (mut sum_d, mut sum_dh) = (0.0f64, 0.0f64);
            for i in c * n..(c + 1) * n {
                let d = dout[i] as f64 * g;
                sum_d += d;
                sum_dh += d * xhat[i] as f64;
            }
            let scale = inv_std[c] as f64 / n as f64;
            for i in c * n..(c + 1) * n {
                let d = dout[i] as f64 * g;
                dx[i] += (scale * (n as f64 * d - sum_d - xhat[i] as f64 * sum_dh)) as Elem;
            }
        }
    }
}

pub(crate) fn upsample_forward(x: &[Elem], c: usize, h: usize, w: usize, f: usize) -> Vec<Elem> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                out[(ci * oh + y) * ow + xo] = x[(ci * h + y / f) * w + xo / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dout: &[Elem], c: usize, h: usize, w: usize, f: usize, dx: &mut [Elem]) {
    let (oh, ow) = (h * f, w * f);
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                dx[(ci * h + y / f) * w + xo / f] += dout[(ci * oh + y) * ow + xo];
            }
        }
    }
}

/// `F Fᵀ / (C·P)` for `F` stored as C×P.
pub(crate) fn gram_forward(f: &[Elem], c: usize, p: usize) -> Vec<Elem> {
    let mut g = vec![0.0; c * c];
    gemm(c, p, c, f, Layout::rows(p), f, Layout::transposed(p), 0.0, &mut g);
    let norm = 1.0 / (c * p) as Elem;
    g.iter_mut().for_each(|v| *v *= norm);
    g
}

pub(crate) fn gram_backward(f: &[Elem], c: usize, p: usize, dg: &[Elem], df: &mut [Elem]) {
    let norm = 1.0 / (c * p) as Elem;
    let mut sym = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            sym[i * c + j] = (dg[i * c + j] + dg[j * c + i]) * norm;
        }
    }
    gemm(c, c, p, &sym, Layout::rows(c), f, Layout::rows(p), 1.0, df);
}

