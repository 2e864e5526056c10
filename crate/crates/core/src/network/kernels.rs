//! Convolution and resampling kernels on `(channels, height, width)` buffers.

/// Output spatial size of a `k x k` convolution with `k / 2` zero padding.
pub(crate) fn conv_out_size(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

/// Unfolds `x (cin, h, w)` into a `(cin·k·k) x (ho·wo)` row-major matrix.
pub(crate) fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    col: &mut [f64],
) {
    let pad = (k / 2) as isize;
    let ho = conv_out_size(h, k, stride);
    let wo = conv_out_size(w, k, stride);
    let p = ho * wo;
    debug_assert_eq!(col.len(), cin * k * k * p);
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        *d = if ix >= 0 && ix < w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `x`.
pub(crate) fn col2im_add(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    x: &mut [f64],
) {
    let pad = (k / 2) as isize;
    let ho = conv_out_size(h, k, stride);
    let wo = conv_out_size(w, k, stride);
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Interpolation taps for 2x bilinear upsampling with half-pixel centres
/// (the `align_corners = false` convention).
pub(crate) fn upsample_taps(n: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let frac = src - i0 as f64;
            let i1 = (i0 + 1).min(n - 1);
            [(i0, 1.0 - frac), (i1, frac)]
        })
        .collect()
}

pub(crate) fn upsample2(x: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let mut s = 0.0;
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        s += wy * wx * src[iy * w + ix];
                    }
                }
                dst[oy * wo + ox] = s;
            }
        }
    }
}

pub(crate) fn upsample2_adjoint_add(g: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    for ch in 0..c {
        let src = &g[ch * ho * wo..(ch + 1) * ho * wo];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let v = src[oy * wo + ox];
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        dst[iy * w + ix] += wy * wx * v;
                    }
                }
            }
        }
    }
}
