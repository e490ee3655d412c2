//! Raw numeric kernels behind the tape ops.
//!
//! Every kernel is a pure function over flat row-major slices. Parallel
//! kernels split work so that each output element is produced by exactly
//! one task with a fixed sequential reduction order, keeping results
//! bit-identical regardless of thread count.

use rayon::prelude::*;

/// `(c_out, c_in, k_t, k_h, k_w)` cross-correlation geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
}

/// `floor((in + 2p - k) / s) + 1`, or `None` when the window does not fit.
pub fn conv_out_dim(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = input + 2 * p;
    if padded < k || s == 0 || k == 0 {
        return None;
    }
    Some((padded - k) / s + 1)
}

/// Transposed-conv length: `(in - 1) * s + k - 2p`.
pub fn deconv_out_dim(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let grown = (input - 1) * s + k;
    if grown <= 2 * p {
        return None;
    }
    Some(grown - 2 * p)
}

const PAR_MIN_WORK: usize = 1 << 14;

#[inline]
fn idx4(c: usize, t: usize, h: usize, w: usize, dt: usize, dh: usize, dw: usize) -> usize {
    ((c * dt + t) * dh + h) * dw + w
}

// ---------------------------------------------------------------------------
// 3-D convolution (cross-correlation)
// ---------------------------------------------------------------------------

/// out[o,zt,zy,zx] = bias[o] + sum_{i,kt,kh,kw} x[i, zt*st-pt+kt, ...] * w[o,i,kt,kh,kw]
#[allow(clippy::too_many_arguments)]
pub fn conv3d_forward(
    x: &[f64],
    in_dims: (usize, usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    geom: &ConvGeom,
    out: &mut [f64],
    out_dims: (usize, usize, usize, usize),
) {
    let (ci, t, h, w) = in_dims;
    let (co, ot, oh, ow) = out_dims;
    let (kt, kh, kw) = geom.kernel;
    let (st, sh, sw) = geom.stride;
    let (pt, ph, pw) = geom.pad;
    debug_assert_eq!(ci, geom.c_in);
    debug_assert_eq!(co, geom.c_out);

    let plane = ot * oh * ow;
    let kvol = ci * kt * kh * kw;
    let body = |o: usize, out_plane: &mut [f64]| {
        let wbase = o * kvol;
        for zt in 0..ot {
            let it0 = (zt * st) as isize - pt as isize;
            for zy in 0..oh {
                let iy0 = (zy * sh) as isize - ph as isize;
                for zx in 0..ow {
                    let ix0 = (zx * sw) as isize - pw as isize;
                    let mut acc = bias[o];
                    for i in 0..ci {
                        for dt in 0..kt {
                            let it = it0 + dt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for dy in 0..kh {
                                let iy = iy0 + dy as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = idx4(i, it as usize, iy as usize, 0, t, h, w);
                                let wrow = wbase + ((i * kt + dt) * kh + dy) * kw;
                                for dx in 0..kw {
                                    let ix = ix0 + dx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[xrow + ix as usize] * weight[wrow + dx];
                                }
                            }
                        }
                    }
                    out_plane[(zt * oh + zy) * ow + zx] = acc;
                }
            }
        }
    };

    if co * plane * kvol >= PAR_MIN_WORK && co > 1 {
        out.par_chunks_mut(plane).enumerate().for_each(|(o, p)| body(o, p));
    } else {
        for (o, p) in out.chunks_mut(plane).enumerate() {
            body(o, p);
        }
    }
}

/// Gradient w.r.t. the convolution input (gather form, parallel over input channels).
#[allow(clippy::too_many_arguments)]
pub fn conv3d_grad_input(
    gout: &[f64],
    out_dims: (usize, usize, usize, usize),
    weight: &[f64],
    geom: &ConvGeom,
    gin: &mut [f64],
    in_dims: (usize, usize, usize, usize),
) {
    let (_ci, t, h, w) = in_dims;
    let (co, ot, oh, ow) = out_dims;
    let (kt, kh, kw) = geom.kernel;
    let (st, sh, sw) = geom.stride;
    let (pt, ph, pw) = geom.pad;
    let kvol = geom.c_in * kt * kh * kw;
    let in_plane = t * h * w;

    // For input position p and kernel offset d: output index z with z*s - pad + d == p.
    let body = |i: usize, gin_plane: &mut [f64]| {
        for it in 0..t {
            for iy in 0..h {
                for ix in 0..w {
                    let mut acc = 0.0;
                    for dt in 0..kt {
                        let zt_num = it as isize + pt as isize - dt as isize;
                        if zt_num < 0 || (zt_num as usize) % st != 0 {
                            continue;
                        }
                        let zt = zt_num as usize / st;
                        if zt >= ot {
                            continue;
                        }
                        for dy in 0..kh {
                            let zy_num = iy as isize + ph as isize - dy as isize;
                            if zy_num < 0 || (zy_num as usize) % sh != 0 {
                                continue;
                            }
                            let zy = zy_num as usize / sh;
                            if zy >= oh {
                                continue;
                            }
                            for dx in 0..kw {
                                let zx_num = ix as isize + pw as isize - dx as isize;
                                if zx_num < 0 || (zx_num as usize) % sw != 0 {
                                    continue;
                                }
                                let zx = zx_num as usize / sw;
                                if zx >= ow {
                                    continue;
                                }
                                let widx = ((i * kt + dt) * kh + dy) * kw + dx;
                                for o in 0..co {
                                    acc += gout[idx4(o, zt, zy, zx, ot, oh, ow)]
                                        * weight[o * kvol + widx];
                                }
                            }
                        }
                    }
                    gin_plane[(it * h + iy) * w + ix] = acc;
                }
            }
        }
    };

    if geom.c_in * in_plane * kt * kh * kw * co >= PAR_MIN_WORK && geom.c_in > 1 {
        gin.par_chunks_mut(in_plane).enumerate().for_each(|(i, p)| body(i, p));
    } else {
        for (i, p) in gin.chunks_mut(in_plane).enumerate() {
            body(i, p);
        }
    }
}

/// Gradient w.r.t. the convolution weights (parallel over output channels).
#[allow(clippy::too_many_arguments)]
pub fn conv3d_grad_weight(
    gout: &[f64],
    out_dims: (usize, usize, usize, usize),
    x: &[f64],
    in_dims: (usize, usize, usize, usize),
    geom: &ConvGeom,
    gw: &mut [f64],
) {
    let (ci, t, h, w) = in_dims;
    let (_co, ot, oh, ow) = out_dims;
    let (kt, kh, kw) = geom.kernel;
    let (st, sh, sw) = geom.stride;
    let (pt, ph, pw) = geom.pad;
    let kvol = ci * kt * kh * kw;

    let body = |o: usize, gw_block: &mut [f64]| {
        for i in 0..ci {
            for dt in 0..kt {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let mut acc = 0.0;
                        for zt in 0..ot {
                            let it = (zt * st + dt) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for zy in 0..oh {
                                let iy = (zy * sh + dy) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for zx in 0..ow {
                                    let ix = (zx * sw + dx) as isize - pw as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += gout[idx4(o, zt, zy, zx, ot, oh, ow)]
                                        * x[idx4(i, it as usize, iy as usize, ix as usize, t, h, w)];
                                }
                            }
                        }
                        gw_block[((i * kt + dt) * kh + dy) * kw + dx] = acc;
                    }
                }
            }
        }
    };

    if geom.c_out * kvol * ot * oh * ow >= PAR_MIN_WORK && geom.c_out > 1 {
        gw.par_chunks_mut(kvol).enumerate().for_each(|(o, b)| body(o, b));
    } else {
        for (o, b) in gw.chunks_mut(kvol).enumerate() {
            body(o, b);
        }
    }
}

pub fn conv3d_grad_bias(gout: &[f64], out_dims: (usize, usize, usize, usize), gb: &mut [f64]) {
    let (co, ot, oh, ow) = out_dims;
    let plane = ot * oh * ow;
    for o in 0..co {
        gb[o] = gout[o * plane..(o + 1) * plane].iter().sum();
    }
}

// ---------------------------------------------------------------------------
// Temporal transposed convolution (spatial kernel fixed at 1x1)
// ---------------------------------------------------------------------------

/// Geometry of a temporal-only transposed conv; weight layout is `(c_in, c_out, k_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeconvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k_t: usize,
    pub stride_t: usize,
    pub pad_t: usize,
}

/// out[o, z, y, x] = bias[o] + sum_{i, kt, it: it*s - p + kt == z} x[i, it, y, x] * w[i, o, kt]
pub fn deconv3d_temporal_forward(
    x: &[f64],
    in_dims: (usize, usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    geom: &DeconvGeom,
    out: &mut [f64],
    out_t: usize,
) {
    let (ci, t, h, w) = in_dims;
    let (co, k, s, p) = (geom.c_out, geom.k_t, geom.stride_t, geom.pad_t);
    let spatial = h * w;
    let plane = out_t * spatial;

    out.par_chunks_mut(plane).enumerate().for_each(|(o, out_plane)| {
        for z in 0..out_t {
            let row = &mut out_plane[z * spatial..(z + 1) * spatial];
            row.fill(bias[o]);
            for dt in 0..k {
                let it_num = z as isize + p as isize - dt as isize;
                if it_num < 0 || (it_num as usize) % s != 0 {
                    continue;
                }
                let it = it_num as usize / s;
                if it >= t {
                    continue;
                }
                for i in 0..ci {
                    let wv = weight[(i * co + o) * k + dt];
                    let xrow = &x[(i * t + it) * spatial..(i * t + it + 1) * spatial];
                    for (r, xv) in row.iter_mut().zip(xrow.iter()) {
                        *r += wv * xv;
                    }
                }
            }
        }
    });
}

pub fn deconv3d_temporal_grad_input(
    gout: &[f64],
    out_t: usize,
    weight: &[f64],
    geom: &DeconvGeom,
    gin: &mut [f64],
    in_dims: (usize, usize, usize, usize),
) {
    let (_ci, t, h, w) = in_dims;
    let (co, k, s, p) = (geom.c_out, geom.k_t, geom.stride_t, geom.pad_t);
    let spatial = h * w;
    let plane = t * spatial;

    gin.par_chunks_mut(plane).enumerate().for_each(|(i, gin_plane)| {
        for it in 0..t {
            let row = &mut gin_plane[it * spatial..(it + 1) * spatial];
            row.fill(0.0);
            for dt in 0..k {
                let z = it as isize * s as isize - p as isize + dt as isize;
                if z < 0 || z >= out_t as isize {
                    continue;
                }
                let z = z as usize;
                for o in 0..co {
                    let wv = weight[(i * co + o) * k + dt];
                    let grow = &gout[(o * out_t + z) * spatial..(o * out_t + z + 1) * spatial];
                    for (r, gv) in row.iter_mut().zip(grow.iter()) {
                        *r += wv * gv;
                    }
                }
            }
        }
    });
}

pub fn deconv3d_temporal_grad_weight(
    gout: &[f64],
    out_t: usize,
    x: &[f64],
    in_dims: (usize, usize, usize, usize),
    geom: &DeconvGeom,
    gw: &mut [f64],
) {
    let (_ci, t, h, w) = in_dims;
    let (co, k, s, p) = (geom.c_out, geom.k_t, geom.stride_t, geom.pad_t);
    let spatial = h * w;

    gw.par_chunks_mut(co * k).enumerate().for_each(|(i, gw_block)| {
        for o in 0..co {
            for dt in 0..k {
                let mut acc = 0.0;
                for it in 0..t {
                    let z = it as isize * s as isize - p as isize + dt as isize;
                    if z < 0 || z >= out_t as isize {
                        continue;
                    }
                    let z = z as usize;
                    let xrow = &x[(i * t + it) * spatial..(i * t + it + 1) * spatial];
                    let grow = &gout[(o * out_t + z) * spatial..(o * out_t + z + 1) * spatial];
                    acc += xrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum::<f64>();
                }
                gw_block[o * k + dt] = acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
}

/// Window-wise max or mean per channel. For `Max`, `argmax` receives the
/// flat input index of the selected element (first occurrence on ties,
/// scan order `t, h, w`). For `Avg`, padding cells are excluded from the
/// divisor, so a constant map stays constant at the borders.
#[allow(clippy::too_many_arguments)]
pub fn pool3d_forward(
    x: &[f64],
    in_dims: (usize, usize, usize, usize),
    kind: PoolKind,
    geom: &PoolGeom,
    out: &mut [f64],
    out_dims: (usize, usize, usize, usize),
    argmax: &mut [usize],
) {
    let (_c, t, h, w) = in_dims;
    let (c, ot, oh, ow) = out_dims;
    let (kt, kh, kw) = geom.kernel;
    let (st, sh, sw) = geom.stride;
    let (pt, ph, pw) = geom.pad;

    for ch in 0..c {
        for zt in 0..ot {
            for zy in 0..oh {
                for zx in 0..ow {
                    let oidx = idx4(ch, zt, zy, zx, ot, oh, ow);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for dt in 0..kt {
                        let it = (zt * st + dt) as isize - pt as isize;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for dy in 0..kh {
                            let iy = (zy * sh + dy) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = (zx * sw + dx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let iidx = idx4(ch, it as usize, iy as usize, ix as usize, t, h, w);
                                let v = x[iidx];
                                if v > best {
                                    best = v;
                                    best_idx = iidx;
                                }
                                sum += v;
                                count += 1;
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out[oidx] = best;
                            argmax[oidx] = best_idx;
                        }
                        PoolKind::Avg => out[oidx] = sum / count as f64,
                    }
                }
            }
        }
    }
}

/// Average-pool backward: distributes each output gradient uniformly over
/// the valid (in-bounds) cells of its window.
#[allow(clippy::too_many_arguments)]
pub fn pool3d_avg_grad(
    gout: &[f64],
    out_dims: (usize, usize, usize, usize),
    geom: &PoolGeom,
    gin: &mut [f64],
    in_dims: (usize, usize, usize, usize),
) {
    let (_c, t, h, w) = in_dims;
    let (c, ot, oh, ow) = out_dims;
    let (kt, kh, kw) = geom.kernel;
    let (st, sh, sw) = geom.stride;
    let (pt, ph, pw) = geom.pad;

    for ch in 0..c {
        for zt in 0..ot {
            for zy in 0..oh {
                for zx in 0..ow {
                    let g = gout[idx4(ch, zt, zy, zx, ot, oh, ow)];
                    let mut cells = Vec::with_capacity(kt * kh * kw);
                    for dt in 0..kt {
                        let it = (zt * st + dt) as isize - pt as isize;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for dy in 0..kh {
                            let iy = (zy * sh + dy) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = (zx * sw + dx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                cells.push(idx4(ch, it as usize, iy as usize, ix as usize, t, h, w));
                            }
                        }
                    }
                    let share = g / cells.len() as f64;
                    for idx in cells {
                        gin[idx] += share;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n], parallel over rows of A.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    let body = |row: usize, crow: &mut [f64]| {
        crow.fill(0.0);
        let arow = &a[row * k..(row + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(r, crow)| body(r, crow));
    } else {
        for (r, crow) in c.chunks_mut(n).enumerate() {
            body(r, crow);
        }
    }
}

pub fn transpose2d(a: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        for cidx in 0..cols {
            out[cidx * rows + r] = a[r * cols + cidx];
        }
    }
}
