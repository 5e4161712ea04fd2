//! Raw loop kernels behind the graph ops.
//!
//! Every output element is produced by exactly one task with a fixed
//! reduction order, so results do not depend on thread count or on the
//! batch size a sample happens to be evaluated in.

use rayon::prelude::*;

/// Below this many multiply-accumulates a kernel stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

fn par_rows<F>(out: &mut [f64], row: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row == 0 {
        return;
    }
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(row).enumerate().for_each(|(i, r)| f(i, r));
    } else {
        out.chunks_mut(row).enumerate().for_each(|(i, r)| f(i, r));
    }
}

/// `c[b] = a[b] · bm[b]` for `a: [batch, m, k]`, `bm: [batch, k, n]`.
pub fn matmul(a: &[f64], bm: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    par_rows(&mut c, n, batch * m * k * n, |row, out| {
        let bi = row / m;
        let a_row = &a[row * k..(row + 1) * k];
        let b_mat = &bm[bi * k * n..(bi + 1) * k * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b_mat[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    c
}

/// Gradients of [`matmul`]: `da = dc · bᵀ`, `db = aᵀ · dc`.
pub fn matmul_backward(
    a: &[f64],
    bm: &[f64],
    dc: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let work = batch * m * k * n;
    let mut da = vec![0.0; batch * m * k];
    par_rows(&mut da, k, work, |row, out| {
        let bi = row / m;
        let dc_row = &dc[row * n..(row + 1) * n];
        let b_mat = &bm[bi * k * n..(bi + 1) * k * n];
        for (p, o) in out.iter_mut().enumerate() {
            *o = dot(dc_row, &b_mat[p * n..(p + 1) * n]);
        }
    });
    let mut db = vec![0.0; batch * k * n];
    par_rows(&mut db, n, work, |row, out| {
        let bi = row / k;
        let p = row % k;
        for i in 0..m {
            let av = a[(bi * m + i) * k + p];
            let dc_row = &dc[(bi * m + i) * n..(bi * m + i + 1) * n];
            for (o, &g) in out.iter_mut().zip(dc_row) {
                *o += av * g;
            }
        }
    });
    (da, db)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// `y = x · wᵀ + b` with `x: [rows, in]`, `w: [out, in]`.
pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * dout];
    par_rows(&mut y, dout, rows * din * dout, |r, out| {
        let xr = &x[r * din..(r + 1) * din];
        for (o, yo) in out.iter_mut().enumerate() {
            let s = dot(xr, &w[o * din..(o + 1) * din]);
            *yo = match b {
                Some(b) => s + b[o],
                None => s,
            };
        }
    });
    y
}

/// Returns `(dx, dw, db)` for [`linear`].
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    din: usize,
    dout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let work = rows * din * dout;
    let mut dx = vec![0.0; rows * din];
    par_rows(&mut dx, din, work, |r, out| {
        for o in 0..dout {
            let g = dy[r * dout + o];
            for (d, &wv) in out.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                *d += g * wv;
            }
        }
    });
    let mut dw = vec![0.0; dout * din];
    par_rows(&mut dw, din, work, |o, out| {
        for r in 0..rows {
            let g = dy[r * dout + o];
            for (d, &xv) in out.iter_mut().zip(&x[r * din..(r + 1) * din]) {
                *d += g * xv;
            }
        }
    });
    let mut db = vec![0.0; dout];
    for r in 0..rows {
        for (d, &g) in db.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
            *d += g;
        }
    }
    (dx, dw, db)
}

/// Geometry of a 2-D cross-correlation over `[B, C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    fn weight_index(&self, oc: usize, icg: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.in_per_group() + icg) * self.kh + ky) * self.kw + kx
    }

    /// Output positions `o` with `o * stride + k - padding` inside `[0, len)`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((len as isize - 1 - off).div_euclid(s) + 1).clamp(0, out_len as isize);
        (lo.max(0) as usize, hi.max(lo) as usize)
    }
}

pub fn conv2d(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut y = vec![0.0; g.batch * g.out_ch * plane];
    let work = g.batch * g.out_ch * plane * g.in_per_group() * g.kh * g.kw;
    par_rows(&mut y, plane, work, |idx, out| {
        let (bi, oc) = (idx / g.out_ch, idx % g.out_ch);
        let grp = oc / g.out_per_group();
        for icg in 0..g.in_per_group() {
            let ic = grp * g.in_per_group() + icg;
            let xp = &x[(bi * g.in_ch + ic) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_range(ky, g.in_h, oh);
                for kx in 0..g.kw {
                    let (x0, x1) = g.valid_range(kx, g.in_w, ow);
                    let wv = w[g.weight_index(oc, icg, ky, kx)];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let orow = &mut out[oy * ow..(oy + 1) * ow];
                        let xrow = &xp[iy * g.in_w..(iy + 1) * g.in_w];
                        for ox in x0..x1 {
                            orow[ox] += wv * xrow[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            out.iter_mut().for_each(|v| *v += b[oc]);
        }
    });
    y
}

/// Returns `(dx, dw, db)` for [`conv2d`].
pub fn conv2d_backward(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeometry) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let work = g.batch * g.out_ch * plane * g.in_per_group() * g.kh * g.kw;
    let img = g.in_ch * g.in_h * g.in_w;

    let mut dx = vec![0.0; g.batch * img];
    par_rows(&mut dx, img, work, |bi, dxb| {
        for oc in 0..g.out_ch {
            let grp = oc / g.out_per_group();
            let dyp = &dy[(bi * g.out_ch + oc) * plane..][..plane];
            for icg in 0..g.in_per_group() {
                let ic = grp * g.in_per_group() + icg;
                let dxp = &mut dxb[ic * g.in_h * g.in_w..][..g.in_h * g.in_w];
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid_range(ky, g.in_h, oh);
                    for kx in 0..g.kw {
                        let (x0, x1) = g.valid_range(kx, g.in_w, ow);
                        let wv = w[g.weight_index(oc, icg, ky, kx)];
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.padding;
                            for ox in x0..x1 {
                                dxp[iy * g.in_w + ox * g.stride + kx - g.padding] += wv * dyp[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    });

    let wrow = g.in_per_group() * g.kh * g.kw;
    let mut dw = vec![0.0; g.out_ch * wrow];
    par_rows(&mut dw, wrow, work, |oc, dwo| {
        let grp = oc / g.out_per_group();
        for bi in 0..g.batch {
            let dyp = &dy[(bi * g.out_ch + oc) * plane..][..plane];
            for icg in 0..g.in_per_group() {
                let ic = grp * g.in_per_group() + icg;
                let xp = &x[(bi * g.in_ch + ic) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid_range(ky, g.in_h, oh);
                    for kx in 0..g.kw {
                        let (x0, x1) = g.valid_range(kx, g.in_w, ow);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.padding;
                            for ox in x0..x1 {
                                acc += dyp[oy * ow + ox] * xp[iy * g.in_w + ox * g.stride + kx - g.padding];
                            }
                        }
                        dwo[(icg * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });

    let mut db = vec![0.0; g.out_ch];
    for bi in 0..g.batch {
        for (oc, d) in db.iter_mut().enumerate() {
            *d += dy[(bi * g.out_ch + oc) * plane..][..plane].iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// Bin `[floor(i·len/out), floor((i+1)·len/out))` of an adaptive pool.
pub fn pool_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, (i + 1) * len / out)
}

/// Adaptive average pooling of `planes` independent `h × w` maps to `out × out`.
pub fn adaptive_avg_pool(x: &[f64], planes: usize, h: usize, w: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; planes * out * out];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..out {
            let (y0, y1) = pool_bin(oy, h, out);
            for ox in 0..out {
                let (x0, x1) = pool_bin(ox, w, out);
                let mut s = 0.0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        s += xp[iy * w + ix];
                    }
                }
                y[(p * out + oy) * out + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    y
}

pub fn adaptive_avg_pool_backward(dy: &[f64], planes: usize, h: usize, w: usize, out: usize) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for oy in 0..out {
            let (y0, y1) = pool_bin(oy, h, out);
            for ox in 0..out {
                let (x0, x1) = pool_bin(ox, w, out);
                let g = dy[(p * out + oy) * out + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dx[p * h * w + iy * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

pub fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

pub fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Returns `(y, xhat, rstd)` for layer norm over the last axis of width `d`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgamma, dbeta)` for [`layer_norm`].
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for j in 0..d {
            let dh = dyr[j] * gamma[j];
            mean_dh += dh;
            mean_dh_h += dh * hr[j];
            dgamma[j] += dyr[j] * hr[j];
            dbeta[j] += dyr[j];
        }
        mean_dh /= d as f64;
        mean_dh_h /= d as f64;
        for j in 0..d {
            let dh = dyr[j] * gamma[j];
            dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
        }
    }
    (dx, dgamma, dbeta)
}
