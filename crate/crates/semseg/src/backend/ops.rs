//! Forward/backward kernels over NCHW f32 arrays. Convolution goes through
//! im2col + GEMM; everything else is direct loops parallelized over
//! independent output planes.

use ndarray::{Array1, Array3, Array4};

use super::{gemm_nn, gemm_nt_acc, gemm_tn, par_chunks_mut};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvConf {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvConf {
    pub fn square(k: usize, stride: usize) -> Self {
        // "same"-style padding: exact /stride on even inputs for odd kernels.
        ConvConf {
            kh: k,
            kw: k,
            stride,
            pad: (k - 1) / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolConf {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolConf {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

fn slice4(x: &Array4<f32>) -> &[f32] {
    x.as_slice().expect("activations are standard layout")
}

fn slice4_mut(x: &mut Array4<f32>) -> &mut [f32] {
    x.as_slice_mut().expect("activations are standard layout")
}

/// Scatter one sample's `[c·kh·kw, oh·ow]` patch matrix for GEMM. Rows are
/// grouped by input channel so chunked parallelism never splits a channel.
fn im2col(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    conf: ConvConf,
    (oh, ow): (usize, usize),
    cols: &mut [f32],
) {
    let osize = oh * ow;
    let row_block = conf.kh * conf.kw * osize;
    debug_assert_eq!(cols.len(), c * row_block);
    par_chunks_mut(cols, row_block, |ci, block| {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..conf.kh {
            for kx in 0..conf.kw {
                let row = (ky * conf.kw + kx) * osize;
                for oy in 0..oh {
                    let iy = (oy * conf.stride + ky) as isize - conf.pad as isize;
                    let dst = &mut block[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if conf.stride == 1 {
                        // ix = ox + kx - pad; copy the valid contiguous run.
                        let shift = kx as isize - conf.pad as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = ((w as isize - shift).max(0) as usize).min(ow);
                        dst[..ox_lo.min(ow)].fill(0.0);
                        if ox_lo < ox_hi {
                            let src_lo = (ox_lo as isize + shift) as usize;
                            dst[ox_lo..ox_hi]
                                .copy_from_slice(&src_row[src_lo..src_lo + (ox_hi - ox_lo)]);
                        }
                        dst[ox_hi.max(ox_lo.min(ow))..].fill(0.0);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * conf.stride + kx) as isize - conf.pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    });
}

/// Inverse of `im2col`: accumulate patch-matrix gradients back onto the
/// input grid. Parallel per channel; windows of one channel overlap, so the
/// per-channel scatter stays sequential.
fn col2im_acc(
    cols: &[f32],
    (_c, h, w): (usize, usize, usize),
    conf: ConvConf,
    (oh, ow): (usize, usize),
    dx: &mut [f32],
) {
    let osize = oh * ow;
    let row_block = conf.kh * conf.kw * osize;
    par_chunks_mut(dx, h * w, |ci, plane| {
        let block = &cols[ci * row_block..(ci + 1) * row_block];
        for ky in 0..conf.kh {
            for kx in 0..conf.kw {
                let row = (ky * conf.kw + kx) * osize;
                for oy in 0..oh {
                    let iy = (oy * conf.stride + ky) as isize - conf.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &block[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * conf.stride + kx) as isize - conf.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += g;
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_fwd(x: &Array4<f32>, w: &Array4<f32>, b: &Array1<f32>, conf: ConvConf) -> Array4<f32> {
    let (n, cin, h, wd) = x.dim();
    let (cout, wcin, kh, kw) = w.dim();
    debug_assert_eq!((wcin, kh, kw), (cin, conf.kh, conf.kw));
    let (oh, ow) = conf.out_hw(h, wd);
    let mut out = Array4::zeros((n, cout, oh, ow));
    let ckk = cin * conf.kh * conf.kw;
    let osize = oh * ow;
    let mut cols = vec![0.0f32; ckk * osize];
    let xs = slice4(x);
    let ws = slice4(w);
    let bs = b.as_slice().expect("bias contiguous");
    let outs = slice4_mut(&mut out);
    for ni in 0..n {
        im2col(&xs[ni * cin * h * wd..], (cin, h, wd), conf, (oh, ow), &mut cols);
        let o = &mut outs[ni * cout * osize..(ni + 1) * cout * osize];
        gemm_nn(cout, ckk, osize, ws, &cols, o);
        par_chunks_mut(o, osize, |co, row| {
            let bias = bs[co];
            for v in row.iter_mut() {
                *v += bias;
            }
        });
    }
    out
}

pub fn conv2d_bwd(
    x: &Array4<f32>,
    w: &Array4<f32>,
    g: &Array4<f32>,
    conf: ConvConf,
    need_dx: bool,
) -> (Option<Array4<f32>>, Array4<f32>, Array1<f32>) {
    let (n, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = g.dim();
    let ckk = cin * kh * kw;
    let osize = oh * ow;

    let xs = slice4(x);
    let ws = slice4(w);
    let gs = slice4(g);

    let mut db = Array1::<f32>::zeros(cout);
    {
        let dbs = db.as_slice_mut().unwrap();
        for ni in 0..n {
            for co in 0..cout {
                let row = &gs[(ni * cout + co) * osize..(ni * cout + co + 1) * osize];
                dbs[co] += row.iter().sum::<f32>();
            }
        }
    }

    let mut dw = Array4::<f32>::zeros((cout, cin, kh, kw));
    let mut dx = need_dx.then(|| Array4::<f32>::zeros((n, cin, h, wd)));
    let mut cols = vec![0.0f32; ckk * osize];
    for ni in 0..n {
        im2col(&xs[ni * cin * h * wd..], (cin, h, wd), conf, (oh, ow), &mut cols);
        let gi = &gs[ni * cout * osize..(ni + 1) * cout * osize];
        gemm_nt_acc(cout, osize, ckk, gi, &cols, slice4_mut(&mut dw));
        if let Some(dx) = dx.as_mut() {
            // Reuse cols as dX patch buffer: Wᵀ·g, then scatter.
            gemm_tn(ckk, cout, osize, ws, gi, &mut cols);
            col2im_acc(
                &cols,
                (cin, h, wd),
                conf,
                (oh, ow),
                &mut slice4_mut(dx)[ni * cin * h * wd..(ni + 1) * cin * h * wd],
            );
        }
    }
    (dx, dw, db)
}

pub fn depthwise_fwd(
    x: &Array4<f32>,
    w: &Array4<f32>,
    b: &Array1<f32>,
    conf: ConvConf,
) -> Array4<f32> {
    let (n, c, h, wd) = x.dim();
    let (oh, ow) = conf.out_hw(h, wd);
    let mut out = Array4::zeros((n, c, oh, ow));
    let xs = slice4(x);
    let ws = slice4(w);
    let bs = b.as_slice().unwrap();
    let outs = slice4_mut(&mut out);
    par_chunks_mut(outs, oh * ow, |plane_idx, dst| {
        let ci = plane_idx % c;
        let src = &xs[plane_idx * h * wd..(plane_idx + 1) * h * wd];
        let kern = &ws[ci * conf.kh * conf.kw..(ci + 1) * conf.kh * conf.kw];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bs[ci];
                for ky in 0..conf.kh {
                    let iy = (oy * conf.stride + ky) as isize - conf.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..conf.kw {
                        let ix = (ox * conf.stride + kx) as isize - conf.pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        acc += kern[ky * conf.kw + kx] * src[iy as usize * wd + ix as usize];
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    });
    out
}

pub fn depthwise_bwd(
    x: &Array4<f32>,
    w: &Array4<f32>,
    g: &Array4<f32>,
    conf: ConvConf,
    need_dx: bool,
) -> (Option<Array4<f32>>, Array4<f32>, Array1<f32>) {
    let (n, c, h, wd) = x.dim();
    let (_, _, oh, ow) = g.dim();
    let xs = slice4(x);
    let ws = slice4(w);
    let gs = slice4(g);
    let kk = conf.kh * conf.kw;

    let mut db = Array1::<f32>::zeros(c);
    let mut dw = Array4::<f32>::zeros((c, 1, conf.kh, conf.kw));
    {
        let dbs = db.as_slice_mut().unwrap();
        let dws = slice4_mut(&mut dw);
        for ni in 0..n {
            for ci in 0..c {
                let gp = &gs[(ni * c + ci) * oh * ow..(ni * c + ci + 1) * oh * ow];
                let xp = &xs[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                dbs[ci] += gp.iter().sum::<f32>();
                for ky in 0..conf.kh {
                    for kx in 0..conf.kw {
                        let mut acc = 0.0f32;
                        for oy in 0..oh {
                            let iy = (oy * conf.stride + ky) as isize - conf.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * conf.stride + kx) as isize - conf.pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += gp[oy * ow + ox] * xp[iy as usize * wd + ix as usize];
                            }
                        }
                        dws[ci * kk + ky * conf.kw + kx] += acc;
                    }
                }
            }
        }
    }

    let dx = need_dx.then(|| {
        let mut dx = Array4::<f32>::zeros((n, c, h, wd));
        let dxs = slice4_mut(&mut dx);
        par_chunks_mut(dxs, h * wd, |plane_idx, dst| {
            let ci = plane_idx % c;
            let gp = &gs[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
            let kern = &ws[ci * kk..(ci + 1) * kk];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gp[oy * ow + ox];
                    for ky in 0..conf.kh {
                        let iy = (oy * conf.stride + ky) as isize - conf.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..conf.kw {
                            let ix = (ox * conf.stride + kx) as isize - conf.pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            dst[iy as usize * wd + ix as usize] += gv * kern[ky * conf.kw + kx];
                        }
                    }
                }
            }
        });
        dx
    });
    (dx, dw, db)
}

pub fn maxpool_fwd(x: &Array4<f32>, conf: PoolConf) -> (Array4<f32>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = conf.out_hw(h, w);
    let mut out = Array4::zeros((n, c, oh, ow));
    let mut argmax = vec![0u32; n * c * oh * ow];
    let xs = slice4(x);
    let outs = slice4_mut(&mut out);
    // Two passes keep the chunked-parallel pattern simple: values first,
    // then indices (both scans are cheap and deterministic).
    let plane_of = |plane_idx: usize, oy: usize, ox: usize| -> (f32, u32) {
        let src = &xs[plane_idx * h * w..(plane_idx + 1) * h * w];
        let mut best = f32::NEG_INFINITY;
        let mut best_idx = 0u32;
        for ky in 0..conf.k {
            let iy = (oy * conf.stride + ky) as isize - conf.pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..conf.k {
                let ix = (ox * conf.stride + kx) as isize - conf.pad as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let idx = iy as usize * w + ix as usize;
                let v = src[idx];
                if v > best {
                    best = v;
                    best_idx = idx as u32;
                }
            }
        }
        (best, best_idx)
    };
    par_chunks_mut(outs, oh * ow, |plane_idx, dst| {
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = plane_of(plane_idx, oy, ox).0;
            }
        }
    });
    par_chunks_mut(&mut argmax, oh * ow, |plane_idx, dst| {
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = plane_of(plane_idx, oy, ox).1;
            }
        }
    });
    (out, argmax)
}

pub fn maxpool_bwd(
    argmax: &[u32],
    g: &Array4<f32>,
    x_dim: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (n, c, h, w) = x_dim;
    let (_, _, oh, ow) = g.dim();
    let gs = slice4(g);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let dxs = slice4_mut(&mut dx);
    par_chunks_mut(dxs, h * w, |plane_idx, dst| {
        let go = plane_idx * oh * ow;
        for o in 0..oh * ow {
            dst[argmax[go + o] as usize] += gs[go + o];
        }
    });
    dx
}

/// Non-overlapping average pooling down to a `bins`×`bins` grid.
pub fn avgpool_bins_fwd(x: &Array4<f32>, bins: usize) -> Result<Array4<f32>> {
    let (n, c, h, w) = x.dim();
    if h % bins != 0 || w % bins != 0 {
        return Err(Error::shape(format!(
            "pool bins {bins} do not divide feature dims {h}x{w}"
        )));
    }
    let (wh, ww) = (h / bins, w / bins);
    let norm = 1.0 / (wh * ww) as f32;
    let mut out = Array4::zeros((n, c, bins, bins));
    let xs = slice4(x);
    let outs = slice4_mut(&mut out);
    par_chunks_mut(outs, bins * bins, |plane_idx, dst| {
        let src = &xs[plane_idx * h * w..(plane_idx + 1) * h * w];
        for by in 0..bins {
            for bx in 0..bins {
                let mut acc = 0.0f32;
                for y in by * wh..(by + 1) * wh {
                    for x in bx * ww..(bx + 1) * ww {
                        acc += src[y * w + x];
                    }
                }
                dst[by * bins + bx] = acc * norm;
            }
        }
    });
    Ok(out)
}

pub fn avgpool_bins_bwd(g: &Array4<f32>, x_dim: (usize, usize, usize, usize)) -> Array4<f32> {
    let (n, c, h, w) = x_dim;
    let (_, _, bins, _) = g.dim();
    let (wh, ww) = (h / bins, w / bins);
    let norm = 1.0 / (wh * ww) as f32;
    let gs = slice4(g);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let dxs = slice4_mut(&mut dx);
    par_chunks_mut(dxs, h * w, |plane_idx, dst| {
        let gp = &gs[plane_idx * bins * bins..(plane_idx + 1) * bins * bins];
        for by in 0..bins {
            for bx in 0..bins {
                let gv = gp[by * bins + bx] * norm;
                for y in by * wh..(by + 1) * wh {
                    for x in bx * ww..(bx + 1) * ww {
                        dst[y * w + x] += gv;
                    }
                }
            }
        }
    });
    dx
}

/// Integer-factor nearest upsampling with repeat semantics, so factors
/// compose exactly: `up(a)∘up(b) == up(a·b)`.
pub fn upsample_nearest_fwd(x: &Array4<f32>, factor: usize) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Array4::zeros((n, c, oh, ow));
    let xs = slice4(x);
    let outs = slice4_mut(&mut out);
    par_chunks_mut(outs, oh * ow, |plane_idx, dst| {
        let src = &xs[plane_idx * h * w..(plane_idx + 1) * h * w];
        for oy in 0..oh {
            let sy = oy / factor;
            let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
            let src_row = &src[sy * w..(sy + 1) * w];
            for (ox, d) in dst_row.iter_mut().enumerate() {
                *d = src_row[ox / factor];
            }
        }
    });
    out
}

pub fn upsample_nearest_bwd(g: &Array4<f32>, factor: usize) -> Array4<f32> {
    let (n, c, oh, ow) = g.dim();
    let (h, w) = (oh / factor, ow / factor);
    let gs = slice4(g);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let dxs = slice4_mut(&mut dx);
    par_chunks_mut(dxs, h * w, |plane_idx, dst| {
        let gp = &gs[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        for oy in 0..oh {
            let sy = oy / factor;
            for ox in 0..ow {
                dst[sy * w + ox / factor] += gp[oy * ow + ox];
            }
        }
    });
    dx
}

fn bilinear_axis(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    (0..out_len)
        .map(|o| {
            let s = ((o as f32 + 0.5) * in_len as f32 / out_len as f32 - 0.5)
                .clamp(0.0, (in_len - 1) as f32);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, s - lo as f32)
        })
        .collect()
}

/// Half-pixel bilinear resize to an arbitrary output size.
pub fn resize_bilinear_fwd(x: &Array4<f32>, oh: usize, ow: usize) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    if (oh, ow) == (h, w) {
        return x.clone();
    }
    let ys = bilinear_axis(oh, h);
    let xsax = bilinear_axis(ow, w);
    let mut out = Array4::zeros((n, c, oh, ow));
    let xs = slice4(x);
    let outs = slice4_mut(&mut out);
    par_chunks_mut(outs, oh * ow, |plane_idx, dst| {
        let src = &xs[plane_idx * h * w..(plane_idx + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &src[y0 * w..y0 * w + w];
            let r1 = &src[y1 * w..y1 * w + w];
            let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, fx)) in xsax.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst_row[ox] = top + (bot - top) * fy;
            }
        }
    });
    out
}

pub fn resize_bilinear_bwd(
    g: &Array4<f32>,
    x_dim: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (n, c, h, w) = x_dim;
    let (_, _, oh, ow) = g.dim();
    if (oh, ow) == (h, w) {
        return g.clone();
    }
    let ys = bilinear_axis(oh, h);
    let xsax = bilinear_axis(ow, w);
    let gs = slice4(g);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let dxs = slice4_mut(&mut dx);
    par_chunks_mut(dxs, h * w, |plane_idx, dst| {
        let gp = &gs[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xsax.iter().enumerate() {
                let gv = gp[oy * ow + ox];
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    });
    dx
}

pub struct BnTrainOut {
    pub y: Array4<f32>,
    pub xhat: Array4<f32>,
    pub inv_std: Array1<f32>,
    pub mean: Array1<f32>,
    pub var: Array1<f32>,
}

pub fn batchnorm_train_fwd(
    x: &Array4<f32>,
    gamma: &Array1<f32>,
    beta: &Array1<f32>,
    eps: f32,
) -> BnTrainOut {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;
    let xs = slice4(x);
    let plane = h * w;

    let mut mean = Array1::<f32>::zeros(c);
    let mut var = Array1::<f32>::zeros(c);
    for ci in 0..c {
        let mut s = 0.0f64;
        let mut s2 = 0.0f64;
        for ni in 0..n {
            let p = &xs[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            for &v in p {
                s += v as f64;
                s2 += (v as f64) * (v as f64);
            }
        }
        let mu = s / m;
        mean[ci] = mu as f32;
        var[ci] = ((s2 / m - mu * mu).max(0.0)) as f32;
    }
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());

    let mut xhat = Array4::<f32>::zeros((n, c, h, w));
    let mut y = Array4::<f32>::zeros((n, c, h, w));
    {
        let xh = slice4_mut(&mut xhat);
        par_chunks_mut(xh, plane, |plane_idx, dst| {
            let ci = plane_idx % c;
            let src = &xs[plane_idx * plane..(plane_idx + 1) * plane];
            let (mu, istd) = (mean[ci], inv_std[ci]);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mu) * istd;
            }
        });
    }
    {
        let xh = slice4(&xhat);
        let ys = slice4_mut(&mut y);
        par_chunks_mut(ys, plane, |plane_idx, dst| {
            let ci = plane_idx % c;
            let src = &xh[plane_idx * plane..(plane_idx + 1) * plane];
            let (ga, be) = (gamma[ci], beta[ci]);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = ga * v + be;
            }
        });
    }
    BnTrainOut {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

pub fn batchnorm_train_bwd(
    g: &Array4<f32>,
    xhat: &Array4<f32>,
    inv_std: &Array1<f32>,
    gamma: &Array1<f32>,
) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
    let (n, c, h, w) = g.dim();
    let m = (n * h * w) as f64;
    let plane = h * w;
    let gs = slice4(g);
    let xh = slice4(xhat);

    let mut dgamma = Array1::<f32>::zeros(c);
    let mut dbeta = Array1::<f32>::zeros(c);
    for ci in 0..c {
        let mut sg = 0.0f64;
        let mut sgx = 0.0f64;
        for ni in 0..n {
            let off = (ni * c + ci) * plane;
            for i in 0..plane {
                sg += gs[off + i] as f64;
                sgx += gs[off + i] as f64 * xh[off + i] as f64;
            }
        }
        dbeta[ci] = sg as f32;
        dgamma[ci] = sgx as f32;
    }

    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let dxs = slice4_mut(&mut dx);
    par_chunks_mut(dxs, plane, |plane_idx, dst| {
        let ci = plane_idx % c;
        let off = plane_idx * plane;
        let scale = gamma[ci] * inv_std[ci];
        let mean_g = dbeta[ci] as f64 / m;
        let mean_gx = dgamma[ci] as f64 / m;
        for i in 0..plane {
            let term =
                gs[off + i] as f64 - mean_g - xh[off + i] as f64 * mean_gx;
            dst[i] = scale * term as f32;
        }
    });
    (dx, dgamma, dbeta)
}

/// Per-channel `y = x·scale + shift`; how batch norm runs in inference mode.
pub fn channel_affine_fwd(x: &Array4<f32>, scale: &Array1<f32>, shift: &Array1<f32>) -> Array4<f32> {
    let (_n, c, h, w) = x.dim();
    let plane = h * w;
    let mut out = Array4::zeros(x.dim());
    let xs = slice4(x);
    let outs = slice4_mut(&mut out);
    par_chunks_mut(outs, plane, |plane_idx, dst| {
        let ci = plane_idx % c;
        let src = &xs[plane_idx * plane..(plane_idx + 1) * plane];
        let (sc, sh) = (scale[ci], shift[ci]);
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = v * sc + sh;
        }
    });
    out
}

pub fn channel_affine_bwd(g: &Array4<f32>, scale: &Array1<f32>) -> Array4<f32> {
    let (_, c, h, w) = g.dim();
    let plane = h * w;
    let gs = slice4(g);
    let mut dx = Array4::zeros(g.dim());
    let dxs = slice4_mut(&mut dx);
    par_chunks_mut(dxs, plane, |plane_idx, dst| {
        let sc = scale[plane_idx % c];
        let src = &gs[plane_idx * plane..(plane_idx + 1) * plane];
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = v * sc;
        }
    });
    dx
}

pub fn relu_fwd(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_bwd(g: &Array4<f32>, x: &Array4<f32>) -> Array4<f32> {
    let mut dx = g.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Channel softmax with max subtraction.
pub fn softmax_fwd(x: &Array4<f32>) -> Array4<f32> {
    let (_n, c, h, w) = x.dim();
    let plane = h * w;
    let xs = slice4(x);
    let mut out = Array4::zeros(x.dim());
    let outs = slice4_mut(&mut out);
    // Chunk by sample; channel access is strided within a sample.
    par_chunks_mut(outs, c * plane, |ni, dst| {
        let src = &xs[ni * c * plane..(ni + 1) * c * plane];
        for j in 0..plane {
            let mut maxv = f32::NEG_INFINITY;
            for ci in 0..c {
                maxv = maxv.max(src[ci * plane + j]);
            }
            let mut denom = 0.0f32;
            for ci in 0..c {
                let e = (src[ci * plane + j] - maxv).exp();
                dst[ci * plane + j] = e;
                denom += e;
            }
            let inv = 1.0 / denom;
            for ci in 0..c {
                dst[ci * plane + j] *= inv;
            }
        }
    });
    out
}

pub fn softmax_bwd(g: &Array4<f32>, y: &Array4<f32>) -> Array4<f32> {
    let (_n, c, h, w) = y.dim();
    let plane = h * w;
    let gs = slice4(g);
    let ys = slice4(y);
    let mut dx = Array4::zeros(y.dim());
    let dxs = slice4_mut(&mut dx);
    par_chunks_mut(dxs, c * plane, |ni, dst| {
        let off = ni * c * plane;
        for j in 0..plane {
            let mut dot = 0.0f32;
            for ci in 0..c {
                dot += gs[off + ci * plane + j] * ys[off + ci * plane + j];
            }
            for ci in 0..c {
                let idx = ci * plane + j;
                dst[idx] = ys[off + idx] * (gs[off + idx] - dot);
            }
        }
    });
    dx
}

pub struct NllConf {
    pub eps: f32,
    pub class_weights: Option<Vec<f32>>,
    pub ignore_label: Option<u8>,
}

/// Mean (optionally class-weighted) negative log-likelihood over per-pixel
/// probability maps. Returns the loss and the weight normalizer used, which
/// the backward pass reuses.
pub fn nll_fwd(probs: &Array4<f32>, labels: &Array3<u8>, conf: &NllConf) -> Result<(f32, f64)> {
    let (n, c, h, w) = probs.dim();
    if labels.dim() != (n, h, w) {
        return Err(Error::shape(format!(
            "labels {:?} do not match probability maps {:?}",
            labels.dim(),
            probs.dim()
        )));
    }
    let plane = h * w;
    let ps = slice4(probs);
    let ls = labels.as_slice().expect("labels standard layout");
    let mut total = 0.0f64;
    let mut norm = 0.0f64;
    for ni in 0..n {
        let poff = ni * c * plane;
        let loff = ni * plane;
        for j in 0..plane {
            let t = ls[loff + j];
            if conf.ignore_label == Some(t) {
                continue;
            }
            if t as usize >= c {
                return Err(Error::shape(format!(
                    "label {t} out of range for {c} classes"
                )));
            }
            let wgt = conf
                .class_weights
                .as_ref()
                .map_or(1.0, |ws| ws[t as usize] as f64);
            let p = ps[poff + t as usize * plane + j].max(conf.eps);
            if !p.is_finite() {
                return Err(Error::Runtime("non-finite probability in loss".into()));
            }
            total += wgt * -(p as f64).ln();
            norm += wgt;
        }
    }
    if norm == 0.0 {
        return Err(Error::Runtime(
            "loss normalizer is zero: every pixel ignored".into(),
        ));
    }
    Ok(((total / norm) as f32, norm))
}

pub fn nll_bwd(
    g_scale: f32,
    probs: &Array4<f32>,
    labels: &Array3<u8>,
    conf: &NllConf,
    norm: f64,
) -> Array4<f32> {
    let (n, c, h, w) = probs.dim();
    let plane = h * w;
    let ps = slice4(probs);
    let ls = labels.as_slice().unwrap();
    let mut dp = Array4::<f32>::zeros(probs.dim());
    let dps = slice4_mut(&mut dp);
    for ni in 0..n {
        let poff = ni * c * plane;
        let loff = ni * plane;
        for j in 0..plane {
            let t = ls[loff + j];
            if conf.ignore_label == Some(t) {
                continue;
            }
            let wgt = conf
                .class_weights
                .as_ref()
                .map_or(1.0, |ws| ws[t as usize] as f64);
            let idx = poff + t as usize * plane + j;
            let p = ps[idx];
            if p > conf.eps {
                dps[idx] = g_scale * (-(wgt / norm) as f32) / p;
            }
        }
    }
    dp
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array4};

    fn naive_conv(
        x: &Array4<f32>,
        w: &Array4<f32>,
        b: &Array1<f32>,
        conf: ConvConf,
    ) -> Array4<f32> {
        let (n, cin, h, wd) = x.dim();
        let (cout, _, kh, kw) = w.dim();
        let (oh, ow) = conf.out_hw(h, wd);
        let mut out = Array4::zeros((n, cout, oh, ow));
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * conf.stride + ky) as isize - conf.pad as isize;
                                    let ix = (ox * conf.stride + kx) as isize - conf.pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x[[ni, ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[ni, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp4(shape: (usize, usize, usize, usize), scale: f32) -> Array4<f32> {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        Array4::from_shape_vec(
            shape,
            (0..len).map(|i| ((i as f32) * scale).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv_matches_naive() {
        for &(stride, k) in &[(1usize, 3usize), (2, 3), (2, 1), (1, 1), (2, 7)] {
            let conf = ConvConf::square(k, stride);
            let x = ramp4((2, 3, 8, 8), 0.37);
            let w = ramp4((4, 3, k, k), 0.19);
            let b = arr1(&[0.1, -0.2, 0.3, 0.0]);
            let got = conv2d_fwd(&x, &w, &b, conf);
            let want = naive_conv(&x, &w, &b, conf);
            assert_eq!(got.dim(), want.dim());
            for (a, e) in got.iter().zip(want.iter()) {
                assert!((a - e).abs() < 1e-4, "stride {stride} k {k}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn depthwise_matches_grouped_naive() {
        let conf = ConvConf::square(3, 2);
        let x = ramp4((2, 4, 6, 6), 0.23);
        let w = ramp4((4, 1, 3, 3), 0.31);
        let b = arr1(&[0.0, 0.5, -0.5, 1.0]);
        let got = depthwise_fwd(&x, &w, &b, conf);
        // Depthwise = full conv with a block-diagonal kernel.
        let mut wfull = Array4::<f32>::zeros((4, 4, 3, 3));
        for c in 0..4 {
            for ky in 0..3 {
                for kx in 0..3 {
                    wfull[[c, c, ky, kx]] = w[[c, 0, ky, kx]];
                }
            }
        }
        let want = naive_conv(&x, &wfull, &b, conf);
        for (a, e) in got.iter().zip(want.iter()) {
            assert!((a - e).abs() < 1e-4);
        }
    }

    #[test]
    fn maxpool_2x2_known_values() {
        let x = Array4::from_shape_vec(
            (1, 1, 2, 4),
            vec![1.0, 2.0, 5.0, 0.0, 3.0, 4.0, -1.0, -2.0],
        )
        .unwrap();
        let (y, arg) = maxpool_fwd(
            &x,
            PoolConf {
                k: 2,
                stride: 2,
                pad: 0,
            },
        );
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        assert_eq!(y[[0, 0, 0, 1]], 5.0);
        assert_eq!(arg, vec![5, 2]);
    }

    #[test]
    fn nearest_upsample_composes_exactly() {
        let x = ramp4((1, 2, 3, 3), 0.7);
        let twice = upsample_nearest_fwd(&upsample_nearest_fwd(&x, 2), 2);
        let once = upsample_nearest_fwd(&x, 4);
        assert_eq!(twice, once);
    }

    #[test]
    fn bilinear_resize_preserves_constant_and_distribution_sums() {
        let x = Array4::from_elem((1, 3, 4, 4), 1.0 / 3.0);
        let y = resize_bilinear_fwd(&x, 9, 7);
        for v in y.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = ramp4((2, 5, 4, 4), 1.3);
        let y = softmax_fwd(&x);
        let (n, c, h, w) = y.dim();
        for ni in 0..n {
            for yy in 0..h {
                for xx in 0..w {
                    let s: f32 = (0..c).map(|ci| y[[ni, ci, yy, xx]]).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn batchnorm_normalizes_batch() {
        let x = ramp4((3, 2, 5, 5), 0.11);
        let gamma = arr1(&[1.0, 1.0]);
        let beta = arr1(&[0.0, 0.0]);
        let out = batchnorm_train_fwd(&x, &gamma, &beta, 1e-5);
        let (n, c, h, w) = out.y.dim();
        let m = (n * h * w) as f64;
        for ci in 0..c {
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for ni in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        let v = out.y[[ni, ci, yy, xx]] as f64;
                        s += v;
                        s2 += v * v;
                    }
                }
            }
            assert!((s / m).abs() < 1e-4);
            assert!((s2 / m - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn uniform_prediction_nll_is_ln_k() {
        let probs = Array4::from_elem((1, 4, 2, 2), 0.25);
        let labels = Array3::zeros((1, 2, 2));
        let (loss, _) = nll_fwd(
            &probs,
            &labels,
            &NllConf {
                eps: 1e-7,
                class_weights: None,
                ignore_label: None,
            },
        )
        .unwrap();
        assert!((loss - 4.0f32.ln()).abs() < 1e-6);
    }
}
