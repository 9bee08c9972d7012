//! Tensor kernels used by the compute graph: convolution, shuffle
//! permutations, per-position layer norm, row softmax/normalize.
//!
//! All kernels are deterministic under any rayon thread count: parallel
//! loops partition output elements and each element is reduced
//! sequentially.

use rayon::prelude::*;

use crate::tensor::Tensor;

/// Below this element count the parallel kernels fall back to one thread.
const PAR_THRESHOLD: usize = 16 * 1024;

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Forward convolution, HWC input, weight (kh, kw, cin/groups, cout).
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let (h, wid, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cin_g, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let g = spec.groups;
    debug_assert_eq!(cin_g * g, cin);
    debug_assert_eq!(cout % g, 0);
    let ho = conv_out_dim(h, kh, spec.stride, spec.pad);
    let wo = conv_out_dim(wid, kw, spec.stride, spec.pad);

    // pointwise ungrouped convolution is a plain matrix product
    if kh == 1 && kw == 1 && g == 1 && spec.stride == 1 && spec.pad == 0 {
        let x2 = x.reshaped(&[h * wid, cin]).unwrap();
        let w2 = w.reshaped(&[cin, cout]).unwrap();
        let mut y = x2.matmul(&w2);
        if let Some(bias) = b {
            for row in y.data_mut().chunks_exact_mut(cout) {
                for (v, bv) in row.iter_mut().zip(bias.data()) {
                    *v += bv;
                }
            }
        }
        return y.reshaped(&[ho, wo, cout]).unwrap();
    }

    let cpg = cout / g;
    let mut out = Tensor::zeros(&[ho, wo, cout]);
    let xd = x.data();
    let wd = w.data();
    let row_work = |yo: usize, orow: &mut [f64]| {
        for xo in 0..wo {
            let acc = &mut orow[xo * cout..(xo + 1) * cout];
            if let Some(bias) = b {
                acc.copy_from_slice(bias.data());
            }
            for ky in 0..kh {
                let yi = (yo * spec.stride + ky) as isize - spec.pad as isize;
                if yi < 0 || yi >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let xi = (xo * spec.stride + kx) as isize - spec.pad as isize;
                    if xi < 0 || xi >= wid as isize {
                        continue;
                    }
                    let xbase = (yi as usize * wid + xi as usize) * cin;
                    for gi in 0..g {
                        for ci_g in 0..cin_g {
                            let xv = xd[xbase + gi * cin_g + ci_g];
                            if xv == 0.0 {
                                continue;
                            }
                            let wbase = ((ky * kw + kx) * cin_g + ci_g) * cout + gi * cpg;
                            let ws = &wd[wbase..wbase + cpg];
                            let asl = &mut acc[gi * cpg..(gi + 1) * cpg];
                            for (a, wv) in asl.iter_mut().zip(ws) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    };
    if ho * wo * cout >= PAR_THRESHOLD {
        out.data_mut()
            .par_chunks_mut(wo * cout)
            .enumerate()
            .for_each(|(yo, orow)| row_work(yo, orow));
    } else {
        for (yo, orow) in out.data_mut().chunks_mut(wo * cout).enumerate() {
            row_work(yo, orow);
        }
    }
    out
}

/// Gradient w.r.t. the convolution input.
pub fn conv2d_grad_input(
    dy: &Tensor,
    w: &Tensor,
    x_shape: &[usize],
    spec: ConvSpec,
) -> Tensor {
    let (h, wid, cin) = (x_shape[0], x_shape[1], x_shape[2]);
    let (kh, kw, cin_g, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (dy.shape()[0], dy.shape()[1]);
    let g = spec.groups;
    let cpg = cout / g;

    if kh == 1 && kw == 1 && g == 1 && spec.stride == 1 && spec.pad == 0 {
        let dy2 = dy.reshaped(&[ho * wo, cout]).unwrap();
        let w2 = w.reshaped(&[cin, cout]).unwrap();
        return dy2.matmul(&w2.transposed()).reshaped(&[h, wid, cin]).unwrap();
    }

    let mut dx = Tensor::zeros(&[h, wid, cin]);
    let dyd = dy.data();
    let wd = w.data();
    let row_work = |yi: usize, drow: &mut [f64]| {
        for xi in 0..wid {
            let acc = &mut drow[xi * cin..(xi + 1) * cin];
            for ky in 0..kh {
                let ynum = yi as isize + spec.pad as isize - ky as isize;
                if ynum < 0 || ynum % spec.stride as isize != 0 {
                    continue;
                }
                let yo = (ynum / spec.stride as isize) as usize;
                if yo >= ho {
                    continue;
                }
                for kx in 0..kw {
                    let xnum = xi as isize + spec.pad as isize - kx as isize;
                    if xnum < 0 || xnum % spec.stride as isize != 0 {
                        continue;
                    }
                    let xo = (xnum / spec.stride as isize) as usize;
                    if xo >= wo {
                        continue;
                    }
                    let dybase = (yo * wo + xo) * cout;
                    for gi in 0..g {
                        for ci_g in 0..cin_g {
                            let wbase = ((ky * kw + kx) * cin_g + ci_g) * cout + gi * cpg;
                            let mut s = 0.0;
                            for co_g in 0..cpg {
                                s += dyd[dybase + gi * cpg + co_g] * wd[wbase + co_g];
                            }
                            acc[gi * cin_g + ci_g] += s;
                        }
                    }
                }
            }
        }
    };
    if h * wid * cin >= PAR_THRESHOLD {
        dx.data_mut()
            .par_chunks_mut(wid * cin)
            .enumerate()
            .for_each(|(yi, drow)| row_work(yi, drow));
    } else {
        for (yi, drow) in dx.data_mut().chunks_mut(wid * cin).enumerate() {
            row_work(yi, drow);
        }
    }
    dx
}

/// Gradient w.r.t. the convolution weight.
pub fn conv2d_grad_weight(dy: &Tensor, x: &Tensor, w_shape: &[usize], spec: ConvSpec) -> Tensor {
    let (h, wid, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cin_g, cout) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let (ho, wo) = (dy.shape()[0], dy.shape()[1]);
    let g = spec.groups;
    let cpg = cout / g;

    if kh == 1 && kw == 1 && g == 1 && spec.stride == 1 && spec.pad == 0 {
        let x2 = x.reshaped(&[ho * wo, cin]).unwrap();
        let dy2 = dy.reshaped(&[ho * wo, cout]).unwrap();
        return x2
            .transposed()
            .matmul(&dy2)
            .reshaped(&[1, 1, cin, cout])
            .unwrap();
    }

    let mut dw = Tensor::zeros(w_shape);
    let xd = x.data();
    let dyd = dy.data();
    for yo in 0..ho {
        for xo in 0..wo {
            let dybase = (yo * wo + xo) * cout;
            for ky in 0..kh {
                let yi = (yo * spec.stride + ky) as isize - spec.pad as isize;
                if yi < 0 || yi >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let xi = (xo * spec.stride + kx) as isize - spec.pad as isize;
                    if xi < 0 || xi >= wid as isize {
                        continue;
                    }
                    let xbase = (yi as usize * wid + xi as usize) * cin;
                    for gi in 0..g {
                        for ci_g in 0..cin_g {
                            let xv = xd[xbase + gi * cin_g + ci_g];
                            if xv == 0.0 {
                                continue;
                            }
                            let wbase = ((ky * kw + kx) * cin_g + ci_g) * cout + gi * cpg;
                            for co_g in 0..cpg {
                                dw.data_mut()[wbase + co_g] += xv * dyd[dybase + gi * cpg + co_g];
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

/// Gradient w.r.t. the bias: per-channel sum of dy.
pub fn conv2d_grad_bias(dy: &Tensor) -> Tensor {
    let cout = *dy.shape().last().unwrap();
    let mut db = Tensor::zeros(&[cout]);
    for row in dy.data().chunks_exact(cout) {
        for (d, v) in db.data_mut().iter_mut().zip(row) {
            *d += v;
        }
    }
    db
}

/// Space-to-channel: (h, w, c) -> (h/r, w/r, c*r*r).
/// Value at (y, x, ci) lands at (y/r, x/r, ci + c*(r*(y%r) + x%r)).
pub fn pixel_unshuffle_t(x: &Tensor, r: usize) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    debug_assert!(h % r == 0 && w % r == 0);
    let (ho, wo, co) = (h / r, w / r, c * r * r);
    let mut out = Tensor::zeros(&[ho, wo, co]);
    let xd = x.data();
    let od = out.data_mut();
    for y in 0..h {
        let (yo, dy) = (y / r, y % r);
        for x_ in 0..w {
            let (xo, dx) = (x_ / r, x_ % r);
            let block = r * dy + dx;
            let src = (y * w + x_) * c;
            let dst = (yo * wo + xo) * co + c * block;
            od[dst..dst + c].copy_from_slice(&xd[src..src + c]);
        }
    }
    out
}

/// Channel-to-space inverse of `pixel_unshuffle_t`.
pub fn pixel_shuffle_t(x: &Tensor, r: usize) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    debug_assert!(c % (r * r) == 0);
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = Tensor::zeros(&[ho, wo, co]);
    let xd = x.data();
    let od = out.data_mut();
    for y in 0..ho {
        let (yi, dy) = (y / r, y % r);
        for x_ in 0..wo {
            let (xi, dx) = (x_ / r, x_ % r);
            let block = r * dy + dx;
            let src = (yi * w + xi) * c + co * block;
            let dst = (y * wo + x_) * co;
            od[dst..dst + co].copy_from_slice(&xd[src..src + co]);
        }
    }
    out
}

/// Group-transpose permutation of the last dimension: with g groups of
/// size m = c/g, input channel k moves to (k % g) * m + k / g.
pub fn channel_reorder_t(x: &Tensor, g: usize, inverse: bool) -> Tensor {
    let c = *x.shape().last().unwrap();
    debug_assert_eq!(c % g, 0);
    let m = c / g;
    let mut perm = vec![0usize; c];
    for k in 0..c {
        let dst = (k % g) * m + k / g;
        if inverse {
            perm[k] = dst; // gather: out[k] = in[dst]
        } else {
            perm[dst] = k; // scatter: out[dst] = in[k]
        }
    }
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for (orow, xrow) in od.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
        for j in 0..c {
            orow[j] = xrow[perm[j]];
        }
    }
    out
}

/// Per-position layer norm across the channel (last) dimension.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = Tensor::zeros(x.shape());
    let gd = gamma.data();
    let bd = beta.data();
    for (orow, xrow) in out
        .data_mut()
        .chunks_exact_mut(c)
        .zip(x.data().chunks_exact(c))
    {
        let mean = xrow.iter().sum::<f64>() / c as f64;
        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            orow[j] = (xrow[j] - mean) * inv * gd[j] + bd[j];
        }
    }
    out
}

/// Backward of `layer_norm`; returns (dx, dgamma, dbeta).
pub fn layer_norm_grad(
    dy: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let c = *x.shape().last().unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let gd = gamma.data();
    for ((dxrow, xrow), dyrow) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(x.data().chunks_exact(c))
        .zip(dy.data().chunks_exact(c))
    {
        let mean = xrow.iter().sum::<f64>() / c as f64;
        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..c {
            let xhat = (xrow[j] - mean) * inv;
            let dxhat = dyrow[j] * gd[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma.data_mut()[j] += dyrow[j] * xhat;
            dbeta.data_mut()[j] += dyrow[j];
        }
        let n = c as f64;
        for j in 0..c {
            let xhat = (xrow[j] - mean) * inv;
            let dxhat = dyrow[j] * gd[j];
            dxrow[j] = inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax of a (rows, cols) matrix.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.shape()[1];
    let mut out = Tensor::zeros(x.shape());
    for (orow, xrow) in out
        .data_mut()
        .chunks_exact_mut(cols)
        .zip(x.data().chunks_exact(cols))
    {
        let mx = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..cols {
            let e = (xrow[j] - mx).exp();
            orow[j] = e;
            z += e;
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub fn softmax_rows_grad(dy: &Tensor, y: &Tensor) -> Tensor {
    let cols = y.shape()[1];
    let mut dx = Tensor::zeros(y.shape());
    for ((dxrow, yrow), dyrow) in dx
        .data_mut()
        .chunks_exact_mut(cols)
        .zip(y.data().chunks_exact(cols))
        .zip(dy.data().chunks_exact(cols))
    {
        let dot: f64 = yrow.iter().zip(dyrow.iter()).map(|(a, b)| a * b).sum();
        for j in 0..cols {
            dxrow[j] = yrow[j] * (dyrow[j] - dot);
        }
    }
    dx
}

/// Row-wise L2 normalization of a (rows, cols) matrix.
pub fn normalize_rows(x: &Tensor, eps: f64) -> Tensor {
    let cols = x.shape()[1];
    let mut out = Tensor::zeros(x.shape());
    for (orow, xrow) in out
        .data_mut()
        .chunks_exact_mut(cols)
        .zip(x.data().chunks_exact(cols))
    {
        let s = (xrow.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        for j in 0..cols {
            orow[j] = xrow[j] / s;
        }
    }
    out
}

pub fn normalize_rows_grad(dy: &Tensor, x: &Tensor, eps: f64) -> Tensor {
    let cols = x.shape()[1];
    let mut dx = Tensor::zeros(x.shape());
    for ((dxrow, xrow), dyrow) in dx
        .data_mut()
        .chunks_exact_mut(cols)
        .zip(x.data().chunks_exact(cols))
        .zip(dy.data().chunks_exact(cols))
    {
        let s2 = xrow.iter().map(|v| v * v).sum::<f64>() + eps;
        let s = s2.sqrt();
        let dot: f64 = xrow.iter().zip(dyrow.iter()).map(|(a, b)| a * b).sum();
        for j in 0..cols {
            dxrow[j] = dyrow[j] / s - xrow[j] * dot / (s2 * s);
        }
    }
    dx
}
