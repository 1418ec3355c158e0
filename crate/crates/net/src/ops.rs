//! Forward and backward kernels for the volumetric layers.
//!
//! All spatial triples are ordered `(depth, height, width)`. Convolutions are
//! direct: the innermost loop is a contiguous multiply-add over the width
//! axis whenever the width stride is 1, which is what the parallel planes
//! hand out. Backward passes are gather-formulated so planes never race.

use cdis_core::par;

use crate::tensor::Tensor;

pub type Triple = (usize, usize, usize);

/// Output spatial dims for a conv/pool window.
pub fn out_dims(input: Triple, kernel: Triple, stride: Triple, pad: Triple) -> Triple {
    let f = |n: usize, k: usize, s: usize, p: usize| {
        debug_assert!(n + 2 * p >= k, "kernel larger than padded input");
        (n + 2 * p - k) / s + 1
    };
    (
        f(input.0, kernel.0, stride.0, pad.0),
        f(input.1, kernel.1, stride.1, pad.1),
        f(input.2, kernel.2, stride.2, pad.2),
    )
}

/// Valid output range `[lo, hi)` along one axis for a fixed kernel offset:
/// positions `o` with `0 <= o*stride + offset < limit`.
#[inline]
fn valid_range(out_len: usize, stride: usize, offset: isize, limit: usize) -> (usize, usize) {
    let lo = if offset < 0 {
        (((-offset) as usize) + stride - 1) / stride
    } else {
        0
    };
    let max_num = limit as isize - 1 - offset;
    if max_num < 0 {
        return (0, 0);
    }
    let hi = (max_num as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// 3-D cross-correlation of `[ic,d,h,w]` with `[oc,ic,kd,kh,kw]`, no bias.
pub fn conv3d_forward(x: &Tensor, weight: &Tensor, stride: Triple, pad: Triple) -> Tensor {
    let (ic, d, h, w) = activation_dims(x);
    let wd = weight.dims();
    assert_eq!(wd.len(), 5, "conv weight must be 5-d");
    let (oc, wic, kd, kh, kw) = (wd[0], wd[1], wd[2], wd[3], wd[4]);
    assert_eq!(ic, wic, "conv in-channels mismatch");
    let (od, oh, ow) = out_dims((d, h, w), (kd, kh, kw), stride, pad);

    let mut out = Tensor::zeros(&[oc, od, oh, ow]);
    let xd = x.data();
    let wdat = weight.data();
    let (sd, sh, sw) = stride;
    let (pd, ph, pw) = pad;

    par::for_each_chunk_mut(out.data_mut(), oh * ow, |plane_idx, plane| {
        let oci = plane_idx / od;
        let odi = plane_idx % od;
        for ici in 0..ic {
            let x_chan = &xd[ici * d * h * w..(ici + 1) * d * h * w];
            let w_chan = ((oci * ic) + ici) * kd * kh * kw;
            for kdi in 0..kd {
                let id = (odi * sd + kdi) as isize - pd as isize;
                if id < 0 || id >= d as isize {
                    continue;
                }
                let x_plane = &x_chan[id as usize * h * w..(id as usize + 1) * h * w];
                for khi in 0..kh {
                    let w_row = &wdat[w_chan + (kdi * kh + khi) * kw..][..kw];
                    for ohi in 0..oh {
                        let ih = (ohi * sh + khi) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[ih as usize * w..ih as usize * w + w];
                        let out_row = &mut plane[ohi * ow..ohi * ow + ow];
                        for (kwi, &wv) in w_row.iter().enumerate() {
                            let off = kwi as isize - pw as isize;
                            let (lo, hi) = valid_range(ow, sw, off, w);
                            if lo >= hi {
                                continue;
                            }
                            if sw == 1 {
                                let src_start = (lo as isize + off) as usize;
                                let src = &x_row[src_start..src_start + (hi - lo)];
                                for (o, s) in out_row[lo..hi].iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            } else {
                                for owi in lo..hi {
                                    let iw = (owi * sw) as isize + off;
                                    out_row[owi] += wv * x_row[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of the conv output with respect to the weight.
pub fn conv3d_backward_weight(
    x: &Tensor,
    gout: &Tensor,
    weight_dims: &[usize],
    stride: Triple,
    pad: Triple,
) -> Tensor {
    let (ic, d, h, w) = activation_dims(x);
    let (oc, od, oh, ow) = activation_dims(gout);
    let (kd, kh, kw) = (weight_dims[2], weight_dims[3], weight_dims[4]);
    assert_eq!(weight_dims[0], oc);
    assert_eq!(weight_dims[1], ic);
    let (sd, sh, sw) = stride;
    let (pd, ph, pw) = pad;

    let mut gw = Tensor::zeros(weight_dims);
    let xd = x.data();
    let gd = gout.data();
    let per_oc = ic * kd * kh * kw;

    par::for_each_chunk_mut(gw.data_mut(), per_oc, |oci, gw_oc| {
        let g_chan = &gd[oci * od * oh * ow..(oci + 1) * od * oh * ow];
        for ici in 0..ic {
            let x_chan = &xd[ici * d * h * w..(ici + 1) * d * h * w];
            for kdi in 0..kd {
                for khi in 0..kh {
                    let gw_row = &mut gw_oc[((ici * kd + kdi) * kh + khi) * kw..][..kw];
                    for odi in 0..od {
                        let id = (odi * sd + kdi) as isize - pd as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        let x_plane = &x_chan[id as usize * h * w..(id as usize + 1) * h * w];
                        for ohi in 0..oh {
                            let ih = (ohi * sh + khi) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let x_row = &x_plane[ih as usize * w..ih as usize * w + w];
                            let g_row = &g_chan[(odi * oh + ohi) * ow..][..ow];
                            for (kwi, acc) in gw_row.iter_mut().enumerate() {
                                let off = kwi as isize - pw as isize;
                                let (lo, hi) = valid_range(ow, sw, off, w);
                                if lo >= hi {
                                    continue;
                                }
                                let mut dot = 0.0;
                                if sw == 1 {
                                    let src_start = (lo as isize + off) as usize;
                                    let src = &x_row[src_start..src_start + (hi - lo)];
                                    for (g, s) in g_row[lo..hi].iter().zip(src) {
                                        dot += g * s;
                                    }
                                } else {
                                    for owi in lo..hi {
                                        let iw = (owi * sw) as isize + off;
                                        dot += g_row[owi] * x_row[iw as usize];
                                    }
                                }
                                *acc += dot;
                            }
                        }
                    }
                }
            }
        }
    });
    gw
}

/// Gradient of the conv output with respect to the input.
pub fn conv3d_backward_input(
    weight: &Tensor,
    gout: &Tensor,
    input_dims: &[usize],
    stride: Triple,
    pad: Triple,
) -> Tensor {
    let (oc, od, oh, ow) = activation_dims(gout);
    let wd = weight.dims();
    let (ic, kd, kh, kw) = (wd[1], wd[2], wd[3], wd[4]);
    assert_eq!(wd[0], oc);
    let (d, h, w) = (input_dims[1], input_dims[2], input_dims[3]);
    assert_eq!(input_dims[0], ic);
    let (sd, sh, sw) = stride;
    let (pd, ph, pw) = pad;

    let mut gx = Tensor::zeros(input_dims);
    let gd = gout.data();
    let wdat = weight.data();

    par::for_each_chunk_mut(gx.data_mut(), h * w, |plane_idx, plane| {
        let ici = plane_idx / d;
        let id = plane_idx % d;
        for oci in 0..oc {
            let g_chan = &gd[oci * od * oh * ow..(oci + 1) * od * oh * ow];
            let w_chan = ((oci * ic) + ici) * kd * kh * kw;
            for kdi in 0..kd {
                let num = id as isize + pd as isize - kdi as isize;
                if num < 0 || num % sd as isize != 0 {
                    continue;
                }
                let odi = (num / sd as isize) as usize;
                if odi >= od {
                    continue;
                }
                let g_plane = &g_chan[odi * oh * ow..(odi + 1) * oh * ow];
                for khi in 0..kh {
                    let w_row = &wdat[w_chan + (kdi * kh + khi) * kw..][..kw];
                    for ohi in 0..oh {
                        let ih = (ohi * sh + khi) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let gx_row = &mut plane[ih as usize * w..ih as usize * w + w];
                        let g_row = &g_plane[ohi * ow..ohi * ow + ow];
                        for (kwi, &wv) in w_row.iter().enumerate() {
                            let off = kwi as isize - pw as isize;
                            let (lo, hi) = valid_range(ow, sw, off, w);
                            if lo >= hi {
                                continue;
                            }
                            if sw == 1 {
                                let dst_start = (lo as isize + off) as usize;
                                let dst = &mut gx_row[dst_start..dst_start + (hi - lo)];
                                for (o, g) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                    *o += wv * g;
                                }
                            } else {
                                for owi in lo..hi {
                                    let iw = (owi * sw) as isize + off;
                                    gx_row[iw as usize] += wv * g_row[owi];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Epsilon inside the normalization square root.
pub const NORM_EPS: f64 = 1e-5;

/// Per-sample normalization statistics: mean and inverse-std over the whole
/// activation tensor. Normalizing over `c*d*h*w` keeps the statistics
/// meaningful even when downsampling shrinks the spatial extent to a voxel
/// or two (per-channel statistics degenerate there).
pub fn norm_stats(x: &Tensor) -> (f64, f64) {
    let (c, d, h, w) = activation_dims(x);
    let plane = d * h * w;
    let xd = x.data();
    let partials: Vec<(f64, f64)> = par::map_indexed(c, |ci| {
        let chan = &xd[ci * plane..(ci + 1) * plane];
        let sum: f64 = chan.iter().sum();
        let sumsq: f64 = chan.iter().map(|v| v * v).sum();
        (sum, sumsq)
    });
    let n = (c * plane) as f64;
    let sum: f64 = partials.iter().map(|p| p.0).sum();
    let sumsq: f64 = partials.iter().map(|p| p.1).sum();
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

/// In-place affine normalization `y = gamma_c*(x-mean)*inv + beta_c`, with an
/// optional fused ReLU. After the fused ReLU, `y > 0` marks exactly the
/// positions the backward pass keeps.
pub fn norm_affine_inplace(
    x: &mut Tensor,
    stats: (f64, f64),
    gamma: &[f64],
    beta: &[f64],
    relu: bool,
) {
    let (c, d, h, w) = activation_dims(x);
    let plane = d * h * w;
    debug_assert_eq!(gamma.len(), c);
    let (mean, inv) = stats;
    par::for_each_chunk_mut(x.data_mut(), plane, |ci, chunk| {
        let (g, b) = (gamma[ci], beta[ci]);
        for v in chunk.iter_mut() {
            let y = g * (*v - mean) * inv + b;
            *v = if relu && y < 0.0 { 0.0 } else { y };
        }
    });
}

/// The positive-sign mask of a post-ReLU activation.
pub fn relu_mask(y: &Tensor) -> Vec<bool> {
    y.data().iter().map(|&v| v > 0.0).collect()
}

/// Masks a gradient in place (ReLU backward).
pub fn apply_relu_mask(g: &mut Tensor, mask: &[bool]) {
    debug_assert_eq!(g.len(), mask.len());
    par::for_each_chunk_mut(g.data_mut(), 1 << 14, |ci, chunk| {
        let base = ci * (1 << 14);
        for (k, v) in chunk.iter_mut().enumerate() {
            if !mask[base + k] {
                *v = 0.0;
            }
        }
    });
}

/// Backward of the affine normalization. `x` is the normalization input,
/// `gout` the gradient at its output; returns grad-input and accumulates the
/// per-channel gamma/beta gradients.
///
/// With `h = gamma_c * g` and `xhat = (x - mean) * inv`:
/// `gx = inv * (h - mean(h) - xhat * mean(h * xhat))` over all N elements.
pub fn norm_backward(
    x: &Tensor,
    stats: (f64, f64),
    gamma: &[f64],
    gout: &Tensor,
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) -> Tensor {
    let (c, d, h, w) = activation_dims(x);
    let plane = d * h * w;
    let (mean, inv) = stats;
    let xd = x.data();
    let gd = gout.data();

    // Per-channel sums: gbeta_c = sum(g), ggamma_c = sum(g * xhat).
    let sums: Vec<(f64, f64)> = par::map_indexed(c, |ci| {
        let xs = &xd[ci * plane..(ci + 1) * plane];
        let gs = &gd[ci * plane..(ci + 1) * plane];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for (xv, gv) in xs.iter().zip(gs) {
            sum_g += gv;
            sum_gx += gv * (xv - mean) * inv;
        }
        (sum_g, sum_gx)
    });

    let n = (c * plane) as f64;
    let mut mean_h = 0.0;
    let mut mean_hx = 0.0;
    for ci in 0..c {
        gbeta[ci] += sums[ci].0;
        ggamma[ci] += sums[ci].1;
        mean_h += gamma[ci] * sums[ci].0;
        mean_hx += gamma[ci] * sums[ci].1;
    }
    mean_h /= n;
    mean_hx /= n;

    let mut gx = Tensor::zeros(x.dims());
    par::for_each_chunk_mut(gx.data_mut(), plane, |ci, chunk| {
        let g = gamma[ci];
        let xs = &xd[ci * plane..(ci + 1) * plane];
        let gs = &gd[ci * plane..(ci + 1) * plane];
        for k in 0..plane {
            let xhat = (xs[k] - mean) * inv;
            chunk[k] = inv * (g * gs[k] - mean_h - xhat * mean_hx);
        }
    });
    gx
}

/// Max pooling; returns output and flat input argmax per output element.
pub fn maxpool3d_forward(x: &Tensor, kernel: Triple, stride: Triple, pad: Triple) -> (Tensor, Vec<u32>) {
    let (c, d, h, w) = activation_dims(x);
    let (od, oh, ow) = out_dims((d, h, w), kernel, stride, pad);
    let xd = x.data();
    let plane = od * oh * ow;

    let mut packed: Vec<(f64, u32)> = vec![(0.0, 0); c * plane];
    par::for_each_chunk_mut(&mut packed, plane, |ci, chunk| {
        let chan_base = ci * d * h * w;
        let x_chan = &xd[chan_base..chan_base + d * h * w];
        let mut i = 0;
        for odi in 0..od {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kdi in 0..kernel.0 {
                        let id = (odi * stride.0 + kdi) as isize - pad.0 as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for khi in 0..kernel.1 {
                            let ih = (ohi * stride.1 + khi) as isize - pad.1 as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kwi in 0..kernel.2 {
                                let iw = (owi * stride.2 + kwi) as isize - pad.2 as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let idx = (id as usize * h + ih as usize) * w + iw as usize;
                                let v = x_chan[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    chunk[i] = (best, (chan_base + best_idx) as u32);
                    i += 1;
                }
            }
        }
    });

    let mut out = Tensor::zeros(&[c, od, oh, ow]);
    let mut argmax = vec![0u32; c * plane];
    for (i, (v, a)) in packed.into_iter().enumerate() {
        out.data_mut()[i] = v;
        argmax[i] = a;
    }
    (out, argmax)
}

/// Scatter of the pooled gradient back to the argmax positions.
pub fn maxpool3d_backward(gout: &Tensor, argmax: &[u32], input_dims: &[usize]) -> Tensor {
    let (_, od, oh, ow) = activation_dims(gout);
    let out_plane = od * oh * ow;
    let in_plane: usize = input_dims[1..].iter().product();
    let gd = gout.data();

    let mut gx = Tensor::zeros(input_dims);
    par::for_each_chunk_mut(gx.data_mut(), in_plane, |ci, chunk| {
        let chan_base = ci * in_plane;
        for k in 0..out_plane {
            let o = ci * out_plane + k;
            chunk[argmax[o] as usize - chan_base] += gd[o];
        }
    });
    gx
}

/// Global average pooling over the spatial extent, one value per channel.
pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let (c, d, h, w) = activation_dims(x);
    let plane = d * h * w;
    let xd = x.data();
    par::map_indexed(c, |ci| {
        xd[ci * plane..(ci + 1) * plane].iter().sum::<f64>() / plane as f64
    })
}

pub fn global_avg_pool_backward(gfeat: &[f64], input_dims: &[usize]) -> Tensor {
    let plane: usize = input_dims[1..].iter().product();
    let mut gx = Tensor::zeros(input_dims);
    par::for_each_chunk_mut(gx.data_mut(), plane, |ci, chunk| {
        let g = gfeat[ci] / plane as f64;
        chunk.fill(g);
    });
    gx
}

fn activation_dims(t: &Tensor) -> (usize, usize, usize, usize) {
    let d = t.dims();
    assert_eq!(d.len(), 4, "activation must be 4-d");
    (d[0], d[1], d[2], d[3])
}
