//! Convolution and interpolation kernels.
//!
//! Loops are arranged so the innermost dimension walks contiguous memory
//! (output rows for stride 1), which is what the optimizer vectorizes.

/// 2-D cross-correlation. Returns `(data, out_h, out_w)`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    sx: &[usize],
    w: &[f64],
    sw: &[usize],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let (b, c, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
    let (oc, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wid + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * oc * oh * ow];
    for bi in 0..b {
        for oci in 0..oc {
            let out_plane = &mut out[(bi * oc + oci) * oh * ow..(bi * oc + oci + 1) * oh * ow];
            for ci in 0..c {
                let x_plane = &x[(bi * c + ci) * h * wid..(bi * c + ci + 1) * h * wid];
                let w_k = &w[(oci * c + ci) * kh * kw..(oci * c + ci + 1) * kh * kw];
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = w_k[khi * kw + kwi];
                        if wv == 0.0 {
                            continue;
                        }
                        let (oh_lo, oh_hi) = tap_range(khi, pad, stride, h, oh);
                        let (ow_lo, ow_hi) = tap_range(kwi, pad, stride, wid, ow);
                        if oh_lo > oh_hi || ow_lo > ow_hi {
                            continue;
                        }
                        for ohi in oh_lo..=oh_hi {
                            let ih = ohi * stride + khi - pad;
                            let orow = &mut out_plane[ohi * ow + ow_lo..=ohi * ow + ow_hi];
                            let xoff = ih * wid + ow_lo * stride + kwi - pad;
                            if stride == 1 {
                                let xrow = &x_plane[xoff..xoff + orow.len()];
                                for (o, &xv) in orow.iter_mut().zip(xrow.iter()) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (d, o) in orow.iter_mut().enumerate() {
                                    *o += wv * x_plane[xoff + d * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Output index range `[lo, hi]` for which `o·stride + k − pad` lands inside
/// `[0, extent)`.
fn tap_range(k: usize, pad: usize, stride: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    // o ≥ (pad − k) / stride (rounded up), o ≤ (extent − 1 + pad − k) / stride.
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let top = extent as i64 - 1 + pad as i64 - k as i64;
    if top < 0 {
        return (1, 0); // empty
    }
    let hi = ((top as usize) / stride).min(out_extent - 1);
    (lo, hi)
}

pub(crate) fn conv2d_backward_x(
    gout: &[f64],
    sx: &[usize],
    w: &[f64],
    sw: &[usize],
    stride: usize,
    pad: usize,
    gx: &mut [f64],
) {
    let (b, c, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
    let (oc, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wid + 2 * pad - kw) / stride + 1;
    for bi in 0..b {
        for oci in 0..oc {
            let g_plane = &gout[(bi * oc + oci) * oh * ow..(bi * oc + oci + 1) * oh * ow];
            for ci in 0..c {
                let gx_plane = &mut gx[(bi * c + ci) * h * wid..(bi * c + ci + 1) * h * wid];
                let w_k = &w[(oci * c + ci) * kh * kw..(oci * c + ci + 1) * kh * kw];
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = w_k[khi * kw + kwi];
                        if wv == 0.0 {
                            continue;
                        }
                        let (oh_lo, oh_hi) = tap_range(khi, pad, stride, h, oh);
                        let (ow_lo, ow_hi) = tap_range(kwi, pad, stride, wid, ow);
                        if oh_lo > oh_hi || ow_lo > ow_hi {
                            continue;
                        }
                        for ohi in oh_lo..=oh_hi {
                            let ih = ohi * stride + khi - pad;
                            let grow = &g_plane[ohi * ow + ow_lo..=ohi * ow + ow_hi];
                            let xoff = ih * wid + ow_lo * stride + kwi - pad;
                            if stride == 1 {
                                let xrow = &mut gx_plane[xoff..xoff + grow.len()];
                                for (gx_v, &gv) in xrow.iter_mut().zip(grow.iter()) {
                                    *gx_v += wv * gv;
                                }
                            } else {
                                for (d, &gv) in grow.iter().enumerate() {
                                    gx_plane[xoff + d * stride] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_w(
    gout: &[f64],
    x: &[f64],
    sx: &[usize],
    sw: &[usize],
    stride: usize,
    pad: usize,
    gw: &mut [f64],
) {
    let (b, c, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
    let (oc, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wid + 2 * pad - kw) / stride + 1;
    for bi in 0..b {
        for oci in 0..oc {
            let g_plane = &gout[(bi * oc + oci) * oh * ow..(bi * oc + oci + 1) * oh * ow];
            for ci in 0..c {
                let x_plane = &x[(bi * c + ci) * h * wid..(bi * c + ci + 1) * h * wid];
                let gw_k = &mut gw[(oci * c + ci) * kh * kw..(oci * c + ci + 1) * kh * kw];
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let (oh_lo, oh_hi) = tap_range(khi, pad, stride, h, oh);
                        let (ow_lo, ow_hi) = tap_range(kwi, pad, stride, wid, ow);
                        if oh_lo > oh_hi || ow_lo > ow_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for ohi in oh_lo..=oh_hi {
                            let ih = ohi * stride + khi - pad;
                            let grow = &g_plane[ohi * ow + ow_lo..=ohi * ow + ow_hi];
                            let xoff = ih * wid + ow_lo * stride + kwi - pad;
                            if stride == 1 {
                                let xrow = &x_plane[xoff..xoff + grow.len()];
                                for (&gv, &xv) in grow.iter().zip(xrow.iter()) {
                                    acc += gv * xv;
                                }
                            } else {
                                for (d, &gv) in grow.iter().enumerate() {
                                    acc += gv * x_plane[xoff + d * stride];
                                }
                            }
                        }
                        gw_k[khi * kw + kwi] += acc;
                    }
                }
            }
        }
    }
}

/// Depthwise causal 1-D convolution: `out[t] = Σ_k w[k]·x[t−k]`.
pub(crate) fn conv1d_causal_forward(x: &[f64], sx: &[usize], w: &[f64], k: usize) -> Vec<f64> {
    let (b, c, l) = (sx[0], sx[1], sx[2]);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let xrow = &x[(bi * c + ci) * l..(bi * c + ci + 1) * l];
            let orow = &mut out[(bi * c + ci) * l..(bi * c + ci + 1) * l];
            for (ki, &wv) in w[ci * k..(ci + 1) * k].iter().enumerate() {
                if wv == 0.0 || ki >= l {
                    continue;
                }
                for (o, &xv) in orow[ki..].iter_mut().zip(xrow[..l - ki].iter()) {
                    *o += wv * xv;
                }
            }
        }
    }
    out
}

pub(crate) fn conv1d_causal_backward_x(
    gout: &[f64],
    sx: &[usize],
    w: &[f64],
    k: usize,
    gx: &mut [f64],
) {
    let (b, c, l) = (sx[0], sx[1], sx[2]);
    for bi in 0..b {
        for ci in 0..c {
            let grow = &gout[(bi * c + ci) * l..(bi * c + ci + 1) * l];
            let gxrow = &mut gx[(bi * c + ci) * l..(bi * c + ci + 1) * l];
            for (ki, &wv) in w[ci * k..(ci + 1) * k].iter().enumerate() {
                if wv == 0.0 || ki >= l {
                    continue;
                }
                for (gxv, &gv) in gxrow[..l - ki].iter_mut().zip(grow[ki..].iter()) {
                    *gxv += wv * gv;
                }
            }
        }
    }
}

pub(crate) fn conv1d_causal_backward_w(
    gout: &[f64],
    x: &[f64],
    sx: &[usize],
    k: usize,
    gw: &mut [f64],
) {
    let (b, c, l) = (sx[0], sx[1], sx[2]);
    for bi in 0..b {
        for ci in 0..c {
            let xrow = &x[(bi * c + ci) * l..(bi * c + ci + 1) * l];
            let grow = &gout[(bi * c + ci) * l..(bi * c + ci + 1) * l];
            for ki in 0..k.min(l) {
                let mut acc = 0.0;
                for (&gv, &xv) in grow[ki..].iter().zip(xrow[..l - ki].iter()) {
                    acc += gv * xv;
                }
                gw[ci * k + ki] += acc;
            }
        }
    }
}

/// Per-axis source taps for ×2 bilinear upsampling (align-corners = false):
/// output index `o` samples continuous coordinate `o/2 − 0.25`, clamped.
fn up2_taps(extent: usize) -> Vec<(usize, usize, f64, f64)> {
    let mut taps = Vec::with_capacity(2 * extent);
    for o in 0..2 * extent {
        let src = o as f64 / 2.0 - 0.25;
        let floor = src.floor();
        let frac = src - floor;
        let i0 = (floor.max(0.0) as usize).min(extent - 1);
        let i1 = ((floor + 1.0).max(0.0) as usize).min(extent - 1);
        taps.push((i0, i1, 1.0 - frac, frac));
    }
    taps
}

pub(crate) fn up2_forward(x: &[f64], sx: &[usize]) -> Vec<f64> {
    let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let rows = up2_taps(h);
    let cols = up2_taps(w);
    let mut out = vec![0.0; b * c * oh * ow];
    for plane in 0..b * c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (oi, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            let x0 = &xp[r0 * w..(r0 + 1) * w];
            let x1 = &xp[r1 * w..(r1 + 1) * w];
            let orow = &mut op[oi * ow..(oi + 1) * ow];
            for (oj, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                orow[oj] = wr0 * (wc0 * x0[c0] + wc1 * x0[c1]) + wr1 * (wc0 * x1[c0] + wc1 * x1[c1]);
            }
        }
    }
    out
}

pub(crate) fn up2_backward(gout: &[f64], sx: &[usize], gx: &mut [f64]) {
    let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let rows = up2_taps(h);
    let cols = up2_taps(w);
    for plane in 0..b * c {
        let gp = &gout[plane * oh * ow..(plane + 1) * oh * ow];
        let gxp = &mut gx[plane * h * w..(plane + 1) * h * w];
        for (oi, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            let grow = &gp[oi * ow..(oi + 1) * ow];
            for (oj, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                let g = grow[oj];
                gxp[r0 * w + c0] += wr0 * wc0 * g;
                gxp[r0 * w + c1] += wr0 * wc1 * g;
                gxp[r1 * w + c0] += wr1 * wc0 * g;
                gxp[r1 * w + c1] += wr1 * wc1 * g;
            }
        }
    }
}
