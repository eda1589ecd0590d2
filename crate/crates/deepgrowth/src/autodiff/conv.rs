//! Dense 3D cross-correlation kernels, forward and backward.
//!
//! Hot loops run over the innermost (W) axis as slice operations so the
//! stride-1 case compiles to vectorized code.

/// Valid output range along one axis: indices `o` with
/// `0 <= o*stride + k_off - padding < n_in`, clipped to `0..n_out`.
fn out_range(n_in: usize, k_off: usize, stride: usize, padding: usize, n_out: usize) -> (usize, usize) {
    let lo = if padding > k_off {
        (padding - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi = if n_in + padding > k_off {
        ((n_in - 1 + padding - k_off) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn forward(
    input: &[f64],
    ishape: &[usize],
    kernel: &[f64],
    kshape: &[usize],
    bias: &[f64],
    stride: usize,
    padding: usize,
    oshape: &[usize],
) -> Vec<f64> {
    let (cin, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (cout, k) = (kshape[0], kshape[2]);
    let (od_n, oh_n, ow_n) = (oshape[1], oshape[2], oshape[3]);
    let osp = od_n * oh_n * ow_n;
    let isp = d * h * w;
    let mut out = vec![0.0; cout * osp];
    for co in 0..cout {
        let out_slab = &mut out[co * osp..(co + 1) * osp];
        out_slab.fill(bias[co]);
        for ci in 0..cin {
            let in_slab = &input[ci * isp..(ci + 1) * isp];
            for kd in 0..k {
                let (od_lo, od_hi) = out_range(d, kd, stride, padding, od_n);
                for kh in 0..k {
                    let (oh_lo, oh_hi) = out_range(h, kh, stride, padding, oh_n);
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = out_range(w, kw, stride, padding, ow_n);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let wv = kernel[(((co * cin + ci) * k + kd) * k + kh) * k + kw];
                        for od in od_lo..od_hi {
                            let id = od * stride + kd - padding;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + kh - padding;
                                let in_row = &in_slab[(id * h + ih) * w..(id * h + ih + 1) * w];
                                let out_row =
                                    &mut out_slab[(od * oh_n + oh) * ow_n..(od * oh_n + oh + 1) * ow_n];
                                if stride == 1 {
                                    let shift = ow_lo + kw - padding;
                                    let src = &in_row[shift..shift + (ow_hi - ow_lo)];
                                    let dst = &mut out_row[ow_lo..ow_hi];
                                    for (o, s) in dst.iter_mut().zip(src) {
                                        *o += wv * s;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        out_row[ow] += wv * in_row[ow * stride + kw - padding];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_kernel(
    input: &[f64],
    ishape: &[usize],
    up: &[f64],
    oshape: &[usize],
    kshape: &[usize],
    stride: usize,
    padding: usize,
    grad: &mut [f64],
) {
    let (cin, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (cout, k) = (kshape[0], kshape[2]);
    let (od_n, oh_n, ow_n) = (oshape[1], oshape[2], oshape[3]);
    let osp = od_n * oh_n * ow_n;
    let isp = d * h * w;
    for co in 0..cout {
        let up_slab = &up[co * osp..(co + 1) * osp];
        for ci in 0..cin {
            let in_slab = &input[ci * isp..(ci + 1) * isp];
            for kd in 0..k {
                let (od_lo, od_hi) = out_range(d, kd, stride, padding, od_n);
                for kh in 0..k {
                    let (oh_lo, oh_hi) = out_range(h, kh, stride, padding, oh_n);
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = out_range(w, kw, stride, padding, ow_n);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for od in od_lo..od_hi {
                            let id = od * stride + kd - padding;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + kh - padding;
                                let in_row = &in_slab[(id * h + ih) * w..(id * h + ih + 1) * w];
                                let up_row =
                                    &up_slab[(od * oh_n + oh) * ow_n..(od * oh_n + oh + 1) * ow_n];
                                if stride == 1 {
                                    let shift = ow_lo + kw - padding;
                                    let src = &in_row[shift..shift + (ow_hi - ow_lo)];
                                    for (u, s) in up_row[ow_lo..ow_hi].iter().zip(src) {
                                        acc += u * s;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        acc += up_row[ow] * in_row[ow * stride + kw - padding];
                                    }
                                }
                            }
                        }
                        grad[(((co * cin + ci) * k + kd) * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_input(
    kernel: &[f64],
    kshape: &[usize],
    up: &[f64],
    oshape: &[usize],
    ishape: &[usize],
    stride: usize,
    padding: usize,
    grad: &mut [f64],
) {
    let (cin, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (cout, k) = (kshape[0], kshape[2]);
    let (od_n, oh_n, ow_n) = (oshape[1], oshape[2], oshape[3]);
    let osp = od_n * oh_n * ow_n;
    let isp = d * h * w;
    for co in 0..cout {
        let up_slab = &up[co * osp..(co + 1) * osp];
        for ci in 0..cin {
            let g_slab = &mut grad[ci * isp..(ci + 1) * isp];
            for kd in 0..k {
                let (od_lo, od_hi) = out_range(d, kd, stride, padding, od_n);
                for kh in 0..k {
                    let (oh_lo, oh_hi) = out_range(h, kh, stride, padding, oh_n);
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = out_range(w, kw, stride, padding, ow_n);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let wv = kernel[(((co * cin + ci) * k + kd) * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for od in od_lo..od_hi {
                            let id = od * stride + kd - padding;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + kh - padding;
                                let g_row = &mut g_slab[(id * h + ih) * w..(id * h + ih + 1) * w];
                                let up_row =
                                    &up_slab[(od * oh_n + oh) * ow_n..(od * oh_n + oh + 1) * ow_n];
                                if stride == 1 {
                                    let shift = ow_lo + kw - padding;
                                    let dst = &mut g_row[shift..shift + (ow_hi - ow_lo)];
                                    for (gi, u) in dst.iter_mut().zip(&up_row[ow_lo..ow_hi]) {
                                        *gi += wv * u;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        g_row[ow * stride + kw - padding] += wv * up_row[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
