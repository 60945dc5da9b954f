//! Convolution, interpolation and pooling kernels on NCHW slices.

use crate::counter;
use crate::error::{Result, WauError};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Shape;

pub(crate) fn check_conv(xs: Shape, ws: Shape, groups: usize) -> Result<()> {
    if ws.h != ws.w || ws.h.is_multiple_of(2) {
        return Err(WauError::contract("conv2d", format!("kernel {ws} must be square and odd")));
    }
    if groups == 0 || !xs.c.is_multiple_of(groups) || !ws.n.is_multiple_of(groups) {
        return Err(WauError::dim(
            "conv2d",
            format!("groups {groups} must divide in {} and out {} channels", xs.c, ws.n),
        ));
    }
    if ws.c * groups != xs.c {
        return Err(WauError::dim(
            "conv2d",
            format!("input {xs} has {} channels, kernel {ws} with {groups} groups expects {}", xs.c, ws.c * groups),
        ));
    }
    Ok(())
}

/// Valid output-column range `[lo, hi)` for tap offset `d = tap - pad` on a
/// row of width `w`: output `x` reads input `x + d`.
#[inline]
fn tap_range(d: isize, w: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (w as isize - d).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    bias: Option<&[T]>,
    groups: usize,
) -> Vec<T> {
    let (cout, cin_g, k) = (ws.n, ws.c, ws.h);
    let pad = (k / 2) as isize;
    let (h, wd) = (xs.h, xs.w);
    let plane = h * wd;
    counter::record_macs((xs.n * cout * plane * cin_g * k * k) as u64);
    if bias.is_some() {
        counter::record_overhead((xs.n * cout * plane) as u64);
    }
    let cout_g = cout / groups;
    let mut out = vec![T::zero(); xs.n * cout * plane];
    par::for_each_chunk(&mut out, plane, |pi, o| {
        let (n, co) = (pi / cout, pi % cout);
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        let g = co / cout_g;
        for cl in 0..cin_g {
            let ci = g * cin_g + cl;
            let src = &x[(n * xs.c + ci) * plane..(n * xs.c + ci + 1) * plane];
            let wk = &w[((co * cin_g) + cl) * k * k..((co * cin_g) + cl + 1) * k * k];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (ylo, yhi) = tap_range(dy, h);
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    let dx = kx as isize - pad;
                    let (xlo, xhi) = tap_range(dx, wd);
                    if xlo == xhi {
                        continue;
                    }
                    for y in ylo..yhi {
                        let iy = (y as isize + dy) as usize;
                        let orow = &mut o[y * wd + xlo..y * wd + xhi];
                        let irow = &src[iy * wd + (xlo as isize + dx) as usize..];
                        for (ov, &iv) in orow.iter_mut().zip(irow) {
                            *ov = *ov + wv * iv;
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_backward_input<T: Scalar>(dy: &[T], w: &[T], ws: Shape, xs: Shape, groups: usize) -> Vec<T> {
    let (cout, cin_g, k) = (ws.n, ws.c, ws.h);
    let pad = (k / 2) as isize;
    let (h, wd) = (xs.h, xs.w);
    let plane = h * wd;
    let cout_g = cout / groups;
    let mut dx = vec![T::zero(); xs.numel()];
    par::for_each_chunk(&mut dx, plane, |pi, d| {
        let (n, ci) = (pi / xs.c, pi % xs.c);
        let g = ci / cin_g;
        let cl = ci % cin_g;
        for co in g * cout_g..(g + 1) * cout_g {
            let gout = &dy[(n * cout + co) * plane..(n * cout + co + 1) * plane];
            let wk = &w[((co * cin_g) + cl) * k * k..((co * cin_g) + cl + 1) * k * k];
            for ky in 0..k {
                // input row iy receives from output row y = iy - (ky - pad)
                let oy = pad - ky as isize;
                let (ylo, yhi) = tap_range(oy, h);
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    let ox = pad - kx as isize;
                    let (xlo, xhi) = tap_range(ox, wd);
                    if xlo == xhi {
                        continue;
                    }
                    for iy in ylo..yhi {
                        let y = (iy as isize + oy) as usize;
                        let drow = &mut d[iy * wd + xlo..iy * wd + xhi];
                        let grow = &gout[y * wd + (xlo as isize + ox) as usize..];
                        for (dv, &gv) in drow.iter_mut().zip(grow) {
                            *dv = *dv + wv * gv;
                        }
                    }
                }
            }
        }
    });
    dx
}

pub fn conv2d_backward_weight<T: Scalar>(dy: &[T], x: &[T], xs: Shape, ws: Shape, groups: usize) -> Vec<T> {
    let (cout, cin_g, k) = (ws.n, ws.c, ws.h);
    let pad = (k / 2) as isize;
    let (h, wd) = (xs.h, xs.w);
    let plane = h * wd;
    let cout_g = cout / groups;
    let mut dw = vec![T::zero(); ws.numel()];
    par::for_each_chunk(&mut dw, cin_g * k * k, |co, d| {
        let g = co / cout_g;
        for n in 0..xs.n {
            let gout = &dy[(n * cout + co) * plane..(n * cout + co + 1) * plane];
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                let src = &x[(n * xs.c + ci) * plane..(n * xs.c + ci + 1) * plane];
                for ky in 0..k {
                    let dyo = ky as isize - pad;
                    let (ylo, yhi) = tap_range(dyo, h);
                    for kx in 0..k {
                        let dxo = kx as isize - pad;
                        let (xlo, xhi) = tap_range(dxo, wd);
                        if xlo == xhi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for y in ylo..yhi {
                            let iy = (y as isize + dyo) as usize;
                            let grow = &gout[y * wd + xlo..y * wd + xhi];
                            let irow = &src[iy * wd + (xlo as isize + dxo) as usize..];
                            for (&gv, &iv) in grow.iter().zip(irow) {
                                acc = acc + gv * iv;
                            }
                        }
                        let slot = &mut d[(cl * k + ky) * k + kx];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    });
    dw
}

pub fn bias_backward<T: Scalar>(dy: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (ch, slot) in db.iter_mut().enumerate() {
            let off = (b * c + ch) * plane;
            *slot = *slot + dy[off..off + plane].iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    db
}

/// One interpolation axis: for each destination index, the two source taps
/// and the weight of the upper tap.
pub(crate) fn bilinear_taps(src_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..src_len * factor)
        .map(|d| {
            let s = ((d as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(x: &[T], xs: Shape, factor: usize) -> Vec<T> {
    let (oh, ow) = (xs.h * factor, xs.w * factor);
    let ty = bilinear_taps(xs.h, factor);
    let tx = bilinear_taps(xs.w, factor);
    counter::record_overhead((xs.n * xs.c * oh * ow * 8) as u64);
    let mut out = vec![T::zero(); xs.n * xs.c * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, |pi, o| {
        let src = &x[pi * xs.plane()..(pi + 1) * xs.plane()];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
            for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                let top = src[y0 * xs.w + x0] * gx + src[y0 * xs.w + x1] * fx;
                let bot = src[y1 * xs.w + x0] * gx + src[y1 * xs.w + x1] * fx;
                o[y * ow + xo] = top * gy + bot * fy;
            }
        }
    });
    out
}

pub fn bilinear_backward<T: Scalar>(dy: &[T], xs: Shape, factor: usize) -> Vec<T> {
    let (oh, ow) = (xs.h * factor, xs.w * factor);
    let ty = bilinear_taps(xs.h, factor);
    let tx = bilinear_taps(xs.w, factor);
    let mut dx = vec![T::zero(); xs.numel()];
    par::for_each_chunk(&mut dx, xs.plane(), |pi, d| {
        let g = &dy[pi * oh * ow..(pi + 1) * oh * ow];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
            for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                let gv = g[y * ow + xo];
                let top = gv * gy;
                let bot = gv * fy;
                d[y0 * xs.w + x0] = d[y0 * xs.w + x0] + top * gx;
                d[y0 * xs.w + x1] = d[y0 * xs.w + x1] + top * fx;
                d[y1 * xs.w + x0] = d[y1 * xs.w + x0] + bot * gx;
                d[y1 * xs.w + x1] = d[y1 * xs.w + x1] + bot * fx;
            }
        }
    });
    dx
}

/// Low-side padding of the transposed conv: output `o` sits at full-conv
/// position `o + pad`.
#[inline]
pub(crate) fn transpose_pad(factor: usize) -> usize {
    factor / 2
}

pub fn conv_transpose_forward<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    bias: Option<&[T]>,
    factor: usize,
) -> Vec<T> {
    let (cin, cout, k) = (ws.n, ws.c, ws.h);
    let pad = transpose_pad(factor) as isize;
    let (oh, ow) = (xs.h * factor, xs.w * factor);
    counter::record_macs((xs.n * cin * xs.plane() * cout * k * k) as u64);
    let mut out = vec![T::zero(); xs.n * cout * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, |pi, o| {
        let (n, co) = (pi / cout, pi % cout);
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..cin {
            let src = &x[(n * cin + ci) * xs.plane()..(n * cin + ci + 1) * xs.plane()];
            let wk = &w[(ci * cout + co) * k * k..(ci * cout + co + 1) * k * k];
            for iy in 0..xs.h {
                for ky in 0..k {
                    let oy = (iy * factor + ky) as isize - pad;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    let orow = &mut o[oy as usize * ow..(oy as usize + 1) * ow];
                    for ix in 0..xs.w {
                        let v = src[iy * xs.w + ix];
                        for kx in 0..k {
                            let ox = (ix * factor + kx) as isize - pad;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            orow[ox as usize] = orow[ox as usize] + v * wk[ky * k + kx];
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv_transpose_backward_input<T: Scalar>(dy: &[T], w: &[T], ws: Shape, xs: Shape, factor: usize) -> Vec<T> {
    let (cin, cout, k) = (ws.n, ws.c, ws.h);
    let pad = transpose_pad(factor) as isize;
    let (oh, ow) = (xs.h * factor, xs.w * factor);
    let mut dx = vec![T::zero(); xs.numel()];
    par::for_each_chunk(&mut dx, xs.plane(), |pi, d| {
        let (n, ci) = (pi / cin, pi % cin);
        for co in 0..cout {
            let g = &dy[(n * cout + co) * oh * ow..(n * cout + co + 1) * oh * ow];
            let wk = &w[(ci * cout + co) * k * k..(ci * cout + co + 1) * k * k];
            for iy in 0..xs.h {
                for ix in 0..xs.w {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let oy = (iy * factor + ky) as isize - pad;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ox = (ix * factor + kx) as isize - pad;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            acc = acc + wk[ky * k + kx] * g[oy as usize * ow + ox as usize];
                        }
                    }
                    d[iy * xs.w + ix] = d[iy * xs.w + ix] + acc;
                }
            }
        }
    });
    dx
}

pub fn conv_transpose_backward_weight<T: Scalar>(dy: &[T], x: &[T], xs: Shape, ws: Shape, factor: usize) -> Vec<T> {
    let (cin, cout, k) = (ws.n, ws.c, ws.h);
    let pad = transpose_pad(factor) as isize;
    let (oh, ow) = (xs.h * factor, xs.w * factor);
    let mut dw = vec![T::zero(); ws.numel()];
    par::for_each_chunk(&mut dw, cout * k * k, |ci, d| {
        for n in 0..xs.n {
            let src = &x[(n * cin + ci) * xs.plane()..(n * cin + ci + 1) * xs.plane()];
            for co in 0..cout {
                let g = &dy[(n * cout + co) * oh * ow..(n * cout + co + 1) * oh * ow];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::zero();
                        for iy in 0..xs.h {
                            let oy = (iy * factor + ky) as isize - pad;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for ix in 0..xs.w {
                                let ox = (ix * factor + kx) as isize - pad;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                acc = acc + src[iy * xs.w + ix] * g[oy as usize * ow + ox as usize];
                            }
                        }
                        let slot = &mut d[(co * k + ky) * k + kx];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    });
    dw
}

/// Returns pooled values and, per output, the flat source index of its max.
pub fn max_pool2_forward<T: Scalar>(x: &[T], xs: Shape) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (xs.h / 2, xs.w / 2);
    let mut out = Vec::with_capacity(xs.n * xs.c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..xs.n * xs.c {
        let base = p * xs.plane();
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * xs.w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * xs.w + 2 * xo + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
