//! Slice-level numeric kernels behind the graph ops.
//!
//! Every reduction runs in a fixed loop order so results are bit-reproducible.

use super::ConvSpec;

/// For each kernel tap along one axis: the half-open range of output
/// positions whose input sample lands inside the volume, and the input
/// index of the first of them.
#[derive(Clone, Copy, Debug)]
struct TapRange {
    lo: usize,
    hi: usize,
    first_in: usize,
}

fn tap_ranges(input: usize, output: usize, k: usize, stride: usize, dil: usize, pad: usize) -> Vec<TapRange> {
    (0..k)
        .map(|t| {
            let offset = (t * dil) as isize - pad as isize;
            // smallest o with o*stride + offset >= 0
            let lo = if offset >= 0 {
                0
            } else {
                ((-offset) as usize).div_ceil(stride)
            };
            // largest o with o*stride + offset <= input - 1
            let max_in = input as isize - 1 - offset;
            let hi = if max_in < 0 {
                0
            } else {
                (max_in as usize / stride + 1).min(output)
            };
            let lo = lo.min(hi);
            let first_in = (lo as isize * stride as isize + offset).max(0) as usize;
            TapRange { lo, hi, first_in }
        })
        .collect()
}

/// Maps an output index to the input index for one tap, if in range.
#[inline]
fn in_index(o: usize, t: usize, stride: usize, dil: usize, pad: usize, input: usize) -> Option<usize> {
    let i = (o * stride + t * dil) as isize - pad as isize;
    (i >= 0 && (i as usize) < input).then_some(i as usize)
}

pub(super) struct ConvGeometry {
    pub n: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

pub(super) fn conv3d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    spec: &ConvSpec,
    geo: &ConvGeometry,
) -> Vec<f64> {
    let [id, ih, iw] = geo.input;
    let [od, oh, ow] = geo.output;
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let [kd, kh, kw] = spec.kernel;
    let wr = tap_ranges(iw, ow, kw, spec.stride[2], spec.dilation[2], spec.padding[2]);
    let sw = spec.stride[2];
    let in_plane = id * ih * iw;
    let out_plane = od * oh * ow;
    let mut out = vec![0.0; geo.n * cout * out_plane];

    for n in 0..geo.n {
        for oc in 0..cout {
            let ic0 = (oc / cout_g) * cin_g;
            let b = bias.map_or(0.0, |b| b[oc]);
            let plane = &mut out[(n * cout + oc) * out_plane..][..out_plane];
            plane.fill(b);
            for z in 0..od {
                for y in 0..oh {
                    let orow = &mut plane[(z * oh + y) * ow..][..ow];
                    for icl in 0..cin_g {
                        let xin = &x[(n * cin + ic0 + icl) * in_plane..][..in_plane];
                        let wbase = (oc * cin_g + icl) * kd * kh * kw;
                        for td in 0..kd {
                            let Some(zi) = in_index(z, td, spec.stride[0], spec.dilation[0], spec.padding[0], id) else {
                                continue;
                            };
                            for th in 0..kh {
                                let Some(yi) = in_index(y, th, spec.stride[1], spec.dilation[1], spec.padding[1], ih) else {
                                    continue;
                                };
                                let irow = &xin[(zi * ih + yi) * iw..][..iw];
                                let wrow = &w[wbase + (td * kh + th) * kw..][..kw];
                                for (tw, r) in wr.iter().enumerate() {
                                    let len = r.hi - r.lo;
                                    if len == 0 {
                                        continue;
                                    }
                                    let wv = wrow[tw];
                                    let dst = &mut orow[r.lo..r.hi];
                                    if sw == 1 {
                                        let src = &irow[r.first_in..r.first_in + len];
                                        for (o, i) in dst.iter_mut().zip(src) {
                                            *o += wv * i;
                                        }
                                    } else {
                                        for (j, o) in dst.iter_mut().enumerate() {
                                            *o += wv * irow[r.first_in + j * sw];
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
    out
}

/// Returns (grad_input, grad_weight, grad_bias); each only when requested.
#[allow(clippy::too_many_arguments)]
pub(super) fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    spec: &ConvSpec,
    geo: &ConvGeometry,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let [id, ih, iw] = geo.input;
    let [od, oh, ow] = geo.output;
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let [kd, kh, kw] = spec.kernel;
    let wr = tap_ranges(iw, ow, kw, spec.stride[2], spec.dilation[2], spec.padding[2]);
    let sw = spec.stride[2];
    let in_plane = id * ih * iw;
    let out_plane = od * oh * ow;

    let mut gx = want_input.then(|| vec![0.0; x.len()]);
    let mut gw = want_weight.then(|| vec![0.0; w.len()]);
    let gb = want_bias.then(|| {
        let mut gb = vec![0.0; cout];
        for n in 0..geo.n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += gout[(n * cout + oc) * out_plane..][..out_plane].iter().sum::<f64>();
            }
        }
        gb
    });
    if !want_input && !want_weight {
        return (gx, gw, gb);
    }

    for n in 0..geo.n {
        for oc in 0..cout {
            let ic0 = (oc / cout_g) * cin_g;
            let gplane = &gout[(n * cout + oc) * out_plane..][..out_plane];
            for z in 0..od {
                for y in 0..oh {
                    let grow = &gplane[(z * oh + y) * ow..][..ow];
                    for icl in 0..cin_g {
                        let plane_off = (n * cin + ic0 + icl) * in_plane;
                        let wbase = (oc * cin_g + icl) * kd * kh * kw;
                        for td in 0..kd {
                            let Some(zi) = in_index(z, td, spec.stride[0], spec.dilation[0], spec.padding[0], id) else {
                                continue;
                            };
                            for th in 0..kh {
                                let Some(yi) = in_index(y, th, spec.stride[1], spec.dilation[1], spec.padding[1], ih) else {
                                    continue;
                                };
                                let row_off = plane_off + (zi * ih + yi) * iw;
                                let wtap = wbase + (td * kh + th) * kw;
                                for (tw, r) in wr.iter().enumerate() {
                                    let len = r.hi - r.lo;
                                    if len == 0 {
                                        continue;
                                    }
                                    let g = &grow[r.lo..r.hi];
                                    if let Some(gw) = gw.as_mut() {
                                        let irow = &x[row_off..row_off + iw];
                                        let mut acc = 0.0;
                                        if sw == 1 {
                                            for (a, b) in g.iter().zip(&irow[r.first_in..r.first_in + len]) {
                                                acc += a * b;
                                            }
                                        } else {
                                            for (j, a) in g.iter().enumerate() {
                                                acc += a * irow[r.first_in + j * sw];
                                            }
                                        }
                                        gw[wtap + tw] += acc;
                                    }
                                    if let Some(gx) = gx.as_mut() {
                                        let wv = w[wtap + tw];
                                        let dst = &mut gx[row_off..row_off + iw];
                                        if sw == 1 {
                                            for (d, a) in dst[r.first_in..r.first_in + len].iter_mut().zip(g) {
                                                *d += wv * a;
                                            }
                                        } else {
                                            for (j, a) in g.iter().enumerate() {
                                                dst[r.first_in + j * sw] += wv * a;
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
    }
    (gx, gw, gb)
}

/// Linear interpolation taps along one axis using half-pixel centres:
/// source coordinate `(o + 0.5) / factor - 0.5`, clamped to the input.
#[derive(Clone, Copy, Debug)]
pub(super) struct LerpTap {
    pub i0: usize,
    pub i1: usize,
    pub w1: f64,
}

pub(super) fn lerp_taps(input: usize, factor: usize) -> Vec<LerpTap> {
    let f = factor as f64;
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            LerpTap { i0, i1, w1: src - i0 as f64 }
        })
        .collect()
}

/// `a + t (b - a)`: returns `a` exactly when `a == b`.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

pub(super) fn upsample_forward(x: &[f64], planes: usize, input: [usize; 3], factor: [usize; 3]) -> Vec<f64> {
    let [id, ih, iw] = input;
    let (td, th, tw) = (lerp_taps(id, factor[0]), lerp_taps(ih, factor[1]), lerp_taps(iw, factor[2]));
    let (od, oh, ow) = (td.len(), th.len(), tw.len());
    let mut out = vec![0.0; planes * od * oh * ow];
    for p in 0..planes {
        let src = &x[p * id * ih * iw..][..id * ih * iw];
        let dst = &mut out[p * od * oh * ow..][..od * oh * ow];
        for (z, a) in td.iter().enumerate() {
            for (y, b) in th.iter().enumerate() {
                let r00 = &src[(a.i0 * ih + b.i0) * iw..][..iw];
                let r01 = &src[(a.i0 * ih + b.i1) * iw..][..iw];
                let r10 = &src[(a.i1 * ih + b.i0) * iw..][..iw];
                let r11 = &src[(a.i1 * ih + b.i1) * iw..][..iw];
                let row = &mut dst[(z * oh + y) * ow..][..ow];
                for (o, c) in row.iter_mut().zip(&tw) {
                    let lo = lerp(lerp(r00[c.i0], r00[c.i1], c.w1), lerp(r01[c.i0], r01[c.i1], c.w1), b.w1);
                    let hi = lerp(lerp(r10[c.i0], r10[c.i1], c.w1), lerp(r11[c.i0], r11[c.i1], c.w1), b.w1);
                    *o = lerp(lo, hi, a.w1);
                }
            }
        }
    }
    out
}

pub(super) fn upsample_backward(g: &[f64], planes: usize, input: [usize; 3], factor: [usize; 3]) -> Vec<f64> {
    let [id, ih, iw] = input;
    let (td, th, tw) = (lerp_taps(id, factor[0]), lerp_taps(ih, factor[1]), lerp_taps(iw, factor[2]));
    let (od, oh, ow) = (td.len(), th.len(), tw.len());
    let mut gx = vec![0.0; planes * id * ih * iw];
    for p in 0..planes {
        let src = &g[p * od * oh * ow..][..od * oh * ow];
        let dst = &mut gx[p * id * ih * iw..][..id * ih * iw];
        for (z, a) in td.iter().enumerate() {
            for (y, b) in th.iter().enumerate() {
                let row = &src[(z * oh + y) * ow..][..ow];
                let corners = [
                    ((a.i0 * ih + b.i0) * iw, (1.0 - a.w1) * (1.0 - b.w1)),
                    ((a.i0 * ih + b.i1) * iw, (1.0 - a.w1) * b.w1),
                    ((a.i1 * ih + b.i0) * iw, a.w1 * (1.0 - b.w1)),
                    ((a.i1 * ih + b.i1) * iw, a.w1 * b.w1),
                ];
                for (off, wab) in corners {
                    for (gv, c) in row.iter().zip(&tw) {
                        dst[off + c.i0] += wab * (1.0 - c.w1) * gv;
                        dst[off + c.i1] += wab * c.w1 * gv;
                    }
                }
            }
        }
    }
    gx
}

/// Softmax over axis 1 of an `[N, C, S]` layout.
pub(super) fn softmax_channels(x: &[f64], n: usize, c: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut max = vec![0.0; s];
    let mut sum = vec![0.0; s];
    for b in 0..n {
        let xb = &x[b * c * s..][..c * s];
        let ob = &mut out[b * c * s..][..c * s];
        max.copy_from_slice(&xb[..s]);
        for ch in 1..c {
            for (m, v) in max.iter_mut().zip(&xb[ch * s..][..s]) {
                if *v > *m {
                    *m = *v;
                }
            }
        }
        sum.fill(0.0);
        for ch in 0..c {
            for ((o, v), (m, acc)) in ob[ch * s..][..s]
                .iter_mut()
                .zip(&xb[ch * s..][..s])
                .zip(max.iter().zip(sum.iter_mut()))
            {
                *o = (v - m).exp();
                *acc += *o;
            }
        }
        for ch in 0..c {
            for (o, acc) in ob[ch * s..][..s].iter_mut().zip(&sum) {
                *o /= acc;
            }
        }
    }
    out
}

pub(super) fn softmax_channels_backward(y: &[f64], g: &[f64], n: usize, c: usize, s: usize) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    let mut dot = vec![0.0; s];
    for b in 0..n {
        let off = b * c * s;
        dot.fill(0.0);
        for ch in 0..c {
            for ((d, yv), gv) in dot.iter_mut().zip(&y[off + ch * s..][..s]).zip(&g[off + ch * s..][..s]) {
                *d += yv * gv;
            }
        }
        for ch in 0..c {
            let base = off + ch * s;
            for i in 0..s {
                gx[base + i] = y[base + i] * (g[base + i] - dot[i]);
            }
        }
    }
    gx
}
