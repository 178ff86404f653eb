//! Raw forward/backward kernels shared by the graph ops and the
//! inference-only paths. All loops run in a fixed order so repeated
//! evaluation is bitwise deterministic.

use crate::error::{IsimError, Result};
use crate::numcore::Tensor;

pub fn conv_out_extent(
    in_extent: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Result<usize> {
    let span = dil * (k - 1) + 1;
    let padded = in_extent + 2 * pad;
    if padded < span {
        return Err(IsimError::shape(
            "conv2d",
            format!(
                "input extent {in_extent} with padding {pad} smaller than dilated kernel span {span}"
            ),
        ));
    }
    Ok((padded - span) / stride + 1)
}

/// Output index range [lo, hi) for which `y*stride + tap*dil - pad` lands
/// inside `[0, in_extent)`.
fn tap_range(
    stride: usize,
    pad: usize,
    tap_off: usize,
    in_extent: usize,
    out_extent: usize,
) -> (usize, usize) {
    let s = stride as i64;
    let off = tap_off as i64 - pad as i64;
    let lo = if off < 0 { (-off + s - 1) / s } else { 0 };
    let hi_num = in_extent as i64 - off;
    let hi = if hi_num <= 0 { 0 } else { (hi_num + s - 1) / s };
    let lo = lo.max(0) as usize;
    let hi = (hi.max(0) as usize).min(out_extent);
    (lo, hi.max(lo))
}

pub fn conv2d_fwd(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Result<Tensor> {
    let (n, ci, h, wid) = x.dims4("conv2d")?;
    let (co, ciw, k, k2) = w.dims4("conv2d")?;
    if k != k2 {
        return Err(IsimError::shape("conv2d", "kernel must be square".to_string()));
    }
    if ciw != ci {
        return Err(IsimError::shape(
            "conv2d",
            format!("input channels {ci} != kernel input channels {ciw}"),
        ));
    }
    if b.shape() != [co] {
        return Err(IsimError::shape(
            "conv2d",
            format!("bias shape {:?} != [{co}]", b.shape()),
        ));
    }
    if stride == 0 || dil == 0 {
        return Err(IsimError::Config("conv2d stride/dilation must be >= 1".into()));
    }
    let ho = conv_out_extent(h, k, stride, pad, dil)?;
    let wo = conv_out_extent(wid, k, stride, pad, dil)?;

    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![0.0f64; n * co * ho * wo];

    for ni in 0..n {
        for o in 0..co {
            let obase = (ni * co + o) * ho * wo;
            out[obase..obase + ho * wo].fill(bd[o]);
            for i in 0..ci {
                let xbase = (ni * ci + i) * h * wid;
                let wbase = (o * ci + i) * k * k;
                for ky in 0..k {
                    let (ylo, yhi) = tap_range(stride, pad, ky * dil, h, ho);
                    for kx in 0..k {
                        let wv = wd[wbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (xlo, xhi) = tap_range(stride, pad, kx * dil, wid, wo);
                        for y in ylo..yhi {
                            let iy = (y * stride + ky * dil) as i64 - pad as i64;
                            let xrow = xbase + iy as usize * wid;
                            let orow = obase + y * wo;
                            let xoff = kx as i64 * dil as i64 - pad as i64;
                            if stride == 1 {
                                let src = (xrow as i64 + xlo as i64 + xoff) as usize;
                                for (oslot, xslot) in (xlo..xhi).zip(src..) {
                                    out[orow + oslot] += wv * xd[xslot];
                                }
                            } else {
                                for xo in xlo..xhi {
                                    let ix = (xo * stride) as i64 + xoff;
                                    out[orow + xo] += wv * xd[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out)
}

pub fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    gy: &[f64],
    stride: usize,
    pad: usize,
    dil: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (n, ci, h, wid) = x.dims4("conv2d_bwd")?;
    let (co, _, k, _) = w.dims4("conv2d_bwd")?;
    let ho = conv_out_extent(h, k, stride, pad, dil)?;
    let wo = conv_out_extent(wid, k, stride, pad, dil)?;
    debug_assert_eq!(gy.len(), n * co * ho * wo);

    let xd = x.data();
    let wd = w.data();
    let mut gx = vec![0.0f64; xd.len()];
    let mut gw = vec![0.0f64; wd.len()];
    let mut gb = vec![0.0f64; co];

    for ni in 0..n {
        for o in 0..co {
            let obase = (ni * co + o) * ho * wo;
            let mut bsum = 0.0;
            for v in &gy[obase..obase + ho * wo] {
                bsum += v;
            }
            gb[o] += bsum;
            for i in 0..ci {
                let xbase = (ni * ci + i) * h * wid;
                let wbase = (o * ci + i) * k * k;
                for ky in 0..k {
                    let (ylo, yhi) = tap_range(stride, pad, ky * dil, h, ho);
                    for kx in 0..k {
                        let wv = wd[wbase + ky * k + kx];
                        let (xlo, xhi) = tap_range(stride, pad, kx * dil, wid, wo);
                        let mut wacc = 0.0;
                        for y in ylo..yhi {
                            let iy = (y * stride + ky * dil) as i64 - pad as i64;
                            let xrow = xbase + iy as usize * wid;
                            let orow = obase + y * wo;
                            let xoff = kx as i64 * dil as i64 - pad as i64;
                            for xo in xlo..xhi {
                                let ix = ((xo * stride) as i64 + xoff) as usize;
                                let g = gy[orow + xo];
                                wacc += g * xd[xrow + ix];
                                gx[xrow + ix] += g * wv;
                            }
                        }
                        gw[wbase + ky * k + kx] += wacc;
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Transposed convolution, the linear adjoint of `conv2d` with padding 0
/// and dilation 1: kernel layout is shared with the conv it adjoins
/// (O x I x K x K), input carries O channels, output I channels.
pub fn conv_transpose2d_fwd(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, co, h, wid) = x.dims4("conv_transpose2d")?;
    let (cow, ci, k, _) = w.dims4("conv_transpose2d")?;
    if cow != co {
        return Err(IsimError::shape(
            "conv_transpose2d",
            format!("input channels {co} != kernel output channels {cow}"),
        ));
    }
    if stride == 0 {
        return Err(IsimError::Config("conv_transpose2d stride must be >= 1".into()));
    }
    let ho = (h - 1) * stride + k;
    let wo = (wid - 1) * stride + k;

    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0f64; n * ci * ho * wo];

    for ni in 0..n {
        for o in 0..co {
            let xbase = (ni * co + o) * h * wid;
            for i in 0..ci {
                let obase = (ni * ci + i) * ho * wo;
                let wbase = (o * ci + i) * k * k;
                for y in 0..h {
                    for xx in 0..wid {
                        let v = xd[xbase + y * wid + xx];
                        if v == 0.0 {
                            continue;
                        }
                        for ky in 0..k {
                            let orow = obase + (y * stride + ky) * wo + xx * stride;
                            for kx in 0..k {
                                out[orow + kx] += v * wd[wbase + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, ci, ho, wo], out)
}

pub fn conv_transpose2d_bwd(
    x: &Tensor,
    w: &Tensor,
    gy: &[f64],
    stride: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, co, h, wid) = x.dims4("conv_transpose2d_bwd")?;
    let (_, ci, k, _) = w.dims4("conv_transpose2d_bwd")?;
    let ho = (h - 1) * stride + k;
    let wo = (wid - 1) * stride + k;
    debug_assert_eq!(gy.len(), n * ci * ho * wo);

    let xd = x.data();
    let wd = w.data();
    let mut gx = vec![0.0f64; xd.len()];
    let mut gw = vec![0.0f64; wd.len()];

    for ni in 0..n {
        for o in 0..co {
            let xbase = (ni * co + o) * h * wid;
            for i in 0..ci {
                let obase = (ni * ci + i) * ho * wo;
                let wbase = (o * ci + i) * k * k;
                for y in 0..h {
                    for xx in 0..wid {
                        let xv = xd[xbase + y * wid + xx];
                        let mut acc = 0.0;
                        for ky in 0..k {
                            let orow = obase + (y * stride + ky) * wo + xx * stride;
                            for kx in 0..k {
                                let g = gy[orow + kx];
                                acc += g * wd[wbase + ky * k + kx];
                                gw[wbase + ky * k + kx] += g * xv;
                            }
                        }
                        gx[xbase + y * wid + xx] += acc;
                    }
                }
            }
        }
    }
    Ok((gx, gw))
}

/// Source coordinate and blend weights under the align-corners convention.
fn bilinear_taps(dst: usize, src_extent: usize, dst_extent: usize) -> (usize, usize, f64) {
    if dst_extent <= 1 || src_extent <= 1 {
        return (0, 0, 0.0);
    }
    let scale = (src_extent - 1) as f64 / (dst_extent - 1) as f64;
    let pos = dst as f64 * scale;
    let lo = (pos.floor() as usize).min(src_extent - 1);
    let hi = (lo + 1).min(src_extent - 1);
    (lo, hi, pos - lo as f64)
}

pub fn upsample_bilinear_fwd(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("upsample_bilinear")?;
    if oh == 0 || ow == 0 {
        return Err(IsimError::Config("upsample target extents must be >= 1".into()));
    }
    let xd = x.data();
    let mut out = vec![0.0f64; n * c * oh * ow];
    for nc in 0..n * c {
        let xbase = nc * h * w;
        let obase = nc * oh * ow;
        for y in 0..oh {
            let (y0, y1, wy) = bilinear_taps(y, h, oh);
            for xx in 0..ow {
                let (x0, x1, wx) = bilinear_taps(xx, w, ow);
                let v00 = xd[xbase + y0 * w + x0];
                let v01 = xd[xbase + y0 * w + x1];
                let v10 = xd[xbase + y1 * w + x0];
                let v11 = xd[xbase + y1 * w + x1];
                let top = v00 + wx * (v01 - v00);
                let bot = v10 + wx * (v11 - v10);
                out[obase + y * ow + xx] = top + wy * (bot - top);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample_bilinear_bwd(x: &Tensor, gy: &[f64], oh: usize, ow: usize) -> Result<Vec<f64>> {
    let (n, c, h, w) = x.dims4("upsample_bilinear_bwd")?;
    let mut gx = vec![0.0f64; x.numel()];
    for nc in 0..n * c {
        let xbase = nc * h * w;
        let obase = nc * oh * ow;
        for y in 0..oh {
            let (y0, y1, wy) = bilinear_taps(y, h, oh);
            for xx in 0..ow {
                let (x0, x1, wx) = bilinear_taps(xx, w, ow);
                let g = gy[obase + y * ow + xx];
                gx[xbase + y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                gx[xbase + y0 * w + x1] += g * (1.0 - wy) * wx;
                gx[xbase + y1 * w + x0] += g * wy * (1.0 - wx);
                gx[xbase + y1 * w + x1] += g * wy * wx;
            }
        }
    }
    Ok(gx)
}

pub fn global_average_pool_fwd(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("global_average_pool")?;
    let xd = x.data();
    let inv = 1.0 / (h * w) as f64;
    let mut out = vec![0.0f64; n * c];
    for nc in 0..n * c {
        let mut s = 0.0;
        for v in &xd[nc * h * w..(nc + 1) * h * w] {
            s += v;
        }
        out[nc] = s * inv;
    }
    Tensor::new(vec![n, c], out)
}

pub fn global_average_pool_bwd(x: &Tensor, gy: &[f64]) -> Result<Vec<f64>> {
    let (n, c, h, w) = x.dims4("global_average_pool_bwd")?;
    let inv = 1.0 / (h * w) as f64;
    let mut gx = vec![0.0f64; x.numel()];
    for nc in 0..n * c {
        let g = gy[nc] * inv;
        for v in &mut gx[nc * h * w..(nc + 1) * h * w] {
            *v = g;
        }
    }
    Ok(gx)
}

pub fn relu_fwd(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn relu_bwd(x: &Tensor, gy: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(gy)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), overflow-safe.
pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub fn sigmoid_fwd(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| sigmoid(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid_bwd(y: &Tensor, gy: &[f64]) -> Vec<f64> {
    y.data()
        .iter()
        .zip(gy)
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect()
}

/// (batch-ish leading extent, class extent, trailing spatial extent) for the
/// channelwise softmax family; axis 1 is the class axis.
fn class_axis_split(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(IsimError::shape(
            op,
            format!("expected rank 2 or 4 with class axis 1, got {shape:?}"),
        )),
    }
}

pub fn log_softmax_fwd(x: &Tensor) -> Result<Tensor> {
    let (n, c, inner) = class_axis_split(x.shape(), "log_softmax")?;
    let xd = x.data();
    let mut out = vec![0.0f64; xd.len()];
    for ni in 0..n {
        for s in 0..inner {
            let idx = |cc: usize| (ni * c + cc) * inner + s;
            let mut m = f64::NEG_INFINITY;
            for cc in 0..c {
                m = m.max(xd[idx(cc)]);
            }
            let mut lse = 0.0;
            for cc in 0..c {
                lse += (xd[idx(cc)] - m).exp();
            }
            let lse = m + lse.ln();
            for cc in 0..c {
                out[idx(cc)] = xd[idx(cc)] - lse;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn log_softmax_bwd(y: &Tensor, gy: &[f64]) -> Result<Vec<f64>> {
    let (n, c, inner) = class_axis_split(y.shape(), "log_softmax_bwd")?;
    let yd = y.data();
    let mut gx = vec![0.0f64; yd.len()];
    for ni in 0..n {
        for s in 0..inner {
            let idx = |cc: usize| (ni * c + cc) * inner + s;
            let mut gsum = 0.0;
            for cc in 0..c {
                gsum += gy[idx(cc)];
            }
            for cc in 0..c {
                gx[idx(cc)] = gy[idx(cc)] - yd[idx(cc)].exp() * gsum;
            }
        }
    }
    Ok(gx)
}

pub fn concat_channels_fwd(xs: &[&Tensor]) -> Result<Tensor> {
    let (n, _, h, w) = xs[0].dims4("concat_channels")?;
    let mut ctot = 0;
    for x in xs {
        let (nn, c, hh, ww) = x.dims4("concat_channels")?;
        if nn != n || hh != h || ww != w {
            return Err(IsimError::shape(
                "concat_channels",
                format!("incompatible shapes {:?} vs {:?}", xs[0].shape(), x.shape()),
            ));
        }
        ctot += c;
    }
    let mut out = vec![0.0f64; n * ctot * h * w];
    for ni in 0..n {
        let mut coff = 0;
        for x in xs {
            let c = x.shape()[1];
            let src = &x.data()[ni * c * h * w..(ni + 1) * c * h * w];
            let dst = (ni * ctot + coff) * h * w;
            out[dst..dst + c * h * w].copy_from_slice(src);
            coff += c;
        }
    }
    Tensor::new(vec![n, ctot, h, w], out)
}

pub fn concat_channels_bwd(xs: &[&Tensor], gy: &[f64]) -> Vec<Vec<f64>> {
    let n = xs[0].shape()[0];
    let h = xs[0].shape()[2];
    let w = xs[0].shape()[3];
    let ctot: usize = xs.iter().map(|x| x.shape()[1]).sum();
    let mut grads: Vec<Vec<f64>> = xs.iter().map(|x| vec![0.0; x.numel()]).collect();
    for ni in 0..n {
        let mut coff = 0;
        for (xi, x) in xs.iter().enumerate() {
            let c = x.shape()[1];
            let src = (ni * ctot + coff) * h * w;
            grads[xi][ni * c * h * w..(ni + 1) * c * h * w]
                .copy_from_slice(&gy[src..src + c * h * w]);
            coff += c;
        }
    }
    grads
}

/// Multi-label soft margin: mean over samples and classes of
/// y*softplus(-x) + (1-y)*softplus(x).
pub fn multilabel_soft_margin_fwd(logits: &Tensor, targets: &[f64]) -> Result<f64> {
    let (n, c) = logits.dims2("multilabel_soft_margin")?;
    if targets.len() != n * c {
        return Err(IsimError::shape(
            "multilabel_soft_margin",
            format!("targets length {} != {}", targets.len(), n * c),
        ));
    }
    let mut acc = 0.0;
    for (&x, &y) in logits.data().iter().zip(targets) {
        acc += y * softplus(-x) + (1.0 - y) * softplus(x);
    }
    Ok(acc / (n * c) as f64)
}

pub fn multilabel_soft_margin_bwd(logits: &Tensor, targets: &[f64], gscale: f64) -> Vec<f64> {
    let inv = gscale / logits.numel() as f64;
    logits
        .data()
        .iter()
        .zip(targets)
        .map(|(&x, &y)| (sigmoid(x) - y) * inv)
        .collect()
}

/// Pixel-wise cross-entropy over labels {0..L-1} with per-sample gating.
///
/// `literal_gate` multiplies the logits by the gate before the softmax
/// (the written form of the modified loss); the default gates the
/// per-sample loss instead, which makes gated-out samples contribute
/// exactly zero loss and zero gradient.
pub struct PixelCeSpec {
    pub labels: Vec<u8>,
    pub gate: Vec<f64>,
    pub normalize_by_gated: bool,
    pub literal_gate: bool,
}

pub fn pixel_ce_fwd(logits: &Tensor, spec: &PixelCeSpec) -> Result<f64> {
    let (n, l, h, w) = logits.dims4("pixel_ce")?;
    if spec.labels.len() != n * h * w || spec.gate.len() != n {
        return Err(IsimError::shape(
            "pixel_ce",
            format!(
                "labels/gate lengths {}/{} incompatible with logits {:?}",
                spec.labels.len(),
                spec.gate.len(),
                logits.shape()
            ),
        ));
    }
    let xd = logits.data();
    let hw = h * w;
    let mut total = 0.0;
    for ni in 0..n {
        let r = spec.gate[ni];
        if !spec.literal_gate && r == 0.0 {
            continue;
        }
        let mut ce = 0.0;
        for s in 0..hw {
            let idx = |cc: usize| (ni * l + cc) * hw + s;
            let scale = if spec.literal_gate { r } else { 1.0 };
            let mut m = f64::NEG_INFINITY;
            for cc in 0..l {
                m = m.max(scale * xd[idx(cc)]);
            }
            let mut lse = 0.0;
            for cc in 0..l {
                lse += (scale * xd[idx(cc)] - m).exp();
            }
            let lse = m + lse.ln();
            let lab = spec.labels[ni * hw + s] as usize;
            ce += lse - scale * xd[idx(lab)];
        }
        let ce = ce / hw as f64;
        total += if spec.literal_gate { ce } else { r * ce };
    }
    let norm = if spec.literal_gate {
        n as f64
    } else if spec.normalize_by_gated {
        spec.gate.iter().sum::<f64>().max(1.0)
    } else {
        n as f64
    };
    Ok(total / norm)
}

pub fn pixel_ce_bwd(logits: &Tensor, spec: &PixelCeSpec, gscale: f64) -> Result<Vec<f64>> {
    let (n, l, h, w) = logits.dims4("pixel_ce_bwd")?;
    let xd = logits.data();
    let hw = h * w;
    let norm = if spec.literal_gate {
        n as f64
    } else if spec.normalize_by_gated {
        spec.gate.iter().sum::<f64>().max(1.0)
    } else {
        n as f64
    };
    let mut gx = vec![0.0f64; xd.len()];
    for ni in 0..n {
        let r = spec.gate[ni];
        if r == 0.0 {
            // literal mode: d(r*x)/dx = r = 0, so the gradient vanishes too
            continue;
        }
        let coeff = r * gscale / (norm * hw as f64);
        for s in 0..hw {
            let idx = |cc: usize| (ni * l + cc) * hw + s;
            let scale = if spec.literal_gate { r } else { 1.0 };
            let mut m = f64::NEG_INFINITY;
            for cc in 0..l {
                m = m.max(scale * xd[idx(cc)]);
            }
            let mut lse = 0.0;
            for cc in 0..l {
                lse += (scale * xd[idx(cc)] - m).exp();
            }
            let lab = spec.labels[ni * hw + s] as usize;
            for cc in 0..l {
                let p = (scale * xd[idx(cc)] - m).exp() / lse;
                let onehot = if cc == lab { 1.0 } else { 0.0 };
                gx[idx(cc)] += coeff * (p - onehot);
            }
        }
    }
    Ok(gx)
}
