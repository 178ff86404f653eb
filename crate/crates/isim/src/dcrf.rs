//! Fully connected pairwise CRF over pixel label beliefs, solved by
//! mean-field iteration. The spatial kernel is filtered exactly with a
//! separable Gaussian; the bilateral kernel is the exact O(N^2) sum,
//! packed as a strict upper triangle and built once per image. Larger
//! images tabulate the color exponential (error well below the mask
//! decision scale), smaller ones evaluate it exactly.

use crate::camops::CamStack;
use crate::error::{IsimError, Result};
use crate::numcore::Tensor;

pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub iterations: usize,
    pub spatial_weight: f64,
    /// Std-dev of the spatial Gaussian kernel, in pixels.
    pub spatial_sigma: f64,
    pub bilateral_weight: f64,
    pub bilateral_sigma_xy: f64,
    /// Color bandwidth on the [0,1] intensity scale.
    pub bilateral_sigma_rgb: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            iterations: 10,
            spatial_weight: 3.0,
            spatial_sigma: 3.0,
            bilateral_weight: 4.0,
            bilateral_sigma_xy: 20.0,
            bilateral_sigma_rgb: 0.1,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_sigma <= 0.0
            || self.bilateral_sigma_xy <= 0.0
            || self.bilateral_sigma_rgb <= 0.0
        {
            return Err(IsimError::Config("CRF sigmas must be > 0".into()));
        }
        if self.spatial_weight < 0.0 || self.bilateral_weight < 0.0 {
            return Err(IsimError::Config("CRF weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-pixel, per-label -log probability costs; L = C+1 with background
/// at label 0.
pub struct UnaryField {
    /// Shape (L, H, W).
    pub costs: Tensor,
}

/// Mean-field marginals Q, shape (L, H, W); each pixel's distribution
/// sums to 1.
pub struct BeliefField {
    pub q: Tensor,
}

impl BeliefField {
    pub fn num_labels(&self) -> usize {
        self.q.shape()[0]
    }

    /// Per-pixel argmax restricted to `allowed` label indices.
    pub fn argmax_restricted(&self, allowed: &[usize]) -> Vec<u8> {
        let &[l, h, w] = self.q.shape() else { unreachable!() };
        let _ = l;
        let hw = h * w;
        let qd = self.q.data();
        (0..hw)
            .map(|s| {
                let mut best = allowed[0];
                let mut bestv = qd[allowed[0] * hw + s];
                for &lab in &allowed[1..] {
                    let v = qd[lab * hw + s];
                    if v > bestv {
                        bestv = v;
                        best = lab;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Per-pixel unnormalized scores: background gets the threshold value,
/// each present class its CAM response; normalized, clamped, -log'ed.
pub fn build_unary(cams: &CamStack, tau: f64) -> Result<UnaryField> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(IsimError::Config(format!("tau must be in (0,1), got {tau}")));
    }
    let &[c, h, w] = cams.maps().shape() else {
        return Err(IsimError::shape("build_unary", "CAM stack must be rank 3".to_string()));
    };
    let l = c + 1;
    let hw = h * w;
    let md = cams.maps().data();
    let mut costs = vec![0.0f64; l * hw];
    for s in 0..hw {
        let mut scores = vec![0.0f64; l];
        scores[0] = tau;
        for cc in 0..c {
            scores[cc + 1] = md[cc * hw + s];
        }
        let total: f64 = scores.iter().sum();
        for (lab, sc) in scores.iter().enumerate() {
            let p = (sc / total).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            costs[lab * hw + s] = -p.ln();
        }
    }
    Ok(UnaryField {
        costs: Tensor::new(vec![l, h, w], costs)?,
    })
}

fn softmax_neg_cost_into(costs: &[f64], l: usize, hw: usize, out: &mut [f64]) {
    for s in 0..hw {
        let mut m = f64::NEG_INFINITY;
        for lab in 0..l {
            m = m.max(-costs[lab * hw + s]);
        }
        let mut sum = 0.0;
        for lab in 0..l {
            let e = (-costs[lab * hw + s] - m).exp();
            out[lab * hw + s] = e;
            sum += e;
        }
        for lab in 0..l {
            out[lab * hw + s] /= sum;
        }
    }
}

/// Color exponents past this point contribute < 1e-20 and are dropped.
const COLOR_EXP_CUTOFF: f64 = 46.0;
/// Images with at least this many pixels use the tabulated color
/// exponential (max lerp error ~6e-8 in the kernel value); smaller images
/// stay bit-faithful to `exp`.
const FAST_COLOR_MIN_PIXELS: usize = 2048;
const COLOR_TABLE_SIZE: usize = 1 << 16;

enum ColorExp {
    Exact,
    Table { values: Vec<f64>, scale: f64 },
}

impl ColorExp {
    fn new(n: usize) -> Self {
        if n < FAST_COLOR_MIN_PIXELS {
            return ColorExp::Exact;
        }
        let scale = COLOR_TABLE_SIZE as f64 / COLOR_EXP_CUTOFF;
        let values = (0..=COLOR_TABLE_SIZE)
            .map(|i| (-(i as f64) / scale).exp())
            .collect();
        ColorExp::Table { values, scale }
    }

    #[inline]
    fn eval(&self, t: f64) -> f64 {
        if t >= COLOR_EXP_CUTOFF {
            return 0.0;
        }
        match self {
            ColorExp::Exact => (-t).exp(),
            ColorExp::Table { values, scale } => {
                let pos = t * scale;
                let idx = pos as usize;
                let frac = pos - idx as f64;
                values[idx] * (1.0 - frac) + values[idx + 1] * frac
            }
        }
    }
}

/// Bilateral kernel as a packed strict upper triangle (the self term is
/// excluded by construction). O(N^2/2) memory, built once per image.
fn bilateral_packed(image: &Tensor, params: &CrfParams, h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let wb = params.bilateral_weight;
    let inv2_xy = 1.0 / (2.0 * params.bilateral_sigma_xy * params.bilateral_sigma_xy);
    let inv2_c = 1.0 / (2.0 * params.bilateral_sigma_rgb * params.bilateral_sigma_rgb);
    let img = image.data();
    let cexp = ColorExp::new(n);

    let mut bxy = vec![0.0f64; h * w];
    for dy in 0..h {
        for dx in 0..w {
            let d2 = (dy * dy + dx * dx) as f64;
            bxy[dy * w + dx] = wb * (-d2 * inv2_xy).exp();
        }
    }

    let mut packed = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let (yi, xi) = (i / w, i % w);
        let ci = &img[i * 3..i * 3 + 3];
        for j in i + 1..n {
            let (yj, xj) = (j / w, j % w);
            let dy = yi.abs_diff(yj);
            let dx = xi.abs_diff(xj);
            let cj = &img[j * 3..j * 3 + 3];
            let dc2 = (ci[0] - cj[0]) * (ci[0] - cj[0])
                + (ci[1] - cj[1]) * (ci[1] - cj[1])
                + (ci[2] - cj[2]) * (ci[2] - cj[2]);
            packed.push(bxy[dy * w + dx] * cexp.eval(dc2 * inv2_c));
        }
    }
    packed
}

/// Exact separable Gaussian filter of the (N, L) beliefs: rows then
/// columns, full extent, no truncation. Includes the self term.
fn spatial_message(q: &[f64], h: usize, w: usize, l: usize, params: &CrfParams, out: &mut [f64]) {
    let inv2_s = 1.0 / (2.0 * params.spatial_sigma * params.spatial_sigma);
    let gx: Vec<f64> = (0..w).map(|d| (-((d * d) as f64) * inv2_s).exp()).collect();
    let gy: Vec<f64> = (0..h).map(|d| (-((d * d) as f64) * inv2_s).exp()).collect();
    let ws = params.spatial_weight;

    let mut tmp = vec![0.0f64; h * w * l];
    for y in 0..h {
        for x in 0..w {
            let dst = (y * w + x) * l;
            for xs in 0..w {
                let g = gx[x.abs_diff(xs)];
                let src = (y * w + xs) * l;
                for lab in 0..l {
                    tmp[dst + lab] += g * q[src + lab];
                }
            }
        }
    }
    for x in 0..w {
        for y in 0..h {
            let dst = (y * w + x) * l;
            for lab in 0..l {
                out[dst + lab] = 0.0;
            }
            for ys in 0..h {
                let g = ws * gy[y.abs_diff(ys)];
                let src = (ys * w + x) * l;
                for lab in 0..l {
                    out[dst + lab] += g * tmp[src + lab];
                }
            }
        }
    }
}

/// Symmetric traversal of the packed bilateral triangle: each stored
/// entry feeds both endpoints' messages.
fn bilateral_message(packed: &[f64], q: &[f64], n: usize, l: usize, out: &mut [f64]) {
    out.fill(0.0);
    if l == 4 {
        // fixed-width inner loops vectorize; this is the hot path at the
        // default class count
        let mut idx = 0usize;
        for i in 0..n {
            let qi = [q[i * 4], q[i * 4 + 1], q[i * 4 + 2], q[i * 4 + 3]];
            let mut acc = [0.0f64; 4];
            let krow = &packed[idx..idx + (n - i - 1)];
            idx += n - i - 1;
            let q_tail = &q[(i + 1) * 4..];
            let out_tail = &mut out[(i + 1) * 4..];
            for ((&k, qj), oj) in krow
                .iter()
                .zip(q_tail.chunks_exact(4))
                .zip(out_tail.chunks_exact_mut(4))
            {
                for lab in 0..4 {
                    acc[lab] += k * qj[lab];
                    oj[lab] += k * qi[lab];
                }
            }
            for lab in 0..4 {
                out[i * 4 + lab] += acc[lab];
            }
        }
        return;
    }
    let mut idx = 0usize;
    for i in 0..n {
        let qi = &q[i * l..(i + 1) * l];
        let (head, tail) = out.split_at_mut((i + 1) * l);
        let oi = &mut head[i * l..];
        for j in i + 1..n {
            let k = packed[idx];
            idx += 1;
            if k == 0.0 {
                continue;
            }
            let qj = &q[j * l..(j + 1) * l];
            let oj = &mut tail[(j - i - 1) * l..(j - i) * l];
            for lab in 0..l {
                oi[lab] += k * qj[lab];
                oj[lab] += k * qi[lab];
            }
        }
    }
}

/// Mean-field refinement: Q0 = softmax(-unary); each iteration filters the
/// beliefs with the pairwise kernel (excluding the self term), converts
/// messages to Potts penalties on differing labels, and renormalizes with
/// a softmax against the unary.
pub fn mean_field_refine(
    unary: &UnaryField,
    image: &Tensor,
    params: &CrfParams,
) -> Result<BeliefField> {
    params.validate()?;
    let &[l, h, w] = unary.costs.shape() else {
        return Err(IsimError::shape("mean_field_refine", "unary must be rank 3".to_string()));
    };
    match image.shape() {
        &[ih, iw, 3] if ih == h && iw == w => {}
        _ => {
            return Err(IsimError::shape(
                "mean_field_refine",
                format!(
                    "image shape {:?} incompatible with unary {h}x{w}",
                    image.shape()
                ),
            ))
        }
    }
    let hw = h * w;
    let costs = unary.costs.data();
    let mut q = vec![0.0f64; l * hw];
    softmax_neg_cost_into(costs, l, hw, &mut q);

    let no_pairwise = params.spatial_weight == 0.0 && params.bilateral_weight == 0.0;
    if params.iterations == 0 || no_pairwise {
        return Ok(BeliefField {
            q: Tensor::new(vec![l, h, w], q)?,
        });
    }

    let ws = params.spatial_weight;
    let wb = params.bilateral_weight;
    let packed = if wb > 0.0 {
        bilateral_packed(image, params, h, w)
    } else {
        Vec::new()
    };

    // Q as (N, L) for the filter steps
    let mut qn = vec![0.0f64; hw * l];
    for s in 0..hw {
        for lab in 0..l {
            qn[s * l + lab] = q[lab * hw + s];
        }
    }

    let mut msg = vec![0.0f64; hw * l];
    let mut scratch = vec![0.0f64; hw * l];
    for _ in 0..params.iterations {
        // spatial part includes the self term ws * Q_i; subtract it below
        if ws > 0.0 {
            spatial_message(&qn, h, w, l, params, &mut msg);
        } else {
            msg.fill(0.0);
        }
        if wb > 0.0 {
            bilateral_message(&packed, &qn, hw, l, &mut scratch);
            for (m, b) in msg.iter_mut().zip(&scratch) {
                *m += b;
            }
        }
        for s in 0..hw {
            let row = s * l;
            let row_total: f64 = (0..l).map(|lab| msg[row + lab] - ws * qn[row + lab]).sum();
            // Potts: penalty for label = total mass on the *other* labels
            let mut logits = vec![0.0f64; l];
            for lab in 0..l {
                let m = msg[row + lab] - ws * qn[row + lab];
                let penalty = row_total - m;
                logits[lab] = -costs[lab * hw + s] - penalty;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for lab in 0..l {
                let e = (logits[lab] - mx).exp();
                scratch[row + lab] = e;
                sum += e;
            }
            for lab in 0..l {
                scratch[row + lab] /= sum;
            }
        }
        std::mem::swap(&mut qn, &mut scratch);
    }

    let mut out = vec![0.0f64; l * hw];
    for s in 0..hw {
        for lab in 0..l {
            out[lab * hw + s] = qn[s * l + lab];
        }
    }
    Ok(BeliefField {
        q: Tensor::new(vec![l, h, w], out)?,
    })
}
