//! Masked reconstruction objective: a per-channel squared error plus a squared
//! error of channel sums, both normalised by the number of contributing elements.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub spectral_term: f64,
    pub spatial_term: f64,
    /// Number of contributing `(b, t, c, h, w)` elements.
    pub m: usize,
    /// Valid channel count per sample.
    pub c: Vec<usize>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.spectral_term.is_finite() && self.spatial_term.is_finite()
    }
}

/// `[B, T, C, H, W]` flags: pixels of hidden patches on valid channels. With
/// `include_pimask`, the visible exceptions inside masked windows count too.
pub fn loss_mask(plans: &[&MaskPlan], band_valid: &[&[bool]], include_pimask: bool) -> Result<Vec<bool>> {
    if plans.len() != band_valid.len() || plans.is_empty() {
        return Err(Error::Invalid(format!(
            "{} mask plans for {} samples",
            plans.len(),
            band_valid.len()
        )));
    }
    let g = plans[0].grid;
    let mut out = Vec::with_capacity(plans.len() * g.t * g.c * g.h * g.w);
    for (plan, valid) in plans.iter().zip(band_valid) {
        if plan.grid != g || valid.len() != g.c {
            return Err(Error::Shape {
                expected: vec![g.t, g.c, g.h, g.w],
                actual: vec![plan.grid.t, valid.len(), plan.grid.h, plan.grid.w],
            });
        }
        let hidden: Vec<bool> = if include_pimask {
            (0..g.n_h * g.n_w)
                .map(|k| plan.window_mask[g.window_of(k / g.n_w, k % g.n_w)])
                .collect()
        } else {
            plan.spatial_mask()
        };
        for _t in 0..g.t {
            for &v in valid.iter() {
                for y in 0..g.h {
                    for x in 0..g.w {
                        out.push(v && hidden[(y / g.p) * g.n_w + x / g.p]);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check<S: Scalar>(x: &Tensor<S>, xh: &Tensor<S>, lmask: &[bool]) -> Result<[usize; 5]> {
    if x.shape() != xh.shape() || x.shape().len() != 5 || lmask.len() != x.len() {
        return Err(Error::Shape {
            expected: x.shape().to_vec(),
            actual: xh.shape().to_vec(),
        });
    }
    let s = x.shape();
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

/// `(1/m) Σ lmask·(x − x̂)²` and `m`; zero when nothing contributes.
pub fn spectral_loss<S: Scalar>(x: &Tensor<S>, xh: &Tensor<S>, lmask: &[bool]) -> Result<(f64, usize)> {
    check(x, xh, lmask)?;
    let mut sum = 0.0;
    let mut m = 0;
    for ((a, b), &k) in x.data().iter().zip(xh.data()).zip(lmask) {
        if k {
            sum += (a.as_f64() - b.as_f64()).powi(2);
            m += 1;
        }
    }
    Ok((if m == 0 { 0.0 } else { sum / m as f64 }, m))
}

/// Per-position masked channel sums `Σ_c v·lmask`, shape `[B, T, H, W]`.
fn channel_sums<S: Scalar>(v: &Tensor<S>, lmask: &[bool], dims: [usize; 5]) -> Vec<f64> {
    let [b, t, c, h, w] = dims;
    let hw = h * w;
    let mut out = vec![0.0; b * t * hw];
    for bt in 0..b * t {
        for ch in 0..c {
            let base = (bt * c + ch) * hw;
            for k in 0..hw {
                if lmask[base + k] {
                    out[bt * hw + k] += v.data()[base + k].as_f64();
                }
            }
        }
    }
    out
}

/// `(1/m) Σ_b c_b Σ_{t,h,w} (Σ_c x·lmask − Σ_c x̂·lmask)²`.
pub fn spatial_loss<S: Scalar>(x: &Tensor<S>, xh: &Tensor<S>, lmask: &[bool], c: &[usize]) -> Result<f64> {
    let dims = check(x, xh, lmask)?;
    if c.len() != dims[0] {
        return Err(Error::Invalid(format!("{} channel counts for batch {}", c.len(), dims[0])));
    }
    let m = lmask.iter().filter(|&&k| k).count();
    if m == 0 {
        return Ok(0.0);
    }
    let (sx, sh) = (channel_sums(x, lmask, dims), channel_sums(xh, lmask, dims));
    let per_sample = dims[1] * dims[3] * dims[4];
    let sum: f64 = sx
        .iter()
        .zip(&sh)
        .enumerate()
        .map(|(i, (a, b))| c[i / per_sample] as f64 * (a - b).powi(2))
        .sum();
    Ok(sum / m as f64)
}

/// Both terms plus the gradient of the total with respect to `x̂`.
pub fn total_loss_with_grad<S: Scalar>(
    x: &Tensor<S>,
    xh: &Tensor<S>,
    lmask: &[bool],
    c: &[usize],
) -> Result<(LossReport, Vec<S>)> {
    let dims = check(x, xh, lmask)?;
    let (spectral_term, m) = spectral_loss(x, xh, lmask)?;
    let spatial_term = spatial_loss(x, xh, lmask, c)?;
    let mut grad = vec![S::zero(); x.len()];
    if m > 0 {
        let [_, t, ch, h, w] = dims;
        let hw = h * w;
        let (sx, sh) = (channel_sums(x, lmask, dims), channel_sums(xh, lmask, dims));
        let inv_m = 1.0 / m as f64;
        for (i, g) in grad.iter_mut().enumerate() {
            if !lmask[i] {
                continue;
            }
            let (bt, k) = (i / (ch * hw), i % hw);
            let b = bt / t;
            let spectral = -2.0 * inv_m * (x.data()[i].as_f64() - xh.data()[i].as_f64());
            let spatial = -2.0 * inv_m * c[b] as f64 * (sx[bt * hw + k] - sh[bt * hw + k]);
            *g = S::lit(spectral + spatial);
        }
    }
    Ok((
        LossReport {
            total: spectral_term + spatial_term,
            spectral_term,
            spatial_term,
            m,
            c: c.to_vec(),
        },
        grad,
    ))
}

pub fn total_loss<S: Scalar>(x: &Tensor<S>, xh: &Tensor<S>, lmask: &[bool], c: &[usize]) -> Result<LossReport> {
    total_loss_with_grad(x, xh, lmask, c).map(|(r, _)| r)
}

/// Adds the loss as a graph node; gradients reach only `xh`.
pub fn loss_objective<S: Scalar>(
    g: &mut Graph<S>,
    xh: Var,
    target: &Tensor<S>,
    lmask: &[bool],
    c: &[usize],
) -> Result<(Var, LossReport)> {
    let (report, grad) = total_loss_with_grad(target, g.value(xh), lmask, c)?;
    let node = g.objective(xh, S::lit(report.total), grad);
    Ok((node, report))
}
