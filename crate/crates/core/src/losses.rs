//! The four training loss terms and their weighted combination.
//!
//! Every term comes in two flavors: a value-only function and a `_grad`
//! variant that also returns the analytic gradient with respect to the
//! reconstruction (or the probability vector for the adversarial terms).
//! Values are reduced as means over all elements so the weights keep the
//! same meaning across batch and image sizes.

use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::metrics::{channel_ssim, channel_ssim_backward, SSIM_WINDOW};
use crate::network::PROB_EPS;
use crate::nn::Elem;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("mask must be binary 0/1, found {0}")]
    NonBinaryMask(f64),
    #[error("images {h}x{w} are smaller than the {win}x{win} SSIM window")]
    TooSmall { h: usize, w: usize, win: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("loss weight {name} is negative: {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("active loss term '{0}' has no computed value")]
    MissingTerm(&'static str),
}

/// Weighted combination coefficients; defaults follow the training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lambda_ssim: f64,
    pub lambda_mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_rec: 1.0, lambda_adv: 0.25, lambda_ssim: 60.0, lambda_mask: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_adv", self.lambda_adv),
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_mask", self.lambda_mask),
        ] {
            if !(value >= 0.0) {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Which generator terms participate in the current stage's total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSet {
    pub rec: bool,
    pub adv: bool,
    pub ssim: bool,
    pub mask: bool,
}

impl ActiveSet {
    pub const fn rec_only() -> Self {
        Self { rec: true, adv: false, ssim: false, mask: false }
    }

    pub const fn with_adv(mut self) -> Self {
        self.adv = true;
        self
    }

    pub const fn with_ssim(mut self) -> Self {
        self.ssim = true;
        self
    }

    pub const fn with_mask(mut self) -> Self {
        self.mask = true;
        self
    }
}

impl fmt::Display for ActiveSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names = Vec::new();
        if self.rec {
            names.push("rec");
        }
        if self.adv {
            names.push("adv");
        }
        if self.ssim {
            names.push("ssim");
        }
        if self.mask {
            names.push("mask");
        }
        if names.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", names.join("+"))
        }
    }
}

/// Raw term values feeding one total-loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub rec: Option<f64>,
    pub adv_g: Option<f64>,
    pub adv_d: Option<f64>,
    pub ssim: Option<f64>,
    pub mask: Option<f64>,
}

/// One training step's loss record; inactive terms stay absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub active: ActiveSet,
    pub rec: Option<f64>,
    pub adv_g: Option<f64>,
    pub adv_d: Option<f64>,
    pub ssim: Option<f64>,
    pub mask: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Column names of [`csv_row`](Self::csv_row), with the step/stage prefix.
    pub fn csv_header() -> &'static str {
        "step,stage,rec,adv_g,adv_d,ssim,mask,total"
    }

    /// Absent terms serialize as empty cells.
    pub fn csv_row(&self, step: u64, stage: &str) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            step,
            stage,
            cell(self.rec),
            cell(self.adv_g),
            cell(self.adv_d),
            cell(self.ssim),
            cell(self.mask),
            self.total
        )
    }

    /// Recomputes the weighted sum and checks it equals `total`.
    pub fn verify(&self, w: &LossWeights) -> Result<(), LossError> {
        let again = total_loss(
            &LossParts {
                rec: self.rec,
                adv_g: self.adv_g,
                adv_d: self.adv_d,
                ssim: self.ssim,
                mask: self.mask,
            },
            w,
            self.active,
        )?;
        if again.total != self.total {
            return Err(LossError::MissingTerm("total"));
        }
        Ok(())
    }
}

fn check_pair<E>(a: &Array4<E>, b: &Array4<E>) -> Result<(), LossError> {
    if a.dim() != b.dim() {
        return Err(LossError::ShapeMismatch {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    if a.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    Ok(())
}

/// Pixel L1: mean over all elements of `|x_gt - x_rec|`.
pub fn rec_loss<E: Elem>(x_rec: &Array4<E>, x_gt: &Array4<E>) -> Result<E, LossError> {
    Ok(rec_loss_grad(x_rec, x_gt)?.0)
}

/// L1 value plus its subgradient w.r.t. `x_rec` (zero at exact ties).
pub fn rec_loss_grad<E: Elem>(
    x_rec: &Array4<E>,
    x_gt: &Array4<E>,
) -> Result<(E, Array4<E>), LossError> {
    check_pair(x_rec, x_gt)?;
    let inv_n = E::from_f64(1.0 / x_rec.len() as f64);
    let mut sum = E::zero();
    let mut grad = Array4::zeros(x_rec.dim());
    for ((r, g), d) in x_rec.iter().zip(x_gt.iter()).zip(grad.iter_mut()) {
        let diff = *r - *g;
        if diff > E::zero() {
            sum += diff;
            *d = inv_n;
        } else if diff < E::zero() {
            sum -= diff;
            *d = E::zero() - inv_n;
        }
    }
    Ok((sum * inv_n, grad))
}

fn clamp_prob<E: Elem>(p: E) -> E {
    let lo = E::from_f64(PROB_EPS);
    let hi = E::from_f64(1.0 - PROB_EPS);
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

/// Discriminator objective: `-mean[log p_real + log(1 - p_fake)]`.
pub fn adv_loss_d<E: Elem>(p_real: &Array1<E>, p_fake: &Array1<E>) -> Result<E, LossError> {
    Ok(adv_loss_d_grad(p_real, p_fake)?.0)
}

/// Value plus gradients w.r.t. both probability vectors.
///
/// Probabilities are epsilon-clamped before the logs; gradients are taken
/// at the clamped values, so they stay finite at 0 and 1.
pub fn adv_loss_d_grad<E: Elem>(
    p_real: &Array1<E>,
    p_fake: &Array1<E>,
) -> Result<(E, Array1<E>, Array1<E>), LossError> {
    if p_real.len() != p_fake.len() {
        return Err(LossError::ShapeMismatch {
            a: p_real.shape().to_vec(),
            b: p_fake.shape().to_vec(),
        });
    }
    if p_real.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = E::from_f64(p_real.len() as f64);
    let one = E::one();
    let mut sum = E::zero();
    let mut d_real = Array1::zeros(p_real.len());
    let mut d_fake = Array1::zeros(p_fake.len());
    for i in 0..p_real.len() {
        let pr = clamp_prob(p_real[i]);
        let pf = clamp_prob(p_fake[i]);
        sum -= pr.ln() + (one - pf).ln();
        d_real[i] = E::zero() - one / (n * pr);
        d_fake[i] = one / (n * (one - pf));
    }
    Ok((sum / n, d_real, d_fake))
}

/// Non-saturating generator objective: `-mean log p_fake`.
pub fn adv_loss_g<E: Elem>(p_fake: &Array1<E>) -> Result<E, LossError> {
    Ok(adv_loss_g_grad(p_fake)?.0)
}

pub fn adv_loss_g_grad<E: Elem>(p_fake: &Array1<E>) -> Result<(E, Array1<E>), LossError> {
    if p_fake.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = E::from_f64(p_fake.len() as f64);
    let mut sum = E::zero();
    let mut d_fake = Array1::zeros(p_fake.len());
    for i in 0..p_fake.len() {
        let pf = clamp_prob(p_fake[i]);
        sum -= pf.ln();
        d_fake[i] = E::zero() - E::one() / (n * pf);
    }
    Ok((sum / n, d_fake))
}

/// Structural dissimilarity: `1 - mean SSIM` over the batch.
///
/// Inputs are unit-range batches; callers converting from the signed
/// network range must chain the 0.5 range factor through the gradient.
pub fn ssim_loss<E: Elem>(x_rec: &Array4<E>, x_gt: &Array4<E>) -> Result<E, LossError> {
    check_pair(x_rec, x_gt)?;
    let (_, _, h, w) = x_rec.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(LossError::TooSmall { h, w, win: SSIM_WINDOW });
    }
    let mut total = E::zero();
    let mut count = 0usize;
    for b in 0..x_rec.dim().0 {
        for c in 0..x_rec.dim().1 {
            let x = x_rec.slice(ndarray::s![b, c, .., ..]).to_owned();
            let y = x_gt.slice(ndarray::s![b, c, .., ..]).to_owned();
            let out = channel_ssim(&x.view(), &y.view());
            total += out.map.sum();
            count += out.map.len();
        }
    }
    Ok(E::one() - total / E::from_f64(count as f64))
}

/// SSIM loss value plus its gradient w.r.t. `x_rec` (unit range).
pub fn ssim_loss_grad<E: Elem>(
    x_rec: &Array4<E>,
    x_gt: &Array4<E>,
) -> Result<(E, Array4<E>), LossError> {
    check_pair(x_rec, x_gt)?;
    let (nb, nc, h, w) = x_rec.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(LossError::TooSmall { h, w, win: SSIM_WINDOW });
    }
    let map_len = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1);
    let count = nb * nc * map_len;
    // d(1 - mean map)/d map[i] = -1/count, identical for every element.
    let dmap_v = E::from_f64(-1.0 / count as f64);
    let mut total = E::zero();
    let mut grad = Array4::zeros(x_rec.dim());
    for b in 0..nb {
        for c in 0..nc {
            let x = x_rec.slice(ndarray::s![b, c, .., ..]).to_owned();
            let y = x_gt.slice(ndarray::s![b, c, .., ..]).to_owned();
            let out = channel_ssim(&x.view(), &y.view());
            total += out.map.sum();
            let dmap = ndarray::Array2::from_elem(out.map.dim(), dmap_v);
            let dx = channel_ssim_backward(&out, &x.view(), &y.view(), &dmap.view());
            grad.slice_mut(ndarray::s![b, c, .., ..]).assign(&dx);
        }
    }
    Ok((E::one() - total / E::from_f64(count as f64), grad))
}

fn check_mask<E: Elem>(x: &Array4<E>, mask: &Array4<E>) -> Result<(), LossError> {
    let (b, _, h, w) = x.dim();
    if mask.dim() != (b, 1, h, w) {
        return Err(LossError::ShapeMismatch {
            a: x.shape().to_vec(),
            b: mask.shape().to_vec(),
        });
    }
    for &m in mask.iter() {
        if m != E::zero() && m != E::one() {
            return Err(LossError::NonBinaryMask(Elem::to_f64(m)));
        }
    }
    Ok(())
}

/// Mask-region L1: mean over ALL elements of `mask * |x_gt - x_rec|`.
///
/// The mask broadcasts across channels and the normalization matches
/// [`rec_loss`], so an all-ones mask reproduces it exactly.
pub fn mask_loss<E: Elem>(
    x_rec: &Array4<E>,
    x_gt: &Array4<E>,
    mask: &Array4<E>,
) -> Result<E, LossError> {
    Ok(mask_loss_grad(x_rec, x_gt, mask)?.0)
}

pub fn mask_loss_grad<E: Elem>(
    x_rec: &Array4<E>,
    x_gt: &Array4<E>,
    mask: &Array4<E>,
) -> Result<(E, Array4<E>), LossError> {
    check_pair(x_rec, x_gt)?;
    check_mask(x_rec, mask)?;
    let (nb, nc, h, w) = x_rec.dim();
    let inv_n = E::from_f64(1.0 / x_rec.len() as f64);
    let mut sum = E::zero();
    let mut grad = Array4::zeros(x_rec.dim());
    // Same element order as rec_loss_grad, so a full mask reproduces its
    // sum bit for bit.
    for b in 0..nb {
        for c in 0..nc {
            for y in 0..h {
                for x in 0..w {
                    if mask[[b, 0, y, x]] == E::zero() {
                        continue;
                    }
                    let diff = x_rec[[b, c, y, x]] - x_gt[[b, c, y, x]];
                    if diff > E::zero() {
                        sum += diff;
                        grad[[b, c, y, x]] = inv_n;
                    } else if diff < E::zero() {
                        sum -= diff;
                        grad[[b, c, y, x]] = E::zero() - inv_n;
                    }
                }
            }
        }
    }
    Ok((sum * inv_n, grad))
}

/// Weighted sum over the active generator terms.
///
/// `adv_d` rides along for logging but never enters the total; inactive
/// terms are dropped from the breakdown entirely.
pub fn total_loss(
    parts: &LossParts,
    w: &LossWeights,
    active: ActiveSet,
) -> Result<LossBreakdown, LossError> {
    w.validate()?;
    let mut total = 0.0;
    let take = |on: bool, v: Option<f64>, name: &'static str| -> Result<Option<f64>, LossError> {
        if !on {
            return Ok(None);
        }
        v.map(Some).ok_or(LossError::MissingTerm(name))
    };
    let rec = take(active.rec, parts.rec, "rec")?;
    let adv_g = take(active.adv, parts.adv_g, "adv")?;
    let adv_d = if active.adv { parts.adv_d } else { None };
    let ssim = take(active.ssim, parts.ssim, "ssim")?;
    let mask = take(active.mask, parts.mask, "mask")?;
    if let Some(v) = rec {
        total += w.lambda_rec * v;
    }
    if let Some(v) = adv_g {
        total += w.lambda_adv * v;
    }
    if let Some(v) = ssim {
        total += w.lambda_ssim * v;
    }
    if let Some(v) = mask {
        total += w.lambda_mask * v;
    }
    Ok(LossBreakdown { active, rec, adv_g, adv_d, ssim, mask, total })
}
