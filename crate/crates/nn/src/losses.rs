//! Training objectives.
//!
//! Every loss takes `(N, C, H, W)` predictions and targets with `(N, 1, H, W)`
//! masks, evaluates one value per batch item and returns the batch mean as a
//! scalar tensor. Masked means divide by the number of selected pixels times
//! channels. Masks multiply the per-pixel residual before any reduction, so
//! prediction values outside the mask never reach the result.
//!
//! The functions are dtype-agnostic: masks are cast to the prediction dtype.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::per_item_sum;

/// Floor on masked-mean denominators.
const EPS: f64 = 1e-8;
/// Floor inside the cross-entropy logarithms.
pub const LOG_EPS: f64 = 1e-6;
/// Pyramid depth shared by the pyramid and exclusion losses.
pub const LEVELS: usize = 4;
const NORM_SMOOTH: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_grad_s: f64,
    pub lambda_lt: f64,
    pub lambda_excl: f64,
    pub lambda_i: f64,
    pub lambda_grad_l: f64,
    pub lambda_l_prime: f64,
    pub lambda_i_prime: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 1.0,
            lambda_grad_s: 10.0,
            lambda_lt: 1.0,
            lambda_excl: 0.01,
            lambda_i: 1.0,
            lambda_grad_l: 0.1,
            lambda_l_prime: 1.0,
            lambda_i_prime: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_s: 0.0,
            lambda_grad_s: 0.0,
            lambda_lt: 0.0,
            lambda_excl: 0.0,
            lambda_i: 0.0,
            lambda_grad_l: 0.0,
            lambda_l_prime: 0.0,
            lambda_i_prime: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_s,
            self.lambda_grad_s,
            self.lambda_lt,
            self.lambda_excl,
            self.lambda_i,
            self.lambda_grad_l,
            self.lambda_l_prime,
            self.lambda_i_prime,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(NnError::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

fn same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(NnError::Config(format!("{what}: shape {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn check_mask(x: &Tensor, m: &Tensor, what: &str) -> Result<Tensor> {
    let (n, _, h, w) = x.dims4()?;
    if m.dims() != [n, 1, h, w] {
        return Err(NnError::Config(format!("{what}: mask shape {:?} for input {:?}", m.dims(), x.dims())));
    }
    Ok(m.to_dtype(x.dtype())?)
}

/// Per-item `sum(x * m) / max(sum(m) * C, eps)`.
fn masked_mean_items(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let c = x.dims()[1] as f64;
    let num = per_item_sum(&x.broadcast_mul(m)?)?;
    let den = (per_item_sum(m)? * c)?.maximum(EPS)?;
    Ok(num.div(&den)?)
}

fn batch_mean(items: &Tensor) -> Result<Tensor> {
    Ok(items.mean(0)?)
}

/// Masked mean over the batch, with each item normalized by its own mask.
pub fn masked_mean(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let m = check_mask(x, m, "masked_mean")?;
    batch_mean(&masked_mean_items(x, &m)?)
}

/// Forward differences along x, shape `(N, C, H, W - 1)`.
pub fn grad_x(t: &Tensor) -> Result<Tensor> {
    let w = t.dims()[3];
    Ok((t.narrow(3, 1, w - 1)? - t.narrow(3, 0, w - 1)?)?)
}

/// Forward differences along y, shape `(N, C, H - 1, W)`.
pub fn grad_y(t: &Tensor) -> Result<Tensor> {
    let h = t.dims()[2];
    Ok((t.narrow(2, 1, h - 1)? - t.narrow(2, 0, h - 1)?)?)
}

/// Masks of the pixel pairs used by [`grad_x`] and [`grad_y`]: a difference
/// counts only when both of its pixels are selected.
pub fn pair_masks(m: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = m.dims4()?;
    let mx = (m.narrow(3, 1, w - 1)? * m.narrow(3, 0, w - 1)?)?;
    let my = (m.narrow(2, 1, h - 1)? * m.narrow(2, 0, h - 1)?)?;
    Ok((mx, my))
}

fn check_gradient_size(x: &Tensor, what: &str) -> Result<()> {
    let (_, _, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(NnError::Config(format!("{what}: needs at least 2x2 pixels, got {w}x{h}")));
    }
    Ok(())
}

fn plogq(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    Ok((p * q.clamp(LOG_EPS, 1.0)?.log()?)?)
}

/// Class-balanced binary cross entropy over the receiver, with the entropy
/// of the target subtracted so a perfect prediction scores zero. The
/// subtracted term does not depend on `s`, so gradients are those of the
/// plain balanced cross entropy.
pub fn shadow_bce(s: &Tensor, s_hat: &Tensor, m_r: &Tensor) -> Result<Tensor> {
    same_dims(s, s_hat, "shadow_bce")?;
    let m = check_mask(s, m_r, "shadow_bce")?;
    let pos = (s_hat * &m)?;
    let neg = ((1.0 - s_hat)? * &m)?;
    let one_minus_s = (1.0 - s)?;
    let pos_term = (plogq(&pos, s_hat)? - plogq(&pos, s)?)?;
    let neg_term = (plogq(&neg, &(1.0 - s_hat)?)? - plogq(&neg, &one_minus_s)?)?;
    let pos_den = per_item_sum(&pos)?.maximum(1.0)?;
    let neg_den = per_item_sum(&neg)?.maximum(1.0)?;
    let items = (per_item_sum(&pos_term)?.div(&pos_den)? + per_item_sum(&neg_term)?.div(&neg_den)?)?;
    batch_mean(&items)
}

/// Mean squared difference between the spatial gradients of `s` and `s_hat`
/// over receiver pixel pairs, summed over both directions.
pub fn shadow_gradient_loss(s: &Tensor, s_hat: &Tensor, m_r: &Tensor) -> Result<Tensor> {
    same_dims(s, s_hat, "shadow_gradient_loss")?;
    check_gradient_size(s, "shadow_gradient_loss")?;
    let m = check_mask(s, m_r, "shadow_gradient_loss")?;
    let (mx, my) = pair_masks(&m)?;
    let ex = masked_mean_items(&(grad_x(s)? - grad_x(s_hat)?)?.sqr()?, &mx)?;
    let ey = masked_mean_items(&(grad_y(s)? - grad_y(s_hat)?)?.sqr()?, &my)?;
    batch_mean(&(ex + ey)?)
}

fn ensure_nonempty(m: &Tensor, what: &'static str) -> Result<()> {
    let counts: Vec<f64> = per_item_sum(m)?.to_dtype(DType::F64)?.to_vec1()?;
    if counts.iter().any(|c| *c <= 0.0) {
        return Err(NnError::Core(unshadow_core::CoreError::EmptyMask(what)));
    }
    Ok(())
}

/// `lambda_s * E_S + lambda_grad_s * E_gradS`.
pub fn loss_shadow_seg(s: &Tensor, s_hat: &Tensor, m_r: &Tensor, w: &LossWeights) -> Result<Tensor> {
    ensure_nonempty(m_r, "receiver")?;
    let e_s = shadow_bce(s, s_hat, m_r)?;
    let e_g = shadow_gradient_loss(s, s_hat, m_r)?;
    Ok(((e_s * w.lambda_s)? + (e_g * w.lambda_grad_s)?)?)
}

/// The normalized binomial kernel as a separable 5x5 filter.
fn binomial_kernel(dtype: DType) -> Result<Tensor> {
    let k = unshadow_core::image::BINOMIAL_KERNEL;
    let mut v = Vec::with_capacity(25);
    for a in k {
        for b in k {
            v.push((a * b) as f64);
        }
    }
    Ok(Tensor::from_vec(v, (1, 1, 5, 5), &crate::tensor::device())?.to_dtype(dtype)?)
}

/// Binomial blur with edge replication followed by keeping even rows and
/// columns, matching the pyramid of [`unshadow_core::ImageBuffer`].
pub fn blur_downsample(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    let flat = t.reshape((n * c, 1, h, w))?;
    let padded = flat.pad_with_same(2, 2, 2)?.pad_with_same(3, 2, 2)?;
    let out = padded.conv2d(&binomial_kernel(t.dtype())?, 0, 2, 1, 1)?;
    let (_, _, h2, w2) = out.dims4()?;
    Ok(out.reshape((n, c, h2, w2))?)
}

/// L2 loss on Gaussian pyramids of the masked residual:
/// `sum_l sum(pyr_l(M (X - X_hat))^2) / max(sum(pyr_l(M)) * C, eps)`.
/// A constant offset `c` under a full mask contributes `c^2` per level.
pub fn pyramid_loss(x: &Tensor, x_hat: &Tensor, mask: &Tensor, levels: usize) -> Result<Tensor> {
    same_dims(x, x_hat, "pyramid_loss")?;
    let m = check_mask(x, mask, "pyramid_loss")?;
    if levels == 0 {
        return Err(NnError::Config("pyramid_loss needs at least one level".into()));
    }
    let (_, c, h, w) = x.dims4()?;
    let min = 1usize << (levels - 1);
    if h < min || w < min {
        return Err(NnError::Core(unshadow_core::CoreError::TooSmall {
            width: w,
            height: h,
            levels,
        }));
    }
    let mut d = (x - x_hat)?.broadcast_mul(&m)?;
    let mut mk = m;
    let mut total: Option<Tensor> = None;
    for l in 0..levels {
        if l > 0 {
            d = blur_downsample(&d)?;
            mk = blur_downsample(&mk)?;
        }
        let num = per_item_sum(&d.sqr()?)?;
        let den = (per_item_sum(&mk)? * c as f64)?.maximum(EPS)?;
        let term = num.div(&den)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    batch_mean(&total.expect("at least one level"))
}

fn smooth_norm(sum_sq: &Tensor) -> Result<Tensor> {
    Ok(sum_sq.div(&(sum_sq + NORM_SMOOTH)?.sqrt()?)?)
}

/// Balancing factor `sqrt((mean|gB| + eps) / (mean|gA| + eps))` per item,
/// shaped for broadcasting.
fn balance(ga: &Tensor, gb: &Tensor, m: &Tensor) -> Result<Tensor> {
    let ma = (masked_mean_items(ga, m)? + EPS)?;
    let mb = (masked_mean_items(gb, m)? + EPS)?;
    let n = ma.dims()[0];
    Ok(mb.div(&ma)?.sqrt()?.reshape((n, 1, 1, 1))?)
}

/// `||Psi(A, B)||_F` per item over masked gradient pairs in both directions.
fn psi_norm(a: &Tensor, b: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (mx, my) = pair_masks(m)?;
    let mut sum_sq: Option<Tensor> = None;
    for (ga, gb, pm) in [(grad_x(a)?.abs()?, grad_x(b)?.abs()?, mx), (grad_y(a)?.abs()?, grad_y(b)?.abs()?, my)] {
        let la = balance(&ga, &gb, &pm)?;
        let lb = balance(&gb, &ga, &pm)?;
        let psi = (ga.broadcast_mul(&la)?.tanh()? * gb.broadcast_mul(&lb)?.tanh()?)?.broadcast_mul(&pm)?;
        let s = per_item_sum(&psi.sqr()?)?;
        sum_sq = Some(match sum_sq {
            None => s,
            Some(t) => (t + s)?,
        });
    }
    smooth_norm(&sum_sq.expect("two directions"))
}

/// Multiscale exclusion penalty `sum_i 4^i ||Psi(T_i, L_i)||` over the
/// masked pixels, where level `i` is a `2^i` box downsampling and a coarse
/// pixel is selected only when all of its fine pixels are.
pub fn exclusion_loss(t: &Tensor, l: &Tensor, mask: &Tensor, levels: usize) -> Result<Tensor> {
    same_dims(t, l, "exclusion_loss")?;
    let mut m = check_mask(t, mask, "exclusion_loss")?;
    let (mut a, mut b) = (t.clone(), l.clone());
    let mut total: Option<Tensor> = None;
    for i in 0..levels {
        if i > 0 {
            let (_, _, h, w) = a.dims4()?;
            if h < 2 || w < 2 {
                break;
            }
            a = a.avg_pool2d(2)?;
            b = b.avg_pool2d(2)?;
            m = m.avg_pool2d(2)?.ge(1.0 - 1e-6)?.to_dtype(a.dtype())?;
        }
        let (_, _, h, w) = a.dims4()?;
        if h < 2 || w < 2 {
            break;
        }
        let term = (psi_norm(&a, &b, &m)? * 4f64.powi(i as i32))?;
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    match total {
        Some(t) => batch_mean(&t),
        None => Ok(Tensor::zeros((), t.dtype(), t.device())?),
    }
}

/// Masked L1 of `I - L T`.
pub fn recomposition_loss(i: &Tensor, l: &Tensor, t: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_dims(i, l, "recomposition_loss")?;
    same_dims(i, t, "recomposition_loss")?;
    let m = check_mask(i, mask, "recomposition_loss")?;
    batch_mean(&masked_mean_items(&(i - (l * t)?)?.abs()?, &m)?)
}

/// Masked L1 of the spatial gradient of `L`, summed over both directions.
pub fn sparse_gradient_prior(l: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_gradient_size(l, "sparse_gradient_prior")?;
    let m = check_mask(l, mask, "sparse_gradient_prior")?;
    let (mx, my) = pair_masks(&m)?;
    let ex = masked_mean_items(&grad_x(l)?.abs()?, &mx)?;
    let ey = masked_mean_items(&grad_y(l)?.abs()?, &my)?;
    batch_mean(&(ex + ey)?)
}

/// The four intrinsic-decomposition terms, before weighting.
#[derive(Clone, Debug)]
pub struct IntrinsicTerms {
    pub e_lt: Tensor,
    pub e_excl: Tensor,
    pub e_i: Tensor,
    pub e_grad_l: Tensor,
}

pub fn intrinsic_terms(
    l: &Tensor,
    t: &Tensor,
    l_hat: &Tensor,
    t_hat: &Tensor,
    i: &Tensor,
    m_r: &Tensor,
) -> Result<IntrinsicTerms> {
    let e_lt = (pyramid_loss(l, l_hat, m_r, LEVELS)? + pyramid_loss(t, t_hat, m_r, LEVELS)?)?;
    Ok(IntrinsicTerms {
        e_lt,
        e_excl: exclusion_loss(t, l, m_r, LEVELS)?,
        e_i: recomposition_loss(i, l, t, m_r)?,
        e_grad_l: sparse_gradient_prior(l, m_r)?,
    })
}

pub fn loss_intrinsic(
    l: &Tensor,
    t: &Tensor,
    l_hat: &Tensor,
    t_hat: &Tensor,
    i: &Tensor,
    m_r: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    let p = intrinsic_terms(l, t, l_hat, t_hat, i, m_r)?;
    Ok(((p.e_lt * w.lambda_lt)? + (p.e_excl * w.lambda_excl)? + (p.e_i * w.lambda_i)? + (p.e_grad_l * w.lambda_grad_l)?)?)
}

/// `lambda_L' [P(L'_r, L'_hat) on M_r (1 - M_o) + P(L'_o, L'_hat) on M_o]`.
pub fn loss_lighting(
    l_r_prime: &Tensor,
    l_o_prime: &Tensor,
    l_hat_prime: &Tensor,
    m_r: &Tensor,
    m_o: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    let m_r = check_mask(l_r_prime, m_r, "loss_lighting")?;
    let m_o = check_mask(l_r_prime, m_o, "loss_lighting")?;
    let receiver = (&m_r * (1.0 - &m_o)?)?;
    let removal = pyramid_loss(l_r_prime, l_hat_prime, &receiver, LEVELS)?;
    let inpaint = pyramid_loss(l_o_prime, l_hat_prime, &m_o, LEVELS)?;
    Ok(((removal + inpaint)? * w.lambda_l_prime)?)
}

/// `lambda_I'` times the masked L1 of `I'_hat - L' T'` over `M'_r`.
pub fn loss_output(i_hat_prime: &Tensor, l_prime: &Tensor, t_prime: &Tensor, m_r_prime: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok((recomposition_loss(i_hat_prime, l_prime, t_prime, m_r_prime)? * w.lambda_i_prime)?)
}
