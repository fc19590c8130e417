//! Terms of the per-view training objective and the critic objective.
//!
//! Reductions: cross-entropy is a voxel mean and Dice a class mean; the
//! adversarial, masked and critic terms are voxel sums. Every logarithm reads
//! its argument clamped from below at [`LOG_FLOOR`]. All gradients returned
//! here are with respect to the probability (or confidence) maps; callers
//! chain them through softmax or sigmoid.
//!
//! Slices are channel-major `[K, voxels]` for class maps and `[voxels]` for
//! confidence maps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the masked cross-entropy.
    pub lambda_m: f64,
    /// Weight of the adversarial term.
    pub lambda_c: f64,
    /// Confidence threshold of the masked cross-entropy (strict `>`).
    pub threshold: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_m: 0.3, lambda_c: 0.01, threshold: 0.2, dice_smooth: 1e-5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_m >= 0.0 && self.lambda_c >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config(format!("dice smoothing {} must be positive", self.dice_smooth)));
        }
        Ok(())
    }
}

/// Per-view objective, one value per term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg_ce: f64,
    pub seg_dice: f64,
    pub adv: f64,
    pub masked: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(seg_ce: f64, seg_dice: f64, adv: f64, masked: f64, w: &LossWeights) -> Self {
        let total = seg_ce + seg_dice + w.lambda_m * masked + w.lambda_c * adv;
        Self { seg_ce, seg_dice, adv, masked, total }
    }

    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("seg_ce", self.seg_ce),
            ("seg_dice", self.seg_dice),
            ("adv", self.adv),
            ("masked", self.masked),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

fn check_class_maps<T>(p: &[T], y: &[T], classes: usize) -> Result<usize> {
    if classes == 0 || p.len() != y.len() || p.len() % classes != 0 {
        return Err(Error::Shape(format!(
            "prediction ({}) and target ({}) do not form {classes}-class maps",
            p.len(),
            y.len()
        )));
    }
    Ok(p.len() / classes)
}

fn check_unit_range<T: Real>(conf: &[T], name: &str) -> Result<()> {
    if let Some(v) = conf.iter().find(|&&c| !(c >= T::zero() && c <= T::one())) {
        return Err(Error::Validation(format!(
            "{name} value {:?} outside [0, 1]",
            v
        )));
    }
    Ok(())
}

#[inline]
fn clamped_log<T: Real>(x: T) -> (T, T) {
    // (log, d log / dx)
    let floor = T::of(LOG_FLOOR);
    if x > floor {
        (x.ln(), T::one() / x)
    } else {
        (floor.ln(), T::zero())
    }
}

/// Voxel-mean cross-entropy and its gradient.
pub fn ce_loss_grad<T: Real>(p: &[T], y: &[T], classes: usize) -> Result<(T, Vec<T>)> {
    let voxels = check_class_maps(p, y, classes)?;
    let scale = T::one() / T::of(voxels as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); p.len()];
    for i in 0..p.len() {
        if y[i] != T::zero() {
            let (l, dl) = clamped_log(p[i]);
            loss -= y[i] * l;
            grad[i] = -y[i] * dl * scale;
        }
    }
    Ok((loss * scale, grad))
}

pub fn ce_loss<T: Real>(p: &[T], y: &[T], classes: usize) -> Result<T> {
    Ok(ce_loss_grad(p, y, classes)?.0)
}

/// Class-mean soft Dice loss `1 - (2<y,p> + eps) / (|y| + |p| + eps)`.
pub fn dice_loss_grad<T: Real>(p: &[T], y: &[T], classes: usize, smooth: f64) -> Result<(T, Vec<T>)> {
    let voxels = check_class_maps(p, y, classes)?;
    let eps = T::of(smooth);
    let kf = T::of(classes as f64);
    let two = T::of(2.0);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); p.len()];
    for c in 0..classes {
        let range = c * voxels..(c + 1) * voxels;
        let (pc, yc) = (&p[range.clone()], &y[range.clone()]);
        let inter: T = pc.iter().zip(yc).map(|(a, b)| *a * *b).sum();
        let denom: T = pc.iter().copied().sum::<T>() + yc.iter().copied().sum::<T>() + eps;
        let num = two * inter + eps;
        loss += T::one() - num / denom;
        for (g, yv) in grad[range].iter_mut().zip(yc) {
            *g = -(two * *yv * denom - num) / (denom * denom) / kf;
        }
    }
    Ok((loss / kf, grad))
}

pub fn dice_loss<T: Real>(p: &[T], y: &[T], classes: usize, smooth: f64) -> Result<T> {
    Ok(dice_loss_grad(p, y, classes, smooth)?.0)
}

/// `-Σ log conf`: pushes the critic's response to a prediction toward 1.
pub fn adv_loss_grad<T: Real>(conf: &[T]) -> Result<(T, Vec<T>)> {
    check_unit_range(conf, "confidence")?;
    let mut loss = T::zero();
    let grad = conf
        .iter()
        .map(|&c| {
            let (l, dl) = clamped_log(c);
            loss -= l;
            -dl
        })
        .collect();
    Ok((loss, grad))
}

pub fn adv_loss<T: Real>(conf: &[T]) -> Result<T> {
    Ok(adv_loss_grad(conf)?.0)
}

/// Cross-entropy summed over voxels whose confidence is strictly above
/// `threshold`. The confidence map only selects voxels; it carries no gradient.
pub fn masked_ce_loss_grad<T: Real>(
    p: &[T],
    y: &[T],
    conf: &[T],
    threshold: f64,
    classes: usize,
) -> Result<(T, Vec<T>)> {
    let voxels = check_class_maps(p, y, classes)?;
    if conf.len() != voxels {
        return Err(Error::Shape(format!(
            "confidence map has {} voxels, prediction {voxels}",
            conf.len()
        )));
    }
    let t = T::of(threshold);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); p.len()];
    for (v, &cv) in conf.iter().enumerate() {
        if cv > t {
            for c in 0..classes {
                let i = c * voxels + v;
                if y[i] != T::zero() {
                    let (l, dl) = clamped_log(p[i]);
                    loss -= y[i] * l;
                    grad[i] = -y[i] * dl;
                }
            }
        }
    }
    Ok((loss, grad))
}

pub fn masked_ce_loss<T: Real>(p: &[T], y: &[T], conf: &[T], threshold: f64, classes: usize) -> Result<T> {
    Ok(masked_ce_loss_grad(p, y, conf, threshold, classes)?.0)
}

/// Gradients of [`critic_loss_grad`] with respect to each of its four maps.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticGrads<T> {
    pub real_1: Vec<T>,
    pub fake_1: Vec<T>,
    pub real_2: Vec<T>,
    pub fake_2: Vec<T>,
}

/// Negated log-likelihood of the critic labelling ground truth as real and
/// both views' predictions as fake:
/// `-Σ [log ψ(Y₁) + log(1 - ψ(F₁)) + log ψ(Y₂) + log(1 - ψ(F₂))]`.
pub fn critic_loss_grad<T: Real>(
    real_1: &[T],
    fake_1: &[T],
    real_2: &[T],
    fake_2: &[T],
) -> Result<(T, CriticGrads<T>)> {
    let n = real_1.len();
    if fake_1.len() != n || real_2.len() != n || fake_2.len() != n {
        return Err(Error::Shape(format!(
            "critic maps differ in size: {n}, {}, {}, {}",
            fake_1.len(),
            real_2.len(),
            fake_2.len()
        )));
    }
    for (m, name) in [(real_1, "real_1"), (fake_1, "fake_1"), (real_2, "real_2"), (fake_2, "fake_2")] {
        check_unit_range(m, name)?;
    }
    let mut loss = T::zero();
    let mut real = |m: &[T]| -> Vec<T> {
        m.iter()
            .map(|&c| {
                let (l, dl) = clamped_log(c);
                loss -= l;
                -dl
            })
            .collect()
    };
    let g_real_1 = real(real_1);
    let g_real_2 = real(real_2);
    let mut fake = |m: &[T]| -> Vec<T> {
        m.iter()
            .map(|&c| {
                let (l, dl) = clamped_log(T::one() - c);
                loss -= l;
                dl
            })
            .collect()
    };
    let g_fake_1 = fake(fake_1);
    let g_fake_2 = fake(fake_2);
    Ok((loss, CriticGrads { real_1: g_real_1, fake_1: g_fake_1, real_2: g_real_2, fake_2: g_fake_2 }))
}

pub fn critic_loss<T: Real>(real_1: &[T], fake_1: &[T], real_2: &[T], fake_2: &[T]) -> Result<T> {
    Ok(critic_loss_grad(real_1, fake_1, real_2, fake_2)?.0)
}

/// Every per-view term evaluated on one sample. `conf_adv` is the critic's
/// response to `p`; `conf_mask` selects the voxels of the masked term.
pub fn total_view_loss<T: Real>(
    p: &[T],
    y: &[T],
    conf_adv: &[T],
    conf_mask: &[T],
    classes: usize,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let f = |x: T| x.to_f64().unwrap_or(f64::NAN);
    let ce = ce_loss(p, y, classes)?;
    let dice = dice_loss(p, y, classes, w.dice_smooth)?;
    let adv = adv_loss(conf_adv)?;
    let masked = masked_ce_loss(p, y, conf_mask, w.threshold, classes)?;
    Ok(LossBreakdown::compose(f(ce), f(dice), f(adv), f(masked), w))
}
