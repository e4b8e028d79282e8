//! Data-fidelity objectives and the per-variant loss composition.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{check_dims, BitMask2D, Field2D};
use crate::physics::{physics_graph, physics_loss, residual_mask, warmstart_weight, Gating, MaskSource, PhysicsConfig};
use crate::scene::Scene;

/// The three loss compositions compared in the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// MSE plus physics at full weight from the first epoch.
    BaselineMse,
    /// MSE plus warm-started physics.
    StabilizedMse,
    /// Gaussian NLL plus SoftDice plus warm-started, variance-gated physics.
    UncertaintyAware,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::BaselineMse,
        Variant::StabilizedMse,
        Variant::UncertaintyAware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineMse => "baseline_mse",
            Variant::StabilizedMse => "stabilized_mse",
            Variant::UncertaintyAware => "uncertainty_aware",
        }
    }

    pub fn is_probabilistic(self) -> bool {
        self == Variant::UncertaintyAware
    }

    /// Physics weight at `epoch` under this variant's schedule.
    pub fn physics_weight(self, epoch: usize, pcfg: &PhysicsConfig) -> f64 {
        match self {
            Variant::BaselineMse => pcfg.lambda_max,
            _ => warmstart_weight(epoch, pcfg),
        }
    }

    pub fn gating(self) -> Gating {
        match self {
            Variant::UncertaintyAware => Gating::InverseVariance,
            _ => Gating::None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub w_nll: f64,
    pub w_dice: f64,
    pub variant: Variant,
    pub tau_w: f64,
    pub temp: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_nll: 1.0,
            w_dice: 1.0,
            variant: Variant::UncertaintyAware,
            tau_w: 0.05,
            temp: 0.02,
            dice_eps: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_w > 0.0 && self.temp > 0.0) {
            return Err(Error::InvalidConfig("loss.tau_w and loss.temp must be positive".into()));
        }
        if !(self.w_nll >= 0.0 && self.w_dice >= 0.0 && self.dice_eps > 0.0) {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Every loss component of one evaluation, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    /// NLL for the probabilistic variant, MSE otherwise.
    pub data_loss: f64,
    pub dice_loss: f64,
    pub mass_loss: f64,
    pub smooth_loss: f64,
    pub physics_weight: f64,
    pub total: f64,
}

pub(crate) fn check_variance(sigma2: &[f64]) -> Result<()> {
    match sigma2.iter().enumerate().find(|(_, &s)| !(s > 0.0)) {
        Some((index, &value)) => Err(Error::NonPositiveVariance { index, value }),
        None => Ok(()),
    }
}

/// Heteroscedastic Gaussian negative log-likelihood (constant term dropped).
///
/// Returns the mean over all cells and the per-cell values.
pub fn gaussian_nll(y: &Field2D, mu: &Field2D, sigma2: &Field2D) -> Result<(f64, Field2D)> {
    check_dims(y.dims(), mu.dims())?;
    check_dims(y.dims(), sigma2.dims())?;
    check_variance(sigma2.values())?;
    let mut per_cell = y.clone();
    for (k, out) in per_cell.values_mut().iter_mut().enumerate() {
        let r = y.values()[k] - mu.values()[k];
        let s = sigma2.values()[k];
        *out = 0.5 * (r * r / s + s.ln());
    }
    let mean = per_cell.mean();
    Ok((mean, per_cell))
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tempered logistic of depth around the water threshold.
pub fn soft_water_prob(mu: &Field2D, weights: &LossWeights) -> Field2D {
    mu.map(|m| logistic((m - weights.tau_w) / weights.temp))
}

/// `1 − (2Σpy + ε) / (Σp + Σy + ε)`.
pub fn soft_dice_loss(p: &Field2D, y_mask: &BitMask2D, weights: &LossWeights) -> Result<f64> {
    check_dims(p.dims(), y_mask.dims())?;
    Ok(soft_dice_raw(p.values(), y_mask.bits(), weights.dice_eps))
}

pub(crate) fn soft_dice_raw(p: &[f64], y: &[bool], eps: f64) -> f64 {
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&pv, &yv) in p.iter().zip(y) {
        sp += pv;
        if yv {
            inter += pv;
            sy += 1.0;
        }
    }
    1.0 - (2.0 * inter + eps) / (sp + sy + eps)
}

pub fn mse_loss(y: &Field2D, mu: &Field2D) -> Result<f64> {
    check_dims(y.dims(), mu.dims())?;
    let sum: f64 = y
        .values()
        .iter()
        .zip(mu.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / y.len() as f64)
}

/// Water mask used as segmentation truth: cells deeper than `tau_w`.
pub fn truth_mask(scene: &Scene, weights: &LossWeights) -> BitMask2D {
    BitMask2D::threshold(&scene.depth_true, weights.tau_w)
}

/// Mask restricting the physics residuals for this scene and prediction.
pub fn physics_mask(scene: &Scene, mu: &Field2D, weights: &LossWeights, pcfg: &PhysicsConfig) -> BitMask2D {
    match pcfg.mask_source {
        MaskSource::Truth => residual_mask(&scene.water_mask),
        MaskSource::Predicted => residual_mask(&BitMask2D::threshold(mu, weights.tau_w)),
    }
}

/// Full objective for one scene at one epoch.
///
/// The physics terms are always evaluated, even when their weight is zero.
/// Depth entering the physics is the prediction clamped at zero.
pub fn total_loss(
    scene: &Scene,
    mu: &Field2D,
    sigma2: Option<&Field2D>,
    epoch: usize,
    weights: &LossWeights,
    pcfg: &PhysicsConfig,
) -> Result<LossBundle> {
    check_dims(scene.dims(), mu.dims())?;
    let variant = weights.variant;
    let y = &scene.depth_true;
    let mask = physics_mask(scene, mu, weights, pcfg);
    let depth = mu.map(|m| m.max(0.0));
    let phys_cfg = PhysicsConfig {
        gating: variant.gating(),
        ..pcfg.clone()
    };
    let lambda = variant.physics_weight(epoch, pcfg);
    let dice = soft_dice_loss(&soft_water_prob(mu, weights), &truth_mask(scene, weights), weights)?;

    let (data, phys, total) = match variant {
        Variant::BaselineMse | Variant::StabilizedMse => {
            let phys = physics_loss(&depth, &scene.dem, &mask, None, &phys_cfg)?;
            let mse = mse_loss(y, mu)?;
            (mse, phys, mse + lambda * phys.total)
        }
        Variant::UncertaintyAware => {
            let s2 = sigma2.ok_or(Error::MissingVariance("uncertainty_aware variant needs sigma2"))?;
            let (nll, _) = gaussian_nll(y, mu, s2)?;
            let phys = physics_loss(&depth, &scene.dem, &mask, Some(s2), &phys_cfg)?;
            let total = weights.w_nll * nll + weights.w_dice * dice + lambda * phys.total;
            (nll, phys, total)
        }
    };
    Ok(LossBundle {
        data_loss: data,
        dice_loss: dice,
        mass_loss: phys.mass_loss,
        smooth_loss: phys.smooth_loss,
        physics_weight: lambda,
        total,
    })
}

/// Tape nodes of one scene objective.
pub(crate) struct LossVars {
    pub data: Var,
    pub dice: Var,
    pub mass: Var,
    pub smooth: Var,
    pub total: Var,
    pub physics_weight: f64,
}

impl LossVars {
    pub fn bundle(&self, t: &Tape) -> LossBundle {
        LossBundle {
            data_loss: t.scalar(self.data),
            dice_loss: t.scalar(self.dice),
            mass_loss: t.scalar(self.mass),
            smooth_loss: t.scalar(self.smooth),
            physics_weight: self.physics_weight,
            total: t.scalar(self.total),
        }
    }
}

/// Records [`total_loss`] on the tape. `gate_sigma2`, when given, replaces
/// the predicted variance inside the physics gate.
pub(crate) fn loss_graph(
    t: &mut Tape,
    mu: Var,
    sigma2: Option<Var>,
    scene: &Scene,
    epoch: usize,
    weights: &LossWeights,
    pcfg: &PhysicsConfig,
    gate_sigma2: Option<&Field2D>,
) -> Result<LossVars> {
    let (rows, cols) = scene.dims();
    let variant = weights.variant;
    let mu_field = Field2D::from_vec(rows, cols, scene.dem.spacing(), t.value(mu).data.clone())?;
    let mask = physics_mask(scene, &mu_field, weights, pcfg);
    let phys_cfg = PhysicsConfig {
        gating: variant.gating(),
        ..pcfg.clone()
    };
    let lambda = variant.physics_weight(epoch, pcfg);
    let y = t.constant(Tensor::new(vec![1, rows, cols], scene.depth_true.values().to_vec()));

    let truth = truth_mask(scene, weights);
    let shifted = t.add_scalar(mu, -weights.tau_w);
    let logits = t.scale(shifted, 1.0 / weights.temp);
    let p = t.sigmoid(logits);
    let inter = t.masked_sum(p, truth.bits().into());
    let sum_p = t.sum(p);
    let num = t.scale(inter, 2.0);
    let num = t.add_scalar(num, weights.dice_eps);
    let den = t.add_scalar(sum_p, truth.popcount() as f64 + weights.dice_eps);
    let ratio = t.div(num, den);
    let neg = t.scale(ratio, -1.0);
    let dice = t.add_scalar(neg, 1.0);

    let resid = t.sub(y, mu);
    let sq = t.square(resid);
    let (data, s2) = match variant {
        Variant::UncertaintyAware => {
            let s2 = sigma2.ok_or(Error::MissingVariance("uncertainty_aware variant needs sigma2"))?;
            let a = t.div(sq, s2);
            let b = t.ln(s2);
            let sum = t.add(a, b);
            let m = t.mean(sum);
            (t.scale(m, 0.5), Some(s2))
        }
        _ => (t.mean(sq), None),
    };
    let gate = match gate_sigma2 {
        Some(f) => Some(t.constant(Tensor::new(vec![1, rows, cols], f.values().to_vec()))),
        None => s2,
    };
    let phys = physics_graph(t, mu, &scene.dem, &mask, gate, &phys_cfg)?;
    let mut terms = vec![(phys.mass, lambda), (phys.smooth, lambda)];
    match variant {
        Variant::UncertaintyAware => {
            terms.push((data, weights.w_nll));
            terms.push((dice, weights.w_dice));
        }
        _ => terms.push((data, 1.0)),
    }
    let total = t.weighted_sum(terms);
    Ok(LossVars {
        data,
        dice,
        mass: phys.mass,
        smooth: phys.smooth,
        total,
        physics_weight: lambda,
    })
}
