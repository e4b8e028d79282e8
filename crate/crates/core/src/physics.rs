//! Steady-state shallow-water soft constraints.
//!
//! Two residuals are penalised inside the water domain: the divergence of
//! the depth flux (continuity) and the slope of the water surface
//! elevation (hydrostatic standing water). Velocity comes from a sheet-flow
//! Manning closure driven by the surface slope.

use std::rc::Rc;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{check_dims, divergence, grad_central, masked_mean, BitMask2D, Field2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    None,
    InverseVariance,
}

/// Which water mask restricts the physics residuals during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    Truth,
    Predicted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsConfig {
    pub manning_n: f64,
    pub e_warm: usize,
    pub e_ramp: usize,
    pub lambda_max: f64,
    pub gating: Gating,
    pub gate_epsilon: f64,
    pub slope_floor: f64,
    pub mask_source: MaskSource,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            manning_n: 0.03,
            e_warm: 5,
            e_ramp: 10,
            lambda_max: 1.0,
            gating: Gating::None,
            gate_epsilon: 1.0,
            slope_floor: 1e-8,
            mask_source: MaskSource::Truth,
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.manning_n > 0.0) {
            return Err(Error::InvalidConfig("physics.manning_n must be positive".into()));
        }
        if self.e_ramp < 1 {
            return Err(Error::InvalidConfig("physics.e_ramp must be >= 1".into()));
        }
        if !(self.lambda_max >= 0.0) {
            return Err(Error::InvalidConfig("physics.lambda_max must be >= 0".into()));
        }
        if !(self.gate_epsilon > 0.0 && self.slope_floor > 0.0) {
            return Err(Error::InvalidConfig(
                "physics.gate_epsilon and physics.slope_floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhysicsBreakdown {
    pub mass_loss: f64,
    pub smooth_loss: f64,
    pub total: f64,
}

impl PhysicsBreakdown {
    fn new(mass_loss: f64, smooth_loss: f64) -> Self {
        Self {
            mass_loss,
            smooth_loss,
            total: mass_loss + smooth_loss,
        }
    }
}

/// Cells whose mass-residual stencil (two cells in each axis) stays inside
/// the water domain: the mask eroded twice.
pub fn residual_mask(water: &BitMask2D) -> BitMask2D {
    water.erode().erode()
}

/// Sheet-flow Manning velocity `(u, v)` pointing down the WSE gradient.
pub fn manning_velocity(
    depth: &Field2D,
    wse: &Field2D,
    cfg: &PhysicsConfig,
) -> Result<(Field2D, Field2D)> {
    check_dims(depth.dims(), wse.dims())?;
    for (k, &d) in depth.values().iter().enumerate() {
        if d < 0.0 || d.is_nan() {
            return Err(Error::NegativeDepth {
                row: k / depth.cols(),
                col: k % depth.cols(),
                value: d,
            });
        }
    }
    let (sx, sy) = grad_central(wse)?;
    let (rows, cols) = depth.dims();
    let mut u = Field2D::zeros(rows, cols, depth.spacing());
    let mut v = Field2D::zeros(rows, cols, depth.spacing());
    for k in 0..depth.len() {
        let (gx, gy) = (sx.values()[k], sy.values()[k]);
        let slope = gx.hypot(gy) + cfg.slope_floor;
        let speed = depth.values()[k].powf(2.0 / 3.0) * slope.sqrt() / cfg.manning_n;
        u.values_mut()[k] = -speed * gx / slope;
        v.values_mut()[k] = -speed * gy / slope;
    }
    Ok((u, v))
}

fn mass_residual_sq(depth: &Field2D, u: &Field2D, v: &Field2D) -> Result<Field2D> {
    let qx = depth.zip_map(u, |h, a| h * a)?;
    let qy = depth.zip_map(v, |h, b| h * b)?;
    Ok(divergence(&qx, &qy)?.map(|d| d * d))
}

fn smooth_residual_sq(depth: &Field2D, dem: &Field2D) -> Result<Field2D> {
    let wse = depth.zip_map(dem, |h, z| h + z)?;
    let (wx, wy) = grad_central(&wse)?;
    wx.zip_map(&wy, |a, b| a * a + b * b)
}

/// Masked mean of the squared flux divergence.
pub fn mass_conservation_loss(
    depth: &Field2D,
    u: &Field2D,
    v: &Field2D,
    mask: &BitMask2D,
) -> Result<f64> {
    check_dims(depth.dims(), mask.dims())?;
    masked_mean(&mass_residual_sq(depth, u, v)?, mask)
}

/// Masked mean of the squared WSE gradient magnitude.
pub fn wse_smoothness_loss(depth: &Field2D, dem: &Field2D, mask: &BitMask2D) -> Result<f64> {
    check_dims(depth.dims(), mask.dims())?;
    masked_mean(&smooth_residual_sq(depth, dem)?, mask)
}

/// Per-cell multiplier `ε / (ε + σ²)`.
pub fn variance_gate(sigma2: &Field2D, epsilon: f64) -> Field2D {
    sigma2.map(|s| epsilon / (epsilon + s))
}

/// Mass plus smoothness residuals, optionally relaxed where the predicted
/// variance is high. `depth` is the depth field that enters the Manning
/// closure and must be nonnegative.
pub fn physics_loss(
    depth: &Field2D,
    dem: &Field2D,
    mask: &BitMask2D,
    sigma2: Option<&Field2D>,
    cfg: &PhysicsConfig,
) -> Result<PhysicsBreakdown> {
    check_dims(depth.dims(), dem.dims())?;
    check_dims(depth.dims(), mask.dims())?;
    let wse = depth.zip_map(dem, |h, z| h + z)?;
    let (u, v) = manning_velocity(depth, &wse, cfg)?;
    let mut mass = mass_residual_sq(depth, &u, &v)?;
    let mut smooth = smooth_residual_sq(depth, dem)?;
    if cfg.gating == Gating::InverseVariance {
        let s2 = sigma2.ok_or(Error::MissingVariance("inverse-variance gating needs sigma2"))?;
        check_dims(depth.dims(), s2.dims())?;
        if let Some((index, &value)) = s2.values().iter().enumerate().find(|(_, &s)| !(s > 0.0)) {
            return Err(Error::NonPositiveVariance { index, value });
        }
        let gate = variance_gate(s2, cfg.gate_epsilon);
        mass = mass.zip_map(&gate, |r, g| r * g)?;
        smooth = smooth.zip_map(&gate, |r, g| r * g)?;
    }
    Ok(PhysicsBreakdown::new(
        masked_mean(&mass, mask)?,
        masked_mean(&smooth, mask)?,
    ))
}

/// Warm-start physics weight: zero for `e < e_warm`, then a linear ramp
/// that saturates at `lambda_max` after `e_ramp` epochs.
pub fn warmstart_weight(epoch: usize, cfg: &PhysicsConfig) -> f64 {
    if epoch < cfg.e_warm {
        return 0.0;
    }
    let progress = (epoch - cfg.e_warm) as f64 / cfg.e_ramp as f64;
    cfg.lambda_max * progress.min(1.0)
}

/// Tape nodes of the physics terms.
pub(crate) struct PhysicsVars {
    pub mass: Var,
    pub smooth: Var,
}

/// Records [`physics_loss`] on the tape with `relu(mu)` as the depth.
/// Variance entering the gate is treated as a constant.
pub(crate) fn physics_graph(
    t: &mut Tape,
    mu: Var,
    dem: &Field2D,
    mask: &BitMask2D,
    sigma2: Option<Var>,
    cfg: &PhysicsConfig,
) -> Result<PhysicsVars> {
    let (rows, cols) = dem.dims();
    check_dims(dem.dims(), mask.dims())?;
    if rows < 3 || cols < 3 {
        return Err(Error::GridTooSmall { rows, cols });
    }
    let dx = dem.spacing();
    let h = t.relu(mu);
    let z = t.constant(Tensor::new(vec![1, rows, cols], dem.values().to_vec()));
    let wse = t.add(h, z);
    let sx = t.dx(wse, dx);
    let sy = t.dy(wse, dx);
    let sx2 = t.square(sx);
    let sy2 = t.square(sy);
    let mut smooth = t.add(sx2, sy2);
    let mag = t.sqrt(smooth);
    let slope = t.add_scalar(mag, cfg.slope_floor);
    let inv = t.pow_const(slope, -0.5);
    let h53 = t.pow_const(h, 5.0 / 3.0);
    let f = t.mul(h53, inv);
    let fx = t.mul(f, sx);
    let fy = t.mul(f, sy);
    let qx = t.scale(fx, -1.0 / cfg.manning_n);
    let qy = t.scale(fy, -1.0 / cfg.manning_n);
    let dqx = t.dx(qx, dx);
    let dqy = t.dy(qy, dx);
    let div = t.add(dqx, dqy);
    let mut mass = t.square(div);
    if cfg.gating == Gating::InverseVariance {
        let s2 = sigma2.ok_or(Error::MissingVariance("inverse-variance gating needs sigma2"))?;
        let frozen = t.stop_grad(s2);
        let shifted = t.add_scalar(frozen, cfg.gate_epsilon);
        let recip = t.pow_const(shifted, -1.0);
        let gate = t.scale(recip, cfg.gate_epsilon);
        mass = t.mul(mass, gate);
        smooth = t.mul(smooth, gate);
    }
    let bits: Rc<[bool]> = mask.bits().into();
    Ok(PhysicsVars {
        mass: t.masked_mean(mass, bits.clone()),
        smooth: t.masked_mean(smooth, bits),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    fn interior_mask(r: usize, c: usize) -> BitMask2D {
        BitMask2D::full(r, c).erode()
    }

    #[test]
    fn flat_wse_means_no_flow() {
        let depth = Field2D::filled(6, 6, 1.0, 0.8);
        let wse = Field2D::filled(6, 6, 1.0, 3.0);
        let (u, v) = manning_velocity(&depth, &wse, &PhysicsConfig::default()).unwrap();
        assert!(u.values().iter().chain(v.values()).all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn dry_cells_do_not_move() {
        let depth = Field2D::zeros(6, 6, 1.0);
        let wse = Field2D::from_fn(6, 6, 1.0, |i, j| 0.3 * i as f64 - 0.1 * j as f64);
        let (u, v) = manning_velocity(&depth, &wse, &PhysicsConfig::default()).unwrap();
        assert!(u.values().iter().chain(v.values()).all(|&x| x == 0.0));
    }

    #[test]
    fn manning_speed_hand_value() {
        let depth = Field2D::filled(5, 5, 1.0, 1.0);
        let wse = Field2D::from_fn(5, 5, 1.0, |_, j| 0.01 * j as f64);
        let (u, v) = manning_velocity(&depth, &wse, &PhysicsConfig::default()).unwrap();
        assert!((u.get(2, 2) + 1.0 / 0.03 * 0.1).abs() < 1e-3);
        assert!(v.get(2, 2).abs() < 1e-12);
    }

    #[test]
    fn negative_depth_is_rejected() {
        let mut depth = Field2D::filled(5, 5, 1.0, 1.0);
        depth.set(1, 2, -0.1);
        let wse = Field2D::zeros(5, 5, 1.0);
        let err = manning_velocity(&depth, &wse, &PhysicsConfig::default()).unwrap_err();
        assert!(err.to_string().contains("depth must be nonnegative"));
    }

    #[test]
    fn mass_loss_examples() {
        let depth = Field2D::filled(6, 6, 1.0, 1.0);
        let zero = Field2D::zeros(6, 6, 1.0);
        let full = BitMask2D::full(6, 6);
        assert_eq!(mass_conservation_loss(&depth, &zero, &zero, &full).unwrap(), 0.0);

        let u = Field2D::from_fn(6, 6, 1.0, |_, j| j as f64);
        assert_eq!(mass_conservation_loss(&depth, &u, &zero, &BitMask2D::new(6, 6)).unwrap(), 0.0);
        let loss = mass_conservation_loss(&depth, &u, &zero, &interior_mask(6, 6)).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn smoothness_examples() {
        let (r, c) = (8, 8);
        let dem = Field2D::from_fn(r, c, 1.0, |i, j| 0.1 * (i * j) as f64);
        let pond = dem.map(|z| 10.0 - z);
        assert!(wse_smoothness_loss(&pond, &dem, &interior_mask(r, c)).unwrap() < 1e-20);

        let flat = Field2D::filled(r, c, 1.0, 2.0);
        assert_eq!(wse_smoothness_loss(&flat, &flat, &BitMask2D::full(r, c)).unwrap(), 0.0);

        let depth = Field2D::from_fn(r, c, 1.0, |_, j| j as f64);
        let zero = Field2D::zeros(r, c, 1.0);
        assert_eq!(wse_smoothness_loss(&depth, &zero, &interior_mask(r, c)).unwrap(), 1.0);
    }

    fn rough_inputs() -> (Field2D, Field2D, BitMask2D) {
        let depth = Field2D::from_fn(10, 10, 1.0, |i, j| 0.5 + 0.3 * ((i * 7 + j * 3) % 5) as f64);
        let dem = Field2D::from_fn(10, 10, 1.0, |i, j| 0.2 * ((i * 3 + j * 11) % 7) as f64);
        (depth, dem, interior_mask(10, 10))
    }

    #[test]
    fn ungated_equals_sum_of_parts() {
        let (depth, dem, mask) = rough_inputs();
        let cfg = PhysicsConfig::default();
        let b = physics_loss(&depth, &dem, &mask, None, &cfg).unwrap();
        let wse = depth.zip_map(&dem, |h, z| h + z).unwrap();
        let (u, v) = manning_velocity(&depth, &wse, &cfg).unwrap();
        let mass = mass_conservation_loss(&depth, &u, &v, &mask).unwrap();
        let smooth = wse_smoothness_loss(&depth, &dem, &mask).unwrap();
        assert_eq!(b.mass_loss, mass);
        assert_eq!(b.smooth_loss, smooth);
        assert_eq!(b.total, mass + smooth);
    }

    #[test]
    fn gate_at_epsilon_halves_total() {
        let (depth, dem, mask) = rough_inputs();
        let plain = physics_loss(&depth, &dem, &mask, None, &PhysicsConfig::default()).unwrap();
        let cfg = PhysicsConfig {
            gating: Gating::InverseVariance,
            gate_epsilon: 0.7,
            ..Default::default()
        };
        let s2 = Field2D::filled(10, 10, 1.0, 0.7);
        let gated = physics_loss(&depth, &dem, &mask, Some(&s2), &cfg).unwrap();
        assert!((gated.total - 0.5 * plain.total).abs() <= 1e-12 * plain.total);

        let huge = Field2D::filled(10, 10, 1.0, 1e12);
        let relaxed = physics_loss(&depth, &dem, &mask, Some(&huge), &cfg).unwrap();
        assert!(relaxed.total < 1e-9 * plain.total);
    }

    #[test]
    fn gating_without_variance_errors() {
        let (depth, dem, mask) = rough_inputs();
        let cfg = PhysicsConfig {
            gating: Gating::InverseVariance,
            ..Default::default()
        };
        assert!(matches!(
            physics_loss(&depth, &dem, &mask, None, &cfg),
            Err(Error::MissingVariance(_))
        ));
    }

    #[test]
    fn gate_is_monotone_in_variance() {
        let (depth, dem, mask) = rough_inputs();
        let cfg = PhysicsConfig {
            gating: Gating::InverseVariance,
            ..Default::default()
        };
        let mut s2 = Field2D::filled(10, 10, 1.0, 0.5);
        let mut last = physics_loss(&depth, &dem, &mask, Some(&s2), &cfg).unwrap().total;
        for k in [11usize, 34, 45, 56, 67, 45] {
            let v = s2.values()[k];
            s2.values_mut()[k] = v * 3.0;
            let now = physics_loss(&depth, &dem, &mask, Some(&s2), &cfg).unwrap().total;
            assert!(now <= last);
            last = now;
        }
    }

    #[test]
    fn warmstart_schedule() {
        let cfg = PhysicsConfig {
            e_warm: 5,
            e_ramp: 10,
            lambda_max: 1.0,
            ..Default::default()
        };
        assert_eq!(warmstart_weight(4, &cfg), 0.0);
        assert_eq!(warmstart_weight(10, &cfg), 0.5);
        assert_eq!(warmstart_weight(15, &cfg), 1.0);
        let mut prev = 0.0;
        for e in 0..100 {
            let w = warmstart_weight(e, &cfg);
            if e < 5 {
                assert_eq!(w, 0.0);
            }
            if e >= 15 {
                assert_eq!(w, 1.0);
            }
            assert!(w >= prev);
            prev = w;
        }
    }

    #[test]
    fn generated_truth_has_zero_residuals() {
        for seed in 0..5 {
            let cfg = SceneConfig {
                rng_seed: seed,
                ..Default::default()
            };
            let s = generate_scene(&cfg).unwrap();
            let mask = residual_mask(&s.water_mask);
            let b = physics_loss(&s.depth_true, &s.dem, &mask, None, &PhysicsConfig::default()).unwrap();
            assert!(b.smooth_loss <= 1e-8 && b.mass_loss <= 1e-8, "{b:?}");
        }
    }

    #[test]
    fn residuals_are_nonnegative() {
        let (depth, dem, mask) = rough_inputs();
        let b = physics_loss(&depth, &dem, &mask, None, &PhysicsConfig::default()).unwrap();
        assert!(b.mass_loss >= 0.0 && b.smooth_loss >= 0.0);
    }
}
