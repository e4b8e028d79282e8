//! Central finite-difference audit of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{LossWeights, Variant};
use crate::model::{forward, init_params, Gradients, ModelConfig, ModelParams, NormStats};
use crate::physics::PhysicsConfig;
use crate::scene::Scene;
use crate::train::{objective_with_gate, scene_objective};

/// Absolute slack for gradients that are zero up to rounding.
pub const ABS_FLOOR: f64 = 1e-8;
/// Relative finite-difference step.
pub const REL_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub fd: f64,
    pub ad: f64,
}

impl GradSample {
    pub fn rel_err(&self) -> f64 {
        let scale = self.fd.abs().max(self.ad.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.fd - self.ad).abs() / scale
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        (self.fd - self.ad).abs() <= tol * self.fd.abs().max(self.ad.abs()) + ABS_FLOOR
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub samples: Vec<GradSample>,
    /// Draws rejected because the loss is not smooth across the stencil
    /// (a ReLU kink lies within one step).
    pub nonsmooth_draws: usize,
    pub requested: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.samples.len() >= self.requested && self.samples.iter().all(|s| s.passes(self.tolerance))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.samples.iter().map(GradSample::rel_err).fold(0.0, f64::max)
    }
}

fn perturbed(params: &ModelParams, name: &str, k: usize, delta: f64) -> ModelParams {
    let mut p = params.clone();
    p.tensors.get_mut(name).expect("known parameter").data[k] += delta;
    p
}

/// Compares `grads` with central differences of `loss` at `n_samples`
/// random parameter entries, cycling over tensors so each is covered.
///
/// A draw is used only when the central difference at step `h` agrees
/// with the one at `h/2` within tolerance; otherwise the loss has a kink
/// inside the stencil and the difference quotient is not a derivative.
pub fn check_gradients(
    params: &ModelParams,
    grads: &Gradients,
    loss: impl Fn(&ModelParams) -> Result<f64>,
    n_samples: usize,
    seed: u64,
    tol: f64,
) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names: Vec<&String> = params.tensors.keys().collect();
    names.shuffle(&mut rng);
    let mut samples = Vec::with_capacity(n_samples);
    let mut nonsmooth = 0;
    let mut draw = 0usize;
    let max_draws = 20 * n_samples.max(1);
    while samples.len() < n_samples && draw < max_draws {
        let name = names[draw % names.len()];
        draw += 1;
        let k = rng.gen_range(0..params.tensors[name].len());
        let theta = params.tensors[name].data[k];
        let h = REL_STEP * theta.abs().max(1.0);
        let quotient = |h: f64| -> Result<f64> {
            Ok((loss(&perturbed(params, name, k, h))? - loss(&perturbed(params, name, k, -h))?) / (2.0 * h))
        };
        let fd = quotient(h)?;
        let fd_half = quotient(0.5 * h)?;
        if (fd - fd_half).abs() > tol * fd.abs().max(fd_half.abs()) + ABS_FLOOR {
            nonsmooth += 1;
            continue;
        }
        samples.push(GradSample {
            name: name.clone(),
            index: k,
            fd,
            ad: grads[name][k],
        });
    }
    Ok(GradcheckReport {
        samples,
        nonsmooth_draws: nonsmooth,
        requested: n_samples,
        tolerance: tol,
    })
}

/// Gradient audit of the full scene objective for one loss variant.
/// Head kernels are redrawn at unit scale so both heads carry signal.
#[allow(clippy::too_many_arguments)]
pub fn objective_gradcheck(
    scene: &Scene,
    mcfg: &ModelConfig,
    variant: Variant,
    epoch: usize,
    pcfg: &PhysicsConfig,
    n_samples: usize,
    seed: u64,
    tol: f64,
) -> Result<GradcheckReport> {
    let weights = LossWeights {
        variant,
        ..Default::default()
    };
    let mut params = init_params(mcfg);
    params.norm = NormStats::from_scenes(std::slice::from_ref(scene))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
    for name in ["head.mu.w", "head.var.w"] {
        if let Some(t) = params.tensors.get_mut(name) {
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    if let Some(b) = params.tensors.get_mut("head.mu.b") {
        // Centre predicted depth near the water threshold so the dice and
        // physics terms are active.
        b.data[0] = 0.3;
    }
    let (_, grads) = scene_objective(&params, scene, mcfg, epoch, &weights, pcfg, true)?;
    let grads = grads.expect("gradient requested");
    // The gate sees the variance as a constant, so the oracle freezes it
    // at the base point.
    let frozen = forward(&params, &scene.sar_vh, &scene.dem, mcfg)?.sigma2;
    check_gradients(
        &params,
        &grads,
        |p| Ok(objective_with_gate(p, scene, mcfg, epoch, &weights, pcfg, false, frozen.as_ref())?.0.total),
        n_samples,
        seed,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            width: 4,
            modes: 2,
            depth_levels: 2,
            probabilistic: true,
            sigma_floor: 1e-6,
            rng_seed: 9,
        }
    }

    #[test]
    fn objective_gradients_match_for_every_variant() {
        let scene = generate_scene(&SceneConfig {
            grid_size: 16,
            terrain_correlation_length: 3.0,
            rng_seed: 4,
            ..Default::default()
        })
        .unwrap();
        let pcfg = PhysicsConfig::default();
        for (variant, epoch) in [
            (Variant::BaselineMse, 0),
            (Variant::StabilizedMse, 10),
            (Variant::UncertaintyAware, 2),
            (Variant::UncertaintyAware, 20),
        ] {
            let r = objective_gradcheck(&scene, &tiny(), variant, epoch, &pcfg, 30, 1, 1e-3).unwrap();
            assert!(r.passed(), "{variant} e{epoch}: max rel {:.3e} {:?}", r.max_rel_err(), r.samples.iter().find(|s| !s.passes(1e-3)));
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let scene = generate_scene(&SceneConfig {
            grid_size: 16,
            rng_seed: 4,
            ..Default::default()
        })
        .unwrap();
        let cfg = tiny();
        let mut p = init_params(&cfg);
        p.norm = NormStats::from_scenes(std::slice::from_ref(&scene)).unwrap();
        let w = LossWeights::default();
        let pcfg = PhysicsConfig::default();
        let (_, g) = scene_objective(&p, &scene, &cfg, 0, &w, &pcfg, true).unwrap();
        let mut g = g.unwrap();
        g.values_mut().for_each(|v| v.iter_mut().for_each(|x| *x = 1.5 * *x + 1e-3));
        let r = check_gradients(&p, &g, |q| Ok(scene_objective(q, &scene, &cfg, 0, &w, &pcfg, false)?.0.total), 10, 0, 1e-3).unwrap();
        assert!(!r.passed());
    }
}
