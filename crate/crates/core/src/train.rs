//! AdamW with cosine warm restarts, early stopping on validation IoU, and
//! per-epoch loss history.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::grid::Field2D;
use crate::losses::{loss_graph, LossBundle, LossWeights, Variant};
use crate::model::{
    collect_grads, forward, forward_graph, init_params, round_f32, Gradients, ModelConfig, ModelParams,
    NormStats,
};
use crate::physics::PhysicsConfig;
use crate::scene::Scene;

pub use crate::model::{load_checkpoint, save_checkpoint};

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub t0: usize,
    pub t_mult: usize,
    pub early_stop_patience: usize,
    pub rng_seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 70,
            batch_size: 4,
            t0: 10,
            t_mult: 2,
            early_stop_patience: 15,
            rng_seed: 0,
            variant: Variant::UncertaintyAware,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::InvalidConfig("need 0 < train.lr_min <= train.lr_max".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::InvalidConfig("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.t0 == 0 || self.t_mult == 0 {
            return Err(Error::InvalidConfig(
                "train.batch_size, train.t0 and train.t_mult must be >= 1".into(),
            ));
        }
        if !(self.adam_eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("train.adam_eps must be positive, weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, zero before the first step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Gradients,
    pub v: Gradients,
}

/// One decoupled-weight-decay Adam update. Updated values are rounded to
/// `f32` precision, the checkpoint storage type.
pub fn adamw_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, lr: f64, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, tensor) in params.tensors.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for k in 0..g.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            let theta = tensor.data[k];
            let next = theta - lr * m_hat / (v_hat.sqrt() + cfg.adam_eps) - lr * cfg.weight_decay * theta;
            tensor.data[k] = round_f32(next);
        }
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·t/T_i))`.
pub fn cosine_warm_restart_lr(t: f64, cycle_len: f64, cfg: &TrainConfig) -> f64 {
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t / cycle_len).cos())
}

/// Learning rate after `progress` epochs (fractional), following cycles of
/// length `t0·t_mult^i`.
pub fn scheduled_lr(progress: f64, cfg: &TrainConfig) -> f64 {
    let mut start = 0.0;
    let mut len = cfg.t0 as f64;
    while progress >= start + len {
        start += len;
        len *= cfg.t_mult as f64;
    }
    cosine_warm_restart_lr(progress - start, len, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// `num / den`, with 1 for an empty denominator when nothing is
    /// positive anywhere and 0 otherwise.
    fn ratio(&self, num: u64, den: u64) -> f64 {
        if den > 0 {
            num as f64 / den as f64
        } else if self.tp + self.fp + self.fn_ == 0 {
            1.0
        } else {
            0.0
        }
    }

    pub fn iou(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        self.ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub rmse: f64,
    pub mae: f64,
}

/// Segmentation metrics at `mu > tau_w` against `depth_true > tau_w`, and
/// depth errors over every cell, pooled across all pairs.
pub fn metrics_from_predictions<'a>(
    pairs: impl IntoIterator<Item = (&'a Field2D, &'a Field2D)>,
    tau_w: f64,
) -> Result<MetricsRecord> {
    let mut c = Confusion::default();
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (mu, truth) in pairs {
        crate::grid::check_dims(mu.dims(), truth.dims())?;
        for (&m, &y) in mu.values().iter().zip(truth.values()) {
            c.add(m > tau_w, y > tau_w);
            se += (m - y) * (m - y);
            ae += (m - y).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyScenes("evaluation"));
    }
    Ok(MetricsRecord {
        iou: c.iou(),
        f1: c.f1(),
        precision: c.precision(),
        recall: c.recall(),
        rmse: (se / n as f64).sqrt(),
        mae: ae / n as f64,
    })
}

pub fn evaluate(params: &ModelParams, scenes: &[Scene], mcfg: &ModelConfig, weights: &LossWeights) -> Result<MetricsRecord> {
    if scenes.is_empty() {
        return Err(Error::EmptyScenes("evaluation"));
    }
    let preds = scenes
        .iter()
        .map(|s| forward(params, &s.sar_vh, &s.dem, mcfg).map(|p| p.mu))
        .collect::<Result<Vec<_>>>()?;
    metrics_from_predictions(preds.iter().zip(scenes.iter().map(|s| &s.depth_true)), weights.tau_w)
}

/// Loss components for one scene and, when `want_grad`, their gradient.
pub fn scene_objective(
    params: &ModelParams,
    scene: &Scene,
    mcfg: &ModelConfig,
    epoch: usize,
    weights: &LossWeights,
    pcfg: &PhysicsConfig,
    want_grad: bool,
) -> Result<(LossBundle, Option<Gradients>)> {
    objective_with_gate(params, scene, mcfg, epoch, weights, pcfg, want_grad, None)
}

/// [`scene_objective`] with the physics gate evaluated at a fixed variance
/// field instead of the prediction. Its exact derivative equals the
/// stop-gradient adjoint of [`scene_objective`] at that variance.
#[allow(clippy::too_many_arguments)]
pub fn objective_with_gate(
    params: &ModelParams,
    scene: &Scene,
    mcfg: &ModelConfig,
    epoch: usize,
    weights: &LossWeights,
    pcfg: &PhysicsConfig,
    want_grad: bool,
    gate_sigma2: Option<&Field2D>,
) -> Result<(LossBundle, Option<Gradients>)> {
    let mut t = Tape::new();
    let g = forward_graph(&mut t, params, &scene.sar_vh, &scene.dem, mcfg, want_grad)?;
    let lv = loss_graph(&mut t, g.mu, g.sigma2, scene, epoch, weights, pcfg, gate_sigma2)?;
    let grads = want_grad.then(|| collect_grads(&t, lv.total, &g.params, params));
    Ok((lv.bundle(&t), grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub data_loss: f64,
    pub dice_loss: f64,
    pub mass_loss: f64,
    pub smooth_loss: f64,
    pub physics_weight: f64,
    pub total_loss: f64,
    pub val_iou: f64,
    pub val_rmse: f64,
}

impl HistoryRow {
    /// Unweighted physics residual: mass plus smoothness.
    pub fn physics_loss(&self) -> f64 {
        self.mass_loss + self.smooth_loss
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

pub const HISTORY_HEADER: &str = "epoch,data_loss,dice_loss,mass_loss,smooth_loss,physics_weight,total_loss,val_iou,val_rmse";

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.data_loss,
                r.dice_loss,
                r.mass_loss,
                r.smooth_loss,
                r.physics_weight,
                r.total_loss,
                r.val_iou,
                r.val_rmse
            );
        }
        s
    }

    pub fn best_val_iou(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.val_iou).fold(None, |acc, v| match acc {
            Some(a) if a >= v => Some(a),
            _ => Some(v),
        })
    }
}

fn add_scaled(acc: &mut Gradients, g: Gradients, scale: f64) {
    for (name, v) in g {
        let dst = acc.entry(name).or_insert_with(|| vec![0.0; v.len()]);
        for (d, x) in dst.iter_mut().zip(v) {
            *d += scale * x;
        }
    }
}

/// Trains from a fresh initialization and returns the parameters with the
/// best validation IoU together with the per-epoch history.
/// Starts the variance head at the squared error of the initial `μ ≈ 0`
/// prediction, i.e. the mean of `depth²` over the training set. From there
/// the NLL raises σ² where the error is large instead of lowering it
/// everywhere.
fn init_variance_bias(params: &mut ModelParams, scenes: &[Scene], floor: f64) {
    let (sum, n) = scenes.iter().flat_map(|s| s.depth_true.values()).fold((0.0, 0usize), |(s, n), d| (s + d * d, n + 1));
    let v0 = (sum / n as f64 - floor).max(1e-3);
    // softplus⁻¹(v) = ln(eᵛ − 1)
    let raw = round_f32(v0.exp_m1().ln());
    if let Some(b) = params.tensors.get_mut("head.var.b") {
        b.data.iter_mut().for_each(|x| *x = raw);
    }
}

pub fn train(
    scenes_train: &[Scene],
    scenes_val: &[Scene],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    pcfg: &PhysicsConfig,
    weights: &LossWeights,
) -> Result<(ModelParams, TrainHistory)> {
    mcfg.validate()?;
    tcfg.validate()?;
    pcfg.validate()?;
    weights.validate()?;
    if scenes_train.is_empty() {
        return Err(Error::EmptyScenes("training"));
    }
    if scenes_val.is_empty() {
        return Err(Error::EmptyScenes("validation"));
    }
    for s in scenes_train.iter().chain(scenes_val) {
        let (r, c) = s.dims();
        mcfg.check_grid(r, c)?;
    }
    if tcfg.variant.is_probabilistic() && !mcfg.probabilistic {
        return Err(Error::InvalidConfig(format!(
            "variant {} needs model.probabilistic = true",
            tcfg.variant
        )));
    }
    let weights = LossWeights {
        variant: tcfg.variant,
        ..weights.clone()
    };
    let mut params = init_params(mcfg);
    params.norm = NormStats::from_scenes(scenes_train)?;
    let mut history = TrainHistory::default();
    if tcfg.epochs == 0 {
        return Ok((params, history));
    }
    if mcfg.probabilistic {
        init_variance_bias(&mut params, scenes_train, mcfg.sigma_floor);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.rng_seed ^ SHUFFLE_SALT);
    let mut state = AdamState::default();
    let n = scenes_train.len();
    let n_batches = n.div_ceil(tcfg.batch_size);
    let mut best = (f64::NEG_INFINITY, params.clone());
    let mut since_best = 0;
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut sums = LossBundle::default();
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let mut batch: Vec<usize> = chunk.to_vec();
            batch.sort_unstable();
            let mut grads = Gradients::new();
            for &i in &batch {
                let (bundle, g) = scene_objective(&params, &scenes_train[i], mcfg, epoch, &weights, pcfg, true)?;
                sums.data_loss += bundle.data_loss;
                sums.dice_loss += bundle.dice_loss;
                sums.mass_loss += bundle.mass_loss;
                sums.smooth_loss += bundle.smooth_loss;
                sums.total += bundle.total;
                add_scaled(&mut grads, g.expect("gradient requested"), 1.0 / batch.len() as f64);
            }
            let lr = scheduled_lr(epoch as f64 + b as f64 / n_batches as f64, tcfg);
            adamw_step(&mut params, &grads, &mut state, lr, tcfg);
        }
        let val = evaluate(&params, scenes_val, mcfg, &weights)?;
        let inv = 1.0 / n as f64;
        history.rows.push(HistoryRow {
            epoch,
            data_loss: sums.data_loss * inv,
            dice_loss: sums.dice_loss * inv,
            mass_loss: sums.mass_loss * inv,
            smooth_loss: sums.smooth_loss * inv,
            physics_weight: weights.variant.physics_weight(epoch, pcfg),
            total_loss: sums.total * inv,
            val_iou: val.iou,
            val_rmse: val.rmse,
        });
        log::debug!(
            "{} epoch {epoch}: total {:.5} physics {:.5} val_iou {:.4}",
            weights.variant,
            sums.total * inv,
            (sums.mass_loss + sums.smooth_loss) * inv,
            val.iou
        );
        if val.iou > best.0 {
            best = (val.iou, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tcfg.early_stop_patience {
                break;
            }
        }
    }
    Ok((best.1, history))
}
