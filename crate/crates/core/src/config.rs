//! Strict `section.key = value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{LossWeights, Variant};
use crate::model::ModelConfig;
use crate::physics::{MaskSource, PhysicsConfig};
use crate::scene::SceneConfig;
use crate::train::TrainConfig;

/// Configuration of the desk-scale standard suite used by the shipped
/// experiment recipes.
pub const STANDARD_SUITE: &str = include_str!("../configs/standard_suite.cfg");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub enum Experiment {
    Synth,
    #[default]
    Train,
    Shock,
    Ablation,
    Ensemble,
    Calibrate,
    Gradcheck,
    Report,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::Synth,
        Experiment::Train,
        Experiment::Shock,
        Experiment::Ablation,
        Experiment::Ensemble,
        Experiment::Calibrate,
        Experiment::Gradcheck,
        Experiment::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Synth => "synth",
            Experiment::Train => "train",
            Experiment::Shock => "shock",
            Experiment::Ablation => "ablation",
            Experiment::Ensemble => "ensemble",
            Experiment::Calibrate => "calibrate",
            Experiment::Gradcheck => "gradcheck",
            Experiment::Report => "report",
        }
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment `{s}`"))
    }
}

/// Experiment-level settings shared by the recipes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub output_dir: PathBuf,
    pub experiment: Experiment,
    /// Base seed for repeated runs; repeat `r` uses `seed + r` for both
    /// model initialization and shuffling.
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    /// Validation scene seeds start at `scene.rng_seed + val_seed_offset`.
    pub val_seed_offset: u64,
    pub synth_scenes: usize,
    pub shock_seeds: usize,
    pub ablation_seeds: usize,
    pub variants: Vec<Variant>,
    pub ensemble_size: usize,
    pub calibration_bins: usize,
    /// m² per dB² when mapping the true speckle variance to depth units.
    pub oracle_scale: f64,
    pub gradcheck_samples: usize,
    pub gradcheck_tolerance: f64,
    /// Prior run directory consumed by `calibrate`.
    pub source_dir: Option<PathBuf>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            experiment: Experiment::default(),
            seed: 0,
            n_train: 24,
            n_val: 8,
            val_seed_offset: 1000,
            synth_scenes: 8,
            shock_seeds: 5,
            ablation_seeds: 3,
            variants: Variant::ALL.to_vec(),
            ensemble_size: 3,
            calibration_bins: 20,
            oracle_scale: 1e-3,
            gradcheck_samples: 50,
            gradcheck_tolerance: 1e-3,
            source_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub physics: PhysicsConfig,
    pub loss: LossWeights,
    pub run: RunSettings,
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn mask_source(v: &str) -> std::result::Result<MaskSource, String> {
    match v {
        "truth" => Ok(MaskSource::Truth),
        "predicted" => Ok(MaskSource::Predicted),
        _ => Err("expected truth or predicted".into()),
    }
}

fn mask_source_name(m: MaskSource) -> &'static str {
    match m {
        MaskSource::Truth => "truth",
        MaskSource::Predicted => "predicted",
    }
}

fn variant_list(v: &str) -> std::result::Result<Vec<Variant>, String> {
    let list = v
        .split(',')
        .map(|s| s.trim().parse::<Variant>())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if list.is_empty() {
        return Err("expected at least one variant".into());
    }
    Ok(list)
}

impl RunConfig {
    /// The standard desk-scale suite.
    pub fn standard_suite() -> Self {
        Self::parse_str(STANDARD_SUITE).expect("shipped suite config parses")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingConfigFile(path.into())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::parse_str(&text)
    }

    /// Parses config text over the defaults; later lines override earlier ones.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(Error::MalformedLine { line })?;
            let (key, value) = (key.trim(), value.trim());
            if !key.contains('.') {
                return Err(Error::MalformedLine { line });
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one `section.key`; `line` is only used for error messages.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let bad = |reason: String| Error::MalformedValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
            reason,
        };
        macro_rules! assign {
            ($field:expr, $parse:expr) => {
                $field = $parse(value).map_err(bad)?
            };
        }
        let (s, p, m, t, l, r) = (
            &mut self.scene,
            &mut self.physics,
            &mut self.model,
            &mut self.train,
            &mut self.loss,
            &mut self.run,
        );
        match key {
            "scene.grid_size" => assign!(s.grid_size, num),
            "scene.spacing" => assign!(s.spacing, num),
            "scene.terrain_amplitude" => assign!(s.terrain_amplitude, num),
            "scene.terrain_correlation_length" => assign!(s.terrain_correlation_length, num),
            "scene.wse_level" => assign!(s.wse_level, num),
            "scene.seed_count" => assign!(s.seed_count, num),
            "scene.looks_land" => assign!(s.looks_land, num),
            "scene.looks_water" => assign!(s.looks_water, num),
            "scene.shadow_azimuth" => assign!(s.shadow_azimuth, num),
            "scene.backscatter_land_db" => assign!(s.backscatter_land_db, num),
            "scene.backscatter_water_db" => assign!(s.backscatter_water_db, num),
            "scene.rng_seed" => assign!(s.rng_seed, num),

            "model.width" => assign!(m.width, num),
            "model.modes" => assign!(m.modes, num),
            "model.depth_levels" => assign!(m.depth_levels, num),
            "model.probabilistic" => assign!(m.probabilistic, boolean),
            "model.sigma_floor" => assign!(m.sigma_floor, num),
            "model.rng_seed" => assign!(m.rng_seed, num),

            "train.lr_max" => assign!(t.lr_max, num),
            "train.lr_min" => assign!(t.lr_min, num),
            "train.weight_decay" => assign!(t.weight_decay, num),
            "train.beta1" => assign!(t.beta1, num),
            "train.beta2" => assign!(t.beta2, num),
            "train.adam_eps" => assign!(t.adam_eps, num),
            "train.epochs" => assign!(t.epochs, num),
            "train.batch_size" => assign!(t.batch_size, num),
            "train.t0" => assign!(t.t0, num),
            "train.t_mult" => assign!(t.t_mult, num),
            "train.early_stop_patience" => assign!(t.early_stop_patience, num),
            "train.rng_seed" => assign!(t.rng_seed, num),
            "train.variant" => assign!(t.variant, num),

            "physics.manning_n" => assign!(p.manning_n, num),
            "physics.e_warm" => assign!(p.e_warm, num),
            "physics.e_ramp" => assign!(p.e_ramp, num),
            "physics.lambda_max" => assign!(p.lambda_max, num),
            "physics.gate_epsilon" => assign!(p.gate_epsilon, num),
            "physics.slope_floor" => assign!(p.slope_floor, num),
            "physics.mask_source" => assign!(p.mask_source, mask_source),

            "loss.w_nll" => assign!(l.w_nll, num),
            "loss.w_dice" => assign!(l.w_dice, num),
            "loss.tau_w" => assign!(l.tau_w, num),
            "loss.temp" => assign!(l.temp, num),
            "loss.dice_eps" => assign!(l.dice_eps, num),

            "run.output_dir" => r.output_dir = PathBuf::from(value),
            "run.experiment" => assign!(r.experiment, num),
            "run.seed" => assign!(r.seed, num),
            "run.n_train" => assign!(r.n_train, num),
            "run.n_val" => assign!(r.n_val, num),
            "run.val_seed_offset" => assign!(r.val_seed_offset, num),
            "run.synth_scenes" => assign!(r.synth_scenes, num),
            "run.shock_seeds" => assign!(r.shock_seeds, num),
            "run.ablation_seeds" => assign!(r.ablation_seeds, num),
            "run.variants" => assign!(r.variants, variant_list),
            "run.ensemble_size" => assign!(r.ensemble_size, num),
            "run.calibration_bins" => assign!(r.calibration_bins, num),
            "run.oracle_scale" => assign!(r.oracle_scale, num),
            "run.gradcheck_samples" => assign!(r.gradcheck_samples, num),
            "run.gradcheck_tolerance" => assign!(r.gradcheck_tolerance, num),
            "run.source_dir" => r.source_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => {
                return Err(Error::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.physics.validate()?;
        self.loss.validate()?;
        let r = &self.run;
        if r.n_train == 0 || r.n_val == 0 {
            return Err(Error::InvalidConfig("run.n_train and run.n_val must be >= 1".into()));
        }
        if (r.n_train as u64) > r.val_seed_offset {
            return Err(Error::InvalidConfig(
                "run.val_seed_offset must be >= run.n_train so train and validation seeds are disjoint".into(),
            ));
        }
        if r.shock_seeds == 0 || r.ablation_seeds == 0 || r.ensemble_size == 0 {
            return Err(Error::InvalidConfig(
                "run.shock_seeds, run.ablation_seeds and run.ensemble_size must be >= 1".into(),
            ));
        }
        if r.calibration_bins < 2 {
            return Err(Error::InvalidConfig("run.calibration_bins must be >= 2".into()));
        }
        if !(r.oracle_scale > 0.0 && r.gradcheck_tolerance > 0.0) {
            return Err(Error::InvalidConfig(
                "run.oracle_scale and run.gradcheck_tolerance must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a form `parse_str` accepts.
    pub fn to_config_string(&self) -> String {
        let (m, t, p, l, r) = (&self.model, &self.train, &self.physics, &self.loss, &self.run);
        let mut out = scene_manifest(&self.scene);
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("model.width", m.width.to_string());
        kv("model.modes", m.modes.to_string());
        kv("model.depth_levels", m.depth_levels.to_string());
        kv("model.probabilistic", m.probabilistic.to_string());
        kv("model.sigma_floor", m.sigma_floor.to_string());
        kv("model.rng_seed", m.rng_seed.to_string());
        kv("train.lr_max", t.lr_max.to_string());
        kv("train.lr_min", t.lr_min.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.beta1", t.beta1.to_string());
        kv("train.beta2", t.beta2.to_string());
        kv("train.adam_eps", t.adam_eps.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.t0", t.t0.to_string());
        kv("train.t_mult", t.t_mult.to_string());
        kv("train.early_stop_patience", t.early_stop_patience.to_string());
        kv("train.rng_seed", t.rng_seed.to_string());
        kv("train.variant", t.variant.to_string());
        kv("physics.manning_n", p.manning_n.to_string());
        kv("physics.e_warm", p.e_warm.to_string());
        kv("physics.e_ramp", p.e_ramp.to_string());
        kv("physics.lambda_max", p.lambda_max.to_string());
        kv("physics.gate_epsilon", p.gate_epsilon.to_string());
        kv("physics.slope_floor", p.slope_floor.to_string());
        kv("physics.mask_source", mask_source_name(p.mask_source).to_string());
        kv("loss.w_nll", l.w_nll.to_string());
        kv("loss.w_dice", l.w_dice.to_string());
        kv("loss.tau_w", l.tau_w.to_string());
        kv("loss.temp", l.temp.to_string());
        kv("loss.dice_eps", l.dice_eps.to_string());
        kv("run.output_dir", r.output_dir.display().to_string());
        kv("run.experiment", r.experiment.to_string());
        kv("run.seed", r.seed.to_string());
        kv("run.n_train", r.n_train.to_string());
        kv("run.n_val", r.n_val.to_string());
        kv("run.val_seed_offset", r.val_seed_offset.to_string());
        kv("run.synth_scenes", r.synth_scenes.to_string());
        kv("run.shock_seeds", r.shock_seeds.to_string());
        kv("run.ablation_seeds", r.ablation_seeds.to_string());
        let variants: Vec<&str> = r.variants.iter().map(|v| v.name()).collect();
        kv("run.variants", variants.join(","));
        kv("run.ensemble_size", r.ensemble_size.to_string());
        kv("run.calibration_bins", r.calibration_bins.to_string());
        kv("run.oracle_scale", r.oracle_scale.to_string());
        kv("run.gradcheck_samples", r.gradcheck_samples.to_string());
        kv("run.gradcheck_tolerance", r.gradcheck_tolerance.to_string());
        kv(
            "run.source_dir",
            r.source_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        out
    }
}

/// `scene.*` lines echoing a scene configuration.
pub fn scene_manifest(s: &SceneConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "scene.{k} = {v}");
    };
    kv("grid_size", s.grid_size.to_string());
    kv("spacing", s.spacing.to_string());
    kv("terrain_amplitude", s.terrain_amplitude.to_string());
    kv("terrain_correlation_length", s.terrain_correlation_length.to_string());
    kv("wse_level", s.wse_level.to_string());
    kv("seed_count", s.seed_count.to_string());
    kv("looks_land", s.looks_land.to_string());
    kv("looks_water", s.looks_water.to_string());
    kv("shadow_azimuth", s.shadow_azimuth.to_string());
    kv("backscatter_land_db", s.backscatter_land_db.to_string());
    kv("backscatter_water_db", s.backscatter_water_db.to_string());
    kv("rng_seed", s.rng_seed.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse_str("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse_str("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn single_key() {
        let c = RunConfig::parse_str("physics.e_warm = 5").unwrap();
        assert_eq!(c.physics.e_warm, 5);
        let c = RunConfig::parse_str("physics.e_warm = 7 # trailing comment").unwrap();
        assert_eq!(c.physics.e_warm, 7);
    }

    #[test]
    fn errors_name_lines() {
        match RunConfig::parse_str("physics.e_warm = banana") {
            Err(e @ Error::MalformedValue { line: 1, .. }) => assert!(e.to_string().starts_with("line 1:")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            RunConfig::parse_str("\nphysics.e_wrm = 5"),
            Err(Error::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse_str("# c\n\njust words"),
            Err(Error::MalformedLine { line: 3 })
        ));
        assert!(matches!(RunConfig::parse_str("epochs = 3"), Err(Error::MalformedLine { line: 1 })));
        assert!(matches!(
            RunConfig::from_file(Path::new("/nonexistent/run.cfg")),
            Err(Error::MissingConfigFile(_))
        ));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse_str("scene.grid_size = 8").is_err());
        assert!(RunConfig::parse_str("train.lr_min = 1").is_err());
        assert!(RunConfig::parse_str("run.variants = baseline_mse,nope").is_err());
        assert!(RunConfig::parse_str("model.probabilistic = yes").is_err());
    }

    #[test]
    fn echo_round_trip() {
        let mut c = RunConfig::standard_suite();
        c.run.source_dir = Some(PathBuf::from("runs/ensemble-x"));
        c.run.variants = vec![Variant::UncertaintyAware, Variant::UncertaintyAware];
        c.physics.mask_source = MaskSource::Predicted;
        c.loss.temp = 0.1 + 0.2;
        let text = c.to_config_string();
        assert_eq!(RunConfig::parse_str(&text).unwrap(), c);
        assert_eq!(RunConfig::parse_str(&RunConfig::default().to_config_string()).unwrap(), RunConfig::default());
    }

    #[test]
    fn every_echoed_key_is_accepted() {
        let text = RunConfig::default().to_config_string();
        for (i, line) in text.lines().enumerate() {
            let (k, v) = line.split_once(" = ").unwrap();
            let mut c = RunConfig::default();
            c.set(k, v, i + 1).unwrap();
        }
    }
}
