//! Experiment recipes behind the command-line entry point. Every command
//! writes into a fresh timestamped directory under `run.output_dir`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{Experiment, RunConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{objective_gradcheck, GradcheckReport};
use crate::io::{write_grid, write_scene};
use crate::losses::Variant;
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use crate::scene::{generate_scene, Scene, SceneConfig};
use crate::train::{evaluate, train, MetricsRecord, TrainConfig, TrainHistory};
use crate::uncertainty::{
    decompose, ensemble_calibration, oracle_calibration, pearson, pooled_epistemic_ratio, predict_ensemble,
    run_ensemble, CalibrationReport, Decomposition, EnsembleResult,
};

/// Epoch compared against epoch 0 in the baseline arm of the shock study.
pub const SHOCK_EPOCH: usize = 5;
/// Epochs after the end of the ramp at which the warm arm is read back.
pub const SETTLE_EPOCHS: usize = 5;

const ORACLE_SEED_SALT: u64 = 0x0A11_CE5E_ED00;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Creates `<output_dir>/<experiment>-<timestamp>[-k]` and writes the
/// resolved config echo into it.
pub fn create_run_dir(cfg: &RunConfig, experiment: Experiment) -> Result<PathBuf> {
    let root = &cfg.run.output_dir;
    mkdir(root)?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%.6f");
    let base = format!("{experiment}-{stamp}");
    let mut k = 0;
    let dir = loop {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => break dir,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => k += 1,
            Err(e) => return Err(Error::io(dir, e)),
        }
    };
    let mut echo = cfg.clone();
    echo.run.experiment = experiment;
    write_text(&dir.join("config.cfg"), &echo.to_config_string())?;
    Ok(dir)
}

fn scene_at(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    generate_scene(&SceneConfig {
        rng_seed: seed,
        ..cfg.clone()
    })
}

/// Training and validation scenes with disjoint seed ranges.
pub fn scene_sets(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let base = cfg.scene.rng_seed;
    let train = (0..cfg.run.n_train as u64)
        .map(|i| scene_at(&cfg.scene, base.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    let val = (0..cfg.run.n_val as u64)
        .map(|i| scene_at(&cfg.scene, base.wrapping_add(cfg.run.val_seed_offset + i)))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, val))
}

/// Model and training configs for one repeat of `variant` with `seed`.
/// The variance head is present only for probabilistic variants.
pub fn repeat_configs(cfg: &RunConfig, variant: Variant, seed: u64) -> (ModelConfig, TrainConfig) {
    let m = ModelConfig {
        probabilistic: variant.is_probabilistic(),
        rng_seed: seed,
        ..cfg.model.clone()
    };
    let t = TrainConfig {
        variant,
        rng_seed: seed,
        ..cfg.train.clone()
    };
    (m, t)
}

fn train_repeat(
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
    scenes: &(Vec<Scene>, Vec<Scene>),
    train_override: impl Fn(&mut TrainConfig),
) -> Result<(ModelConfig, ModelParams, TrainHistory)> {
    let (m, mut t) = repeat_configs(cfg, variant, seed);
    train_override(&mut t);
    let (p, h) = train(&scenes.0, &scenes.1, &m, &t, &cfg.physics, &cfg.loss)?;
    log::info!(
        "{variant} seed {seed}: {} epochs, best val IoU {:.4}",
        h.len(),
        h.best_val_iou().unwrap_or(f64::NAN)
    );
    Ok((m, p, h))
}

fn metrics_csv(m: &MetricsRecord) -> String {
    format!(
        "iou,f1,precision,recall,rmse,mae\n{},{},{},{},{},{}\n",
        m.iou, m.f1, m.precision, m.recall, m.rmse, m.mae
    )
}

// ---------------------------------------------------------------- synth

pub struct SynthSummary {
    pub run_dir: PathBuf,
    pub scene_dirs: Vec<PathBuf>,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    let run_dir = create_run_dir(cfg, Experiment::Synth)?;
    let mut scene_dirs = Vec::new();
    for i in 0..cfg.run.synth_scenes as u64 {
        let sc = SceneConfig {
            rng_seed: cfg.scene.rng_seed.wrapping_add(i),
            ..cfg.scene.clone()
        };
        let dir = run_dir.join(format!("scene_{i:04}"));
        write_scene(&dir, &generate_scene(&sc)?, &sc)?;
        scene_dirs.push(dir);
    }
    Ok(SynthSummary { run_dir, scene_dirs })
}

// ---------------------------------------------------------------- train

pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub history: TrainHistory,
    pub metrics: MetricsRecord,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let scenes = scene_sets(cfg)?;
    let run_dir = create_run_dir(cfg, Experiment::Train)?;
    let (p, h) = train(&scenes.0, &scenes.1, &cfg.model, &cfg.train, &cfg.physics, &cfg.loss)?;
    let metrics = evaluate(&p, &scenes.1, &cfg.model, &cfg.loss)?;
    save_checkpoint(&p, &cfg.model, &run_dir.join("model.hpnn"))?;
    write_text(&run_dir.join("history.csv"), &h.to_csv())?;
    write_text(&run_dir.join("metrics.csv"), &metrics_csv(&metrics))?;
    Ok(TrainSummary {
        run_dir,
        history: h,
        metrics,
    })
}

// ---------------------------------------------------------------- shock

#[derive(Debug, Clone, PartialEq)]
pub struct ShockRow {
    pub seed: u64,
    pub baseline_epoch0: f64,
    pub baseline_shock_epoch: f64,
    pub ratio: f64,
    pub warm_activation: f64,
    pub warm_post_ramp: f64,
    /// Baseline physics loss grew at least threefold.
    pub baseline_shock: bool,
    /// Warm arm physics loss did not exceed its activation value.
    pub warm_settled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShockVerdict {
    /// λ_max = 0: physics never enters either objective.
    NoShockPossible,
    Evaluated { shocked: usize, settled: usize, seeds: usize },
}

impl ShockVerdict {
    /// Both arms behave as expected in at least four of every five seeds.
    pub fn reproduced(&self) -> bool {
        match *self {
            ShockVerdict::NoShockPossible => false,
            ShockVerdict::Evaluated { shocked, settled, seeds } => 5 * shocked >= 4 * seeds && 5 * settled >= 4 * seeds,
        }
    }
}

impl std::fmt::Display for ShockVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShockVerdict::NoShockPossible => f.write_str("no shock possible"),
            ShockVerdict::Evaluated { shocked, settled, seeds } => write!(
                f,
                "baseline shock in {shocked}/{seeds} seeds; warm start settled in {settled}/{seeds} seeds; {}",
                if self.reproduced() { "reproduced" } else { "not reproduced" }
            ),
        }
    }
}

pub struct ShockSummary {
    pub run_dir: PathBuf,
    pub rows: Vec<ShockRow>,
    pub verdict: ShockVerdict,
    pub baseline: Vec<TrainHistory>,
    pub warm: Vec<TrainHistory>,
}

/// Number of epochs both shock arms run for.
pub fn shock_epochs(cfg: &RunConfig) -> usize {
    (cfg.physics.e_warm + cfg.physics.e_ramp + SETTLE_EPOCHS + 1).max(SHOCK_EPOCH + 1)
}

fn growth(from: f64, to: f64) -> f64 {
    if from > 0.0 {
        to / from
    } else if to > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// Baseline (physics at full weight from epoch 0) against the warm-start
/// arm on identical scenes and seeds. Early stopping is disabled so both
/// histories cover the readback epochs.
pub fn cmd_shock(cfg: &RunConfig) -> Result<ShockSummary> {
    let scenes = scene_sets(cfg)?;
    let run_dir = create_run_dir(cfg, Experiment::Shock)?;
    let epochs = shock_epochs(cfg);
    let no_early_stop = |t: &mut TrainConfig| {
        t.epochs = epochs;
        t.early_stop_patience = epochs;
    };
    let seeds: Vec<u64> = (0..cfg.run.shock_seeds as u64).map(|r| cfg.run.seed.wrapping_add(r)).collect();
    let jobs: Vec<(Variant, u64)> = seeds
        .iter()
        .flat_map(|&s| [(Variant::BaselineMse, s), (Variant::StabilizedMse, s)])
        .collect();
    let histories = jobs
        .par_iter()
        .map(|&(v, s)| train_repeat(cfg, v, s, &scenes, no_early_stop).map(|r| r.2))
        .collect::<Result<Vec<_>>>()?;
    let (mut baseline, mut warm) = (Vec::new(), Vec::new());
    for (&(v, s), h) in jobs.iter().zip(histories) {
        let name = match v {
            Variant::BaselineMse => format!("baseline_seed{s}.csv"),
            _ => format!("warm_seed{s}.csv"),
        };
        write_text(&run_dir.join(name), &h.to_csv())?;
        match v {
            Variant::BaselineMse => baseline.push(h),
            _ => warm.push(h),
        }
    }
    let activation = cfg.physics.e_warm;
    let settle = cfg.physics.e_warm + cfg.physics.e_ramp + SETTLE_EPOCHS;
    let rows: Vec<ShockRow> = seeds
        .iter()
        .zip(baseline.iter().zip(&warm))
        .map(|(&seed, (b, w))| {
            let p = |h: &TrainHistory, e: usize| h.rows[e].physics_loss();
            let (b0, b5) = (p(b, 0), p(b, SHOCK_EPOCH));
            let (wa, ws) = (p(w, activation), p(w, settle));
            let ratio = growth(b0, b5);
            ShockRow {
                seed,
                baseline_epoch0: b0,
                baseline_shock_epoch: b5,
                ratio,
                warm_activation: wa,
                warm_post_ramp: ws,
                baseline_shock: ratio >= 3.0,
                warm_settled: ws <= wa,
            }
        })
        .collect();
    let verdict = if cfg.physics.lambda_max == 0.0 {
        ShockVerdict::NoShockPossible
    } else {
        ShockVerdict::Evaluated {
            shocked: rows.iter().filter(|r| r.baseline_shock).count(),
            settled: rows.iter().filter(|r| r.warm_settled).count(),
            seeds: rows.len(),
        }
    };
    let mut csv = String::from(
        "seed,baseline_epoch0,baseline_epoch5,ratio,warm_activation,warm_post_ramp,baseline_shock,warm_settled\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.seed,
            r.baseline_epoch0,
            r.baseline_shock_epoch,
            r.ratio,
            r.warm_activation,
            r.warm_post_ramp,
            r.baseline_shock,
            r.warm_settled
        );
    }
    write_text(&run_dir.join("shock_summary.csv"), &csv)?;
    write_text(&run_dir.join("verdict.txt"), &format!("{verdict}\n"))?;
    Ok(ShockSummary {
        run_dir,
        rows,
        verdict,
        baseline,
        warm,
    })
}

// ---------------------------------------------------------------- ablation

pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub best_iou: f64,
    pub model: ModelConfig,
    pub params: ModelParams,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean_iou: f64,
    pub stdev_iou: f64,
    pub cv: f64,
    /// (mean − baseline mean) / baseline mean; NaN without a baseline row.
    pub rel_improvement: f64,
}

pub struct AblationSummary {
    pub run_dir: PathBuf,
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

impl AblationSummary {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_ablation(cfg: &RunConfig) -> Result<AblationSummary> {
    let scenes = scene_sets(cfg)?;
    let run_dir = create_run_dir(cfg, Experiment::Ablation)?;
    let seeds: Vec<u64> = (0..cfg.run.ablation_seeds as u64).map(|r| cfg.run.seed.wrapping_add(r)).collect();
    let mut distinct: Vec<Variant> = Vec::new();
    for v in &cfg.run.variants {
        if !distinct.contains(v) {
            distinct.push(*v);
        }
    }
    let jobs: Vec<(Variant, u64)> = distinct.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let (model, params, history) = train_repeat(cfg, variant, seed, &scenes, |_| {})?;
            Ok(AblationRun {
                variant,
                seed,
                best_iou: history.best_val_iou().unwrap_or(0.0),
                model,
                params,
                history,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_run = String::from("variant,seed,best_val_iou,epochs_run\n");
    for r in &runs {
        let stem = format!("{}_seed{}", r.variant, r.seed);
        write_text(&run_dir.join(format!("history_{stem}.csv")), &r.history.to_csv())?;
        save_checkpoint(&r.params, &r.model, &run_dir.join(format!("{stem}.hpnn")))?;
        let _ = writeln!(per_run, "{},{},{},{}", r.variant, r.seed, r.best_iou, r.history.len());
    }
    write_text(&run_dir.join("ablation_runs.csv"), &per_run)?;

    let stats = |v: Variant| {
        let ious: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(|r| r.best_iou).collect();
        mean_stdev(&ious)
    };
    let baseline_mean = distinct
        .contains(&Variant::BaselineMse)
        .then(|| stats(Variant::BaselineMse).0);
    let rows: Vec<AblationRow> = cfg
        .run
        .variants
        .iter()
        .map(|&v| {
            let (mean, sd) = stats(v);
            AblationRow {
                variant: v,
                mean_iou: mean,
                stdev_iou: sd,
                cv: if mean != 0.0 { sd / mean } else { 0.0 },
                rel_improvement: baseline_mean.map_or(f64::NAN, |b| if mean == b { 0.0 } else { (mean - b) / b }),
            }
        })
        .collect();
    let mut table = String::from("variant,mean_iou,stdev_iou,cv,rel_improvement_vs_baseline\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "{},{},{},{},{}",
            r.variant, r.mean_iou, r.stdev_iou, r.cv, r.rel_improvement
        );
    }
    write_text(&run_dir.join("ablation.csv"), &table)?;
    Ok(AblationSummary { run_dir, runs, rows })
}

// ---------------------------------------------------------------- ensemble

pub struct EnsembleAnalysis {
    pub decompositions: Vec<Decomposition>,
    pub epistemic_ratio: f64,
    /// Largest |total − (aleatoric + epistemic)| over all cells.
    pub additivity_error: f64,
    /// Pearson correlation of the aleatoric map with the true speckle
    /// variance over all validation cells.
    pub aleatoric_noise_corr: f64,
    pub calibration: CalibrationReport,
}

pub fn analyze_ensemble(per_scene: &[EnsembleResult], scenes: &[Scene], bins: usize) -> Result<EnsembleAnalysis> {
    let decompositions: Vec<Decomposition> = per_scene.iter().map(decompose).collect();
    let additivity_error = decompositions
        .iter()
        .flat_map(|d| {
            d.total
                .values()
                .iter()
                .zip(d.aleatoric.values().iter().zip(d.epistemic.values()))
                .map(|(t, (a, e))| (t - (a + e)).abs())
        })
        .fold(0.0, f64::max);
    let alea: Vec<f64> = decompositions.iter().flat_map(|d| d.aleatoric.values().to_vec()).collect();
    let noise: Vec<f64> = scenes.iter().flat_map(|s| s.noise_var_true.values().to_vec()).collect();
    let aleatoric_noise_corr = pearson(&alea, &noise)?;
    let calibration = ensemble_calibration(&decompositions, scenes, bins)?;
    Ok(EnsembleAnalysis {
        epistemic_ratio: pooled_epistemic_ratio(&decompositions),
        decompositions,
        additivity_error,
        aleatoric_noise_corr,
        calibration,
    })
}

fn calibration_csvs(dir: &Path, prefix: &str, c: &CalibrationReport) -> Result<()> {
    let mut bins = String::from("bin,mean_var,mse,sem,count\n");
    for (i, b) in c.bins.iter().enumerate() {
        let _ = writeln!(bins, "{i},{},{},{},{}", b.mean_var, b.mse, b.sem, b.count);
    }
    write_text(&dir.join(format!("{prefix}_bins.csv")), &bins)?;
    let f = &c.fit;
    write_text(
        &dir.join(format!("{prefix}_fit.csv")),
        &format!(
            "slope,intercept,r_squared,p_value\n{},{},{},{}\n",
            f.slope, f.intercept, f.r_squared, f.p_value
        ),
    )
}

fn write_analysis(dir: &Path, a: &EnsembleAnalysis) -> Result<()> {
    let mut summary = String::from("scene,aleatoric_mean,epistemic_mean,total_mean,epistemic_ratio\n");
    for (i, d) in a.decompositions.iter().enumerate() {
        let sub = dir.join("decomposition").join(format!("scene_{i:04}"));
        mkdir(&sub)?;
        for (name, f) in [
            ("aleatoric", &d.aleatoric),
            ("epistemic", &d.epistemic),
            ("total", &d.total),
            ("mu_star", &d.mu_star),
        ] {
            write_grid(&sub.join(format!("{name}.f32f")), f)?;
        }
        let _ = writeln!(
            summary,
            "{i},{},{},{},{}",
            d.aleatoric.mean(),
            d.epistemic.mean(),
            d.total.mean(),
            d.epistemic_ratio
        );
    }
    let _ = writeln!(summary, "pooled,,,,{}", a.epistemic_ratio);
    write_text(&dir.join("decomposition.csv"), &summary)?;
    write_text(
        &dir.join("aleatoric_vs_noise.csv"),
        &format!("pearson_r,additivity_error\n{},{}\n", a.aleatoric_noise_corr, a.additivity_error),
    )?;
    calibration_csvs(dir, "calibration", &a.calibration)
}

pub struct EnsembleSummary {
    pub run_dir: PathBuf,
    pub analysis: EnsembleAnalysis,
}

fn probabilistic_configs(cfg: &RunConfig) -> Result<(ModelConfig, TrainConfig)> {
    if !cfg.train.variant.is_probabilistic() {
        return Err(Error::InvalidConfig(format!(
            "ensembles need a probabilistic train.variant, got {}",
            cfg.train.variant
        )));
    }
    Ok(repeat_configs(cfg, cfg.train.variant, cfg.run.seed))
}

pub fn cmd_ensemble(cfg: &RunConfig) -> Result<EnsembleSummary> {
    let (model, tcfg) = probabilistic_configs(cfg)?;
    let (train_s, val_s) = scene_sets(cfg)?;
    let run_dir = create_run_dir(cfg, Experiment::Ensemble)?;
    let run = run_ensemble(&train_s, &val_s, &model, &tcfg, &cfg.physics, &cfg.loss, cfg.run.ensemble_size)?;
    let members_dir = run_dir.join("members");
    mkdir(&members_dir)?;
    for (k, m) in run.members.iter().enumerate() {
        let mc = ModelConfig {
            rng_seed: m.seed,
            ..model.clone()
        };
        save_checkpoint(&m.params, &mc, &members_dir.join(format!("member_{k:02}.hpnn")))?;
        write_text(&members_dir.join(format!("history_{k:02}.csv")), &m.history.to_csv())?;
    }
    let analysis = analyze_ensemble(&run.per_scene, &val_s, cfg.run.calibration_bins)?;
    write_analysis(&run_dir, &analysis)?;
    Ok(EnsembleSummary { run_dir, analysis })
}

// ---------------------------------------------------------------- calibrate

pub struct CalibrateSummary {
    pub run_dir: PathBuf,
    pub analysis: EnsembleAnalysis,
    pub oracle: CalibrationReport,
}

/// Member checkpoints of a prior ensemble run, in member order.
pub fn load_members(source: &Path) -> Result<(Vec<ModelParams>, ModelConfig)> {
    let dir = source.join("members");
    let entries = fs::read_dir(&dir).map_err(|_| Error::MissingArtifact(dir.clone()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "hpnn"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::MissingArtifact(dir.join("member_00.hpnn")));
    }
    let mut params = Vec::with_capacity(paths.len());
    let mut model = None;
    for p in &paths {
        let (pp, mc) = load_checkpoint(p)?;
        model.get_or_insert(mc);
        params.push(pp);
    }
    Ok((params, model.expect("at least one member")))
}

/// Calibration of a prior ensemble run on this config's validation scenes,
/// plus the known-noise oracle predictor.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<CalibrateSummary> {
    let source = cfg
        .run
        .source_dir
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("calibrate needs run.source_dir (an ensemble run directory)".into()))?;
    let (members, model) = load_members(source)?;
    let (_, val_s) = scene_sets(cfg)?;
    let run_dir = create_run_dir(cfg, Experiment::Calibrate)?;
    let per_scene = predict_ensemble(&members, &val_s, &model)?;
    let analysis = analyze_ensemble(&per_scene, &val_s, cfg.run.calibration_bins)?;
    write_analysis(&run_dir, &analysis)?;
    let oracle = oracle_calibration(
        &val_s,
        cfg.run.oracle_scale,
        cfg.run.seed ^ ORACLE_SEED_SALT,
        cfg.run.calibration_bins,
    )?;
    calibration_csvs(&run_dir, "oracle", &oracle)?;
    Ok(CalibrateSummary {
        run_dir,
        analysis,
        oracle,
    })
}

// ---------------------------------------------------------------- gradcheck

pub struct GradcheckSummary {
    pub run_dir: PathBuf,
    pub reports: Vec<(Variant, GradcheckReport)>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|(_, r)| r.passed())
    }
}

/// Tiny 16×16 configuration used for finite-difference checks.
pub fn gradcheck_model(seed: u64) -> ModelConfig {
    ModelConfig {
        width: 4,
        modes: 2,
        depth_levels: 2,
        probabilistic: true,
        sigma_floor: 1e-6,
        rng_seed: seed,
    }
}

/// Finite-difference check of every loss variant with physics at full
/// weight (and the variance gate active for the uncertainty-aware loss).
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckSummary> {
    let scene = scene_at(
        &SceneConfig {
            grid_size: 16,
            ..cfg.scene.clone()
        },
        cfg.scene.rng_seed,
    )?;
    let run_dir = create_run_dir(cfg, Experiment::Gradcheck)?;
    let model = gradcheck_model(cfg.run.seed);
    let epoch = cfg.physics.e_warm + cfg.physics.e_ramp;
    let mut csv = String::from("variant,parameter,index,finite_difference,reverse_mode,rel_err,pass\n");
    let mut reports = Vec::new();
    for v in Variant::ALL {
        let r = objective_gradcheck(
            &scene,
            &model,
            v,
            epoch,
            &cfg.physics,
            cfg.run.gradcheck_samples,
            cfg.run.seed,
            cfg.run.gradcheck_tolerance,
        )?;
        for s in &r.samples {
            let _ = writeln!(
                csv,
                "{v},{},{},{},{},{},{}",
                s.name,
                s.index,
                s.fd,
                s.ad,
                s.rel_err(),
                s.passes(r.tolerance)
            );
        }
        log::info!(
            "gradcheck {v}: {} samples, max rel err {:.2e}, {} nonsmooth draws skipped",
            r.samples.len(),
            r.max_rel_err(),
            r.nonsmooth_draws
        );
        reports.push((v, r));
    }
    write_text(&run_dir.join("gradcheck.csv"), &csv)?;
    let summary = GradcheckSummary { run_dir, reports };
    write_text(
        &summary.run_dir.join("verdict.txt"),
        if summary.passed() { "pass\n" } else { "fail\n" },
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------- report

pub struct ReportSummary {
    pub run_dir: PathBuf,
    pub runs_found: usize,
    pub files: Vec<PathBuf>,
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .map(|t| t.lines().skip(1).map(str::to_string).collect())
        .unwrap_or_default()
}

/// Aggregates every prior run under `run.output_dir` into one CSV per
/// figure analog.
pub fn cmd_report(cfg: &RunConfig) -> Result<ReportSummary> {
    let root = &cfg.run.output_dir;
    let mut runs: Vec<(String, Experiment, PathBuf)> = Vec::new();
    if let Ok(entries) = fs::read_dir(root) {
        for e in entries.flatten() {
            let dir = e.path();
            let Ok(text) = fs::read_to_string(dir.join("config.cfg")) else {
                continue;
            };
            let Ok(rc) = RunConfig::parse_str(&text) else {
                continue;
            };
            if rc.run.experiment != Experiment::Report {
                let name = e.file_name().to_string_lossy().into_owned();
                runs.push((name, rc.run.experiment, dir));
            }
        }
    }
    if runs.is_empty() {
        return Err(Error::NoRunsFound(root.clone()));
    }
    runs.sort();
    let run_dir = create_run_dir(cfg, Experiment::Report)?;

    let mut curves = String::from("run,arm,seed,epoch,data_loss,dice_loss,mass_loss,smooth_loss,physics_weight,total_loss,val_iou,val_rmse\n");
    let mut bars = String::from("run,variant,mean_iou,stdev_iou,cv,rel_improvement_vs_baseline\n");
    let mut scatter = String::from("run,source,bin,mean_var,mse,sem,count\n");
    let mut grids = String::from("run,scene,aleatoric_mean,epistemic_mean,total_mean,epistemic_ratio,grid_dir\n");
    for (name, kind, dir) in &runs {
        match kind {
            Experiment::Shock => {
                let seeds = data_lines(&dir.join("shock_summary.csv"));
                for line in seeds {
                    let seed = line.split(',').next().unwrap_or_default().to_string();
                    for arm in ["baseline", "warm"] {
                        for row in data_lines(&dir.join(format!("{arm}_seed{seed}.csv"))) {
                            let _ = writeln!(curves, "{name},{arm},{seed},{row}");
                        }
                    }
                }
            }
            Experiment::Ablation => {
                for row in data_lines(&dir.join("ablation.csv")) {
                    let _ = writeln!(bars, "{name},{row}");
                }
            }
            Experiment::Ensemble | Experiment::Calibrate => {
                for (source, file) in [("model", "calibration_bins.csv"), ("oracle", "oracle_bins.csv")] {
                    for row in data_lines(&dir.join(file)) {
                        let _ = writeln!(scatter, "{name},{source},{row}");
                    }
                }
                for row in data_lines(&dir.join("decomposition.csv")) {
                    let scene = row.split(',').next().unwrap_or_default();
                    let grid_dir = if scene == "pooled" {
                        String::new()
                    } else {
                        format!("{name}/decomposition/scene_{scene:0>4}")
                    };
                    let _ = writeln!(grids, "{name},{row},{grid_dir}");
                }
            }
            _ => {}
        }
    }
    let mut files = Vec::new();
    for (file, text) in [
        ("fig3_4_physics_curves.csv", curves),
        ("fig5_ablation_bars.csv", bars),
        ("fig8_calibration_scatter.csv", scatter),
        ("fig9_decomposition_grids.csv", grids),
    ] {
        let p = run_dir.join(file);
        write_text(&p, &text)?;
        files.push(p);
    }
    let mut index = String::from("run,experiment\n");
    for (name, kind, _) in &runs {
        let _ = writeln!(index, "{name},{kind}");
    }
    write_text(&run_dir.join("runs.csv"), &index)?;
    Ok(ReportSummary {
        run_dir,
        runs_found: runs.len(),
        files,
    })
}

/// Dispatches `cfg.run.experiment`; returns whether the command's own
/// pass/fail verdict (gradient tolerance, shock reproduction) held.
pub fn run_experiment(cfg: &RunConfig) -> Result<(PathBuf, bool)> {
    Ok(match cfg.run.experiment {
        Experiment::Synth => (cmd_synth(cfg)?.run_dir, true),
        Experiment::Train => (cmd_train(cfg)?.run_dir, true),
        Experiment::Shock => {
            let s = cmd_shock(cfg)?;
            log::info!("shock: {}", s.verdict);
            (s.run_dir, true)
        }
        Experiment::Ablation => (cmd_ablation(cfg)?.run_dir, true),
        Experiment::Ensemble => (cmd_ensemble(cfg)?.run_dir, true),
        Experiment::Calibrate => (cmd_calibrate(cfg)?.run_dir, true),
        Experiment::Gradcheck => {
            let s = cmd_gradcheck(cfg)?;
            let ok = s.passed();
            (s.run_dir, ok)
        }
        Experiment::Report => (cmd_report(cfg)?.run_dir, true),
    })
}

