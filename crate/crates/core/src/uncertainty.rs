//! Deep ensembles, total-variance decomposition and variance calibration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Field2D;
use crate::losses::LossWeights;
use crate::model::{forward, ModelConfig, ModelParams};
use crate::physics::PhysicsConfig;
use crate::scene::Scene;
use crate::special::student_t_two_sided_p;
use crate::train::{train, TrainConfig, TrainHistory};

/// Default number of equal-count calibration bins.
pub const DEFAULT_BINS: usize = 20;

/// Member predictions for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub mu: Vec<Field2D>,
    pub sigma2: Vec<Field2D>,
}

impl EnsembleResult {
    pub fn new(mu: Vec<Field2D>, sigma2: Vec<Field2D>) -> Result<Self> {
        if mu.is_empty() || mu.len() != sigma2.len() {
            return Err(Error::InvalidConfig(format!(
                "ensemble needs M >= 1 matching members, got {} means and {} variances",
                mu.len(),
                sigma2.len()
            )));
        }
        let dims = mu[0].dims();
        for f in mu.iter().chain(&sigma2) {
            if f.dims() != dims {
                return Err(Error::DimensionMismatch {
                    left: dims,
                    right: f.dims(),
                });
            }
        }
        for s in &sigma2 {
            if let Some((index, &value)) = s.values().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(Error::NonPositiveVariance { index, value });
            }
        }
        Ok(Self { mu, sigma2 })
    }

    pub fn members(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub aleatoric: Field2D,
    pub epistemic: Field2D,
    pub total: Field2D,
    pub mu_star: Field2D,
    pub epistemic_ratio: f64,
}

/// Law-of-total-variance split; the epistemic term uses divisor M.
pub fn decompose(ens: &EnsembleResult) -> Decomposition {
    let m = ens.members() as f64;
    let (rows, cols) = ens.mu[0].dims();
    let spacing = ens.mu[0].spacing();
    let n = rows * cols;
    let mut mu_star = vec![0.0; n];
    let mut aleatoric = vec![0.0; n];
    for (mu, s2) in ens.mu.iter().zip(&ens.sigma2) {
        for i in 0..n {
            mu_star[i] += mu.values()[i];
            aleatoric[i] += s2.values()[i];
        }
    }
    for i in 0..n {
        mu_star[i] /= m;
        aleatoric[i] /= m;
    }
    let mut epistemic = vec![0.0; n];
    for mu in &ens.mu {
        for i in 0..n {
            let d = mu.values()[i] - mu_star[i];
            epistemic[i] += d * d;
        }
    }
    for e in &mut epistemic {
        *e /= m;
    }
    let total: Vec<f64> = aleatoric.iter().zip(&epistemic).map(|(a, e)| a + e).collect();
    let epistemic_ratio = ratio(epistemic.iter().sum(), total.iter().sum());
    let field = |v: Vec<f64>| Field2D::from_vec(rows, cols, spacing, v).expect("dimensions fixed above");
    Decomposition {
        aleatoric: field(aleatoric),
        epistemic: field(epistemic),
        total: field(total),
        mu_star: field(mu_star),
        epistemic_ratio,
    }
}

/// mean(epistemic)/mean(total) pooled over every cell of every scene.
pub fn pooled_epistemic_ratio(decs: &[Decomposition]) -> f64 {
    let epi: f64 = decs.iter().flat_map(|d| d.epistemic.values()).sum();
    let tot: f64 = decs.iter().flat_map(|d| d.total.values()).sum();
    ratio(epi, tot)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        (num / den).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// One trained member plus its history.
#[derive(Debug, Clone)]
pub struct Member {
    pub seed: u64,
    pub params: ModelParams,
    pub history: TrainHistory,
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub members: Vec<Member>,
    pub per_scene: Vec<EnsembleResult>,
}

/// Trains `m` members differing only in seed (`base + index` for both model
/// init and shuffling) and collects their predictions on `scenes_val`.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble(
    scenes_train: &[Scene],
    scenes_val: &[Scene],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    pcfg: &PhysicsConfig,
    weights: &LossWeights,
    m: usize,
) -> Result<EnsembleRun> {
    if m == 0 {
        return Err(Error::InvalidConfig("ensemble size M must be >= 1".into()));
    }
    if !mcfg.probabilistic {
        return Err(Error::InvalidConfig("ensembles need model.probabilistic = true".into()));
    }
    let members = (0..m as u64)
        .into_par_iter()
        .map(|k| {
            let seed = tcfg.rng_seed.wrapping_add(k);
            let mc = ModelConfig {
                rng_seed: mcfg.rng_seed.wrapping_add(k),
                ..mcfg.clone()
            };
            let tc = TrainConfig {
                rng_seed: seed,
                ..tcfg.clone()
            };
            let (params, history) = train(scenes_train, scenes_val, &mc, &tc, pcfg, weights)?;
            Ok(Member { seed, params, history })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_scene = predict_ensemble(members.iter().map(|m| &m.params), scenes_val, mcfg)?;
    Ok(EnsembleRun { members, per_scene })
}

/// Runs every member on every scene.
pub fn predict_ensemble<'a>(
    members: impl IntoIterator<Item = &'a ModelParams>,
    scenes: &[Scene],
    mcfg: &ModelConfig,
) -> Result<Vec<EnsembleResult>> {
    let members: Vec<&ModelParams> = members.into_iter().collect();
    scenes
        .iter()
        .map(|s| {
            let mut mu = Vec::with_capacity(members.len());
            let mut sigma2 = Vec::with_capacity(members.len());
            for p in &members {
                let pred = forward(p, &s.sar_vh, &s.dem, mcfg)?;
                mu.push(pred.mu);
                sigma2.push(pred.sigma2.ok_or(Error::MissingVariance("ensemble member has no variance head"))?);
            }
            EnsembleResult::new(mu, sigma2)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub mean_var: f64,
    pub mse: f64,
    pub sem: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binning {
    pub bins: Vec<CalibrationBin>,
    /// Set when every predicted variance is identical and the cells were
    /// collapsed into one bin.
    pub degenerate: bool,
}

/// Equal-count bins over the pooled cells, ordered by predicted variance.
/// Ties keep the original cell order.
pub fn calibration_bins(sigma2_pred: &[Field2D], err2: &[Field2D], b: usize) -> Result<Binning> {
    if b < 2 {
        return Err(Error::InvalidConfig("calibration needs at least 2 bins".into()));
    }
    if sigma2_pred.len() != err2.len() {
        return Err(Error::InvalidConfig(format!(
            "{} variance maps but {} error maps",
            sigma2_pred.len(),
            err2.len()
        )));
    }
    let mut cells = Vec::new();
    for (s, e) in sigma2_pred.iter().zip(err2) {
        if s.dims() != e.dims() {
            return Err(Error::DimensionMismatch {
                left: s.dims(),
                right: e.dims(),
            });
        }
        cells.extend(s.values().iter().copied().zip(e.values().iter().copied()));
    }
    if cells.len() < b {
        return Err(Error::TooFewValues {
            needed: b,
            got: cells.len(),
        });
    }
    let first = cells[0].0;
    if cells.iter().all(|c| c.0 == first) {
        return Ok(Binning {
            bins: vec![summarize(&cells)],
            degenerate: true,
        });
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = cells.len();
    let bins = (0..b).map(|k| summarize(&cells[k * n / b..(k + 1) * n / b])).collect();
    Ok(Binning {
        bins,
        degenerate: false,
    })
}

fn summarize(cells: &[(f64, f64)]) -> CalibrationBin {
    let n = cells.len() as f64;
    let mean_var = cells.iter().map(|c| c.0).sum::<f64>() / n;
    let mse = cells.iter().map(|c| c.1).sum::<f64>() / n;
    let sem = if cells.len() > 1 {
        let var = cells.iter().map(|c| (c.1 - mse).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    CalibrationBin {
        mean_var,
        mse,
        sem,
        count: cells.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub p_value: f64,
}

/// Closed-form simple linear regression with a two-sided t test on the slope.
pub fn ols_fit(x: &[f64], y: &[f64]) -> Result<OlsFit> {
    if x.len() != y.len() {
        return Err(Error::InvalidConfig(format!("x has {} values, y has {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::TooFewValues { needed: 3, got: n });
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::ZeroVariancePredictor);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy > 0.0 { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 0.0 };
    let p_value = if slope == 0.0 {
        1.0
    } else {
        let se = (ss_res / (nf - 2.0) / sxx).sqrt();
        student_t_two_sided_p(slope / se, nf - 2.0)
    };
    Ok(OlsFit {
        slope,
        intercept,
        r_squared,
        p_value,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub fit: OlsFit,
}

/// Bins then regresses binned MSE on binned mean variance.
pub fn calibrate(sigma2_pred: &[Field2D], err2: &[Field2D], b: usize) -> Result<CalibrationReport> {
    let binning = calibration_bins(sigma2_pred, err2, b)?;
    if binning.degenerate {
        return Err(Error::ZeroVariancePredictor);
    }
    let x: Vec<f64> = binning.bins.iter().map(|b| b.mean_var).collect();
    let y: Vec<f64> = binning.bins.iter().map(|b| b.mse).collect();
    let fit = ols_fit(&x, &y)?;
    Ok(CalibrationReport {
        bins: binning.bins,
        fit,
    })
}

/// Calibration of an ensemble against true depth, using aleatoric variance
/// as the predictor and squared error of the ensemble mean as the response.
pub fn ensemble_calibration(decs: &[Decomposition], scenes: &[Scene], b: usize) -> Result<CalibrationReport> {
    let mut err2 = Vec::with_capacity(decs.len());
    for (d, s) in decs.iter().zip(scenes) {
        err2.push(d.mu_star.zip_map(&s.depth_true, |m, y| (y - m).powi(2))?);
    }
    let sigma2: Vec<Field2D> = decs.iter().map(|d| d.aleatoric.clone()).collect();
    calibrate(&sigma2, &err2, b)
}

/// Known-noise oracle: the prediction is the true depth, the predicted
/// variance is `scale · noise_var_true` (dB² mapped to m²), and the
/// reference depth is perturbed by Gaussian noise of exactly that variance.
pub fn oracle_calibration(scenes: &[Scene], scale: f64, seed: u64, b: usize) -> Result<CalibrationReport> {
    if !(scale > 0.0) {
        return Err(Error::InvalidConfig("oracle variance scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sigma2 = Vec::with_capacity(scenes.len());
    let mut err2 = Vec::with_capacity(scenes.len());
    for s in scenes {
        let v = s.noise_var_true.map(|x| scale * x);
        let draws: Vec<f64> = v
            .values()
            .iter()
            .map(|var| {
                let z: f64 = StandardNormal.sample(&mut rng);
                var * z * z
            })
            .collect();
        let e = Field2D::from_vec(v.rows(), v.cols(), v.spacing(), draws)?;
        sigma2.push(v);
        err2.push(e);
    }
    calibrate(&sigma2, &err2, b)
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidConfig(format!("x has {} values, y has {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: x.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariancePredictor);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f(v: Vec<f64>) -> Field2D {
        Field2D::from_vec(1, v.len(), 1.0, v).unwrap()
    }

    #[test]
    fn decompose_examples() {
        let one = EnsembleResult::new(vec![f(vec![0.3, -1.0])], vec![f(vec![2.0, 0.5])]).unwrap();
        let d = decompose(&one);
        assert_eq!(d.epistemic.values(), &[0.0, 0.0]);
        assert_eq!(d.total.values(), &[2.0, 0.5]);
        assert_eq!(d.epistemic_ratio, 0.0);

        let same = EnsembleResult::new(vec![f(vec![1.5]); 3], vec![f(vec![0.7]); 3]).unwrap();
        let d = decompose(&same);
        assert!((d.aleatoric.values()[0] - 0.7).abs() < 1e-15);
        assert_eq!(d.epistemic.values()[0], 0.0);

        let two = EnsembleResult::new(vec![f(vec![0.0]), f(vec![2.0])], vec![f(vec![1.0]), f(vec![1.0])]).unwrap();
        let d = decompose(&two);
        assert_eq!(d.mu_star.values()[0], 1.0);
        assert_eq!(d.aleatoric.values()[0], 1.0);
        assert_eq!(d.epistemic.values()[0], 1.0);
        assert_eq!(d.total.values()[0], 2.0);
        assert_eq!(d.epistemic_ratio, 0.5);
    }

    #[test]
    fn ensemble_rejects_bad_members() {
        assert!(EnsembleResult::new(vec![], vec![]).is_err());
        assert!(EnsembleResult::new(vec![f(vec![0.0])], vec![f(vec![0.0])]).is_err());
        assert!(EnsembleResult::new(vec![f(vec![0.0]), f(vec![0.0, 1.0])], vec![f(vec![1.0]); 2]).is_err());
    }

    fn members() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        (1usize..6, 1usize..10).prop_flat_map(|(m, n)| {
            (
                prop::collection::vec(prop::collection::vec(-5.0f64..5.0, n), m),
                prop::collection::vec(prop::collection::vec(1e-3f64..5.0, n), m),
            )
        })
    }

    fn ens(mu: &[Vec<f64>], s2: &[Vec<f64>]) -> EnsembleResult {
        EnsembleResult::new(mu.iter().cloned().map(f).collect(), s2.iter().cloned().map(f).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn decomposition_invariants((mu, s2) in members(), c in 0.1f64..4.0) {
            let d = decompose(&ens(&mu, &s2));
            for i in 0..d.total.len() {
                let (a, e, t) = (d.aleatoric.values()[i], d.epistemic.values()[i], d.total.values()[i]);
                prop_assert!(a >= 0.0 && e >= 0.0);
                prop_assert!((t - (a + e)).abs() <= 1e-12 * t.max(1.0));
            }
            prop_assert!((0.0..=1.0).contains(&d.epistemic_ratio));

            let mut rmu = mu.clone();
            let mut rs2 = s2.clone();
            rmu.reverse();
            rs2.reverse();
            let r = decompose(&ens(&rmu, &rs2));
            for i in 0..d.total.len() {
                prop_assert!((r.epistemic.values()[i] - d.epistemic.values()[i]).abs() <= 1e-12);
                prop_assert!((r.aleatoric.values()[i] - d.aleatoric.values()[i]).abs() <= 1e-12);
            }

            let smu: Vec<Vec<f64>> = mu.iter().map(|v| v.iter().map(|x| c * x).collect()).collect();
            let ss2: Vec<Vec<f64>> = s2.iter().map(|v| v.iter().map(|x| c * x).collect()).collect();
            let scaled = decompose(&ens(&smu, &ss2));
            for i in 0..d.total.len() {
                let e = d.epistemic.values()[i];
                prop_assert!((scaled.epistemic.values()[i] - c * c * e).abs() <= 1e-10 * (1.0 + e));
                let a = d.aleatoric.values()[i];
                prop_assert!((scaled.aleatoric.values()[i] - c * a).abs() <= 1e-12 * (1.0 + a));
            }
        }
    }

    #[test]
    fn binning_edge_cases() {
        let b = calibration_bins(&[f(vec![0.5; 40])], &[f((0..40).map(f64::from).collect())], 20).unwrap();
        assert!(b.degenerate);
        assert_eq!(b.bins.len(), 1);
        assert_eq!(b.bins[0].count, 40);

        let b = calibration_bins(&[f(vec![2.0, 1.0])], &[f(vec![3.0, 5.0])], 2).unwrap();
        assert!(!b.degenerate);
        assert_eq!(b.bins.len(), 2);
        assert_eq!((b.bins[0].mean_var, b.bins[0].mse, b.bins[0].sem, b.bins[0].count), (1.0, 5.0, 0.0, 1));
        assert_eq!((b.bins[1].mean_var, b.bins[1].mse, b.bins[1].sem), (2.0, 3.0, 0.0));

        assert!(matches!(
            calibration_bins(&[f(vec![1.0, 2.0])], &[f(vec![1.0, 2.0])], 3),
            Err(Error::TooFewValues { .. })
        ));
    }

    #[test]
    fn binning_ties_keep_cell_order() {
        let s = f(vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
        let e = f(vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0]);
        let b = calibration_bins(&[s], &[e], 3).unwrap();
        let mses: Vec<f64> = b.bins.iter().map(|b| b.mse).collect();
        assert_eq!(mses, vec![15.0, 35.0, 55.0]);
    }

    #[test]
    fn calibrated_stream_bins_track_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 20_000;
        let var: Vec<f64> = (0..n).map(|i| 0.05 + 2.0 * (i as f64 / n as f64)).collect();
        let err: Vec<f64> = var
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v * z * z
            })
            .collect();
        let b = calibration_bins(&[f(var)], &[f(err)], 20).unwrap();
        let sum: usize = b.bins.iter().map(|b| b.count).sum();
        assert_eq!(sum, n);
        assert!(b.bins.windows(2).all(|w| w[0].mean_var <= w[1].mean_var));
        let within = b.bins.iter().filter(|b| (b.mse - b.mean_var).abs() <= 3.0 * b.sem).count();
        assert!(within >= 18, "{within} of 20 bins within 3 SEM");
    }

    #[test]
    fn ols_examples() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let fit = ols_fit(&x, &y).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12 && (fit.intercept - 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!(fit.p_value < 1e-6);

        let fit = ols_fit(&x, &[3.0; 5]).unwrap();
        assert_eq!((fit.slope, fit.r_squared, fit.p_value), (0.0, 0.0, 1.0));

        assert!(matches!(ols_fit(&[1.0; 4], &x[..4]), Err(Error::ZeroVariancePredictor)));
        assert!(matches!(ols_fit(&x[..2], &x[..2]), Err(Error::TooFewValues { .. })));
    }

    /// Trapezoid integral of the Student-t density from |t| outward.
    fn t_tail_oracle(t: f64, dof: f64) -> f64 {
        use crate::special::ln_gamma;
        let c = (ln_gamma(0.5 * (dof + 1.0)) - ln_gamma(0.5 * dof)).exp() / (dof * std::f64::consts::PI).sqrt();
        let dens = |x: f64| c * (1.0 + x * x / dof).powf(-0.5 * (dof + 1.0));
        let h = 1e-6;
        let steps = (t / h).round() as usize;
        let mut inner = 0.5 * (dens(0.0) + dens(t));
        for i in 1..steps {
            inner += dens(i as f64 * h);
        }
        1.0 - 2.0 * inner * h
    }

    #[test]
    fn t_test_p_value_matches_integration() {
        let oracle = t_tail_oracle(2.0, 10.0);
        assert!((oracle - 0.0734).abs() < 5e-5);
        // Construct data whose slope t statistic is exactly 2 with 10 dof.
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let resid: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let base = ols_fit(&x, &resid).unwrap();
        let r: Vec<f64> = x.iter().zip(&resid).map(|(a, e)| e - base.intercept - base.slope * a).collect();
        let sxx: f64 = x.iter().map(|v| (v - 5.5).powi(2)).sum();
        let ss: f64 = r.iter().map(|v| v * v).sum();
        let slope = 2.0 * (ss / 10.0 / sxx).sqrt();
        let y: Vec<f64> = x.iter().zip(&r).map(|(a, e)| slope * a + e).collect();
        let fit = ols_fit(&x, &y).unwrap();
        assert!((fit.slope - slope).abs() < 1e-12);
        assert!((fit.p_value - oracle).abs() < 1e-8, "{} vs {oracle}", fit.p_value);
    }

    #[test]
    fn ols_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = 3 + (rand::Rng::gen_range(&mut rng, 0..20usize));
            let x: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
            // [n Σx; Σx Σx²] [a; b] = [Σy; Σxy] solved by Cramer's rule.
            let (sx, sxx, sy, sxy) = x.iter().zip(&y).fold((0.0, 0.0, 0.0, 0.0), |acc, (a, b)| {
                (acc.0 + a, acc.1 + a * a, acc.2 + b, acc.3 + a * b)
            });
            let det = n as f64 * sxx - sx * sx;
            let a = (sy * sxx - sx * sxy) / det;
            let b = (n as f64 * sxy - sx * sy) / det;
            let fit = ols_fit(&x, &y).unwrap();
            assert!((fit.slope - b).abs() <= 1e-10 * b.abs().max(1.0));
            assert!((fit.intercept - a).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&x, &[1.0; 4]).is_err());
    }

    #[test]
    fn oracle_predictor_is_calibrated() {
        use crate::scene::{generate_scene, SceneConfig};
        let scenes: Vec<Scene> = (0..8)
            .map(|s| {
                generate_scene(&SceneConfig {
                    rng_seed: 1000 + s,
                    ..Default::default()
                })
                .unwrap()
            })
            .collect();
        let r = oracle_calibration(&scenes, 1e-3, 7, DEFAULT_BINS).unwrap();
        assert!((r.fit.slope - 1.0).abs() <= 0.05, "slope {}", r.fit.slope);
    }
}
