//! Synthetic flood scenes with known ground truth.
//!
//! A scene is built in three stages: a smoothed random terrain, a
//! hydrostatic flood fill from random seed cells, and a speckled SAR
//! backscatter image with an analytic per-cell noise variance.

use std::collections::VecDeque;
use std::f64::consts::LN_10;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{grad_central, BitMask2D, Field2D};
use crate::special::{digamma, trigamma};

/// Incidence angle of the simulated sensor, measured from vertical.
pub const INCIDENCE_DEG: f64 = 35.0;

/// `(10 / ln 10)²`: converts variance of `ln G` into variance of `10·log10 G`.
pub const DB_PER_NEPER_SQ: f64 = (10.0 / LN_10) * (10.0 / LN_10);

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub grid_size: usize,
    pub spacing: f64,
    pub terrain_amplitude: f64,
    pub terrain_correlation_length: f64,
    pub wse_level: f64,
    pub seed_count: usize,
    pub looks_land: f64,
    pub looks_water: f64,
    pub shadow_azimuth: f64,
    pub backscatter_land_db: f64,
    pub backscatter_water_db: f64,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid_size: 64,
            spacing: 1.0,
            terrain_amplitude: 4.0,
            terrain_correlation_length: 6.0,
            wse_level: 1.6,
            seed_count: 6,
            looks_land: 4.0,
            looks_water: 1.0,
            shadow_azimuth: 90.0,
            backscatter_land_db: -8.0,
            backscatter_water_db: -22.0,
            rng_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.grid_size < 16 {
            return bad(format!("scene.grid_size must be >= 16, got {}", self.grid_size));
        }
        if !(self.spacing > 0.0) {
            return bad(format!("scene.spacing must be positive, got {}", self.spacing));
        }
        if !(self.terrain_amplitude >= 0.0) {
            return bad("scene.terrain_amplitude must be nonnegative".into());
        }
        if !(self.terrain_correlation_length >= 0.0) {
            return bad("scene.terrain_correlation_length must be nonnegative".into());
        }
        if self.seed_count == 0 {
            return bad("scene.seed_count must be positive".into());
        }
        if !(self.looks_land >= 1.0 && self.looks_water >= 1.0) {
            return bad("scene looks must be >= 1".into());
        }
        if !(self.backscatter_water_db < self.backscatter_land_db) {
            return bad("scene.backscatter_water_db must be below backscatter_land_db".into());
        }
        Ok(())
    }

    fn stream(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng_seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

/// One synthetic observation plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub dem: Field2D,
    pub sar_vh: Field2D,
    pub depth_true: Field2D,
    pub water_mask: BitMask2D,
    /// Variance of the additive dB-domain speckle noise (dB²).
    pub noise_var_true: Field2D,
    pub shadow_mask: BitMask2D,
}

impl Scene {
    pub fn dims(&self) -> (usize, usize) {
        self.dem.dims()
    }
}

/// Separable Gaussian blur with reflective edges.
fn gaussian_blur(values: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let reflect = |k: isize| -> usize {
        let n = n as isize;
        let mut k = k;
        // Mirror about the edge cells until in range.
        loop {
            if k < 0 {
                k = -k - 1;
            } else if k >= n {
                k = 2 * n - k - 1;
            } else {
                return k as usize;
            }
        }
    };
    let mut tmp = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let jj = reflect(j as isize + t as isize - radius);
                acc += w * values[i * n + jj];
            }
            tmp[i * n + j] = acc / norm;
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let ii = reflect(i as isize + t as isize - radius);
                acc += w * tmp[ii * n + j];
            }
            out[i * n + j] = acc / norm;
        }
    }
    out
}

/// Random terrain: blurred white noise rescaled to the configured
/// peak-to-peak amplitude, plus a gentle tilt along x.
pub fn gen_dem(cfg: &SceneConfig) -> Result<Field2D> {
    cfg.validate()?;
    let n = cfg.grid_size;
    if cfg.terrain_amplitude == 0.0 {
        return Ok(Field2D::zeros(n, n, cfg.spacing));
    }
    let mut rng = cfg.stream(1);
    let noise: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let smooth = gaussian_blur(&noise, n, cfg.terrain_correlation_length);
    let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(f64::MIN_POSITIVE);
    let tilt = 0.001 * cfg.spacing * cfg.terrain_amplitude;
    Ok(Field2D::from_fn(n, n, cfg.spacing, |i, j| {
        (smooth[i * n + j] - lo) / range * cfg.terrain_amplitude + tilt * j as f64
    }))
}

/// 4-connected flood fill from `seeds` over cells below `wse_level`.
///
/// Seeds sitting at or above the water level start nothing; if no seed is
/// below it the result is an empty mask with zero depth.
pub fn flood_fill_depth(
    dem: &Field2D,
    wse_level: f64,
    seeds: &[(usize, usize)],
) -> Result<(Field2D, BitMask2D)> {
    let (rows, cols) = dem.dims();
    let mut mask = BitMask2D::new(rows, cols);
    let mut queue = VecDeque::new();
    for &(i, j) in seeds {
        if i >= rows || j >= cols {
            return Err(Error::InvalidConfig(format!(
                "seed ({i},{j}) outside {rows}x{cols} grid"
            )));
        }
        if dem.get(i, j) < wse_level && !mask.get(i, j) {
            mask.set(i, j, true);
            queue.push_back((i, j));
        }
    }
    while let Some((i, j)) = queue.pop_front() {
        let mut visit = |a: usize, b: usize| {
            if !mask.get(a, b) && dem.get(a, b) < wse_level {
                mask.set(a, b, true);
                queue.push_back((a, b));
            }
        };
        if i > 0 {
            visit(i - 1, j);
        }
        if i + 1 < rows {
            visit(i + 1, j);
        }
        if j > 0 {
            visit(i, j - 1);
        }
        if j + 1 < cols {
            visit(i, j + 1);
        }
    }
    let depth = Field2D::from_fn(rows, cols, dem.spacing(), |i, j| {
        if mask.get(i, j) {
            wse_level - dem.get(i, j)
        } else {
            0.0
        }
    });
    Ok((depth, mask))
}

/// Variance of `10·log10 G` for `G ~ Gamma(L, 1/L)`.
pub fn speckle_db_variance(looks: f64) -> f64 {
    DB_PER_NEPER_SQ * trigamma(looks)
}

/// Mean of `10·log10 G` for `G ~ Gamma(L, 1/L)` (always ≤ 0).
pub fn speckle_db_bias(looks: f64) -> f64 {
    10.0 / LN_10 * (digamma(looks) - looks.ln())
}

/// Cells hidden from the sensor by terrain along the look direction.
///
/// The surface height is terrain plus water depth. A cell is in shadow when
/// some cell between it and the sensor rises above the line of sight, which
/// climbs at `90° − incidence` from the horizontal.
pub fn radar_shadow(surface: &Field2D, azimuth_deg: f64) -> BitMask2D {
    let (rows, cols) = surface.dims();
    let az = azimuth_deg.to_radians();
    let (dc, dr) = (az.cos(), az.sin());
    let rise = (90.0 - INCIDENCE_DEG).to_radians().tan() * surface.spacing();
    BitMask2D::from_fn(rows, cols, |i, j| {
        let base = surface.get(i, j);
        let mut t = 1.0;
        loop {
            let r = (i as f64 - t * dr).round();
            let c = (j as f64 - t * dc).round();
            if r < 0.0 || c < 0.0 || r >= rows as f64 || c >= cols as f64 {
                return false;
            }
            if surface.get(r as usize, c as usize) > base + t * rise {
                return true;
            }
            t += 1.0;
        }
    })
}

/// Noise-free backscatter in dB, with shadowed cells at the water floor.
pub fn clean_backscatter_db(
    dem: &Field2D,
    depth: &Field2D,
    mask: &BitMask2D,
    cfg: &SceneConfig,
) -> Result<(Field2D, BitMask2D)> {
    crate::grid::check_dims(dem.dims(), depth.dims())?;
    crate::grid::check_dims(dem.dims(), mask.dims())?;
    let (sx, sy) = grad_central(dem)?;
    let surface = dem.zip_map(depth, |z, d| z + d)?;
    let shadow = radar_shadow(&surface, cfg.shadow_azimuth);
    let (rows, cols) = dem.dims();
    let beta = Field2D::from_fn(rows, cols, dem.spacing(), |i, j| {
        if shadow.get(i, j) || mask.get(i, j) {
            cfg.backscatter_water_db
        } else {
            let slope = sx.get(i, j).hypot(sy.get(i, j)).clamp(0.0, 1.0);
            cfg.backscatter_land_db + 4.0 * slope
        }
    });
    Ok((beta, shadow))
}

/// Speckled backscatter, its true dB-noise variance, and the shadow mask.
///
/// Speckle is multiplicative `Gamma(L, 1/L)`. Shadowed cells receive the
/// square of their speckle draw, which doubles the dB noise and so carries
/// four times the variance.
pub fn simulate_sar(
    dem: &Field2D,
    depth: &Field2D,
    mask: &BitMask2D,
    cfg: &SceneConfig,
) -> Result<(Field2D, Field2D, BitMask2D)> {
    cfg.validate()?;
    let (beta, shadow) = clean_backscatter_db(dem, depth, mask, cfg)?;
    let gamma_water = Gamma::new(cfg.looks_water, 1.0 / cfg.looks_water)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let gamma_land = Gamma::new(cfg.looks_land, 1.0 / cfg.looks_land)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let var_water = speckle_db_variance(cfg.looks_water);
    let var_land = speckle_db_variance(cfg.looks_land);

    let mut rng = cfg.stream(3);
    let (rows, cols) = dem.dims();
    let mut sar = Field2D::zeros(rows, cols, dem.spacing());
    let mut var = Field2D::zeros(rows, cols, dem.spacing());
    for i in 0..rows {
        for j in 0..cols {
            let water = mask.get(i, j);
            let g: f64 = if water {
                gamma_water.sample(&mut rng)
            } else {
                gamma_land.sample(&mut rng)
            };
            // Guard against a zero draw at L = 1.
            let g = g.max(1e-300);
            let base_var = if water { var_water } else { var_land };
            let intensity = 10f64.powf(beta.get(i, j) / 10.0);
            if shadow.get(i, j) {
                sar.set(i, j, 10.0 * (intensity * g * g).log10());
                var.set(i, j, 4.0 * base_var);
            } else {
                sar.set(i, j, 10.0 * (intensity * g).log10());
                var.set(i, j, base_var);
            }
        }
    }
    Ok((sar, var, shadow))
}

/// Seeds for the flood fill, uniform over the grid.
pub fn draw_seeds(cfg: &SceneConfig) -> Vec<(usize, usize)> {
    let mut rng = cfg.stream(2);
    (0..cfg.seed_count)
        .map(|_| (rng.gen_range(0..cfg.grid_size), rng.gen_range(0..cfg.grid_size)))
        .collect()
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    let dem = gen_dem(cfg)?;
    let seeds = draw_seeds(cfg);
    let (depth_true, water_mask) = flood_fill_depth(&dem, cfg.wse_level, &seeds)?;
    let (sar_vh, noise_var_true, shadow_mask) = simulate_sar(&dem, &depth_true, &water_mask, cfg)?;
    Ok(Scene {
        dem,
        sar_vh,
        depth_true,
        water_mask,
        noise_var_true,
        shadow_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn mean_sq_gradient(f: &Field2D) -> f64 {
        let (dx, dy) = grad_central(f).unwrap();
        dx.values()
            .iter()
            .zip(dy.values())
            .map(|(a, b)| a * a + b * b)
            .sum::<f64>()
            / f.len() as f64
    }

    #[test]
    fn zero_amplitude_is_flat() {
        let cfg = SceneConfig {
            terrain_amplitude: 0.0,
            ..Default::default()
        };
        let dem = gen_dem(&cfg).unwrap();
        assert!(dem.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dem_is_deterministic() {
        let cfg = SceneConfig {
            rng_seed: 17,
            ..Default::default()
        };
        assert_eq!(gen_dem(&cfg).unwrap(), gen_dem(&cfg).unwrap());
    }

    #[test]
    fn longer_correlation_is_smoother() {
        let rough = SceneConfig {
            terrain_correlation_length: 1.0,
            rng_seed: 5,
            ..Default::default()
        };
        let smooth = SceneConfig {
            terrain_correlation_length: 4.0,
            ..rough.clone()
        };
        let a = mean_sq_gradient(&gen_dem(&smooth).unwrap());
        let b = mean_sq_gradient(&gen_dem(&rough).unwrap());
        assert!(a < b, "smooth {a} rough {b}");
    }

    #[test]
    fn dem_has_configured_range() {
        let cfg = SceneConfig::default();
        let dem = gen_dem(&cfg).unwrap();
        assert!(dem.min() >= 0.0);
        let tilt = 0.001 * cfg.terrain_amplitude * (cfg.grid_size - 1) as f64;
        assert!(dem.max() <= cfg.terrain_amplitude + tilt + 1e-12);
    }

    #[test]
    fn flat_dem_floods_everywhere() {
        let dem = Field2D::zeros(16, 16, 1.0);
        let (depth, mask) = flood_fill_depth(&dem, 1.0, &[(3, 4)]).unwrap();
        assert_eq!(mask.popcount(), 256);
        assert!(depth.values().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn water_below_terrain_gives_no_flood() {
        let dem = Field2D::from_fn(16, 16, 1.0, |i, j| 1.0 + (i + j) as f64);
        let (depth, mask) = flood_fill_depth(&dem, 0.5, &[(0, 0), (8, 8)]).unwrap();
        assert!(mask.is_empty());
        assert!(depth.values().iter().all(|&d| d == 0.0));
    }

    /// Exhaustive oracle: repeatedly grow the set by any below-level cell
    /// adjacent to it until nothing changes.
    fn fixed_point_fill(dem: &Field2D, level: f64, seed: (usize, usize)) -> BitMask2D {
        let (r, c) = dem.dims();
        let mut m = BitMask2D::new(r, c);
        if dem.get(seed.0, seed.1) < level {
            m.set(seed.0, seed.1, true);
        }
        loop {
            let mut changed = false;
            for i in 0..r {
                for j in 0..c {
                    if m.get(i, j) || dem.get(i, j) >= level {
                        continue;
                    }
                    let adj = (i > 0 && m.get(i - 1, j))
                        || (i + 1 < r && m.get(i + 1, j))
                        || (j > 0 && m.get(i, j - 1))
                        || (j + 1 < c && m.get(i, j + 1));
                    if adj {
                        m.set(i, j, true);
                        changed = true;
                    }
                }
            }
            if !changed {
                return m;
            }
        }
    }

    #[test]
    fn bowl_fill_matches_oracle() {
        let c = 8usize;
        let dem = Field2D::from_fn(17, 17, 1.0, |i, j| {
            (i as f64 - c as f64).abs().max((j as f64 - c as f64).abs())
        });
        let (depth, mask) = flood_fill_depth(&dem, 2.0, &[(c, c)]).unwrap();
        assert_eq!(mask, fixed_point_fill(&dem, 2.0, (c, c)));
        assert_eq!(mask.popcount(), 9);
        for i in 0..17 {
            for j in 0..17 {
                let want = if mask.get(i, j) { 2.0 - dem.get(i, j) } else { 0.0 };
                assert_eq!(depth.get(i, j), want);
            }
        }
    }

    #[test]
    fn disconnected_basin_stays_dry() {
        // Two pits separated by a ridge; only one is seeded.
        let dem = Field2D::from_fn(16, 16, 1.0, |_, j| if j == 8 { 5.0 } else { 0.0 });
        let (_, mask) = flood_fill_depth(&dem, 1.0, &[(2, 2)]).unwrap();
        assert_eq!(mask.popcount(), 16 * 8);
        assert!(!mask.get(2, 12));
    }

    #[test]
    fn huge_looks_recover_clean_backscatter() {
        let cfg = SceneConfig {
            looks_land: 1e6,
            looks_water: 1e6,
            rng_seed: 9,
            ..Default::default()
        };
        let dem = gen_dem(&cfg).unwrap();
        let (depth, mask) = flood_fill_depth(&dem, cfg.wse_level, &draw_seeds(&cfg)).unwrap();
        let (sar, var, _) = simulate_sar(&dem, &depth, &mask, &cfg).unwrap();
        let (beta, _) = clean_backscatter_db(&dem, &depth, &mask, &cfg).unwrap();
        for k in 0..sar.len() {
            assert!((sar.values()[k] - beta.values()[k]).abs() < 0.1);
            assert!(var.values()[k] < 1e-4);
        }
    }

    #[test]
    fn single_look_variance_matches_trigamma() {
        let want = DB_PER_NEPER_SQ * PI * PI / 6.0;
        assert!((speckle_db_variance(1.0) - want).abs() < 1e-10);
        assert!((want - 31.0).abs() < 0.1);

        // Empirical check by sampling.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Gamma::<f64>::new(1.0, 1.0).unwrap();
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| 10.0 * g.sample(&mut rng).log10()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - want).abs() / want < 0.01, "var {var} want {want}");
        assert!((mean - speckle_db_bias(1.0)).abs() < 0.02);
    }

    #[test]
    fn flat_terrain_casts_no_shadow() {
        let cfg = SceneConfig {
            terrain_amplitude: 0.0,
            ..Default::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        assert!(scene.shadow_mask.is_empty());
    }

    #[test]
    fn cliff_casts_shadow_downrange() {
        // Sensor looks along +x (azimuth 0): a wall at column 5 hides the
        // cells just behind it.
        let dem = Field2D::from_fn(16, 16, 1.0, |_, j| if j == 5 { 10.0 } else { 0.0 });
        let shadow = radar_shadow(&dem, 0.0);
        assert!(shadow.get(4, 6));
        assert!(shadow.get(4, 11));
        assert!(!shadow.get(4, 13));
        assert!(!shadow.get(4, 3));
        // Line of sight rises ~1.43 m per cell: the 10 m wall covers 7 cells.
        assert!(shadow.get(4, 12));
    }

    #[test]
    fn shadow_cells_get_inflated_variance() {
        let cfg = SceneConfig::default();
        let dem = Field2D::from_fn(16, 16, 1.0, |_, j| if j == 5 { 10.0 } else { 0.0 });
        let depth = Field2D::zeros(16, 16, 1.0);
        let mask = BitMask2D::new(16, 16);
        let cfg = SceneConfig {
            shadow_azimuth: 0.0,
            grid_size: 16,
            ..cfg
        };
        let (_, var, shadow) = simulate_sar(&dem, &depth, &mask, &cfg).unwrap();
        let land = speckle_db_variance(cfg.looks_land);
        for i in 0..16 {
            for j in 0..16 {
                let want = if shadow.get(i, j) { 4.0 * land } else { land };
                assert_eq!(var.get(i, j), want);
            }
        }
    }

    #[test]
    fn land_speckle_variance_matches_truth_empirically() {
        let cfg = SceneConfig {
            grid_size: 128,
            terrain_amplitude: 0.0,
            rng_seed: 3,
            ..Default::default()
        };
        let dem = gen_dem(&cfg).unwrap();
        let depth = Field2D::zeros(128, 128, 1.0);
        let mask = BitMask2D::new(128, 128);
        let (sar, var, _) = simulate_sar(&dem, &depth, &mask, &cfg).unwrap();
        let n = sar.len() as f64;
        let mean = sar.mean();
        let sample_var = sar.values().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let truth = var.values()[0];
        assert!((sample_var - truth).abs() / truth < 0.10, "{sample_var} vs {truth}");
    }

    #[test]
    fn generated_scene_invariants() {
        for seed in 0..6 {
            let cfg = SceneConfig {
                rng_seed: seed,
                ..Default::default()
            };
            let s = generate_scene(&cfg).unwrap();
            assert_eq!(s, generate_scene(&cfg).unwrap());
            for k in 0..s.dem.len() {
                let wet = s.water_mask.bits()[k];
                assert_eq!(s.depth_true.values()[k] > 0.0, wet);
                if wet {
                    let wse = s.depth_true.values()[k] + s.dem.values()[k];
                    assert!((wse - cfg.wse_level).abs() < 1e-6);
                }
                assert!(s.noise_var_true.values()[k] > 0.0);
            }
        }
    }

    #[test]
    fn fewer_water_looks_means_noisier_water() {
        let cfg = SceneConfig {
            rng_seed: 4,
            ..Default::default()
        };
        let s = generate_scene(&cfg).unwrap();
        let water = masked_mean_bits(&s.noise_var_true, &s.water_mask, true);
        let land = masked_mean_bits(&s.noise_var_true, &s.water_mask, false);
        assert!(water > land);
    }

    fn masked_mean_bits(f: &Field2D, m: &BitMask2D, want: bool) -> f64 {
        let sel: Vec<f64> = f
            .values()
            .iter()
            .zip(m.bits())
            .filter(|(_, &b)| b == want)
            .map(|(&v, _)| v)
            .collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let small = SceneConfig {
            grid_size: 8,
            ..Default::default()
        };
        assert!(generate_scene(&small).is_err());
        let inverted = SceneConfig {
            backscatter_water_db: 0.0,
            ..Default::default()
        };
        assert!(generate_scene(&inverted).is_err());
        let few_looks = SceneConfig {
            looks_water: 0.5,
            ..Default::default()
        };
        assert!(generate_scene(&few_looks).is_err());
    }
}
