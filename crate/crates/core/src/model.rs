//! Attention-gated FNO-UNet with a mean/variance head.
//!
//! Layout for `depth_levels = L`: a 3×3 lift to `width` channels at full
//! resolution, `L − 1` stride-2 encoder convolutions, two Fourier layers at
//! the bottleneck, then `L − 1` decoder stages that upsample (nearest),
//! gate the matching encoder skip, and fuse both with 3×3 convolutions.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{check_dims, Field2D};
use crate::scene::Scene;
use crate::spectral::weight_shape;

/// Head kernels start at this fraction of the Xavier bound so both heads
/// begin near their biases.
const HEAD_INIT_SCALE: f64 = 0.01;
const CHECKPOINT_MAGIC: &[u8; 4] = b"HPNN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub modes: usize,
    pub depth_levels: usize,
    pub probabilistic: bool,
    pub sigma_floor: f64,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 16,
            modes: 8,
            depth_levels: 3,
            probabilistic: true,
            sigma_floor: 1e-6,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 4 {
            return Err(Error::InvalidConfig("model.width must be >= 4".into()));
        }
        if self.depth_levels < 1 || self.modes < 1 {
            return Err(Error::InvalidConfig("model.depth_levels and model.modes must be >= 1".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::InvalidConfig("model.sigma_floor must be positive".into()));
        }
        Ok(())
    }

    /// Rejects grids the network cannot process.
    pub fn check_grid(&self, rows: usize, cols: usize) -> Result<()> {
        let div = 1usize << self.depth_levels;
        if rows % div != 0 || cols % div != 0 {
            return Err(Error::PadInputs {
                rows,
                cols,
                levels: self.depth_levels,
            });
        }
        let shrink = 1usize << (self.depth_levels - 1);
        let (br, bc) = (rows / shrink, cols / shrink);
        if 2 * self.modes > br.min(bc) {
            return Err(Error::ModesTooLarge {
                modes: self.modes,
                rows: br,
                cols: bc,
            });
        }
        Ok(())
    }

    fn gate_channels(&self) -> usize {
        (self.width / 2).max(1)
    }
}

/// Input standardization statistics from the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub sar_mean: f64,
    pub sar_std: f64,
    pub dem_mean: f64,
    pub dem_std: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            sar_mean: 0.0,
            sar_std: 1.0,
            dem_mean: 0.0,
            dem_std: 1.0,
        }
    }
}

fn mean_std<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
    for &v in values {
        n += 1;
        s += v;
        s2 += v * v;
    }
    let mean = s / n.max(1) as f64;
    let var = (s2 / n.max(1) as f64 - mean * mean).max(0.0);
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    (mean, std)
}

impl NormStats {
    pub fn from_scenes(scenes: &[Scene]) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::EmptyScenes("normalization statistics"));
        }
        let (sar_mean, sar_std) = mean_std(scenes.iter().flat_map(|s| s.sar_vh.values()));
        let (dem_mean, dem_std) = mean_std(scenes.iter().flat_map(|s| s.dem.values()));
        Ok(Self {
            sar_mean,
            sar_std,
            dem_mean,
            dem_std,
        })
    }

    fn apply(&self, sar: &Field2D, dem: &Field2D) -> Tensor {
        let (rows, cols) = sar.dims();
        let mut data = Vec::with_capacity(2 * rows * cols);
        data.extend(sar.values().iter().map(|v| (v - self.sar_mean) / self.sar_std));
        data.extend(dem.values().iter().map(|v| (v - self.dem_mean) / self.dem_std));
        Tensor::new(vec![2, rows, cols], data)
    }
}

/// Named parameter tensors plus the input statistics they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
    pub norm: NormStats,
}

impl ModelParams {
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }
}

/// Gradient table keyed like [`ModelParams::tensors`].
pub type Gradients = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPair {
    pub mu: Field2D,
    pub sigma2: Option<Field2D>,
}

#[derive(Clone, Copy, PartialEq)]
enum Init {
    Xavier(f64),
    Spectral,
    Zero,
}

fn conv(co: usize, ci: usize, k: usize) -> Vec<usize> {
    vec![co, ci, k, k]
}

/// Parameter names, shapes and initializers in a fixed order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.width;
    let f = cfg.gate_channels();
    let x = Init::Xavier(1.0);
    let mut out = vec![
        ("lift.w".to_string(), conv(c, 2, 3), x),
        ("lift.b".to_string(), vec![c], Init::Zero),
    ];
    for l in 1..cfg.depth_levels {
        out.push((format!("enc{l}.w"), conv(c, c, 3), x));
        out.push((format!("enc{l}.b"), vec![c], Init::Zero));
    }
    for j in 0..2 {
        out.push((format!("fno{j}.spec"), weight_shape(c, c, cfg.modes), Init::Spectral));
        out.push((format!("fno{j}.w"), conv(c, c, 1), x));
        out.push((format!("fno{j}.b"), vec![c], Init::Zero));
    }
    for l in (0..cfg.depth_levels - 1).rev() {
        out.push((format!("dec{l}.att.wg"), conv(f, c, 1), x));
        out.push((format!("dec{l}.att.wx"), conv(f, c, 1), x));
        out.push((format!("dec{l}.att.b"), vec![f], Init::Zero));
        out.push((format!("dec{l}.att.psi"), conv(1, f, 1), x));
        out.push((format!("dec{l}.att.psi_b"), vec![1], Init::Zero));
        out.push((format!("dec{l}.wg"), conv(c, c, 3), x));
        out.push((format!("dec{l}.ws"), conv(c, c, 3), x));
        out.push((format!("dec{l}.b"), vec![c], Init::Zero));
    }
    let head = Init::Xavier(HEAD_INIT_SCALE);
    out.push(("head.mu.w".to_string(), conv(1, c, 1), head));
    out.push(("head.mu.b".to_string(), vec![1], Init::Zero));
    if cfg.probabilistic {
        out.push(("head.var.w".to_string(), conv(1, c, 1), head));
        out.push(("head.var.b".to_string(), vec![1], Init::Zero));
    }
    out
}

/// Number of scalar parameters for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    layout(cfg).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

#[inline]
pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Deterministic initialization from `cfg.rng_seed`. Values are kept
/// exactly representable in `f32` so checkpoints round-trip bit-exactly.
pub fn init_params(cfg: &ModelConfig) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in layout(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zero => vec![0.0; n],
            Init::Xavier(scale) => {
                let k2: usize = shape[2..].iter().product();
                let bound = scale * (6.0 / ((shape[0] + shape[1]) * k2) as f64).sqrt();
                (0..n).map(|_| round_f32(rng.gen_range(-bound..bound))).collect()
            }
            Init::Spectral => {
                let s = 1.0 / (shape[0] * shape[1]) as f64;
                (0..n).map(|_| round_f32(s * rng.gen::<f64>())).collect()
            }
        };
        tensors.insert(name, Tensor::new(shape, data));
    }
    ModelParams {
        tensors,
        norm: NormStats::default(),
    }
}

/// Parameter tensors of one attention gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// `[f, c_g, 1, 1]` projection of the gating signal.
    pub wg: Tensor,
    /// `[f, c_x, 1, 1]` projection of the skip features.
    pub wx: Tensor,
    /// `[f]`
    pub b: Tensor,
    /// `[1, f, 1, 1]`
    pub psi: Tensor,
    /// `[1]`
    pub psi_b: Tensor,
}

struct GateVars {
    wg: Var,
    wx: Var,
    b: Var,
    psi: Var,
    psi_b: Var,
}

fn gate_graph(t: &mut Tape, g: Var, x: Var, p: &GateVars) -> Var {
    let a = t.conv2d(g, p.wg, 1);
    let b = t.conv2d(x, p.wx, 1);
    let s = t.add(a, b);
    let s = t.add_channel_bias(s, p.b);
    let s = t.relu(s);
    let psi = t.conv2d(s, p.psi, 1);
    let psi = t.add_channel_bias(psi, p.psi_b);
    let alpha = t.sigmoid(psi);
    t.mul_broadcast(x, alpha)
}

/// Additive attention: `x · σ(ψ·relu(W_g·g + W_x·x + b) + b_ψ)` per cell.
pub fn attention_gate(gate_signal: &Tensor, skip: &Tensor, params: &GateParams) -> Result<Tensor> {
    let (_, gh, gw) = gate_signal.chw();
    let (_, xh, xw) = skip.chw();
    check_dims((gh, gw), (xh, xw))?;
    let mut t = Tape::new();
    let g = t.constant(gate_signal.clone());
    let x = t.constant(skip.clone());
    let vars = GateVars {
        wg: t.constant(params.wg.clone()),
        wx: t.constant(params.wx.clone()),
        b: t.constant(params.b.clone()),
        psi: t.constant(params.psi.clone()),
        psi_b: t.constant(params.psi_b.clone()),
    };
    let out = gate_graph(&mut t, g, x, &vars);
    Ok(t.value(out).clone())
}

/// Tape nodes of one forward pass.
pub(crate) struct ForwardGraph {
    pub params: BTreeMap<String, Var>,
    pub mu: Var,
    pub sigma2: Option<Var>,
}

/// Records the network on `t`. Parameters are tape params when
/// `trainable`, constants otherwise.
pub(crate) fn forward_graph(
    t: &mut Tape,
    params: &ModelParams,
    sar: &Field2D,
    dem: &Field2D,
    cfg: &ModelConfig,
    trainable: bool,
) -> Result<ForwardGraph> {
    check_dims(sar.dims(), dem.dims())?;
    let (rows, cols) = sar.dims();
    cfg.check_grid(rows, cols)?;
    let mut vars = BTreeMap::new();
    for (name, tensor) in &params.tensors {
        let v = if trainable {
            t.param(tensor.clone())
        } else {
            t.constant(tensor.clone())
        };
        vars.insert(name.clone(), v);
    }
    let p = |name: &str| -> Var { vars[name] };
    let input = t.constant(params.norm.apply(sar, dem));

    let conv_block = |t: &mut Tape, x: Var, w: Var, b: Var, stride: usize| {
        let y = t.conv2d(x, w, stride);
        let y = t.add_channel_bias(y, b);
        t.relu(y)
    };

    let mut skips = vec![conv_block(t, input, p("lift.w"), p("lift.b"), 1)];
    for l in 1..cfg.depth_levels {
        let prev = skips[l - 1];
        skips.push(conv_block(t, prev, p(&format!("enc{l}.w")), p(&format!("enc{l}.b")), 2));
    }
    let mut z = skips[cfg.depth_levels - 1];
    for j in 0..2 {
        let s = t.spectral(z, p(&format!("fno{j}.spec")), cfg.modes);
        let l = t.conv2d(z, p(&format!("fno{j}.w")), 1);
        let y = t.add(s, l);
        let y = t.add_channel_bias(y, p(&format!("fno{j}.b")));
        z = t.relu(y);
    }
    for l in (0..cfg.depth_levels - 1).rev() {
        let up = t.upsample2x(z);
        let gate = GateVars {
            wg: p(&format!("dec{l}.att.wg")),
            wx: p(&format!("dec{l}.att.wx")),
            b: p(&format!("dec{l}.att.b")),
            psi: p(&format!("dec{l}.att.psi")),
            psi_b: p(&format!("dec{l}.att.psi_b")),
        };
        let gated = gate_graph(t, up, skips[l], &gate);
        let a = t.conv2d(up, p(&format!("dec{l}.wg")), 1);
        let b = t.conv2d(gated, p(&format!("dec{l}.ws")), 1);
        let y = t.add(a, b);
        let y = t.add_channel_bias(y, p(&format!("dec{l}.b")));
        z = t.relu(y);
    }
    let mu = t.conv2d(z, p("head.mu.w"), 1);
    let mu = t.add_channel_bias(mu, p("head.mu.b"));
    let sigma2 = if cfg.probabilistic {
        let raw = t.conv2d(z, p("head.var.w"), 1);
        let raw = t.add_channel_bias(raw, p("head.var.b"));
        let sp = t.softplus(raw);
        Some(t.add_scalar(sp, cfg.sigma_floor))
    } else {
        None
    };
    Ok(ForwardGraph {
        params: vars,
        mu,
        sigma2,
    })
}

pub(crate) fn to_field(t: &Tape, v: Var, spacing: f64) -> Field2D {
    let (_, rows, cols) = t.value(v).chw();
    Field2D::from_vec(rows, cols, spacing, t.value(v).data.clone()).expect("shape checked")
}

/// Mean depth and, in probabilistic mode, variance for one scene.
pub fn forward(params: &ModelParams, sar: &Field2D, dem: &Field2D, cfg: &ModelConfig) -> Result<PredictionPair> {
    let mut t = Tape::new();
    let g = forward_graph(&mut t, params, sar, dem, cfg, false)?;
    Ok(PredictionPair {
        mu: to_field(&t, g.mu, sar.spacing()),
        sigma2: g.sigma2.map(|v| to_field(&t, v, sar.spacing())),
    })
}

/// Vector-Jacobian product: gradient of `Σ up_mu·μ + Σ up_sigma2·σ²`
/// with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    sar: &Field2D,
    dem: &Field2D,
    cfg: &ModelConfig,
    up_mu: &Field2D,
    up_sigma2: Option<&Field2D>,
) -> Result<Gradients> {
    let mut t = Tape::new();
    let g = forward_graph(&mut t, params, sar, dem, cfg, true)?;
    check_dims(up_mu.dims(), sar.dims())?;
    let mut terms = Vec::new();
    let seed = |t: &mut Tape, out: Var, up: &Field2D| {
        let u = t.constant(Tensor::new(t.value(out).shape.clone(), up.values().to_vec()));
        let m = t.mul(out, u);
        t.sum(m)
    };
    terms.push((seed(&mut t, g.mu, up_mu), 1.0));
    if let (Some(s2), Some(up)) = (g.sigma2, up_sigma2) {
        check_dims(up.dims(), sar.dims())?;
        terms.push((seed(&mut t, s2, up), 1.0));
    }
    let root = t.weighted_sum(terms);
    Ok(collect_grads(&t, root, &g.params, params))
}

pub(crate) fn collect_grads(
    t: &Tape,
    root: Var,
    vars: &BTreeMap<String, Var>,
    params: &ModelParams,
) -> Gradients {
    let mut grads = t.backward(root);
    vars.iter()
        .map(|(name, &v)| {
            let g = grads.take(v).unwrap_or_else(|| vec![0.0; params.get(name).len()]);
            (name.clone(), g)
        })
        .collect()
}

fn put_u16(w: &mut Vec<u8>, v: u16) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

/// Writes `HPNN` v1: config block, normalization block, then each
/// parameter as name, rank, dims and `f32` payload (all little-endian).
pub fn save_checkpoint(params: &ModelParams, cfg: &ModelConfig, path: &Path) -> Result<()> {
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    put_u16(&mut b, CHECKPOINT_VERSION);
    put_u32(&mut b, cfg.width as u32);
    put_u32(&mut b, cfg.modes as u32);
    put_u32(&mut b, cfg.depth_levels as u32);
    b.push(cfg.probabilistic as u8);
    put_f64(&mut b, cfg.sigma_floor);
    b.extend_from_slice(&cfg.rng_seed.to_le_bytes());
    let n = params.norm;
    for v in [n.sar_mean, n.sar_std, n.dem_mean, n.dem_std] {
        put_f64(&mut b, v);
    }
    put_u32(&mut b, params.tensors.len() as u32);
    for (name, t) in &params.tensors {
        put_u16(&mut b, name.len() as u16);
        b.extend_from_slice(name.as_bytes());
        b.push(t.shape.len() as u8);
        for &d in &t.shape {
            put_u32(&mut b, d as u32);
        }
        for &v in &t.data {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&b).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::TruncatedPayload {
                path: self.path.to_path_buf(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.arr()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    let bad_magic = || Error::BadMagic {
        path: path.to_path_buf(),
        expected: "HPNN",
    };
    if buf.len() < 4 {
        return Err(bad_magic());
    }
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad_magic());
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let cfg = ModelConfig {
        width: r.u32()? as usize,
        modes: r.u32()? as usize,
        depth_levels: r.u32()? as usize,
        probabilistic: r.u8()? != 0,
        sigma_floor: r.f64()?,
        rng_seed: r.u64()?,
    };
    let norm = NormStats {
        sar_mean: r.f64()?,
        sar_std: r.f64()?,
        dem_mean: r.f64()?,
        dem_std: r.f64()?,
    };
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Malformed {
            path: path.to_path_buf(),
            reason: "parameter name is not UTF-8".into(),
        })?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| r.arr().map(|b| f32::from_le_bytes(b) as f64))
            .collect::<Result<Vec<_>>>()?;
        tensors.insert(name, Tensor::new(shape, data));
    }
    if r.pos != buf.len() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    let expected: BTreeMap<String, Vec<usize>> = layout(&cfg).into_iter().map(|(n, s, _)| (n, s)).collect();
    let found: BTreeMap<String, Vec<usize>> = tensors.iter().map(|(n, t)| (n.clone(), t.shape.clone())).collect();
    if expected != found {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: "parameter table does not match the stored config".into(),
        });
    }
    Ok((ModelParams { tensors, norm }, cfg))
}
