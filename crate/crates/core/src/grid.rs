//! Grid containers and finite-difference stencils.
//!
//! All derivatives use the second-order central stencil on interior cells.
//! At the domain edge the missing neighbour is replaced by the edge cell
//! itself (reflective padding), so edge cells get a one-sided difference
//! divided by `2Δ`.

use crate::error::{Error, Result};

/// A rectangular grid of real values with uniform spacing (metres per cell).
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    rows: usize,
    cols: usize,
    spacing: f64,
    values: Vec<f64>,
}

impl Field2D {
    pub fn filled(rows: usize, cols: usize, spacing: f64, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "empty grid");
        assert!(spacing > 0.0, "spacing must be positive");
        Self {
            rows,
            cols,
            spacing,
            values: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize, spacing: f64) -> Self {
        Self::filled(rows, cols, spacing, 0.0)
    }

    pub fn from_vec(rows: usize, cols: usize, spacing: f64, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::InvalidConfig(format!(
                "field of {rows}x{cols} cannot hold {} values",
                values.len()
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidConfig(format!("spacing must be positive, got {spacing}")));
        }
        Ok(Self {
            rows,
            cols,
            spacing,
            values,
        })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        spacing: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            spacing,
            values,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            spacing: self.spacing,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Field2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        check_dims(self.dims(), other.dims())?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            spacing: self.spacing,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// One boolean per cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask2D {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BitMask2D {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::InvalidConfig(format!(
                "mask of {rows}x{cols} cannot hold {} bits",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    /// Mask of cells where `f` is strictly above `threshold`.
    pub fn threshold(f: &Field2D, threshold: f64) -> Self {
        Self {
            rows: f.rows,
            cols: f.cols,
            bits: f.values.iter().map(|&v| v > threshold).collect(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// 4-neighbour erosion: a cell survives when it and its four neighbours
    /// are set. Cells on the grid border never survive.
    pub fn erode(&self) -> Self {
        let (r, c) = (self.rows, self.cols);
        Self::from_fn(r, c, |i, j| {
            i > 0
                && j > 0
                && i + 1 < r
                && j + 1 < c
                && self.get(i, j)
                && self.get(i - 1, j)
                && self.get(i + 1, j)
                && self.get(i, j - 1)
                && self.get(i, j + 1)
        })
    }

    pub fn to_field(&self, spacing: f64) -> Field2D {
        Field2D {
            rows: self.rows,
            cols: self.cols,
            spacing,
            values: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

pub(crate) fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { left: a, right: b });
    }
    Ok(())
}

fn check_stencil(rows: usize, cols: usize) -> Result<()> {
    if rows < 3 || cols < 3 {
        return Err(Error::GridTooSmall { rows, cols });
    }
    Ok(())
}

/// Central x-derivative (along columns) into `out`.
pub(crate) fn stencil_dx(src: &[f64], rows: usize, cols: usize, spacing: f64, out: &mut [f64]) {
    let inv = 1.0 / (2.0 * spacing);
    for i in 0..rows {
        let row = &src[i * cols..(i + 1) * cols];
        let dst = &mut out[i * cols..(i + 1) * cols];
        dst[0] = (row[1] - row[0]) * inv;
        for j in 1..cols - 1 {
            dst[j] = (row[j + 1] - row[j - 1]) * inv;
        }
        dst[cols - 1] = (row[cols - 1] - row[cols - 2]) * inv;
    }
}

/// Central y-derivative (along rows) into `out`.
pub(crate) fn stencil_dy(src: &[f64], rows: usize, cols: usize, spacing: f64, out: &mut [f64]) {
    let inv = 1.0 / (2.0 * spacing);
    for i in 0..rows {
        let up = i.saturating_sub(1);
        let down = (i + 1).min(rows - 1);
        for j in 0..cols {
            out[i * cols + j] = (src[down * cols + j] - src[up * cols + j]) * inv;
        }
    }
}

/// Adjoint of [`stencil_dx`]: accumulates `Dxᵀ g` into `acc`.
pub(crate) fn stencil_dx_adjoint(g: &[f64], rows: usize, cols: usize, spacing: f64, acc: &mut [f64]) {
    let inv = 1.0 / (2.0 * spacing);
    for i in 0..rows {
        let base = i * cols;
        for j in 0..cols {
            let gv = g[base + j] * inv;
            let jp = (j + 1).min(cols - 1);
            let jm = j.saturating_sub(1);
            acc[base + jp] += gv;
            acc[base + jm] -= gv;
        }
    }
}

/// Adjoint of [`stencil_dy`].
pub(crate) fn stencil_dy_adjoint(g: &[f64], rows: usize, cols: usize, spacing: f64, acc: &mut [f64]) {
    let inv = 1.0 / (2.0 * spacing);
    for i in 0..rows {
        let up = i.saturating_sub(1);
        let down = (i + 1).min(rows - 1);
        for j in 0..cols {
            let gv = g[i * cols + j] * inv;
            acc[down * cols + j] += gv;
            acc[up * cols + j] -= gv;
        }
    }
}

/// Central-difference gradient `(∂f/∂x, ∂f/∂y)` with reflective edges.
pub fn grad_central(f: &Field2D) -> Result<(Field2D, Field2D)> {
    check_stencil(f.rows, f.cols)?;
    let mut dx = Field2D::zeros(f.rows, f.cols, f.spacing);
    let mut dy = Field2D::zeros(f.rows, f.cols, f.spacing);
    stencil_dx(&f.values, f.rows, f.cols, f.spacing, &mut dx.values);
    stencil_dy(&f.values, f.rows, f.cols, f.spacing, &mut dy.values);
    Ok((dx, dy))
}

/// `∂fx/∂x + ∂fy/∂y`.
pub fn divergence(fx: &Field2D, fy: &Field2D) -> Result<Field2D> {
    check_dims(fx.dims(), fy.dims())?;
    if fx.spacing != fy.spacing {
        return Err(Error::InvalidConfig(format!(
            "divergence operands have different spacing ({} vs {})",
            fx.spacing, fy.spacing
        )));
    }
    let (dx, _) = grad_central(fx)?;
    let (_, dy) = grad_central(fy)?;
    dx.zip_map(&dy, |a, b| a + b)
}

/// Mean of `f` over set cells; exactly `0.0` for an empty mask.
pub fn masked_mean(f: &Field2D, m: &BitMask2D) -> Result<f64> {
    check_dims(f.dims(), m.dims())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&v, &b) in f.values.iter().zip(&m.bits) {
        if b {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(sum / n as f64)
}
