//! Fourier-space channel mixing on a truncated set of modes.
//!
//! Retained signed frequencies per axis are `|f| < k_max`, plus the Nyquist
//! frequency when `2·k_max` equals the axis length, so `k_max = n/2` keeps
//! the full spectrum. Weights are stored for non-negative column
//! frequencies, shape `[c_in, c_out, 2·k_max, k_max + 1, 2]` (row frequency
//! `f` at index `f + k_max`; last axis is re/im). Modes with a negative
//! column frequency use the conjugate of the mirrored weight and the output
//! is the real part of the inverse transform.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub(crate) struct SpectralCache {
    /// Forward transform of each input channel.
    x_hat: Vec<Vec<Complex64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Mode {
    /// Array index of the mode in the `h × w` spectrum.
    pub cell: usize,
    /// Flat index of the stored complex weight within one `(c_in, c_out)` block.
    pub slot: usize,
    pub mirrored: bool,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Unnormalized 2-D transform in place, row-major `h × w`.
pub(crate) fn fft2(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let row = plan(w, inverse);
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let col = plan(h, inverse);
    let mut tmp = vec![Complex64::default(); h];
    for c in 0..w {
        for r in 0..h {
            tmp[r] = buf[r * w + c];
        }
        col.process(&mut tmp);
        for r in 0..h {
            buf[r * w + c] = tmp[r];
        }
    }
}

#[inline]
fn signed(i: usize, n: usize) -> isize {
    if 2 * i < n {
        i as isize
    } else {
        i as isize - n as isize
    }
}

#[inline]
fn is_nyquist(f: isize, n: usize, k: usize) -> bool {
    2 * k == n && f == -((n / 2) as isize)
}

#[inline]
fn retained(f: isize, n: usize, k: usize) -> bool {
    f.unsigned_abs() < k || is_nyquist(f, n, k)
}

pub(crate) fn weight_shape(c_in: usize, c_out: usize, k_max: usize) -> Vec<usize> {
    vec![c_in, c_out, 2 * k_max, k_max + 1, 2]
}

/// Every retained mode of an `h × w` spectrum and the weight slot it reads.
pub(crate) fn retained_modes(h: usize, w: usize, k: usize) -> Vec<Mode> {
    let kk = k as isize;
    let mut out = Vec::new();
    for r in 0..h {
        let p = signed(r, h);
        if !retained(p, h, k) {
            continue;
        }
        for c in 0..w {
            let q = signed(c, w);
            if !retained(q, w, k) {
                continue;
            }
            let col_nyq = is_nyquist(q, w, k);
            let (sp, sq, mirrored) = if q >= 0 || col_nyq {
                (p, if col_nyq { kk } else { q }, false)
            } else {
                let mp = signed((h - r) % h, h);
                (mp, -q, true)
            };
            let slot = ((sp + kk) as usize) * (k + 1) + sq as usize;
            out.push(Mode {
                cell: r * w + c,
                slot,
                mirrored,
            });
        }
    }
    out
}

fn check(x: &Tensor, w: &Tensor, k_max: usize) -> Result<()> {
    let (ci, h, wd) = x.chw();
    if k_max == 0 || h < 2 * k_max || wd < 2 * k_max {
        return Err(Error::ModesTooLarge { modes: k_max, rows: h, cols: wd });
    }
    if w.shape.len() != 5 || w.shape[0] != ci || w.shape[2..] != [2 * k_max, k_max + 1, 2] {
        return Err(Error::DimensionMismatch {
            left: (w.shape[0], w.shape.get(1).copied().unwrap_or(0)),
            right: (ci, 2 * k_max),
        });
    }
    Ok(())
}

/// Spectral convolution of a `[c_in, h, w]` stack.
pub fn spectral_conv2d(x: &Tensor, weights: &Tensor, k_max: usize) -> Result<Tensor> {
    check(x, weights, k_max)?;
    Ok(forward(x, weights, k_max).0)
}

#[inline]
fn weight_at(w: &[f64], block: usize, mode: &Mode) -> Complex64 {
    let i = (block + mode.slot) * 2;
    let z = Complex64::new(w[i], w[i + 1]);
    if mode.mirrored {
        z.conj()
    } else {
        z
    }
}

pub(crate) fn forward(x: &Tensor, w: &Tensor, k_max: usize) -> (Tensor, SpectralCache) {
    let (ci_n, h, wd) = x.chw();
    let co_n = w.shape[1];
    let hw = h * wd;
    let block_len = 2 * k_max * (k_max + 1);
    let modes = retained_modes(h, wd, k_max);
    let x_hat: Vec<Vec<Complex64>> = (0..ci_n)
        .map(|ci| {
            let mut buf: Vec<Complex64> = x.data[ci * hw..(ci + 1) * hw]
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .collect();
            fft2(&mut buf, h, wd, false);
            buf
        })
        .collect();
    let mut out = vec![0.0; co_n * hw];
    let norm = 1.0 / hw as f64;
    let mut y = vec![Complex64::default(); hw];
    for co in 0..co_n {
        y.iter_mut().for_each(|v| *v = Complex64::default());
        for (ci, xh) in x_hat.iter().enumerate() {
            let block = (ci * co_n + co) * block_len;
            for m in &modes {
                y[m.cell] += weight_at(&w.data, block, m) * xh[m.cell];
            }
        }
        fft2(&mut y, h, wd, true);
        for (o, v) in out[co * hw..(co + 1) * hw].iter_mut().zip(&y) {
            *o = v.re * norm;
        }
    }
    (Tensor::new(vec![co_n, h, wd], out), SpectralCache { x_hat })
}

pub(crate) fn backward(
    (ci_n, h, wd): (usize, usize, usize),
    w: &Tensor,
    k_max: usize,
    cache: &SpectralCache,
    g: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let co_n = w.shape[1];
    let hw = h * wd;
    let block_len = 2 * k_max * (k_max + 1);
    let modes = retained_modes(h, wd, k_max);
    let norm = 1.0 / hw as f64;
    // Adjoint of Re(IDFT(Y)/hw) with respect to Y.
    let g_hat: Vec<Vec<Complex64>> = (0..co_n)
        .map(|co| {
            let mut buf: Vec<Complex64> = g[co * hw..(co + 1) * hw]
                .iter()
                .map(|&v| Complex64::new(v * norm, 0.0))
                .collect();
            fft2(&mut buf, h, wd, false);
            buf
        })
        .collect();
    let gw = need_w.then(|| {
        let mut gw = vec![0.0; w.len()];
        for ci in 0..ci_n {
            let xh = &cache.x_hat[ci];
            for (co, gh) in g_hat.iter().enumerate() {
                let block = (ci * co_n + co) * block_len;
                for m in &modes {
                    let d = if m.mirrored {
                        xh[m.cell] * gh[m.cell].conj()
                    } else {
                        xh[m.cell].conj() * gh[m.cell]
                    };
                    let i = (block + m.slot) * 2;
                    gw[i] += d.re;
                    gw[i + 1] += d.im;
                }
            }
        }
        gw
    });
    let gx = need_x.then(|| {
        let mut gx = vec![0.0; ci_n * hw];
        let mut buf = vec![Complex64::default(); hw];
        for ci in 0..ci_n {
            buf.iter_mut().for_each(|v| *v = Complex64::default());
            for (co, gh) in g_hat.iter().enumerate() {
                let block = (ci * co_n + co) * block_len;
                for m in &modes {
                    buf[m.cell] += weight_at(&w.data, block, m).conj() * gh[m.cell];
                }
            }
            fft2(&mut buf, h, wd, true);
            for (o, v) in gx[ci * hw..(ci + 1) * hw].iter_mut().zip(&buf) {
                *o = v.re;
            }
        }
        gx
    });
    (gx, gw)
}
