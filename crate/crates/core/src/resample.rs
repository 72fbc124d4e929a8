//! Separable image resampling. One plan builder serves both the plain-image
//! degradation pipeline and the differentiable downscale inside the wavelet
//! loss, so every consumer sees identical kernel arithmetic.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Bilinear,
    Bicubic,
}

impl Interp {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Interp::Nearest),
            "bilinear" => Ok(Interp::Bilinear),
            "bicubic" => Ok(Interp::Bicubic),
            other => Err(Error::config(format!("unknown interpolation '{other}'"))),
        }
    }
}

/// Cubic convolution kernel with a = -0.5.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

fn triangle(t: f64) -> f64 {
    (1.0 - t.abs()).max(0.0)
}

/// Per-output-sample source indices and normalized weights along one axis.
#[derive(Debug, Clone)]
pub struct Plan1d {
    pub taps: Vec<(Vec<usize>, Vec<f64>)>,
}

impl Plan1d {
    /// When downscaling the kernel support widens by the scale ratio
    /// (antialiasing); weights are renormalized to sum 1 per output sample;
    /// source coordinates clamp at the edges.
    pub fn new(n_in: usize, n_out: usize, interp: Interp) -> Self {
        let ratio = n_in as f64 / n_out as f64;
        let scale = ratio.max(1.0);
        let mut taps = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let (kernel, support): (fn(f64) -> f64, f64) = match interp {
                Interp::Nearest => {
                    let j = center.round().clamp(0.0, (n_in - 1) as f64) as usize;
                    taps.push((vec![j], vec![1.0]));
                    continue;
                }
                Interp::Bilinear => (triangle, scale),
                Interp::Bicubic => (cubic, 2.0 * scale),
            };
            let lo = (center - support).ceil() as isize;
            let hi = (center + support).floor() as isize;
            let mut idx = Vec::new();
            let mut wts = Vec::new();
            for j in lo..=hi {
                let w = kernel((j as f64 - center) / scale);
                if w != 0.0 {
                    idx.push(j.clamp(0, n_in as isize - 1) as usize);
                    wts.push(w);
                }
            }
            let sum: f64 = wts.iter().sum();
            debug_assert!(sum.abs() > 1e-12);
            for w in wts.iter_mut() {
                *w /= sum;
            }
            taps.push((idx, wts));
        }
        Plan1d { taps }
    }
}

fn apply_rows<T: Scalar>(x: &[T], _h: usize, w: usize, plan: &Plan1d) -> Vec<T> {
    let oh = plan.taps.len();
    let mut out = vec![T::ZERO; oh * w];
    for (o, (idx, wts)) in plan.taps.iter().enumerate() {
        let orow = &mut out[o * w..(o + 1) * w];
        for (&i, &wt) in idx.iter().zip(wts) {
            let wt = T::from_f64(wt);
            let xrow = &x[i * w..(i + 1) * w];
            for (dst, &src) in orow.iter_mut().zip(xrow) {
                *dst += wt * src;
            }
        }
    }
    out
}

fn apply_cols<T: Scalar>(x: &[T], h: usize, w: usize, plan: &Plan1d) -> Vec<T> {
    let ow = plan.taps.len();
    let mut out = vec![T::ZERO; h * ow];
    for r in 0..h {
        let xrow = &x[r * w..(r + 1) * w];
        let orow = &mut out[r * ow..(r + 1) * ow];
        for (o, (idx, wts)) in plan.taps.iter().enumerate() {
            let mut acc = T::ZERO;
            for (&i, &wt) in idx.iter().zip(wts) {
                acc += T::from_f64(wt) * xrow[i];
            }
            orow[o] = acc;
        }
    }
    out
}

fn resize_plane<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    rows: &Plan1d,
    cols: &Plan1d,
) -> Vec<T> {
    let tmp = apply_rows(x, h, w, rows);
    apply_cols(&tmp, rows.taps.len(), w, cols)
}

/// Resize a [C,H,W] or [H,W] image with the given kernel. Not differentiable.
pub fn resize<T: Scalar>(
    img: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    interp: Interp,
) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::geometry("resize target must be positive"));
    }
    let (c, h, w, rank2) = match img.shape() {
        [h, w] => (1, *h, *w, true),
        [c, h, w] => (*c, *h, *w, false),
        s => return Err(Error::dimension(format!("resize expects [C,H,W] or [H,W], got {s:?}"))),
    };
    let rows = Plan1d::new(h, out_h, interp);
    let cols = Plan1d::new(w, out_w, interp);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        out.extend(resize_plane(&img.data()[ch * h * w..(ch + 1) * h * w], h, w, &rows, &cols));
    }
    let shape = if rank2 {
        vec![out_h, out_w]
    } else {
        vec![c, out_h, out_w]
    };
    Tensor::new(shape, out)
}

/// Cubic-convolution resize, a = -0.5. Not differentiable; the wavelet loss
/// uses `bicubic_resize_t`.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    resize(img, out_h, out_w, Interp::Bicubic)
}

/// Differentiable bicubic resize of a single [H,W] plane: linear in the
/// input, so the backward pass scatters the adjoint through the same taps.
pub fn bicubic_resize_t<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w) = x.dims2()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::geometry("resize target must be positive"));
    }
    let rows = Arc::new(Plan1d::new(h, out_h, Interp::Bicubic));
    let cols = Arc::new(Plan1d::new(w, out_w, Interp::Bicubic));
    let out = resize_plane(x.data(), h, w, &rows, &cols);
    Ok(Tensor::from_op(
        vec![out_h, out_w],
        out,
        vec![x.clone()],
        move |g, sinks| {
            if let Some(dx) = sinks[0].as_mut() {
                // adjoint of cols then adjoint of rows
                let mut tmp = vec![T::ZERO; out_h * w];
                for r in 0..out_h {
                    let grow = &g[r * out_w..(r + 1) * out_w];
                    let trow = &mut tmp[r * w..(r + 1) * w];
                    for (o, (idx, wts)) in cols.taps.iter().enumerate() {
                        for (&i, &wt) in idx.iter().zip(wts) {
                            trow[i] += T::from_f64(wt) * grow[o];
                        }
                    }
                }
                for (o, (idx, wts)) in rows.taps.iter().enumerate() {
                    let trow = &tmp[o * w..(o + 1) * w];
                    for (&i, &wt) in idx.iter().zip(wts) {
                        let wt = T::from_f64(wt);
                        let drow = &mut dx[i * w..(i + 1) * w];
                        for (d, &t) in drow.iter_mut().zip(trow) {
                            *d += wt * t;
                        }
                    }
                }
            }
        },
    ))
}
