//! Stationary (à-trous, undecimated) 2-D wavelet transform on the luminance
//! channel, dual-group subband extraction, and the multi-scale wavelet loss.
//!
//! Boundary handling is periodic at every level, which makes circular-shift
//! equivariance exact. Level j filters come from inserting 2^(j-1)-1 zeros
//! between taps; all planes keep the input size.

use crate::error::{Error, Result};
use crate::resample::bicubic_resize_t;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::path::Path;
use std::sync::Arc;

/// Orthogonal analysis filter pair. The high-pass is the quadrature mirror
/// of the low-pass: g_k = (-1)^k · h_{L-1-k}.
#[derive(Debug, Clone)]
pub struct WaveletFilter {
    pub name: String,
    pub h: Vec<f64>,
    pub g: Vec<f64>,
}

impl WaveletFilter {
    pub fn haar() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        WaveletFilter::from_lowpass("haar", vec![s, s]).expect("haar is orthogonal")
    }

    /// Build from low-pass analysis coefficients, deriving the high-pass by
    /// QMF and checking unit energy and zero high-pass sum.
    pub fn from_lowpass(name: impl Into<String>, h: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let l = h.len();
        if l < 2 || l % 2 != 0 {
            return Err(Error::format(format!(
                "filter '{name}': tap count must be even and >= 2, got {l}"
            )));
        }
        let energy: f64 = h.iter().map(|v| v * v).sum();
        if (energy - 1.0).abs() > 1e-10 {
            return Err(Error::format(format!(
                "filter '{name}': low-pass energy {energy} != 1"
            )));
        }
        let g: Vec<f64> = (0..l)
            .map(|k| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                sign * h[l - 1 - k]
            })
            .collect();
        let gsum: f64 = g.iter().sum();
        if gsum.abs() > 1e-10 {
            return Err(Error::format(format!(
                "filter '{name}': high-pass sum {gsum} != 0"
            )));
        }
        Ok(WaveletFilter { name, h, g })
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "haar" => Ok(WaveletFilter::haar()),
            other => Err(Error::config(format!(
                "unknown built-in wavelet '{other}'; load longer filters from a coefficient file"
            ))),
        }
    }

    /// Coefficient file: line 1 name, line 2 tap count L, then L low-pass
    /// coefficients one per line. '#' starts a comment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let name = lines
            .next()
            .ok_or_else(|| Error::format("wavelet file: missing name line"))?
            .to_string();
        let count: usize = lines
            .next()
            .ok_or_else(|| Error::format("wavelet file: missing tap count"))?
            .parse()
            .map_err(|e| Error::format(format!("wavelet file: bad tap count: {e}")))?;
        let mut h = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| Error::format("wavelet file: truncated coefficient list"))?;
            h.push(
                line.parse::<f64>()
                    .map_err(|e| Error::format(format!("wavelet file: bad coefficient: {e}")))?,
            );
        }
        WaveletFilter::from_lowpass(name, h)
    }

    /// Resolve "haar" or a path to a coefficient file.
    pub fn resolve(spec: &str) -> Result<Self> {
        if spec == "haar" {
            Ok(WaveletFilter::haar())
        } else {
            WaveletFilter::load(Path::new(spec))
        }
    }
}

/// Separable periodic filtering with dilated taps; the building block of the
/// à-trous transform. Differentiable with respect to the input.
fn periodic_sep_filter<T: Scalar>(
    x: &Tensor<T>,
    row_taps: &[f64],
    col_taps: &[f64],
    dil: usize,
) -> Result<Tensor<T>> {
    let (h, w) = x.dims2()?;
    let tr: Arc<Vec<T>> = Arc::new(row_taps.iter().map(|&v| T::from_f64(v)).collect());
    let tc: Arc<Vec<T>> = Arc::new(col_taps.iter().map(|&v| T::from_f64(v)).collect());

    let fwd = {
        let tr = Arc::clone(&tr);
        let tc = Arc::clone(&tc);
        move |src: &[T]| -> Vec<T> {
            let mut tmp = vec![T::ZERO; h * w];
            for (a, &t) in tr.iter().enumerate() {
                let off = (a * dil) % h;
                for i in 0..h {
                    let si = (i + off) % h;
                    let trow = &mut tmp[i * w..(i + 1) * w];
                    let srow = &src[si * w..(si + 1) * w];
                    for (d, &s) in trow.iter_mut().zip(srow) {
                        *d += t * s;
                    }
                }
            }
            let mut out = vec![T::ZERO; h * w];
            for (b, &t) in tc.iter().enumerate() {
                let off = (b * dil) % w;
                for i in 0..h {
                    let orow = &mut out[i * w..(i + 1) * w];
                    let trow = &tmp[i * w..(i + 1) * w];
                    for j in 0..w {
                        orow[j] += t * trow[(j + off) % w];
                    }
                }
            }
            out
        }
    };
    let out = fwd(x.data());

    Ok(Tensor::from_op(
        vec![h, w],
        out,
        vec![x.clone()],
        move |g, sinks| {
            if let Some(dx) = sinks[0].as_mut() {
                // adjoint: scatter through the same taps (negated offsets)
                let mut tmp = vec![T::ZERO; h * w];
                for (b, &t) in tc.iter().enumerate() {
                    let off = (b * dil) % w;
                    for i in 0..h {
                        let grow = &g[i * w..(i + 1) * w];
                        let trow = &mut tmp[i * w..(i + 1) * w];
                        for j in 0..w {
                            trow[(j + off) % w] += t * grow[j];
                        }
                    }
                }
                for (a, &t) in tr.iter().enumerate() {
                    let off = (a * dil) % h;
                    for i in 0..h {
                        let si = (i + off) % h;
                        let trow = &tmp[i * w..(i + 1) * w];
                        let drow = &mut dx[si * w..(si + 1) * w];
                        for (d, &s) in drow.iter_mut().zip(trow) {
                            *d += t * s;
                        }
                    }
                }
            }
        },
    ))
}

/// One decomposition level: four undecimated planes of input size.
/// Axis convention: the first filter runs along rows (i), the second along
/// columns (j); `lh` is low over rows and high over columns.
pub struct SwtLevel<T: Scalar> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

pub struct SwtPyramid<T: Scalar> {
    pub levels: Vec<SwtLevel<T>>,
}

/// Stationary wavelet transform of a single [H,W] plane.
pub fn swt2<T: Scalar>(y: &Tensor<T>, f: &WaveletFilter, levels: usize) -> Result<SwtPyramid<T>> {
    let (h, w) = y.dims2()?;
    if levels == 0 {
        return Err(Error::usage("swt2 needs at least one level"));
    }
    let div = 1usize << levels;
    if h % div != 0 || w % div != 0 {
        return Err(Error::geometry(format!(
            "swt2: {h}x{w} not divisible by 2^{levels}"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut ll = y.clone();
    for j in 0..levels {
        let dil = 1usize << j;
        let level = SwtLevel {
            ll: periodic_sep_filter(&ll, &f.h, &f.h, dil)?,
            lh: periodic_sep_filter(&ll, &f.h, &f.g, dil)?,
            hl: periodic_sep_filter(&ll, &f.g, &f.h, dil)?,
            hh: periodic_sep_filter(&ll, &f.g, &f.g, dil)?,
        };
        ll = level.ll.clone();
        out.push(level);
    }
    Ok(SwtPyramid { levels: out })
}

/// Final-level grouping: the LL plane and the three high-frequency planes
/// stacked in LH, HL, HH order.
pub struct DualGroupSubbands<T: Scalar> {
    pub l: Tensor<T>,
    pub h: Tensor<T>,
}

pub fn dual_group<T: Scalar>(p: &SwtPyramid<T>) -> Result<DualGroupSubbands<T>> {
    let last = p
        .levels
        .last()
        .ok_or_else(|| Error::usage("dual_group on empty pyramid"))?;
    Ok(DualGroupSubbands {
        l: last.ll.clone(),
        h: stack_planes(&[&last.lh, &last.hl, &last.hh])?,
    })
}

/// Stack K same-size [H,W] planes into [K,H,W].
fn stack_planes<T: Scalar>(planes: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (h, w) = planes[0].dims2()?;
    let k = planes.len();
    let mut data = Vec::with_capacity(k * h * w);
    let mut parents = Vec::with_capacity(k);
    for p in planes {
        if p.shape() != [h, w] {
            return Err(Error::dimension("stack_planes: mismatched plane shapes"));
        }
        data.extend_from_slice(p.data());
        parents.push((*p).clone());
    }
    Ok(Tensor::from_op(
        vec![k, h, w],
        data,
        parents,
        move |g, sinks| {
            for (i, sink) in sinks.iter_mut().enumerate() {
                if let Some(dp) = sink.as_mut() {
                    for (d, &s) in dp.iter_mut().zip(&g[i * h * w..(i + 1) * h * w]) {
                        *d += s;
                    }
                }
            }
        },
    ))
}

/// Full-range BT.601 luminance: Y = 0.299 R + 0.587 G + 0.114 B.
/// Input [3,H,W] in [0,1]; output [H,W]. Differentiable.
pub fn rgb_to_y<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::dimension(format!("rgb_to_y expects 3 channels, got {c}")));
    }
    let coef = [0.299, 0.587, 0.114].map(T::from_f64);
    let x = img.data();
    let hw = h * w;
    let mut out = vec![T::ZERO; hw];
    for ch in 0..3 {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for (o, &v) in out.iter_mut().zip(plane) {
            *o += coef[ch] * v;
        }
    }
    Ok(Tensor::from_op(
        vec![h, w],
        out,
        vec![img.clone()],
        move |g, sinks| {
            if let Some(dx) = sinks[0].as_mut() {
                for ch in 0..3 {
                    for (d, &s) in dx[ch * hw..(ch + 1) * hw].iter_mut().zip(g) {
                        *d += coef[ch] * s;
                    }
                }
            }
        },
    ))
}

#[derive(Debug, Clone)]
pub struct WaveletLossConfig {
    pub lambda_l: f64,
    pub lambda_h: f64,
    /// Resolution weights for scales {1, 1/2, 1/4}; must sum to 1.
    pub alphas: [f64; 3],
    pub levels: usize,
    pub filter: String,
}

impl Default for WaveletLossConfig {
    fn default() -> Self {
        WaveletLossConfig {
            lambda_l: 0.05,
            lambda_h: 0.01,
            alphas: [0.6, 0.3, 0.1],
            levels: 2,
            filter: "haar".to_string(),
        }
    }
}

impl WaveletLossConfig {
    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.alphas.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("alphas must sum to 1, got {s}")));
        }
        if self.levels == 0 {
            return Err(Error::config("levels must be >= 1"));
        }
        if self.lambda_l < 0.0 || self.lambda_h < 0.0 {
            return Err(Error::config("lambdas must be non-negative"));
        }
        Ok(())
    }
}

/// Dual-group multi-scale wavelet loss between [3,H,W] images in [0,1]:
/// at scales {1, 1/2, 1/4} of the luminance plane, accumulate
/// λ_L·α_s·L1(L groups) + λ_H·α_s·L1(H groups). Differentiable end to end.
pub fn multiscale_wavelet_loss<T: Scalar>(
    sr: &Tensor<T>,
    hr: &Tensor<T>,
    cfg: &WaveletLossConfig,
    filter: &WaveletFilter,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if sr.shape() != hr.shape() {
        return Err(Error::dimension(format!(
            "wavelet loss: {:?} vs {:?}",
            sr.shape(),
            hr.shape()
        )));
    }
    let (_, h, w) = sr.dims3()?;
    let div = 4 << cfg.levels;
    if h % div != 0 || w % div != 0 {
        return Err(Error::geometry(format!(
            "wavelet loss: {h}x{w} must be divisible by {div} so every scale decomposes"
        )));
    }
    let y_sr = rgb_to_y(sr)?;
    let y_hr = rgb_to_y(hr)?;
    let mut total = Tensor::scalar(T::ZERO);
    for (si, &alpha) in cfg.alphas.iter().enumerate() {
        let denom = 1usize << si; // scale s = 1 / denom
        let (sh, sw) = (h / denom, w / denom);
        let (ys, yh) = if denom == 1 {
            (y_sr.clone(), y_hr.clone())
        } else {
            (
                bicubic_resize_t(&y_sr, sh, sw)?,
                bicubic_resize_t(&y_hr, sh, sw)?,
            )
        };
        let g_sr = dual_group(&swt2(&ys, filter, cfg.levels)?)?;
        let g_hr = dual_group(&swt2(&yh, filter, cfg.levels)?)?;
        let term_l = g_sr.l.l1_loss(&g_hr.l)?.scale(T::from_f64(cfg.lambda_l * alpha));
        let term_h = g_sr.h.l1_loss(&g_hr.h)?.scale(T::from_f64(cfg.lambda_h * alpha));
        total = total.add(&term_l)?.add(&term_h)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Rec,
    RecPlusWav,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rec" => Ok(LossMode::Rec),
            "rec_plus_wav" => Ok(LossMode::RecPlusWav),
            other => Err(Error::config(format!("unknown loss mode '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::Rec => "rec",
            LossMode::RecPlusWav => "rec_plus_wav",
        }
    }
}

/// Training objective: mean-L1 on RGB, optionally plus the wavelet term.
pub fn total_loss<T: Scalar>(
    sr: &Tensor<T>,
    hr: &Tensor<T>,
    cfg: &WaveletLossConfig,
    filter: &WaveletFilter,
    mode: LossMode,
) -> Result<Tensor<T>> {
    let rec = sr.l1_loss(hr)?;
    match mode {
        LossMode::Rec => Ok(rec),
        LossMode::RecPlusWav => rec.add(&multiscale_wavelet_loss(sr, hr, cfg, filter)?),
    }
}
