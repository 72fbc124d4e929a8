//! Verification harness shared by the `selftest` command and the acceptance
//! suite: finite-difference gradient checks over every differentiable
//! operation and the end-to-end micro model, the WKV scan/naive equivalence
//! trials, and the stationary-wavelet property suite.

use crate::detail::{Rcb, Rdeg};
use crate::error::Result;
use crate::fusion::{Gdrm, Psam, SpatialAttention};
use crate::model::{GdsrModel, ModelConfig};
use crate::nn::Parameter;
use crate::resample::bicubic_resize_t;
use crate::rng::Rng;
use crate::rwkv::{bi_wkv_naive, bi_wkv_scan, re_wkv, ChannelMix, OmniShift, SpatialMix};
use crate::scalar::DType;
use crate::tensor::{backward, grad_check, no_grad, Tensor};
use crate::wavelet::{multiscale_wavelet_loss, rgb_to_y, swt2, WaveletFilter, WaveletLossConfig};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn from_err(name: &str, tol: f64, result: Result<f64>) -> Self {
        match result {
            Ok(err) => CheckOutcome {
                name: name.to_string(),
                passed: err < tol,
                detail: format!("max rel err {err:.3e} (tol {tol:.0e})"),
            },
            Err(e) => CheckOutcome {
                name: name.to_string(),
                passed: false,
                detail: format!("failed to run: {e}"),
            },
        }
    }

    fn bool(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn randt(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

fn sq(t: Tensor<f64>) -> Tensor<f64> {
    t.mul(&t).unwrap().sum_all()
}

/// Gradient checks for every differentiable operation, inputs bounded in
/// [-2, 2], kink-avoiding where the op is piecewise.
pub fn gradient_suite() -> Vec<CheckOutcome> {
    let tol = 1e-5;
    let h = 1e-4;
    let mut rng = Rng::new(0x5eed);
    let mut out = Vec::new();

    {
        let x = randt(vec![1, 2, 6, 6], -2.0, 2.0, &mut rng);
        let w = randt(vec![3, 2, 3, 3], -0.8, 0.8, &mut rng);
        let b = randt(vec![3], -0.3, 0.3, &mut rng);
        out.push(CheckOutcome::from_err(
            "conv2d/dx",
            tol,
            grad_check(|v| v.conv2d(&w, &b, 1, 1).map(&sq), &x, h),
        ));
        out.push(CheckOutcome::from_err(
            "conv2d/dw",
            tol,
            grad_check(|v| x.conv2d(v, &b, 1, 1).map(&sq), &w, h),
        ));
        out.push(CheckOutcome::from_err(
            "conv2d/db",
            tol,
            grad_check(|v| x.conv2d(&w, v, 1, 1).map(&sq), &b, h),
        ));
        let wd = randt(vec![2, 5, 5], -0.5, 0.5, &mut rng);
        out.push(CheckOutcome::from_err(
            "depthwise_conv2d/dx",
            tol,
            grad_check(|v| v.depthwise_conv2d(&wd, 2).map(&sq), &x, h),
        ));
        out.push(CheckOutcome::from_err(
            "depthwise_conv2d/dw",
            tol,
            grad_check(|v| x.depthwise_conv2d(v, 2).map(&sq), &wd, h),
        ));
    }
    {
        let x = randt(vec![4, 5], -2.0, 2.0, &mut rng);
        let w = randt(vec![5, 3], -0.8, 0.8, &mut rng);
        out.push(CheckOutcome::from_err(
            "linear/dx",
            tol,
            grad_check(|v| v.linear(&w).map(&sq), &x, h),
        ));
        out.push(CheckOutcome::from_err(
            "linear/dw",
            tol,
            grad_check(|v| x.linear(v).map(&sq), &w, h),
        ));
        let g = randt(vec![5], 0.5, 1.5, &mut rng);
        let beta = randt(vec![5], -0.5, 0.5, &mut rng);
        out.push(CheckOutcome::from_err(
            "layer_norm/dx",
            tol,
            grad_check(|v| v.layer_norm(&g, &beta, 1e-5).map(&sq), &x, h),
        ));
        out.push(CheckOutcome::from_err(
            "layer_norm/dgamma",
            tol,
            grad_check(|v| x.layer_norm(v, &beta, 1e-5).map(&sq), &g, h),
        ));
        out.push(CheckOutcome::from_err(
            "layer_norm/dbeta",
            tol,
            grad_check(|v| x.layer_norm(&g, v, 1e-5).map(&sq), &beta, h),
        ));
    }
    {
        let x = randt(vec![24], -2.0, 2.0, &mut rng);
        out.push(CheckOutcome::from_err(
            "sigmoid",
            tol,
            grad_check(|v| Ok(sq(v.sigmoid())), &x, h),
        ));
        out.push(CheckOutcome::from_err(
            "squared_relu",
            tol,
            grad_check(|v| Ok(sq(v.squared_relu())), &x, h),
        ));
        // keep the rectifier inputs away from the kink at 0
        let far: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        let xf = Tensor::new(vec![24], far).unwrap();
        out.push(CheckOutcome::from_err(
            "leaky_relu",
            tol,
            grad_check(|v| Ok(sq(v.leaky_relu())), &xf, h),
        ));
        let a = randt(vec![16], 0.5, 2.0, &mut rng);
        let b = randt(vec![16], -2.0, -0.5, &mut rng);
        out.push(CheckOutcome::from_err(
            "l1_loss",
            tol,
            grad_check(|v| v.l1_loss(&b), &a, h),
        ));
        let px = randt(vec![1, 8, 3, 3], -2.0, 2.0, &mut rng);
        out.push(CheckOutcome::from_err(
            "pixel_shuffle",
            tol,
            grad_check(|v| v.pixel_shuffle(2).map(&sq), &px, h),
        ));
    }
    {
        let t_len = 8;
        let c = 3;
        let k = randt(vec![t_len, c], -1.5, 1.5, &mut rng);
        let v = randt(vec![t_len, c], -1.5, 1.5, &mut rng);
        let w = randt(vec![c], 0.5, 4.0, &mut rng);
        let u = randt(vec![c], -0.5, 0.5, &mut rng);
        let (v1, w1, u1) = (v.clone(), w.clone(), u.clone());
        out.push(CheckOutcome::from_err(
            "bi_wkv_naive/dk",
            tol,
            grad_check(move |t| bi_wkv_naive(t, &v1, &w1, &u1).map(&sq), &k, h),
        ));
        let (k1, w1, u1) = (k.clone(), w.clone(), u.clone());
        out.push(CheckOutcome::from_err(
            "bi_wkv_naive/dv",
            tol,
            grad_check(move |t| bi_wkv_naive(&k1, t, &w1, &u1).map(&sq), &v, h),
        ));
        let (k1, v1, u1) = (k.clone(), v.clone(), u.clone());
        out.push(CheckOutcome::from_err(
            "bi_wkv_naive/dw",
            tol,
            grad_check(move |t| bi_wkv_naive(&k1, &v1, t, &u1).map(&sq), &w, h),
        ));
        let (k1, v1, w1) = (k.clone(), v.clone(), w.clone());
        out.push(CheckOutcome::from_err(
            "bi_wkv_naive/du",
            tol,
            grad_check(move |t| bi_wkv_naive(&k1, &v1, &w1, t).map(&sq), &u, h),
        ));
        let (v1, w1, u1) = (v.clone(), w.clone(), u.clone());
        out.push(CheckOutcome::from_err(
            "bi_wkv_scan/dk",
            tol,
            grad_check(move |t| bi_wkv_scan(t, &v1, &w1, &u1).map(&sq), &k, h),
        ));
        let (k1, w1, u1) = (k.clone(), w.clone(), u.clone());
        out.push(CheckOutcome::from_err(
            "bi_wkv_scan/dv",
            tol,
            grad_check(move |t| bi_wkv_scan(&k1, t, &w1, &u1).map(&sq), &v, h),
        ));
        let (k1, v1, u1) = (k.clone(), v.clone(), u.clone());
        out.push(CheckOutcome::from_err(
            "bi_wkv_scan/dw",
            tol,
            grad_check(move |t| bi_wkv_scan(&k1, &v1, t, &u1).map(&sq), &w, h),
        ));
        let (k1, v1, w1) = (k.clone(), v.clone(), w.clone());
        out.push(CheckOutcome::from_err(
            "bi_wkv_scan/du",
            tol,
            grad_check(move |t| bi_wkv_scan(&k1, &v1, &w1, t).map(&sq), &u, h),
        ));
        let (k1, w1, u1) = (k.clone(), w.clone(), u.clone());
        out.push(CheckOutcome::from_err(
            "re_wkv",
            tol,
            grad_check(move |t| re_wkv(&k1, t, 2, 4, &w1, &u1).map(&sq), &v, h),
        ));
    }
    {
        let mut r2 = Rng::new(0xabc);
        let omni = OmniShift::<f64>::new("st.omni", 3);
        let k = crate::nn::uniform_init::<f64>(75, 0.4, &mut r2);
        omni.kernel.set_data(k).unwrap();
        let x = randt(vec![1, 3, 5, 5], -2.0, 2.0, &mut rng);
        out.push(CheckOutcome::from_err(
            "omni_shift",
            tol,
            grad_check(|v| omni.forward(v).map(&sq), &x, h),
        ));
        let sm = SpatialMix::<f64>::new("st.sm", 3, &mut r2);
        let tok = randt(vec![1, 8, 3], -1.0, 1.0, &mut rng);
        out.push(CheckOutcome::from_err(
            "spatial_mix",
            tol,
            grad_check(|v| sm.forward(v, 2, 4).map(&sq), &tok, h),
        ));
        let cm = ChannelMix::<f64>::new("st.cm", 3, &mut r2);
        out.push(CheckOutcome::from_err(
            "channel_mix",
            tol,
            grad_check(|v| cm.forward(v, 2, 4).map(&sq), &tok, h),
        ));
        let rcb = Rcb::<f64>::new("st.rcb", 3, &mut r2);
        rcb.w1
            .weight
            .set_data(crate::nn::uniform_init::<f64>(81, 0.3, &mut r2))
            .unwrap();
        out.push(CheckOutcome::from_err(
            "rcb",
            tol,
            grad_check(|v| rcb.forward(v).map(&sq), &x, h),
        ));
        let rdeg = Rdeg::<f64>::new("st.rdeg", 3, 2, &mut r2).unwrap();
        for b in &rdeg.blocks {
            b.w1.weight
                .set_data(crate::nn::uniform_init::<f64>(81, 0.3, &mut r2))
                .unwrap();
        }
        out.push(CheckOutcome::from_err(
            "rdeg",
            tol,
            grad_check(|v| rdeg.forward(v).map(&sq), &x, h),
        ));
        let sa = SpatialAttention::<f64>::new("st.sa", &mut r2);
        out.push(CheckOutcome::from_err(
            "spatial_attention",
            tol,
            grad_check(|v| sa.forward(v).map(&sq), &x, h),
        ));
        let psam = Psam::<f64>::new("st.psam", 1.0 / 3.0, &mut r2);
        out.push(CheckOutcome::from_err(
            "psam",
            tol,
            grad_check(|v| psam.forward(v).map(&sq), &x, h),
        ));
        let gdrm = Gdrm::<f64>::new("st.gdrm", 4, 1.0 / 3.0, &mut r2);
        let fg = randt(vec![1, 4, 4, 4], -1.0, 1.0, &mut rng);
        let fd = randt(vec![1, 4, 4, 4], -1.0, 1.0, &mut rng);
        out.push(CheckOutcome::from_err(
            "gdrm",
            tol,
            grad_check(|v| gdrm.forward(v, &fd).map(&sq), &fg, h),
        ));
        let _ = &fg;
    }
    {
        let x = randt(vec![8, 8], -1.0, 1.0, &mut rng);
        out.push(CheckOutcome::from_err(
            "bicubic_resize",
            tol,
            grad_check(|v| bicubic_resize_t(v, 4, 4).map(&sq), &x, h),
        ));
        let img = randt(vec![3, 8, 8], 0.0, 1.0, &mut rng);
        out.push(CheckOutcome::from_err(
            "rgb_to_y",
            tol,
            grad_check(|v| rgb_to_y(v).map(&sq), &img, h),
        ));
        let hr = randt(vec![3, 8, 8], 0.0, 0.2, &mut rng);
        let sr = randt(vec![3, 8, 8], 0.5, 1.0, &mut rng);
        let cfg = WaveletLossConfig {
            levels: 1,
            ..WaveletLossConfig::default()
        };
        let filt = WaveletFilter::haar();
        out.push(CheckOutcome::from_err(
            "multiscale_wavelet_loss",
            tol,
            grad_check(|v| multiscale_wavelet_loss(v, &hr, &cfg, &filt), &sr, h),
        ));
    }
    out
}

/// Central-difference check of every coordinate (or a seeded sample of at
/// most `max_coords`) of one parameter against the loss gradient.
pub fn grad_check_param(
    f_loss: impl Fn() -> Result<Tensor<f64>>,
    p: &Arc<Parameter<f64>>,
    h: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<f64> {
    p.zero_grad();
    let loss = f_loss()?;
    backward(&loss)?;
    let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
    p.zero_grad();
    let base = p.data();
    let n = base.len();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        (0..max_coords).map(|_| rng.below(n)).collect()
    };
    let mut max_rel = 0.0f64;
    for &i in &coords {
        let mut plus = base.clone();
        plus[i] += h;
        p.set_data(plus)?;
        let fp = no_grad(&f_loss)?.item()?;
        let mut minus = base.clone();
        minus[i] -= h;
        p.set_data(minus)?;
        let fm = no_grad(&f_loss)?.item()?;
        p.set_data(base.clone())?;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}

/// End-to-end check on the micro model: loss gradient w.r.t. the input and
/// every parameter (full for small tensors, seeded sample for large ones).
pub fn end_to_end_gradient_check() -> CheckOutcome {
    let tol = 1e-4;
    let run = || -> Result<f64> {
        let cfg = ModelConfig {
            scale: 2,
            channels: 4,
            n_groups: 1,
            blocks_per_rgeg: 1,
            rcbs_per_rdeg: 1,
            psam_coeff: 1.0 / 3.0,
            dtype: DType::F64,
        };
        let mut rng = Rng::new(0xe2e);
        let model = GdsrModel::<f64>::new(&cfg, &mut rng)?;
        let x = randt(vec![1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let target = randt(vec![1, 3, 16, 16], 0.0, 1.0, &mut rng);
        // smooth objective keeps the finite differences clean; the step is
        // smaller than the per-op checks because truncation error compounds
        // through the deep composition
        let h = 5e-5;
        let loss_of = |sr: Tensor<f64>| -> Result<Tensor<f64>> {
            let d = sr.sub(&target)?;
            Ok(d.mul(&d)?.mean_all())
        };
        let mut worst = grad_check(|v| loss_of(model.forward(v)?), &x, h)?;

        let params = model.params()?;
        let mut crng = Rng::new(0xc0de);
        for p in params.iter() {
            let err = grad_check_param(
                || loss_of(model.forward(&x)?),
                p,
                h,
                12,
                &mut crng,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    };
    CheckOutcome::from_err("end_to_end_micro_model", tol, run())
}

/// Criterion: scan and naive agree within 1e-10 with convexity and exact
/// reversal equivariance on every trial.
pub fn wkv_suite(trials: usize) -> Vec<CheckOutcome> {
    let mut rng = Rng::new(0x3717);
    let mut max_gap = 0.0f64;
    let mut convex_ok = true;
    let mut reversal_ok = true;
    for _ in 0..trials {
        let t_len = 1 + rng.below(64);
        let c = 1 + rng.below(4);
        let k = randt(vec![t_len, c], -2.0, 2.0, &mut rng);
        let v = randt(vec![t_len, c], -2.0, 2.0, &mut rng);
        let w = randt(vec![c], -1.0, 8.0, &mut rng);
        let u = randt(vec![c], -1.0, 1.0, &mut rng);
        let a = bi_wkv_naive(&k, &v, &w, &u).unwrap();
        let b = bi_wkv_scan(&k, &v, &w, &u).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            max_gap = max_gap.max((x - y).abs());
        }
        for ch in 0..c {
            let lo = (0..t_len)
                .map(|t| v.data()[t * c + ch])
                .fold(f64::MAX, f64::min);
            let hi = (0..t_len)
                .map(|t| v.data()[t * c + ch])
                .fold(f64::MIN, f64::max);
            for t in 0..t_len {
                let y = b.data()[t * c + ch];
                if y < lo - 1e-12 || y > hi + 1e-12 {
                    convex_ok = false;
                }
            }
        }
        let rev = |t: &Tensor<f64>| -> Tensor<f64> {
            let mut d = vec![0.0; t.numel()];
            for i in 0..t_len {
                for ch in 0..c {
                    d[i * c + ch] = t.data()[(t_len - 1 - i) * c + ch];
                }
            }
            Tensor::new(vec![t_len, c], d).unwrap()
        };
        let yr = bi_wkv_scan(&rev(&k), &rev(&v), &w, &u).unwrap();
        if rev(&b).data() != yr.data() {
            reversal_ok = false;
        }
    }
    vec![
        CheckOutcome::bool(
            "wkv_scan_vs_naive",
            max_gap <= 1e-10,
            format!("max abs gap {max_gap:.3e} over {trials} trials (tol 1e-10)"),
        ),
        CheckOutcome::bool(
            "wkv_convexity",
            convex_ok,
            "outputs within [min v, max v] per channel".to_string(),
        ),
        CheckOutcome::bool(
            "wkv_reversal_equivariance",
            reversal_ok,
            "bitwise equal under sequence reversal".to_string(),
        ),
    ]
}

// independent dense-convolution reference for the impulse check
fn dense_subband(x: &[f64], h: usize, w: usize, fr: &[f64], fc: &[f64], dil: usize) -> Vec<f64> {
    let dilate = |f: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; (f.len() - 1) * dil + 1];
        for (i, &v) in f.iter().enumerate() {
            out[i * dil] = v;
        }
        out
    };
    let (fr, fc) = (dilate(fr), dilate(fc));
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (m, &fv) in fr.iter().enumerate() {
                acc += fv * x[((i + m) % h) * w + j];
            }
            tmp[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (m, &fv) in fc.iter().enumerate() {
                acc += fv * tmp[i * w + (j + m) % w];
            }
            out[i * w + j] = acc;
        }
    }
    out
}

pub fn swt_suite() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let f = WaveletFilter::haar();
    let mut rng = Rng::new(0x5a7);
    let (h, w) = (16usize, 16usize);

    // linearity
    {
        let xa: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
        let xb: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
        let (ca, cb) = (1.3, -0.7);
        let mix: Vec<f64> = xa.iter().zip(&xb).map(|(a, b)| ca * a + cb * b).collect();
        let pa = swt2(&Tensor::new(vec![h, w], xa).unwrap(), &f, 2).unwrap();
        let pb = swt2(&Tensor::new(vec![h, w], xb).unwrap(), &f, 2).unwrap();
        let pm = swt2(&Tensor::new(vec![h, w], mix).unwrap(), &f, 2).unwrap();
        let mut worst = 0.0f64;
        for ((la, lb), lm) in pa.levels.iter().zip(&pb.levels).zip(&pm.levels) {
            for ((a, b), m) in [&la.ll, &la.lh, &la.hl, &la.hh]
                .iter()
                .zip([&lb.ll, &lb.lh, &lb.hl, &lb.hh].iter())
                .zip([&lm.ll, &lm.lh, &lm.hl, &lm.hh].iter())
            {
                for i in 0..h * w {
                    worst = worst.max((m.data()[i] - (ca * a.data()[i] + cb * b.data()[i])).abs());
                }
            }
        }
        out.push(CheckOutcome::bool(
            "swt_linearity",
            worst <= 1e-12,
            format!("max deviation {worst:.3e} (tol 1e-12)"),
        ));
    }

    // exact circular-shift equivariance
    {
        let img: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
        let (di, dj) = (5usize, 2usize);
        let mut shifted = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                shifted[((i + di) % h) * w + (j + dj) % w] = img[i * w + j];
            }
        }
        let p1 = swt2(&Tensor::new(vec![h, w], img).unwrap(), &f, 2).unwrap();
        let p2 = swt2(&Tensor::new(vec![h, w], shifted).unwrap(), &f, 2).unwrap();
        let mut exact = true;
        for (l1, l2) in p1.levels.iter().zip(&p2.levels) {
            for (a, b) in [
                (&l1.ll, &l2.ll),
                (&l1.lh, &l2.lh),
                (&l1.hl, &l2.hl),
                (&l1.hh, &l2.hh),
            ] {
                for i in 0..h {
                    for j in 0..w {
                        if a.data()[i * w + j].to_bits()
                            != b.data()[((i + di) % h) * w + (j + dj) % w].to_bits()
                        {
                            exact = false;
                        }
                    }
                }
            }
        }
        out.push(CheckOutcome::bool(
            "swt_shift_equivariance",
            exact,
            "bitwise equal under circular shifts".to_string(),
        ));
    }

    // constants: zero high-pass, LL gain 2^levels
    {
        let c = Tensor::full(vec![h, w], 0.5f64);
        let p = swt2(&c, &f, 2).unwrap();
        let hf_zero = p.levels.iter().all(|l| {
            [&l.lh, &l.hl, &l.hh]
                .iter()
                .all(|pl| pl.data().iter().all(|&v| v == 0.0))
        });
        let ll_err = p.levels[1]
            .ll
            .data()
            .iter()
            .map(|v| (v - 2.0).abs())
            .fold(0.0f64, f64::max);
        out.push(CheckOutcome::bool(
            "swt_constant_hf_zero",
            hf_zero,
            "high-pass planes of a constant are exactly zero".to_string(),
        ));
        out.push(CheckOutcome::bool(
            "swt_constant_ll_gain",
            ll_err < 1e-12,
            format!("0.5 -> 2.0 at 2 levels, max err {ll_err:.3e}"),
        ));
    }

    // impulse response vs the dense-convolution reference
    {
        let mut img = vec![0.0; h * w];
        img[5 * w + 9] = 1.0;
        let p = swt2(&Tensor::new(vec![h, w], img.clone()).unwrap(), &f, 2).unwrap();
        let mut worst = 0.0f64;
        let mut ll = img.clone();
        for (j, lvl) in p.levels.iter().enumerate() {
            let dil = 1usize << j;
            for (plane, (fr, fc)) in [
                (&lvl.ll, (&f.h, &f.h)),
                (&lvl.lh, (&f.h, &f.g)),
                (&lvl.hl, (&f.g, &f.h)),
                (&lvl.hh, (&f.g, &f.g)),
            ] {
                let expect = dense_subband(&ll, h, w, fr, fc, dil);
                for (a, b) in plane.data().iter().zip(&expect) {
                    worst = worst.max((a - b).abs());
                }
            }
            ll = dense_subband(&ll, h, w, &f.h, &f.h, dil);
        }
        out.push(CheckOutcome::bool(
            "swt_impulse_vs_dense_oracle",
            worst <= 1e-10,
            format!("max deviation {worst:.3e} (tol 1e-10)"),
        ));
    }

    out
}

/// Everything the `selftest` command runs.
pub fn run_all() -> (Vec<CheckOutcome>, bool) {
    let mut all = gradient_suite();
    all.push(end_to_end_gradient_check());
    all.extend(wkv_suite(100));
    all.extend(swt_suite());
    let ok = all.iter().all(|c| c.passed);
    (all, ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wkv_and_swt_suites_pass() {
        for c in wkv_suite(20) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        for c in swt_suite() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
