//! Full-reference quality metrics on the luminance channel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::rgb_to_y;

/// Aggregate over an evaluation set; PSNR of identical images contributes
/// the +∞ sentinel.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_images: usize,
    pub border_crop: usize,
}

fn luma_cropped<T: Scalar>(img: &Tensor<T>, border: usize) -> Result<Vec<f64>> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dimension(format!("metrics expect [3,H,W], got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::dimension(format!("metrics expect RGB, got {c} channels")));
    }
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::geometry(format!(
            "border {border} too large for {h}x{w}"
        )));
    }
    let y = rgb_to_y(&img.detach())?;
    let (ch, cw) = (h - 2 * border, w - 2 * border);
    let mut out = Vec::with_capacity(ch * cw);
    for i in 0..ch {
        for j in 0..cw {
            out.push(y.data()[(i + border) * w + j + border].to_f64());
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio on Y over [0,1], after cropping `border`
/// pixels per side. Identical inputs give +∞.
pub fn psnr_y<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, border: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "psnr: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ya = luma_cropped(a, border)?;
    let yb = luma_cropped(b, border)?;
    let mse: f64 = ya
        .iter()
        .zip(&yb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / ya.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filtering.
fn filter_valid(x: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0;
            for (t, &wv) in win.iter().enumerate() {
                acc += wv * x[i * w + j + t];
            }
            tmp[i * ow + j] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (t, &wv) in win.iter().enumerate() {
                acc += wv * tmp[(i + t) * ow + j];
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

/// Single-scale SSIM on Y: 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, averaged over valid window positions.
pub fn ssim_y<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, border: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "ssim: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ya = luma_cropped(a, border)?;
    let yb = luma_cropped(b, border)?;
    let (_, h, w) = a.dims3()?;
    let (h, w) = (h - 2 * border, w - 2 * border);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::geometry(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} after crop, got {h}x{w}"
        )));
    }
    let win = ssim_window();
    let mu_a = filter_valid(&ya, h, w, &win);
    let mu_b = filter_valid(&yb, h, w, &win);
    let aa: Vec<f64> = ya.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = yb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = ya.iter().zip(&yb).map(|(x, y)| x * y).collect();
    let mu_aa = filter_valid(&aa, h, w, &win);
    let mu_bb = filter_valid(&bb, h, w, &win);
    let mu_ab = filter_valid(&ab, h, w, &win);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = mu_aa[i] - ma * ma;
        let vb = mu_bb[i] - mb * mb;
        let cov = mu_ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        total += s;
    }
    Ok(total / mu_a.len() as f64)
}

/// Per-image rows of an evaluation report.
pub fn csv_report(rows: &[(String, f64, f64)]) -> String {
    let mut out = String::from("path,psnr_db,ssim\n");
    for (path, psnr, ssim) in rows {
        out.push_str(&format!("{path},{psnr:.4},{ssim:.6}\n"));
    }
    out
}

pub fn text_table(rows: &[(String, f64, f64)], report: &MetricReport) -> String {
    let name_w = rows
        .iter()
        .map(|(p, _, _)| p.len())
        .chain(["image".len(), "mean".len()].into_iter())
        .max()
        .unwrap_or(8);
    let mut out = format!("{:<name_w$}  {:>9}  {:>7}\n", "image", "psnr(db)", "ssim");
    for (path, psnr, ssim) in rows {
        out.push_str(&format!("{path:<name_w$}  {psnr:>9.4}  {ssim:>7.4}\n"));
    }
    out.push_str(&format!(
        "{:<name_w$}  {:>9.4}  {:>7.4}   ({} images, border {})\n",
        "mean", report.psnr_db, report.ssim, report.n_images, report.border_crop
    ));
    out
}

pub fn aggregate(rows: &[(String, f64, f64)], border: usize) -> MetricReport {
    let n = rows.len().max(1);
    MetricReport {
        psnr_db: rows.iter().map(|r| r.1).sum::<f64>() / n as f64,
        ssim: rows.iter().map(|r| r.2).sum::<f64>() / n as f64,
        n_images: rows.len(),
        border_crop: border,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn randimg(h: usize, w: usize, rng: &mut Rng) -> Tensor<f64> {
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn identical_images_hit_sentinels() {
        let mut rng = Rng::new(1);
        let a = randimg(16, 16, &mut rng);
        assert_eq!(psnr_y(&a, &a, 0).unwrap(), f64::INFINITY);
        assert_eq!(ssim_y(&a, &a, 0).unwrap(), 1.0);
    }

    #[test]
    fn uniform_differences_match_closed_forms() {
        let base = Tensor::full(vec![3, 20, 20], 0.4f64);
        let shift = |d: f64| Tensor::full(vec![3, 20, 20], 0.4 + d);
        // Y of a gray image is the gray value, so ΔY = Δ
        let p = psnr_y(&base, &shift(1.0 / 255.0), 2).unwrap();
        assert!((p - 20.0 * 255.0f64.log10()).abs() < 1e-3, "{p}");
        let p = psnr_y(&base, &shift(0.1), 2).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
    }

    #[test]
    fn psnr_decreases_with_difference() {
        let base = Tensor::full(vec![3, 16, 16], 0.2f64);
        let mut last = f64::INFINITY;
        for d in [0.01, 0.02, 0.05, 0.1, 0.3] {
            let p = psnr_y(&base, &Tensor::full(vec![3, 16, 16], 0.2 + d), 0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_symmetry_and_range() {
        let mut rng = Rng::new(2);
        let a = randimg(18, 18, &mut rng);
        let b = randimg(18, 18, &mut rng);
        let ab = ssim_y(&a, &b, 0).unwrap();
        let ba = ssim_y(&b, &a, 0).unwrap();
        assert_eq!(ab, ba);
        assert!(ab <= 1.0);
        assert!(ab < 1.0); // different images
    }

    #[test]
    fn ssim_matches_independent_windowed_oracle() {
        let mut rng = Rng::new(3);
        let a = randimg(16, 16, &mut rng);
        let b = randimg(16, 16, &mut rng);
        let got = ssim_y(&a, &b, 0).unwrap();

        // oracle: direct per-window statistics, no separable filtering
        let y = |img: &Tensor<f64>| -> Vec<f64> {
            let hw = 256;
            (0..hw)
                .map(|p| {
                    0.299 * img.data()[p] + 0.587 * img.data()[hw + p] + 0.114 * img.data()[2 * hw + p]
                })
                .collect()
        };
        let (ya, yb) = (y(&a), y(&b));
        let win = ssim_window();
        let mut total = 0.0;
        let mut count = 0.0;
        for oy in 0..6 {
            for ox in 0..6 {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wgt = win[dy] * win[dx];
                        let pa = ya[(oy + dy) * 16 + ox + dx];
                        let pb = yb[(oy + dy) * 16 + ox + dx];
                        ma += wgt * pa;
                        mb += wgt * pb;
                        maa += wgt * pa * pa;
                        mbb += wgt * pb * pb;
                        mab += wgt * pa * pb;
                    }
                }
                let (c1, c2) = (0.0001, 0.0009);
                let s = ((2.0 * ma * mb + c1) * (2.0 * (mab - ma * mb) + c2))
                    / ((ma * ma + mb * mb + c1) * ((maa - ma * ma) + (mbb - mb * mb) + c2));
                total += s;
                count += 1.0;
            }
        }
        let expect = total / count;
        assert!((got - expect).abs() <= 1e-8, "{got} vs {expect}");
    }

    #[test]
    fn metrics_invariant_to_shared_circular_shift_of_periodic_content() {
        // period-4 content shifted by its period: identical window sets
        let mut rng = Rng::new(4);
        let tile: Vec<f64> = (0..3 * 16).map(|_| rng.uniform()).collect();
        let build = |dy: usize, dx: usize| -> Tensor<f64> {
            let mut data = vec![0.0; 3 * 16 * 16];
            for c in 0..3 {
                for i in 0..16 {
                    for j in 0..16 {
                        let ti = ((i + dy) % 4) * 4 + (j + dx) % 4;
                        data[c * 256 + i * 16 + j] = tile[c * 16 + ti];
                    }
                }
            }
            Tensor::new(vec![3, 16, 16], data).unwrap()
        };
        let (a0, b0) = (build(0, 0), build(1, 2));
        let (a4, b4) = (build(0, 0), build(1, 2));
        // shifting both by a full period leaves the images bitwise equal
        assert_eq!(psnr_y(&a0, &b0, 0).unwrap(), psnr_y(&a4, &b4, 0).unwrap());
        assert_eq!(ssim_y(&a0, &b0, 0).unwrap(), ssim_y(&a4, &b4, 0).unwrap());
    }

    #[test]
    fn borders_and_sizes_enforced() {
        let a = Tensor::<f64>::zeros(vec![3, 12, 12]);
        assert!(psnr_y(&a, &a, 6).is_err());
        assert!(ssim_y(&a, &a, 1).is_err()); // 10 < 11 after crop
        let b = Tensor::<f64>::zeros(vec![3, 12, 10]);
        assert!(psnr_y(&a, &b, 0).is_err());
    }

    #[test]
    fn report_formats() {
        let rows = vec![
            ("a.ppm".to_string(), 31.5, 0.91),
            ("b.ppm".to_string(), 29.5, 0.89),
        ];
        let rep = aggregate(&rows, 2);
        assert!((rep.psnr_db - 30.5).abs() < 1e-12);
        let csv = csv_report(&rows);
        assert!(csv.starts_with("path,psnr_db,ssim\n"));
        assert!(csv.contains("a.ppm,31.5000,0.910000"));
        let table = text_table(&rows, &rep);
        assert!(table.contains("mean"));
        assert!(table.contains("2 images"));
    }
}
