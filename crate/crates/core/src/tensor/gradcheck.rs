use super::{backward, no_grad, Tensor};
use crate::error::{Error, Result};

/// Central-difference check of reverse-mode gradients, 64-bit only.
///
/// Returns the max relative error between (f(x+h·e)−f(x−h·e))/(2h) and the
/// gradient from `backward`, with denominator max(|analytic|, |numeric|, 1e-8).
pub fn grad_check(
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<f64> {
    let leaf = x.requires_grad();
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::usage(format!(
            "grad_check target must be scalar, got {:?}",
            y.shape()
        )));
    }
    backward(&y)?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let base = x.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let (fp, fm) = no_grad(|| -> Result<(f64, f64)> {
            let tp = Tensor::new(x.shape().to_vec(), plus)?;
            let tm = Tensor::new(x.shape().to_vec(), minus)?;
            Ok((f(&tp)?.item()?, f(&tm)?.item()?))
        })?;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
