//! Convolutional detail branch: residual convolution blocks chained into a
//! detail-extraction group.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Parameter, ScalarParam};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::sync::Arc;

/// Residual convolution block: out = alpha·x + w1(lrelu(w0(x))).
/// w1 starts at zero so the block opens as the identity.
pub struct Rcb<T: Scalar> {
    pub w0: Conv2d<T>,
    pub w1: Conv2d<T>,
    pub alpha: ScalarParam<T>,
}

impl<T: Scalar> Rcb<T> {
    pub fn new(name: &str, c: usize, rng: &mut Rng) -> Self {
        Rcb {
            w0: Conv2d::new(&format!("{name}.w0"), c, c, 3, 1, rng),
            w1: Conv2d::new_zeroed(&format!("{name}.w1"), c, c, 3, 1),
            alpha: ScalarParam::new(&format!("{name}.alpha"), T::ONE),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let inner = self.w1.forward(&self.w0.forward(x)?.leaky_relu())?;
        x.mul_scalar_t(&self.alpha.tensor())?.add(&inner)
    }

    pub fn params(&self, out: &mut Vec<Arc<Parameter<T>>>) {
        self.w0.params(out);
        self.w1.params(out);
        self.alpha.params(out);
    }
}

/// Sequential chain of N residual convolution blocks; no group-level
/// residual or tail.
pub struct Rdeg<T: Scalar> {
    pub blocks: Vec<Rcb<T>>,
}

impl<T: Scalar> Rdeg<T> {
    pub fn new(name: &str, c: usize, n_blocks: usize, rng: &mut Rng) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::config("rdeg needs at least one block"));
        }
        Ok(Rdeg {
            blocks: (0..n_blocks)
                .map(|i| Rcb::new(&format!("{name}.blocks.{i}"), c, rng))
                .collect(),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y)?;
        }
        Ok(y)
    }

    pub fn params(&self, out: &mut Vec<Arc<Parameter<T>>>) {
        for b in &self.blocks {
            b.params(out);
        }
    }
}
