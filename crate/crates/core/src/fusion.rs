//! Branch fusion: spatial attention applied over three axis arrangements
//! (PSAM), then a gated global-detail merge producing w·(F_G + F_D) + b.

use crate::error::Result;
use crate::nn::{Conv2d, Parameter};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::sync::Arc;

/// Single-plane spatial attention: gate = sigmoid(conv7([mean_c; max_c])).
pub struct SpatialAttention<T: Scalar> {
    pub conv7: Conv2d<T>,
}

impl<T: Scalar> SpatialAttention<T> {
    pub fn new(name: &str, rng: &mut Rng) -> Self {
        SpatialAttention {
            conv7: Conv2d::new(&format!("{name}.conv7"), 2, 1, 7, 3, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = x.channel_mean()?.concat_channels(&x.channel_max()?)?;
        let gate = self.conv7.forward(&pooled)?.sigmoid();
        x.mul_gate(&gate)
    }

    pub fn params(&self, out: &mut Vec<Arc<Parameter<T>>>) {
        self.conv7.params(out);
    }
}

/// Permuted spatial attention over HW, CW and HC arrangements. The pooled
/// axis is C for HW, H for CW, and W for HC; outputs are unpermuted, summed
/// and scaled by `coeff`.
pub struct Psam<T: Scalar> {
    pub sa_hw: SpatialAttention<T>,
    pub sa_cw: SpatialAttention<T>,
    pub sa_hc: SpatialAttention<T>,
    pub coeff: T,
}

impl<T: Scalar> Psam<T> {
    pub fn new(name: &str, coeff: T, rng: &mut Rng) -> Self {
        Psam {
            sa_hw: SpatialAttention::new(&format!("{name}.sa_hw"), rng),
            sa_cw: SpatialAttention::new(&format!("{name}.sa_cw"), rng),
            sa_hc: SpatialAttention::new(&format!("{name}.sa_hc"), rng),
            coeff,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f_hw = self.sa_hw.forward(x)?;
        // N,C,H,W -> N,H,C,W: pooled axis H, spatial grid (C, W)
        let cw = x.permute4([0, 2, 1, 3])?;
        let f_cw = self.sa_cw.forward(&cw)?.permute4([0, 2, 1, 3])?;
        // N,C,H,W -> N,W,H,C: pooled axis W, spatial grid (H, C)
        let hc = x.permute4([0, 3, 2, 1])?;
        let f_hc = self.sa_hc.forward(&hc)?.permute4([0, 3, 2, 1])?;
        Ok(f_hw.add(&f_cw)?.add(&f_hc)?.scale(self.coeff))
    }

    pub fn params(&self, out: &mut Vec<Arc<Parameter<T>>>) {
        self.sa_hw.params(out);
        self.sa_cw.params(out);
        self.sa_hc.params(out);
    }
}

/// Global-detail reconstruction: PSAM both branches, derive a shared map,
/// gate w = σ(w0(lrelu(s))) and bias b = w1(s), out = w ⊙ (g + d) + b.
pub struct Gdrm<T: Scalar> {
    pub psam_g: Psam<T>,
    pub psam_d: Psam<T>,
    pub w_shared: Conv2d<T>,
    pub w0: Conv2d<T>,
    pub w1: Conv2d<T>,
}

impl<T: Scalar> Gdrm<T> {
    pub fn new(name: &str, c: usize, coeff: T, rng: &mut Rng) -> Self {
        Gdrm {
            psam_g: Psam::new(&format!("{name}.psam_g"), coeff, rng),
            psam_d: Psam::new(&format!("{name}.psam_d"), coeff, rng),
            w_shared: Conv2d::new(&format!("{name}.w_shared"), 2 * c, c, 3, 1, rng),
            w0: Conv2d::new(&format!("{name}.w0"), c, c, 3, 1, rng),
            w1: Conv2d::new(&format!("{name}.w1"), c, c, 3, 1, rng),
        }
    }

    pub fn forward(&self, f_g: &Tensor<T>, f_d: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.psam_g.forward(f_g)?;
        let d = self.psam_d.forward(f_d)?;
        let shared = self.w_shared.forward(&g.concat_channels(&d)?)?;
        let w = self.w0.forward(&shared.leaky_relu())?.sigmoid();
        let b = self.w1.forward(&shared)?;
        g.add(&d)?.mul(&w)?.add(&b)
    }

    pub fn params(&self, out: &mut Vec<Arc<Parameter<T>>>) {
        self.psam_g.params(out);
        self.psam_d.params(out);
        self.w_shared.params(out);
        self.w0.params(out);
        self.w1.params(out);
    }
}
