//! Full network assembly: shallow extraction, K parallel global/detail
//! group stages with gated fusion fed back to the detail path only, a global
//! residual, and a pixel-shuffle upsampler.

use crate::detail::Rdeg;
use crate::error::{Error, Result};
use crate::fusion::Gdrm;
use crate::nn::{Conv2d, ParamSet, Parameter};
use crate::rng::Rng;
use crate::rwkv::Rgeg;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub scale: usize,
    pub channels: usize,
    pub n_groups: usize,
    pub blocks_per_rgeg: usize,
    pub rcbs_per_rdeg: usize,
    pub psam_coeff: f64,
    pub dtype: DType,
}

impl ModelConfig {
    /// Configuration of the published full-size model.
    pub fn paper(scale: usize) -> Self {
        ModelConfig {
            scale,
            channels: 96,
            n_groups: 4,
            blocks_per_rgeg: 6,
            rcbs_per_rdeg: 12,
            psam_coeff: 1.0 / 3.0,
            dtype: DType::F32,
        }
    }

    /// Small configuration for desk-scale experiments.
    pub fn micro(scale: usize) -> Self {
        ModelConfig {
            scale,
            channels: 16,
            n_groups: 1,
            blocks_per_rgeg: 2,
            rcbs_per_rdeg: 2,
            psam_coeff: 1.0 / 3.0,
            dtype: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 3 | 4) {
            return Err(Error::config(format!("scale must be 2, 3 or 4, got {}", self.scale)));
        }
        if self.channels == 0
            || self.n_groups == 0
            || self.blocks_per_rgeg == 0
            || self.rcbs_per_rdeg == 0
        {
            return Err(Error::config("all depth/width fields must be positive"));
        }
        if !(self.psam_coeff.is_finite() && self.psam_coeff > 0.0) {
            return Err(Error::config("psam_coeff must be positive"));
        }
        Ok(())
    }
}

/// One group stage: parallel global and detail groups plus their fusion.
pub struct Group<T: Scalar> {
    pub rgeg: Rgeg<T>,
    pub rdeg: Rdeg<T>,
    pub gdrm: Gdrm<T>,
}

pub struct GdsrModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub shallow: Conv2d<T>,
    pub groups: Vec<Group<T>>,
    pub up_conv: Conv2d<T>,
    pub up_tail: Conv2d<T>,
}

impl<T: Scalar> GdsrModel<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let r = cfg.scale;
        let coeff = T::from_f64(cfg.psam_coeff);
        let shallow = Conv2d::new("shallow", 3, c, 3, 1, rng);
        let mut groups = Vec::with_capacity(cfg.n_groups);
        for gi in 0..cfg.n_groups {
            groups.push(Group {
                rgeg: Rgeg::new(&format!("groups.{gi}.rgeg"), c, cfg.blocks_per_rgeg, rng)?,
                rdeg: Rdeg::new(&format!("groups.{gi}.rdeg"), c, cfg.rcbs_per_rdeg, rng)?,
                gdrm: Gdrm::new(&format!("groups.{gi}.gdrm"), c, coeff, rng),
            });
        }
        let up_conv = Conv2d::new("up.conv", c, r * r * c, 3, 1, rng);
        let up_tail = Conv2d::new("up.tail", c, 3, 3, 1, rng);
        Ok(GdsrModel {
            cfg: cfg.clone(),
            shallow,
            groups,
            up_conv,
            up_tail,
        })
    }

    /// lr: [N, 3, H, W] -> [N, 3, rH, rW].
    ///
    /// Group k: g_k = rgeg(g_{k-1}), t_k = rdeg(d_{k-1}), d_k = gdrm(g_k, t_k);
    /// the fusion feeds back into the detail path only, the global path
    /// propagates unchanged.
    pub fn forward(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = lr.dims4()?;
        if c != 3 {
            return Err(Error::dimension(format!("expected RGB input, got {c} channels")));
        }
        if h < 8 || w < 8 {
            return Err(Error::geometry(format!(
                "input {h}x{w} too small, need at least 8x8"
            )));
        }
        let f_s = self.shallow.forward(lr)?;
        let mut g = f_s.clone();
        let mut d = f_s.clone();
        let mut fused = f_s.clone();
        for group in &self.groups {
            g = group.rgeg.forward(&g)?;
            let t = group.rdeg.forward(&d)?;
            fused = group.gdrm.forward(&g, &t)?;
            d = fused.clone();
        }
        let deep = fused.add(&f_s)?;
        self.up_tail
            .forward(&self.up_conv.forward(&deep)?.pixel_shuffle(self.cfg.scale)?)
    }

    /// Single image [3,H,W] -> [3,rH,rW].
    pub fn forward_image(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = lr.dims3()?;
        let batched = lr.reshape(vec![1, c, h, w])?;
        let sr = self.forward(&batched)?;
        let (_, oc, oh, ow) = sr.dims4()?;
        sr.reshape(vec![oc, oh, ow])
    }

    pub fn visit_params(&self, out: &mut Vec<Arc<Parameter<T>>>) {
        self.shallow.params(out);
        for g in &self.groups {
            g.rgeg.params(out);
            g.rdeg.params(out);
            g.gdrm.params(out);
        }
        self.up_conv.params(out);
        self.up_tail.params(out);
    }

    pub fn params(&self) -> Result<ParamSet<T>> {
        ParamSet::collect(|out| self.visit_params(out))
    }
}

fn conv_count(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

/// Exact number of trainable scalars for a configuration, by closed-form
/// bookkeeping; must match the constructed model's enumeration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let c = cfg.channels;
    let r = cfg.scale;
    let ln = 2 * c;
    let omni = 25 * c;
    let wkv = 2 * c;
    let sm = ln + omni + 4 * c * c + wkv;
    let cm = ln + omni + 4 * c * c;
    let block = sm + cm + 2;
    let rgeg = cfg.blocks_per_rgeg * block + conv_count(c, c, 3);
    let rcb = 2 * conv_count(c, c, 3) + 1;
    let rdeg = cfg.rcbs_per_rdeg * rcb;
    let sa = conv_count(2, 1, 7);
    let psam = 3 * sa;
    let gdrm = 2 * psam + conv_count(2 * c, c, 3) + 2 * conv_count(c, c, 3);
    let group = rgeg + rdeg + gdrm;
    conv_count(3, c, 3) + cfg.n_groups * group + conv_count(c, r * r * c, 3) + conv_count(c, 3, 3)
}

/// Per-module parameter counts for reporting.
pub fn param_breakdown(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let c = cfg.channels;
    let r = cfg.scale;
    let ln = 2 * c;
    let omni = 25 * c;
    let sm = ln + omni + 4 * c * c + 2 * c;
    let cm = ln + omni + 4 * c * c;
    let block = sm + cm + 2;
    let rgeg = cfg.blocks_per_rgeg * block + conv_count(c, c, 3);
    let rcb = 2 * conv_count(c, c, 3) + 1;
    let rdeg = cfg.rcbs_per_rdeg * rcb;
    let psam = 3 * conv_count(2, 1, 7);
    let gdrm = 2 * psam + conv_count(2 * c, c, 3) + 2 * conv_count(c, c, 3);
    let mut rows = vec![("shallow".to_string(), conv_count(3, c, 3))];
    for gi in 0..cfg.n_groups {
        rows.push((format!("groups.{gi}.rgeg"), rgeg));
        rows.push((format!("groups.{gi}.rdeg"), rdeg));
        rows.push((format!("groups.{gi}.gdrm"), gdrm));
    }
    rows.push(("upsampler".to_string(), conv_count(c, r * r * c, 3) + conv_count(c, 3, 3)));
    rows
}

/// Effective receptive field: mean over seeded random inputs of the absolute
/// input gradient of the summed center output pixel, max-normalized to [0,1].
pub fn compute_erf<T: Scalar>(
    forward: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    size: usize,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::usage("compute_erf needs at least one sample"));
    }
    let mut acc = vec![0.0f64; size * size];
    for _ in 0..n_samples {
        let data: Vec<T> = (0..3 * size * size)
            .map(|_| T::from_f64(rng.uniform()))
            .collect();
        let x = Tensor::new(vec![1, 3, size, size], data)?.requires_grad();
        let y = forward(&x)?;
        let (_, c, oh, ow) = y.dims4()?;
        let mut sel = vec![T::ZERO; c * oh * ow];
        for ci in 0..c {
            sel[(ci * oh + oh / 2) * ow + ow / 2] = T::ONE;
        }
        let sel = Tensor::new(vec![1, c, oh, ow], sel)?;
        let center_sum = y.mul(&sel)?.sum_all();
        crate::tensor::backward(&center_sum)?;
        let g = x
            .grad()
            .ok_or_else(|| Error::numeric("erf input received no gradient"))?;
        for ci in 0..3 {
            for p in 0..size * size {
                acc[p] += g[ci * size * size + p].to_f64().abs();
            }
        }
    }
    let max = acc.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in acc.iter_mut() {
            *v /= max;
        }
    }
    Ok(acc)
}

impl<T: Scalar> GdsrModel<T> {
    pub fn erf(&self, size: usize, n_samples: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        compute_erf(|x| self.forward(x), size, n_samples, rng)
    }
}
