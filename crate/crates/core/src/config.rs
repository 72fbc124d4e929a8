//! Line-based `key = value` run configuration with dotted sections
//! (model., train., degrade., wavelet.). Unknown keys are rejected and the
//! effective configuration can be echoed back for auditability.

use crate::degrade::{DegradationConfig, DegradeMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scalar::DType;
use crate::trainer::TrainConfig;
use crate::wavelet::LossMode;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub degrade: DegradationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::micro(2);
        let train = TrainConfig::default();
        let degrade = DegradationConfig::new(DegradeMode::Bicubic, model.scale, train.seed);
        RunConfig {
            model,
            train,
            degrade,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::config(format!("{key}: cannot parse '{v}': {e}")))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut degrade_scale_set = false;
        let mut degrade_seed_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let v = value.trim();
            match key {
                "model.scale" => cfg.model.scale = parse_num(key, v)?,
                "model.channels" => cfg.model.channels = parse_num(key, v)?,
                "model.n_groups" => cfg.model.n_groups = parse_num(key, v)?,
                "model.blocks_per_rgeg" => cfg.model.blocks_per_rgeg = parse_num(key, v)?,
                "model.rcbs_per_rdeg" => cfg.model.rcbs_per_rdeg = parse_num(key, v)?,
                "model.psam_coeff" => cfg.model.psam_coeff = parse_num(key, v)?,
                "model.dtype" => {
                    cfg.model.dtype = match v {
                        "f32" => DType::F32,
                        "f64" => DType::F64,
                        other => {
                            return Err(Error::config(format!("model.dtype: unknown '{other}'")))
                        }
                    }
                }
                "train.lr0" => cfg.train.lr0 = parse_num(key, v)?,
                "train.beta1" => cfg.train.beta1 = parse_num(key, v)?,
                "train.beta2" => cfg.train.beta2 = parse_num(key, v)?,
                "train.eps" => cfg.train.eps = parse_num(key, v)?,
                "train.batch" => cfg.train.batch = parse_num(key, v)?,
                "train.epochs" => cfg.train.epochs = parse_num(key, v)?,
                "train.halve_at" => cfg.train.halve_at = parse_num(key, v)?,
                "train.patch" => cfg.train.patch = parse_num(key, v)?,
                "train.loss_mode" => cfg.train.loss_mode = LossMode::parse(v)?,
                "train.seed" => {
                    cfg.train.seed = parse_num(key, v)?;
                    if !degrade_seed_set {
                        cfg.degrade.seed = cfg.train.seed;
                    }
                }
                "degrade.mode" => cfg.degrade.mode = DegradeMode::parse(v)?,
                "degrade.scale" => {
                    cfg.degrade.scale = parse_num(key, v)?;
                    degrade_scale_set = true;
                }
                "degrade.seed" => {
                    cfg.degrade.seed = parse_num(key, v)?;
                    degrade_seed_set = true;
                }
                "degrade.gaussian_sigma_lo" => cfg.degrade.gaussian_sigma.0 = parse_num(key, v)?,
                "degrade.gaussian_sigma_hi" => cfg.degrade.gaussian_sigma.1 = parse_num(key, v)?,
                "degrade.motion_length_lo" => cfg.degrade.motion_length.0 = parse_num(key, v)?,
                "degrade.motion_length_hi" => cfg.degrade.motion_length.1 = parse_num(key, v)?,
                "degrade.motion_angle_lo" => cfg.degrade.motion_angle.0 = parse_num(key, v)?,
                "degrade.motion_angle_hi" => cfg.degrade.motion_angle.1 = parse_num(key, v)?,
                "degrade.mid_scale_lo" => cfg.degrade.mid_scale.0 = parse_num(key, v)?,
                "degrade.mid_scale_hi" => cfg.degrade.mid_scale.1 = parse_num(key, v)?,
                "degrade.noise_sigma_lo" => cfg.degrade.noise_sigma.0 = parse_num(key, v)?,
                "degrade.noise_sigma_hi" => cfg.degrade.noise_sigma.1 = parse_num(key, v)?,
                "degrade.jpeg_quality_lo" => cfg.degrade.jpeg_quality.0 = parse_num(key, v)?,
                "degrade.jpeg_quality_hi" => cfg.degrade.jpeg_quality.1 = parse_num(key, v)?,
                "wavelet.lambda_l" => cfg.train.wavelet.lambda_l = parse_num(key, v)?,
                "wavelet.lambda_h" => cfg.train.wavelet.lambda_h = parse_num(key, v)?,
                "wavelet.alpha_1" => cfg.train.wavelet.alphas[0] = parse_num(key, v)?,
                "wavelet.alpha_half" => cfg.train.wavelet.alphas[1] = parse_num(key, v)?,
                "wavelet.alpha_quarter" => cfg.train.wavelet.alphas[2] = parse_num(key, v)?,
                "wavelet.levels" => cfg.train.wavelet.levels = parse_num(key, v)?,
                "wavelet.filter" => cfg.train.wavelet.filter = v.to_string(),
                other => return Err(Error::config(format!("unknown key '{other}'"))),
            }
        }
        if !degrade_scale_set {
            cfg.degrade.scale = cfg.model.scale;
        } else if cfg.degrade.scale != cfg.model.scale {
            return Err(Error::config(format!(
                "degrade.scale {} does not match model.scale {}",
                cfg.degrade.scale, cfg.model.scale
            )));
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.degrade.validate()?;
        Ok(cfg)
    }

    /// Canonical listing of every effective key, echoed at startup.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        s.push_str(&model_config_text(&self.model));
        let t = &self.train;
        s.push_str(&format!("train.lr0 = {}\n", t.lr0));
        s.push_str(&format!("train.beta1 = {}\n", t.beta1));
        s.push_str(&format!("train.beta2 = {}\n", t.beta2));
        s.push_str(&format!("train.eps = {}\n", t.eps));
        s.push_str(&format!("train.batch = {}\n", t.batch));
        s.push_str(&format!("train.epochs = {}\n", t.epochs));
        s.push_str(&format!("train.halve_at = {}\n", t.halve_at));
        s.push_str(&format!("train.patch = {}\n", t.patch));
        s.push_str(&format!("train.loss_mode = {}\n", t.loss_mode.as_str()));
        s.push_str(&format!("train.seed = {}\n", t.seed));
        let d = &self.degrade;
        s.push_str(&format!("degrade.mode = {}\n", d.mode.as_str()));
        s.push_str(&format!("degrade.scale = {}\n", d.scale));
        s.push_str(&format!("degrade.seed = {}\n", d.seed));
        s.push_str(&format!("degrade.gaussian_sigma_lo = {}\n", d.gaussian_sigma.0));
        s.push_str(&format!("degrade.gaussian_sigma_hi = {}\n", d.gaussian_sigma.1));
        s.push_str(&format!("degrade.motion_length_lo = {}\n", d.motion_length.0));
        s.push_str(&format!("degrade.motion_length_hi = {}\n", d.motion_length.1));
        s.push_str(&format!("degrade.motion_angle_lo = {}\n", d.motion_angle.0));
        s.push_str(&format!("degrade.motion_angle_hi = {}\n", d.motion_angle.1));
        s.push_str(&format!("degrade.mid_scale_lo = {}\n", d.mid_scale.0));
        s.push_str(&format!("degrade.mid_scale_hi = {}\n", d.mid_scale.1));
        s.push_str(&format!("degrade.noise_sigma_lo = {}\n", d.noise_sigma.0));
        s.push_str(&format!("degrade.noise_sigma_hi = {}\n", d.noise_sigma.1));
        s.push_str(&format!("degrade.jpeg_quality_lo = {}\n", d.jpeg_quality.0));
        s.push_str(&format!("degrade.jpeg_quality_hi = {}\n", d.jpeg_quality.1));
        let w = &t.wavelet;
        s.push_str(&format!("wavelet.lambda_l = {}\n", w.lambda_l));
        s.push_str(&format!("wavelet.lambda_h = {}\n", w.lambda_h));
        s.push_str(&format!("wavelet.alpha_1 = {}\n", w.alphas[0]));
        s.push_str(&format!("wavelet.alpha_half = {}\n", w.alphas[1]));
        s.push_str(&format!("wavelet.alpha_quarter = {}\n", w.alphas[2]));
        s.push_str(&format!("wavelet.levels = {}\n", w.levels));
        s.push_str(&format!("wavelet.filter = {}\n", w.filter));
        s
    }
}

/// The model.* subset, also stored in checkpoints.
pub fn model_config_text(m: &ModelConfig) -> String {
    format!(
        "model.scale = {}\nmodel.channels = {}\nmodel.n_groups = {}\nmodel.blocks_per_rgeg = {}\nmodel.rcbs_per_rdeg = {}\nmodel.psam_coeff = {}\nmodel.dtype = {}\n",
        m.scale, m.channels, m.n_groups, m.blocks_per_rgeg, m.rcbs_per_rdeg, m.psam_coeff, m.dtype
    )
}

/// Parse only model.* lines (checkpoint config block).
pub fn model_config_parse(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::micro(2);
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected 'key = value', got '{line}'")))?;
        let (key, v) = (key.trim(), value.trim());
        match key {
            "model.scale" => m.scale = parse_num(key, v)?,
            "model.channels" => m.channels = parse_num(key, v)?,
            "model.n_groups" => m.n_groups = parse_num(key, v)?,
            "model.blocks_per_rgeg" => m.blocks_per_rgeg = parse_num(key, v)?,
            "model.rcbs_per_rdeg" => m.rcbs_per_rdeg = parse_num(key, v)?,
            "model.psam_coeff" => m.psam_coeff = parse_num(key, v)?,
            "model.dtype" => {
                m.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    other => return Err(Error::config(format!("model.dtype: unknown '{other}'"))),
                }
            }
            other => return Err(Error::config(format!("unknown model key '{other}'"))),
        }
    }
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_through_echo() {
        let text = "
# comment
model.scale = 3
model.channels = 24
train.epochs = 10
train.halve_at = 5
train.loss_mode = rec_plus_wav
degrade.mode = cdm
wavelet.levels = 1
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.scale, 3);
        assert_eq!(cfg.model.channels, 24);
        assert_eq!(cfg.degrade.scale, 3); // inherited
        assert_eq!(cfg.train.wavelet.levels, 1);
        let echoed = RunConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(echoed.model, cfg.model);
        assert_eq!(echoed.train.epochs, cfg.train.epochs);
        assert_eq!(echoed.degrade.mode, cfg.degrade.mode);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::parse("model.width = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::parse("nonsense\n").is_err());
    }

    #[test]
    fn scale_mismatch_rejected() {
        let text = "model.scale = 2\ndegrade.scale = 3\n";
        assert!(RunConfig::parse(text).is_err());
    }

    #[test]
    fn train_seed_flows_into_degrade_seed() {
        let cfg = RunConfig::parse("train.seed = 99\n").unwrap();
        assert_eq!(cfg.degrade.seed, 99);
        let cfg = RunConfig::parse("train.seed = 99\ndegrade.seed = 7\n").unwrap();
        assert_eq!(cfg.degrade.seed, 7);
    }

    #[test]
    fn model_config_block_roundtrip() {
        let m = ModelConfig::paper(4);
        let parsed = model_config_parse(&model_config_text(&m)).unwrap();
        assert_eq!(parsed, m);
    }
}
