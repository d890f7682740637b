//! Flat `key = value` training configuration, covering the optimizer,
//! the regularizers, the augmentation policy and the model architecture.
//! Unknown keys are a hard error so typos cannot silently fall back to
//! defaults.

use std::path::PathBuf;

use super::TrainError;
use crate::augment::{AugmentConfig, EnabledOps};
use crate::losses::{CombinedMode, RegConfig};
use crate::model::{apply_model_config_kv, model_config_kv, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Samples per training window; must be a multiple of the encoder
    /// stride. 20480 samples is 1.28 s at 16 kHz.
    pub window_samples: usize,
    pub reg: RegConfig,
    pub aug: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 12,
            learning_rate: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 10.0,
            checkpoint_every: 500,
            seed: 0,
            window_samples: 20_480,
            reg: RegConfig::default(),
            aug: AugmentConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps < 1 {
            return Err(TrainError::Config("steps must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(TrainError::Config("checkpoint_every must be >= 1".into()));
        }
        if self.window_samples == 0 || self.window_samples % 160 != 0 {
            return Err(TrainError::Config(
                "window_samples must be a positive multiple of 160".into(),
            ));
        }
        if self.reg.window < 2 {
            return Err(TrainError::Config(
                "regularizer window must be >= 2".into(),
            ));
        }
        if self.reg.lambda_se < 0.0 || self.reg.alpha_lorr < 0.0 {
            return Err(TrainError::Config(
                "regularizer weights must be >= 0".into(),
            ));
        }
        self.model
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.aug
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    /// Serialize as the flat config-file text; `parse` reads it back.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", format!("{:e}", self.learning_rate));
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", format!("{:e}", self.adam_eps));
        kv("grad_clip_norm", self.grad_clip_norm.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("seed", self.seed.to_string());
        kv("window_samples", self.window_samples.to_string());
        kv("lambda_se", self.reg.lambda_se.to_string());
        kv("alpha_lorr", self.reg.alpha_lorr.to_string());
        kv("lorr_window", self.reg.window.to_string());
        kv("loss_mode", self.reg.combined_mode.as_str().to_string());
        kv("pitch_lo", self.aug.pitch_range.0.to_string());
        kv("pitch_hi", self.aug.pitch_range.1.to_string());
        kv(
            "noise_dir",
            self.aug
                .noise_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("snr_lo", self.aug.snr_db_range.0.to_string());
        kv("snr_hi", self.aug.snr_db_range.1.to_string());
        kv("room_lo", self.aug.room_scale_range.0.to_string());
        kv("room_hi", self.aug.room_scale_range.1.to_string());
        kv("p_clean", self.aug.p_clean.to_string());
        kv("enabled_ops", self.aug.enabled_ops.to_config_string());
        for (k, v) in model_config_kv(&self.model) {
            kv(&k, v);
        }
        out
    }

    /// Parse the flat config format. Every key must be known; later
    /// lines override earlier ones; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<TrainConfig, TrainError> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected `key = value`", idx + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(key, value)
                .map_err(|e| TrainError::Config(format!("line {}: {e}", idx + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("bad value {value:?} for {key}"))
        }
        match key {
            "steps" => self.steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "window_samples" => self.window_samples = num(key, value)?,
            "lambda_se" => self.reg.lambda_se = num(key, value)?,
            "alpha_lorr" => self.reg.alpha_lorr = num(key, value)?,
            "lorr_window" => self.reg.window = num(key, value)?,
            "loss_mode" => {
                self.reg.combined_mode =
                    CombinedMode::parse(value).map_err(|e| e.to_string())?
            }
            "pitch_lo" => self.aug.pitch_range.0 = num(key, value)?,
            "pitch_hi" => self.aug.pitch_range.1 = num(key, value)?,
            "noise_dir" => {
                self.aug.noise_dir = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "snr_lo" => self.aug.snr_db_range.0 = num(key, value)?,
            "snr_hi" => self.aug.snr_db_range.1 = num(key, value)?,
            "room_lo" => self.aug.room_scale_range.0 = num(key, value)?,
            "room_hi" => self.aug.room_scale_range.1 = num(key, value)?,
            "p_clean" => self.aug.p_clean = num(key, value)?,
            "enabled_ops" => {
                self.aug.enabled_ops = EnabledOps::parse(value).map_err(|e| e.to_string())?
            }
            _ => {
                let recognized = apply_model_config_kv(&mut self.model, key, value)
                    .map_err(|e| e.to_string())?;
                if !recognized {
                    return Err(format!("unknown config key {key:?}"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadType;

    #[test]
    fn round_trip_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.steps = 3000;
        cfg.batch_size = 8;
        cfg.seed = 42;
        cfg.window_samples = 10_240;
        cfg.reg.combined_mode = CombinedMode::Lorr;
        cfg.aug.enabled_ops = EnabledOps {
            pitch: true,
            noise: true,
            reverb: false,
        };
        cfg.aug.noise_dir = Some(PathBuf::from("/tmp/noise"));
        cfg.model.channels = 64;
        cfg.model.context_dim = 64;
        cfg.model.prediction_steps = 4;
        cfg.model.negatives = 32;
        cfg.model.head_type = HeadType::Attention;
        let text = cfg.to_config_string();
        let back = TrainConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_a_hard_error() {
        let err = TrainConfig::parse("stepz = 10\n").unwrap_err();
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = TrainConfig::parse("# comment\n\nsteps = 7\n").unwrap();
        assert_eq!(cfg.steps, 7);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(TrainConfig::parse("steps = 0\n").is_err());
        assert!(TrainConfig::parse("learning_rate = -1\n").is_err());
        assert!(TrainConfig::parse("window_samples = 100\n").is_err());
        assert!(TrainConfig::parse("strides = 5,4,2,2,1\n").is_err());
    }
}
