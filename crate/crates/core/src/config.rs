//! Hyperparameters and their validation.
//!
//! Configuration files are TOML key/value tables. An optional `preset` key
//! (`"full"` or `"desk"`) picks the base values; every other key overrides
//! one field of that preset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::temporal_map::ScaleConfig;
use crate::tensor::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Desk,
}

/// Which candidate representation the captioner reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionFeatures {
    /// Output of the convolution stack, the same features the scorer sees.
    Conv,
    /// Fused cross-modal features before any convolution.
    Fused,
    /// Pooled clip features of the candidate, before fusion with the query.
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Dimension of the stored clip features.
    pub feature_dim: usize,
    /// `d^v`
    pub video_dim: usize,
    /// `d^T`
    pub text_dim: usize,
    /// Hidden size of each direction of the text LSTM.
    pub text_hidden: usize,
    pub text_layers: usize,
    pub embed_dim: usize,
    pub caption_hidden: usize,
    pub conv_layers: usize,
    pub kernel_size: usize,
    pub scales: Vec<usize>,
    pub frames_per_clip: usize,
    pub fps: f64,
    pub max_query_len: usize,
    pub caption_features: CaptionFeatures,

    /// Candidates per scale passed to the captioner.
    pub top_k: usize,
    pub l_min: f64,
    pub l_max: f64,
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Write an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,

    pub nms_threshold: f64,
    /// Trailing fraction of the annotation file held out for evaluation.
    pub test_fraction: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config::full()
    }
}

impl Config {
    /// Full-size hyperparameters.
    pub fn full() -> Self {
        Config {
            feature_dim: 4096,
            video_dim: 512,
            text_dim: 512,
            text_hidden: 256,
            text_layers: 3,
            embed_dim: 300,
            caption_hidden: 1024,
            conv_layers: 8,
            kernel_size: 5,
            scales: vec![64, 24, 4],
            frames_per_clip: 4,
            fps: 24.0,
            max_query_len: 32,
            caption_features: CaptionFeatures::Conv,
            top_k: 10,
            l_min: 0.1,
            l_max: 0.7,
            lambda: 1.0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
            steps: 20_000,
            checkpoint_every: 1000,
            seed: 0,
            nms_threshold: 0.5,
            test_fraction: 0.2,
        }
    }

    /// CPU-sized hyperparameters matched to the default synthetic corpus.
    pub fn desk() -> Self {
        Config {
            feature_dim: 64,
            video_dim: 64,
            text_dim: 64,
            text_hidden: 32,
            embed_dim: 32,
            caption_hidden: 64,
            conv_layers: 8,
            kernel_size: 3,
            scales: vec![16, 8, 4],
            fps: 4.0,
            max_query_len: 16,
            lr: 1e-3,
            batch_size: 16,
            steps: 1200,
            checkpoint_every: 200,
            ..Config::full()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Config::full(),
            Preset::Desk => Config::desk(),
        }
    }

    pub fn scale_config(&self) -> ScaleConfig {
        ScaleConfig {
            scales: self.scales.clone(),
            frames_per_clip: self.frames_per_clip,
            fps: self.fps,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("video_dim", self.video_dim),
            ("text_dim", self.text_dim),
            ("text_hidden", self.text_hidden),
            ("text_layers", self.text_layers),
            ("embed_dim", self.embed_dim),
            ("caption_hidden", self.caption_hidden),
            ("conv_layers", self.conv_layers),
            ("kernel_size", self.kernel_size),
            ("max_query_len", self.max_query_len),
            ("top_k", self.top_k),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        self.scale_config().validate()?;
        if !(0.0 <= self.l_min && self.l_min < self.l_max && self.l_max <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= l_min < l_max <= 1, got l_min={} l_max={}",
                self.l_min, self.l_max
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold < 1.0) {
            return Err(Error::Config(format!(
                "nms_threshold must lie in (0,1), got {}",
                self.nms_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must lie in [0,1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }

    /// Parses a TOML document on top of its `preset` (desk when absent).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let parse_err = |detail: String| Error::Parse {
            source_name: "config".into(),
            location: "toml".into(),
            detail,
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        let preset = match table.remove("preset") {
            Some(v) => v
                .try_into::<Preset>()
                .map_err(|e| parse_err(format!("preset: {e}")))?,
            None => Preset::Desk,
        };
        let mut base = toml::Table::try_from(Config::preset(preset))
            .map_err(|e| parse_err(e.to_string()))?;
        for (k, v) in table {
            base.insert(k, v);
        }
        let cfg: Config = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml_str(&text).map_err(|e| match e {
            Error::Parse {
                location, detail, ..
            } => Error::Parse {
                source_name: path.display().to_string(),
                location,
                detail,
            },
            other => other,
        })
    }

    /// Applies `key=value` overrides, with values in TOML syntax.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for kv in overrides {
            let kv = kv.as_ref();
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override {kv:?} is not key=value")))?;
            let k = k.trim();
            let v = v.trim();
            let doc: toml::Table = format!("v = {v}")
                .parse()
                .or_else(|_| format!("v = {:?}", v).parse())
                .map_err(|e: toml::de::Error| Error::Usage(format!("override {kv:?}: {e}")))?;
            table.insert(k.to_string(), doc["v"].clone());
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Config::full().validate().unwrap();
        Config::desk().validate().unwrap();
    }

    #[test]
    fn full_values() {
        let c = Config::full();
        assert_eq!((c.video_dim, c.text_dim), (512, 512));
        assert_eq!((c.conv_layers, c.kernel_size), (8, 5));
        assert_eq!(c.caption_hidden, 1024);
        assert_eq!(c.embed_dim, 300);
        assert_eq!(c.top_k, 10);
        assert_eq!((c.l_min, c.l_max), (0.1, 0.7));
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.nms_threshold, 0.5);
        assert_eq!(c.scales, vec![64, 24, 4]);
    }

    #[test]
    fn toml_overrides_preset() {
        let c = Config::from_toml_str("preset = \"full\"\nlambda = 0.5\nscales = [16]\n").unwrap();
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.scales, vec![16]);
        assert_eq!(c.video_dim, 512);
        let d = Config::from_toml_str("top_k = 3").unwrap();
        assert_eq!(d.video_dim, Config::desk().video_dim);
        assert_eq!(d.top_k, 3);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = Config::desk();
        assert_eq!(Config::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn key_value_overrides() {
        let c = Config::desk()
            .with_overrides(&["steps=7", "scales = [16]", "caption_features=fused"])
            .unwrap();
        assert_eq!(c.steps, 7);
        assert_eq!(c.scales, vec![16]);
        assert_eq!(c.caption_features, CaptionFeatures::Fused);
        assert!(Config::desk().with_overrides(&["steps"]).is_err());
        assert!(Config::desk().with_overrides(&["bogus=1"]).is_err());
        assert!(Config::desk().with_overrides(&["kernel_size=2"]).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml_str("kernel_size = 4").is_err());
        assert!(Config::from_toml_str("l_min = 0.8").is_err());
        assert!(Config::from_toml_str("scales = [4, 8]").is_err());
        assert!(Config::from_toml_str("nms_threshold = 1.0").is_err());
        assert!(Config::from_toml_str("no_such_key = 1").is_err());
        assert!(Config::from_toml_str("preset = \"huge\"").is_err());
    }
}
