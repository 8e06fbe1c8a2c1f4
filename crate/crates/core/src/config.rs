//! Run configuration: TOML sections per pipeline stage, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::synth::{DatasetCounts, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub widths: [usize; 3],
    pub pca_dim: usize,
    /// Tap locations sampled per stage to fit PCA.
    pub pca_samples: usize,
    /// Hypercolumn grid side; 0 means half the image side.
    pub grid: usize,
    /// Filters per class bank.
    pub filters: usize,
    /// Channels of the class-agnostic bank.
    pub agnostic: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: [16, 32, 64],
            pca_dim: 8,
            pca_samples: 10_000,
            grid: 0,
            filters: 8,
            agnostic: 16,
        }
    }
}

impl ModelConfig {
    pub fn grid_for(&self, image_size: usize) -> usize {
        if self.grid == 0 {
            image_size / 2
        } else {
            self.grid
        }
    }

    pub fn hypercolumn_dim(&self) -> usize {
        3 * self.pca_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub samples: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            samples: 2_400,
            batch: 16,
            lr: 1e-2,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub samples_per_class: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            samples_per_class: 4_000,
            batch: 16,
            lr: 1e-2,
            momentum: 5e-4,
            weight_decay: 0.0,
            clip_norm: 1e3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub samples: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Learning-rate multiplier for every parameter except the agnostic bank.
    pub lower_lr_scale: f64,
    pub noise_rate: f64,
    pub mean_decay: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            samples: 2_000,
            batch: 16,
            lr: 1e-2,
            momentum: 5e-4,
            weight_decay: 0.0,
            clip_norm: 1e3,
            lower_lr_scale: 1e-4,
            noise_rate: 0.25,
            mean_decay: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    pub levels: usize,
    /// Side of the square displacement window, in labels.
    pub window: usize,
    /// Pixel spacing between labels.
    pub stride: usize,
    pub lambda: f64,
    pub proposal_scales: [f64; 2],
    pub proposal_stride: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            levels: 3,
            window: 9,
            stride: 2,
            lambda: 0.05,
            proposal_scales: [0.5, 0.75],
            proposal_stride: 0.125,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alphas: Vec<f64>,
    pub permutation_draws: usize,
    /// Positive test images per class used for anchoring dispersion.
    pub anchoring_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alphas: vec![0.05, 0.1],
            permutation_draws: 100,
            anchoring_images: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetCounts,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub warmup: WarmupConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub loss: LossWeights,
    pub matcher: MatcherConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data: DatasetCounts::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            warmup: WarmupConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            loss: LossWeights::default(),
            matcher: MatcherConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |k: &str, why: &str| Err(Error::Config(format!("{k}: {why}")));
        if self.synth.size == 0 || self.synth.size % 8 != 0 {
            return bad("synth.size", "must be a positive multiple of 8");
        }
        if !(self.synth.scale_min > 0.0 && self.synth.scale_min <= self.synth.scale_max) {
            return bad("synth.scale_min", "need 0 < scale_min ≤ scale_max");
        }
        if self.model.widths.contains(&0) || self.model.pca_dim == 0 {
            return bad("model.widths", "widths and pca_dim must be > 0");
        }
        if self.model.widths.iter().any(|&w| w < self.model.pca_dim) {
            return bad("model.pca_dim", "must not exceed any stage width");
        }
        if self.model.filters < 2 {
            return bad("model.filters", "need at least 2 filters per bank");
        }
        if self.model.agnostic == 0 {
            return bad("model.agnostic", "must be > 0");
        }
        for (k, b) in [
            ("warmup.batch", self.warmup.batch),
            ("stage1.batch", self.stage1.batch),
            ("stage2.batch", self.stage2.batch),
        ] {
            if b == 0 {
                return bad(k, "must be ≥ 1");
            }
        }
        if self.stage1.samples_per_class == 0 {
            return bad("stage1.samples_per_class", "must be > 0");
        }
        if self.stage2.samples == 0 {
            return bad("stage2.samples", "must be > 0");
        }
        if !(0.0..=1.0).contains(&self.stage2.noise_rate) {
            return bad("stage2.noise_rate", "must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.stage2.mean_decay) {
            return bad("stage2.mean_decay", "must lie in [0, 1)");
        }
        if self.matcher.window == 0 || self.matcher.window % 2 == 0 {
            return bad("matcher.window", "must be odd");
        }
        if self.matcher.stride == 0 {
            return bad("matcher.stride", "must be ≥ 1");
        }
        if self.eval.alphas.iter().any(|&a| !(a > 0.0)) {
            return bad("eval.alphas", "must be > 0");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[stage1]\nlr = 0.5\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.stage1.lr, 0.5);
        assert_eq!(c.stage1.batch, 16);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::from_toml("[stage1]\nlearning_rate = 0.5\n").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
    }

    #[test]
    fn invalid_value_is_rejected() {
        assert!(RunConfig::from_toml("[matcher]\nwindow = 4\n").is_err());
        assert!(RunConfig::from_toml("[loss]\ndiv = -1.0\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
