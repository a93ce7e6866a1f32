use serde::{Deserialize, Serialize};

use crate::error::{MomeError, Result};

/// Width of the three generated head layers. Not configurable.
pub const HEAD_CHANNELS: [usize; 3] = [8, 8, 1];

/// Bottleneck self-attention is only built for at most this many tokens.
pub const MAX_ATTENTION_TOKENS: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopkMode {
    /// The configured `k_active` filter is applied in training and inference.
    #[default]
    TrainAndInfer,
    /// Training uses every expert; `k_active` only applies at inference.
    InferOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of decoder-scale experts.
    pub experts: usize,
    /// Channels of every expert token map.
    pub token_channels: usize,
    /// Length of the class text embeddings.
    pub text_dim: usize,
    /// Encoder stage widths, finest first; one entry per expert scale.
    pub encoder_widths: Vec<usize>,
    pub router_hidden: usize,
    pub controller_hidden: usize,
    pub head_channels: [usize; 3],
    /// Experts kept per voxel by the top-K filter.
    pub k_active: usize,
    pub topk_mode: TopkMode,
    pub attention: bool,
    pub attention_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            experts: 6,
            token_channels: 16,
            text_dim: 512,
            encoder_widths: vec![8, 16, 32, 64, 64, 64],
            router_hidden: 64,
            controller_hidden: 256,
            head_channels: HEAD_CHANNELS,
            k_active: 6,
            topk_mode: TopkMode::TrainAndInfer,
            attention: true,
            attention_heads: 2,
        }
    }
}

impl ModelConfig {
    /// Workstation-sized defaults used by the CLI.
    pub fn desk() -> Self {
        Self {
            experts: 4,
            text_dim: 64,
            encoder_widths: vec![8, 16, 32, 64],
            k_active: 4,
            ..Self::default()
        }
    }

    /// Length of the flat generated head parameter vector.
    pub fn head_param_len(&self) -> usize {
        head_param_len(self.token_channels)
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MomeError::Config(m));
        if self.experts == 0 {
            return bad("experts must be at least 1".into());
        }
        if self.k_active == 0 || self.k_active > self.experts {
            return bad(format!(
                "k_active {} outside 1..={}",
                self.k_active, self.experts
            ));
        }
        if self.head_channels != HEAD_CHANNELS {
            return bad(format!("head_channels must be {HEAD_CHANNELS:?}"));
        }
        if self.encoder_widths.len() != self.experts {
            return bad(format!(
                "encoder_widths has {} entries, expected {}",
                self.encoder_widths.len(),
                self.experts
            ));
        }
        if self.encoder_widths.iter().any(|&w| w == 0)
            || self.token_channels == 0
            || self.text_dim == 0
            || self.router_hidden == 0
            || self.controller_hidden == 0
        {
            return bad("all widths must be positive".into());
        }
        if self.attention
            && (self.attention_heads == 0 || self.bottleneck_channels() % self.attention_heads != 0)
        {
            return bad(format!(
                "attention_heads {} must divide bottleneck width {}",
                self.attention_heads,
                self.bottleneck_channels()
            ));
        }
        Ok(())
    }

    /// Patch extents must halve cleanly `experts − 1` times and leave at
    /// least two voxels per axis at the bottleneck.
    pub fn check_patch(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let factor = 1usize << (self.experts - 1);
        for &d in &dims {
            if d % factor != 0 || d / factor < 2 {
                return Err(MomeError::Config(format!(
                    "patch {dims:?} incompatible with {} experts: each extent must be a multiple of {factor} and at least {}",
                    self.experts,
                    2 * factor
                )));
            }
        }
        let deepest = dims.map(|d| d / factor);
        let tokens: usize = deepest.iter().product();
        if self.attention && tokens > MAX_ATTENTION_TOKENS {
            return Err(MomeError::Config(format!(
                "bottleneck has {tokens} tokens; attention supports at most {MAX_ATTENTION_TOKENS}"
            )));
        }
        Ok(deepest)
    }

    /// Top-K width applied while training.
    pub fn train_k(&self) -> usize {
        match self.topk_mode {
            TopkMode::TrainAndInfer => self.k_active,
            TopkMode::InferOnly => self.experts,
        }
    }
}

/// `8·C + 8` + `8·8 + 8` + `8 + 1`.
pub fn head_param_len(token_channels: usize) -> usize {
    let [h1, h2, h3] = HEAD_CHANNELS;
    h1 * token_channels + h1 + h2 * h1 + h2 + h3 * h2 + h3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub patch: [usize; 3],
    pub seed: u64,
    pub batch_size: usize,
    /// Probability that a sampled patch is centred on annotated foreground.
    pub foreground_prob: f64,
    /// Write a checkpoint every this many epochs (0 disables periodic saves).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            warmup_fraction: 0.1,
            patch: [32, 32, 32],
            seed: 0,
            batch_size: 1,
            foreground_prob: 0.5,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MomeError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            ));
        }
        if self.patch.iter().any(|&p| p < 8) {
            return bad(format!("patch {:?} has an extent below 8", self.patch));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.foreground_prob) {
            return bad("foreground_prob outside [0, 1]".into());
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer hyper-parameters out of range".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_length_law() {
        for c in [4, 8, 16, 32] {
            assert_eq!(head_param_len(c), 8 * c + 89);
        }
        assert_eq!(head_param_len(16), 217);
    }

    #[test]
    fn patch_divisibility() {
        let mut cfg = ModelConfig::desk();
        cfg.attention = false;
        cfg.experts = 6;
        cfg.encoder_widths = vec![4; 6];
        cfg.k_active = 6;
        assert!(cfg.check_patch([32, 32, 32]).is_err());
        cfg.experts = 4;
        cfg.encoder_widths = vec![4; 4];
        cfg.k_active = 4;
        assert_eq!(cfg.check_patch([32, 32, 32]).unwrap(), [4, 4, 4]);
        cfg.experts = 3;
        cfg.encoder_widths = vec![4; 3];
        cfg.k_active = 3;
        assert_eq!(cfg.check_patch([16, 16, 16]).unwrap(), [4, 4, 4]);
        assert!(cfg.check_patch([10, 16, 16]).is_err());
        assert!(cfg.check_patch([4, 16, 16]).is_err());
    }

    #[test]
    fn k_active_range() {
        let mut cfg = ModelConfig::desk();
        cfg.k_active = 0;
        assert!(cfg.validate().is_err());
        cfg.k_active = 5;
        assert!(cfg.validate().is_err());
        cfg.k_active = 4;
        cfg.validate().unwrap();
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn train_config_bounds() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            warmup_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            patch: [4, 32, 32],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
