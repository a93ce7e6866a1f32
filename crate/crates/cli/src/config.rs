use std::path::Path;

use mome_core::config::{ModelConfig, TrainConfig};
use mome_core::datasynth::{default_plan, PhantomSpec, PlanEntry};
use mome_core::evaluation::{DetectionRule, EvalOptions};
use mome_core::textbranch::{EmbeddingProvider, PromptTemplate, DEFAULT_TEMPLATE};
use mome_core::types::ClassVocabulary;
use mome_core::{MomeError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub target_spacing: f64,
    pub window: [f64; 2],
    pub vocabulary: ClassVocabulary,
    pub phantom: PhantomSpec,
    pub plan: Vec<PlanEntry>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 40,
            n_eval: 10,
            target_spacing: 1.5,
            window: [-175.0, 250.0],
            vocabulary: ClassVocabulary::desk(),
            phantom: PhantomSpec::default(),
            plan: default_plan(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub overlap: f64,
    /// Top-K at inference; the model's `k_active` when absent.
    pub k: Option<usize>,
    pub threshold: f64,
    pub min_voxels: usize,
    /// Phantom seeds of the held-out sets used by the top-K ablation.
    pub ablation_seeds: Vec<u64>,
    pub slices: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let rule = DetectionRule::default();
        Self {
            overlap: 0.5,
            k: None,
            threshold: rule.threshold,
            min_voxels: rule.min_voxels,
            ablation_seeds: vec![1, 2, 3],
            slices: vec![16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub template: String,
    /// Precomputed embedding file; the deterministic stub when absent.
    pub embeddings: Option<String>,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            template: DEFAULT_TEMPLATE.into(),
            embeddings: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub text: TextConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig {
                lr: 2e-3,
                epochs: 30,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            text: TextConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| MomeError::io(path, e))?;
        toml::from_str(&text).map_err(|e| MomeError::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Applies `key.path = value` overrides. Values are parsed as TOML
    /// literals, falling back to plain strings.
    pub fn with_overrides(self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut root = toml::Value::try_from(&self).map_err(|e| MomeError::Config(e.to_string()))?;
        for (key, raw) in overrides {
            let value = parse_literal(raw);
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| MomeError::Config(format!("override {key}: {part} is not a table")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        root.try_into()
            .map_err(|e: toml::de::Error| MomeError::Config(format!("override: {}", e.message())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.model.check_patch(self.train.patch)?;
        self.data.phantom.validate(&self.data.vocabulary)?;
        if self.model.k_active == 0 || self.model.k_active > self.model.experts {
            return Err(MomeError::Config("k_active must lie in 1..=experts".into()));
        }
        if let Some(k) = self.eval.k {
            if k == 0 || k > self.model.experts {
                return Err(MomeError::Config(format!("eval.k {k} must lie in 1..={}", self.model.experts)));
            }
        }
        PromptTemplate::new(self.text.template.clone())?;
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn provider(&self) -> Result<EmbeddingProvider> {
        match &self.text.embeddings {
            Some(p) => EmbeddingProvider::from_file(Path::new(p)),
            None => Ok(EmbeddingProvider::Stub),
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            patch: self.train.patch,
            overlap: self.eval.overlap,
            k: self.eval.k.unwrap_or(self.model.k_active),
            detection: DetectionRule {
                threshold: self.eval.threshold,
                min_voxels: self.eval.min_voxels,
            },
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
