//! Class prompts, semantic class vectors and the controller that turns
//! (class vector ⊕ image feature) into dynamic head parameters.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::config::{head_param_len, ModelConfig, HEAD_CHANNELS};
use crate::error::{MomeError, Result};
use crate::formats::read_json;
use crate::params::{Affine, Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::types::ClassVocabulary;

pub const CLS_PLACEHOLDER: &str = "[CLS]";
pub const DEFAULT_TEMPLATE: &str = "a computerized tomography of a [CLS]";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        let count = template.matches(CLS_PLACEHOLDER).count();
        if count != 1 {
            return Err(MomeError::Config(format!(
                "prompt template must contain exactly one {CLS_PLACEHOLDER}, found {count}"
            )));
        }
        Ok(Self(template))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn render(&self, class_name: &str) -> String {
        self.0.replacen(CLS_PLACEHOLDER, class_name, 1)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self(DEFAULT_TEMPLATE.into())
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = MomeError;
    fn try_from(s: String) -> Result<Self> {
        Self::new(s)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> Self {
        t.0
    }
}

pub fn build_prompt(vocab: &ClassVocabulary, k: usize, template: &PromptTemplate) -> Result<String> {
    Ok(template.render(&vocab.get(k)?.name))
}

/// Unit-norm semantic vector for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub class_index: usize,
    w: Vec<f64>,
}

impl TextEmbedding {
    /// Normalises `w` to unit length.
    pub fn new(class_index: usize, w: Vec<f64>) -> Result<Self> {
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(MomeError::Numeric("embedding has zero or non-finite norm".into()));
        }
        Ok(Self {
            class_index,
            w: w.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn vector(&self) -> &[f64] {
        &self.w
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        self.w.iter().zip(&other.w).map(|(a, b)| a * b).sum()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.w.len()], self.w.iter().map(|&v| T::of(v)).collect())
            .expect("vector shape")
    }
}

/// Stable 64-bit key of a prompt (first eight bytes of its SHA-256).
pub fn prompt_hash(prompt: &str) -> u64 {
    let digest = Sha256::digest(prompt.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
}

/// Source of class vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingProvider {
    /// Gaussian vector seeded from the prompt hash.
    Stub,
    /// Precomputed vectors keyed by prompt.
    File(BTreeMap<String, Vec<f64>>),
}

impl EmbeddingProvider {
    /// Reads a JSON object mapping prompt → list of numbers.
    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::File(read_json(path)?))
    }

    pub fn embed(&self, prompt: &str, class_index: usize, dim: usize) -> Result<TextEmbedding> {
        let raw = match self {
            Self::Stub => {
                let mut rng = ChaCha8Rng::seed_from_u64(prompt_hash(prompt));
                (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
            }
            Self::File(table) => {
                let v = table
                    .get(prompt)
                    .ok_or_else(|| MomeError::MissingEmbedding(prompt.into()))?;
                if v.len() != dim {
                    return Err(MomeError::Shape(format!(
                        "embedding for {prompt:?} has length {}, expected {dim}",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        TextEmbedding::new(class_index, raw)
    }

    /// One embedding per vocabulary class, in vocabulary order.
    pub fn embed_vocabulary(
        &self,
        vocab: &ClassVocabulary,
        template: &PromptTemplate,
        dim: usize,
    ) -> Result<Vec<TextEmbedding>> {
        (0..vocab.len())
            .map(|k| self.embed(&build_prompt(vocab, k, template)?, k, dim))
            .collect()
    }
}

/// Generated parameters of the three per-voxel head layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicHeadParams<T> {
    pub theta1_w: Tensor<T>,
    pub theta1_b: Tensor<T>,
    pub theta2_w: Tensor<T>,
    pub theta2_b: Tensor<T>,
    pub theta3_w: Tensor<T>,
    pub theta3_b: Tensor<T>,
}

/// (rows, cols) of each segment of the flat head vector, in storage order:
/// layer-1 weights, layer-1 bias, layer-2 weights, layer-2 bias, layer-3
/// weights, layer-3 bias.
pub fn head_segments(token_channels: usize) -> [(usize, usize); 6] {
    let [h1, h2, h3] = HEAD_CHANNELS;
    [
        (h1, token_channels),
        (h1, 1),
        (h2, h1),
        (h2, 1),
        (h3, h2),
        (h3, 1),
    ]
}

impl<T: Scalar> DynamicHeadParams<T> {
    pub fn split(flat: &[T], token_channels: usize) -> Result<Self> {
        let expected = head_param_len(token_channels);
        if flat.len() != expected {
            return Err(MomeError::Shape(format!(
                "flat head vector has {} entries, expected {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut parts = head_segments(token_channels).map(|(r, c)| {
            let shape: Vec<usize> = if c == 1 { vec![r] } else { vec![r, c] };
            let t = Tensor::from_vec(&shape, flat[offset..offset + r * c].to_vec()).expect("segment");
            offset += r * c;
            t
        });
        let mut take = |i: usize| std::mem::replace(&mut parts[i], Tensor::zeros(&[0]));
        Ok(Self {
            theta1_w: take(0),
            theta1_b: take(1),
            theta2_w: take(2),
            theta2_b: take(3),
            theta3_w: take(4),
            theta3_b: take(5),
        })
    }

    pub fn flat(&self) -> Vec<T> {
        [
            &self.theta1_w,
            &self.theta1_b,
            &self.theta2_w,
            &self.theta2_b,
            &self.theta3_w,
            &self.theta3_b,
        ]
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
    }
}

/// Two-layer perceptron `(d_text + C_b) → hidden → 8·C_tok + 89`.
#[derive(Clone, Debug)]
pub struct Controller {
    text_dim: usize,
    image_dim: usize,
    hidden: Affine,
    output: Affine,
}

impl Controller {
    pub fn new<T: Scalar>(cfg: &ModelConfig, s: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let input = cfg.text_dim + cfg.bottleneck_channels();
        Self {
            text_dim: cfg.text_dim,
            image_dim: cfg.bottleneck_channels(),
            hidden: Affine::new(s, rng, "controller.fc1", cfg.controller_hidden, input, 1.0),
            output: Affine::new(s, rng, "controller.fc2", cfg.head_param_len(), cfg.controller_hidden, 1.0),
        }
    }

    /// Flat head parameter vector `[8·C_tok + 89]` for text vector `w`
    /// and global image feature `image`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, w: Var, image: Var) -> Result<Var> {
        if g.shape(w) != [self.text_dim] || g.shape(image) != [self.image_dim] {
            return Err(MomeError::Shape(format!(
                "controller expects text [{}] and image [{}], got {:?} and {:?}",
                self.text_dim,
                self.image_dim,
                g.shape(w),
                g.shape(image)
            )));
        }
        let x = g.concat(&[w, image]);
        let x = g.reshape(x, &[self.text_dim + self.image_dim, 1]);
        let h = self.hidden.apply(g, p, x);
        let h = g.gelu(h);
        let out = self.output.apply(g, p, h);
        let len = g.shape(out)[0];
        Ok(g.reshape(out, &[len]))
    }
}
