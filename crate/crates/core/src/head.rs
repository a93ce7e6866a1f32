//! Generated per-class segmentation heads and the full forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{global_feature, Backbone, ExpertTokens};
use crate::config::ModelConfig;
use crate::error::{MomeError, Result};
use crate::params::{Bound, ParamStore};
use crate::router::{fuse, normalize_gates, topk_filter, GateField, Router};
use crate::tensor::{Scalar, Tensor};
use crate::textbranch::{head_segments, Controller, TextEmbedding};

/// Three per-voxel layers `C_tok → 8 → 8 → 1` (GELU between) whose weights
/// are read from `theta`. `fused: [C_tok, N]`; returns logits `[1, N]`.
pub fn dynamic_head_logits<T: Scalar>(g: &mut Graph<T>, theta: Var, fused: Var) -> Result<Var> {
    let c = g.shape(fused)[0];
    let segments = head_segments(c);
    let expected: usize = segments.iter().map(|(r, k)| r * k).sum();
    if g.shape(theta) != [expected] || g.shape(fused).len() != 2 {
        return Err(MomeError::Shape(format!(
            "head parameters {:?} do not match fused feature {:?}",
            g.shape(theta),
            g.shape(fused)
        )));
    }
    let mut offset = 0;
    let mut pieces = Vec::with_capacity(6);
    for (rows, cols) in segments {
        let s = g.slice(theta, offset, rows * cols);
        pieces.push(if cols == 1 { s } else { g.reshape(s, &[rows, cols]) });
        offset += rows * cols;
    }
    let mut x = fused;
    for layer in 0..3 {
        x = g.matmul(pieces[2 * layer], x, false, false);
        x = g.add_channel_bias(x, pieces[2 * layer + 1]);
        if layer < 2 {
            x = g.gelu(x);
        }
    }
    Ok(x)
}

/// Probabilities of one class, `[1, N]`.
pub fn dynamic_head<T: Scalar>(g: &mut Graph<T>, theta: Var, fused: Var) -> Result<Var> {
    let logits = dynamic_head_logits(g, theta, fused)?;
    Ok(g.sigmoid_clamped(logits, T::of(T::LOGIT_CLAMP)))
}

/// Tensor-level head: `theta` flat, `fused: [C_tok, D, W, H]` →
/// `[1, D, W, H]`.
pub fn apply_dynamic_head<T: Scalar>(theta: &Tensor<T>, fused: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let s = fused.shape().to_vec();
    let n: usize = s[1..].iter().product();
    let th = g.constant(theta.clone());
    let f = g.constant(fused.clone().reshaped(&[s[0], n])?);
    let p = dynamic_head(&mut g, th, f)?;
    let mut out_shape = s.clone();
    out_shape[0] = 1;
    g.value(p).clone().reshaped(&out_shape)
}

/// One-vs-all probabilities, `[K, D, W, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub probs: Tensor<T>,
}

impl<T: Scalar> Prediction<T> {
    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.probs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn channel(&self, k: usize) -> &[T] {
        let n = self.probs.inner_len();
        &self.probs.data()[k * n..(k + 1) * n]
    }

    pub fn strictly_inside_unit_interval(&self) -> bool {
        self.probs.data().iter().all(|&p| p > T::zero() && p < T::one())
    }
}

/// Handles into one forward graph.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub tokens: ExpertTokens,
    pub global: Var,
    /// Per class: generated head parameters.
    pub thetas: Vec<Var>,
    /// Per class, per expert: gates after normalisation and top-K.
    pub gates: Vec<Vec<Var>>,
    /// Per class: head logits `[1, N]` before clamping.
    pub logits: Vec<Var>,
    /// `[K, N]`
    pub probs: Var,
    pub dims: [usize; 3],
}

impl ForwardTrace {
    pub fn gate_fields<T: Scalar>(&self, g: &Graph<T>) -> Vec<GateField<T>> {
        self.gates
            .iter()
            .enumerate()
            .map(|(k, gs)| GateField::from_graph(g, k, gs, self.dims))
            .collect()
    }

    pub fn prediction<T: Scalar>(&self, g: &Graph<T>) -> Prediction<T> {
        let k = self.logits.len();
        let [d, w, h] = self.dims;
        Prediction {
            probs: g.value(self.probs).clone().reshaped(&[k, d, w, h]).expect("prediction shape"),
        }
    }
}

/// All trainable state of the segmentation network.
#[derive(Clone, Debug)]
pub struct MomeModel<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    backbone: Backbone,
    controller: Controller,
    router: Router,
}

impl<T: Scalar> MomeModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let backbone = Backbone::new(&cfg, &mut params, &mut rng);
        let controller = Controller::new(&cfg, &mut params, &mut rng);
        let router = Router::new(&cfg, &mut params, &mut rng);
        Ok(Self {
            cfg,
            params,
            backbone,
            controller,
            router,
        })
    }

    pub fn cast<U: Scalar>(&self) -> MomeModel<U> {
        MomeModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            controller: self.controller.clone(),
            router: self.router.clone(),
        }
    }

    /// Builds the forward pass for `patch: [1, D, W, H]` and one class per
    /// embedding. The visual branch runs once; each class then gets its own
    /// controller, router and head. `k` is the top-K width.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        patch: Var,
        embeddings: &[TextEmbedding],
        k: usize,
    ) -> Result<ForwardTrace> {
        if embeddings.is_empty() {
            return Err(MomeError::InvalidArgument("no classes to predict".into()));
        }
        if let Some(e) = embeddings.iter().find(|e| e.dim() != self.cfg.text_dim) {
            return Err(MomeError::Shape(format!(
                "embedding of class {} has length {}, model expects {}",
                e.class_index,
                e.dim(),
                self.cfg.text_dim
            )));
        }
        let enc = self.backbone.encode(&self.cfg, g, p, patch)?;
        let pyramid = self.backbone.decode(g, p, &enc);
        let tokens = self.backbone.expert_project(g, p, &pyramid, enc.patch_dims)?;
        let global = global_feature(g, &enc);
        let inputs = self.router.prepare(g, p, &tokens)?;

        let mut thetas = Vec::with_capacity(embeddings.len());
        let mut gates = Vec::with_capacity(embeddings.len());
        let mut logits = Vec::with_capacity(embeddings.len());
        let mut probs = Vec::with_capacity(embeddings.len());
        for e in embeddings {
            let w = g.constant(e.to_tensor());
            let theta = self.controller.apply(g, p, w, global)?;
            let raw = self.router.raw_gates(g, p, theta, &inputs)?;
            let normed = normalize_gates(g, &raw);
            let kept = topk_filter(g, &normed, k)?;
            let fused = fuse(g, &kept, &tokens)?;
            let logit = dynamic_head_logits(g, theta, fused)?;
            probs.push(g.sigmoid_clamped(logit, T::of(T::LOGIT_CLAMP)));
            thetas.push(theta);
            gates.push(kept);
            logits.push(logit);
        }
        let probs = g.concat(&probs);
        Ok(ForwardTrace {
            tokens,
            global,
            thetas,
            gates,
            logits,
            probs,
            dims: enc.patch_dims,
        })
    }

    /// Inference on one patch `[1, D, W, H]` (or `[D, W, H]`).
    pub fn forward(&self, patch: &Tensor<T>, embeddings: &[TextEmbedding], k: usize) -> Result<Prediction<T>> {
        let (g, trace) = self.trace(patch, embeddings, k)?;
        Ok(trace.prediction(&g))
    }

    /// Inference graph plus its handles, for inspecting gates and tokens.
    pub fn trace(&self, patch: &Tensor<T>, embeddings: &[TextEmbedding], k: usize) -> Result<(Graph<T>, ForwardTrace)> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let x = g.constant(as_patch(patch)?);
        let trace = self.forward_graph(&mut g, &p, x, embeddings, k)?;
        Ok((g, trace))
    }
}

pub(crate) fn as_patch<T: Scalar>(patch: &Tensor<T>) -> Result<Tensor<T>> {
    match patch.shape() {
        [d, w, h] => patch.clone().reshaped(&[1, *d, *w, *h]),
        [1, _, _, _] => Ok(patch.clone()),
        s => Err(MomeError::Shape(format!("patch must be [1, D, W, H], got {s:?}"))),
    }
}
