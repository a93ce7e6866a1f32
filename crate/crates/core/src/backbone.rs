//! Volumetric encoder–decoder and the per-scale expert projections.
//!
//! The encoder halves resolution `L − 1` times with strided 3×3×3
//! convolutions followed by residual blocks, with optional multi-head
//! self-attention over the bottleneck voxels. The decoder walks back up
//! with trilinear upsampling and skip concatenation; each of its `L`
//! levels is one expert scale. Pyramid index 0 is the coarsest level.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{MomeError, Result};
use crate::params::{uniform_init, Affine, Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new<T: Scalar>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        let fan_in = cin * 27;
        let w = s.push(format!("{name}.w"), uniform_init(rng, &[cout, fan_in], fan_in, 1.0));
        let b = s.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, stride: usize) -> Var {
        g.conv3d(x, p.get(self.w), p.get(self.b), stride)
    }

    /// conv → instance norm → GELU
    fn block<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, stride: usize) -> Var {
        let y = self.apply(g, p, x, stride);
        let y = g.instance_norm(y);
        g.gelu(y)
    }
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    c1: Conv,
    c2: Conv,
}

impl ResBlock {
    fn new<T: Scalar>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, ch: usize) -> Self {
        Self {
            c1: Conv::new(s, rng, &format!("{name}.c1"), ch, ch),
            c2: Conv::new(s, rng, &format!("{name}.c2"), ch, ch),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let y = self.c1.block(g, p, x, 1);
        let y = self.c2.apply(g, p, y, 1);
        let y = g.instance_norm(y);
        let y = g.add(x, y);
        g.gelu(y)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    out: Affine,
    heads: usize,
}

impl Attention {
    fn new<T: Scalar>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, ch: usize, heads: usize) -> Self {
        let mut proj = |n: &str| s.push(format!("backbone.attn.{n}"), uniform_init(rng, &[ch, ch], ch, 1.0));
        let (q, k, v) = (proj("q"), proj("k"), proj("v"));
        let out = Affine::new(s, rng, "backbone.attn.out", ch, ch, 0.5);
        Self { q, k, v, out, heads }
    }

    /// Residual multi-head self-attention over the voxels of `x: [C, D, W, H]`.
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let c = shape[0];
        let n: usize = shape[1..].iter().product();
        let tokens = g.reshape(x, &[c, n]);
        let q = g.matmul(p.get(self.q), tokens, false, false);
        let k = g.matmul(p.get(self.k), tokens, false, false);
        let v = g.matmul(p.get(self.v), tokens, false, false);
        let dh = c / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, h * dh, dh);
            let kh = g.slice(k, h * dh, dh);
            let vh = g.slice(v, h * dh, dh);
            let scores = g.matmul(qh, kh, true, false);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(vh, attn, false, true));
        }
        let merged = g.concat(&outs);
        let projected = self.out.apply(g, p, merged);
        let y = g.add(tokens, projected);
        g.reshape(y, &shape)
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    merge: Conv,
    block: ResBlock,
}

/// Two per-voxel linear layers with GELU between: `C_l → C_tok → C_tok`.
#[derive(Clone, Debug)]
struct ExpertMlp {
    first: Affine,
    second: Affine,
}

/// Parameter layout of the visual branch.
#[derive(Clone, Debug)]
pub struct Backbone {
    widths: Vec<usize>,
    token_channels: usize,
    stem: Conv,
    stem_block: ResBlock,
    downs: Vec<(Conv, ResBlock)>,
    attention: Option<Attention>,
    bottom: ResBlock,
    ups: Vec<UpStage>,
    experts: Vec<ExpertMlp>,
}

/// Encoder activations: one map per resolution, finest first. The last
/// entry is the bottleneck.
#[derive(Clone, Debug)]
pub struct EncoderState {
    pub stages: Vec<Var>,
    pub patch_dims: [usize; 3],
}

impl EncoderState {
    pub fn bottleneck(&self) -> Var {
        *self.stages.last().expect("encoder has stages")
    }
}

/// Decoder maps `f_1..f_L`, coarsest first; `features[L-1]` is at patch
/// resolution.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub features: Vec<Var>,
}

/// Expert token maps `F_1..F_L`, all `[C_tok, D, W, H]`.
#[derive(Clone, Debug)]
pub struct ExpertTokens {
    pub tokens: Vec<Var>,
}

impl Backbone {
    pub fn new<T: Scalar>(cfg: &ModelConfig, s: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.encoder_widths.clone();
        let levels = w.len();
        let stem = Conv::new(s, rng, "backbone.stem", 1, w[0]);
        let stem_block = ResBlock::new(s, rng, "backbone.enc0", w[0]);
        let downs = (1..levels)
            .map(|i| {
                let down = Conv::new(s, rng, &format!("backbone.enc{i}.down"), w[i - 1], w[i]);
                let block = ResBlock::new(s, rng, &format!("backbone.enc{i}.block"), w[i]);
                (down, block)
            })
            .collect();
        let attention = cfg
            .attention
            .then(|| Attention::new(s, rng, w[levels - 1], cfg.attention_heads));
        let bottom = ResBlock::new(s, rng, "backbone.dec0", w[levels - 1]);
        // decoder level j (1-based from coarsest) lands on encoder stage levels-1-j
        let ups = (1..levels)
            .map(|j| {
                let stage = levels - 1 - j;
                let name = format!("backbone.dec{j}");
                UpStage {
                    merge: Conv::new(s, rng, &format!("{name}.merge"), w[stage + 1] + w[stage], w[stage]),
                    block: ResBlock::new(s, rng, &format!("{name}.block"), w[stage]),
                }
            })
            .collect();
        let experts = (0..levels)
            .map(|l| {
                let ch = w[levels - 1 - l];
                let name = format!("backbone.expert{l}");
                ExpertMlp {
                    first: Affine::new(s, rng, &format!("{name}.fc1"), cfg.token_channels, ch, 1.0),
                    second: Affine::new(s, rng, &format!("{name}.fc2"), cfg.token_channels, cfg.token_channels, 1.0),
                }
            })
            .collect();
        Self {
            widths: w,
            token_channels: cfg.token_channels,
            stem,
            stem_block,
            downs,
            attention,
            bottom,
            ups,
            experts,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Encoder pass over `patch: [1, D, W, H]`.
    pub fn encode<T: Scalar>(&self, cfg: &ModelConfig, g: &mut Graph<T>, p: &Bound, patch: Var) -> Result<EncoderState> {
        let shape = g.shape(patch).to_vec();
        if shape.len() != 4 || shape[0] != 1 {
            return Err(MomeError::Shape(format!("patch must be [1, D, W, H], got {shape:?}")));
        }
        let dims = [shape[1], shape[2], shape[3]];
        cfg.check_patch(dims)?;
        let mut x = self.stem.block(g, p, patch, 1);
        x = self.stem_block.apply(g, p, x);
        let mut stages = vec![x];
        for (down, block) in &self.downs {
            x = down.block(g, p, x, 2);
            x = block.apply(g, p, x);
            stages.push(x);
        }
        if let Some(attn) = &self.attention {
            let last = stages.len() - 1;
            stages[last] = attn.apply(g, p, stages[last]);
        }
        Ok(EncoderState {
            stages,
            patch_dims: dims,
        })
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, enc: &EncoderState) -> FeaturePyramid {
        let levels = self.levels();
        let mut x = self.bottom.apply(g, p, enc.bottleneck());
        let mut features = vec![x];
        for (j, up) in self.ups.iter().enumerate() {
            let skip = enc.stages[levels - 2 - j];
            let s = g.shape(skip).to_vec();
            let upsampled = g.resize(x, [s[1], s[2], s[3]]);
            let merged = g.concat(&[upsampled, skip]);
            x = up.merge.block(g, p, merged, 1);
            x = up.block.apply(g, p, x);
            features.push(x);
        }
        FeaturePyramid { features }
    }

    /// Upsample each scale to patch resolution and project per voxel to
    /// `C_tok` channels.
    pub fn expert_project<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyramid: &FeaturePyramid,
        patch_dims: [usize; 3],
    ) -> Result<ExpertTokens> {
        if pyramid.features.len() != self.levels() {
            return Err(MomeError::Shape(format!(
                "pyramid has {} levels, expected {}",
                pyramid.features.len(),
                self.levels()
            )));
        }
        let n: usize = patch_dims.iter().product();
        let mut tokens = Vec::with_capacity(self.levels());
        for (f, mlp) in pyramid.features.iter().zip(&self.experts) {
            let s = g.shape(*f).to_vec();
            let up = if [s[1], s[2], s[3]] == patch_dims {
                *f
            } else {
                g.resize(*f, patch_dims)
            };
            let flat = g.reshape(up, &[s[0], n]);
            let h = mlp.first.apply(g, p, flat);
            let h = g.gelu(h);
            let t = mlp.second.apply(g, p, h);
            let [d, w, hh] = patch_dims;
            tokens.push(g.reshape(t, &[self.token_channels, d, w, hh]));
        }
        Ok(ExpertTokens { tokens })
    }
}

/// Spatial mean of the bottleneck map: the image conditioning of the
/// controller.
pub fn global_feature<T: Scalar>(g: &mut Graph<T>, enc: &EncoderState) -> Var {
    g.mean_spatial(enc.bottleneck())
}
