//! Text-conditioned gating over expert scales.
//!
//! For class `k` a single shared perceptron scores every expert at every
//! voxel from `θ_k ⊕ F_l(x)`. Scores pass through a sigmoid, are divided by
//! their per-voxel sum, optionally restricted to the top-K experts, and
//! weight a convex combination of the expert tokens.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::ExpertTokens;
use crate::config::ModelConfig;
use crate::error::{MomeError, Result};
use crate::params::{uniform_init, Affine, Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const GATE_EPS: f64 = 1e-8;

/// Shared gate perceptron. Its first layer acts on `θ_k ⊕ F_l(x)`; the
/// weight is stored as the θ block and the token block so the token half
/// can be evaluated once per patch.
#[derive(Clone, Debug)]
pub struct Router {
    theta_len: usize,
    token_channels: usize,
    w1_theta: ParamId,
    w1_token: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Token half of the router's first layer, `W1_tok · F_l`, per expert.
#[derive(Clone, Debug)]
pub struct RouterInputs {
    pub hidden: Vec<Var>,
    pub dims: [usize; 3],
}

impl Router {
    pub fn new<T: Scalar>(cfg: &ModelConfig, s: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let theta_len = cfg.head_param_len();
        let fan_in = theta_len + cfg.token_channels;
        let h = cfg.router_hidden;
        let w1_theta = s.push("router.fc1.w_theta", uniform_init(rng, &[h, theta_len], fan_in, 1.0));
        let w1_token = s.push("router.fc1.w_token", uniform_init(rng, &[h, cfg.token_channels], fan_in, 1.0));
        let b1 = s.push("router.fc1.b", Tensor::zeros(&[h]));
        let w2 = s.push("router.fc2.w", uniform_init(rng, &[h], h, 1.0));
        let b2 = s.push("router.fc2.b", Tensor::zeros(&[1]));
        Self {
            theta_len,
            token_channels: cfg.token_channels,
            w1_theta,
            w1_token,
            b1,
            w2,
            b2,
        }
    }

    pub fn prepare<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, tokens: &ExpertTokens) -> Result<RouterInputs> {
        let first = g.shape(tokens.tokens[0]).to_vec();
        if first.len() != 4 || first[0] != self.token_channels {
            return Err(MomeError::Shape(format!(
                "expert tokens must be [{}, D, W, H], got {first:?}",
                self.token_channels
            )));
        }
        let dims = [first[1], first[2], first[3]];
        let n: usize = dims.iter().product();
        let mut hidden = Vec::with_capacity(tokens.tokens.len());
        for &f in &tokens.tokens {
            if g.shape(f) != first.as_slice() {
                return Err(MomeError::Shape("expert tokens differ in shape".into()));
            }
            let flat = g.reshape(f, &[self.token_channels, n]);
            hidden.push(g.matmul(p.get(self.w1_token), flat, false, false));
        }
        Ok(RouterInputs { hidden, dims })
    }

    /// Unnormalised gate score per expert, each `[1, N]`.
    pub fn raw_gates<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, theta: Var, inputs: &RouterInputs) -> Result<Vec<Var>> {
        if g.shape(theta) != [self.theta_len] {
            return Err(MomeError::Shape(format!(
                "router expects θ of length {}, got {:?}",
                self.theta_len,
                g.shape(theta)
            )));
        }
        let theta_col = g.reshape(theta, &[self.theta_len, 1]);
        let class_term = Affine {
            w: self.w1_theta,
            b: self.b1,
        }
        .apply(g, p, theta_col);
        let hidden = g.shape(class_term)[0];
        let class_term = g.reshape(class_term, &[hidden]);
        Ok(inputs
            .hidden
            .iter()
            .map(|&a| g.gate_mlp(a, class_term, p.get(self.w2), p.get(self.b2)))
            .collect())
    }
}

/// Sigmoid then per-voxel division by the expert sum (plus [`GATE_EPS`]).
pub fn normalize_gates<T: Scalar>(g: &mut Graph<T>, raw: &[Var]) -> Vec<Var> {
    let positive: Vec<Var> = raw.iter().map(|&r| g.sigmoid(r)).collect();
    let total = sum_all(g, &positive);
    let denom = g.add_scalar(total, T::of(GATE_EPS));
    positive.iter().map(|&s| g.div(s, denom)).collect()
}

fn sum_all<T: Scalar>(g: &mut Graph<T>, xs: &[Var]) -> Var {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x);
    }
    acc
}

/// Indicator of the `k` largest entries of `values`, ties to the lower index.
pub fn topk_mask(values: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut keep = vec![false; values.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    keep
}

/// Keep the `k` largest gates per voxel and renormalise them. With
/// `k == L` the input handles are returned unchanged. The selection is a
/// constant of the graph, so gradients reach only kept gates.
pub fn topk_filter<T: Scalar>(g: &mut Graph<T>, gates: &[Var], k: usize) -> Result<Vec<Var>> {
    let experts = gates.len();
    if k == 0 || k > experts {
        return Err(MomeError::OutOfRange {
            index: k,
            len: experts + 1,
        });
    }
    if k == experts {
        return Ok(gates.to_vec());
    }
    let shape = g.shape(gates[0]).to_vec();
    let n = g.value(gates[0]).numel();
    let mut masks = vec![vec![T::zero(); n]; experts];
    let mut column = vec![0.0; experts];
    for x in 0..n {
        for (l, c) in column.iter_mut().enumerate() {
            *c = g.value(gates[l]).data()[x].f64();
        }
        for (l, keep) in topk_mask(&column, k).into_iter().enumerate() {
            if keep {
                masks[l][x] = T::one();
            }
        }
    }
    let kept: Vec<Var> = gates
        .iter()
        .zip(masks)
        .map(|(&gate, m)| {
            let m = g.constant(Tensor::from_vec(&shape, m).expect("mask shape"));
            g.mul(gate, m)
        })
        .collect();
    let total = sum_all(g, &kept);
    Ok(kept.iter().map(|&v| g.div(v, total)).collect())
}

/// `G(x) = Σ_l gate_l(x) · F_l(x)`, returned as `[C_tok, N]`.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, gates: &[Var], tokens: &ExpertTokens) -> Result<Var> {
    if gates.len() != tokens.tokens.len() {
        return Err(MomeError::Shape(format!(
            "{} gate fields for {} experts",
            gates.len(),
            tokens.tokens.len()
        )));
    }
    let shape = g.shape(tokens.tokens[0]).to_vec();
    let n: usize = shape[1..].iter().product();
    let mut terms = Vec::with_capacity(gates.len());
    for (&gate, &f) in gates.iter().zip(&tokens.tokens) {
        if g.value(gate).numel() != n || g.shape(f) != shape.as_slice() {
            return Err(MomeError::Shape("gate field and token shapes disagree".into()));
        }
        let flat = g.reshape(f, &[shape[0], n]);
        let gate = g.reshape(gate, &[1, n]);
        terms.push(g.mul_broadcast(flat, gate));
    }
    Ok(sum_all(g, &terms))
}

/// Materialised per-voxel expert weights for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct GateField<T> {
    pub class_index: usize,
    /// `[L, D, W, H]`
    pub gates: Tensor<T>,
}

impl<T: Scalar> GateField<T> {
    pub fn from_graph(g: &Graph<T>, class_index: usize, gates: &[Var], dims: [usize; 3]) -> Self {
        let data = gates
            .iter()
            .flat_map(|&v| g.value(v).data().iter().copied())
            .collect();
        Self {
            class_index,
            gates: Tensor::from_vec(&[gates.len(), dims[0], dims[1], dims[2]], data).expect("gate shape"),
        }
    }

    pub fn experts(&self) -> usize {
        self.gates.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.gates.shape();
        [s[1], s[2], s[3]]
    }

    /// Per-voxel weights across experts.
    pub fn at(&self, x: usize) -> Vec<T> {
        let n = self.gates.inner_len();
        (0..self.experts()).map(|l| self.gates.data()[l * n + x]).collect()
    }

    /// Worst simplex violation `max_x |Σ_l g − 1|`, or infinity if any gate
    /// is negative or non-finite.
    pub fn simplex_error(&self) -> f64 {
        let n = self.gates.inner_len();
        let mut worst: f64 = 0.0;
        for x in 0..n {
            let col = self.at(x);
            if col.iter().any(|v| !(v.f64() >= 0.0)) {
                return f64::INFINITY;
            }
            let s: f64 = col.iter().map(|v| v.f64()).sum();
            worst = worst.max((s - 1.0).abs());
        }
        worst
    }

    pub fn max_nonzero_per_voxel(&self) -> usize {
        (0..self.gates.inner_len())
            .map(|x| self.at(x).iter().filter(|v| **v != T::zero()).count())
            .max()
            .unwrap_or(0)
    }

    fn split(&self, g: &mut Graph<T>) -> Vec<Var> {
        (0..self.experts())
            .map(|l| g.constant(self.gates.channel(l)))
            .collect()
    }

    fn rebuild(g: &Graph<T>, class_index: usize, vars: &[Var], dims: [usize; 3]) -> Self {
        Self::from_graph(g, class_index, vars, dims)
    }
}

/// Tensor-level [`normalize_gates`] over raw scores `[L, D, W, H]`.
pub fn normalize_gate_field<T: Scalar>(raw: &Tensor<T>, class_index: usize) -> GateField<T> {
    let mut g = Graph::inference();
    let dims = [raw.shape()[1], raw.shape()[2], raw.shape()[3]];
    let vars: Vec<Var> = (0..raw.shape()[0]).map(|l| g.constant(raw.channel(l))).collect();
    let out = normalize_gates(&mut g, &vars);
    GateField::rebuild(&g, class_index, &out, dims)
}

/// Tensor-level [`topk_filter`].
pub fn topk_gate_field<T: Scalar>(field: &GateField<T>, k: usize) -> Result<GateField<T>> {
    let mut g = Graph::inference();
    let vars = field.split(&mut g);
    let out = topk_filter(&mut g, &vars, k)?;
    Ok(GateField::rebuild(&g, field.class_index, &out, field.dims()))
}

/// Tensor-level [`fuse`]; `tokens` are `[C_tok, D, W, H]` each. Returns
/// `[C_tok, D, W, H]`.
pub fn fuse_field<T: Scalar>(field: &GateField<T>, tokens: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let gates = field.split(&mut g);
    let toks = ExpertTokens {
        tokens: tokens.iter().map(|t| g.constant(t.clone())).collect(),
    };
    let fused = fuse(&mut g, &gates, &toks)?;
    g.value(fused).clone().reshaped(tokens[0].shape())
}
