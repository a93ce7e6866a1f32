//! Named parameter storage. Names are stable across runs and are the keys of
//! the checkpoint table.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{MomeError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter families that are verified and reported separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    Controller,
    Router,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        match name.split('.').next() {
            Some("backbone") => Some(Self::Backbone),
            Some("controller") => Some(Self::Controller),
            Some("router") => Some(Self::Router),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replace every tensor by name from `source`, checking shapes.
    pub fn assign_from(&mut self, source: &[(String, Tensor<T>)]) -> Result<()> {
        if source.len() != self.len() {
            return Err(MomeError::Config(format!(
                "expected {} parameter arrays, found {}",
                self.len(),
                source.len()
            )));
        }
        for (name, t) in source {
            let id = self.find(name).ok_or_else(|| {
                MomeError::Config(format!("unknown parameter {name:?}"))
            })?;
            if self.get(id).shape() != t.shape() {
                return Err(MomeError::Shape(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    self.get(id).shape(),
                    t.shape()
                )));
            }
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }

    /// Load every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Uniform draw in `±gain·sqrt(3 / fan_in)` (unit-variance-preserving).
pub fn uniform_init<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.gen_range(-bound..bound) as f32 as f64))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Weight + bias of a dense or convolutional layer.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        out: usize,
        fan_in: usize,
        gain: f64,
    ) -> Self {
        let w = store.push(format!("{name}.w"), uniform_init(rng, &[out, fan_in], fan_in, gain));
        let b = store.push(format!("{name}.b"), Tensor::zeros(&[out]));
        Self { w, b }
    }

    /// `w · x + b` with `x: [fan_in, N]`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let y = g.matmul(p.get(self.w), x, false, false);
        g.add_channel_bias(y, p.get(self.b))
    }
}
