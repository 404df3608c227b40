//! Named parameter storage and the per-forward binding of parameters to a tape.

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian used for every weight matrix,
/// embedding table, and learnable token.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// A tape plus lazily bound parameter leaves for one forward pass.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Graph<'a> {
    /// With `trainable`, bound parameters collect gradients on backward.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient per parameter, `None` where the parameter was unused.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v)).map(<[f64]>::to_vec))
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }
}

/// Allocates initialized parameters under a dotted name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = Tensor::randn(shape, INIT_STD, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, 1.0))
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.normal(&format!("{name}.weight"), &[fan_in, fan_out]),
            bias: self.zeros(&format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNormParams {
        LayerNormParams {
            gain: self.ones(&format!("{name}.gain"), &[dim]),
            bias: self.zeros(&format!("{name}.bias"), &[dim]),
        }
    }
}

/// `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.tape.matmul(x, w)?;
        g.tape.add(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Variance floor inside layer normalization.
pub const LN_EPS: f64 = 1e-12;

impl LayerNormParams {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.tape.layer_norm(x, gain, bias, LN_EPS)
    }
}
