use crate::autodiff::{Graph, Var};
use crate::tensor::{Result, Tensor};

use super::params::{Initializer, ParamId, ParamStore};
use super::ModelError;

/// `x·W + b` on `[N × in]` inputs. `W` is stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
    ) -> std::result::Result<Self, ModelError> {
        let weight = store.add(format!("{name}.weight"), init.fan_in(&[in_dim, out_dim], in_dim))?;
        let bias = if with_bias {
            Some(store.add(format!("{name}.bias"), init.fan_in(&[out_dim], in_dim))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => g.bias_add(y, p[b]),
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron: linear, relu, linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> std::result::Result<Self, ModelError> {
        Ok(Self {
            first: Linear::new(store, init, &format!("{name}.fc1"), in_dim, hidden, true)?,
            second: Linear::new(store, init, &format!("{name}.fc2"), hidden, out_dim, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let h = self.first.forward(g, p, x)?;
        let h = g.relu(h);
        self.second.forward(g, p, h)
    }
}

/// Learnable gain (init 1) and bias (init 0) around [`Graph::layer_norm`].
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> std::result::Result<Self, ModelError> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, axis: usize) -> Result<Var> {
        g.layer_norm(x, axis, p[self.gain], p[self.bias])
    }
}
