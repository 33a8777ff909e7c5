//! Scaled dot-product attention over token grids.
//!
//! Queries come from one `[B × T × q_in]` grid and keys/values from another
//! `[B × S × kv_in]` grid; self-attention passes the same grid twice. Heads
//! are laid out contiguously in the projected width.

use crate::autodiff::{Graph, Var};
use crate::tensor::Result;

use super::params::{Initializer, ParamId, ParamStore};
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Per-head query/key width (`d_k`).
    pub key_dim: usize,
    /// Per-head value width.
    pub value_dim: usize,
    pub query_in: usize,
    pub kv_in: usize,
    /// Width of the output projection applied to the concatenated heads;
    /// `None` returns the concatenated heads directly.
    pub out_dim: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub spec: AttentionSpec,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: Option<ParamId>,
}

pub struct AttentionOutput {
    /// `[B × T × out]`.
    pub output: Var,
    /// `[B·heads × T × S]`, rows sum to one.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        spec: AttentionSpec,
    ) -> std::result::Result<Self, ModelError> {
        let qk = spec.heads * spec.key_dim;
        let v = spec.heads * spec.value_dim;
        let query = store.add(format!("{name}.query"), init.fan_in(&[spec.query_in, qk], spec.query_in))?;
        let key = store.add(format!("{name}.key"), init.fan_in(&[spec.kv_in, qk], spec.kv_in))?;
        let value = store.add(format!("{name}.value"), init.fan_in(&[spec.kv_in, v], spec.kv_in))?;
        let output = match spec.out_dim {
            Some(out) => Some(store.add(format!("{name}.output"), init.fan_in(&[v, out], v))?),
            None => None,
        };
        Ok(Self {
            spec,
            query,
            key,
            value,
            output,
        })
    }

    /// Projects `[B × T × in]` through `weight` and splits heads:
    /// `[B·heads × T × per_head]`.
    fn heads(&self, g: &mut Graph, x: Var, weight: Var, per_head: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, t, width) = (s[0], s[1], s[2]);
        let h = self.spec.heads;
        let flat = g.reshape(x, &[b * t, width])?;
        let proj = g.matmul(flat, weight)?;
        let split = g.reshape(proj, &[b, t, h, per_head])?;
        let moved = g.permute(split, &[0, 2, 1, 3])?;
        g.reshape(moved, &[b * h, t, per_head])
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], queries: Var, keys_values: Var) -> Result<AttentionOutput> {
        let sq = g.shape(queries).to_vec();
        let skv = g.shape(keys_values).to_vec();
        if sq.len() != 3 || skv.len() != 3 || sq[0] != skv[0] {
            return Err(crate::TensorError::ShapeMismatch {
                op: "attention",
                left: sq,
                right: skv,
            });
        }
        let (b, t) = (sq[0], sq[1]);
        let AttentionSpec {
            heads,
            key_dim,
            value_dim,
            ..
        } = self.spec;

        let q = self.heads(g, queries, p[self.query], key_dim)?;
        let k = self.heads(g, keys_values, p[self.key], key_dim)?;
        let v = self.heads(g, keys_values, p[self.value], value_dim)?;
        let kt = g.transpose(k, 1, 2)?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (key_dim as f64).sqrt());
        let weights = g.softmax(scores, 2)?;
        let context = g.bmm(weights, v)?;
        let context = g.reshape(context, &[b, heads, t, value_dim])?;
        let context = g.permute(context, &[0, 2, 1, 3])?;
        let context = g.reshape(context, &[b * t, heads * value_dim])?;
        let out = match self.output {
            Some(w) => g.matmul(context, p[w])?,
            None => context,
        };
        let width = g.shape(out)[1];
        let output = g.reshape(out, &[b, t, width])?;
        Ok(AttentionOutput { output, weights })
    }
}
