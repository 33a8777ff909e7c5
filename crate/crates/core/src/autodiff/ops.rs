//! Forward operations and their backward rules.
//!
//! Broadcasting is deliberately narrow: binary ops require identical shapes,
//! scalars enter through `scale`/`add_scalar`, and `bias_add` adds a vector
//! along the trailing axis.

use crate::tensor::{axis_split, numel, Result, Tensor, TensorError};

use super::graph::{Graph, Var};

/// Variance floor used by `layer_norm`.
pub const VARIANCE_FLOOR: f64 = 1e-5;
/// Norm floor used by `l2_normalize`.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Exp,
    Log,
    Relu,
    Sum,
    Mean,
    SumAxis,
    Softmax,
    LogSoftmax,
    Concat,
    Slice,
    Permute,
    Reshape,
    LayerNorm,
    BiasAdd,
    L2Normalize,
    NormalizeSum,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<Self> {
        use OpKind::*;
        Some(match name {
            "matmul" => MatMul,
            "bmm" | "batch_matmul" => BatchMatMul,
            "add" => Add,
            "sub" => Sub,
            "mul" => Mul,
            "scale" => Scale,
            "add_scalar" => AddScalar,
            "exp" => Exp,
            "log" => Log,
            "relu" => Relu,
            "sum" => Sum,
            "mean" => Mean,
            "sum_axis" => SumAxis,
            "softmax" => Softmax,
            "log_softmax" => LogSoftmax,
            "concat" => Concat,
            "slice" => Slice,
            "permute" => Permute,
            "reshape" => Reshape,
            "layer_norm" => LayerNorm,
            "bias_add" => BiasAdd,
            "l2_normalize" => L2Normalize,
            "normalize_sum" => NormalizeSum,
            _ => return None,
        })
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log { x: Var, floor: Option<f64> },
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    BiasAdd(Var, Var),
    L2Normalize { x: Var, axis: usize, norms: Vec<f64> },
    NormalizeSum { x: Var, axis: usize },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul(..) => OpKind::BatchMatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Exp(..) => OpKind::Exp,
            Op::Log { .. } => OpKind::Log,
            Op::Relu(..) => OpKind::Relu,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape(..) => OpKind::Reshape,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BiasAdd(..) => OpKind::BiasAdd,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::NormalizeSum { .. } => OpKind::NormalizeSum,
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::BiasAdd(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => vec![*x],
            Op::Log { x, .. }
            | Op::SumAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Slice { x, .. }
            | Op::Permute { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::NormalizeSum { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        }
    }
}

// ---------------------------------------------------------------------------
// kernels

/// `a[m×k] · b[k×n]`.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += out_strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= out_strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    (out, out_shape)
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::AxisOutOfRange { op, axis, rank })
    } else {
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        })
    } else {
        Ok(())
    }
}

fn softmax_slices(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..n).map(|k| (x[at(k)] - max).exp()).sum();
            let log_denom = denom.ln();
            for k in 0..n {
                let shifted = x[at(k)] - max;
                out[at(k)] = if log {
                    shifted - log_denom
                } else {
                    shifted.exp() / denom
                };
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// forward ops

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    /// Batched product `[b×m×k] · [b×k×n] -> [b×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * m * n);
        for t in 0..batch {
            out.extend(gemm(
                &da[t * m * k..(t + 1) * m * k],
                &db[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        Ok(self.push(Tensor::new(&[batch, m, n], out)?, Op::BatchMatMul(a, b)))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x))
    }

    /// Natural log, clamped below at the graph's log floor.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let floor = self.log_floor;
        let value = self.value(x);
        let t = match floor {
            Some(f) => value.map(|v| v.max(f).ln()),
            None => {
                if let Some(&bad) = value.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(TensorError::Domain { op: "log", value: bad });
                }
                value.map(f64::ln)
            }
        };
        Ok(self.push(t, Op::Log { x, floor }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Sums along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("sum_axis", axis, shape.len())?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += data[(o * n + k) * inner + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxis { x, axis }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", axis, shape.len())?;
        let out = softmax_slices(self.value(x).data(), &shape, axis, false);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("log_softmax", axis, shape.len())?;
        let out = softmax_slices(self.value(x).data(), &shape, axis, true);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax { x, axis }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::EmptyConcat)?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", axis, shape.len())?;
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "slice {start}..{} out of extent {} on axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Slice { x, axis, start }))
    }

    /// Splits `x` along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::InvalidArgument(format!(
                "{perm:?} is not a permutation of rank {}",
                shape.len()
            )));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        check_axis("transpose", a.max(b), rank)?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(TensorError::AxisOutOfRange {
                op: "t",
                axis: 1,
                rank: self.shape(x).len(),
            });
        }
        self.transpose(x, 0, 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Normalizes every slice along `axis` to mean 0 / variance 1 (variance
    /// floored at [`VARIANCE_FLOOR`]), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("layer_norm", axis, shape.len())?;
        let n = shape[axis];
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: shape.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let mut normalized = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut floored = vec![false; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mean = (0..n).map(|k| xd[at(k)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|k| (xd[at(k)] - mean).powi(2)).sum::<f64>() / n as f64;
                let s = o * inner + i;
                floored[s] = var < VARIANCE_FLOOR;
                inv_std[s] = 1.0 / var.max(VARIANCE_FLOOR).sqrt();
                for k in 0..n {
                    let xh = (xd[at(k)] - mean) * inv_std[s];
                    normalized[at(k)] = xh;
                    out[at(k)] = xh * gd[k] + bd[k];
                }
            }
        }
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                normalized,
                inv_std,
                floored,
            },
        ))
    }

    /// Adds a vector along the trailing axis of `x`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("rank >= 1");
        if self.shape(bias) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                left: shape,
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        Ok(self.push(Tensor::new(&shape, data)?, Op::BiasAdd(x, bias)))
    }

    /// Divides every slice along `axis` by its Euclidean norm (floored at
    /// [`NORM_FLOOR`]).
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("l2_normalize", axis, shape.len())?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut norms = vec![0.0; outer * inner];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let norm = (0..n).map(|k| xd[at(k)].powi(2)).sum::<f64>().sqrt();
                norms[o * inner + i] = norm;
                let denom = norm.max(NORM_FLOOR);
                for k in 0..n {
                    out[at(k)] = xd[at(k)] / denom;
                }
            }
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::L2Normalize { x, axis, norms }))
    }

    /// Divides every slice along `axis` by its sum.
    pub fn normalize_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("normalize_sum", axis, shape.len())?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let s: f64 = (0..n).map(|k| xd[at(k)]).sum();
                if s.abs() < f64::MIN_POSITIVE || !s.is_finite() {
                    return Err(TensorError::Domain {
                        op: "normalize_sum",
                        value: s,
                    });
                }
                for k in 0..n {
                    out[at(k)] = xd[at(k)] / s;
                }
            }
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::NormalizeSum { x, axis }))
    }
}

// ---------------------------------------------------------------------------
// backward rules

/// Gradient contributions of node `id` to each of its inputs, given the
/// incoming gradient `g` (same length as the node's value).
pub(crate) fn backward_rule(graph: &Graph, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let node = &graph.nodes[id];
    let out = node.value.data();
    let val = |v: Var| graph.value(v);
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let bt = transpose2(val(*b).data(), k, n);
            let at = transpose2(val(*a).data(), m, k);
            vec![(*a, gemm(g, &bt, m, n, k)), (*b, gemm(&at, g, k, m, n))]
        }
        Op::BatchMatMul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let mut ga = Vec::with_capacity(ad.len());
            let mut gb = Vec::with_capacity(bd.len());
            for t in 0..batch {
                let gt = &g[t * m * n..(t + 1) * m * n];
                let bt = transpose2(&bd[t * k * n..(t + 1) * k * n], k, n);
                let at = transpose2(&ad[t * m * k..(t + 1) * m * k], m, k);
                ga.extend(gemm(gt, &bt, m, n, k));
                gb.extend(gemm(&at, gt, k, m, n));
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(bd).map(|(g, b)| g * b).collect()),
                (*b, g.iter().zip(ad).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
        Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Exp(x) => vec![(*x, g.iter().zip(out).map(|(g, y)| g * y).collect())],
        Op::Log { x, floor } => {
            let xd = val(*x).data();
            let grad = g
                .iter()
                .zip(xd)
                .map(|(g, &x)| match floor {
                    Some(f) if x <= *f => 0.0,
                    _ => g / x,
                })
                .collect();
            vec![(*x, grad)]
        }
        Op::Relu(x) => {
            let xd = val(*x).data();
            vec![(*x, g.iter().zip(xd).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
        }
        Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
        Op::Mean(x) => {
            let n = val(*x).len();
            vec![(*x, vec![g[0] / n as f64; n])]
        }
        Op::SumAxis { x, axis } => {
            let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
            let mut grad = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        grad[(o * n + k) * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![(*x, grad)]
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
            let mut grad = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                    for k in 0..n {
                        grad[at(k)] = out[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![(*x, grad)]
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
            let mut grad = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let total: f64 = (0..n).map(|k| g[at(k)]).sum();
                    for k in 0..n {
                        grad[at(k)] = g[at(k)] - out[at(k)].exp() * total;
                    }
                }
            }
            vec![(*x, grad)]
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let (outer, total, inner) = axis_split(out_shape, *axis);
            let mut offset = 0;
            let mut result = Vec::with_capacity(parts.len());
            for &p in parts {
                let n = val(p).shape()[*axis];
                let mut grad = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    grad.extend_from_slice(&g[base..base + n * inner]);
                }
                offset += n;
                result.push((p, grad));
            }
            result
        }
        Op::Slice { x, axis, start } => {
            let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
            let len = node.value.shape()[*axis];
            let mut grad = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                grad[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*x, grad)]
        }
        Op::Permute { x, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (grad, _) = permute_data(g, node.value.shape(), &inverse);
            vec![(*x, grad)]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            normalized,
            inv_std,
            floored,
        } => {
            let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
            let gd = val(*gain).data();
            let mut gx = vec![0.0; out.len()];
            let mut g_gain = vec![0.0; n];
            let mut g_bias = vec![0.0; n];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let s = o * inner + i;
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for k in 0..n {
                        let dxh = g[at(k)] * gd[k];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * normalized[at(k)];
                        g_gain[k] += g[at(k)] * normalized[at(k)];
                        g_bias[k] += g[at(k)];
                    }
                    mean_dxh /= n as f64;
                    mean_dxh_xh /= n as f64;
                    if floored[s] {
                        mean_dxh_xh = 0.0;
                    }
                    for k in 0..n {
                        let dxh = g[at(k)] * gd[k];
                        gx[at(k)] = inv_std[s] * (dxh - mean_dxh - normalized[at(k)] * mean_dxh_xh);
                    }
                }
            }
            vec![(*x, gx), (*gain, g_gain), (*bias, g_bias)]
        }
        Op::BiasAdd(x, b) => {
            let n = val(*b).len();
            let mut gb = vec![0.0; n];
            for (i, v) in g.iter().enumerate() {
                gb[i % n] += v;
            }
            vec![(*x, g.to_vec()), (*b, gb)]
        }
        Op::L2Normalize { x, axis, norms } => {
            let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
            let mut grad = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let norm = norms[o * inner + i];
                    if norm > NORM_FLOOR {
                        let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..n {
                            grad[at(k)] = (g[at(k)] - out[at(k)] * dot) / norm;
                        }
                    } else {
                        for k in 0..n {
                            grad[at(k)] = g[at(k)] / NORM_FLOOR;
                        }
                    }
                }
            }
            vec![(*x, grad)]
        }
        Op::NormalizeSum { x, axis } => {
            let xd = val(*x).data();
            let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
            let mut grad = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let s: f64 = (0..n).map(|k| xd[at(k)]).sum();
                    let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                    for k in 0..n {
                        grad[at(k)] = (g[at(k)] - dot) / s;
                    }
                }
            }
            vec![(*x, grad)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 7.]);

        let i = g.constant(Tensor::eye(2));
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000., 0.]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() <= 1e-12);
        assert!(g.value(y).data()[1].abs() <= 1e-12);
        assert!(g.value(y).all_finite());
        assert!(matches!(g.softmax(x, 1), Err(TensorError::AxisOutOfRange { .. })));
    }

    #[test]
    fn softmax_along_middle_axis() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| v.get(&[o, k, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_shapes_and_errors() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::ones(&[2, 3]));
        let b = g.leaf(Tensor::ones(&[2, 5]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 8]);
        let single = g.concat(&[a], 0).unwrap();
        assert_eq!(g.value(single), g.value(a));
        assert_eq!(g.concat(&[], 0).unwrap_err(), TensorError::EmptyConcat);
        assert!(matches!(g.concat(&[a, b], 0), Err(TensorError::ShapeMismatch { .. })));

        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn elementwise_definitions() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[1., 2., 3., 4.]));
        let m = g.mean(x);
        assert_eq!(g.value(m).item(), 2.5);

        let r = g.constant(t(&[2], &[-1., 2.]));
        let r = g.relu(r);
        assert_eq!(g.value(r).data(), &[0., 2.]);

        let p = g.constant(t(&[3], &[0.1, 1.0, 37.5]));
        let l = g.log(p).unwrap();
        let e = g.exp(l);
        for (a, b) in g.value(e).data().iter().zip(g.value(p).data()) {
            assert!((a - b).abs() / b <= 1e-12);
        }
    }

    #[test]
    fn log_floor_and_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, -1.0]));
        let y = g.log(x).unwrap();
        assert_eq!(g.value(y).data(), &[1e-12f64.ln(), 1e-12f64.ln()]);
        g.set_log_floor(None);
        assert!(matches!(g.log(x), Err(TensorError::Domain { op: "log", .. })));
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[5., 5., 5., 1., 2., 3.]));
        let gain = g.constant(Tensor::ones(&[3]));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, 1, gain, bias).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[0., 0., 0.]);
        let mean: f64 = v.row(1).iter().sum::<f64>() / 3.0;
        let var: f64 = v.row(1).iter().map(|x| x * x).sum::<f64>() / 3.0;
        assert!(mean.abs() <= 1e-10);
        assert!((var - 1.0).abs() <= 1e-12);
        let bad = g.constant(Tensor::ones(&[2]));
        assert!(g.layer_norm(x, 1, bad, bias).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[3]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn sum_gradient_is_ones_and_uses_accumulate() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[0.5, -1.5]));
        let w = g.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1., 1.]);

        let once = g.matmul(x, w).unwrap();
        let l1 = g.sum(once);
        let g1 = g.backward(l1).unwrap().get(x).unwrap().clone();
        let again = g.matmul(x, w).unwrap();
        let both = g.add(once, again).unwrap();
        let l2 = g.sum(both);
        let g2 = g.backward(l2).unwrap().get(x).unwrap().clone();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn transpose_and_reshape_layout() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let y = g.transpose(x, 0, 2).unwrap();
        assert_eq!(g.shape(y), &[4, 3, 2]);
        assert_eq!(g.value(y).get(&[3, 1, 0]), g.value(x).get(&[0, 1, 3]));
        let z = g.transpose(y, 0, 2).unwrap();
        assert_eq!(g.value(z), g.value(x));
        let r = g.reshape(x, &[6, 4]).unwrap();
        assert_eq!(g.value(r).data(), g.value(x).data());
        assert!(g.reshape(x, &[5, 5]).is_err());
    }

    #[test]
    fn fault_injection_scales_only_the_named_rule() {
        let mut g = Graph::new();
        g.inject_fault(OpKind::Relu, 2.0);
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(g.value(r).data(), &[1.0, 2.0]);
    }

    #[test]
    fn parse_op_names() {
        assert_eq!(OpKind::parse("softmax"), Some(OpKind::Softmax));
        assert_eq!(OpKind::parse("bogus"), None);
    }
}
