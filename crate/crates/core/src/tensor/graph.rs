use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use rand::Rng;

use super::kernels::{self, axis_extents, gemm, MatView};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { inputs: Vec<Var>, axis: usize },
    Softmax { x: Var, axis: usize },
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Map { x: Var, deriv: Rc<dyn Fn(f64) -> f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, count: usize },
    Dropout { x: Var, mask: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Map { .. } => "map",
            Op::Embedding { .. } => "embedding",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Dropout { .. } => "dropout",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so node ids are already a topological order.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        f.debug_struct("Graph")
            .field("nodes", &nodes.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`. `None` when `v` does not
    /// require a gradient or is not an ancestor of the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn binary_same_shape(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape != y.shape {
                return Err(Error::shape(
                    op_name,
                    format!("{} vs {}", shape_str(&x.shape), shape_str(&y.shape)),
                ));
            }
            let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
            Tensor { shape: x.shape.clone(), data }
        };
        Ok(self.push(value, op, self.rg(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let value = self.with_value(x, |t| Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * s).collect(),
        });
        self.push(value, Op::Scale(x, s), self.rg(&[x]))
    }

    /// `x[..., d] + bias[d]`, broadcasting over leading axes.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[bias.0].value);
            let d = *xv.shape.last().unwrap();
            if bv.data.len() != d {
                return Err(Error::shape(
                    "add_bias",
                    format!("{} vs bias {}", shape_str(&xv.shape), shape_str(&bv.shape)),
                ));
            }
            let data = xv
                .data
                .chunks(d)
                .flat_map(|row| row.iter().zip(&bv.data).map(|(a, b)| a + b))
                .collect();
            Tensor { shape: xv.shape.clone(), data }
        };
        Ok(self.push(value, Op::AddBias(x, bias), self.rg(&[x, bias])))
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape.len() < 2 || bv.shape.len() != 2 || av.shape.last() != Some(&bv.shape[0]) {
                return Err(Error::shape(
                    "matmul",
                    format!("{} x {}", shape_str(&av.shape), shape_str(&bv.shape)),
                ));
            }
            let k = bv.shape[0];
            let n = bv.shape[1];
            let rows = av.data.len() / k;
            let mut out = vec![0.0; rows * n];
            gemm(MatView::new(&av.data, rows, k), MatView::new(&bv.data, k, n), 0.0, &mut out);
            let mut shape = av.shape.clone();
            *shape.last_mut().unwrap() = n;
            Tensor { shape, data: out }
        };
        Ok(self.push(value, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    fn batch_matmul_impl(&self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let op_name = if transpose_b { "batch_matmul_bt" } else { "batch_matmul" };
        let (value, batch, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let mismatch = || {
                Error::shape(op_name, format!("{} x {}", shape_str(&av.shape), shape_str(&bv.shape)))
            };
            let r = av.shape.len();
            if r < 3 || bv.shape.len() != r || av.shape[..r - 2] != bv.shape[..r - 2] {
                return Err(mismatch());
            }
            let (m, k) = (av.shape[r - 2], av.shape[r - 1]);
            let (bk, n) = if transpose_b {
                (bv.shape[r - 1], bv.shape[r - 2])
            } else {
                (bv.shape[r - 2], bv.shape[r - 1])
            };
            if bk != k {
                return Err(mismatch());
            }
            let batch: usize = av.shape[..r - 2].iter().product();
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                let am = MatView::new(&av.data[i * m * k..(i + 1) * m * k], m, k);
                let bslice = &bv.data[i * k * n..(i + 1) * k * n];
                let bm = if transpose_b { MatView::new(bslice, n, k).t() } else { MatView::new(bslice, k, n) };
                gemm(am, bm, 0.0, &mut out[i * m * n..(i + 1) * m * n]);
            }
            let mut shape = av.shape.clone();
            shape[r - 1] = n;
            (Tensor { shape, data: out }, batch, m, k, n)
        };
        let op = Op::BatchMatMul { a, b, transpose_b, batch, m, k, n };
        Ok(self.push(value, op, self.rg(&[a, b])))
    }

    /// Batched `a[..., m, k] · b[..., k, n]` over identical leading axes.
    pub fn batch_matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul_impl(a, b, false)
    }

    /// Batched `a[..., m, k] · b[..., n, k]ᵀ`.
    pub fn batch_matmul_bt(&self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul_impl(a, b, true)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.with_value(x, |t| {
            let n: usize = shape.iter().product();
            if n != t.data.len() || shape.contains(&0) {
                return Err(Error::shape(
                    "reshape",
                    format!("{} -> {}", shape_str(&t.shape), shape_str(shape)),
                ));
            }
            Ok(Tensor { shape: shape.to_vec(), data: t.data.clone() })
        })?;
        Ok(self.push(value, Op::Reshape(x), self.rg(&[x])))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.with_value(x, |t| {
            let mut seen = vec![false; t.shape.len()];
            let valid = perm.len() == t.shape.len()
                && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(Error::shape(
                    "permute",
                    format!("axes {perm:?} for shape {}", shape_str(&t.shape)),
                ));
            }
            let data = kernels::permute(&t.data, &t.shape, perm);
            Ok(Tensor { shape: perm.iter().map(|&p| t.shape[p]).collect(), data })
        })?;
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), self.rg(&[x])))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[inputs[0].0].value.shape;
            if axis >= first.len() {
                return Err(Error::shape("concat", format!("axis {axis} for {}", shape_str(first))));
            }
            let mut total = 0;
            for v in inputs {
                let s = &nodes[v.0].value.shape;
                let compatible = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape(
                        "concat",
                        format!("{} vs {} on axis {axis}", shape_str(first), shape_str(s)),
                    ));
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_extents(first, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let chunk = t.shape[axis] * inner;
                    data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.clone();
            shape[axis] = total;
            Tensor { shape, data }
        };
        let op = Op::Concat { inputs: inputs.to_vec(), axis };
        Ok(self.push(value, op, self.rg(inputs)))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let value = self.with_value(x, |t| {
            if axis >= t.shape.len() {
                return Err(Error::shape("softmax", format!("axis {axis} for {}", shape_str(&t.shape))));
            }
            let (outer, len, inner) = axis_extents(&t.shape, axis);
            let mut data = vec![0.0; t.data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let max = (0..len).map(|j| t.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for j in 0..len {
                        let e = (t.data[idx(j)] - max).exp();
                        data[idx(j)] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        data[idx(j)] /= sum;
                    }
                }
            }
            Ok(Tensor { shape: t.shape.clone(), data })
        })?;
        Ok(self.push(value, Op::Softmax { x, axis }, self.rg(&[x])))
    }

    /// Softmax over the last axis restricted to positions where `allowed` is
    /// true. Disallowed positions get probability exactly 0; a fully masked
    /// row is all zeros.
    pub fn masked_softmax(&self, x: Var, allowed: &[bool]) -> Result<Var> {
        let value = self.with_value(x, |t| {
            if allowed.len() != t.data.len() {
                return Err(Error::shape(
                    "masked_softmax",
                    format!("mask of {} for {}", allowed.len(), shape_str(&t.shape)),
                ));
            }
            let len = *t.shape.last().unwrap();
            let mut data = vec![0.0; t.data.len()];
            for ((row, mask), out) in
                t.data.chunks(len).zip(allowed.chunks(len)).zip(data.chunks_mut(len))
            {
                let max = row
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for ((o, &v), &m) in out.iter_mut().zip(row).zip(mask) {
                    if m {
                        *o = (v - max).exp();
                        sum += *o;
                    }
                }
                out.iter_mut().for_each(|o| *o /= sum);
            }
            Ok(Tensor { shape: t.shape.clone(), data })
        })?;
        Ok(self.push(value, Op::MaskedSoftmax(x), self.rg(&[x])))
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (value, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let d = *xv.shape.last().unwrap();
            if gv.data.len() != d || bv.data.len() != d {
                return Err(Error::shape(
                    "layer_norm",
                    format!(
                        "{} with gain {} and bias {}",
                        shape_str(&xv.shape),
                        shape_str(&gv.shape),
                        shape_str(&bv.shape)
                    ),
                ));
            }
            let rows = xv.data.len() / d;
            let mut xhat = vec![0.0; xv.data.len()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; xv.data.len()];
            for r in 0..rows {
                let row = &xv.data[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + eps).sqrt();
                rstd[r] = s;
                for j in 0..d {
                    let h = (row[j] - mean) * s;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv.data[j] + bv.data[j];
                }
            }
            (Tensor { shape: xv.shape.clone(), data: out }, xhat, rstd)
        };
        let op = Op::LayerNorm { x, gain, bias, xhat, rstd };
        Ok(self.push(value, op, self.rg(&[x, gain, bias])))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.with_value(x, |t| Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        });
        self.push(value, op, self.rg(&[x]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Elementwise custom function with a caller-supplied derivative.
    pub fn map(
        &self,
        x: Var,
        f: impl Fn(f64) -> f64,
        deriv: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        self.unary(x, f, Op::Map { x, deriv: Rc::new(deriv) })
    }

    /// Row lookup into `table[V, d]`; output shape is `lead_shape + [d]`.
    pub fn embedding(&self, table: Var, ids: &[u32], lead_shape: &[usize]) -> Result<Var> {
        let (value, idx) = self.with_value(table, |t| {
            if t.shape.len() != 2 {
                return Err(Error::shape("embedding", format!("table {}", shape_str(&t.shape))));
            }
            if lead_shape.iter().product::<usize>() != ids.len() || ids.is_empty() {
                return Err(Error::shape(
                    "embedding",
                    format!("{} ids for lead shape {}", ids.len(), shape_str(lead_shape)),
                ));
            }
            let (v, d) = (t.shape[0], t.shape[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            let mut idx = Vec::with_capacity(ids.len());
            for &id in ids {
                let id = id as usize;
                if id >= v {
                    return Err(Error::index("embedding", format!("token id {id} >= vocabulary {v}")));
                }
                data.extend_from_slice(&t.data[id * d..(id + 1) * d]);
                idx.push(id);
            }
            let mut shape = lead_shape.to_vec();
            shape.push(d);
            Ok((Tensor { shape, data }, idx))
        })?;
        Ok(self.push(value, Op::Embedding { table, ids: idx }, self.rg(&[table])))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.with_value(x, |t| t.data.iter().sum());
        self.push(Tensor::scalar(s), Op::Sum(x), self.rg(&[x]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = self.with_value(x, |t| t.data.iter().sum::<f64>() / t.data.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), self.rg(&[x]))
    }

    /// Mean token-level negative log-likelihood of `targets` under
    /// `logits[..., V]`, skipping positions equal to `ignore_id`.
    pub fn cross_entropy(&self, logits: Var, targets: &[u32], ignore_id: u32) -> Result<Var> {
        let (loss, tgt, count) = self.with_value(logits, |t| {
            let v = *t.shape.last().unwrap();
            let rows = t.data.len() / v;
            if targets.len() != rows {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("{} targets for logits {}", targets.len(), shape_str(&t.shape)),
                ));
            }
            let mut total = 0.0;
            let mut count = 0usize;
            let mut tgt = Vec::with_capacity(rows);
            for (row, &target) in t.data.chunks(v).zip(targets) {
                if target == ignore_id {
                    tgt.push(None);
                    continue;
                }
                let target = target as usize;
                if target >= v {
                    return Err(Error::index(
                        "cross_entropy",
                        format!("target id {target} >= vocabulary {v}"),
                    ));
                }
                total += log_sum_exp(row) - row[target];
                count += 1;
                tgt.push(Some(target));
            }
            if count == 0 {
                return Err(Error::EmptyLoss);
            }
            Ok((total / count as f64, tgt, count))
        })?;
        let op = Op::CrossEntropy { logits, targets: tgt, count };
        Ok(self.push(Tensor::scalar(loss), op, self.rg(&[logits])))
    }

    /// Inverted dropout. A zero rate returns `x` unchanged without recording a node.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.with_value(x, |t| t.data.len());
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let value = self.with_value(x, |t| Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        });
        Ok(self.push(value, Op::Dropout { x, mask }, self.rg(&[x])))
    }

    /// Reverse-mode pass from a scalar `root`. A graph supports exactly one
    /// backward pass; a second call is an error.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let node = nodes
            .get(root.0)
            .ok_or_else(|| Error::Graph(format!("root {} is not in this graph", root.0)))?;
        if !node.value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward root must be scalar, got shape {}",
                shape_str(&node.value.shape)
            )));
        }
        if !node.requires_grad {
            return Err(Error::Graph("backward root is detached (no differentiable inputs)".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Graph("backward already ran on this graph; build a fresh graph".into()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            propagate(&nodes, i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Name of the op that produced `v`; used in diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op.name()
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Adds into the gradient slot of `v`, allocating zeros on first touch.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.data.len()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            accumulate(nodes, grads, *a, |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * bv[j];
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * av[j];
                }
            });
        }
        Op::Scale(x, s) => {
            accumulate(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, gv)| *d += s * gv));
        }
        Op::AddBias(x, b) => {
            accumulate(nodes, grads, *x, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| {
                for row in g.chunks(d.len()) {
                    add_into(d, row);
                }
            });
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (k, n) = (bv.shape[0], bv.shape[1]);
            let rows = av.data.len() / k;
            let gm = MatView::new(g, rows, n);
            accumulate(nodes, grads, *a, |d| gemm(gm, MatView::new(&bv.data, k, n).t(), 1.0, d));
            accumulate(nodes, grads, *b, |d| gemm(MatView::new(&av.data, rows, k).t(), gm, 1.0, d));
        }
        &Op::BatchMatMul { a, b, transpose_b, batch, m, k, n } => {
            let (av, bv) = (val(a), val(b));
            accumulate(nodes, grads, a, |d| {
                for i in 0..batch {
                    let gm = MatView::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    let bs = &bv.data[i * k * n..(i + 1) * k * n];
                    // dA = G · Bᵀ, or G · B when b was stored transposed
                    let bm = if transpose_b { MatView::new(bs, n, k) } else { MatView::new(bs, k, n).t() };
                    gemm(gm, bm, 1.0, &mut d[i * m * k..(i + 1) * m * k]);
                }
            });
            accumulate(nodes, grads, b, |d| {
                for i in 0..batch {
                    let gm = MatView::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    let am = MatView::new(&av.data[i * m * k..(i + 1) * m * k], m, k);
                    let out = &mut d[i * k * n..(i + 1) * k * n];
                    if transpose_b {
                        gemm(gm.t(), am, 1.0, out);
                    } else {
                        gemm(am.t(), gm, 1.0, out);
                    }
                }
            });
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, |d| add_into(d, g)),
        Op::Permute(x, perm) => {
            let back = kernels::permute(g, &node.value.shape, &kernels::inverse_perm(perm));
            accumulate(nodes, grads, *x, |d| add_into(d, &back));
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_extents(&node.value.shape, *axis);
            let mut offset = 0;
            for v in inputs {
                let len = val(*v).shape[*axis];
                accumulate(nodes, grads, *v, |d| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                    }
                });
                offset += len;
            }
        }
        Op::Softmax { x, axis } => {
            let y = &node.value.data;
            let (outer, len, inner) = axis_extents(&node.value.shape, *axis);
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::MaskedSoftmax(x) => {
            let y = &node.value.data;
            let len = *node.value.shape.last().unwrap();
            accumulate(nodes, grads, *x, |d| {
                for ((dr, yr), gr) in d.chunks_mut(len).zip(y.chunks(len)).zip(g.chunks(len)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..len {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let gv = &val(*gain).data;
            let dim = gv.len();
            accumulate(nodes, grads, *x, |d| {
                for (r, &s) in rstd.iter().enumerate() {
                    let span = r * dim..(r + 1) * dim;
                    let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..dim {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= dim as f64;
                    mean_dh_h /= dim as f64;
                    let dr = &mut d[span];
                    for j in 0..dim {
                        dr[j] += s * (gr[j] * gv[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            });
            accumulate(nodes, grads, *gain, |d| {
                for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                    for j in 0..dim {
                        d[j] += gr[j] * hr[j];
                    }
                }
            });
            accumulate(nodes, grads, *bias, |d| {
                for gr in g.chunks(dim) {
                    add_into(d, gr);
                }
            });
        }
        Op::Gelu(x) => {
            let xv = &val(*x).data;
            accumulate(nodes, grads, *x, |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * kernels::gelu_grad(xv[j]);
                }
            });
        }
        Op::Relu(x) => {
            let xv = &val(*x).data;
            accumulate(nodes, grads, *x, |d| {
                for j in 0..d.len() {
                    if xv[j] > 0.0 {
                        d[j] += g[j];
                    }
                }
            });
        }
        Op::Map { x, deriv } => {
            let xv = &val(*x).data;
            accumulate(nodes, grads, *x, |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * deriv(xv[j]);
                }
            });
        }
        Op::Embedding { table, ids } => {
            let dim = val(*table).shape[1];
            accumulate(nodes, grads, *table, |d| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            });
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
        Op::Mean(x) => {
            accumulate(nodes, grads, *x, |d| {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|v| *v += s);
            })
        }
        Op::CrossEntropy { logits, targets, count } => {
            let lv = val(*logits);
            let v = *lv.shape.last().unwrap();
            let scale = g[0] / *count as f64;
            accumulate(nodes, grads, *logits, |d| {
                for ((row, dr), target) in lv.data.chunks(v).zip(d.chunks_mut(v)).zip(targets) {
                    let Some(t) = *target else { continue };
                    let lse = log_sum_exp(row);
                    for j in 0..v {
                        dr[j] += scale * (row[j] - lse).exp();
                    }
                    dr[t] -= scale;
                }
            });
        }
        Op::Dropout { x, mask } => {
            accumulate(nodes, grads, *x, |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * mask[j];
                }
            });
        }
    }
}
