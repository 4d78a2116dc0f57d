use std::cmp::Ordering;
use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernels::{self, axis_split, broadcast_shape, canonical_sum, reduce_to};
use super::{GradientMap, ParamId, ParamStore, Real, Tensor};
use crate::error::{contract_err, dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction of a token sequence to one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolStrategy {
    Max,
    Mean,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Vec<bool>,
        probs: Vec<T>,
    },
    Pool {
        x: Var,
        mask: Vec<bool>,
        strategy: PoolStrategy,
        argmax: Vec<usize>,
        counts: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Diagonal(Var),
    HardestNegative {
        x: Var,
        index: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat(Var, Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Attention { .. } => "attention",
            Op::Pool { .. } => "pool",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Diagonal(_) => "diagonal",
            Op::HardestNegative { .. } => "hardest_negative",
            Op::Embedding { .. } => "embedding",
            Op::Concat(..) => "concat",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Diagonal(x) => vec![*x],
            Op::Dropout { x, .. }
            | Op::Pool { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::HardestNegative { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Embedding { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records one forward pass for reverse-mode differentiation.
///
/// A tape is built per step and dropped after [`Tape::backward`].
#[derive(Debug)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Tape::gradients`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Parameters that entered this tape, in first-use order.
    pub fn used_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<(usize, ParamId)> = self.param_vars.iter().map(|(p, v)| (v.0, *p)).collect();
        ids.sort_unstable();
        ids.into_iter().map(|(_, p)| p).collect()
    }

    /// Differentiable input (gradients can be queried via [`Tape::gradients`]).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a stored parameter onto the tape. Repeated calls with the same
    /// id return the same node, so every use site feeds one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            needs_grad: true,
        });
        let var = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, var);
        var
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ----------------------------------------------------------------- forward

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    fn broadcast_binary(&self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.val(a), self.val(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            dim_err!("{name}: shapes {:?} and {:?} do not broadcast", ta.shape(), tb.shape())
        })?;
        let len: usize = shape.iter().product();
        let (la, lb) = (ta.len(), tb.len());
        let (da, db) = (ta.data(), tb.data());
        let data = (0..len).map(|o| f(da[o % la], db[o % lb])).collect();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Elementwise sum; the shorter shape broadcasts over leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.val(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.val(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).transpose()?;
        self.push(out, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let nd = self.val(x).ndim();
        if axis >= nd {
            return Err(dim_err!("axis {axis} out of range for shape {:?}", self.val(x).shape()));
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.val(x);
        let data = kernels::softmax(t.shape(), t.data(), axis);
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Softmax(x, axis))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.val(x);
        let data = kernels::log_softmax(t.shape(), t.data(), axis);
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::LogSoftmax(x, axis))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(contract_err!("layer_norm eps must be positive, got {eps}"));
        }
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let d = tx.cols();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(dim_err!(
                "layer_norm: input {:?} needs gamma/beta of shape [{d}], got {:?} and {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            ));
        }
        let eps = T::lit(eps);
        let n = T::from_usize(d).expect("dim fits");
        let rows = tx.rows();
        let mut xhat = vec![T::zero(); tx.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let istd = (var + eps).sqrt().recip();
            inv_std[r] = istd;
            for c in 0..d {
                let h = (row[c] - mean) * istd;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let out = self
            .val(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    /// Inverted dropout. A zero rate returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(contract_err!("dropout rate must be in [0, 1), got {rate}"));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let t = self.val(x);
        let mask: Vec<T> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Dropout { x, mask })
    }

    /// Multi-head scaled dot-product self-attention over `[B, L, D]` inputs
    /// that are already linearly projected into queries, keys and values.
    ///
    /// `mask[b * L + j]` marks valid tokens. Invalid keys receive no weight
    /// and invalid query rows produce zeros. Reductions over keys run in a
    /// canonical key order, so permuting the tokens permutes the output
    /// bit for bit.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &[bool]) -> Result<Var> {
        let (tq, tk, tv) = (self.val(q), self.val(k), self.val(v));
        if tq.ndim() != 3 || tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(dim_err!(
                "attention needs equal [B, L, D] inputs, got {:?}, {:?}, {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            ));
        }
        let (b, l, d) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(dim_err!("model width {d} not divisible by {heads} heads"));
        }
        if mask.len() != b * l {
            return Err(dim_err!("attention mask has {} entries, expected {}", mask.len(), b * l));
        }
        if let Some(s) = (0..b).find(|s| !mask[s * l..(s + 1) * l].iter().any(|&m| m)) {
            return Err(contract_err!("attention: sample {s} has every token masked"));
        }
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![T::zero(); b * l * d];
        let mut probs = vec![T::zero(); b * heads * l * l];

        out.par_chunks_mut(l * d)
            .zip(probs.par_chunks_mut(heads * l * l))
            .enumerate()
            .for_each(|(s, (out_s, probs_s))| {
                let base = s * l * d;
                let valid: Vec<usize> = (0..l).filter(|&j| mask[s * l + j]).collect();
                let mut scores = vec![T::zero(); l];
                for h in 0..heads {
                    let off = h * dh;
                    let key = |j: usize| &kd[base + j * d + off..base + j * d + off + dh];
                    let val = |j: usize| &vd[base + j * d + off..base + j * d + off + dh];
                    let mut order = valid.clone();
                    order.sort_by(|&x, &y| lex_cmp(key(x), key(y)).then_with(|| lex_cmp(val(x), val(y))));
                    for i in 0..l {
                        if !mask[s * l + i] {
                            continue;
                        }
                        let qi = &qd[base + i * d + off..base + i * d + off + dh];
                        let mut max = T::neg_infinity();
                        for &j in &order {
                            let sc = dot(qi, key(j)) * scale;
                            scores[j] = sc;
                            max = max.max(sc);
                        }
                        let mut total = T::zero();
                        for &j in &order {
                            let e = (scores[j] - max).exp();
                            scores[j] = e;
                            total += e;
                        }
                        let p_row = &mut probs_s[(h * l + i) * l..(h * l + i + 1) * l];
                        let o_row = &mut out_s[i * d + off..i * d + off + dh];
                        for &j in &order {
                            let p = scores[j] / total;
                            p_row[j] = p;
                            for (o, &vv) in o_row.iter_mut().zip(val(j)) {
                                *o += p * vv;
                            }
                        }
                    }
                }
            });
        let out = Tensor::from_parts(vec![b, l, d], out);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask: mask.to_vec(),
                probs,
            },
        )
    }

    /// Pools `[B, L, D]` over valid tokens into `[B, D]`. Max pooling breaks
    /// ties by the lowest token index; mean pooling sums in canonical order.
    pub fn pool(&mut self, x: Var, mask: &[bool], strategy: PoolStrategy) -> Result<Var> {
        let t = self.val(x);
        if t.ndim() != 3 {
            return Err(dim_err!("pool needs [B, L, D], got {:?}", t.shape()));
        }
        let (b, l, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if mask.len() != b * l {
            return Err(dim_err!("pool mask has {} entries, expected {}", mask.len(), b * l));
        }
        let mut out = vec![T::zero(); b * d];
        let mut argmax = vec![0usize; b * d];
        let mut counts = vec![0usize; b];
        let data = t.data();
        let mut column = Vec::with_capacity(l);
        for s in 0..b {
            let valid: Vec<usize> = (0..l).filter(|&j| mask[s * l + j]).collect();
            if valid.is_empty() {
                return Err(contract_err!("pool: sample {s} has no unmasked token"));
            }
            counts[s] = valid.len();
            for c in 0..d {
                let at = |j: usize| data[(s * l + j) * d + c];
                match strategy {
                    PoolStrategy::Max => {
                        let mut best = valid[0];
                        for &j in &valid[1..] {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        argmax[s * d + c] = best;
                        out[s * d + c] = at(best);
                    }
                    PoolStrategy::Mean => {
                        column.clear();
                        column.extend(valid.iter().map(|&j| at(j)));
                        let n = T::from_usize(valid.len()).expect("count fits");
                        out[s * d + c] = canonical_sum(&mut column) / n;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![b, d], out);
        self.push(
            out,
            Op::Pool {
                x,
                mask: mask.to_vec(),
                strategy,
                argmax,
                counts,
            },
        )
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let d = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(contract_err!("l2_normalize: row {r} has zero norm"));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        debug_assert_eq!(out.len(), t.rows() * d);
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(out, Op::L2Normalize { x, norms })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.val(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let out = Tensor::scalar(t.sum() / T::from_usize(t.len()).expect("len fits"));
        self.push(out, Op::Mean(x))
    }

    /// Main diagonal of a square matrix.
    pub fn diagonal(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let n = square_extent(t.shape(), "diagonal")?;
        let out = Tensor::from_parts(vec![n], (0..n).map(|i| t.data()[i * n + i]).collect());
        self.push(out, Op::Diagonal(x))
    }

    /// For a square score matrix, the largest off-diagonal entry of each row
    /// (`axis == 1`) or each column (`axis == 0`). Ties go to the lowest index.
    pub fn hardest_negative(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.val(x);
        let n = square_extent(t.shape(), "hardest_negative")?;
        if n < 2 {
            return Err(contract_err!("hardest_negative needs at least 2 rows"));
        }
        if axis > 1 {
            return Err(dim_err!("hardest_negative axis must be 0 or 1, got {axis}"));
        }
        let data = t.data();
        let mut index = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let flat = |j: usize| if axis == 1 { i * n + j } else { j * n + i };
            let mut best: Option<usize> = None;
            for j in (0..n).filter(|&j| j != i) {
                let f = flat(j);
                if best.is_none_or(|b| data[f] > data[b]) {
                    best = Some(f);
                }
            }
            let b = best.expect("n >= 2");
            index.push(b);
            out.push(data[b]);
        }
        let out = Tensor::from_parts(vec![n], out);
        self.push(out, Op::HardestNegative { x, index })
    }

    /// Row lookup: `table[V, D]` indexed by `ids`, reshaped to
    /// `[lead_shape.., D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead_shape: &[usize]) -> Result<Var> {
        let t = self.val(table);
        if t.ndim() != 2 {
            return Err(dim_err!("embedding table must be 2-D, got {:?}", t.shape()));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        if lead_shape.iter().product::<usize>() != ids.len() {
            return Err(dim_err!("{} ids do not fill shape {:?}", ids.len(), lead_shape));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let mut shape = lead_shape.to_vec();
        shape.push(d);
        let out = Tensor::from_parts(shape, out);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Concatenates `[B, La, D]` and `[B, Lb, D]` along the token axis.
    pub fn concat_tokens(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(dim_err!("concat_tokens: shapes {:?} and {:?} are incompatible", sa, sb));
        }
        let (bn, la, lb, d) = (sa[0], sa[1], sb[1], sa[2]);
        let mut out = Vec::with_capacity(bn * (la + lb) * d);
        for s in 0..bn {
            out.extend_from_slice(&ta.data()[s * la * d..(s + 1) * la * d]);
            out.extend_from_slice(&tb.data()[s * lb * d..(s + 1) * lb * d]);
        }
        let out = Tensor::from_parts(vec![bn, la + lb, d], out);
        self.push(out, Op::Concat(a, b))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`, returning per-node gradients.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.val(loss);
        if lv.len() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    /// Reverse-mode sweep collecting gradients for every parameter of
    /// `store`; parameters absent from the graph map to zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<GradientMap<T>> {
        let grads = self.gradients(loss)?;
        let mut map = GradientMap::zeros_like(store);
        for (&id, &var) in &self.param_vars {
            if let Some(g) = grads.wrt(var) {
                map.accumulate(id, g);
            }
        }
        Ok(map)
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let mut send = |var: Var, contribution: Vec<T>| {
            if !self.nodes[var.0].needs_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contribution) {
                        *a += *c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (ga, gb) = kernels::matmul_backward(ta.shape(), ta.data(), tb.shape(), tb.data(), g);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Add(a, b) => {
                send(*a, reduce_to(g, self.val(*a).len()));
                send(*b, reduce_to(g, self.val(*b).len()));
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to(g, self.val(*a).len()));
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                send(*b, reduce_to(&neg, self.val(*b).len()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (la, lb) = (ta.len(), tb.len());
                let ga: Vec<T> = g.iter().enumerate().map(|(o, &v)| v * tb.data()[o % lb]).collect();
                let gb: Vec<T> = g.iter().enumerate().map(|(o, &v)| v * ta.data()[o % la]).collect();
                send(*a, reduce_to(&ga, la));
                send(*b, reduce_to(&gb, lb));
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Transpose(x) => {
                let shape = out.shape();
                let nd = shape.len();
                let (r, c) = (shape[nd - 2], shape[nd - 1]);
                let mut gx = Vec::with_capacity(g.len());
                for block in g.chunks(r * c) {
                    gx.extend(kernels::transpose2(r, c, block));
                }
                send(*x, gx);
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dotp: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dotp);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let total: T = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.val(*gamma).data();
                let d = gam.len();
                let n = T::from_usize(d).expect("dim fits");
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let mut gx = vec![T::zero(); g.len()];
                let mut dxhat = vec![T::zero(); d];
                for (r, &istd) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for c in 0..d {
                        gg[c] += gr[c] * hr[c];
                        gb[c] += gr[c];
                        dxhat[c] = gr[c] * gam[c];
                        sum_dh += dxhat[c];
                        sum_dh_h += dxhat[c] * hr[c];
                    }
                    for c in 0..d {
                        gx[r * d + c] = istd / n * (n * dxhat[c] - sum_dh - hr[c] * sum_dh_h);
                    }
                }
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gb);
            }
            Op::Gelu(x) => {
                let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let xs = self.val(*x).data();
                let gx = xs
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let dy = half * (T::one() + th)
                            + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v);
                        gv * dy
                    })
                    .collect();
                send(*x, gx);
            }
            Op::Relu(x) => {
                let xs = self.val(*x).data();
                let gx = xs
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                send(*x, gx);
            }
            Op::Dropout { x, mask } => send(*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect()),
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *heads, mask, probs, g);
                send(*q, gq);
                send(*k, gk);
                send(*v, gv);
            }
            Op::Pool {
                x,
                mask,
                strategy,
                argmax,
                counts,
            } => {
                let shape = self.val(*x).shape();
                let (b, l, d) = (shape[0], shape[1], shape[2]);
                let mut gx = vec![T::zero(); b * l * d];
                for s in 0..b {
                    for c in 0..d {
                        let gv = g[s * d + c];
                        match strategy {
                            PoolStrategy::Max => gx[(s * l + argmax[s * d + c]) * d + c] += gv,
                            PoolStrategy::Mean => {
                                let share = gv / T::from_usize(counts[s]).expect("count fits");
                                for j in (0..l).filter(|&j| mask[s * l + j]) {
                                    gx[(s * l + j) * d + c] += share;
                                }
                            }
                        }
                    }
                }
                send(*x, gx);
            }
            Op::L2Normalize { x, norms } => {
                let y = out.data();
                let d = out.cols();
                let mut gx = vec![T::zero(); g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let proj: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..d {
                        gx[r * d + c] = (gr[c] - yr[c] * proj) / norm;
                    }
                }
                send(*x, gx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.val(*x).len()]),
            Op::Mean(x) => {
                let n = self.val(*x).len();
                send(*x, vec![g[0] / T::from_usize(n).expect("len fits"); n]);
            }
            Op::Diagonal(x) => {
                let n = g.len();
                let mut gx = vec![T::zero(); n * n];
                for i in 0..n {
                    gx[i * n + i] = g[i];
                }
                send(*x, gx);
            }
            Op::HardestNegative { x, index } => {
                let mut gx = vec![T::zero(); self.val(*x).len()];
                for (i, &f) in index.iter().enumerate() {
                    gx[f] += g[i];
                }
                send(*x, gx);
            }
            Op::Embedding { table, ids } => {
                let t = self.val(*table);
                let d = t.cols();
                let mut gt = vec![T::zero(); t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += g[r * d + c];
                    }
                }
                send(*table, gt);
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (bn, la, lb, d) = (sa[0], sa[1], sb[1], sa[2]);
                let mut ga = Vec::with_capacity(bn * la * d);
                let mut gb = Vec::with_capacity(bn * lb * d);
                for s in 0..bn {
                    let base = s * (la + lb) * d;
                    ga.extend_from_slice(&g[base..base + la * d]);
                    gb.extend_from_slice(&g[base + la * d..base + (la + lb) * d]);
                }
                send(*a, ga);
                send(*b, gb);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &[bool],
        probs: &[T],
        g: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let shape = self.val(q).shape();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.val(q).data(), self.val(k).data(), self.val(v).data());
        let mut gq = vec![T::zero(); b * l * d];
        let mut gk = vec![T::zero(); b * l * d];
        let mut gv = vec![T::zero(); b * l * d];
        gq.par_chunks_mut(l * d)
            .zip(gk.par_chunks_mut(l * d))
            .zip(gv.par_chunks_mut(l * d))
            .enumerate()
            .for_each(|(s, ((gq_s, gk_s), gv_s))| {
                let base = s * l * d;
                let valid: Vec<usize> = (0..l).filter(|&j| mask[s * l + j]).collect();
                let mut dp = vec![T::zero(); l];
                for h in 0..heads {
                    let off = h * dh;
                    for i in valid.iter().copied() {
                        let p_row = &probs[((s * heads + h) * l + i) * l..((s * heads + h) * l + i + 1) * l];
                        let go = &g[base + i * d + off..base + i * d + off + dh];
                        let mut weighted = T::zero();
                        for &j in &valid {
                            let vj = &vd[base + j * d + off..base + j * d + off + dh];
                            dp[j] = dot(go, vj);
                            weighted += p_row[j] * dp[j];
                            for (gvj, &o) in gv_s[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                                *gvj += p_row[j] * o;
                            }
                        }
                        let qi = &qd[base + i * d + off..base + i * d + off + dh];
                        for &j in &valid {
                            let ds = p_row[j] * (dp[j] - weighted) * scale;
                            let kj = &kd[base + j * d + off..base + j * d + off + dh];
                            for (gqi, &kv) in gq_s[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                                *gqi += ds * kv;
                            }
                            for (gkj, &qv) in gk_s[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                                *gkj += ds * qv;
                            }
                        }
                    }
                }
            });
        (gq, gk, gv)
    }
}

fn square_extent(shape: &[usize], op: &str) -> Result<usize> {
    match shape {
        [r, c] if r == c => Ok(*r),
        _ => Err(dim_err!("{op} needs a square matrix, got {:?}", shape)),
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn lex_cmp<T: Real>(a: &[T], b: &[T]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[0.; 4]));
        assert!(matches!(tape.softmax(x, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1., 3.]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(t(&[1, 4], &[2.5; 4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.1));
        let s = tape.sum(x).unwrap();
        let g = tape.gradients(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &Tensor::ones(&[2, 3, 4]));
    }

    #[test]
    fn backward_of_square_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(t(&[3], &[1., 2., 3.]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.gradients(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(t(&[2], &[1., 2.]));
        assert!(matches!(tape.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3, 2], &[1., 5., 3., 2., 1e9, 1e9]));
        let mask = [true, true, false];
        let mx = tape.pool(x, &mask, PoolStrategy::Max).unwrap();
        let mn = tape.pool(x, &mask, PoolStrategy::Mean).unwrap();
        assert_eq!(tape.value(mx).data(), &[3., 5.]);
        assert_eq!(tape.value(mn).data(), &[2., 3.5]);
        assert!(tape.pool(x, &[false, false, false], PoolStrategy::Max).is_err());
    }

    #[test]
    fn hardest_negative_breaks_ties_low() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(t(&[3, 3], &[1., 0.5, 0.5, 0.2, 1., 0.1, 0.3, 0.3, 1.]));
        let rows = tape.hardest_negative(x, 1).unwrap();
        assert_eq!(tape.value(rows).data(), &[0.5, 0.2, 0.3]);
        let cols = tape.hardest_negative(x, 0).unwrap();
        assert_eq!(tape.value(cols).data(), &[0.3, 0.5, 0.5]);
        let s = tape.sum(rows).unwrap();
        let g = tape.gradients(s).unwrap();
        // row 0 picks column 1 (first of the tied pair)
        assert_eq!(g.wrt(x).unwrap().data()[1], 1.0);
        assert_eq!(g.wrt(x).unwrap().data()[2], 0.0);
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut tape = Tape::<f64>::new();
        let table = tape.variable(Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.embedding(table, &[1, 4], &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref op } if op == "scale"));
    }
}
