//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is created per forward pass. Every op appends a node holding its
//! output value and whatever it needs for the backward pass; [`Tape::backward`]
//! consumes the tape and returns [`Gradients`]. Parameters are borrowed from a
//! [`ParamStore`] rather than copied.

use std::collections::HashMap;
use std::sync::OnceLock;

use rand::Rng;

use crate::error::{Error, Result};

use super::kernels::{matmul, matmul_at, matmul_bt};
use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Set `NUMERIC_CHECK_FINITE=1` to assert that every op output is finite.
fn check_finite_enabled() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        std::env::var("NUMERIC_CHECK_FINITE")
            .map(|v| v == "1")
            .unwrap_or(false)
    })
}

enum Value {
    Owned(Vec<f32>),
    Param(ParamId),
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Param(ParamId),
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: f32,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        dim: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    MulConst {
        x: Var,
        factors: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    Select {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        index: usize,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    WhereRows {
        cond: Vec<bool>,
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f32>,
        probs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// Tape without a parameter store; inputs are added with [`Tape::leaf`].
    pub fn new() -> Self {
        Tape {
            params: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            ..Tape::new()
        }
    }

    /// Tape that records no gradient information (inference).
    pub fn inference(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .params
                .expect("param node on a tape without params")
                .get(*id)
                .data(),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        if check_finite_enabled() {
            assert!(
                data.iter().all(|v| v.is_finite()),
                "non-finite output from {}",
                op_name(&op)
            );
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a constant or differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = self.grad_enabled && t.requires_grad;
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Owned(t.into_data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    /// References a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let store = self.params.expect("tape has no parameter store");
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// `a + b` where `b`'s shape equals a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::Shape {
                op: "add",
                left: sa,
                right: sb,
            });
        }
        let bv = self.value(b);
        let inner = bv.len();
        let data: Vec<f32> = self
            .value(a)
            .chunks(inner)
            .flat_map(|c| c.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(sa, data, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                left: sa,
                right: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(sa, data, Op::Mul { a, b }, &[a, b]))
    }

    /// `x · scale + shift`
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let data = self.value(x).iter().map(|v| v * scale + shift).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f32) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// `1 − x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    /// `y = x·W + b` over the last axis of `x`, broadcasting leading dimensions.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let inp = *sx.last().expect("non-empty shape");
        if sw.len() != 2 || sw[0] != inp {
            return Err(Error::Shape {
                op: "linear",
                left: sx,
                right: sw,
            });
        }
        let out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::Shape {
                    op: "linear bias",
                    left: sw,
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let rows = numel(&sx) / inp;
        let mut data = matmul(self.value(x), self.value(w), rows, inp, out);
        if let Some(b) = b {
            let bv = self.value(b);
            for row in data.chunks_mut(out) {
                for (y, bb) in row.iter_mut().zip(bv) {
                    *y += bb;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            shape,
            data,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
            &inputs,
        ))
    }

    /// Batched product over the last two axes: `a[..., m, k] · b[..., k, n]`,
    /// or `a · bᵀ` with `b[..., n, k]` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "batch_matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(err());
        }
        let batch = numel(&sa[..r - 2]);
        let av = self.value(a);
        let bv = self.value(b);
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let c = if trans_b {
                matmul_bt(ai, bi, m, k, n)
            } else {
                matmul(ai, bi, m, k, n)
            };
            data.extend(c);
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            shape,
            data,
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::validation(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let dim = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut data = vec![0.0f32; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * dim + j) * inner + i;
                let max = (0..dim).map(|j| xv[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f64> = (0..dim)
                    .map(|j| ((xv[idx(j)] - max) as f64).exp())
                    .collect();
                let sum: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    data[idx(j)] = (e / sum) as f32;
                }
            }
        }
        Ok(self.push(
            shape,
            data,
            Op::Softmax {
                x,
                outer,
                dim,
                inner,
            },
            &[x],
        ))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                left: shape,
                right: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = xv.len() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mu = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps as f64).sqrt();
            for ((&v, &gg), &bb) in row.iter().zip(g).zip(b) {
                data.push(((v as f64 - mu) * r * gg as f64 + bb as f64) as f32);
            }
            mean.push(mu);
            rstd.push(r);
        }
        Ok(self.push(
            shape,
            data,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .iter()
            .map(|&v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Sigmoid { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| (v as f64).tanh() as f32).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Tanh { x }, &[x])
    }

    /// Inverted dropout. Identity when `!training` or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f32,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::validation(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let factors: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        let data = self
            .value(x)
            .iter()
            .zip(&factors)
            .map(|(v, f)| v * f)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, Op::MulConst { x, factors }, &[x]))
    }

    /// Gathers rows of `table[V, D]`; the output shape is `lead ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || numel(lead) != ids.len() {
            return Err(Error::Shape {
                op: "embedding",
                left: st,
                right: lead.to_vec(),
            });
        }
        let (v, d) = (st[0], st[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::validation(format!(
                "embedding id {bad} out of range for table of {v} rows"
            )));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        Ok(self.push(
            shape,
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }, &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::validation(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(x), &shape, perm);
        Ok(self.push(
            out_shape,
            data,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Shape {
                    op: "concat",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows = numel(lead);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            inputs,
        ))
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::validation(format!(
                "select index {index} on axis {axis} out of range for {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * len + index) * inner;
            data.extend_from_slice(&xv[start..start + inner]);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push(
            out_shape,
            data,
            Op::Select {
                x,
                outer,
                len,
                inner,
                index,
            },
            &[x],
        ))
    }

    /// Replaces positions where `mask` is true with `value`; no gradient flows
    /// through filled positions.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f32) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "masked_fill",
                left: self.shape(x).to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = self
            .value(x)
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            data,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// Row-wise select: row `r` of the output is row `r` of `a` if `cond[r]`,
    /// else row `r` of `b`. Rows are slices along axis 0.
    pub fn where_rows(&mut self, cond: &[bool], a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) || sa[0] != cond.len() {
            return Err(Error::Shape {
                op: "where_rows",
                left: sa,
                right: self.shape(b).to_vec(),
            });
        }
        let w = numel(&sa[1..]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(av.len());
        for (r, &c) in cond.iter().enumerate() {
            let src = if c { av } else { bv };
            data.extend_from_slice(&src[r * w..(r + 1) * w]);
        }
        Ok(self.push(
            sa,
            data,
            Op::WhereRows {
                cond: cond.to_vec(),
                a,
                b,
            },
            &[a, b],
        ))
    }

    /// Mean negative log-likelihood over the batch.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let weights = vec![1.0; targets.len()];
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// `Σ_b w_b · −log softmax(logits_b)[t_b] / Σ_b w_b`. Rows with zero weight
    /// are ignored.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f32],
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || weights.len() != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: shape,
                right: vec![targets.len()],
            });
        }
        let c = shape[1];
        if let Some((i, t)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(Error::validation(format!(
                "target {t} at row {i} out of range for {c} classes"
            )));
        }
        let total_w: f64 = weights.iter().map(|&w| w as f64).sum();
        if total_w <= 0.0 {
            return Err(Error::validation("cross_entropy needs positive total weight"));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = 0.0f64;
        for ((row, &t), &w) in lv.chunks(c).zip(targets).zip(weights) {
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let lse = max + sum.ln();
            loss += w as f64 * (lse - row[t] as f64);
            probs.extend(row.iter().map(|&v| (v as f64 - lse).exp()));
        }
        let value = (loss / total_w) as f32;
        Ok(self.push(
            vec![1],
            vec![value],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.iter().map(|&w| (w as f64 / total_w) as f32).collect(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        self.push(vec![1], vec![s as f32], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.iter().map(|&v| v as f64).sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s as f32], Op::Mean { x }, &[x])
    }

    /// Reverse pass from a scalar. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let param_of = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect();
        let requires: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let grads = grads
            .into_iter()
            .zip(requires)
            .map(|(g, r)| if r { g } else { None })
            .collect();
        Ok(Gradients { grads, param_of })
    }

    fn backprop_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Vec<f32>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(&delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                if self.nodes[b.0].requires_grad {
                    let inner = self.value(*b).len();
                    let mut db = vec![0.0f64; inner];
                    for chunk in g.chunks(inner) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v as f64;
                        }
                    }
                    acc(*b, db.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Affine { x, scale } => acc(*x, g.iter().map(|v| v * scale).collect()),
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                if self.nodes[x.0].requires_grad {
                    acc(*x, matmul_bt(g, self.value(*w), *rows, *out, *inp));
                }
                if self.nodes[w.0].requires_grad {
                    acc(*w, matmul_at(self.value(*x), g, *rows, *inp, *out));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0f64; *out];
                    for row in g.chunks(*out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v as f64;
                        }
                    }
                    acc(*b, db.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Vec::with_capacity(batch * m * k);
                let mut db = Vec::with_capacity(batch * k * n);
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        da.extend(matmul(gi, bi, m, n, k));
                        db.extend(matmul_at(gi, ai, m, n, k));
                    } else {
                        da.extend(matmul_bt(gi, bi, m, n, k));
                        db.extend(matmul_at(ai, gi, m, k, n));
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Softmax {
                x,
                outer,
                dim,
                inner,
            } => {
                let y = self.value(Var(idx));
                let mut dx = vec![0.0f32; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let ix = |j: usize| (o * dim + j) * inner + i;
                        let dotp: f64 = (0..*dim).map(|j| g[ix(j)] as f64 * y[ix(j)] as f64).sum();
                        for j in 0..*dim {
                            dx[ix(j)] = (y[ix(j)] as f64 * (g[ix(j)] as f64 - dotp)) as f32;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = gv.len();
                let mut dx = Vec::with_capacity(xv.len());
                let mut dg = vec![0.0f64; d];
                let mut dbias = vec![0.0f64; d];
                for (r, (row, grow)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                    let xhat: Vec<f64> = row.iter().map(|&v| (v as f64 - mean[r]) * rstd[r]).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gv).map(|(&a, &b)| a as f64 * b as f64).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx.push((rstd[r] * (dxhat[j] - m1 - xhat[j] * m2)) as f32);
                        dg[j] += grow[j] as f64 * xhat[j];
                        dbias[j] += grow[j] as f64;
                    }
                }
                acc(*x, dx);
                acc(*gain, dg.into_iter().map(|v| v as f32).collect());
                acc(*bias, dbias.into_iter().map(|v| v as f32).collect());
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                acc(*x, g.iter().zip(xv).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect());
            }
            Op::Sigmoid { x } => {
                let y = self.value(Var(idx));
                acc(*x, g.iter().zip(y).map(|(&g, &y)| g * y * (1.0 - y)).collect());
            }
            Op::Tanh { x } => {
                let y = self.value(Var(idx));
                acc(*x, g.iter().zip(y).map(|(&g, &y)| g * (1.0 - y * y)).collect());
            }
            Op::MulConst { x, factors } => {
                acc(*x, g.iter().zip(factors).map(|(g, f)| g * f).collect());
            }
            Op::Embedding { table, ids } => {
                let st = self.shape(*table);
                let d = st[1];
                let mut dt = vec![0.0f32; st[0] * d];
                for (row, &i) in g.chunks(d).zip(ids) {
                    for (t, &v) in dt[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *t += v;
                    }
                }
                acc(*table, dt);
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*x, permute_data(g, &node.shape, &inv));
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    acc(v, d);
                    offset += w;
                }
            }
            Op::Select {
                x,
                outer,
                len,
                inner,
                index,
            } => {
                let mut dx = vec![0.0f32; outer * len * inner];
                for o in 0..*outer {
                    let start = (o * len + index) * inner;
                    dx[start..start + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                acc(*x, dx);
            }
            Op::MaskedFill { x, mask } => {
                acc(*x, g.iter().zip(mask).map(|(&g, &m)| if m { 0.0 } else { g }).collect());
            }
            Op::WhereRows { cond, a, b } => {
                let w = g.len() / cond.len();
                let mut da = vec![0.0f32; g.len()];
                let mut db = vec![0.0f32; g.len()];
                for (r, &c) in cond.iter().enumerate() {
                    let dst = if c { &mut da } else { &mut db };
                    dst[r * w..(r + 1) * w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] as f64;
                let mut dl = Vec::with_capacity(probs.len());
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl.push((scale * w as f64 * (probs[r * c + j] - onehot)) as f32);
                    }
                }
                acc(*logits, dl);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0] / n as f32; n]);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Affine { .. } => "affine",
        Op::Linear { .. } => "linear",
        Op::BatchMatMul { .. } => "batch_matmul",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Relu { .. } => "relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Tanh { .. } => "tanh",
        Op::MulConst { .. } => "dropout",
        Op::Embedding { .. } => "embedding",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::Concat { .. } => "concat",
        Op::Select { .. } => "select",
        Op::MaskedFill { .. } => "masked_fill",
        Op::WhereRows { .. } => "where_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
    }
}

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    param_of: Vec<Option<ParamId>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required grad and was
    /// reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.param_of
            .iter()
            .zip(&self.grads)
            .filter_map(|(p, g)| Some(((*p)?, g.as_deref()?)))
    }

    /// Adds parameter gradients into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.params() {
            store.get_mut(id).accumulate_grad(g)?;
        }
        Ok(())
    }
}
