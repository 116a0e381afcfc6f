//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape: every primitive evaluates eagerly,
//! stores its output, and records the ids of its inputs. Because inputs must
//! already exist when a node is appended, the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is deliberately narrow: the right operand of `add`/`mul` may
//! have a shape equal to a suffix of the left operand's shape, which covers
//! bias addition and per-feature scaling.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Param, ParamStore};
use crate::tensor::{self, gemm, swap_axes, Tensor};

/// Variance stabiliser under the layernorm square root.
pub const LAYERNORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The primitive that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Multiply,
    Scale,
    Reshape,
    Transpose,
    Slice,
    Concat,
    Softmax,
    LayerNorm,
    Gelu,
    Sum,
    Mean,
    CrossEntropy,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
        axis0: usize,
        axis1: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Multiply,
            Op::Scale { .. } => OpKind::Scale,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Reshape { a }
            | Op::Transpose { a, .. }
            | Op::Slice { a, .. }
            | Op::Softmax { a }
            | Op::Gelu { a }
            | Op::Sum { a }
            | Op::Mean { a } => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(String, Var)>,
    overrides: HashMap<String, Var>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
            overrides: HashMap::new(),
            track_params: true,
        }
    }

    /// A graph whose parameter leaves never require gradients, regardless of
    /// their freeze flag. Used when only input gradients are wanted.
    pub fn without_param_grads() -> Self {
        Graph {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node, in tape order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf the caller supplies (data, images, perturbations).
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_with(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Leaf for a named model parameter. Trainable parameters require
    /// gradients unless the graph was built with [`Graph::without_param_grads`].
    /// A name registered with [`Graph::override_param`] resolves to that
    /// variable instead.
    pub fn param(&mut self, name: &str, param: &Param) -> Var {
        if let Some(&v) = self.overrides.get(name) {
            return v;
        }
        let requires_grad = self.track_params && param.trainable();
        let v = self.push_with(param.value.clone(), Op::Leaf, requires_grad);
        self.bindings.push((name.to_string(), v));
        v
    }

    /// Route every later `param(name, ..)` lookup to `var`.
    pub fn override_param(&mut self, name: impl Into<String>, var: Var) {
        self.overrides.insert(name.into(), var);
    }

    /// `(name, var)` for every parameter leaf created so far.
    pub fn param_bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Gradient of the last backward pass, if this node received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient matches value shape")
        })
    }

    /// Add the gradients of bound parameter leaves into `store`'s grad
    /// buffers. Frozen parameters are skipped.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (name, var) in &self.bindings {
            let Some(g) = self.grads[var.0].as_ref() else {
                continue;
            };
            let Some(p) = store.get_mut(name) else {
                continue;
            };
            if p.frozen {
                continue;
            }
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => {
                    p.grad = Some(
                        Tensor::new(p.value.shape().to_vec(), g.clone())
                            .expect("gradient matches parameter shape"),
                    );
                }
            }
        }
    }

    // ---- primitives -------------------------------------------------------

    /// Matrix product over the last two axes. `a` is `[.., m, k]`; `b` is
    /// either `[k, n]` (shared across all leading axes of `a`) or
    /// `[.., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(
                "matmul",
                format!("operands need rank >= 2, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::dim(
                "matmul",
                format!(
                    "contraction axis {} of {sa:?} (extent {k}) != axis {} of {sb:?} (extent {kb})",
                    sa.len() - 1,
                    sb.len() - 2
                ),
            ));
        }
        let b_shared = sb.len() == 2;
        if !b_shared && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(Error::dim(
                "matmul",
                format!("batch axes differ: {sa:?} vs {sb:?}"),
            ));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if b_shared {
                gemm(batch * m, k, n, av, false, bv, false, &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            },
        ))
    }

    fn broadcast_operands(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sb, sa) {
            Ok((a, b))
        } else if is_suffix(sa, sb) {
            Ok((b, a))
        } else {
            Err(Error::dim(
                op,
                format!("shapes {sa:?} and {sb:?} differ on trailing axes"),
            ))
        }
    }

    /// Elementwise sum; the smaller operand broadcasts over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_operands("add", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Elementwise product; the smaller operand broadcasts over leading axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_operands("multiply", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o *= x;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|x| x * factor).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Scale { a, factor })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    /// Exchange two axes.
    pub fn transpose(&mut self, a: Var, axis0: usize, axis1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis0 >= shape.len() || axis1 >= shape.len() {
            return Err(Error::dim(
                "transpose",
                format!("axes ({axis0}, {axis1}) out of range for {shape:?}"),
            ));
        }
        let data = swap_axes(self.value(a).data(), &shape, axis0, axis1);
        let mut out_shape = shape;
        out_shape.swap(axis0, axis1);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Transpose { a, axis0, axis1 }))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{end} on axis {axis} invalid for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            out.extend_from_slice(&src[base..base + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Slice { a, axis, start }))
    }

    /// Join along `axis`; every other axis must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::dim("concat", "no inputs"));
        };
        let ref_shape = self.shape(first).to_vec();
        if axis >= ref_shape.len() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} out of range for {ref_shape:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let agrees = s.len() == ref_shape.len()
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !agrees {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} disagrees with {ref_shape:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = ref_shape[..axis].iter().product();
        let inner: usize = ref_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut out_shape = ref_shape;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&width) = shape.last() else {
            return Err(Error::dim("softmax", "rank-0 input"));
        };
        let out = tensor::softmax_rows(self.value(a).data(), width);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { a }))
    }

    /// Layer normalisation over the last axis followed by the affine map
    /// `gamma ⊙ x̂ + beta`, with `gamma`, `beta` sized to that axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = shape.last().copied().unwrap_or(1);
        if shape.is_empty() || width < 2 {
            return Err(Error::DegenerateAxis {
                op: "layernorm",
                extent: width,
            });
        }
        for (name, v) in [("scale", gamma), ("bias", beta)] {
            if self.shape(v) != [width] {
                return Err(Error::dim(
                    "layernorm",
                    format!(
                        "{name} has shape {:?}, expected [{width}] to match last axis of {shape:?}",
                        self.shape(v)
                    ),
                ));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / width;
        let mut normed = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = inv;
            for j in 0..width {
                let nj = (row[j] - mean) * inv;
                normed[r * width + j] = nj;
                out[r * width + j] = g[j] * nj + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&x| tensor::gelu(x)).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Gelu { a })
    }

    /// Sum of all elements, rank-0 result.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { a })
    }

    /// Mean of all elements, rank-0 result.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let total = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(total), Op::Mean { a })
    }

    /// Mean over the batch of `logsumexp(z) − z_y` for `[B, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim(
                "cross-entropy",
                format!(
                    "logits {shape:?} need shape [batch, classes] with batch = {} labels",
                    labels.len()
                ),
            ));
        }
        let classes = shape[1];
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Range {
                what: "label",
                value: format!("{y} (example {i})"),
                range: format!("0..{classes}"),
            });
        }
        let z = self.value(logits).data();
        let probs = tensor::softmax_rows(z, classes);
        let mut total = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let row = &z[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let loss = total / labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a single-element `loss`. Gradients from earlier
    /// sweeps are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        if !self.wants(v) {
            return;
        }
        let buf = self.grad_buf(v);
        for (b, c) in buf.iter_mut().zip(contribution) {
            *b += c;
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily detach the op so its cached buffers can be read while
        // the gradient table is mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            } => {
                if self.wants(a) {
                    let mut da = vec![0.0; batch * m * k];
                    let bv = self.nodes[b.0].value.data();
                    if b_shared {
                        gemm(batch * m, n, k, g, false, bv, true, &mut da, false);
                    } else {
                        for t in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &bv[t * k * n..(t + 1) * k * n],
                                true,
                                &mut da[t * m * k..(t + 1) * m * k],
                                false,
                            );
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    let av = self.nodes[a.0].value.data();
                    let mut db = vec![0.0; if b_shared { k * n } else { batch * k * n }];
                    if b_shared {
                        gemm(k, batch * m, n, av, true, g, false, &mut db, false);
                    } else {
                        for t in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av[t * m * k..(t + 1) * m * k],
                                true,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &mut db[t * k * n..(t + 1) * k * n],
                                false,
                            );
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(a, g);
                if self.wants(b) {
                    let width = self.nodes[b.0].value.numel();
                    let mut db = vec![0.0; width];
                    for chunk in g.chunks_exact(width) {
                        for (d, x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            &Op::Mul { a, b } => {
                let width = self.nodes[b.0].value.numel();
                if self.wants(a) {
                    let bv = self.nodes[b.0].value.data();
                    let mut da = g.to_vec();
                    for chunk in da.chunks_exact_mut(width) {
                        for (d, x) in chunk.iter_mut().zip(bv) {
                            *d *= x;
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    let av = self.nodes[a.0].value.data();
                    let mut db = vec![0.0; width];
                    for (gc, ac) in g.chunks_exact(width).zip(av.chunks_exact(width)) {
                        for ((d, gx), ax) in db.iter_mut().zip(gc).zip(ac) {
                            *d += gx * ax;
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            &Op::Scale { a, factor } => {
                let da: Vec<f64> = g.iter().map(|x| x * factor).collect();
                self.accumulate(a, &da);
            }
            &Op::Reshape { a } => self.accumulate(a, g),
            &Op::Transpose { a, axis0, axis1 } => {
                if self.wants(a) {
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let da = swap_axes(g, &out_shape, axis0, axis1);
                    self.accumulate(a, &da);
                }
            }
            &Op::Slice { a, axis, start } => {
                if self.wants(a) {
                    let in_shape = self.nodes[a.0].value.shape().to_vec();
                    let len = self.nodes[i].value.shape()[axis];
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let width = len * inner;
                    let buf = self.grad_buf(a);
                    for o in 0..outer {
                        let base = o * in_shape[axis] * inner + start * inner;
                        for (d, x) in buf[base..base + width]
                            .iter_mut()
                            .zip(&g[o * width..(o + 1) * width])
                        {
                            *d += x;
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let total = self.nodes[i].value.shape()[axis];
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.nodes[v.0].value.shape()[axis];
                    if self.wants(v) {
                        let buf = self.grad_buf(v);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (d, x) in buf[o * ext * inner..(o + 1) * ext * inner]
                                .iter_mut()
                                .zip(&g[src..src + ext * inner])
                            {
                                *d += x;
                            }
                        }
                    }
                    offset += ext;
                }
            }
            &Op::Softmax { a } => {
                if self.wants(a) {
                    let y = self.nodes[i].value.data();
                    let width = *self.nodes[i].value.shape().last().expect("rank >= 1");
                    let mut da = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y
                        .chunks_exact(width)
                        .zip(g.chunks_exact(width))
                        .zip(da.chunks_exact_mut(width))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((d, p), q) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = p * (q - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let width = self.nodes[gamma.0].value.numel();
                if self.wants(gamma) {
                    let mut dg = vec![0.0; width];
                    for (gr, nr) in g.chunks_exact(width).zip(normed.chunks_exact(width)) {
                        for ((d, a), b) in dg.iter_mut().zip(gr).zip(nr) {
                            *d += a * b;
                        }
                    }
                    self.accumulate(gamma, &dg);
                }
                if self.wants(beta) {
                    let mut db = vec![0.0; width];
                    for gr in g.chunks_exact(width) {
                        for (d, a) in db.iter_mut().zip(gr) {
                            *d += a;
                        }
                    }
                    self.accumulate(beta, &db);
                }
                if self.wants(x) {
                    let gv = self.nodes[gamma.0].value.data();
                    let mut dx = vec![0.0; g.len()];
                    let inv_w = 1.0 / width as f64;
                    let mut dn = vec![0.0; width];
                    for (r, &inv) in rstd.iter().enumerate() {
                        let gr = &g[r * width..(r + 1) * width];
                        let nr = &normed[r * width..(r + 1) * width];
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for j in 0..width {
                            dn[j] = gr[j] * gv[j];
                            mean_dn += dn[j];
                            mean_dn_n += dn[j] * nr[j];
                        }
                        mean_dn *= inv_w;
                        mean_dn_n *= inv_w;
                        for j in 0..width {
                            dx[r * width + j] = inv * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            &Op::Gelu { a } => {
                if self.wants(a) {
                    let xv = self.nodes[a.0].value.data();
                    let da: Vec<f64> = xv
                        .iter()
                        .zip(g)
                        .map(|(&x, gx)| gx * tensor::gelu_grad(x))
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            &Op::Sum { a } => {
                if self.wants(a) {
                    let scalar = g[0];
                    for d in self.grad_buf(a).iter_mut() {
                        *d += scalar;
                    }
                }
            }
            &Op::Mean { a } => {
                if self.wants(a) {
                    let n = self.nodes[a.0].value.numel() as f64;
                    let scalar = g[0] / n;
                    for d in self.grad_buf(a).iter_mut() {
                        *d += scalar;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                if self.wants(logits) {
                    let classes = probs.len() / labels.len();
                    let coef = g[0] / labels.len() as f64;
                    let mut dz: Vec<f64> = probs.iter().map(|p| p * coef).collect();
                    for (b, &y) in labels.iter().enumerate() {
                        dz[b * classes + y] -= coef;
                    }
                    self.accumulate(logits, &dz);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

/// Central-difference gradient check of the scalar function built by `f`
/// around `x`.
///
/// Each coordinate uses step `h · max(1, |x_i|)` (default `h = 1e-6`).
/// Returns the largest `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: Option<f64>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let h = h.unwrap_or(1e-6);
    if h.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("grad_check step must be > 0, got {h}")));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(point.clone(), false);
        let out = f(&mut g, v)?;
        let val = g.value(out);
        if val.numel() != 1 {
            return Err(Error::Rank(format!(
                "grad_check needs a scalar function, got shape {:?}",
                val.shape()
            )));
        }
        Ok(val.data()[0])
    };

    let mut g = Graph::new();
    let v = g.input(x.clone(), true);
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let xi = x.data()[i];
        let step = h * xi.abs().max(1.0);
        probe.data_mut()[i] = xi + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = xi - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = xi;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NumericInstability(format!(
                "coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
