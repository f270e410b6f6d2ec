//! Wengert tape: every primitive application is recorded with the values
//! its backward rule needs, then replayed in reverse by [`Tape::backward`].

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, MatRef};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// The closed set of differentiable operations.
///
/// There is no implicit broadcasting. `Add` and `ElementwiseMul` accept
/// exactly three shape pairings: identical shapes, a 1-D right operand
/// matching the last axis of the left (row bias), or a right operand with a
/// single element.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// (m×k)·(k×n), either side optionally transposed.
    Matmul {
        transpose_lhs: bool,
        transpose_rhs: bool,
    },
    Add,
    ElementwiseMul,
    ConcatLastAxis,
    Relu,
    Softplus,
    Sigmoid,
    /// `valid[i] == false` forces output element `i` to exactly zero.
    SoftmaxLastAxisMasked { valid: Option<Vec<bool>> },
    /// Inputs: x, gamma, beta.
    LayerNormLastAxis,
    /// Input: table (V×d). Output: (ids.len()×d).
    EmbeddingLookup { ids: Vec<usize> },
    /// Keeps the reduced axis with extent 1.
    MeanOverAxis { axis: usize },
    ScalarAffine { scale: f64, shift: f64 },
    /// Mean of the clamped binary cross-entropy over entries with `mask`.
    BceLossMasked { targets: Vec<f64>, mask: Vec<bool> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul { .. } => "matmul",
            Primitive::Add => "add",
            Primitive::ElementwiseMul => "elementwise_mul",
            Primitive::ConcatLastAxis => "concat_last_axis",
            Primitive::Relu => "relu",
            Primitive::Softplus => "softplus",
            Primitive::Sigmoid => "sigmoid",
            Primitive::SoftmaxLastAxisMasked { .. } => "softmax_last_axis_masked",
            Primitive::LayerNormLastAxis => "layer_norm_last_axis",
            Primitive::EmbeddingLookup { .. } => "embedding_lookup",
            Primitive::MeanOverAxis { .. } => "mean_over_axis",
            Primitive::ScalarAffine { .. } => "scalar_affine",
            Primitive::BceLossMasked { .. } => "bce_loss_masked",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Matmul { .. } | Primitive::Add | Primitive::ElementwiseMul => Some(2),
            Primitive::LayerNormLastAxis => Some(3),
            Primitive::ConcatLastAxis => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Add {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Mul {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Concat {
        parts: Vec<usize>,
    },
    Relu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Softmax {
        x: usize,
        valid: Option<Vec<bool>>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Mean {
        x: usize,
        axis: usize,
    },
    Affine {
        x: usize,
        scale: f64,
    },
    Bce {
        p: usize,
        targets: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
}

struct Node<'a> {
    op: Op,
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    requires_grad: bool,
    finite: bool,
    param: Option<ParamId>,
}

/// Recording of one forward computation.
///
/// Leaves may borrow their data (parameters are never copied onto the
/// tape). A tape and its values belong to one thread of work.
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        value: Cow<'a, [f64]>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        let finite = value.iter().all(|v| v.is_finite());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            finite,
            param,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// A constant (never receives a gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("constant", &shape, &[data.len()]));
        }
        Ok(self.push(Op::Leaf, shape, Cow::Owned(data), false, None))
    }

    /// Borrow a tensor as a leaf; it is differentiable iff the tensor
    /// requires grad.
    pub fn leaf(&mut self, tensor: &'a Tensor) -> Var {
        self.push(
            Op::Leaf,
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.data()),
            tensor.requires_grad(),
            None,
        )
    }

    /// Leaf for a stored parameter. Repeated calls return the same handle so
    /// gradients from every use land on one node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(
            Op::Leaf,
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            t.requires_grad(),
            Some(id),
        );
        self.params.insert(id, v);
        v
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignTensor);
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Record `kind` applied to `inputs`.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let name = kind.name();
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(Error::invalid(
                    name,
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        } else if inputs.is_empty() {
            return Err(Error::invalid(name, "no inputs"));
        }
        let mut ids = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let i = self.check(v)?;
            if !self.nodes[i].finite {
                return Err(Error::NonFiniteInput { op: name });
            }
            ids.push(i);
        }
        let requires_grad = ids.iter().any(|&i| self.nodes[i].requires_grad);
        let (op, shape, value) = match kind {
            Primitive::Matmul {
                transpose_lhs,
                transpose_rhs,
            } => self.fwd_matmul(ids[0], ids[1], transpose_lhs, transpose_rhs)?,
            Primitive::Add => self.fwd_binary(name, ids[0], ids[1], false)?,
            Primitive::ElementwiseMul => self.fwd_binary(name, ids[0], ids[1], true)?,
            Primitive::ConcatLastAxis => self.fwd_concat(ids)?,
            Primitive::Relu => {
                let x = &self.nodes[ids[0]];
                let out = x.value.iter().map(|&v| v.max(0.0)).collect();
                (Op::Relu(ids[0]), x.shape.clone(), out)
            }
            Primitive::Softplus => {
                let x = &self.nodes[ids[0]];
                let out = x.value.iter().map(|&v| kernels::softplus(v)).collect();
                (Op::Softplus(ids[0]), x.shape.clone(), out)
            }
            Primitive::Sigmoid => {
                let x = &self.nodes[ids[0]];
                let out = x.value.iter().map(|&v| kernels::sigmoid(v)).collect();
                (Op::Sigmoid(ids[0]), x.shape.clone(), out)
            }
            Primitive::SoftmaxLastAxisMasked { valid } => self.fwd_softmax(ids[0], valid)?,
            Primitive::LayerNormLastAxis => self.fwd_layer_norm(ids[0], ids[1], ids[2])?,
            Primitive::EmbeddingLookup { ids: rows } => self.fwd_embedding(ids[0], rows)?,
            Primitive::MeanOverAxis { axis } => self.fwd_mean(ids[0], axis)?,
            Primitive::ScalarAffine { scale, shift } => {
                let x = &self.nodes[ids[0]];
                let out = x.value.iter().map(|&v| scale * v + shift).collect();
                (
                    Op::Affine {
                        x: ids[0],
                        scale,
                    },
                    x.shape.clone(),
                    out,
                )
            }
            Primitive::BceLossMasked { targets, mask } => self.fwd_bce(ids[0], targets, mask)?,
        };
        Ok(self.push(op, shape, Cow::Owned(value), requires_grad, None))
    }

    fn dims2(&self, op: &'static str, i: usize, other: usize) -> Result<(usize, usize)> {
        match self.nodes[i].shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, s, &self.nodes[other].shape)),
        }
    }

    fn fwd_matmul(
        &self,
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    ) -> Result<(Op, Vec<usize>, Vec<f64>)> {
        let (ar, ac) = self.dims2("matmul", a, b)?;
        let (br, bc) = self.dims2("matmul", b, a)?;
        let am = MatRef::new(&self.nodes[a].value, ar, ac, ta);
        let bm = MatRef::new(&self.nodes[b].value, br, bc, tb);
        let (m, k) = am.dims();
        let (k2, n) = bm.dims();
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                &self.nodes[a].shape,
                &self.nodes[b].shape,
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(am, bm, &mut out);
        Ok((Op::Matmul { a, b, ta, tb }, vec![m, n], out))
    }

    fn broadcast_rule(&self, op: &'static str, a: usize, b: usize) -> Result<Broadcast> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Ok(Broadcast::Row)
        } else if self.nodes[b].value.len() == 1 {
            Ok(Broadcast::Scalar)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn fwd_binary(
        &self,
        name: &'static str,
        a: usize,
        b: usize,
        mul: bool,
    ) -> Result<(Op, Vec<usize>, Vec<f64>)> {
        let bc = self.broadcast_rule(name, a, b)?;
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let f = |x: f64, y: f64| if mul { x * y } else { x + y };
        let out: Vec<f64> = match bc {
            Broadcast::Same => va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Row => {
                let n = vb.len();
                va.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, vb[i % n]))
                    .collect()
            }
            Broadcast::Scalar => va.iter().map(|&x| f(x, vb[0])).collect(),
        };
        let op = if mul {
            Op::Mul { a, b, bc }
        } else {
            Op::Add { a, b, bc }
        };
        Ok((op, self.nodes[a].shape.clone(), out))
    }

    fn fwd_concat(&self, parts: Vec<usize>) -> Result<(Op, Vec<usize>, Vec<f64>)> {
        let first = &self.nodes[parts[0]].shape;
        if first.is_empty() {
            return Err(Error::invalid("concat_last_axis", "rank-0 input"));
        }
        let lead = &first[..first.len() - 1];
        let mut width = 0;
        for &p in &parts {
            let s = &self.nodes[p].shape;
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last_axis", first, s));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in &parts {
                let w = *self.nodes[p].shape.last().unwrap();
                out.extend_from_slice(&self.nodes[p].value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        Ok((Op::Concat { parts }, shape, out))
    }

    fn fwd_softmax(
        &self,
        x: usize,
        valid: Option<Vec<bool>>,
    ) -> Result<(Op, Vec<usize>, Vec<f64>)> {
        let node = &self.nodes[x];
        let n = match node.shape.last() {
            Some(&n) if n > 0 => n,
            _ => return Err(Error::invalid("softmax_last_axis_masked", "empty last axis")),
        };
        if let Some(v) = &valid {
            if v.len() != node.value.len() {
                return Err(Error::shape(
                    "softmax_last_axis_masked",
                    &node.shape,
                    &[v.len()],
                ));
            }
        }
        let mut out = vec![0.0; node.value.len()];
        for (r, (xs, ys)) in node.value.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let ok = |j: usize| valid.as_ref().is_none_or(|v| v[r * n + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &xj) in xs.iter().enumerate() {
                if ok(j) && xj > max {
                    max = xj;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask {
                    op: "softmax_last_axis_masked",
                    row: r,
                });
            }
            let mut sum = 0.0;
            for (j, (&xj, yj)) in xs.iter().zip(ys.iter_mut()).enumerate() {
                if ok(j) {
                    *yj = (xj - max).exp();
                    sum += *yj;
                }
            }
            ys.iter_mut().for_each(|y| *y /= sum);
        }
        Ok((Op::Softmax { x, valid }, node.shape.clone(), out))
    }

    fn fwd_layer_norm(
        &self,
        x: usize,
        gamma: usize,
        beta: usize,
    ) -> Result<(Op, Vec<usize>, Vec<f64>)> {
        let node = &self.nodes[x];
        let n = *node.shape.last().unwrap_or(&0);
        for &p in &[gamma, beta] {
            if self.nodes[p].shape != [n] {
                return Err(Error::shape(
                    "layer_norm_last_axis",
                    &node.shape,
                    &self.nodes[p].shape,
                ));
            }
        }
        if n == 0 {
            return Err(Error::invalid("layer_norm_last_axis", "empty last axis"));
        }
        let (g, b) = (&self.nodes[gamma].value, &self.nodes[beta].value);
        let rows = node.value.len() / n;
        let mut xhat = vec![0.0; node.value.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; node.value.len()];
        for r in 0..rows {
            let xs = &node.value[r * n..(r + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (xs[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        Ok((
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            node.shape.clone(),
            out,
        ))
    }

    fn fwd_embedding(&self, table: usize, ids: Vec<usize>) -> Result<(Op, Vec<usize>, Vec<f64>)> {
        let (v, d) = match self.nodes[table].shape.as_slice() {
            &[v, d] => (v, d),
            s => return Err(Error::shape("embedding_lookup", s, &[ids.len()])),
        };
        if ids.is_empty() {
            return Err(Error::invalid("embedding_lookup", "no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in &ids {
            if id >= v {
                return Err(Error::invalid(
                    "embedding_lookup",
                    format!("id {id} out of range for vocabulary of {v}"),
                ));
            }
            out.extend_from_slice(&self.nodes[table].value[id * d..(id + 1) * d]);
        }
        let shape = vec![ids.len(), d];
        Ok((Op::Embedding { table, ids }, shape, out))
    }

    fn fwd_mean(&self, x: usize, axis: usize) -> Result<(Op, Vec<usize>, Vec<f64>)> {
        let shape = &self.nodes[x].shape;
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::invalid(
                "mean_over_axis",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let xs = &self.nodes[x].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xs[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        Ok((Op::Mean { x, axis }, out_shape, out))
    }

    fn fwd_bce(
        &self,
        p: usize,
        targets: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<(Op, Vec<usize>, Vec<f64>)> {
        let ps = &self.nodes[p].value;
        if targets.len() != ps.len() || mask.len() != ps.len() {
            return Err(Error::shape(
                "bce_loss_masked",
                &self.nodes[p].shape,
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut loss = 0.0;
        for i in 0..ps.len() {
            if mask[i] {
                let q = ps[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                let y = targets[i];
                loss -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
            }
        }
        if count > 0 {
            loss /= count as f64;
        }
        Ok((
            Op::Bce {
                p,
                targets,
                mask,
                count,
            },
            vec![1],
            vec![loss],
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[root].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);
        for idx in (0..=root).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backward_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |i: usize| -> &[f64] { &self.nodes[i].value };
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul { a, b, ta, tb } => {
                let (ar, ac) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let (br, bc) = (self.nodes[b].shape[0], self.nodes[b].shape[1]);
                let (m, n) = (node.shape[0], node.shape[1]);
                let dc = MatRef::new(dy, m, n, false);
                if self.needs(a) {
                    let g = slot(grads, a, ar * ac);
                    if !ta {
                        // dA = dC · op(B)^T
                        kernels::gemm_acc(dc, MatRef::new(val(b), br, bc, !tb), g);
                    } else {
                        // dA = op(B) · dC^T
                        kernels::gemm_acc(
                            MatRef::new(val(b), br, bc, tb),
                            MatRef::new(dy, m, n, true),
                            g,
                        );
                    }
                }
                if self.needs(b) {
                    let g = slot(grads, b, br * bc);
                    if !tb {
                        // dB = op(A)^T · dC
                        kernels::gemm_acc(MatRef::new(val(a), ar, ac, !ta), dc, g);
                    } else {
                        // dB = dC^T · op(A)
                        kernels::gemm_acc(
                            MatRef::new(dy, m, n, true),
                            MatRef::new(val(a), ar, ac, ta),
                            g,
                        );
                    }
                }
            }
            &Op::Add { a, b, bc } => {
                if self.needs(a) {
                    add_into(slot(grads, a, dy.len()), dy);
                }
                if self.needs(b) {
                    let nb = self.nodes[b].value.len();
                    let g = slot(grads, b, nb);
                    reduce_broadcast(bc, dy, |i| (i, 1.0), g);
                }
            }
            &Op::Mul { a, b, bc } => {
                let (va, vb) = (val(a), val(b));
                let nb = vb.len();
                let pick = |i: usize| match bc {
                    Broadcast::Same => i,
                    Broadcast::Row => i % nb,
                    Broadcast::Scalar => 0,
                };
                if self.needs(a) {
                    let g = slot(grads, a, va.len());
                    for i in 0..dy.len() {
                        g[i] += dy[i] * vb[pick(i)];
                    }
                }
                if self.needs(b) {
                    let g = slot(grads, b, nb);
                    reduce_broadcast(bc, dy, |i| (i, va[i]), g);
                }
            }
            Op::Concat { parts } => {
                let width = *node.shape.last().unwrap();
                let rows = dy.len() / width.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = *self.nodes[p].shape.last().unwrap();
                    if self.needs(p) {
                        let g = slot(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(
                                &mut g[r * w..(r + 1) * w],
                                &dy[r * width + offset..r * width + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            &Op::Relu(x) => {
                let xs = val(x);
                let g = slot(grads, x, xs.len());
                for i in 0..dy.len() {
                    if xs[i] > 0.0 {
                        g[i] += dy[i];
                    }
                }
            }
            &Op::Softplus(x) => {
                let xs = val(x);
                let g = slot(grads, x, xs.len());
                for i in 0..dy.len() {
                    g[i] += dy[i] * kernels::sigmoid(xs[i]);
                }
            }
            &Op::Sigmoid(x) => {
                let ys = &node.value;
                let g = slot(grads, x, ys.len());
                for i in 0..dy.len() {
                    g[i] += dy[i] * ys[i] * (1.0 - ys[i]);
                }
            }
            Op::Softmax { x, valid } => {
                let n = *node.shape.last().unwrap();
                let ys = &node.value;
                let g = slot(grads, *x, ys.len());
                for r in 0..ys.len() / n {
                    let row = r * n..(r + 1) * n;
                    let s = kernels::dot(&ys[row.clone()], &dy[row.clone()]);
                    for j in row {
                        if valid.as_ref().is_none_or(|v| v[j]) {
                            g[j] += ys[j] * (dy[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = *node.shape.last().unwrap();
                let gv = val(*gamma);
                let rows = xhat.len() / n;
                if self.needs(*gamma) {
                    let g = slot(grads, *gamma, n);
                    for r in 0..rows {
                        for j in 0..n {
                            g[j] += dy[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let g = slot(grads, *beta, n);
                    for r in 0..rows {
                        add_into(g, &dy[r * n..(r + 1) * n]);
                    }
                }
                if self.needs(*x) {
                    let g = slot(grads, *x, xhat.len());
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..n {
                            dxhat[j] = dy[r * n + j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[r * n + j];
                        }
                        let k = inv_std[r] / n as f64;
                        for j in 0..n {
                            g[r * n + j] +=
                                k * (n as f64 * dxhat[j] - s1 - xhat[r * n + j] * s2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[*table].shape[1];
                let nt = self.nodes[*table].value.len();
                let g = slot(grads, *table, nt);
                for (k, &id) in ids.iter().enumerate() {
                    add_into(&mut g[id * d..(id + 1) * d], &dy[k * d..(k + 1) * d]);
                }
            }
            &Op::Mean { x, axis } => {
                let shape = &self.nodes[x].shape;
                let (outer, len, inner) = split_axis(shape, axis);
                let g = slot(grads, x, outer * len * inner);
                let scale = 1.0 / len as f64;
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            g[(o * len + l) * inner + i] += dy[o * inner + i] * scale;
                        }
                    }
                }
            }
            &Op::Affine { x, scale } => {
                let g = slot(grads, x, dy.len());
                for i in 0..dy.len() {
                    g[i] += scale * dy[i];
                }
            }
            Op::Bce {
                p,
                targets,
                mask,
                count,
            } => {
                let ps = val(*p);
                let g = slot(grads, *p, ps.len());
                if *count == 0 {
                    return;
                }
                let scale = dy[0] / *count as f64;
                for i in 0..ps.len() {
                    if mask[i] && (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&ps[i]) {
                        let (q, y) = (ps[i], targets[i]);
                        g[i] += scale * (-y / q + (1.0 - y) / (1.0 - q));
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

/// Sum `dy[i] * factor(i)` back onto the (possibly broadcast) right operand.
fn reduce_broadcast(
    bc: Broadcast,
    dy: &[f64],
    factor: impl Fn(usize) -> (usize, f64),
    g: &mut [f64],
) {
    let nb = g.len();
    for i in 0..dy.len() {
        let (_, f) = factor(i);
        let t = match bc {
            Broadcast::Same => i,
            Broadcast::Row => i % nb,
            Broadcast::Scalar => 0,
        };
        g[t] += dy[i] * f;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Result of a reverse sweep: one optional gradient per tape node.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `v`, or zeros of the right length when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, tape: &Tape<'_>, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    }
}

/// Parameter gradients detached from their tape, so the tape's borrow of
/// the store can end before the store is updated.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub Vec<(ParamId, Vec<f64>)>);

impl Tape<'_> {
    pub fn param_grads(&self, grads: &Gradients) -> Result<ParamGrads> {
        if grads.tape != self.id {
            return Err(Error::ForeignTensor);
        }
        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[idx].as_deref()) {
                out.push((id, g.to_vec()));
            }
        }
        Ok(ParamGrads(out))
    }
}

impl ParamStore {
    pub fn accumulate_grads(&mut self, grads: &ParamGrads) {
        for (id, g) in &grads.0 {
            self.get_mut(*id).accumulate_grad(g);
        }
    }

    /// Add the tape's parameter gradients into the stored tensors.
    pub fn accumulate(&mut self, tape: &Tape<'_>, grads: &Gradients) -> Result<()> {
        if grads.tape != tape.id {
            return Err(Error::ForeignTensor);
        }
        for (idx, node) in tape.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[idx].as_deref()) {
                self.get_mut(id).accumulate_grad(g);
            }
        }
        Ok(())
    }
}
