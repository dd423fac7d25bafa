//! Wengert tape: op recording and the reverse pass.
//!
//! One [`Node`] per recorded operation, append-only, so append order is a
//! topological order and the backward pass is a single reverse sweep. Saved
//! activations are `Arc` clones of the forward tensors (cheap, shared).

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

use super::{Tensor, TensorError};
use crate::scalar::Scalar;
use std::sync::Arc;

/// Handle of a node on a tape.
pub type NodeId = usize;

#[derive(Debug)]
pub(crate) enum Op<F: Scalar> {
    Leaf {
        requires_grad: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
        b_numel: usize,
    },
    Sub {
        a: NodeId,
        b: NodeId,
        b_numel: usize,
    },
    Mul {
        a: NodeId,
        b: NodeId,
        a_val: Arc<Vec<F>>,
        b_val: Arc<Vec<F>>,
    },
    Scale {
        a: NodeId,
        k: F,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
        a_val: Arc<Vec<F>>,
        b_val: Arc<Vec<F>>,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    Transpose {
        a: NodeId,
        rows: usize,
        cols: usize,
    },
    Reshape {
        a: NodeId,
    },
    Concat {
        parts: Vec<(NodeId, usize)>, // input node + extent along axis
        axis: usize,
    },
    Slice {
        a: NodeId,
        axis: usize,
        start: usize,
        a_shape: Vec<usize>,
    },
    SumAll {
        a: NodeId,
        a_numel: usize,
    },
    MeanAll {
        a: NodeId,
        a_numel: usize,
    },
    MeanAxis {
        a: NodeId,
        axis: usize,
        a_shape: Vec<usize>,
    },
    Relu {
        a: NodeId,
        a_val: Arc<Vec<F>>,
    },
    Gelu {
        a: NodeId,
        a_val: Arc<Vec<F>>,
    },
    Softmax {
        a: NodeId,
        axis: usize,
        out: Arc<Vec<F>>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Arc<Vec<F>>,
        inv_std: Arc<Vec<F>>, // one per row
        gamma_val: Arc<Vec<F>>,
        feat: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Arc<Vec<F>>,
        inv_std: Arc<Vec<F>>, // one per feature
        gamma_val: Arc<Vec<F>>,
        feat: usize,
        training: bool,
    },
    Dropout {
        a: NodeId,
        mask: Arc<Vec<F>>, // entries 0 or 1/(1-p)
    },
    CosineSim {
        a: NodeId,
        b: NodeId,
        a_val: Arc<Vec<F>>,
        b_val: Arc<Vec<F>>,
        eps: F,
    },
    LogSoftmaxNll {
        logits: NodeId,
        probs: Arc<Vec<F>>,
        targets: Arc<Vec<usize>>,
        classes: usize,
    },
}

#[derive(Debug)]
pub(crate) struct Node<F: Scalar> {
    pub op: Op<F>,
    pub shape: Vec<usize>,
}

/// Define-by-run gradient tape.
///
/// A tape (and every tensor bound to it) is confined to one worker; tensors
/// not bound to a tape are immutable and freely shareable. An inference tape
/// ([`Tape::inference`]) runs the same forward code without recording.
pub struct Tape<F: Scalar> {
    pub(crate) nodes: Vec<Node<F>>,
    recording: bool,
    consumed: bool,
    cleared: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    /// Recording tape for gradient-bearing forward passes.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
            cleared: false,
        }
    }

    /// Non-recording tape: ops compute values only. Backward is unavailable.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
            consumed: false,
            cleared: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Ids of all gradient-requiring leaves recorded so far. Used to verify
    /// that every tensor that can receive a gradient is in the parameter
    /// registry.
    pub fn grad_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match n.op {
                Op::Leaf { requires_grad: true } => Some(id),
                _ => None,
            })
            .collect()
    }

    /// Register a gradient-requiring leaf (a parameter or input under test).
    pub fn watch(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.leaf(t, true)
    }

    /// Register a constant leaf (no gradient reported).
    pub fn constant(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: &Tensor<F>, requires_grad: bool) -> Tensor<F> {
        if !self.recording {
            return t.detach();
        }
        let id = self.push_node(Op::Leaf { requires_grad }, t.shape().to_vec());
        Tensor::bound(t.shape().to_vec(), t.data_arc(), Some(id), requires_grad)
    }

    /// Node id of `t`, binding it as a constant leaf if it is unbound.
    pub(crate) fn bind(&mut self, t: &Tensor<F>) -> Option<NodeId> {
        if !self.recording {
            return None;
        }
        match t.node_id() {
            Some(id) => Some(id),
            None => Some(self.push_node(Op::Leaf { requires_grad: false }, t.shape().to_vec())),
        }
    }

    pub(crate) fn push_node(&mut self, op: Op<F>, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape });
        id
    }

    /// Drop all recorded nodes and saved activations. Backward afterwards
    /// reports [`TensorError::StaleTape`].
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.cleared = true;
    }

    /// Reverse sweep from a scalar loss. Each node's total derivative is
    /// accumulated exactly once, in reverse append order. A second call on
    /// the same tape is an error.
    pub fn backward(&mut self, loss: &Tensor<F>) -> Result<Gradients<F>, TensorError> {
        if self.consumed || self.cleared {
            return Err(TensorError::StaleTape);
        }
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        let loss_id = loss.node_id().ok_or(TensorError::NotOnTape)?;
        self.consumed = true;

        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(vec![F::one()]);

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, id: NodeId, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}

            Op::Add { a, b, b_numel } => {
                let da = slot(grads, *a, g.len());
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += *gi;
                }
                let db = slot(grads, *b, *b_numel);
                for (i, gi) in g.iter().enumerate() {
                    db[i % b_numel] += *gi;
                }
            }

            Op::Sub { a, b, b_numel } => {
                let da = slot(grads, *a, g.len());
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += *gi;
                }
                let db = slot(grads, *b, *b_numel);
                for (i, gi) in g.iter().enumerate() {
                    db[i % b_numel] -= *gi;
                }
            }

            Op::Mul { a, b, a_val, b_val } => {
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * b_val[i];
                }
                let db = slot(grads, *b, g.len());
                for i in 0..g.len() {
                    db[i] += g[i] * a_val[i];
                }
            }

            Op::Scale { a, k } => {
                let da = slot(grads, *a, g.len());
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += *k * *gi;
                }
            }

            Op::Matmul { a, b, a_val, b_val, a_shape, b_shape } => {
                backward_matmul(g, a_val, b_val, a_shape, b_shape, *a, *b, grads);
            }

            Op::Transpose { a, rows, cols } => {
                // output is [cols x rows]; g stored in that layout
                let da = slot(grads, *a, rows * cols);
                for r in 0..*rows {
                    for c in 0..*cols {
                        da[r * cols + c] += g[c * rows + r];
                    }
                }
            }

            Op::Reshape { a } => {
                let da = slot(grads, *a, g.len());
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += *gi;
                }
            }

            Op::Concat { parts, axis } => {
                let out_shape = &node.shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0;
                for (part_id, extent) in parts {
                    let part_numel = outer * extent * inner;
                    let dp = slot(grads, *part_id, part_numel);
                    for o in 0..outer {
                        for j in 0..*extent {
                            let src = (o * total_axis + offset + j) * inner;
                            let dst = (o * extent + j) * inner;
                            for i in 0..inner {
                                dp[dst + i] += g[src + i];
                            }
                        }
                    }
                    offset += extent;
                }
            }

            Op::Slice { a, axis, start, a_shape } => {
                let outer: usize = a_shape[..*axis].iter().product();
                let inner: usize = a_shape[*axis + 1..].iter().product();
                let a_axis = a_shape[*axis];
                let len = node.shape[*axis];
                let da = slot(grads, *a, a_shape.iter().product());
                for o in 0..outer {
                    for j in 0..len {
                        let dst = (o * a_axis + start + j) * inner;
                        let src = (o * len + j) * inner;
                        for i in 0..inner {
                            da[dst + i] += g[src + i];
                        }
                    }
                }
            }

            Op::SumAll { a, a_numel } => {
                let da = slot(grads, *a, *a_numel);
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }

            Op::MeanAll { a, a_numel } => {
                let scale = F::one() / F::from_usize(*a_numel);
                let da = slot(grads, *a, *a_numel);
                for d in da.iter_mut() {
                    *d += g[0] * scale;
                }
            }

            Op::MeanAxis { a, axis, a_shape } => {
                let outer: usize = a_shape[..*axis].iter().product();
                let extent = a_shape[*axis];
                let inner: usize = a_shape[*axis + 1..].iter().product();
                let scale = F::one() / F::from_usize(extent);
                let da = slot(grads, *a, a_shape.iter().product());
                for o in 0..outer {
                    for j in 0..extent {
                        for i in 0..inner {
                            da[(o * extent + j) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }

            Op::Relu { a, a_val } => {
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if a_val[i] > F::zero() {
                        da[i] += g[i];
                    }
                }
            }

            Op::Gelu { a, a_val } => {
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * gelu_grad(a_val[i]);
                }
            }

            Op::Softmax { a, axis, out } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let extent = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let da = slot(grads, *a, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * extent + j) * inner + i;
                        let mut dot = F::zero();
                        for j in 0..extent {
                            dot += g[at(j)] * out[at(j)];
                        }
                        for j in 0..extent {
                            let idx = at(j);
                            da[idx] += out[idx] * (g[idx] - dot);
                        }
                    }
                }
            }

            Op::LayerNorm { x, gamma, beta, xhat, inv_std, gamma_val, feat } => {
                let feat = *feat;
                let rows = g.len() / feat;
                let inv_feat = F::one() / F::from_usize(feat);
                {
                    let dx = slot(grads, *x, g.len());
                    for r in 0..rows {
                        let base = r * feat;
                        let mut mean_dxhat = F::zero();
                        let mut mean_dxhat_xhat = F::zero();
                        for f in 0..feat {
                            let dxh = g[base + f] * gamma_val[f];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[base + f];
                        }
                        mean_dxhat *= inv_feat;
                        mean_dxhat_xhat *= inv_feat;
                        for f in 0..feat {
                            let dxh = g[base + f] * gamma_val[f];
                            dx[base + f] +=
                                inv_std[r] * (dxh - mean_dxhat - xhat[base + f] * mean_dxhat_xhat);
                        }
                    }
                }
                let dgamma = slot(grads, *gamma, feat);
                for r in 0..rows {
                    for f in 0..feat {
                        dgamma[f] += g[r * feat + f] * xhat[r * feat + f];
                    }
                }
                let dbeta = slot(grads, *beta, feat);
                for r in 0..rows {
                    for f in 0..feat {
                        dbeta[f] += g[r * feat + f];
                    }
                }
            }

            Op::BatchNorm { x, gamma, beta, xhat, inv_std, gamma_val, feat, training } => {
                let feat = *feat;
                let batch = g.len() / feat;
                {
                    let dx = slot(grads, *x, g.len());
                    if *training {
                        let inv_b = F::one() / F::from_usize(batch);
                        for f in 0..feat {
                            let mut sum_dxhat = F::zero();
                            let mut sum_dxhat_xhat = F::zero();
                            for b in 0..batch {
                                let dxh = g[b * feat + f] * gamma_val[f];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xhat[b * feat + f];
                            }
                            for b in 0..batch {
                                let idx = b * feat + f;
                                let dxh = g[idx] * gamma_val[f];
                                dx[idx] += inv_std[f]
                                    * (dxh - inv_b * sum_dxhat - xhat[idx] * inv_b * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        // running statistics are constants in eval mode
                        for b in 0..batch {
                            for f in 0..feat {
                                let idx = b * feat + f;
                                dx[idx] += g[idx] * gamma_val[f] * inv_std[f];
                            }
                        }
                    }
                }
                let dgamma = slot(grads, *gamma, feat);
                for b in 0..batch {
                    for f in 0..feat {
                        dgamma[f] += g[b * feat + f] * xhat[b * feat + f];
                    }
                }
                let dbeta = slot(grads, *beta, feat);
                for b in 0..batch {
                    for f in 0..feat {
                        dbeta[f] += g[b * feat + f];
                    }
                }
            }

            Op::Dropout { a, mask } => {
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * mask[i];
                }
            }

            Op::CosineSim { a, b, a_val, b_val, eps } => {
                let gs = g[0];
                let n = a_val.len();
                let mut s = F::zero();
                let mut na2 = F::zero();
                let mut nb2 = F::zero();
                for i in 0..n {
                    s += a_val[i] * b_val[i];
                    na2 += a_val[i] * a_val[i];
                    nb2 += b_val[i] * b_val[i];
                }
                let na = na2.sqrt();
                let nb = nb2.sqrt();
                let nac = na.max(*eps);
                let nbc = nb.max(*eps);
                let denom = nac * nbc;
                let c = s / denom;
                {
                    let da = slot(grads, *a, n);
                    for i in 0..n {
                        let mut d = b_val[i] / denom;
                        if na > *eps {
                            d -= c * a_val[i] / (nac * nac);
                        }
                        da[i] += gs * d;
                    }
                }
                let db = slot(grads, *b, n);
                for i in 0..n {
                    let mut d = a_val[i] / denom;
                    if nb > *eps {
                        d -= c * b_val[i] / (nbc * nbc);
                    }
                    db[i] += gs * d;
                }
            }

            Op::LogSoftmaxNll { logits, probs, targets, classes } => {
                let gs = g[0];
                let batch = targets.len();
                let inv_b = F::one() / F::from_usize(batch);
                let dl = slot(grads, *logits, batch * classes);
                for b in 0..batch {
                    for k in 0..*classes {
                        let idx = b * classes + k;
                        let indicator = if k == targets[b] { F::one() } else { F::zero() };
                        dl[idx] += gs * (probs[idx] - indicator) * inv_b;
                    }
                }
            }
        }
    }
}

/// Gradient accumulator slot for a node, created zeroed on first touch.
fn slot<F: Scalar>(grads: &mut [Option<Vec<F>>], id: NodeId, numel: usize) -> &mut Vec<F> {
    grads[id].get_or_insert_with(|| vec![F::zero(); numel])
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c0 = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let c1 = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c0 * (F::one() + three * c1 * x * x)
}

fn backward_matmul<F: Scalar>(
    g: &[F],
    a_val: &[F],
    b_val: &[F],
    a_shape: &[usize],
    b_shape: &[usize],
    a: NodeId,
    b: NodeId,
    grads: &mut [Option<Vec<F>>],
) {
    let dims = super::ops::MatmulDims::resolve(a_shape, b_shape).expect("validated in forward");
    let (m, k, n) = (dims.m, dims.k, dims.n);
    {
        let da = slot(grads, a, a_val.len());
        for bi in 0..dims.batch_len() {
            let (ai, bi_idx) = dims.map(bi);
            let gm = &g[bi * m * n..][..m * n];
            let bm = &b_val[bi_idx * k * n..][..k * n];
            let dam = &mut da[ai * m * k..][..m * k];
            // dA = g . B^T
            for i in 0..m {
                for kk in 0..k {
                    let mut s = F::zero();
                    for j in 0..n {
                        s += gm[i * n + j] * bm[kk * n + j];
                    }
                    dam[i * k + kk] += s;
                }
            }
        }
    }
    let db = slot(grads, b, b_val.len());
    for bi in 0..dims.batch_len() {
        let (ai, bi_idx) = dims.map(bi);
        let gm = &g[bi * m * n..][..m * n];
        let am = &a_val[ai * m * k..][..m * k];
        let dbm = &mut db[bi_idx * k * n..][..k * n];
        // dB = A^T . g
        for i in 0..m {
            for kk in 0..k {
                let av = am[i * k + kk];
                for j in 0..n {
                    dbm[kk * n + j] += av * gm[i * n + j];
                }
            }
        }
    }
}

/// Result of a backward pass: one gradient per node that received flow.
#[derive(Debug)]
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient with respect to a tape-bound tensor. Tensors that received
    /// no flow report zeros; unbound tensors report `None`.
    pub fn wrt(&self, t: &Tensor<F>) -> Option<Tensor<F>> {
        let id = t.node_id()?;
        Some(self.by_node(id))
    }

    pub fn by_node(&self, id: NodeId) -> Tensor<F> {
        let shape = self.shapes[id].clone();
        match &self.grads[id] {
            Some(g) => Tensor::from_vec(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient actually flowed into this tensor's node.
    pub fn touched(&self, t: &Tensor<F>) -> bool {
        t.node_id().map(|id| self.grads[id].is_some()).unwrap_or(false)
    }
}

pub(crate) fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}
