//! Forward implementations of the tape primitives.
//!
//! Every op validates shapes, computes the forward value, and (when the tape
//! is recording) pushes one node carrying whatever the backward rule needs.
//! Division- and normalization-style ops guard their denominators with the
//! documented epsilons so finite inputs always produce finite outputs.

#![allow(clippy::needless_range_loop)]

use super::tape::{lane_dims, Op};
use super::{Tape, Tensor, TensorError};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use std::sync::Arc;

/// Resolved geometry of a (possibly batched) matrix product.
pub(crate) struct MatmulDims {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    batch_out: Vec<usize>,
    a_bstrides: Vec<usize>,
    b_bstrides: Vec<usize>,
}

impl MatmulDims {
    pub fn resolve(a_shape: &[usize], b_shape: &[usize]) -> Result<Self, TensorError> {
        let err = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        };
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (k2, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let a_batch = &a_shape[..a_shape.len() - 2];
        let b_batch = &b_shape[..b_shape.len() - 2];
        let rank = a_batch.len().max(b_batch.len());
        let mut batch_out = vec![1; rank];
        let mut a_pad = vec![1; rank];
        let mut b_pad = vec![1; rank];
        a_pad[rank - a_batch.len()..].copy_from_slice(a_batch);
        b_pad[rank - b_batch.len()..].copy_from_slice(b_batch);
        for d in 0..rank {
            batch_out[d] = match (a_pad[d], b_pad[d]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(err()),
            };
        }
        // broadcast strides in units of matrices; 0 where the input repeats
        let stride_of = |pad: &[usize]| {
            let mut s = vec![0usize; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                if pad[d] != 1 {
                    s[d] = acc;
                    acc *= pad[d];
                }
            }
            s
        };
        let a_bstrides = stride_of(&a_pad);
        let b_bstrides = stride_of(&b_pad);
        Ok(MatmulDims { m, k, n, batch_out, a_bstrides, b_bstrides })
    }

    pub fn batch_len(&self) -> usize {
        self.batch_out.iter().product()
    }

    /// Map a flat output batch index to (a, b) matrix indices.
    pub fn map(&self, mut flat: usize) -> (usize, usize) {
        let mut a_idx = 0;
        let mut b_idx = 0;
        for d in (0..self.batch_out.len()).rev() {
            let coord = flat % self.batch_out[d];
            flat /= self.batch_out[d];
            a_idx += coord * self.a_bstrides[d];
            b_idx += coord * self.b_bstrides[d];
        }
        (a_idx, b_idx)
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch_out.clone();
        s.push(self.m);
        s.push(self.n);
        s
    }
}

/// Batch-norm running statistics, updated during training-mode forwards.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F: Scalar> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Scalar> RunningStats<F> {
    pub fn identity(feat: usize) -> Self {
        RunningStats {
            mean: vec![F::zero(); feat],
            var: vec![F::one(); feat],
        }
    }
}

fn suffix_check<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, op: &'static str) -> Result<(), TensorError> {
    let ar = a.shape().len();
    let br = b.shape().len();
    if br > ar || b.shape() != &a.shape()[ar - br..] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<F: Scalar> Tape<F> {
    fn finish(
        &mut self,
        op: Op<F>,
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
    ) -> Tensor<F> {
        if !self.is_recording() {
            return Tensor::from_vec(shape, data);
        }
        let id = self.push_node(op, shape.clone());
        Tensor::bound(shape, Arc::new(data), Some(id), requires_grad)
    }

    /// Elementwise `a + b`; `b` may be a shape-suffix of `a` (bias rows,
    /// scalars) and is tiled over the leading axes.
    pub fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        suffix_check(a, b, "add")?;
        let bn = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.data()[i % bn])
            .collect();
        let rg = a.requires_grad() || b.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::from_vec(a.shape().to_vec(), data));
        }
        let (ai, bi) = (self.bind(a).unwrap(), self.bind(b).unwrap());
        Ok(self.finish(Op::Add { a: ai, b: bi, b_numel: bn }, a.shape().to_vec(), data, rg))
    }

    /// Elementwise `a - b` with the same suffix-broadcast rule as [`Tape::add`].
    pub fn sub(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        suffix_check(a, b, "sub")?;
        let bn = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x - b.data()[i % bn])
            .collect();
        let rg = a.requires_grad() || b.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::from_vec(a.shape().to_vec(), data));
        }
        let (ai, bi) = (self.bind(a).unwrap(), self.bind(b).unwrap());
        Ok(self.finish(Op::Sub { a: ai, b: bi, b_numel: bn }, a.shape().to_vec(), data, rg))
    }

    /// Hadamard product of same-shape tensors.
    pub fn mul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let rg = a.requires_grad() || b.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::from_vec(a.shape().to_vec(), data));
        }
        let (ai, bi) = (self.bind(a).unwrap(), self.bind(b).unwrap());
        Ok(self.finish(
            Op::Mul { a: ai, b: bi, a_val: a.data_arc(), b_val: b.data_arc() },
            a.shape().to_vec(),
            data,
            rg,
        ))
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, a: &Tensor<F>, k: F) -> Tensor<F> {
        let data = a.data().iter().map(|&x| x * k).collect();
        let rg = a.requires_grad();
        if !self.is_recording() {
            return Tensor::from_vec(a.shape().to_vec(), data);
        }
        let ai = self.bind(a).unwrap();
        self.finish(Op::Scale { a: ai, k }, a.shape().to_vec(), data, rg)
    }

    pub fn neg(&mut self, a: &Tensor<F>) -> Tensor<F> {
        self.scale(a, -F::one())
    }

    /// Matrix product `[.., m, k] . [.., k, n] -> [.., m, n]` with
    /// broadcastable leading batch extents.
    pub fn matmul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let dims = MatmulDims::resolve(a.shape(), b.shape())?;
        let (m, k, n) = (dims.m, dims.k, dims.n);
        let mut data = vec![F::zero(); dims.batch_len() * m * n];
        for bi in 0..dims.batch_len() {
            let (ai, bidx) = dims.map(bi);
            let am = &a.data()[ai * m * k..][..m * k];
            let bm = &b.data()[bidx * k * n..][..k * n];
            let out = &mut data[bi * m * n..][..m * n];
            for i in 0..m {
                for kk in 0..k {
                    let av = am[i * k + kk];
                    if av == F::zero() {
                        continue;
                    }
                    let brow = &bm[kk * n..][..n];
                    let orow = &mut out[i * n..][..n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        let shape = dims.out_shape();
        let rg = a.requires_grad() || b.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::from_vec(shape, data));
        }
        let (ai, bi) = (self.bind(a).unwrap(), self.bind(b).unwrap());
        Ok(self.finish(
            Op::Matmul {
                a: ai,
                b: bi,
                a_val: a.data_arc(),
                b_val: b.data_arc(),
                a_shape: a.shape().to_vec(),
                b_shape: b.shape().to_vec(),
            },
            shape,
            data,
            rg,
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        if a.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![F::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = a.data()[r * cols + c];
            }
        }
        let rg = a.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::from_vec(vec![cols, rows], data));
        }
        let ai = self.bind(a).unwrap();
        Ok(self.finish(Op::Transpose { a: ai, rows, cols }, vec![cols, rows], data, rg))
    }

    pub fn reshape(&mut self, a: &Tensor<F>, shape: Vec<usize>) -> Result<Tensor<F>, TensorError> {
        if shape.iter().product::<usize>() != a.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape,
            });
        }
        let data = a.data().to_vec();
        let rg = a.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::from_vec(shape, data));
        }
        let ai = self.bind(a).unwrap();
        Ok(self.finish(Op::Reshape { a: ai }, shape, data, rg))
    }

    /// Concatenate along `axis`; inputs agree on every other extent.
    pub fn concat(&mut self, parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>, TensorError> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, shape: parts[0].shape().to_vec() });
        }
        for p in parts {
            if p.shape().len() != rank
                || (0..rank).any(|d| d != axis && p.shape()[d] != parts[0].shape()[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = total_axis;
        let (outer, _, inner) = lane_dims(&shape, axis);
        let mut data = vec![F::zero(); outer * total_axis * inner];
        let mut offset = 0;
        for p in parts {
            let extent = p.shape()[axis];
            for o in 0..outer {
                for j in 0..extent {
                    let src = (o * extent + j) * inner;
                    let dst = (o * total_axis + offset + j) * inner;
                    data[dst..dst + inner].copy_from_slice(&p.data()[src..src + inner]);
                }
            }
            offset += extent;
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        if !self.is_recording() {
            return Ok(Tensor::from_vec(shape, data));
        }
        let bound: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| (self.bind(p).unwrap(), p.shape()[axis]))
            .collect();
        Ok(self.finish(Op::Concat { parts: bound, axis }, shape, data, rg))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(
        &mut self,
        a: &Tensor<F>,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Tensor<F>, TensorError> {
        if axis >= a.shape().len() {
            return Err(TensorError::InvalidAxis { axis, shape: a.shape().to_vec() });
        }
        if start + len > a.shape()[axis] {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                lhs: a.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let (outer, extent, inner) = lane_dims(a.shape(), axis);
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let mut data = vec![F::zero(); outer * len * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = (o * extent + start + j) * inner;
                let dst = (o * len + j) * inner;
                data[dst..dst + inner].copy_from_slice(&a.data()[src..src + inner]);
            }
        }
        let rg = a.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::from_vec(shape, data));
        }
        let ai = self.bind(a).unwrap();
        Ok(self.finish(
            Op::Slice { a: ai, axis, start, a_shape: a.shape().to_vec() },
            shape,
            data,
            rg,
        ))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum_all(&mut self, a: &Tensor<F>) -> Tensor<F> {
        let s = a.data().iter().copied().sum();
        let rg = a.requires_grad();
        if !self.is_recording() {
            return Tensor::scalar(s);
        }
        let ai = self.bind(a).unwrap();
        self.finish(Op::SumAll { a: ai, a_numel: a.numel() }, vec![], vec![s], rg)
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean_all(&mut self, a: &Tensor<F>) -> Tensor<F> {
        let n = F::from_usize(a.numel());
        let s: F = a.data().iter().copied().sum();
        let m = s / n;
        let rg = a.requires_grad();
        if !self.is_recording() {
            return Tensor::scalar(m);
        }
        let ai = self.bind(a).unwrap();
        self.finish(Op::MeanAll { a: ai, a_numel: a.numel() }, vec![], vec![m], rg)
    }

    /// Mean along one axis (axis removed from the shape).
    pub fn mean_axis(&mut self, a: &Tensor<F>, axis: usize) -> Result<Tensor<F>, TensorError> {
        if axis >= a.shape().len() {
            return Err(TensorError::InvalidAxis { axis, shape: a.shape().to_vec() });
        }
        let (outer, extent, inner) = lane_dims(a.shape(), axis);
        let inv = F::one() / F::from_usize(extent);
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..extent {
                for i in 0..inner {
                    data[o * inner + i] += a.data()[(o * extent + j) * inner + i];
                }
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        let rg = a.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::from_vec(shape, data));
        }
        let ai = self.bind(a).unwrap();
        Ok(self.finish(
            Op::MeanAxis { a: ai, axis, a_shape: a.shape().to_vec() },
            shape,
            data,
            rg,
        ))
    }

    pub fn relu(&mut self, a: &Tensor<F>) -> Tensor<F> {
        let data = a.data().iter().map(|&x| x.max(F::zero())).collect();
        let rg = a.requires_grad();
        if !self.is_recording() {
            return Tensor::from_vec(a.shape().to_vec(), data);
        }
        let ai = self.bind(a).unwrap();
        self.finish(Op::Relu { a: ai, a_val: a.data_arc() }, a.shape().to_vec(), data, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: &Tensor<F>) -> Tensor<F> {
        let c0 = F::from_f64(0.7978845608028654); // sqrt(2/pi)
        let c1 = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let data = a
            .data()
            .iter()
            .map(|&x| {
                let u = c0 * (x + c1 * x * x * x);
                half * x * (F::one() + u.tanh())
            })
            .collect();
        let rg = a.requires_grad();
        if !self.is_recording() {
            return Tensor::from_vec(a.shape().to_vec(), data);
        }
        let ai = self.bind(a).unwrap();
        self.finish(Op::Gelu { a: ai, a_val: a.data_arc() }, a.shape().to_vec(), data, rg)
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: &Tensor<F>, axis: usize) -> Result<Tensor<F>, TensorError> {
        self.softmax_impl(a, axis, None)
    }

    /// Softmax restricted to positions where `mask` is true; masked outputs
    /// are exactly zero and receive exactly zero gradient. The mask is a
    /// constant (not differentiated). Every lane must keep at least one
    /// allowed position.
    pub fn softmax_masked(
        &mut self,
        a: &Tensor<F>,
        axis: usize,
        mask: &[bool],
    ) -> Result<Tensor<F>, TensorError> {
        assert_eq!(mask.len(), a.numel(), "mask length mismatch");
        self.softmax_impl(a, axis, Some(mask))
    }

    fn softmax_impl(
        &mut self,
        a: &Tensor<F>,
        axis: usize,
        mask: Option<&[bool]>,
    ) -> Result<Tensor<F>, TensorError> {
        if axis >= a.shape().len() {
            return Err(TensorError::InvalidAxis { axis, shape: a.shape().to_vec() });
        }
        let (outer, extent, inner) = lane_dims(a.shape(), axis);
        let mut data = vec![F::zero(); a.numel()];
        let allowed = |o: usize, j: usize, i: usize| {
            mask.map(|m| m[(o * extent + j) * inner + i]).unwrap_or(true)
        };
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * extent + j) * inner + i;
                let mut max = F::neg_infinity();
                for j in 0..extent {
                    if allowed(o, j, i) && a.data()[at(j)] > max {
                        max = a.data()[at(j)];
                    }
                }
                debug_assert!(max.is_finite(), "softmax lane fully masked");
                let mut denom = F::zero();
                for j in 0..extent {
                    if allowed(o, j, i) {
                        let e = (a.data()[at(j)] - max).exp();
                        data[at(j)] = e;
                        denom += e;
                    }
                }
                for j in 0..extent {
                    if allowed(o, j, i) {
                        data[at(j)] = data[at(j)] / denom;
                    }
                }
            }
        }
        let rg = a.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::from_vec(a.shape().to_vec(), data));
        }
        let ai = self.bind(a).unwrap();
        let out = Arc::new(data);
        let id = self.push_node(
            Op::Softmax { a: ai, axis, out: Arc::clone(&out) },
            a.shape().to_vec(),
        );
        Ok(Tensor::bound(a.shape().to_vec(), out, Some(id), rg))
    }

    /// Layer normalization over the last axis, then affine `gamma, beta`.
    pub fn layer_norm(
        &mut self,
        x: &Tensor<F>,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        eps: f64,
    ) -> Result<Tensor<F>, TensorError> {
        let rank = x.shape().len();
        if rank == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let feat = x.shape()[rank - 1];
        if gamma.shape() != [feat] || beta.shape() != [feat] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: gamma.shape().to_vec(),
                rhs: vec![feat],
            });
        }
        let rows = x.numel() / feat;
        let epsf = F::from_f64(eps);
        let inv_feat = F::one() / F::from_usize(feat);
        let mut xhat = vec![F::zero(); x.numel()];
        let mut inv_std = vec![F::zero(); rows];
        let mut data = vec![F::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * feat..][..feat];
            let mean: F = row.iter().copied().sum::<F>() * inv_feat;
            let var: F = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_feat;
            let istd = F::one() / (var + epsf).sqrt();
            inv_std[r] = istd;
            for f in 0..feat {
                let xh = (row[f] - mean) * istd;
                xhat[r * feat + f] = xh;
                data[r * feat + f] = gamma.data()[f] * xh + beta.data()[f];
            }
        }
        let rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::from_vec(x.shape().to_vec(), data));
        }
        let (xi, gi, bi) = (
            self.bind(x).unwrap(),
            self.bind(gamma).unwrap(),
            self.bind(beta).unwrap(),
        );
        Ok(self.finish(
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat: Arc::new(xhat),
                inv_std: Arc::new(inv_std),
                gamma_val: gamma.data_arc(),
                feat,
            },
            x.shape().to_vec(),
            data,
            rg,
        ))
    }

    /// 1-D batch normalization over `[batch, feat]`.
    ///
    /// Training mode normalizes by biased batch statistics and folds them
    /// into `running` with the given momentum; eval mode normalizes by the
    /// running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm1d(
        &mut self,
        x: &Tensor<F>,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        running: &mut RunningStats<F>,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Tensor<F>, TensorError> {
        if x.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm1d",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (batch, feat) = (x.shape()[0], x.shape()[1]);
        if gamma.shape() != [feat] || beta.shape() != [feat] || running.mean.len() != feat {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm1d",
                lhs: gamma.shape().to_vec(),
                rhs: vec![feat],
            });
        }
        if training && batch < 2 {
            return Err(TensorError::DegenerateBatch(batch));
        }
        let epsf = F::from_f64(eps);
        let (mean, var) = if training {
            let inv_b = F::one() / F::from_usize(batch);
            let mut mean = vec![F::zero(); feat];
            let mut var = vec![F::zero(); feat];
            for b in 0..batch {
                for f in 0..feat {
                    mean[f] += x.data()[b * feat + f];
                }
            }
            for f in 0..feat {
                mean[f] *= inv_b;
            }
            for b in 0..batch {
                for f in 0..feat {
                    let d = x.data()[b * feat + f] - mean[f];
                    var[f] += d * d;
                }
            }
            for f in 0..feat {
                var[f] *= inv_b;
            }
            let mom = F::from_f64(momentum);
            for f in 0..feat {
                running.mean[f] = (F::one() - mom) * running.mean[f] + mom * mean[f];
                running.var[f] = (F::one() - mom) * running.var[f] + mom * var[f];
            }
            (mean, var)
        } else {
            (running.mean.clone(), running.var.clone())
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + epsf).sqrt()).collect();
        let mut xhat = vec![F::zero(); batch * feat];
        let mut data = vec![F::zero(); batch * feat];
        for b in 0..batch {
            for f in 0..feat {
                let idx = b * feat + f;
                let xh = (x.data()[idx] - mean[f]) * inv_std[f];
                xhat[idx] = xh;
                data[idx] = gamma.data()[f] * xh + beta.data()[f];
            }
        }
        let rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::from_vec(x.shape().to_vec(), data));
        }
        let (xi, gi, bi) = (
            self.bind(x).unwrap(),
            self.bind(gamma).unwrap(),
            self.bind(beta).unwrap(),
        );
        Ok(self.finish(
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat: Arc::new(xhat),
                inv_std: Arc::new(inv_std),
                gamma_val: gamma.data_arc(),
                feat,
                training,
            },
            x.shape().to_vec(),
            data,
            rg,
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`, so eval mode
    /// and `p = 0` are the bitwise identity (no draws consumed).
    pub fn dropout(
        &mut self,
        a: &Tensor<F>,
        p: f64,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Tensor<F>, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(a.clone());
        }
        let keep_scale = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..a.numel())
            .map(|_| if rng.uniform() < p { F::zero() } else { keep_scale })
            .collect();
        let data = a.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let rg = a.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::from_vec(a.shape().to_vec(), data));
        }
        let ai = self.bind(a).unwrap();
        Ok(self.finish(
            Op::Dropout { a: ai, mask: Arc::new(mask) },
            a.shape().to_vec(),
            data,
            rg,
        ))
    }

    /// Cosine similarity of two equal-length vectors, with norms clamped
    /// below by `eps`. Result lies in `[-1, 1]`.
    pub fn cosine_similarity(
        &mut self,
        a: &Tensor<F>,
        b: &Tensor<F>,
        eps: f64,
    ) -> Result<Tensor<F>, TensorError> {
        if a.shape() != b.shape() || a.numel() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let epsf = F::from_f64(eps);
        let mut s = F::zero();
        let mut na2 = F::zero();
        let mut nb2 = F::zero();
        for i in 0..a.numel() {
            s += a.data()[i] * b.data()[i];
            na2 += a.data()[i] * a.data()[i];
            nb2 += b.data()[i] * b.data()[i];
        }
        let c = s / (na2.sqrt().max(epsf) * nb2.sqrt().max(epsf));
        let rg = a.requires_grad() || b.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::scalar(c));
        }
        let (ai, bi) = (self.bind(a).unwrap(), self.bind(b).unwrap());
        Ok(self.finish(
            Op::CosineSim {
                a: ai,
                b: bi,
                a_val: a.data_arc(),
                b_val: b.data_arc(),
                eps: epsf,
            },
            vec![],
            vec![c],
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under a softmax over the
    /// last axis of `logits [batch, classes]`. Stable log-sum-exp forward.
    pub fn log_softmax_nll(
        &mut self,
        logits: &Tensor<F>,
        targets: &[usize],
    ) -> Result<Tensor<F>, TensorError> {
        if logits.shape().len() != 2 || logits.shape()[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "log_softmax_nll",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
        for &t in targets {
            if t >= classes {
                return Err(TensorError::ClassOutOfRange { index: t, classes });
            }
        }
        let mut probs = vec![F::zero(); batch * classes];
        let mut loss = F::zero();
        for b in 0..batch {
            let row = &logits.data()[b * classes..][..classes];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for k in 0..classes {
                let e = (row[k] - max).exp();
                probs[b * classes + k] = e;
                denom += e;
            }
            for k in 0..classes {
                probs[b * classes + k] = probs[b * classes + k] / denom;
            }
            loss -= (row[targets[b]] - max) - denom.ln();
        }
        loss = loss / F::from_usize(batch);
        let rg = logits.requires_grad();
        if !self.is_recording() {
            return Ok(Tensor::scalar(loss));
        }
        let li = self.bind(logits).unwrap();
        Ok(self.finish(
            Op::LogSoftmaxNll {
                logits: li,
                probs: Arc::new(probs),
                targets: Arc::new(targets.to_vec()),
                classes,
            },
            vec![],
            vec![loss],
            rg,
        ))
    }

    // ---- compositions of the primitives above ----

    /// `x . w^T + b` for `x [.., in]`, `w [out, in]`, `b [out]`.
    pub fn linear(
        &mut self,
        x: &Tensor<F>,
        w: &Tensor<F>,
        b: &Tensor<F>,
    ) -> Result<Tensor<F>, TensorError> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, &wt)?;
        self.add(&y, b)
    }

    /// Mean squared error between same-shape tensors.
    pub fn mse(&mut self, pred: &Tensor<F>, target: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(&diff, &diff)?;
        Ok(self.mean_all(&sq))
    }

    /// Stack `[D]` vectors into `[N, D]`.
    pub fn stack_rows(&mut self, rows: &[Tensor<F>]) -> Result<Tensor<F>, TensorError> {
        let reshaped: Vec<Tensor<F>> = rows
            .iter()
            .map(|r| self.reshape(r, vec![1, r.numel()]))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&Tensor<F>> = reshaped.iter().collect();
        self.concat(&refs, 0)
    }

    /// Extract row `r` of a 2-D tensor as a `[D]` vector.
    pub fn row(&mut self, a: &Tensor<F>, r: usize) -> Result<Tensor<F>, TensorError> {
        let cols = a.shape()[1];
        let s = self.slice(a, 0, r, 1)?;
        self.reshape(&s, vec![cols])
    }
}
