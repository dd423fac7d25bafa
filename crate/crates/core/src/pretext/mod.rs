//! The two self-supervised objectives and their heads.
//!
//! Timestamp-predictive task: a bias-equipped linear map (no activation)
//! reconstructs the patched input from the patch embeddings, scored by MSE —
//! no masking of the input anywhere. Instance-contrastive task: the window
//! is encoded twice with fresh dropout masks, each instance embedding goes
//! through a bottleneck MLP (linear, batch norm, ReLU, linear), and each
//! head output is pulled toward the *other* view's raw instance embedding by
//! negative cosine similarity with the target branch stop-gradiented. No
//! negative pairs, no augmentation. The two losses join as
//! `total = l_p + lambda * l_c`.

use crate::encoder::{
    forward_window, pool, DualEmbedding, EmbeddingMode, EncoderConfig, EncoderError,
    EncoderParams,
};
use crate::rng::RngStream;
use crate::scalar::{eps, Scalar};
use crate::tensor::ops::RunningStats;
use crate::tensor::{Tape, Tensor, TensorError};

/// Linear reconstruction head `[token_width x d_model]` plus bias. No
/// activation anywhere.
#[derive(Debug, Clone)]
pub struct PredictiveHead<F: Scalar> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> PredictiveHead<F> {
    pub fn init(token_width: usize, d_model: usize, rng: &mut RngStream) -> Self {
        let a = (6.0 / (token_width + d_model) as f64).sqrt();
        let data = (0..token_width * d_model)
            .map(|_| F::from_f64(rng.range(-a, a)))
            .collect();
        PredictiveHead {
            w: Tensor::from_vec(vec![token_width, d_model], data),
            b: Tensor::zeros(vec![token_width]),
        }
    }

    /// Reconstruct `[rows x token_width]` from `[rows x d_model]`.
    pub fn forward(&self, tape: &mut Tape<F>, z_t: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        tape.linear(z_t, &self.w, &self.b)
    }
}

/// Two-layer bottleneck MLP: linear -> BatchNorm -> ReLU -> linear, with
/// bottleneck width `max(dim/4, 8)` (strictly below `dim`). Output width
/// equals the input width so cosine against a raw instance embedding is
/// well-typed.
#[derive(Debug, Clone)]
pub struct ContrastiveHead<F: Scalar> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub bn_gamma: Tensor<F>,
    pub bn_beta: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

/// Bottleneck width for an instance-embedding dimension.
pub fn bottleneck_width(dim: usize) -> usize {
    (dim / 4).max(8)
}

impl<F: Scalar> ContrastiveHead<F> {
    pub fn init(dim: usize, rng: &mut RngStream) -> Result<Self, EncoderError> {
        let db = bottleneck_width(dim);
        if db >= dim {
            return Err(EncoderError::ConfigInvalid(format!(
                "bottleneck {db} must be below embedding width {dim}"
            )));
        }
        let glorot = |rng: &mut RngStream, out: usize, inp: usize| {
            let a = (6.0 / (out + inp) as f64).sqrt();
            Tensor::from_vec(
                vec![out, inp],
                (0..out * inp).map(|_| F::from_f64(rng.range(-a, a))).collect(),
            )
        };
        Ok(ContrastiveHead {
            w1: glorot(rng, db, dim),
            b1: Tensor::zeros(vec![db]),
            bn_gamma: Tensor::filled(vec![db], F::one()),
            bn_beta: Tensor::zeros(vec![db]),
            w2: glorot(rng, dim, db),
            b2: Tensor::zeros(vec![dim]),
        })
    }

    /// Map a batch `[batch x dim] -> [batch x dim]`. Training mode uses
    /// batch statistics (batch >= 2) and updates `bn_stats`; eval mode uses
    /// the running statistics.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        z: &Tensor<F>,
        bn_stats: &mut RunningStats<F>,
        bn_training: bool,
    ) -> Result<Tensor<F>, TensorError> {
        let h = tape.linear(z, &self.w1, &self.b1)?;
        let h = tape.batch_norm1d(
            &h,
            &self.bn_gamma,
            &self.bn_beta,
            bn_stats,
            bn_training,
            eps::BN_MOMENTUM,
            eps::BATCH_NORM,
        )?;
        let h = tape.relu(&h);
        tape.linear(&h, &self.w2, &self.b2)
    }
}

/// Both pretext heads plus the batch-norm running state (state, not a
/// parameter: it is saved in checkpoints but receives no gradient).
#[derive(Debug, Clone)]
pub struct PretextHeads<F: Scalar> {
    pub predictive: PredictiveHead<F>,
    pub contrastive: ContrastiveHead<F>,
    pub bn_stats: RunningStats<F>,
}

impl<F: Scalar> PretextHeads<F> {
    pub fn init(
        token_width: usize,
        d_model: usize,
        instance_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self, EncoderError> {
        Ok(PretextHeads {
            predictive: PredictiveHead::init(token_width, d_model, rng),
            contrastive: ContrastiveHead::init(instance_dim, rng)?,
            bn_stats: RunningStats::identity(bottleneck_width(instance_dim)),
        })
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor<F>, bool)) {
        f("pred_head.w", &self.predictive.w, true);
        f("pred_head.b", &self.predictive.b, false);
        f("contrast_head.w1", &self.contrastive.w1, true);
        f("contrast_head.b1", &self.contrastive.b1, false);
        f("contrast_head.bn_gamma", &self.contrastive.bn_gamma, false);
        f("contrast_head.bn_beta", &self.contrastive.bn_beta, false);
        f("contrast_head.w2", &self.contrastive.w2, true);
        f("contrast_head.b2", &self.contrastive.b2, false);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<F>)) {
        f("pred_head.w", &mut self.predictive.w);
        f("pred_head.b", &mut self.predictive.b);
        f("contrast_head.w1", &mut self.contrastive.w1);
        f("contrast_head.b1", &mut self.contrastive.b1);
        f("contrast_head.bn_gamma", &mut self.contrastive.bn_gamma);
        f("contrast_head.bn_beta", &mut self.contrastive.bn_beta);
        f("contrast_head.w2", &mut self.contrastive.w2);
        f("contrast_head.b2", &mut self.contrastive.b2);
    }

    /// Tape-bound clone of the parameters (running stats stay with `self`).
    pub fn lease(&self, tape: &mut Tape<F>) -> PretextHeads<F> {
        let mut leased = self.clone();
        leased.visit_mut(&mut |_, t| *t = tape.watch(t));
        leased
    }
}

/// The six loss scalars of one step plus their combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_p1: f64,
    pub l_p2: f64,
    pub l_p: f64,
    pub l_c1: f64,
    pub l_c2: f64,
    pub l_c: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn zero(lambda: f64) -> Self {
        LossBreakdown {
            l_p1: 0.0,
            l_p2: 0.0,
            l_p: 0.0,
            l_c1: 0.0,
            l_c2: 0.0,
            l_c: 0.0,
            total: 0.0,
            lambda,
        }
    }

    /// Sample-count weighted average of per-batch breakdowns.
    pub fn weighted_mean(items: &[(LossBreakdown, usize)]) -> Self {
        let total_n: usize = items.iter().map(|(_, n)| n).sum();
        let mut out = LossBreakdown::zero(items.first().map(|(b, _)| b.lambda).unwrap_or(0.0));
        if total_n == 0 {
            return out;
        }
        for (b, n) in items {
            let w = *n as f64 / total_n as f64;
            out.l_p1 += w * b.l_p1;
            out.l_p2 += w * b.l_p2;
            out.l_p += w * b.l_p;
            out.l_c1 += w * b.l_c1;
            out.l_c2 += w * b.l_c2;
            out.l_c += w * b.l_c;
            out.total += w * b.total;
        }
        out
    }
}

/// Knobs the ablation harness turns; defaults reproduce the method as
/// designed.
#[derive(Debug, Clone, Copy)]
pub struct PretextOptions {
    pub lambda: f64,
    /// `false` removes the stop-gradient (ablation arm).
    pub stop_gradient: bool,
    /// Where the instance embedding comes from.
    pub embedding_mode: EmbeddingMode,
    /// Batch norm mode inside the contrastive head: batch statistics during
    /// training, running statistics during validation passes.
    pub bn_training: bool,
}

impl Default for PretextOptions {
    fn default() -> Self {
        PretextOptions {
            lambda: 1.0,
            stop_gradient: true,
            embedding_mode: EmbeddingMode::Cls,
            bn_training: true,
        }
    }
}

/// Encode the same batch twice with fresh dropout masks: two views of every
/// window from pure encoder randomness, both recorded for joint backward.
#[allow(clippy::type_complexity)]
pub fn two_view_forward<F: Scalar>(
    tape: &mut Tape<F>,
    xs: &[Tensor<F>],
    params: &EncoderParams<F>,
    config: &EncoderConfig,
    rng: &mut RngStream,
) -> Result<(Vec<DualEmbedding<F>>, Vec<DualEmbedding<F>>), EncoderError> {
    let mut view1 = Vec::with_capacity(xs.len());
    for x in xs {
        view1.push(forward_window(tape, x, params, config, true, rng)?);
    }
    let mut view2 = Vec::with_capacity(xs.len());
    for x in xs {
        view2.push(forward_window(tape, x, params, config, true, rng)?);
    }
    Ok((view1, view2))
}

/// MSE between the reconstruction `p(z_t)` and the patched input, mean over
/// all elements.
pub fn predictive_loss<F: Scalar>(
    tape: &mut Tape<F>,
    z_t: &Tensor<F>,
    x_patched: &Tensor<F>,
    head: &PredictiveHead<F>,
) -> Result<Tensor<F>, TensorError> {
    let pred = head.forward(tape, z_t)?;
    if pred.shape() != x_patched.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "predictive_loss",
            lhs: pred.shape().to_vec(),
            rhs: x_patched.shape().to_vec(),
        });
    }
    tape.mse(&pred, x_patched)
}

/// Symmetric negative-cosine alignment with the asymmetric head/stop-gradient
/// structure: each head output aligns to the other view's raw embedding,
/// which is treated as a constant. Returns `(l_c1, l_c2, l_c)`, each batch-
/// averaged and in `[-1, 1]`.
#[allow(clippy::type_complexity)]
pub fn contrastive_loss<F: Scalar>(
    tape: &mut Tape<F>,
    z1: &Tensor<F>,
    z2: &Tensor<F>,
    head: &ContrastiveHead<F>,
    bn_stats: &mut RunningStats<F>,
    options: &PretextOptions,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>), TensorError> {
    let batch = z1.shape()[0];
    let zhat1 = head.forward(tape, z1, bn_stats, options.bn_training)?;
    let zhat2 = head.forward(tape, z2, bn_stats, options.bn_training)?;
    let target2 = if options.stop_gradient { z2.detach() } else { z2.clone() };
    let target1 = if options.stop_gradient { z1.detach() } else { z1.clone() };

    let align = |pred: &Tensor<F>, target: &Tensor<F>, tape: &mut Tape<F>| {
        let mut acc: Option<Tensor<F>> = None;
        for b in 0..batch {
            let p = tape.row(pred, b)?;
            let t = tape.row(target, b)?;
            let c = tape.cosine_similarity(&p, &t, eps::COSINE)?;
            acc = Some(match acc {
                None => c,
                Some(a) => tape.add(&a, &c)?,
            });
        }
        let sum = acc.expect("empty batch");
        Ok::<_, TensorError>(tape.scale(&sum, F::from_f64(-1.0 / batch as f64)))
    };
    let l_c1 = align(&zhat1, &target2, tape)?;
    let l_c2 = align(&zhat2, &target1, tape)?;
    let sum = tape.add(&l_c1, &l_c2)?;
    let l_c = tape.scale(&sum, F::from_f64(0.5));
    Ok((l_c1, l_c2, l_c))
}

/// Everything the optimizer needs from one batch: the total-loss tensor to
/// backprop and the scalar breakdown for logging.
pub struct StepLosses<F: Scalar> {
    pub total: Tensor<F>,
    pub breakdown: LossBreakdown,
}

/// Full joint objective over a batch of patched windows.
///
/// Both views' patch embeddings feed the shared predictive head; the two
/// predictive losses are averaged. Instance embeddings (from the instance
/// token, or pooled in the ablation arms) feed the contrastive task. The
/// combination is `l_p + lambda * l_c`.
#[allow(clippy::too_many_arguments)]
pub fn pretext_losses<F: Scalar>(
    tape: &mut Tape<F>,
    xs: &[Tensor<F>],
    encoder: &EncoderParams<F>,
    heads: &PretextHeads<F>,
    bn_stats: &mut RunningStats<F>,
    config: &EncoderConfig,
    options: &PretextOptions,
    rng: &mut RngStream,
) -> Result<StepLosses<F>, EncoderError> {
    let batch = xs.len();
    assert!(batch > 0, "empty batch");
    let (view1, view2) = two_view_forward(tape, xs, encoder, config, rng)?;

    let mean_mse = |view: &[DualEmbedding<F>], tape: &mut Tape<F>| {
        let mut acc: Option<Tensor<F>> = None;
        for (dual, x) in view.iter().zip(xs) {
            let l = predictive_loss(tape, &dual.z_t, x, &heads.predictive)?;
            acc = Some(match acc {
                None => l,
                Some(a) => tape.add(&a, &l)?,
            });
        }
        let sum = acc.unwrap();
        Ok::<_, EncoderError>(tape.scale(&sum, F::from_f64(1.0 / batch as f64)))
    };
    let l_p1 = mean_mse(&view1, tape)?;
    let l_p2 = mean_mse(&view2, tape)?;
    let p_sum = tape.add(&l_p1, &l_p2)?;
    let l_p = tape.scale(&p_sum, F::from_f64(0.5));

    let instance = |view: &[DualEmbedding<F>], tape: &mut Tape<F>| {
        let rows: Vec<Tensor<F>> = view
            .iter()
            .map(|dual| match options.embedding_mode {
                EmbeddingMode::Cls => Ok(dual.z_i.clone()),
                EmbeddingMode::Pooled(m) => pool(tape, &dual.z_t, m),
            })
            .collect::<Result<_, _>>()?;
        Ok::<_, EncoderError>(tape.stack_rows(&rows)?)
    };
    let z1 = instance(&view1, tape)?;
    let z2 = instance(&view2, tape)?;
    let (l_c1, l_c2, l_c) =
        contrastive_loss(tape, &z1, &z2, &heads.contrastive, bn_stats, options)?;

    let weighted_c = tape.scale(&l_c, F::from_f64(options.lambda));
    let total = tape.add(&l_p, &weighted_c)?;

    let breakdown = LossBreakdown {
        l_p1: l_p1.item().as_f64(),
        l_p2: l_p2.item().as_f64(),
        l_p: l_p.item().as_f64(),
        l_c1: l_c1.item().as_f64(),
        l_c2: l_c2.item().as_f64(),
        l_c: l_c.item().as_f64(),
        total: total.item().as_f64(),
        lambda: options.lambda,
    };
    Ok(StepLosses { total, breakdown })
}

#[cfg(test)]
mod tests;
