//! Transformer encoder over patched windows, producing a dual embedding:
//! one vector per patch token (timestamp level) plus one instance vector
//! read from a learnable instance token prepended to the patch sequence.
//!
//! Blocks are pre-norm (attention, then feed-forward, residuals around both)
//! with a final layer norm. Patch tokens attend to every patch token in both
//! directions but never to the instance token, while the instance token
//! attends everywhere. That one-way visibility keeps the two embedding
//! levels' training signals routed apart: the reconstruction loss on patch
//! embeddings cannot reach the instance token, and the contrastive loss
//! reads only the instance row.
//!
//! Dropout sites: embedding output, attention weights, feed-forward hidden.

use crate::data::PatchConfig;
use crate::rng::RngStream;
use crate::scalar::{eps, Scalar};
use crate::tensor::{Tape, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("need at least 2 embedding rows, got {0}")]
    TooFewRows(usize),
    #[error("anisotropy needs at least 2 embeddings, got {0}")]
    TooFewEmbeddings(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout_embed: f64,
    pub dropout_attn: f64,
    pub dropout_ff: f64,
    pub patch: PatchConfig,
    pub channels: usize,
    /// Window length in timesteps.
    pub window: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(EncoderError::ConfigInvalid(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.blocks < 1 || self.d_ff < 1 {
            return Err(EncoderError::ConfigInvalid(
                "blocks and d_ff must be >= 1".into(),
            ));
        }
        for (name, p) in [
            ("dropout_embed", self.dropout_embed),
            ("dropout_attn", self.dropout_attn),
            ("dropout_ff", self.dropout_ff),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(EncoderError::ConfigInvalid(format!("{name} {p} outside [0, 1)")));
            }
        }
        if self.channels == 0 {
            return Err(EncoderError::ConfigInvalid("channels must be >= 1".into()));
        }
        self.patch
            .validate(self.window)
            .map_err(|e| EncoderError::ConfigInvalid(e.to_string()))?;
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.patch.num_patches(self.window)
    }

    /// Flattened patch-token width `channels * patch_len`.
    pub fn token_width(&self) -> usize {
        self.patch.token_width(self.channels)
    }

    /// Encoder sequence length including the instance token.
    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }
}

#[derive(Debug, Clone)]
pub struct NormParams<F: Scalar> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct BlockParams<F: Scalar> {
    pub attn_norm: NormParams<F>,
    pub w_q: Tensor<F>,
    pub b_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub b_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub b_v: Tensor<F>,
    pub w_o: Tensor<F>,
    pub b_o: Tensor<F>,
    pub ff_norm: NormParams<F>,
    pub w_ff1: Tensor<F>,
    pub b_ff1: Tensor<F>,
    pub w_ff2: Tensor<F>,
    pub b_ff2: Tensor<F>,
}

/// All learnable state of the encoder.
#[derive(Debug, Clone)]
pub struct EncoderParams<F: Scalar> {
    /// Token projection `[d_model x token_width]`.
    pub w_token: Tensor<F>,
    /// Learnable positional encoding `[seq_len x d_model]`.
    pub pe: Tensor<F>,
    /// Learnable instance token `[token_width]`, prepended to the patches.
    pub cls_token: Tensor<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub final_norm: NormParams<F>,
}

impl<F: Scalar> EncoderParams<F> {
    /// Visit every parameter with its registry name and weight-decay flag.
    /// Decay applies to 2-D weight matrices only — never to norm affines,
    /// biases, the instance token, or the positional encoding.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor<F>, bool)) {
        f("encoder.w_token", &self.w_token, true);
        f("encoder.pe", &self.pe, false);
        f("encoder.cls_token", &self.cls_token, false);
        for (i, b) in self.blocks.iter().enumerate() {
            let n = |s: &str| format!("encoder.block{i}.{s}");
            f(&n("attn_norm.gamma"), &b.attn_norm.gamma, false);
            f(&n("attn_norm.beta"), &b.attn_norm.beta, false);
            f(&n("w_q"), &b.w_q, true);
            f(&n("b_q"), &b.b_q, false);
            f(&n("w_k"), &b.w_k, true);
            f(&n("b_k"), &b.b_k, false);
            f(&n("w_v"), &b.w_v, true);
            f(&n("b_v"), &b.b_v, false);
            f(&n("w_o"), &b.w_o, true);
            f(&n("b_o"), &b.b_o, false);
            f(&n("ff_norm.gamma"), &b.ff_norm.gamma, false);
            f(&n("ff_norm.beta"), &b.ff_norm.beta, false);
            f(&n("w_ff1"), &b.w_ff1, true);
            f(&n("b_ff1"), &b.b_ff1, false);
            f(&n("w_ff2"), &b.w_ff2, true);
            f(&n("b_ff2"), &b.b_ff2, false);
        }
        f("encoder.final_norm.gamma", &self.final_norm.gamma, false);
        f("encoder.final_norm.beta", &self.final_norm.beta, false);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<F>)) {
        f("encoder.w_token", &mut self.w_token);
        f("encoder.pe", &mut self.pe);
        f("encoder.cls_token", &mut self.cls_token);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = |s: &str| format!("encoder.block{i}.{s}");
            f(&n("attn_norm.gamma"), &mut b.attn_norm.gamma);
            f(&n("attn_norm.beta"), &mut b.attn_norm.beta);
            f(&n("w_q"), &mut b.w_q);
            f(&n("b_q"), &mut b.b_q);
            f(&n("w_k"), &mut b.w_k);
            f(&n("b_k"), &mut b.b_k);
            f(&n("w_v"), &mut b.w_v);
            f(&n("b_v"), &mut b.b_v);
            f(&n("w_o"), &mut b.w_o);
            f(&n("b_o"), &mut b.b_o);
            f(&n("ff_norm.gamma"), &mut b.ff_norm.gamma);
            f(&n("ff_norm.beta"), &mut b.ff_norm.beta);
            f(&n("w_ff1"), &mut b.w_ff1);
            f(&n("b_ff1"), &mut b.b_ff1);
            f(&n("w_ff2"), &mut b.w_ff2);
            f(&n("b_ff2"), &mut b.b_ff2);
        }
        f("encoder.final_norm.gamma", &mut self.final_norm.gamma);
        f("encoder.final_norm.beta", &mut self.final_norm.beta);
    }

    /// Register every parameter on a tape as a gradient-requiring leaf.
    pub fn lease(&self, tape: &mut Tape<F>) -> EncoderParams<F> {
        let mut leased = self.clone();
        leased.visit_mut(&mut |_, t| *t = tape.watch(t));
        leased
    }
}

/// The pair extracted from one encoder pass: instance vector `[d_model]`
/// and per-patch matrix `[num_patches x d_model]`.
#[derive(Debug, Clone)]
pub struct DualEmbedding<F: Scalar> {
    pub z_i: Tensor<F>,
    pub z_t: Tensor<F>,
}

fn glorot<F: Scalar>(rng: &mut RngStream, out_dim: usize, in_dim: usize) -> Tensor<F> {
    let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data = (0..out_dim * in_dim)
        .map(|_| F::from_f64(rng.range(-a, a)))
        .collect();
    Tensor::from_vec(vec![out_dim, in_dim], data)
}

fn small_normal<F: Scalar>(rng: &mut RngStream, shape: Vec<usize>, sigma: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(sigma * rng.normal())).collect();
    Tensor::from_vec(shape, data)
}

fn identity_norm<F: Scalar>(d: usize) -> NormParams<F> {
    NormParams {
        gamma: Tensor::filled(vec![d], F::one()),
        beta: Tensor::zeros(vec![d]),
    }
}

/// Fresh parameters: Glorot-uniform weight matrices, zero biases, identity
/// norms, and small-normal (sigma 0.02) instance token and positional
/// encoding. Deterministic per seed.
pub fn init_encoder<F: Scalar>(
    config: &EncoderConfig,
    seed: u64,
) -> Result<EncoderParams<F>, EncoderError> {
    config.validate()?;
    let mut rng = RngStream::new(seed);
    let d = config.d_model;
    let width = config.token_width();
    let w_token = glorot(&mut rng, d, width);
    let pe = small_normal(&mut rng, vec![config.seq_len(), d], 0.02);
    let cls_token = small_normal(&mut rng, vec![width], 0.02);
    let blocks = (0..config.blocks)
        .map(|_| BlockParams {
            attn_norm: identity_norm(d),
            w_q: glorot(&mut rng, d, d),
            b_q: Tensor::zeros(vec![d]),
            w_k: glorot(&mut rng, d, d),
            b_k: Tensor::zeros(vec![d]),
            w_v: glorot(&mut rng, d, d),
            b_v: Tensor::zeros(vec![d]),
            w_o: glorot(&mut rng, d, d),
            b_o: Tensor::zeros(vec![d]),
            ff_norm: identity_norm(d),
            w_ff1: glorot(&mut rng, config.d_ff, d),
            b_ff1: Tensor::zeros(vec![config.d_ff]),
            w_ff2: glorot(&mut rng, d, config.d_ff),
            b_ff2: Tensor::zeros(vec![d]),
        })
        .collect();
    Ok(EncoderParams {
        w_token,
        pe,
        cls_token,
        blocks,
        final_norm: identity_norm(d),
    })
}

/// Prepend the instance token: row 0 is the token, rows `1..` are the
/// patches unchanged.
pub fn build_encoder_input<F: Scalar>(
    tape: &mut Tape<F>,
    x_patched: &Tensor<F>,
    params: &EncoderParams<F>,
) -> Result<Tensor<F>, EncoderError> {
    let width = params.cls_token.numel();
    if x_patched.shape().len() != 2 || x_patched.shape()[1] != width {
        return Err(EncoderError::Tensor(TensorError::ShapeMismatch {
            op: "build_encoder_input",
            lhs: x_patched.shape().to_vec(),
            rhs: vec![width],
        }));
    }
    let cls_row = tape.reshape(&params.cls_token, vec![1, width])?;
    Ok(tape.concat(&[&cls_row, x_patched], 0)?)
}

/// Attention visibility: the instance row attends to everything; patch rows
/// attend to every patch row (fully bidirectional) but not to the instance
/// row, so no reconstruction gradient can reach the instance token.
fn visibility_mask(rows: usize) -> Vec<bool> {
    let mut mask = vec![true; rows * rows];
    for q in 1..rows {
        mask[q * rows] = false;
    }
    mask
}

/// One full encoder pass over `[seq_len x token_width]`, returning
/// `[seq_len x d_model]`. `training` gates every dropout site.
pub fn encode<F: Scalar>(
    tape: &mut Tape<F>,
    x_enc_in: &Tensor<F>,
    params: &EncoderParams<F>,
    config: &EncoderConfig,
    training: bool,
    rng: &mut RngStream,
) -> Result<Tensor<F>, EncoderError> {
    let rows = config.seq_len();
    if x_enc_in.shape() != [rows, config.token_width()] {
        return Err(EncoderError::Tensor(TensorError::ShapeMismatch {
            op: "encode",
            lhs: x_enc_in.shape().to_vec(),
            rhs: vec![rows, config.token_width()],
        }));
    }
    let d = config.d_model;
    let heads = config.heads;
    let dh = d / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mask = visibility_mask(rows);

    // token projection + positional encoding + embedding dropout
    let wt = tape.transpose(&params.w_token)?;
    let projected = tape.matmul(x_enc_in, &wt)?;
    let mut h = tape.add(&projected, &params.pe)?;
    h = tape.dropout(&h, config.dropout_embed, training, rng)?;

    for block in &params.blocks {
        // attention sublayer, pre-norm
        let a_in = tape.layer_norm(&h, &block.attn_norm.gamma, &block.attn_norm.beta, eps::LAYER_NORM)?;
        let q = tape.linear(&a_in, &block.w_q, &block.b_q)?;
        let k = tape.linear(&a_in, &block.w_k, &block.b_k)?;
        let v = tape.linear(&a_in, &block.w_v, &block.b_v)?;
        let mut head_ctx = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice(&q, 1, hd * dh, dh)?;
            let kh = tape.slice(&k, 1, hd * dh, dh)?;
            let vh = tape.slice(&v, 1, hd * dh, dh)?;
            let kt = tape.transpose(&kh)?;
            let scores = tape.matmul(&qh, &kt)?;
            let scaled = tape.scale(&scores, scale);
            let weights = tape.softmax_masked(&scaled, 1, &mask)?;
            let weights = tape.dropout(&weights, config.dropout_attn, training, rng)?;
            head_ctx.push(tape.matmul(&weights, &vh)?);
        }
        let ctx_refs: Vec<&Tensor<F>> = head_ctx.iter().collect();
        let ctx = tape.concat(&ctx_refs, 1)?;
        let attn_out = tape.linear(&ctx, &block.w_o, &block.b_o)?;
        h = tape.add(&h, &attn_out)?;

        // feed-forward sublayer, pre-norm
        let f_in = tape.layer_norm(&h, &block.ff_norm.gamma, &block.ff_norm.beta, eps::LAYER_NORM)?;
        let hidden = tape.linear(&f_in, &block.w_ff1, &block.b_ff1)?;
        let hidden = tape.gelu(&hidden);
        let hidden = tape.dropout(&hidden, config.dropout_ff, training, rng)?;
        let ff_out = tape.linear(&hidden, &block.w_ff2, &block.b_ff2)?;
        h = tape.add(&h, &ff_out)?;
    }

    Ok(tape.layer_norm(&h, &params.final_norm.gamma, &params.final_norm.beta, eps::LAYER_NORM)?)
}

/// Prepend the instance token, encode, and split — the per-window pipeline
/// used by both pretext training and downstream evaluation.
pub fn forward_window<F: Scalar>(
    tape: &mut Tape<F>,
    x_patched: &Tensor<F>,
    params: &EncoderParams<F>,
    config: &EncoderConfig,
    training: bool,
    rng: &mut RngStream,
) -> Result<DualEmbedding<F>, EncoderError> {
    let x_in = build_encoder_input(tape, x_patched, params)?;
    let z = encode(tape, &x_in, params, config, training, rng)?;
    split_embeddings(tape, &z)
}

/// Split encoder output into the instance vector (row 0) and the patch
/// matrix (rows `1..`). Gradients route back to the corresponding rows.
pub fn split_embeddings<F: Scalar>(
    tape: &mut Tape<F>,
    z: &Tensor<F>,
) -> Result<DualEmbedding<F>, EncoderError> {
    if z.shape().len() != 2 || z.shape()[0] < 2 {
        return Err(EncoderError::TooFewRows(z.shape().first().copied().unwrap_or(0)));
    }
    let rows = z.shape()[0];
    let z_i = tape.row(z, 0)?;
    let z_t = tape.slice(z, 0, 1, rows - 1)?;
    Ok(DualEmbedding { z_i, z_t })
}

/// Pooling alternatives to the instance token, used by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMethod {
    /// Last patch embedding.
    Last,
    /// Global average over the time axis.
    Gap,
    /// Row-major flatten of all patch embeddings.
    All,
}

impl PoolMethod {
    pub fn name(self) -> &'static str {
        match self {
            PoolMethod::Last => "last",
            PoolMethod::Gap => "gap",
            PoolMethod::All => "all",
        }
    }
}

/// How the instance embedding is derived: from the instance token (the
/// default) or by pooling the patch embeddings (ablation arms).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingMode {
    Cls,
    Pooled(PoolMethod),
}

impl EmbeddingMode {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingMode::Cls => "cls",
            EmbeddingMode::Pooled(p) => p.name(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cls" => Some(EmbeddingMode::Cls),
            "last" => Some(EmbeddingMode::Pooled(PoolMethod::Last)),
            "gap" => Some(EmbeddingMode::Pooled(PoolMethod::Gap)),
            "all" => Some(EmbeddingMode::Pooled(PoolMethod::All)),
            _ => None,
        }
    }

    /// Instance-embedding width for a given encoder geometry.
    pub fn dim(self, config: &EncoderConfig) -> usize {
        match self {
            EmbeddingMode::Pooled(PoolMethod::All) => config.num_patches() * config.d_model,
            _ => config.d_model,
        }
    }
}

/// Reduce `[num_patches x d_model]` to a single instance embedding.
pub fn pool<F: Scalar>(
    tape: &mut Tape<F>,
    z_t: &Tensor<F>,
    method: PoolMethod,
) -> Result<Tensor<F>, EncoderError> {
    let rows = z_t.shape()[0];
    if rows == 0 {
        return Err(EncoderError::TooFewRows(0));
    }
    Ok(match method {
        PoolMethod::Last => tape.row(z_t, rows - 1)?,
        PoolMethod::Gap => tape.mean_axis(z_t, 0)?,
        PoolMethod::All => tape.reshape(z_t, vec![z_t.numel()])?,
    })
}

/// Mean pairwise cosine similarity of `n` embeddings of width `d`. Values
/// near 1 mean the set has collapsed into a narrow cone.
pub fn anisotropy_score(embeddings: &[f64], n: usize, d: usize) -> Result<f64, EncoderError> {
    if n < 2 {
        return Err(EncoderError::TooFewEmbeddings(n));
    }
    debug_assert_eq!(embeddings.len(), n * d);
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            embeddings[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(eps::COSINE)
        })
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = (0..d).map(|f| embeddings[i * d + f] * embeddings[j * d + f]).sum();
            total += dot / (norms[i] * norms[j]);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

#[cfg(test)]
mod tests;
