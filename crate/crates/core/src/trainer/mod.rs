//! AdamW optimization, the joint pretraining loop, early stopping, and
//! checkpointing.
//!
//! Determinism contract: given (config, data, seed) every loss value is
//! reproducible bit-for-bit at a fixed precision. All randomness flows from
//! the config seed through named streams (`data-shuffle`, `dropout`, `init`),
//! gradient maps iterate in sorted parameter order, and resuming from a
//! training checkpoint restores the optimizer, both rng streams, and the
//! early-stopping state exactly.

mod checkpoint;

pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint};

use crate::data::{instance_normalize, NormStats, PatchConfig};
use crate::encoder::{init_encoder, EncoderConfig, EncoderError, EncoderParams};
use crate::pretext::{pretext_losses, LossBreakdown, PretextHeads, PretextOptions};
use crate::rng::{stream_seed, RngStream};
use crate::scalar::{eps, Scalar};
use crate::tensor::{Gradients, Tape, Tensor, TensorError};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("pretraining needs batch_size >= 2 and non-empty data, got {0}")]
    DegenerateBatch(usize),
    #[error("no gradient recorded for parameter {param}")]
    MissingGradient { param: String },
    #[error("invalid train config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint format version {found} is newer than supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint checksum mismatch (truncated or corrupt file)")]
    CorruptChecksum,
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("checkpoint precision does not match requested precision")]
    PrecisionMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Consecutive epochs without validation improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs: 50,
            lambda: 1.0,
            seed: 42,
            patience: 10,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 || self.weight_decay < 0.0 || self.lambda < 0.0 {
            return Err(TrainError::ConfigInvalid(
                "lr must be > 0; weight_decay and lambda must be >= 0".into(),
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::ConfigInvalid(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(TrainError::ConfigInvalid(
                "batch_size and epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Anything with a named, decay-flagged parameter registry.
pub trait ParamModel<F: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<F>, bool));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>));
}

/// Encoder plus both pretext heads: the unit that pretraining optimizes and
/// checkpoints persist.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub encoder: EncoderParams<F>,
    pub heads: PretextHeads<F>,
}

impl<F: Scalar> Model<F> {
    /// Fresh model; `instance_dim` is the contrastive embedding width (the
    /// model width, except in the flatten-pooling ablation).
    pub fn init(config: &EncoderConfig, instance_dim: usize, seed: u64) -> Result<Self, EncoderError> {
        let encoder = init_encoder(config, seed)?;
        let mut rng = RngStream::new(stream_seed(seed, "heads"));
        let heads = PretextHeads::init(config.token_width(), config.d_model, instance_dim, &mut rng)?;
        Ok(Model { encoder, heads })
    }

    pub fn lease(&self, tape: &mut Tape<F>) -> Model<F> {
        Model {
            encoder: self.encoder.lease(tape),
            heads: self.heads.lease(tape),
        }
    }

    /// Concatenated little-endian bytes of every parameter, for frozen-
    /// encoder assertions and artifact fingerprints.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.visit(&mut |_, t, _| {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        });
        out
    }
}

impl<F: Scalar> ParamModel<F> for Model<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<F>, bool)) {
        self.encoder.visit(&mut |n, t, d| f(n, t, d));
        self.heads.visit(&mut |n, t, d| f(n, t, d));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.encoder.visit_mut(&mut |n, t| f(n, t));
        self.heads.visit_mut(&mut |n, t| f(n, t));
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F: Scalar> {
    pub t: u64,
    pub m: BTreeMap<String, Vec<F>>,
    pub v: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn zeros(model: &impl ParamModel<F>) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        model.visit(&mut |name, t, _| {
            m.insert(name.to_string(), vec![F::zero(); t.numel()]);
            v.insert(name.to_string(), vec![F::zero(); t.numel()]);
        });
        OptimizerState { t: 0, m, v }
    }
}

/// Gradients keyed by registry name, in sorted (deterministic) order.
pub fn collect_grads<F: Scalar>(
    leased: &impl ParamModel<F>,
    grads: &Gradients<F>,
) -> BTreeMap<String, Tensor<F>> {
    let mut out = BTreeMap::new();
    leased.visit(&mut |name, t, _| {
        let g = grads.wrt(t).expect("leased parameter missing from tape");
        out.insert(name.to_string(), g);
    });
    out
}

/// Scale all gradients so their global L2 norm does not exceed `clip`.
pub fn clip_global_norm<F: Scalar>(grads: &mut BTreeMap<String, Tensor<F>>, clip: f64) {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            let v = v.as_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let scale = F::from_f64(clip / norm);
        for g in grads.values_mut() {
            let mut data = g.data().to_vec();
            for v in data.iter_mut() {
                *v *= scale;
            }
            *g = Tensor::from_vec(g.shape().to_vec(), data);
        }
    }
}

/// One AdamW update.
///
/// Decoupled weight decay (`theta *= 1 - lr*wd`, before the moment update)
/// applies only to parameters flagged for decay — weight matrices, never
/// norm affines, biases, the instance token, or the positional encoding.
/// Aborts without touching anything if any gradient is non-finite.
pub fn adamw_step<F: Scalar>(
    model: &mut impl ParamModel<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut OptimizerState<F>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let mut bad: Option<String> = None;
    model.visit(&mut |name, _, _| {
        if bad.is_none() {
            match grads.get(name) {
                None => bad = Some(name.to_string()),
                Some(g) if !g.is_finite() => bad = Some(name.to_string()),
                _ => {}
            }
        }
    });
    if let Some(param) = bad {
        if grads.contains_key(&param) {
            return Err(TrainError::NonFiniteGradient { param });
        }
        return Err(TrainError::MissingGradient { param });
    }

    state.t += 1;
    let t = state.t as i32;
    let lr = F::from_f64(cfg.lr);
    let beta1 = F::from_f64(cfg.beta1);
    let beta2 = F::from_f64(cfg.beta2);
    let one = F::one();
    let bias1 = one - beta1.powi(t);
    let bias2 = one - beta2.powi(t);
    let epsf = F::from_f64(cfg.adam_eps);
    let decay_factor = F::from_f64(1.0 - cfg.lr * cfg.weight_decay);

    let mut decay_flags = BTreeMap::new();
    model.visit(&mut |name, _, decay| {
        decay_flags.insert(name.to_string(), decay);
    });

    model.visit_mut(&mut |name, tensor| {
        let g = grads.get(name).unwrap();
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        let decay = decay_flags[name] && cfg.weight_decay > 0.0;
        tensor.update_data(|theta| {
            for i in 0..theta.len() {
                if decay {
                    theta[i] *= decay_factor;
                }
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (one - beta1) * gi;
                v[i] = beta2 * v[i] + (one - beta2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + epsf);
            }
        });
    });
    Ok(())
}

/// Normalize a raw window and patch it into encoder input tokens.
pub fn prepare_window<F: Scalar>(
    x: &[f64],
    t: usize,
    channels: usize,
    patch_cfg: &PatchConfig,
) -> Result<(Tensor<F>, NormStats), TrainError> {
    let (normed, stats) = instance_normalize(x, t, channels, eps::INSTANCE_NORM);
    let tokens = crate::data::patch(&normed, t, channels, patch_cfg)
        .map_err(|e| TrainError::ConfigInvalid(e.to_string()))?;
    let t_p = patch_cfg.num_patches(t);
    let width = patch_cfg.token_width(channels);
    Ok((Tensor::from_f64_slice(vec![t_p, width], &tokens), stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub losses: LossBreakdown,
}

/// Complete training state: everything needed to continue a run exactly as
/// if it had never stopped.
#[derive(Debug, Clone)]
pub struct TrainState<F: Scalar> {
    pub model: Model<F>,
    pub best_model: Model<F>,
    pub best_val: f64,
    pub epochs_since_improve: usize,
    pub completed_epochs: usize,
    pub optimizer: OptimizerState<F>,
    /// (seed, counter) of the shuffle stream.
    pub shuffle_rng: (u64, u64),
    /// (seed, counter) of the dropout stream.
    pub dropout_rng: (u64, u64),
    /// (seed, counter) of the augmentation stream.
    pub augment_rng: (u64, u64),
    pub history: Vec<EpochRecord>,
}

/// Regenerates the patched input of one training sample with a fresh
/// augmentation draw. Used only by the augmentation ablation; the default
/// training path feeds the encoder unaugmented windows.
pub type AugmentFn<'a, F> = &'a dyn Fn(usize, &mut RngStream) -> Result<Tensor<F>, TrainError>;

pub struct PretrainOutput<F: Scalar> {
    /// Parameters of the best validation epoch.
    pub model: Model<F>,
    pub history: Vec<EpochRecord>,
    /// Full state at the moment training stopped (for resuming).
    pub state: TrainState<F>,
}

/// Joint pretraining over both pretext tasks.
///
/// Per epoch: seeded shuffle, batches of `batch_size` (a trailing batch of 1
/// is dropped — the contrastive batch norm needs two samples), two-view
/// forward, combined loss, backward, clip, AdamW. Validation runs without
/// gradients, dropout kept on (the two views must differ for the contrastive
/// term to be meaningful) and batch norm on running statistics. Early stop
/// on validation total loss; the best epoch's parameters are returned.
pub fn pretrain<F: Scalar>(
    train_xs: &[Tensor<F>],
    val_xs: &[Tensor<F>],
    config: &EncoderConfig,
    train_cfg: &TrainConfig,
    options: &PretextOptions,
    augment: Option<AugmentFn<F>>,
    resume: Option<TrainState<F>>,
) -> Result<PretrainOutput<F>, TrainError> {
    train_cfg.validate()?;
    config.validate()?;
    if train_cfg.batch_size < 2 || train_xs.len() < 2 {
        return Err(TrainError::DegenerateBatch(train_cfg.batch_size.min(train_xs.len())));
    }

    let mut state = match resume {
        Some(s) => s,
        None => {
            let instance_dim = options.embedding_mode.dim(config);
            let model = Model::init(config, instance_dim, stream_seed(train_cfg.seed, "init"))?;
            let optimizer = OptimizerState::zeros(&model);
            TrainState {
                best_model: model.clone(),
                model,
                best_val: f64::INFINITY,
                epochs_since_improve: 0,
                completed_epochs: 0,
                optimizer,
                shuffle_rng: (stream_seed(train_cfg.seed, "data-shuffle"), 0),
                dropout_rng: (stream_seed(train_cfg.seed, "dropout"), 0),
                augment_rng: (stream_seed(train_cfg.seed, "augment"), 0),
                history: Vec::new(),
            }
        }
    };
    let mut shuffle_rng = RngStream::restore(state.shuffle_rng.0, state.shuffle_rng.1);
    let mut dropout_rng = RngStream::restore(state.dropout_rng.0, state.dropout_rng.1);
    let mut augment_rng = RngStream::restore(state.augment_rng.0, state.augment_rng.1);

    for epoch in state.completed_epochs..train_cfg.epochs {
        let mut order: Vec<usize> = (0..train_xs.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut batch_losses: Vec<(LossBreakdown, usize)> = Vec::new();
        for (batch_idx, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let xs: Vec<Tensor<F>> = match augment {
                None => chunk.iter().map(|&i| train_xs[i].clone()).collect(),
                Some(f) => chunk
                    .iter()
                    .map(|&i| f(i, &mut augment_rng))
                    .collect::<Result<_, _>>()?,
            };
            let mut tape = Tape::new();
            let leased = state.model.lease(&mut tape);
            let step = pretext_losses(
                &mut tape,
                &xs,
                &leased.encoder,
                &leased.heads,
                &mut state.model.heads.bn_stats,
                config,
                options,
                &mut dropout_rng,
            )?;
            if !step.breakdown.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            let grad_map = tape.backward(&step.total)?;
            let mut grads = collect_grads(&leased, &grad_map);
            if let Some(clip) = train_cfg.clip_norm {
                clip_global_norm(&mut grads, clip);
            }
            adamw_step(&mut state.model, &grads, &mut state.optimizer, train_cfg)?;
            batch_losses.push((step.breakdown, chunk.len()));
        }
        state.history.push(EpochRecord {
            epoch,
            split: Split::Train,
            losses: LossBreakdown::weighted_mean(&batch_losses),
        });

        // validation pass: no gradients, dropout on, batch norm frozen
        let val_options = PretextOptions { bn_training: false, ..*options };
        let mut val_losses: Vec<(LossBreakdown, usize)> = Vec::new();
        for chunk in (0..val_xs.len()).collect::<Vec<_>>().chunks(train_cfg.batch_size) {
            if chunk.is_empty() {
                continue;
            }
            let xs: Vec<Tensor<F>> = chunk.iter().map(|&i| val_xs[i].clone()).collect();
            let mut tape = Tape::inference();
            let step = pretext_losses(
                &mut tape,
                &xs,
                &state.model.encoder,
                &state.model.heads,
                &mut state.model.heads.bn_stats.clone(),
                config,
                &val_options,
                &mut dropout_rng,
            )?;
            val_losses.push((step.breakdown, chunk.len()));
        }
        let val_mean = LossBreakdown::weighted_mean(&val_losses);
        state.history.push(EpochRecord {
            epoch,
            split: Split::Val,
            losses: val_mean,
        });

        state.completed_epochs = epoch + 1;
        if val_mean.total < state.best_val {
            state.best_val = val_mean.total;
            state.best_model = state.model.clone();
            state.epochs_since_improve = 0;
        } else {
            state.epochs_since_improve += 1;
            if state.epochs_since_improve >= train_cfg.patience {
                break;
            }
        }
    }

    state.shuffle_rng = (shuffle_rng.seed(), shuffle_rng.counter());
    state.dropout_rng = (dropout_rng.seed(), dropout_rng.counter());
    state.augment_rng = (augment_rng.seed(), augment_rng.counter());
    Ok(PretrainOutput {
        model: state.best_model.clone(),
        history: state.history.clone(),
        state,
    })
}
