//! Downstream protocols: frozen-encoder linear probes for forecasting and
//! classification, semi-supervised fine-tuning, metric computation, and
//! denormalization back to original units.
//!
//! Linear probes take the encoder by shared reference: the borrow checker
//! itself enforces the frozen contract — only the probe head is optimized.
//! Forecasting probes read the flattened timestamp-level embedding; the
//! classifier reads the instance-level embedding (or a pooled variant in
//! the ablation arms). Probe heads train on normalized targets; predictions
//! are denormalized with each window's stored statistics before metrics.

mod metrics;

pub use metrics::{
    argmax_lowest, compute_classification_metrics, compute_forecast_metrics,
    ClassificationMetrics,
};

use crate::data::{NormStats, Target, WindowSample};
use crate::encoder::{
    forward_window, pool, EmbeddingMode, EncoderConfig, EncoderError, EncoderParams,
};
use crate::rng::{stream_seed, RngStream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::trainer::{
    adamw_step, collect_grads, prepare_window, Model, OptimizerState, ParamModel, TrainConfig,
    TrainError,
};
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{what} {label} out of range for {classes} classes")]
    LabelOutOfRange {
        what: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("prediction has {channels} channels but stats carry {stats}")]
    StatsMismatch { channels: usize, stats: usize },
    #[error("no labeled samples available for fine-tuning")]
    NoLabeledSamples,
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("expected a {expected} sample")]
    WrongTarget { expected: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Forecast,
    Classify,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Forecast => "forecast",
            TaskKind::Classify => "classify",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "forecast" => Some(TaskKind::Forecast),
            "classify" => Some(TaskKind::Classify),
            _ => None,
        }
    }
}

/// One evaluation's result, serialized as a flat JSON document and appended
/// to the run ledger.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub task: String,
    pub dataset_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub label_fraction: f64,
    /// "frozen-probe", "pretrained", or "random".
    pub init_mode: String,
    pub embedding_mode: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Probe / fine-tune optimization settings.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 1e-3,
            epochs: 100,
            batch_size: 32,
            patience: 10,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    fn optimizer_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: 0.0,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            patience: self.patience,
            clip_norm: None,
            ..Default::default()
        }
    }
}

/// Linear map over the flattened timestamp-level embedding.
#[derive(Debug, Clone)]
pub struct ForecastHead<F: Scalar> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> ForecastHead<F> {
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut RngStream) -> Self {
        let a = (6.0 / (out_dim + in_dim) as f64).sqrt();
        ForecastHead {
            w: Tensor::from_vec(
                vec![out_dim, in_dim],
                (0..out_dim * in_dim).map(|_| F::from_f64(rng.range(-a, a))).collect(),
            ),
            b: Tensor::zeros(vec![out_dim]),
        }
    }
}

impl<F: Scalar> ParamModel<F> for ForecastHead<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<F>, bool)) {
        f("forecast_head.w", &self.w, true);
        f("forecast_head.b", &self.b, false);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        f("forecast_head.w", &mut self.w);
        f("forecast_head.b", &mut self.b);
    }
}

/// Linear map over the instance-level embedding.
#[derive(Debug, Clone)]
pub struct ClassifierHead<F: Scalar> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> ClassifierHead<F> {
    pub fn init(classes: usize, in_dim: usize, rng: &mut RngStream) -> Self {
        let a = (6.0 / (classes + in_dim) as f64).sqrt();
        ClassifierHead {
            w: Tensor::from_vec(
                vec![classes, in_dim],
                (0..classes * in_dim).map(|_| F::from_f64(rng.range(-a, a))).collect(),
            ),
            b: Tensor::zeros(vec![classes]),
        }
    }
}

impl<F: Scalar> ParamModel<F> for ClassifierHead<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<F>, bool)) {
        f("classifier_head.w", &self.w, true);
        f("classifier_head.b", &self.b, false);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        f("classifier_head.w", &mut self.w);
        f("classifier_head.b", &mut self.b);
    }
}

/// Map normalized predictions back to original units with the window's
/// statistics: `pred * std + mean` per channel.
pub fn denormalize(pred_norm: &[f64], channels: usize, stats: &NormStats) -> Result<Vec<f64>, EvalError> {
    if stats.mean.len() != channels || stats.std.len() != channels {
        return Err(EvalError::StatsMismatch { channels, stats: stats.mean.len() });
    }
    Ok(pred_norm
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % channels;
            v * stats.std[c] + stats.mean[c]
        })
        .collect())
}

/// Frozen-encoder embedding of one window: eval mode, no tape recording.
fn embed_window<F: Scalar>(
    encoder: &EncoderParams<F>,
    config: &EncoderConfig,
    sample: &WindowSample,
) -> Result<(crate::encoder::DualEmbedding<F>, NormStats), EvalError> {
    let (x_patched, stats) = prepare_window::<F>(&sample.x, sample.t, sample.channels, &config.patch)?;
    let mut tape = Tape::inference();
    let mut rng = RngStream::new(0); // unused: dropout is off in eval mode
    let dual = forward_window(&mut tape, &x_patched, encoder, config, false, &mut rng)?;
    Ok((dual, stats))
}

/// Eval-mode instance embeddings for a set of windows.
pub fn instance_embeddings<F: Scalar>(
    encoder: &EncoderParams<F>,
    config: &EncoderConfig,
    samples: &[WindowSample],
    mode: EmbeddingMode,
) -> Result<Vec<Vec<f64>>, EvalError> {
    samples
        .iter()
        .map(|s| {
            let (dual, _) = embed_window(encoder, config, s)?;
            let v = match mode {
                EmbeddingMode::Cls => dual.z_i,
                EmbeddingMode::Pooled(m) => {
                    let mut tape = Tape::inference();
                    pool(&mut tape, &dual.z_t, m)?
                }
            };
            Ok(v.to_f64_vec())
        })
        .collect()
}

/// Stack per-sample feature vectors `idx` into a `[batch x feat]` tensor.
fn gather_rows<F: Scalar>(features: &[Vec<F>], idx: &[usize]) -> Tensor<F> {
    let feat = features[0].len();
    let mut data = Vec::with_capacity(idx.len() * feat);
    for &i in idx {
        data.extend_from_slice(&features[i]);
    }
    Tensor::from_vec(vec![idx.len(), feat], data)
}

struct ForecastSet<F: Scalar> {
    features: Vec<Vec<F>>,   // flattened timestamp embeddings
    targets_norm: Vec<Vec<F>>, // normalized [h * channels]
    targets_raw: Vec<Vec<f64>>,
    stats: Vec<NormStats>,
    channels: usize,
}

fn forecast_set<F: Scalar>(
    encoder: &EncoderParams<F>,
    config: &EncoderConfig,
    samples: &[WindowSample],
) -> Result<ForecastSet<F>, EvalError> {
    let mut out = ForecastSet {
        features: Vec::with_capacity(samples.len()),
        targets_norm: Vec::with_capacity(samples.len()),
        targets_raw: Vec::with_capacity(samples.len()),
        stats: Vec::with_capacity(samples.len()),
        channels: samples.first().map(|s| s.channels).unwrap_or(1),
    };
    for s in samples {
        let Target::Forecast(y) = &s.target else {
            return Err(EvalError::WrongTarget { expected: "forecast" });
        };
        let (dual, stats) = embed_window(encoder, config, s)?;
        out.features.push(dual.z_t.data().to_vec());
        let y_norm: Vec<F> = y
            .iter()
            .enumerate()
            .map(|(i, &v)| F::from_f64((v - stats.mean[i % s.channels]) / stats.std[i % s.channels]))
            .collect();
        out.targets_norm.push(y_norm);
        out.targets_raw.push(y.clone());
        out.stats.push(stats);
    }
    Ok(out)
}

/// Train a linear head on frozen timestamp-level embeddings and report test
/// MSE/MAE in original units.
pub fn linear_eval_forecast<F: Scalar>(
    encoder: &EncoderParams<F>,
    config: &EncoderConfig,
    train: &[WindowSample],
    val: &[WindowSample],
    test: &[WindowSample],
    probe: &ProbeConfig,
) -> Result<(BTreeMap<String, f64>, Option<String>), EvalError> {
    if train.is_empty() {
        return Err(EvalError::EmptySplit("train"));
    }
    if test.is_empty() {
        return Err(EvalError::EmptySplit("test"));
    }
    let tr = forecast_set(encoder, config, train)?;
    let va = forecast_set(encoder, config, val)?;
    let te = forecast_set(encoder, config, test)?;
    let feat = tr.features[0].len();
    let out_dim = tr.targets_norm[0].len();

    let mut head: ForecastHead<F> =
        ForecastHead::init(out_dim, feat, &mut RngStream::new(stream_seed(probe.seed, "probe-init")));
    let mut opt = OptimizerState::zeros(&head);
    let opt_cfg = probe.optimizer_config();
    let mut shuffle = RngStream::new(stream_seed(probe.seed, "probe-shuffle"));

    let val_mse = |head: &ForecastHead<F>, set: &ForecastSet<F>| -> f64 {
        if set.features.is_empty() {
            return f64::INFINITY;
        }
        let mut tape = Tape::inference();
        let idx: Vec<usize> = (0..set.features.len()).collect();
        let x = gather_rows(&set.features, &idx);
        let y = gather_rows(&set.targets_norm, &idx);
        let pred = tape.linear(&x, &head.w, &head.b).unwrap();
        tape.mse(&pred, &y).unwrap().item().as_f64()
    };

    let mut best = head.clone();
    let mut best_val = f64::INFINITY;
    let mut since_improve = 0;
    for _epoch in 0..probe.epochs {
        let mut order: Vec<usize> = (0..tr.features.len()).collect();
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(probe.batch_size) {
            let mut tape = Tape::new();
            let mut leased = head.clone();
            leased.visit_mut(&mut |_, t| *t = tape.watch(t));
            let x = gather_rows(&tr.features, chunk);
            let y = gather_rows(&tr.targets_norm, chunk);
            let pred = tape.linear(&x, &leased.w, &leased.b)?;
            let loss = tape.mse(&pred, &y)?;
            let grads = tape.backward(&loss)?;
            let grads = collect_grads(&leased, &grads);
            adamw_step(&mut head, &grads, &mut opt, &opt_cfg)?;
        }
        let v = if va.features.is_empty() { val_mse(&head, &tr) } else { val_mse(&head, &va) };
        if v < best_val {
            best_val = v;
            best = head.clone();
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= probe.patience {
                break;
            }
        }
    }

    // test: predict, denormalize per window, score in original units
    let mut y_all = Vec::new();
    let mut p_all = Vec::new();
    let mut tape = Tape::inference();
    for i in 0..te.features.len() {
        let x = gather_rows(&te.features, &[i]);
        let pred = tape.linear(&x, &best.w, &best.b)?;
        let pred_norm: Vec<f64> = pred.to_f64_vec();
        let pred_raw = denormalize(&pred_norm, te.channels, &te.stats[i])?;
        p_all.extend(pred_raw);
        y_all.extend(te.targets_raw[i].iter().copied());
    }
    let (mse, mae) = compute_forecast_metrics(&y_all, &p_all)?;
    let mut m = BTreeMap::new();
    m.insert("mse".to_string(), mse);
    m.insert("mae".to_string(), mae);
    Ok((m, None))
}

struct ClassifySet<F: Scalar> {
    features: Vec<Vec<F>>,
    labels: Vec<usize>,
}

fn classify_set<F: Scalar>(
    encoder: &EncoderParams<F>,
    config: &EncoderConfig,
    samples: &[WindowSample],
    mode: EmbeddingMode,
) -> Result<ClassifySet<F>, EvalError> {
    let mut features = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let Target::Class(label) = s.target else {
            return Err(EvalError::WrongTarget { expected: "class" });
        };
        let (dual, _) = embed_window(encoder, config, s)?;
        let v = match mode {
            EmbeddingMode::Cls => dual.z_i,
            EmbeddingMode::Pooled(m) => {
                let mut tape = Tape::inference();
                pool(&mut tape, &dual.z_t, m)?
            }
        };
        features.push(v.data().to_vec());
        labels.push(label);
    }
    Ok(ClassifySet { features, labels })
}

fn head_accuracy<F: Scalar>(head: &ClassifierHead<F>, set: &ClassifySet<F>) -> f64 {
    if set.features.is_empty() {
        return 0.0;
    }
    let mut tape = Tape::inference();
    let idx: Vec<usize> = (0..set.features.len()).collect();
    let x = gather_rows(&set.features, &idx);
    let logits = tape.linear(&x, &head.w, &head.b).unwrap();
    let k = head.b.numel();
    let mut agree = 0;
    for (i, &label) in set.labels.iter().enumerate() {
        let row: Vec<f64> = logits.data()[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).collect();
        if argmax_lowest(&row) == label {
            agree += 1;
        }
    }
    agree as f64 / set.labels.len() as f64
}

/// Train a softmax probe on frozen instance-level embeddings and report test
/// accuracy, macro-F1, and kappa. A single-class test set reports kappa 0
/// with a warning flag.
#[allow(clippy::too_many_arguments)]
pub fn linear_eval_classify<F: Scalar>(
    encoder: &EncoderParams<F>,
    config: &EncoderConfig,
    train: &[WindowSample],
    val: &[WindowSample],
    test: &[WindowSample],
    classes: usize,
    mode: EmbeddingMode,
    probe: &ProbeConfig,
) -> Result<(BTreeMap<String, f64>, Option<String>), EvalError> {
    if train.is_empty() {
        return Err(EvalError::EmptySplit("train"));
    }
    if test.is_empty() {
        return Err(EvalError::EmptySplit("test"));
    }
    let tr = classify_set(encoder, config, train, mode)?;
    let va = classify_set(encoder, config, val, mode)?;
    let te = classify_set(encoder, config, test, mode)?;
    let feat = tr.features[0].len();

    let mut head: ClassifierHead<F> =
        ClassifierHead::init(classes, feat, &mut RngStream::new(stream_seed(probe.seed, "probe-init")));
    let mut opt = OptimizerState::zeros(&head);
    let opt_cfg = probe.optimizer_config();
    let mut shuffle = RngStream::new(stream_seed(probe.seed, "probe-shuffle"));

    let mut best = head.clone();
    let mut best_acc = -1.0;
    let mut since_improve = 0;
    for _epoch in 0..probe.epochs {
        let mut order: Vec<usize> = (0..tr.features.len()).collect();
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(probe.batch_size) {
            let mut tape = Tape::new();
            let mut leased = head.clone();
            leased.visit_mut(&mut |_, t| *t = tape.watch(t));
            let x = gather_rows(&tr.features, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| tr.labels[i]).collect();
            let logits = tape.linear(&x, &leased.w, &leased.b)?;
            let loss = tape.log_softmax_nll(&logits, &y)?;
            let grads = tape.backward(&loss)?;
            let grads = collect_grads(&leased, &grads);
            adamw_step(&mut head, &grads, &mut opt, &opt_cfg)?;
        }
        let acc = if va.features.is_empty() {
            head_accuracy(&head, &tr)
        } else {
            head_accuracy(&head, &va)
        };
        if acc > best_acc {
            best_acc = acc;
            best = head.clone();
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= probe.patience {
                break;
            }
        }
    }

    classification_report(&best, &te, classes)
}

fn classification_report<F: Scalar>(
    head: &ClassifierHead<F>,
    te: &ClassifySet<F>,
    classes: usize,
) -> Result<(BTreeMap<String, f64>, Option<String>), EvalError> {
    let mut tape = Tape::inference();
    let idx: Vec<usize> = (0..te.features.len()).collect();
    let x = gather_rows(&te.features, &idx);
    let logits = tape.linear(&x, &head.w, &head.b)?;
    let y_pred: Vec<usize> = (0..te.labels.len())
        .map(|i| {
            let row: Vec<f64> = logits.data()[i * classes..(i + 1) * classes]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            argmax_lowest(&row)
        })
        .collect();
    let computed = compute_classification_metrics(&te.labels, &y_pred, classes)?;
    let single_class = te.labels.windows(2).all(|w| w[0] == w[1]);
    let (kappa, warning) = if single_class && te.labels.len() > 1 {
        (0.0, Some("single-class test set: kappa reported as 0".to_string()))
    } else {
        (computed.kappa, None)
    };
    let mut m = BTreeMap::new();
    m.insert("acc".to_string(), computed.acc);
    m.insert("mf1".to_string(), computed.mf1);
    m.insert("kappa".to_string(), kappa);
    Ok((m, warning))
}

/// What fine-tuning optimizes on top of the encoder.
#[derive(Debug, Clone)]
pub enum TaskSpec {
    Forecast { horizon: usize },
    Classify { classes: usize },
}

/// Encoder plus task head trained jointly during fine-tuning.
#[derive(Debug, Clone)]
enum TaskHead<F: Scalar> {
    Forecast(ForecastHead<F>),
    Classify(ClassifierHead<F>),
}

#[derive(Debug, Clone)]
struct FineTuneModel<F: Scalar> {
    encoder: EncoderParams<F>,
    head: TaskHead<F>,
}

impl<F: Scalar> ParamModel<F> for FineTuneModel<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<F>, bool)) {
        self.encoder.visit(&mut |n, t, d| f(n, t, d));
        match &self.head {
            TaskHead::Forecast(h) => h.visit(f),
            TaskHead::Classify(h) => h.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.encoder.visit_mut(&mut |n, t| f(n, t));
        match &mut self.head {
            TaskHead::Forecast(h) => h.visit_mut(f),
            TaskHead::Classify(h) => h.visit_mut(f),
        }
    }
}

/// Semi-supervised fine-tuning: encoder and task head trained jointly on the
/// label-available samples only, from a pretrained encoder or from random
/// initialization (the supervised-only baseline arm).
#[allow(clippy::too_many_arguments)]
pub fn fine_tune<F: Scalar>(
    pretrained: Option<&Model<F>>,
    config: &EncoderConfig,
    task: &TaskSpec,
    train: &[WindowSample],
    val: &[WindowSample],
    test: &[WindowSample],
    mode: EmbeddingMode,
    probe: &ProbeConfig,
) -> Result<(BTreeMap<String, f64>, Option<String>), EvalError> {
    let labeled: Vec<&WindowSample> = train.iter().filter(|s| s.label_available).collect();
    if labeled.is_empty() {
        return Err(EvalError::NoLabeledSamples);
    }
    if test.is_empty() {
        return Err(EvalError::EmptySplit("test"));
    }

    let encoder = match pretrained {
        Some(m) => m.encoder.clone(),
        None => crate::encoder::init_encoder(config, stream_seed(probe.seed, "ft-rand-init"))?,
    };
    let mut head_rng = RngStream::new(stream_seed(probe.seed, "ft-head-init"));
    let head = match task {
        TaskSpec::Forecast { horizon } => {
            let feat = config.num_patches() * config.d_model;
            let out = horizon * config.channels;
            TaskHead::Forecast(ForecastHead::init(out, feat, &mut head_rng))
        }
        TaskSpec::Classify { classes } => {
            TaskHead::Classify(ClassifierHead::init(*classes, mode.dim(config), &mut head_rng))
        }
    };
    let mut model = FineTuneModel { encoder, head };
    let mut opt = OptimizerState::zeros(&model);
    let opt_cfg = probe.optimizer_config();
    let mut shuffle = RngStream::new(stream_seed(probe.seed, "ft-shuffle"));
    let mut dropout = RngStream::new(stream_seed(probe.seed, "ft-dropout"));

    // pre-patch all labeled windows once
    let prepared: Vec<(Tensor<F>, &WindowSample)> = labeled
        .iter()
        .map(|s| Ok((prepare_window::<F>(&s.x, s.t, s.channels, &config.patch)?.0, *s)))
        .collect::<Result<_, EvalError>>()?;

    let task_loss = |tape: &mut Tape<F>,
                     model: &FineTuneModel<F>,
                     batch: &[usize],
                     prepared: &[(Tensor<F>, &WindowSample)],
                     dropout: &mut RngStream,
                     training: bool|
     -> Result<Tensor<F>, EvalError> {
        let mut feats = Vec::with_capacity(batch.len());
        for &i in batch {
            let dual = forward_window(tape, &prepared[i].0, &model.encoder, config, training, dropout)?;
            let v = match (&model.head, mode) {
                (TaskHead::Forecast(_), _) => tape.reshape(&dual.z_t, vec![dual.z_t.numel()])?,
                (TaskHead::Classify(_), EmbeddingMode::Cls) => dual.z_i,
                (TaskHead::Classify(_), EmbeddingMode::Pooled(m)) => pool(tape, &dual.z_t, m)?,
            };
            feats.push(v);
        }
        let x = tape.stack_rows(&feats)?;
        match &model.head {
            TaskHead::Forecast(h) => {
                let mut targets = Vec::new();
                for &i in batch {
                    let s = prepared[i].1;
                    let Target::Forecast(y) = &s.target else {
                        return Err(EvalError::WrongTarget { expected: "forecast" });
                    };
                    let stats = crate::data::instance_normalize(
                        &s.x,
                        s.t,
                        s.channels,
                        crate::scalar::eps::INSTANCE_NORM,
                    )
                    .1;
                    targets.extend(y.iter().enumerate().map(|(j, &v)| {
                        F::from_f64((v - stats.mean[j % s.channels]) / stats.std[j % s.channels])
                    }));
                }
                let y = Tensor::from_vec(vec![batch.len(), targets.len() / batch.len()], targets);
                let pred = tape.linear(&x, &h.w, &h.b)?;
                Ok(tape.mse(&pred, &y)?)
            }
            TaskHead::Classify(h) => {
                let mut ys = Vec::with_capacity(batch.len());
                for &i in batch {
                    let Target::Class(label) = prepared[i].1.target else {
                        return Err(EvalError::WrongTarget { expected: "class" });
                    };
                    ys.push(label);
                }
                let logits = tape.linear(&x, &h.w, &h.b)?;
                Ok(tape.log_softmax_nll(&logits, &ys)?)
            }
        }
    };

    // early stop on the labeled validation loss when available
    let labeled_val: Vec<&WindowSample> = val.iter().filter(|s| s.label_available).collect();
    let val_prepared: Vec<(Tensor<F>, &WindowSample)> = labeled_val
        .iter()
        .map(|s| Ok((prepare_window::<F>(&s.x, s.t, s.channels, &config.patch)?.0, *s)))
        .collect::<Result<_, EvalError>>()?;

    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut since_improve = 0;
    for _epoch in 0..probe.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(probe.batch_size) {
            let mut tape = Tape::new();
            let mut leased = model.clone();
            leased.visit_mut(&mut |_, t| *t = tape.watch(t));
            let loss = task_loss(&mut tape, &leased, chunk, &prepared, &mut dropout, true)?;
            let grads = tape.backward(&loss)?;
            let mut grads = collect_grads(&leased, &grads);
            crate::trainer::clip_global_norm(&mut grads, 5.0);
            adamw_step(&mut model, &grads, &mut opt, &opt_cfg)?;
        }
        let v = {
            let eval_set = if val_prepared.is_empty() { &prepared } else { &val_prepared };
            let idx: Vec<usize> = (0..eval_set.len()).collect();
            let mut tape = Tape::inference();
            task_loss(&mut tape, &model, &idx, eval_set, &mut dropout, false)?
                .item()
                .as_f64()
        };
        if v < best_val {
            best_val = v;
            best = model.clone();
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= probe.patience {
                break;
            }
        }
    }

    // test metrics with the best model, eval mode
    match (&best.head, task) {
        (TaskHead::Forecast(h), TaskSpec::Forecast { .. }) => {
            let te = forecast_set(&best.encoder, config, test)?;
            let mut y_all = Vec::new();
            let mut p_all = Vec::new();
            let mut tape = Tape::inference();
            for i in 0..te.features.len() {
                let x = gather_rows(&te.features, &[i]);
                let pred = tape.linear(&x, &h.w, &h.b)?;
                let pred_raw = denormalize(&pred.to_f64_vec(), te.channels, &te.stats[i])?;
                p_all.extend(pred_raw);
                y_all.extend(te.targets_raw[i].iter().copied());
            }
            let (mse, mae) = compute_forecast_metrics(&y_all, &p_all)?;
            let mut m = BTreeMap::new();
            m.insert("mse".to_string(), mse);
            m.insert("mae".to_string(), mae);
            Ok((m, None))
        }
        (TaskHead::Classify(h), TaskSpec::Classify { classes }) => {
            let te = classify_set(&best.encoder, config, test, mode)?;
            classification_report(h, &te, *classes)
        }
        _ => unreachable!("head follows task"),
    }
}

#[cfg(test)]
mod tests;
