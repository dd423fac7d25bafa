//! Command implementations. Each command is generic over the element type
//! and dispatched once on the configured (or checkpoint-recorded) precision.

use crate::config::{AblateAxis, DataSource, Precision, RunConfig};
use crate::report::{
    append_ledger, write_embeddings_csv, write_loss_csv, write_report, LedgerRow, RunMeta,
};
use crate::{synth, CliError};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use timedrl_core::data::{
    augment, channel_independence_split, load_csv, make_windows, split_train_val_test, CsvSchema,
    Target, TimeSeriesDataset, WindowSample,
};
use timedrl_core::encoder::{anisotropy_score, EmbeddingMode, EncoderConfig, PoolMethod};
use timedrl_core::evaluation::{
    fine_tune, instance_embeddings, linear_eval_classify, linear_eval_forecast, MetricsReport,
    ProbeConfig, TaskKind, TaskSpec,
};
use timedrl_core::pretext::PretextOptions;
use timedrl_core::rng::{stream_seed, RngStream};
use timedrl_core::scalar::{Dtype, Scalar};
use timedrl_core::tensor::Tensor;
use timedrl_core::trainer::{
    checkpoint_dtype, load_checkpoint, prepare_window, pretrain, save_checkpoint, Checkpoint,
    PretrainOutput,
};

/// Train/val/test windows ready for the model, plus resolved geometry.
pub struct PreparedSplits {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    /// Effective channel count seen by the encoder (1 under channel
    /// independence).
    pub channels: usize,
    /// Window length seen by the encoder.
    pub window: usize,
    pub classes: usize,
    /// Fingerprint of the split (source ranges of all windows); identical
    /// across ablation arms by construction.
    pub split_hash: String,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<TimeSeriesDataset, CliError> {
    match cfg.data.source {
        DataSource::Synthetic => synth::generate(cfg.synthetic.as_ref().unwrap(), cfg.seed),
        DataSource::Csv => {
            let path = cfg.data.csv_path.as_ref().unwrap();
            let schema = CsvSchema {
                has_header: cfg.data.has_header,
                timestamp_column: cfg.data.timestamp_column.clone(),
                label_column: cfg.data.label_column.clone(),
                instance_length: cfg.data.instance_length,
            };
            Ok(load_csv(path, &schema)?)
        }
    }
}

/// Expand forecasting windows into per-channel pseudo-samples (each with a
/// single-channel target), ordered sample-major then channel.
fn expand_channel_independent(windows: Vec<WindowSample>) -> Vec<WindowSample> {
    let mut out = Vec::with_capacity(windows.len() * windows.first().map(|w| w.channels).unwrap_or(1));
    for w in windows {
        let c = w.channels;
        if c == 1 {
            out.push(w);
            continue;
        }
        let split_x = channel_independence_split(&w.x, 1, w.t, c);
        let Target::Forecast(y) = &w.target else {
            out.push(w);
            continue;
        };
        let h = y.len() / c;
        let split_y = channel_independence_split(y, 1, h, c);
        for ch in 0..c {
            out.push(WindowSample {
                x: split_x[ch * w.t..(ch + 1) * w.t].to_vec(),
                t: w.t,
                channels: 1,
                target: Target::Forecast(split_y[ch * h..(ch + 1) * h].to_vec()),
                label_available: w.label_available,
                source_range: w.source_range,
            });
        }
    }
    out
}

fn split_fingerprint(splits: [&[WindowSample]; 3]) -> String {
    let mut hasher = crc32fast::Hasher::new();
    for part in splits {
        hasher.update(&(part.len() as u64).to_le_bytes());
        for w in part {
            hasher.update(&(w.source_range.0 as u64).to_le_bytes());
            hasher.update(&(w.source_range.1 as u64).to_le_bytes());
        }
    }
    format!("{:08x}", hasher.finalize())
}

pub fn prepare_splits(cfg: &RunConfig) -> Result<PreparedSplits, CliError> {
    let ds = load_dataset(cfg)?;
    match cfg.task.kind {
        TaskKind::Classify if ds.labels.is_none() => {
            return Err(CliError::TaskMismatch(
                "classification task requires a labeled dataset".into(),
            ))
        }
        TaskKind::Forecast if ds.labels.is_some() => {
            return Err(CliError::TaskMismatch(
                "forecasting task requires an unlabeled series".into(),
            ))
        }
        _ => {}
    }
    let classes = match cfg.task.kind {
        TaskKind::Classify => match cfg.task.num_classes {
            Some(k) => k,
            None => ds.labels.as_ref().unwrap().iter().max().map(|&m| m + 1).unwrap_or(0),
        },
        TaskKind::Forecast => 0,
    };

    let split_seed = stream_seed(cfg.seed, "data-split");
    let (tr, va, te) = split_train_val_test(&ds, cfg.data.split_ratios, split_seed)?;
    let (t, h) = match cfg.task.kind {
        TaskKind::Forecast => (cfg.window_length, cfg.task.horizon),
        TaskKind::Classify => (
            ds.instance_length.ok_or_else(|| {
                CliError::Config("classification dataset missing instance_length".into())
            })?,
            0,
        ),
    };
    let mut train = make_windows(&tr, t, h, cfg.window_stride)?;
    let mut val = make_windows(&va, t, h, cfg.window_stride)?;
    let mut test = make_windows(&te, t, h, cfg.window_stride)?;

    let mut channels = ds.channels;
    if cfg.data.channel_independence && cfg.task.kind == TaskKind::Forecast && channels > 1 {
        train = expand_channel_independent(train);
        val = expand_channel_independent(val);
        test = expand_channel_independent(test);
        channels = 1;
    }

    let split_hash = split_fingerprint([&train, &val, &test]);
    Ok(PreparedSplits {
        train,
        val,
        test,
        channels,
        window: t,
        classes,
        split_hash,
    })
}

pub fn encoder_config(cfg: &RunConfig, channels: usize, window: usize) -> EncoderConfig {
    EncoderConfig {
        d_model: cfg.encoder.d_model,
        blocks: cfg.encoder.blocks,
        heads: cfg.encoder.heads,
        d_ff: cfg.encoder.d_ff,
        dropout_embed: cfg.encoder.dropout_embed,
        dropout_attn: cfg.encoder.dropout_attn,
        dropout_ff: cfg.encoder.dropout_ff,
        patch: cfg.patch,
        channels,
        window,
    }
}

fn patched_tensors<F: Scalar>(
    samples: &[WindowSample],
    enc: &EncoderConfig,
) -> Result<Vec<Tensor<F>>, CliError> {
    samples
        .iter()
        .map(|s| Ok(prepare_window::<F>(&s.x, s.t, s.channels, &enc.patch)?.0))
        .collect()
}

fn checkpoint_meta(cfg: &RunConfig, prepared: &PreparedSplits, arm: Option<&str>) -> Vec<(String, String)> {
    let mut meta = vec![
        ("arm".to_string(), arm.unwrap_or("").to_string()),
        ("channel_independence".to_string(), cfg.data.channel_independence.to_string()),
        ("classes".to_string(), prepared.classes.to_string()),
        ("config_hash".to_string(), cfg.config_hash.clone()),
        ("dataset".to_string(), cfg.dataset_id.clone()),
        ("horizon".to_string(), cfg.task.horizon.to_string()),
        ("pooling".to_string(), cfg.embedding_mode.name().to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("split_hash".to_string(), prepared.split_hash.clone()),
        ("task".to_string(), cfg.task.kind.name().to_string()),
    ];
    meta.sort();
    meta
}

/// Shared pretraining path: used by `pretrain` and per ablation arm.
#[allow(clippy::too_many_arguments)]
fn pretrain_arm<F: Scalar>(
    cfg: &RunConfig,
    prepared: &PreparedSplits,
    enc: &EncoderConfig,
    options: &PretextOptions,
    trainer_seed: u64,
    augment_method: Option<timedrl_core::data::AugmentMethod>,
) -> Result<PretrainOutput<F>, CliError> {
    let train_xs = patched_tensors::<F>(&prepared.train, enc)?;
    let val_xs = patched_tensors::<F>(&prepared.val, enc)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = trainer_seed;
    train_cfg.lambda = options.lambda;

    let out = match augment_method {
        None => pretrain(&train_xs, &val_xs, enc, &train_cfg, options, None, None)?,
        Some(method) => {
            let raw: Vec<&WindowSample> = prepared.train.iter().collect();
            let params = cfg.augment_params;
            let patch = enc.patch;
            let hook = move |i: usize, rng: &mut RngStream| {
                let s = raw[i];
                let aug = augment(&s.x, s.t, s.channels, method, &params, rng)
                    .map_err(|e| timedrl_core::trainer::TrainError::ConfigInvalid(e.to_string()))?;
                Ok(prepare_window::<F>(&aug, s.t, s.channels, &patch)?.0)
            };
            pretrain(&train_xs, &val_xs, enc, &train_cfg, options, Some(&hook), None)?
        }
    };
    Ok(out)
}

pub struct PretrainArtifacts {
    pub checkpoint: PathBuf,
    pub losses: PathBuf,
}

pub fn cmd_pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<PretrainArtifacts, CliError> {
    std::fs::create_dir_all(out_dir)?;
    match cfg.precision {
        Precision::F32 => pretrain_impl::<f32>(cfg, out_dir),
        Precision::F64 => pretrain_impl::<f64>(cfg, out_dir),
    }
}

fn pretrain_impl<F: Scalar>(cfg: &RunConfig, out_dir: &Path) -> Result<PretrainArtifacts, CliError> {
    let prepared = prepare_splits(cfg)?;
    let enc = encoder_config(cfg, prepared.channels, prepared.window);
    let options = PretextOptions {
        lambda: cfg.train.lambda,
        embedding_mode: cfg.embedding_mode,
        ..Default::default()
    };
    let out = pretrain_arm::<F>(cfg, &prepared, &enc, &options, cfg.seed, cfg.augment_method)?;

    let ckpt_path = out_dir.join("checkpoint.tdrl");
    let losses_path = out_dir.join("losses.csv");
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            encoder_config: enc,
            state: timedrl_core::trainer::TrainState {
                model: out.model.clone(),
                best_model: out.model.clone(),
                ..out.state
            },
            with_optimizer: false,
            meta: checkpoint_meta(cfg, &prepared, None),
        },
    )?;
    write_loss_csv(&losses_path, &out.history)?;
    RunMeta::new("pretrain", &cfg.config_hash, cfg.seed, cfg.precision.name())
        .note("val_dropout", "contrastive views keep dropout active; batch norm uses running stats")
        .note(
            "augmentation",
            &cfg.augment_method
                .map(|m| format!("{} (applied to both views)", m.name()))
                .unwrap_or_else(|| "none".into()),
        )
        .note("bn_batching", "flattened pseudo-batch under channel independence")
        .write(&out_dir.join("run_meta.json"))?;
    Ok(PretrainArtifacts { checkpoint: ckpt_path, losses: losses_path })
}

fn load_and_check<F: Scalar>(
    cfg: &RunConfig,
    ckpt_path: &Path,
) -> Result<(Checkpoint<F>, PreparedSplits), CliError> {
    let ckpt: Checkpoint<F> = load_checkpoint(ckpt_path)?;
    let task = ckpt.meta_value("task").unwrap_or("");
    if task != cfg.task.kind.name() {
        return Err(CliError::TaskMismatch(format!(
            "checkpoint was pretrained for '{task}' but the config asks for '{}'",
            cfg.task.kind.name()
        )));
    }
    let prepared = prepare_splits(cfg)?;
    let enc = &ckpt.encoder_config;
    if enc.channels != prepared.channels || enc.window != prepared.window {
        return Err(CliError::TaskMismatch(format!(
            "checkpoint geometry ({} channels, window {}) does not match the dataset ({} channels, window {})",
            enc.channels, enc.window, prepared.channels, prepared.window
        )));
    }
    Ok((ckpt, prepared))
}

/// Dispatch on the checkpoint's stored element type.
fn checkpoint_precision(path: &Path) -> Result<Precision, CliError> {
    Ok(match checkpoint_dtype(path).map_err(CliError::from)? {
        Dtype::F32 => Precision::F32,
        Dtype::F64 => Precision::F64,
    })
}

pub fn cmd_eval(cfg: &RunConfig, ckpt_path: &Path, out_dir: &Path) -> Result<MetricsReport, CliError> {
    std::fs::create_dir_all(out_dir)?;
    match checkpoint_precision(ckpt_path)? {
        Precision::F32 => eval_impl::<f32>(cfg, ckpt_path, out_dir),
        Precision::F64 => eval_impl::<f64>(cfg, ckpt_path, out_dir),
    }
}

fn eval_impl<F: Scalar>(
    cfg: &RunConfig,
    ckpt_path: &Path,
    out_dir: &Path,
) -> Result<MetricsReport, CliError> {
    let (ckpt, prepared) = load_and_check::<F>(cfg, ckpt_path)?;
    let mode = ckpt
        .meta_value("pooling")
        .and_then(EmbeddingMode::parse)
        .unwrap_or(cfg.embedding_mode);
    let encoder = &ckpt.state.best_model.encoder;
    let probe = ProbeConfig { seed: cfg.seed, ..cfg.probe.clone() };

    let (metrics, warning) = match cfg.task.kind {
        TaskKind::Forecast => linear_eval_forecast(
            encoder,
            &ckpt.encoder_config,
            &prepared.train,
            &prepared.val,
            &prepared.test,
            &probe,
        )?,
        TaskKind::Classify => linear_eval_classify(
            encoder,
            &ckpt.encoder_config,
            &prepared.train,
            &prepared.val,
            &prepared.test,
            prepared.classes,
            mode,
            &probe,
        )?,
    };
    let report = MetricsReport {
        task: cfg.task.kind.name().to_string(),
        dataset_id: cfg.dataset_id.clone(),
        config_hash: cfg.config_hash.clone(),
        seed: cfg.seed,
        label_fraction: 1.0,
        init_mode: "frozen-probe".to_string(),
        embedding_mode: mode.name().to_string(),
        metrics,
        warning,
    };
    write_report(&out_dir.join("metrics.json"), &report)?;
    let mut row = LedgerRow::from_report("eval", &report);
    row.precision = cfg.precision.name().to_string();
    append_ledger(&out_dir.join("ledger.csv"), &row)?;
    Ok(report)
}

pub fn cmd_finetune(
    cfg: &RunConfig,
    ckpt_path: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<MetricsReport>, CliError> {
    std::fs::create_dir_all(out_dir)?;
    let precision = match ckpt_path {
        Some(p) => checkpoint_precision(p)?,
        None => cfg.precision,
    };
    match precision {
        Precision::F32 => finetune_impl::<f32>(cfg, ckpt_path, out_dir),
        Precision::F64 => finetune_impl::<f64>(cfg, ckpt_path, out_dir),
    }
}

fn finetune_impl<F: Scalar>(
    cfg: &RunConfig,
    ckpt_path: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<MetricsReport>, CliError> {
    for &f in &cfg.finetune_fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(CliError::Config(format!(
                "finetune.fractions: fraction {f} outside (0, 1]"
            )));
        }
    }
    let (ckpt, prepared) = match ckpt_path {
        Some(p) => {
            let (c, prep) = load_and_check::<F>(cfg, p)?;
            (Some(c), prep)
        }
        None => (None, prepare_splits(cfg)?),
    };
    let enc = match &ckpt {
        Some(c) => c.encoder_config.clone(),
        None => encoder_config(cfg, prepared.channels, prepared.window),
    };
    let task = match cfg.task.kind {
        TaskKind::Forecast => TaskSpec::Forecast { horizon: cfg.task.horizon },
        TaskKind::Classify => TaskSpec::Classify { classes: prepared.classes },
    };

    let inits: Vec<&str> = if ckpt.is_some() { vec!["pretrained", "random"] } else { vec!["random"] };
    let mut reports = Vec::new();
    for (fi, &fraction) in cfg.finetune_fractions.iter().enumerate() {
        // paired subsampling: both init arms see the same label flags
        let mut train = prepared.train.clone();
        timedrl_core::data::label_subsample(
            &mut train,
            fraction,
            stream_seed(cfg.seed, &format!("subsample/{fi}")),
        )?;
        let mut val = prepared.val.clone();
        timedrl_core::data::label_subsample(
            &mut val,
            fraction,
            stream_seed(cfg.seed, &format!("subsample-val/{fi}")),
        )?;
        for &init in &inits {
            let pretrained_model = match init {
                "pretrained" => Some(&ckpt.as_ref().unwrap().state.best_model),
                _ => None,
            };
            let probe = ProbeConfig {
                seed: cfg.seed,
                epochs: cfg.finetune_epochs,
                ..cfg.probe.clone()
            };
            let (metrics, warning) = fine_tune(
                pretrained_model,
                &enc,
                &task,
                &train,
                &val,
                &prepared.test,
                cfg.embedding_mode,
                &probe,
            )?;
            let report = MetricsReport {
                task: cfg.task.kind.name().to_string(),
                dataset_id: cfg.dataset_id.clone(),
                config_hash: cfg.config_hash.clone(),
                seed: cfg.seed,
                label_fraction: fraction,
                init_mode: init.to_string(),
                embedding_mode: cfg.embedding_mode.name().to_string(),
                metrics,
                warning,
            };
            write_report(
                &out_dir.join(format!("metrics_f{fraction}_{init}.json")),
                &report,
            )?;
            let mut row = LedgerRow::from_report("finetune", &report);
            row.precision = cfg.precision.name().to_string();
            append_ledger(&out_dir.join("ledger.csv"), &row)?;
            reports.push(report);
        }
    }

    // the semi-supervised grid as one CSV
    let mut grid = String::from("label_fraction,init,mse,mae,acc,mf1,kappa\n");
    for r in &reports {
        let g = |k: &str| r.metrics.get(k).map(|v| v.to_string()).unwrap_or_default();
        grid.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label_fraction,
            r.init_mode,
            g("mse"),
            g("mae"),
            g("acc"),
            g("mf1"),
            g("kappa")
        ));
    }
    std::fs::write(out_dir.join("finetune_grid.csv"), grid)?;
    Ok(reports)
}

/// One ablation arm: which knob it turns and its identifier.
pub struct ArmOutcome {
    pub arm: String,
    pub is_control: bool,
    pub metrics: BTreeMap<String, f64>,
}

pub fn cmd_ablate(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<ArmOutcome>, CliError> {
    std::fs::create_dir_all(out_dir)?;
    match cfg.precision {
        Precision::F32 => ablate_impl::<f32>(cfg, out_dir),
        Precision::F64 => ablate_impl::<f64>(cfg, out_dir),
    }
}

struct ArmSpec {
    id: String,
    is_control: bool,
    options: PretextOptions,
    augment: Option<timedrl_core::data::AugmentMethod>,
}

fn arm_specs(cfg: &RunConfig, axis: AblateAxis) -> Vec<ArmSpec> {
    let base = PretextOptions {
        lambda: cfg.train.lambda,
        embedding_mode: cfg.embedding_mode,
        ..Default::default()
    };
    match axis {
        AblateAxis::Augmentation => {
            let mut arms = vec![ArmSpec {
                id: "none".into(),
                is_control: true,
                options: base,
                augment: None,
            }];
            for m in timedrl_core::data::AugmentMethod::ALL {
                arms.push(ArmSpec {
                    id: m.name().into(),
                    is_control: false,
                    options: base,
                    augment: Some(m),
                });
            }
            arms
        }
        AblateAxis::Pooling => ["cls", "last", "gap", "all"]
            .iter()
            .map(|name| ArmSpec {
                id: (*name).into(),
                is_control: *name == "cls",
                options: PretextOptions {
                    embedding_mode: EmbeddingMode::parse(name).unwrap(),
                    ..base
                },
                augment: None,
            })
            .collect(),
        AblateAxis::StopGradient => vec![
            ArmSpec { id: "on".into(), is_control: true, options: base, augment: None },
            ArmSpec {
                id: "off".into(),
                is_control: false,
                options: PretextOptions { stop_gradient: false, ..base },
                augment: None,
            },
        ],
        AblateAxis::Lambda => cfg
            .lambda_grid
            .iter()
            .map(|&lambda| ArmSpec {
                id: format!("lambda-{lambda}"),
                is_control: lambda == 1.0,
                options: PretextOptions { lambda, ..base },
                augment: None,
            })
            .collect(),
    }
}

fn ablate_impl<F: Scalar>(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<ArmOutcome>, CliError> {
    let axis = cfg
        .ablate_axis
        .ok_or_else(|| CliError::Config("ablate.axis is required for the ablate command".into()))?;
    // one shared split for every arm
    let prepared = prepare_splits(cfg)?;
    let probe = ProbeConfig { seed: cfg.seed, ..cfg.probe.clone() };

    let mut outcomes = Vec::new();
    for spec in arm_specs(cfg, axis) {
        let enc = encoder_config(cfg, prepared.channels, prepared.window);
        // arms share the split but draw their own training randomness
        let trainer_seed = stream_seed(cfg.seed, &format!("arm/{}/{}", axis.name(), spec.id));
        let out = pretrain_arm::<F>(cfg, &prepared, &enc, &spec.options, trainer_seed, spec.augment)?;

        let (metrics, _) = match cfg.task.kind {
            TaskKind::Forecast => linear_eval_forecast(
                &out.model.encoder,
                &enc,
                &prepared.train,
                &prepared.val,
                &prepared.test,
                &probe,
            )?,
            TaskKind::Classify => linear_eval_classify(
                &out.model.encoder,
                &enc,
                &prepared.train,
                &prepared.val,
                &prepared.test,
                prepared.classes,
                spec.options.embedding_mode,
                &probe,
            )?,
        };
        outcomes.push(ArmOutcome { arm: spec.id, is_control: spec.is_control, metrics });
    }

    // comparison table with deltas against the control arm
    let primary = match cfg.task.kind {
        TaskKind::Forecast => "mse",
        TaskKind::Classify => "acc",
    };
    let control_value = outcomes
        .iter()
        .find(|o| o.is_control)
        .and_then(|o| o.metrics.get(primary).copied())
        .unwrap_or(f64::NAN);
    let mut table = String::from("axis,arm,control,split_hash,mse,mae,acc,mf1,kappa,delta_primary\n");
    for o in &outcomes {
        let g = |k: &str| o.metrics.get(k).map(|v| v.to_string()).unwrap_or_default();
        let delta = o.metrics.get(primary).map(|v| v - control_value).unwrap_or(f64::NAN);
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            axis.name(),
            o.arm,
            o.is_control,
            prepared.split_hash,
            g("mse"),
            g("mae"),
            g("acc"),
            g("mf1"),
            g("kappa"),
            delta
        ));
    }
    std::fs::write(out_dir.join("ablate.csv"), table)?;
    Ok(outcomes)
}

pub struct ExportArtifacts {
    pub embeddings: PathBuf,
    pub anisotropy: PathBuf,
}

pub fn cmd_export_embeddings(
    cfg: &RunConfig,
    ckpt_path: &Path,
    out_dir: &Path,
) -> Result<ExportArtifacts, CliError> {
    std::fs::create_dir_all(out_dir)?;
    match checkpoint_precision(ckpt_path)? {
        Precision::F32 => export_impl::<f32>(cfg, ckpt_path, out_dir),
        Precision::F64 => export_impl::<f64>(cfg, ckpt_path, out_dir),
    }
}

fn export_impl<F: Scalar>(
    cfg: &RunConfig,
    ckpt_path: &Path,
    out_dir: &Path,
) -> Result<ExportArtifacts, CliError> {
    let (ckpt, prepared) = load_and_check::<F>(cfg, ckpt_path)?;
    let encoder = &ckpt.state.best_model.encoder;
    let enc_cfg = &ckpt.encoder_config;
    let mut samples = prepared.train;
    samples.extend(prepared.val);
    samples.extend(prepared.test);

    let cls = instance_embeddings(encoder, enc_cfg, &samples, EmbeddingMode::Cls)?;
    let emb_path = out_dir.join("embeddings.csv");
    write_embeddings_csv(&emb_path, &cls)?;

    if cfg.export_include_zt {
        // flattened timestamp-level embeddings, one row per sample
        let zt = instance_embeddings(encoder, enc_cfg, &samples, EmbeddingMode::Pooled(PoolMethod::All))?;
        write_embeddings_csv(&out_dir.join("embeddings_zt.csv"), &zt)?;
    }

    let mut summary = BTreeMap::new();
    for mode in [
        EmbeddingMode::Cls,
        EmbeddingMode::Pooled(PoolMethod::Last),
        EmbeddingMode::Pooled(PoolMethod::Gap),
        EmbeddingMode::Pooled(PoolMethod::All),
    ] {
        let rows = instance_embeddings(encoder, enc_cfg, &samples, mode)?;
        let dims = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let score = anisotropy_score(&flat, samples.len(), dims)?;
        summary.insert(mode.name().to_string(), score);
    }
    let aniso_path = out_dir.join("anisotropy.json");
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Other(format!("anisotropy serialization: {e}")))?;
    std::fs::write(&aniso_path, json + "\n")?;
    Ok(ExportArtifacts { embeddings: emb_path, anisotropy: aniso_path })
}

/// Write the configured synthetic dataset as a CSV loadable through the
/// regular data path.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(out_dir)?;
    let spec = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::Config("gen-data requires data.source = \"synthetic\"".into()))?;
    let ds = synth::generate(spec, cfg.seed)?;
    let path = out_dir.join("data.csv");
    let mut out = String::new();
    out.push_str(&ds.feature_names.join(","));
    if ds.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    let len = ds.instance_length.unwrap_or(ds.rows);
    for row in 0..ds.rows {
        let vals: Vec<String> = (0..ds.channels).map(|c| ds.value(row, c).to_string()).collect();
        out.push_str(&vals.join(","));
        if let Some(labels) = &ds.labels {
            out.push_str(&format!(",{}", labels[row / len]));
        }
        out.push('\n');
    }
    std::fs::write(&path, out)?;
    Ok(path)
}
