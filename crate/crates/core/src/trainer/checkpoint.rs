//! Versioned binary checkpoints.
//!
//! Layout: magic `TDRL`, format version (u32 LE), a stream of length-
//! prefixed records `(name, dtype, shape, raw little-endian values)`, and a
//! trailing CRC-32 of every preceding byte. Serialization is canonical —
//! records are emitted in a fixed order — so save -> load -> save is
//! byte-identical.

use super::{EpochRecord, Model, OptimizerState, ParamModel, Split, TrainError, TrainState};
use crate::data::PatchConfig;
use crate::encoder::EncoderConfig;
use crate::pretext::LossBreakdown;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"TDRL";
const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;
const DTYPE_U64: u8 = 3;
const DTYPE_BYTES: u8 = 4;

/// A pretrained model plus enough state to resume training mid-run.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub encoder_config: EncoderConfig,
    pub state: TrainState<F>,
    /// Whether optimizer moments and the best-model snapshot are included
    /// (training checkpoints) or omitted (final checkpoints, where the
    /// stored model *is* the best model).
    pub with_optimizer: bool,
    /// Free-form run metadata (task kind, dataset id, config hash, ...).
    pub meta: Vec<(String, String)>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

enum Payload<F: Scalar> {
    Scalars(Vec<usize>, Vec<F>),
    U64s(Vec<u64>),
    Bytes(Vec<u8>),
}

struct Writer<F: Scalar> {
    buf: Vec<u8>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> Writer<F> {
    fn new() -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf, _marker: std::marker::PhantomData }
    }

    fn record(&mut self, name: &str, payload: Payload<F>) {
        let name_bytes = name.as_bytes();
        self.buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name_bytes);
        match payload {
            Payload::Scalars(shape, values) => {
                self.buf.push(match F::DTYPE {
                    Dtype::F32 => DTYPE_F32,
                    Dtype::F64 => DTYPE_F64,
                });
                self.dims(&shape);
                for v in values {
                    v.write_le(&mut self.buf);
                }
            }
            Payload::U64s(values) => {
                self.buf.push(DTYPE_U64);
                self.dims(&[values.len()]);
                for v in values {
                    self.buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Bytes(bytes) => {
                self.buf.push(DTYPE_BYTES);
                self.dims(&[bytes.len()]);
                self.buf.extend_from_slice(&bytes);
            }
        }
    }

    fn dims(&mut self, shape: &[usize]) {
        self.buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            self.buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }

    fn tensor(&mut self, name: &str, t: &Tensor<F>) {
        self.record(name, Payload::Scalars(t.shape().to_vec(), t.data().to_vec()));
    }

    fn u64(&mut self, name: &str, v: u64) {
        self.record(name, Payload::U64s(vec![v]));
    }

    fn f64(&mut self, name: &str, v: f64) {
        self.record(name, Payload::Scalars(vec![1], vec![F::from_f64(v)]));
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub fn save_checkpoint<F: Scalar>(path: &Path, ckpt: &Checkpoint<F>) -> Result<(), TrainError> {
    let mut w: Writer<F> = Writer::new();
    let cfg = &ckpt.encoder_config;
    w.u64("config.encoder.d_model", cfg.d_model as u64);
    w.u64("config.encoder.blocks", cfg.blocks as u64);
    w.u64("config.encoder.heads", cfg.heads as u64);
    w.u64("config.encoder.d_ff", cfg.d_ff as u64);
    w.f64("config.encoder.dropout_embed", cfg.dropout_embed);
    w.f64("config.encoder.dropout_attn", cfg.dropout_attn);
    w.f64("config.encoder.dropout_ff", cfg.dropout_ff);
    w.u64("config.encoder.patch_len", cfg.patch.patch_len as u64);
    w.u64("config.encoder.patch_stride", cfg.patch.stride as u64);
    w.u64("config.encoder.channels", cfg.channels as u64);
    w.u64("config.encoder.window", cfg.window as u64);

    let state = &ckpt.state;
    state.model.visit(&mut |name, t, _| w.tensor(&format!("param.{name}"), t));
    w.record(
        "state.bn_stats.mean",
        Payload::Scalars(
            vec![state.model.heads.bn_stats.mean.len()],
            state.model.heads.bn_stats.mean.clone(),
        ),
    );
    w.record(
        "state.bn_stats.var",
        Payload::Scalars(
            vec![state.model.heads.bn_stats.var.len()],
            state.model.heads.bn_stats.var.clone(),
        ),
    );

    if ckpt.with_optimizer {
        state.best_model.visit(&mut |name, t, _| w.tensor(&format!("best.{name}"), t));
        w.record(
            "best_state.bn_stats.mean",
            Payload::Scalars(
                vec![state.best_model.heads.bn_stats.mean.len()],
                state.best_model.heads.bn_stats.mean.clone(),
            ),
        );
        w.record(
            "best_state.bn_stats.var",
            Payload::Scalars(
                vec![state.best_model.heads.bn_stats.var.len()],
                state.best_model.heads.bn_stats.var.clone(),
            ),
        );
        w.u64("opt.t", state.optimizer.t);
        for (name, m) in &state.optimizer.m {
            w.record(&format!("opt.m.{name}"), Payload::Scalars(vec![m.len()], m.clone()));
        }
        for (name, v) in &state.optimizer.v {
            w.record(&format!("opt.v.{name}"), Payload::Scalars(vec![v.len()], v.clone()));
        }
    }

    w.u64("rng.shuffle.seed", state.shuffle_rng.0);
    w.u64("rng.shuffle.counter", state.shuffle_rng.1);
    w.u64("rng.dropout.seed", state.dropout_rng.0);
    w.u64("rng.dropout.counter", state.dropout_rng.1);
    w.u64("rng.augment.seed", state.augment_rng.0);
    w.u64("rng.augment.counter", state.augment_rng.1);
    w.f64("train.best_val", state.best_val);
    w.u64("train.epochs_since_improve", state.epochs_since_improve as u64);
    w.u64("train.completed_epochs", state.completed_epochs as u64);

    let hist = &state.history;
    w.record(
        "history.epoch",
        Payload::U64s(hist.iter().map(|r| r.epoch as u64).collect()),
    );
    w.record(
        "history.split",
        Payload::Bytes(hist.iter().map(|r| matches!(r.split, Split::Val) as u8).collect()),
    );
    let series = |get: fn(&LossBreakdown) -> f64| -> Payload<F> {
        Payload::Scalars(
            vec![hist.len()],
            hist.iter().map(|r| F::from_f64(get(&r.losses))).collect(),
        )
    };
    w.record("history.l_p1", series(|l| l.l_p1));
    w.record("history.l_p2", series(|l| l.l_p2));
    w.record("history.l_p", series(|l| l.l_p));
    w.record("history.l_c1", series(|l| l.l_c1));
    w.record("history.l_c2", series(|l| l.l_c2));
    w.record("history.l_c", series(|l| l.l_c));
    w.record("history.total", series(|l| l.total));
    w.record("history.lambda", series(|l| l.lambda));

    for (k, v) in &ckpt.meta {
        w.record(&format!("meta.{k}"), Payload::Bytes(v.as_bytes().to_vec()));
    }

    std::fs::write(path, w.finish())?;
    Ok(())
}

struct RawRecord {
    dtype: u8,
    shape: Vec<usize>,
    payload: Vec<u8>,
}

fn parse_records(path: &Path) -> Result<(u32, BTreeMap<String, RawRecord>), TrainError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(TrainError::CorruptChecksum);
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(TrainError::CorruptChecksum);
    }
    if &body[..4] != MAGIC {
        return Err(TrainError::MalformedCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version > FORMAT_VERSION {
        return Err(TrainError::VersionMismatch { found: version, supported: FORMAT_VERSION });
    }

    let mut records = BTreeMap::new();
    let mut pos = 8;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], TrainError> {
        if *pos + n > body.len() {
            return Err(TrainError::MalformedCheckpoint("record overruns file".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < body.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| TrainError::MalformedCheckpoint("non-utf8 record name".into()))?;
        let dtype = take(&mut pos, 1)?[0];
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let elem = match dtype {
            DTYPE_F32 => 4,
            DTYPE_F64 | DTYPE_U64 => 8,
            DTYPE_BYTES => 1,
            other => {
                return Err(TrainError::MalformedCheckpoint(format!("unknown dtype {other}")))
            }
        };
        let n: usize = shape.iter().product();
        let payload = take(&mut pos, n * elem)?.to_vec();
        records.insert(name, RawRecord { dtype, shape, payload });
    }
    Ok((version, records))
}

/// Element type of the stored parameters, without loading the full model.
pub fn checkpoint_dtype(path: &Path) -> Result<Dtype, TrainError> {
    let (_, records) = parse_records(path)?;
    let rec = records
        .iter()
        .find(|(name, _)| name.starts_with("param."))
        .map(|(_, r)| r)
        .ok_or_else(|| TrainError::MalformedCheckpoint("no parameters".into()))?;
    match rec.dtype {
        DTYPE_F32 => Ok(Dtype::F32),
        DTYPE_F64 => Ok(Dtype::F64),
        other => Err(TrainError::MalformedCheckpoint(format!("parameter dtype {other}"))),
    }
}

impl RawRecord {
    fn scalars<F: Scalar>(&self, name: &str) -> Result<Vec<F>, TrainError> {
        let expected = match F::DTYPE {
            Dtype::F32 => DTYPE_F32,
            Dtype::F64 => DTYPE_F64,
        };
        if self.dtype != expected {
            return Err(TrainError::PrecisionMismatch);
        }
        let size = F::DTYPE.size();
        let _ = name;
        Ok(self.payload.chunks_exact(size).map(F::read_le).collect())
    }

    fn u64s(&self, name: &str) -> Result<Vec<u64>, TrainError> {
        if self.dtype != DTYPE_U64 {
            return Err(TrainError::MalformedCheckpoint(format!("{name} is not u64")));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn get<'a>(
    records: &'a BTreeMap<String, RawRecord>,
    name: &str,
) -> Result<&'a RawRecord, TrainError> {
    records
        .get(name)
        .ok_or_else(|| TrainError::MalformedCheckpoint(format!("missing record {name}")))
}

fn get_u64(records: &BTreeMap<String, RawRecord>, name: &str) -> Result<u64, TrainError> {
    let v = get(records, name)?.u64s(name)?;
    v.first()
        .copied()
        .ok_or_else(|| TrainError::MalformedCheckpoint(format!("empty record {name}")))
}

fn get_f64<F: Scalar>(records: &BTreeMap<String, RawRecord>, name: &str) -> Result<f64, TrainError> {
    let v: Vec<F> = get(records, name)?.scalars(name)?;
    v.first()
        .map(|x| x.as_f64())
        .ok_or_else(|| TrainError::MalformedCheckpoint(format!("empty record {name}")))
}

fn load_model_params<F: Scalar>(
    model: &mut Model<F>,
    records: &BTreeMap<String, RawRecord>,
    prefix: &str,
) -> Result<(), TrainError> {
    let mut err = None;
    model.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let key = format!("{prefix}.{name}");
        match records.get(&key) {
            None => err = Some(TrainError::MalformedCheckpoint(format!("missing record {key}"))),
            Some(rec) => match rec.scalars::<F>(&key) {
                Err(e) => err = Some(e),
                Ok(data) => {
                    if rec.shape != t.shape() {
                        err = Some(TrainError::MalformedCheckpoint(format!(
                            "shape mismatch in {key}: {:?} vs {:?}",
                            rec.shape,
                            t.shape()
                        )));
                    } else {
                        *t = Tensor::from_vec(rec.shape.clone(), data);
                    }
                }
            },
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, TrainError> {
    let (_, records) = parse_records(path)?;

    let encoder_config = EncoderConfig {
        d_model: get_u64(&records, "config.encoder.d_model")? as usize,
        blocks: get_u64(&records, "config.encoder.blocks")? as usize,
        heads: get_u64(&records, "config.encoder.heads")? as usize,
        d_ff: get_u64(&records, "config.encoder.d_ff")? as usize,
        dropout_embed: get_f64::<F>(&records, "config.encoder.dropout_embed")?,
        dropout_attn: get_f64::<F>(&records, "config.encoder.dropout_attn")?,
        dropout_ff: get_f64::<F>(&records, "config.encoder.dropout_ff")?,
        patch: PatchConfig {
            patch_len: get_u64(&records, "config.encoder.patch_len")? as usize,
            stride: get_u64(&records, "config.encoder.patch_stride")? as usize,
        },
        channels: get_u64(&records, "config.encoder.channels")? as usize,
        window: get_u64(&records, "config.encoder.window")? as usize,
    };

    // instance-embedding width comes from the stored contrastive head
    let w1 = get(&records, "param.contrast_head.w1")?;
    if w1.shape.len() != 2 {
        return Err(TrainError::MalformedCheckpoint("contrast_head.w1 is not 2-D".into()));
    }
    let instance_dim = w1.shape[1];

    let mut model: Model<F> = Model::init(&encoder_config, instance_dim, 0)?;
    load_model_params(&mut model, &records, "param")?;
    model.heads.bn_stats.mean = get(&records, "state.bn_stats.mean")?.scalars("state.bn_stats.mean")?;
    model.heads.bn_stats.var = get(&records, "state.bn_stats.var")?.scalars("state.bn_stats.var")?;

    let with_optimizer = records.contains_key("opt.t");
    let best_model = if with_optimizer {
        let mut best = model.clone();
        load_model_params(&mut best, &records, "best")?;
        best.heads.bn_stats.mean =
            get(&records, "best_state.bn_stats.mean")?.scalars("best_state.bn_stats.mean")?;
        best.heads.bn_stats.var =
            get(&records, "best_state.bn_stats.var")?.scalars("best_state.bn_stats.var")?;
        best
    } else {
        model.clone()
    };

    let mut optimizer = OptimizerState::zeros(&model);
    if with_optimizer {
        optimizer.t = get_u64(&records, "opt.t")?;
        for (name, slot) in optimizer.m.iter_mut() {
            *slot = get(&records, &format!("opt.m.{name}"))?.scalars(name)?;
        }
        for (name, slot) in optimizer.v.iter_mut() {
            *slot = get(&records, &format!("opt.v.{name}"))?.scalars(name)?;
        }
    }

    let epochs = get(&records, "history.epoch")?.u64s("history.epoch")?;
    let splits = get(&records, "history.split")?.payload.clone();
    let series = |name: &str| -> Result<Vec<F>, TrainError> {
        get(&records, name)?.scalars(name)
    };
    let (l_p1, l_p2, l_p) = (series("history.l_p1")?, series("history.l_p2")?, series("history.l_p")?);
    let (l_c1, l_c2, l_c) = (series("history.l_c1")?, series("history.l_c2")?, series("history.l_c")?);
    let (total, lambda) = (series("history.total")?, series("history.lambda")?);
    if [splits.len(), l_p1.len(), total.len()].iter().any(|&n| n != epochs.len()) {
        return Err(TrainError::MalformedCheckpoint("history length mismatch".into()));
    }
    let history: Vec<EpochRecord> = (0..epochs.len())
        .map(|i| EpochRecord {
            epoch: epochs[i] as usize,
            split: if splits[i] == 0 { Split::Train } else { Split::Val },
            losses: LossBreakdown {
                l_p1: l_p1[i].as_f64(),
                l_p2: l_p2[i].as_f64(),
                l_p: l_p[i].as_f64(),
                l_c1: l_c1[i].as_f64(),
                l_c2: l_c2[i].as_f64(),
                l_c: l_c[i].as_f64(),
                total: total[i].as_f64(),
                lambda: lambda[i].as_f64(),
            },
        })
        .collect();

    let meta: Vec<(String, String)> = records
        .iter()
        .filter_map(|(name, rec)| {
            name.strip_prefix("meta.").map(|key| {
                (key.to_string(), String::from_utf8_lossy(&rec.payload).into_owned())
            })
        })
        .collect();

    let state = TrainState {
        model,
        best_model,
        best_val: get_f64::<F>(&records, "train.best_val")?,
        epochs_since_improve: get_u64(&records, "train.epochs_since_improve")? as usize,
        completed_epochs: get_u64(&records, "train.completed_epochs")? as usize,
        optimizer,
        shuffle_rng: (
            get_u64(&records, "rng.shuffle.seed")?,
            get_u64(&records, "rng.shuffle.counter")?,
        ),
        dropout_rng: (
            get_u64(&records, "rng.dropout.seed")?,
            get_u64(&records, "rng.dropout.counter")?,
        ),
        augment_rng: (
            get_u64(&records, "rng.augment.seed")?,
            get_u64(&records, "rng.augment.counter")?,
        ),
        history,
    };

    Ok(Checkpoint { encoder_config, state, with_optimizer, meta })
}
