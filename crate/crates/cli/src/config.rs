//! Run configuration: a flat, typed key-value file with dotted section keys
//! (TOML syntax), parsed against a strict schema. Unknown keys are a hard
//! error naming the full key path — a silently absorbed typo would corrupt
//! an ablation grid.

use crate::CliError;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use timedrl_core::data::{AugmentMethod, AugmentParams, PatchConfig};
use timedrl_core::encoder::EmbeddingMode;
use timedrl_core::evaluation::{ProbeConfig, TaskKind};
use timedrl_core::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Csv,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    SinusoidMix,
    ArProcess,
    ClassFrequency,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::SinusoidMix => "sinusoid-mix",
            Generator::ArProcess => "ar-process",
            Generator::ClassFrequency => "class-frequency",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sinusoid-mix" => Some(Generator::SinusoidMix),
            "ar-process" => Some(Generator::ArProcess),
            "class-frequency" => Some(Generator::ClassFrequency),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub source: DataSource,
    pub csv_path: Option<PathBuf>,
    pub has_header: bool,
    pub timestamp_column: Option<String>,
    pub label_column: Option<String>,
    pub instance_length: Option<usize>,
    pub channel_independence: bool,
    pub split_ratios: (f64, f64, f64),
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub t_total: usize,
    pub channels: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub instance_length: usize,
}

#[derive(Debug, Clone)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub horizon: usize,
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EncoderSettings {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout_embed: f64,
    pub dropout_attn: f64,
    pub dropout_ff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateAxis {
    Augmentation,
    Pooling,
    StopGradient,
    Lambda,
}

impl AblateAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblateAxis::Augmentation => "augmentation",
            AblateAxis::Pooling => "pooling",
            AblateAxis::StopGradient => "stop_gradient",
            AblateAxis::Lambda => "lambda",
        }
    }
}

/// Fully resolved run configuration. Two loads of the same file (plus the
/// same CLI overrides) always yield equal configs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub data: DataConfig,
    pub synthetic: Option<SyntheticSpec>,
    pub task: TaskConfig,
    pub window_length: usize,
    pub window_stride: usize,
    pub patch: PatchConfig,
    pub encoder: EncoderSettings,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub finetune_fractions: Vec<f64>,
    pub finetune_epochs: usize,
    pub ablate_axis: Option<AblateAxis>,
    pub lambda_grid: Vec<f64>,
    pub augment_method: Option<AugmentMethod>,
    pub augment_params: AugmentParams,
    pub embedding_mode: EmbeddingMode,
    pub export_include_zt: bool,
    /// Hex digest of the resolved configuration.
    pub config_hash: String,
    /// Dataset identifier for reports (file stem or generator name).
    pub dataset_id: String,
}

/// Flattened dotted leaf paths of a TOML document. Every getter consumes its
/// key; whatever remains at the end is unknown and fatal.
struct Keys {
    map: BTreeMap<String, toml::Value>,
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&path, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

impl Keys {
    fn parse(text: &str) -> Result<Self, CliError> {
        let value: toml::Value = text
            .parse()
            .map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
        let mut map = BTreeMap::new();
        flatten("", &value, &mut map);
        Ok(Keys { map })
    }

    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.map.remove(key)
    }

    fn take_u64(&mut self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(toml::Value::Integer(i)) if i >= 0 => Ok(i as u64),
            Some(v) => Err(CliError::Config(format!("{key}: expected a non-negative integer, got {v}"))),
        }
    }

    fn take_usize(&mut self, key: &str, default: usize) -> Result<usize, CliError> {
        Ok(self.take_u64(key, default as u64)? as usize)
    }

    fn take_opt_usize(&mut self, key: &str) -> Result<Option<usize>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if i >= 0 => Ok(Some(i as usize)),
            Some(v) => Err(CliError::Config(format!("{key}: expected a non-negative integer, got {v}"))),
        }
    }

    fn take_f64(&mut self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(toml::Value::Float(f)) => Ok(f),
            Some(toml::Value::Integer(i)) => Ok(i as f64),
            Some(v) => Err(CliError::Config(format!("{key}: expected a number, got {v}"))),
        }
    }

    fn take_bool(&mut self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(toml::Value::Boolean(b)) => Ok(b),
            Some(v) => Err(CliError::Config(format!("{key}: expected a boolean, got {v}"))),
        }
    }

    fn take_str(&mut self, key: &str) -> Result<Option<String>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(CliError::Config(format!("{key}: expected a string, got {v}"))),
        }
    }

    fn take_f64_list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>, CliError> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(toml::Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    toml::Value::Float(f) => Ok(f),
                    toml::Value::Integer(i) => Ok(i as f64),
                    other => Err(CliError::Config(format!("{key}: expected numbers, got {other}"))),
                })
                .collect(),
            Some(v) => Err(CliError::Config(format!("{key}: expected a list, got {v}"))),
        }
    }

    fn finish(self) -> Result<(), CliError> {
        if let Some(key) = self.map.keys().next() {
            return Err(CliError::Config(format!("unknown config key '{key}'")));
        }
        Ok(())
    }
}

/// Overrides supplied on the command line; they take precedence over the
/// file and participate in the config hash.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut keys = Keys::parse(text)?;

    let seed = overrides.seed.unwrap_or(keys.take_u64("seed", 42)?);
    let precision = match &overrides.precision {
        Some(p) => *p,
        None => {
            let s = keys.take_str("precision")?.unwrap_or_else(|| "f32".into());
            Precision::parse(&s)
                .ok_or_else(|| CliError::Config(format!("precision: expected f32 or f64, got '{s}'")))?
        }
    };

    let source = match keys.take_str("data.source")?.as_deref() {
        None | Some("synthetic") => DataSource::Synthetic,
        Some("csv") => DataSource::Csv,
        Some(other) => {
            return Err(CliError::Config(format!(
                "data.source: expected csv or synthetic, got '{other}'"
            )))
        }
    };
    let ratios = keys.take_f64_list("data.split_ratios", &[0.6, 0.2, 0.2])?;
    if ratios.len() != 3 {
        return Err(CliError::Config("data.split_ratios: expected three ratios".into()));
    }
    let data = DataConfig {
        source,
        csv_path: keys.take_str("data.csv_path")?.map(PathBuf::from),
        has_header: keys.take_bool("data.has_header", true)?,
        timestamp_column: keys.take_str("data.timestamp_column")?,
        label_column: keys.take_str("data.label_column")?,
        instance_length: keys.take_opt_usize("data.instance_length")?,
        channel_independence: keys.take_bool("data.channel_independence", false)?,
        split_ratios: (ratios[0], ratios[1], ratios[2]),
    };
    if data.source == DataSource::Csv && data.csv_path.is_none() {
        return Err(CliError::Config("data.csv_path: required when data.source = \"csv\"".into()));
    }

    let synthetic = if data.source == DataSource::Synthetic {
        let gen_name = keys
            .take_str("synthetic.generator")?
            .unwrap_or_else(|| "sinusoid-mix".into());
        let generator = Generator::parse(&gen_name).ok_or_else(|| {
            CliError::Config(format!("synthetic.generator: unknown generator '{gen_name}'"))
        })?;
        Some(SyntheticSpec {
            generator,
            t_total: keys.take_usize("synthetic.t_total", 2048)?,
            channels: keys.take_usize("synthetic.channels", 1)?,
            classes: keys.take_usize("synthetic.classes", 2)?,
            noise_sigma: keys.take_f64("synthetic.noise_sigma", 0.1)?,
            instance_length: keys.take_usize("synthetic.instance_length", 64)?,
        })
    } else {
        None
    };

    let kind_str = keys.take_str("task.kind")?.unwrap_or_else(|| "forecast".into());
    let kind = TaskKind::parse(&kind_str)
        .ok_or_else(|| CliError::Config(format!("task.kind: expected forecast or classify, got '{kind_str}'")))?;
    let task = TaskConfig {
        kind,
        horizon: keys.take_usize("task.horizon", 16)?,
        num_classes: keys.take_opt_usize("task.num_classes")?,
    };

    let window_length = keys.take_usize("window.length", 64)?;
    let window_stride = keys.take_usize("window.stride", 1)?;
    let patch = PatchConfig {
        patch_len: keys.take_usize("patch.length", 8)?,
        stride: keys.take_usize("patch.stride", 4)?,
    };

    let encoder = EncoderSettings {
        d_model: keys.take_usize("encoder.d_model", 64)?,
        blocks: keys.take_usize("encoder.blocks", 2)?,
        heads: keys.take_usize("encoder.heads", 4)?,
        d_ff: keys.take_usize("encoder.d_ff", 128)?,
        dropout_embed: keys.take_f64("encoder.dropout_embed", 0.1)?,
        dropout_attn: keys.take_f64("encoder.dropout_attn", 0.1)?,
        dropout_ff: keys.take_f64("encoder.dropout_ff", 0.1)?,
    };

    let clip = keys.take_f64("train.clip_norm", 5.0)?;
    let train = TrainConfig {
        lr: keys.take_f64("train.lr", 1e-3)?,
        weight_decay: keys.take_f64("train.weight_decay", 1e-4)?,
        beta1: keys.take_f64("train.beta1", 0.9)?,
        beta2: keys.take_f64("train.beta2", 0.999)?,
        adam_eps: keys.take_f64("train.adam_eps", 1e-8)?,
        batch_size: keys.take_usize("train.batch_size", 16)?,
        epochs: keys.take_usize("train.epochs", 50)?,
        lambda: keys.take_f64("train.lambda", 1.0)?,
        seed,
        patience: keys.take_usize("train.patience", 10)?,
        clip_norm: if clip > 0.0 { Some(clip) } else { None },
    };

    let probe = ProbeConfig {
        lr: keys.take_f64("probe.lr", 1e-3)?,
        epochs: keys.take_usize("probe.epochs", 100)?,
        batch_size: keys.take_usize("probe.batch_size", 32)?,
        patience: keys.take_usize("probe.patience", 10)?,
        seed,
    };

    let finetune_fractions = keys.take_f64_list("finetune.fractions", &[0.1, 0.5, 1.0])?;
    let finetune_epochs = keys.take_usize("finetune.epochs", 50)?;

    let ablate_axis = match keys.take("ablate.axis") {
        None => None,
        Some(toml::Value::String(s)) => Some(match s.as_str() {
            "augmentation" => AblateAxis::Augmentation,
            "pooling" => AblateAxis::Pooling,
            "stop_gradient" => AblateAxis::StopGradient,
            "lambda" => AblateAxis::Lambda,
            other => {
                return Err(CliError::Config(format!("ablate.axis: unknown axis '{other}'")))
            }
        }),
        Some(toml::Value::Array(_)) => {
            return Err(CliError::Config(
                "ablate.axis: exactly one axis per invocation".into(),
            ))
        }
        Some(v) => return Err(CliError::Config(format!("ablate.axis: expected a string, got {v}"))),
    };
    let lambda_grid = keys.take_f64_list(
        "ablate.lambda_grid",
        &[0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0],
    )?;

    let augment_method = match keys.take_str("augment.method")? {
        None => None,
        Some(s) if s == "none" => None,
        Some(s) => Some(
            AugmentMethod::parse(&s)
                .map_err(|_| CliError::Config(format!("augment.method: unknown method '{s}'")))?,
        ),
    };
    let defaults = AugmentParams::default();
    let augment_params = AugmentParams {
        jitter_sigma: keys.take_f64("augment.jitter_sigma", defaults.jitter_sigma)?,
        scale_min: keys.take_f64("augment.scale_min", defaults.scale_min)?,
        scale_max: keys.take_f64("augment.scale_max", defaults.scale_max)?,
        segments: keys.take_usize("augment.segments", defaults.segments)?,
        mask_ratio: keys.take_f64("augment.mask_ratio", defaults.mask_ratio)?,
        crop_ratio: keys.take_f64("augment.crop_ratio", defaults.crop_ratio)?,
    };

    let mode_str = keys.take_str("pretext.pooling")?.unwrap_or_else(|| "cls".into());
    let embedding_mode = EmbeddingMode::parse(&mode_str).ok_or_else(|| {
        CliError::Config(format!("pretext.pooling: expected cls, last, gap, or all; got '{mode_str}'"))
    })?;

    let export_include_zt = keys.take_bool("export.include_zt", false)?;

    keys.finish()?;

    let dataset_id = match source {
        DataSource::Csv => data
            .csv_path
            .as_ref()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
        DataSource::Synthetic => synthetic.as_ref().unwrap().generator.name().to_string(),
    };

    let mut cfg = RunConfig {
        seed,
        precision,
        data,
        synthetic,
        task,
        window_length,
        window_stride,
        patch,
        encoder,
        train,
        probe,
        finetune_fractions,
        finetune_epochs,
        ablate_axis,
        lambda_grid,
        augment_method,
        augment_params,
        embedding_mode,
        export_include_zt,
        config_hash: String::new(),
        dataset_id,
    };
    cfg.config_hash = hash_config(&cfg);
    Ok(cfg)
}

/// Digest over the canonical (sorted key=value) rendering of the resolved
/// config, truncated to 16 hex chars.
fn hash_config(cfg: &RunConfig) -> String {
    let canonical = canonical_lines(cfg).join("\n");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn canonical_lines(cfg: &RunConfig) -> Vec<String> {
    let mut lines = vec![
        format!("seed={}", cfg.seed),
        format!("precision={}", cfg.precision.name()),
        format!("data.channel_independence={}", cfg.data.channel_independence),
        format!("data.split_ratios={:?}", cfg.data.split_ratios),
        format!("task.kind={}", cfg.task.kind.name()),
        format!("task.horizon={}", cfg.task.horizon),
        format!("window={}x{}", cfg.window_length, cfg.window_stride),
        format!("patch={}x{}", cfg.patch.patch_len, cfg.patch.stride),
        format!(
            "encoder={}/{}/{}/{} drop {}/{}/{}",
            cfg.encoder.d_model,
            cfg.encoder.blocks,
            cfg.encoder.heads,
            cfg.encoder.d_ff,
            cfg.encoder.dropout_embed,
            cfg.encoder.dropout_attn,
            cfg.encoder.dropout_ff
        ),
        format!(
            "train={}/{}/{}/{}/{}/{}/{}/{}/{:?}",
            cfg.train.lr,
            cfg.train.weight_decay,
            cfg.train.beta1,
            cfg.train.beta2,
            cfg.train.batch_size,
            cfg.train.epochs,
            cfg.train.lambda,
            cfg.train.patience,
            cfg.train.clip_norm
        ),
        format!(
            "probe={}/{}/{}/{}",
            cfg.probe.lr, cfg.probe.epochs, cfg.probe.batch_size, cfg.probe.patience
        ),
        format!("finetune={:?}/{}", cfg.finetune_fractions, cfg.finetune_epochs),
        format!("pooling={}", cfg.embedding_mode.name()),
        format!("augment={:?}", cfg.augment_method.map(|m| m.name())),
        format!("dataset={}", cfg.dataset_id),
    ];
    if let Some(s) = &cfg.synthetic {
        lines.push(format!(
            "synthetic={}/{}/{}/{}/{}/{}",
            s.generator.name(),
            s.t_total,
            s.channels,
            s.classes,
            s.noise_sigma,
            s.instance_length
        ));
    }
    if let Some(axis) = cfg.ablate_axis {
        lines.push(format!("ablate.axis={}", axis.name()));
        lines.push(format!("ablate.lambda_grid={:?}", cfg.lambda_grid));
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = parse_config("", &Overrides::default()).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.precision, Precision::F32);
        assert_eq!(cfg.encoder.d_model, 64);
        assert_eq!(cfg.dataset_id, "sinusoid-mix");
        assert_eq!(cfg.lambda_grid.len(), 7);
    }

    #[test]
    fn unknown_key_is_fatal_with_path() {
        let err = parse_config("train.lamda = 0.5\n", &Overrides::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.lamda"), "{msg}");
    }

    #[test]
    fn same_text_same_config_hash() {
        let text = "seed = 7\ntask.kind = \"classify\"\nencoder.d_model = 32\n";
        let a = parse_config(text, &Overrides::default()).unwrap();
        let b = parse_config(text, &Overrides::default()).unwrap();
        assert_eq!(a.config_hash, b.config_hash);

        let c = parse_config("seed = 8\n", &Overrides::default()).unwrap();
        assert_ne!(a.config_hash, c.config_hash);
    }

    #[test]
    fn overrides_take_precedence_and_enter_hash() {
        let text = "seed = 7\n";
        let plain = parse_config(text, &Overrides::default()).unwrap();
        let over = parse_config(
            text,
            &Overrides { seed: Some(99), precision: Some(Precision::F64) },
        )
        .unwrap();
        assert_eq!(over.seed, 99);
        assert_eq!(over.precision, Precision::F64);
        assert_ne!(plain.config_hash, over.config_hash);
    }

    #[test]
    fn ablate_axis_list_is_rejected() {
        let err = parse_config("ablate.axis = [\"pooling\", \"lambda\"]\n", &Overrides::default())
            .unwrap_err();
        assert!(err.to_string().contains("exactly one axis"));
    }

    #[test]
    fn csv_source_requires_path() {
        let err = parse_config("data.source = \"csv\"\n", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("csv_path"));
    }
}
