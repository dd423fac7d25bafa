//! Dataset ingestion and preparation: CSV loading, train/val/test splits,
//! sliding windows, per-window instance normalization, patching, channel
//! independence, augmentations, and semi-supervised label withholding.
//!
//! Everything here works on plain `f64` row-major matrices; conversion to
//! the training precision happens when batches are built.

mod augment;
mod csv_io;

pub use augment::{augment, AugmentMethod, AugmentParams};
pub use csv_io::{load_csv, CsvSchema};

use crate::rng::RngStream;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at row {row}, column {column}: {reason}")]
    ParseError {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("split would leave an empty segment: {0}")]
    TooSmall(String),
    #[error("segment of length {len} too short for window {t} + horizon {h}")]
    TooShort { len: usize, t: usize, h: usize },
    #[error("unknown augmentation method: {0}")]
    UnknownMethod(String),
    #[error("invalid augmentation parameter: {0}")]
    InvalidParam(String),
    #[error("label fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A loaded multivariate series (forecasting) or a stack of fixed-length
/// labeled instances (classification).
#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    /// Row-major `[rows x channels]`; for classification, instances are
    /// stacked blocks of `instance_length` consecutive rows.
    pub values: Vec<f64>,
    pub rows: usize,
    pub channels: usize,
    /// One class id per instance (classification only).
    pub labels: Option<Vec<usize>>,
    /// Rows per instance (classification only).
    pub instance_length: Option<usize>,
    pub feature_names: Vec<String>,
    pub frequency_note: String,
}

impl TimeSeriesDataset {
    pub fn is_classification(&self) -> bool {
        self.labels.is_some()
    }

    pub fn num_instances(&self) -> usize {
        match (self.instance_length, &self.labels) {
            (Some(len), _) if len > 0 => self.rows / len,
            _ => 1,
        }
    }

    pub fn value(&self, row: usize, ch: usize) -> f64 {
        self.values[row * self.channels + ch]
    }
}

/// Forecasting target or class label of one window.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Next `h` rows, `[h x channels]` row-major, contiguous with the window.
    Forecast(Vec<f64>),
    Class(usize),
}

/// One training instance: input window plus its target.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// Row-major `[t x channels]`, raw (pre-normalization) values.
    pub x: Vec<f64>,
    pub t: usize,
    pub channels: usize,
    pub target: Target,
    pub label_available: bool,
    /// Source row range `[start, end)` of `x`, for leak checks and bookkeeping.
    pub source_range: (usize, usize),
}

/// Patch geometry. Padding policy is end-replication: the final timestep is
/// repeated `stride` times before windowing, which yields
/// `(t - patch_len)/stride + 2` tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchConfig {
    pub fn validate(&self, t: usize) -> Result<(), DataError> {
        if self.stride < 1 || self.patch_len < self.stride || self.patch_len > t {
            return Err(DataError::ConfigInvalid(format!(
                "need 1 <= stride <= patch_len <= window ({} <= {} <= {})",
                self.stride, self.patch_len, t
            )));
        }
        Ok(())
    }

    /// Token count under end-replication padding.
    pub fn num_patches(&self, t: usize) -> usize {
        (t - self.patch_len) / self.stride + 2
    }

    /// Width of one flattened patch token.
    pub fn token_width(&self, channels: usize) -> usize {
        channels * self.patch_len
    }
}

/// Per-window, per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Chronological (forecasting) or stratified instance-level (classification)
/// three-way split.
///
/// Forecasting keeps contiguous segments in order train -> val -> test, so
/// no shuffling crosses time. Classification shuffles instances with the
/// given seed, stratified by class when every class has at least 3 instances.
pub fn split_train_val_test(
    ds: &TimeSeriesDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset), DataError> {
    let (r1, r2, r3) = ratios;
    if r1 <= 0.0 || r2 <= 0.0 || r3 <= 0.0 || (r1 + r2 + r3 - 1.0).abs() > 1e-9 {
        return Err(DataError::ConfigInvalid(format!(
            "ratios must be positive and sum to 1, got ({r1}, {r2}, {r3})"
        )));
    }
    match &ds.labels {
        None => {
            let n = ds.rows;
            let n_train = (n as f64 * r1).floor() as usize;
            let n_val = (n as f64 * r2).floor() as usize;
            let n_test = n - n_train - n_val;
            if n_train == 0 || n_val == 0 || n_test == 0 {
                return Err(DataError::TooSmall(format!(
                    "{n} rows split into {n_train}/{n_val}/{n_test}"
                )));
            }
            let take = |lo: usize, hi: usize| TimeSeriesDataset {
                values: ds.values[lo * ds.channels..hi * ds.channels].to_vec(),
                rows: hi - lo,
                channels: ds.channels,
                labels: None,
                instance_length: None,
                feature_names: ds.feature_names.clone(),
                frequency_note: ds.frequency_note.clone(),
            };
            Ok((
                take(0, n_train),
                take(n_train, n_train + n_val),
                take(n_train + n_val, n),
            ))
        }
        Some(labels) => {
            let len = ds
                .instance_length
                .ok_or_else(|| DataError::ConfigInvalid("labels without instance_length".into()))?;
            let n = ds.num_instances();
            if labels.len() != n {
                return Err(DataError::ConfigInvalid(format!(
                    "{} labels for {} instances",
                    labels.len(),
                    n
                )));
            }
            let mut rng = RngStream::new(seed);
            let k = labels.iter().max().map(|&m| m + 1).unwrap_or(0);
            let mut class_counts = vec![0usize; k];
            for &l in labels {
                class_counts[l] += 1;
            }
            let stratify = class_counts.iter().all(|&c| c >= 3);

            let mut order: Vec<usize>;
            if stratify {
                order = Vec::with_capacity(n);
                // shuffle within each class, then allocate per-class segments
                let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
                for (i, &l) in labels.iter().enumerate() {
                    per_class[l].push(i);
                }
                let mut train = Vec::new();
                let mut val = Vec::new();
                let mut test = Vec::new();
                for ids in per_class.iter_mut() {
                    rng.shuffle(ids);
                    let nk = ids.len();
                    let t1 = (nk as f64 * r1).floor() as usize;
                    let t2 = (nk as f64 * r2).floor() as usize;
                    train.extend_from_slice(&ids[..t1]);
                    val.extend_from_slice(&ids[t1..t1 + t2]);
                    test.extend_from_slice(&ids[t1 + t2..]);
                }
                order.extend(&train);
                order.extend(&val);
                order.extend(&test);
                let (a, b) = (train.len(), train.len() + val.len());
                return build_instance_splits(ds, len, &order, a, b);
            }
            order = (0..n).collect();
            rng.shuffle(&mut order);
            let n_train = (n as f64 * r1).floor() as usize;
            let n_val = (n as f64 * r2).floor() as usize;
            build_instance_splits(ds, len, &order, n_train, n_train + n_val)
        }
    }
}

fn build_instance_splits(
    ds: &TimeSeriesDataset,
    len: usize,
    order: &[usize],
    a: usize,
    b: usize,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset), DataError> {
    let labels = ds.labels.as_ref().unwrap();
    if a == 0 || b == a || order.len() == b {
        return Err(DataError::TooSmall(format!(
            "{} instances split into {}/{}/{}",
            order.len(),
            a,
            b - a,
            order.len() - b
        )));
    }
    let gather = |ids: &[usize]| {
        let mut values = Vec::with_capacity(ids.len() * len * ds.channels);
        let mut lab = Vec::with_capacity(ids.len());
        for &i in ids {
            let lo = i * len * ds.channels;
            values.extend_from_slice(&ds.values[lo..lo + len * ds.channels]);
            lab.push(labels[i]);
        }
        TimeSeriesDataset {
            values,
            rows: ids.len() * len,
            channels: ds.channels,
            labels: Some(lab),
            instance_length: Some(len),
            feature_names: ds.feature_names.clone(),
            frequency_note: ds.frequency_note.clone(),
        }
    };
    Ok((gather(&order[..a]), gather(&order[a..b]), gather(&order[b..])))
}

/// Sliding windows for forecasting, or instance pass-through for
/// classification. Forecasting windows and their targets are contiguous and
/// non-overlapping: no future rows leak into `x`.
pub fn make_windows(
    ds: &TimeSeriesDataset,
    t: usize,
    h: usize,
    window_stride: usize,
) -> Result<Vec<WindowSample>, DataError> {
    if let Some(labels) = &ds.labels {
        let len = ds
            .instance_length
            .ok_or_else(|| DataError::ConfigInvalid("labels without instance_length".into()))?;
        let mut out = Vec::with_capacity(labels.len());
        for (i, &lab) in labels.iter().enumerate() {
            let lo = i * len;
            out.push(WindowSample {
                x: ds.values[lo * ds.channels..(lo + len) * ds.channels].to_vec(),
                t: len,
                channels: ds.channels,
                target: Target::Class(lab),
                label_available: true,
                source_range: (lo, lo + len),
            });
        }
        return Ok(out);
    }
    if window_stride == 0 {
        return Err(DataError::ConfigInvalid("window_stride must be >= 1".into()));
    }
    if t + h > ds.rows {
        return Err(DataError::TooShort { len: ds.rows, t, h });
    }
    let count = (ds.rows - t - h) / window_stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * window_stride;
        let x = ds.values[start * ds.channels..(start + t) * ds.channels].to_vec();
        let y = ds.values[(start + t) * ds.channels..(start + t + h) * ds.channels].to_vec();
        out.push(WindowSample {
            x,
            t,
            channels: ds.channels,
            target: Target::Forecast(y),
            label_available: true,
            source_range: (start, start + t),
        });
    }
    Ok(out)
}

/// Per-channel z-score over the window's time axis (population std, clamped
/// below by `eps`). Returns the stats for later denormalization.
pub fn instance_normalize(x: &[f64], t: usize, channels: usize, eps: f64) -> (Vec<f64>, NormStats) {
    let mut mean = vec![0.0; channels];
    let mut std = vec![0.0; channels];
    for c in 0..channels {
        let mut m = 0.0;
        for ti in 0..t {
            m += x[ti * channels + c];
        }
        m /= t as f64;
        let mut v = 0.0;
        for ti in 0..t {
            let d = x[ti * channels + c] - m;
            v += d * d;
        }
        v /= t as f64;
        mean[c] = m;
        std[c] = v.sqrt().max(eps);
    }
    let mut out = vec![0.0; x.len()];
    for ti in 0..t {
        for c in 0..channels {
            out[ti * channels + c] = (x[ti * channels + c] - mean[c]) / std[c];
        }
    }
    (out, NormStats { mean, std })
}

/// Aggregate adjacent timesteps into flattened patch tokens.
///
/// The final timestep is replicated `stride` times, then windows of
/// `patch_len` are taken at `stride`, giving `num_patches` tokens. Each token
/// flattens channel-major: all of channel 0's timesteps, then channel 1's,
/// and so on (channel index varies slowest).
pub fn patch(
    x_norm: &[f64],
    t: usize,
    channels: usize,
    cfg: &PatchConfig,
) -> Result<Vec<f64>, DataError> {
    cfg.validate(t)?;
    let (p, s) = (cfg.patch_len, cfg.stride);
    let t_p = cfg.num_patches(t);
    let padded = t + s;
    let at = |ti: usize, c: usize| {
        let ti = ti.min(t - 1); // end-replication
        x_norm[ti * channels + c]
    };
    let mut out = vec![0.0; t_p * channels * p];
    for token in 0..t_p {
        let start = token * s;
        debug_assert!(start + p <= padded);
        for c in 0..channels {
            for j in 0..p {
                out[token * channels * p + c * p + j] = at(start + j, c);
            }
        }
    }
    Ok(out)
}

/// `[b, t, c] -> [b*c, t, 1]`: treat each channel as its own univariate
/// pseudo-sample (index `b * c + channel`). Exact inverse of
/// [`channel_independence_merge`].
pub fn channel_independence_split(values: &[f64], b: usize, t: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                out[(bi * c + ci) * t + ti] = values[bi * t * c + ti * c + ci];
            }
        }
    }
    out
}

/// `[b*c, t, 1] -> [b, t, c]`, inverse of [`channel_independence_split`].
pub fn channel_independence_merge(values: &[f64], b: usize, t: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                out[bi * t * c + ti * c + ci] = values[(bi * c + ci) * t + ti];
            }
        }
    }
    out
}

/// Flag exactly `ceil(fraction * n)` samples as label-available, chosen
/// uniformly with the given seed. For classification, at least one sample
/// per class stays available whenever the budget allows it.
pub fn label_subsample(
    samples: &mut [WindowSample],
    fraction: f64,
    seed: u64,
) -> Result<(), DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let n = samples.len();
    let budget = (fraction * n as f64).ceil() as usize;
    for s in samples.iter_mut() {
        s.label_available = false;
    }
    let mut rng = RngStream::new(seed);
    let mut picked = vec![false; n];
    let mut remaining = budget;

    // class coverage first, when the budget allows
    let classes: Vec<Option<usize>> = samples
        .iter()
        .map(|s| match s.target {
            Target::Class(k) => Some(k),
            _ => None,
        })
        .collect();
    if classes.iter().all(|c| c.is_some()) {
        let k = classes.iter().flatten().max().map(|&m| m + 1).unwrap_or(0);
        if budget >= k {
            for class in 0..k {
                let members: Vec<usize> = (0..n).filter(|&i| classes[i] == Some(class)).collect();
                if !members.is_empty() && remaining > 0 {
                    let pick = members[rng.below(members.len())];
                    picked[pick] = true;
                    remaining -= 1;
                }
            }
        }
    }

    let mut pool: Vec<usize> = (0..n).filter(|&i| !picked[i]).collect();
    rng.shuffle(&mut pool);
    for &i in pool.iter().take(remaining) {
        picked[i] = true;
    }
    for (s, &p) in samples.iter_mut().zip(&picked) {
        s.label_available = p;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
