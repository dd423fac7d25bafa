//! CSV ingestion: UTF-8, comma-delimited, optional header, decimal-point
//! reals. A timestamp column (if named) is dropped from the values; a label
//! column is extracted as per-instance class ids.

use super::{DataError, TimeSeriesDataset};
use std::path::Path;

/// How to interpret the file's columns. With a header, `timestamp_column`
/// and `label_column` name columns; without one, they are 0-based indices in
/// string form.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub has_header: bool,
    pub timestamp_column: Option<String>,
    pub label_column: Option<String>,
    /// Rows per instance; required when a label column is present.
    pub instance_length: Option<usize>,
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<TimeSeriesDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(false)
        .from_path(path)
        .map_err(|e| DataError::ParseError {
            row: 0,
            column: String::new(),
            reason: e.to_string(),
        })?;

    let headers: Vec<String> = if schema.has_header {
        reader
            .headers()
            .map_err(|e| DataError::ParseError {
                row: 0,
                column: String::new(),
                reason: e.to_string(),
            })?
            .iter()
            .map(|s| s.to_string())
            .collect()
    } else {
        Vec::new()
    };

    let resolve = |spec: &Option<String>, what: &str| -> Result<Option<usize>, DataError> {
        match spec {
            None => Ok(None),
            Some(name) => {
                if schema.has_header {
                    headers
                        .iter()
                        .position(|h| h == name)
                        .map(Some)
                        .ok_or_else(|| DataError::ConfigInvalid(format!("{what} column '{name}' not found")))
                } else {
                    name.parse::<usize>().map(Some).map_err(|_| {
                        DataError::ConfigInvalid(format!(
                            "{what} column '{name}' must be an index when there is no header"
                        ))
                    })
                }
            }
        }
    };
    let ts_col = resolve(&schema.timestamp_column, "timestamp")?;
    let label_col = resolve(&schema.label_column, "label")?;
    if label_col.is_some() && schema.instance_length.is_none() {
        return Err(DataError::ConfigInvalid(
            "label column requires instance_length".into(),
        ));
    }

    let mut values: Vec<f64> = Vec::new();
    let mut row_labels: Vec<usize> = Vec::new();
    let mut channels = 0usize;
    let mut feature_names: Vec<String> = Vec::new();
    let mut n_rows = 0usize;
    let header_offset = usize::from(schema.has_header);

    for (i, record) in reader.records().enumerate() {
        let row_no = i + 1 + header_offset; // 1-based file row for diagnostics
        let record = record.map_err(|e| DataError::ParseError {
            row: row_no,
            column: String::new(),
            reason: e.to_string(),
        })?;
        let mut row_vals = Vec::new();
        for (col, field) in record.iter().enumerate() {
            if Some(col) == ts_col {
                continue;
            }
            let col_name = || {
                if schema.has_header {
                    headers.get(col).cloned().unwrap_or_else(|| col.to_string())
                } else {
                    col.to_string()
                }
            };
            if Some(col) == label_col {
                let label = field.trim().parse::<usize>().map_err(|_| DataError::ParseError {
                    row: row_no,
                    column: col_name(),
                    reason: format!("label '{field}' is not a class id"),
                })?;
                row_labels.push(label);
                continue;
            }
            let v = field.trim().parse::<f64>().map_err(|_| DataError::ParseError {
                row: row_no,
                column: col_name(),
                reason: format!("'{field}' is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(DataError::ParseError {
                    row: row_no,
                    column: col_name(),
                    reason: format!("non-finite value {v}"),
                });
            }
            row_vals.push(v);
            if n_rows == 0 && schema.has_header {
                feature_names.push(col_name());
            }
        }
        if n_rows == 0 {
            channels = row_vals.len();
        } else if row_vals.len() != channels {
            return Err(DataError::ParseError {
                row: row_no,
                column: String::new(),
                reason: format!("expected {channels} value columns, got {}", row_vals.len()),
            });
        }
        values.extend_from_slice(&row_vals);
        n_rows += 1;
    }
    if n_rows == 0 || channels == 0 {
        return Err(DataError::EmptyDataset);
    }
    if feature_names.is_empty() {
        feature_names = (0..channels).map(|c| format!("ch{c}")).collect();
    }

    let (labels, instance_length) = match label_col {
        None => (None, None),
        Some(_) => {
            let len = schema.instance_length.unwrap();
            if len == 0 || !n_rows.is_multiple_of(len) {
                return Err(DataError::ConfigInvalid(format!(
                    "{n_rows} rows not divisible into instances of {len}"
                )));
            }
            let mut labels = Vec::with_capacity(n_rows / len);
            for (inst, block) in row_labels.chunks(len).enumerate() {
                let first = block[0];
                if block.iter().any(|&l| l != first) {
                    return Err(DataError::ConfigInvalid(format!(
                        "instance {inst} has mixed labels"
                    )));
                }
                labels.push(first);
            }
            (Some(labels), Some(len))
        }
    };

    Ok(TimeSeriesDataset {
        values,
        rows: n_rows,
        channels,
        labels,
        instance_length,
        feature_names,
        frequency_note: String::new(),
    })
}
