use super::*;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use std::io::Write;

fn forecast_ds(rows: usize, channels: usize) -> TimeSeriesDataset {
    TimeSeriesDataset {
        values: (0..rows * channels).map(|i| i as f64).collect(),
        rows,
        channels,
        labels: None,
        instance_length: None,
        feature_names: (0..channels).map(|c| format!("ch{c}")).collect(),
        frequency_note: String::new(),
    }
}

fn class_ds(n: usize, len: usize, k: usize) -> TimeSeriesDataset {
    TimeSeriesDataset {
        values: (0..n * len).map(|i| (i % 17) as f64).collect(),
        rows: n * len,
        channels: 1,
        labels: Some((0..n).map(|i| i % k).collect()),
        instance_length: Some(len),
        feature_names: vec!["ch0".into()],
        frequency_note: String::new(),
    }
}

fn write_csv(content: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(content.as_bytes()).unwrap();
    f
}

#[test]
fn load_csv_basic_shape() {
    let f = write_csv("a,b\n1.0,2.0\n3.0,4.0\n5.0,6.0\n");
    let ds = load_csv(
        f.path(),
        &CsvSchema { has_header: true, ..Default::default() },
    )
    .unwrap();
    assert_eq!((ds.rows, ds.channels), (3, 2));
    assert_eq!(ds.values, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(ds.feature_names, vec!["a", "b"]);
}

#[test]
fn load_csv_non_numeric_cell_names_row_and_column() {
    let f = write_csv("a,b\n1.0,2.0\n3.0,oops\n");
    let err = load_csv(
        f.path(),
        &CsvSchema { has_header: true, ..Default::default() },
    )
    .unwrap_err();
    match err {
        DataError::ParseError { row, column, .. } => {
            assert_eq!(row, 3);
            assert_eq!(column, "b");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn load_csv_rejects_non_finite() {
    let f = write_csv("a\n1.0\nNaN\n");
    assert!(matches!(
        load_csv(f.path(), &CsvSchema { has_header: true, ..Default::default() }),
        Err(DataError::ParseError { row: 3, .. })
    ));
}

#[test]
fn load_csv_extracts_label_column() {
    let f = write_csv("v,label\n1.0,0\n2.0,0\n3.0,1\n4.0,1\n");
    let ds = load_csv(
        f.path(),
        &CsvSchema {
            has_header: true,
            label_column: Some("label".into()),
            instance_length: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(ds.channels, 1);
    assert_eq!(ds.labels, Some(vec![0, 1]));
    assert_eq!(ds.values, vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn load_csv_drops_timestamp_column() {
    let f = write_csv("ts,v\n100,1.5\n101,2.5\n");
    let ds = load_csv(
        f.path(),
        &CsvSchema {
            has_header: true,
            timestamp_column: Some("ts".into()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(ds.channels, 1);
    assert_eq!(ds.values, vec![1.5, 2.5]);
}

#[test]
fn split_100_rows_is_60_20_20() {
    let ds = forecast_ds(100, 1);
    let (tr, va, te) = split_train_val_test(&ds, (0.6, 0.2, 0.2), 0).unwrap();
    assert_eq!((tr.rows, va.rows, te.rows), (60, 20, 20));
    // chronological: train is the prefix, test the suffix
    assert_eq!(tr.values[0], 0.0);
    assert_eq!(va.values[0], 60.0);
    assert_eq!(te.values[0], 80.0);
}

#[test]
fn split_10_rows_is_6_2_2() {
    let ds = forecast_ds(10, 2);
    let (tr, va, te) = split_train_val_test(&ds, (0.6, 0.2, 0.2), 0).unwrap();
    assert_eq!((tr.rows, va.rows, te.rows), (6, 2, 2));
}

#[test]
fn split_rejects_bad_ratios() {
    let ds = forecast_ds(100, 1);
    assert!(matches!(
        split_train_val_test(&ds, (0.5, 0.5, 0.5), 0),
        Err(DataError::ConfigInvalid(_))
    ));
}

#[test]
fn split_classification_partitions_instances() {
    let ds = class_ds(20, 4, 2);
    let (tr, va, te) = split_train_val_test(&ds, (0.6, 0.2, 0.2), 7).unwrap();
    let n = |d: &TimeSeriesDataset| d.labels.as_ref().unwrap().len();
    assert_eq!(n(&tr) + n(&va) + n(&te), 20);
    // stratified: both classes appear in train
    let tl = tr.labels.as_ref().unwrap();
    assert!(tl.contains(&0) && tl.contains(&1));
}

#[test]
fn make_windows_counts() {
    assert_eq!(make_windows(&forecast_ds(10, 1), 4, 2, 1).unwrap().len(), 5);
    assert_eq!(make_windows(&forecast_ds(6, 1), 4, 2, 1).unwrap().len(), 1);
    assert!(matches!(
        make_windows(&forecast_ds(5, 1), 4, 2, 1),
        Err(DataError::TooShort { len: 5, t: 4, h: 2 })
    ));
}

#[test]
fn windows_are_leak_free() {
    let ds = forecast_ds(30, 2);
    for w in make_windows(&ds, 8, 3, 2).unwrap() {
        let Target::Forecast(y) = &w.target else { panic!() };
        // x covers rows [start, start+8); y starts exactly at start+8
        let last_x = w.x[w.x.len() - 2]; // channel 0 of final row
        let first_y = y[0];
        assert_eq!(first_y, last_x + 2.0); // rows are consecutive even numbers per channel
        assert_eq!(w.source_range.1 - w.source_range.0, 8);
    }
}

#[test]
fn instance_normalize_constant_channel() {
    let (out, stats) = instance_normalize(&[5.0, 5.0, 5.0], 3, 1, 1e-5);
    assert_eq!(out, vec![0.0, 0.0, 0.0]);
    assert_eq!(stats.std[0], 1e-5);
}

#[test]
fn instance_normalize_hand_zscore() {
    let (out, stats) = instance_normalize(&[1.0, 3.0], 2, 1, 1e-5);
    assert_abs_diff_eq!(out[0], -1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(out[1], 1.0, epsilon = 1e-12);
    assert_eq!(stats.mean[0], 2.0);
    assert_eq!(stats.std[0], 1.0); // population std
}

#[test]
fn instance_normalize_zero_means() {
    let x: Vec<f64> = (0..40).map(|i| ((i * 7919) % 101) as f64 * 0.37).collect();
    let (out, _) = instance_normalize(&x, 20, 2, 1e-5);
    for c in 0..2 {
        let mean: f64 = (0..20).map(|t| out[t * 2 + c]).sum::<f64>() / 20.0;
        assert!(mean.abs() < 1e-9);
    }
}

#[test]
fn patch_counts_match_formula() {
    let cfg = PatchConfig { patch_len: 16, stride: 8 };
    assert_eq!(cfg.num_patches(512), 64);
    let cfg = PatchConfig { patch_len: 8, stride: 8 };
    assert_eq!(cfg.num_patches(8), 2);
}

#[test]
fn patch_unit_geometry_reproduces_series() {
    // P=1, S=1, C=1: tokens are the series values plus one replicated tail
    let x = [1.0, 2.0, 3.0, 4.0];
    let cfg = PatchConfig { patch_len: 1, stride: 1 };
    let tokens = patch(&x, 4, 1, &cfg).unwrap();
    assert_eq!(cfg.num_patches(4), 5);
    assert_eq!(tokens, vec![1.0, 2.0, 3.0, 4.0, 4.0]);
}

#[test]
fn patch_channel_major_layout() {
    // T=2, C=2, P=2, S=2: one real token + one padded
    let x = [1.0, 10.0, 2.0, 20.0]; // rows: (1,10), (2,20)
    let cfg = PatchConfig { patch_len: 2, stride: 2 };
    let tokens = patch(&x, 2, 2, &cfg).unwrap();
    // token 0: ch0 [1,2], ch1 [10,20]; token 1 starts at t=2 -> replicated row (2,20)
    assert_eq!(tokens, vec![1.0, 2.0, 10.0, 20.0, 2.0, 2.0, 20.0, 20.0]);
}

#[test]
fn patch_invalid_config_errors() {
    let x = [0.0; 8];
    assert!(matches!(
        patch(&x, 8, 1, &PatchConfig { patch_len: 2, stride: 3 }),
        Err(DataError::ConfigInvalid(_))
    ));
}

#[test]
fn channel_independence_shapes_and_roundtrip() {
    // B=2, T=4, C=3
    let values: Vec<f64> = (0..24).map(|i| i as f64).collect();
    let split = channel_independence_split(&values, 2, 4, 3);
    assert_eq!(split.len(), 24); // [6, 4, 1]
    // pseudo-sample 0 is (b=0, c=0): rows 0..4 of channel 0
    assert_eq!(&split[0..4], &[0.0, 3.0, 6.0, 9.0]);
    let merged = channel_independence_merge(&split, 2, 4, 3);
    assert_eq!(merged, values);
}

#[test]
fn augment_jitter_sigma_zero_is_identity() {
    let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let mut rng = RngStream::new(1);
    let p = AugmentParams { jitter_sigma: 0.0, ..Default::default() };
    let y = augment(&x, 6, 2, AugmentMethod::Jitter, &p, &mut rng).unwrap();
    assert_eq!(y, x);
}

#[test]
fn augment_masking_ratio_one_zeroes_everything() {
    let x = vec![1.0; 10];
    let mut rng = RngStream::new(1);
    let p = AugmentParams { mask_ratio: 1.0, ..Default::default() };
    let y = augment(&x, 10, 1, AugmentMethod::Masking, &p, &mut rng).unwrap();
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn augment_permutation_preserves_multiset() {
    let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
    let mut rng = RngStream::new(5);
    let p = AugmentParams { segments: 4, ..Default::default() };
    let y = augment(&x, 8, 1, AugmentMethod::Permutation, &p, &mut rng).unwrap();
    let mut xs = x.clone();
    let mut ys = y.clone();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    assert_eq!(xs, ys);
}

#[test]
fn augment_rotation_is_channel_permutation_up_to_sign() {
    let t = 5;
    let c = 3;
    let x: Vec<f64> = (0..t * c).map(|i| (i as f64 + 1.0) * 0.5).collect();
    let mut rng = RngStream::new(9);
    let y = augment(&x, t, c, AugmentMethod::Rotation, &AugmentParams::default(), &mut rng).unwrap();
    // every output channel matches some input channel up to sign
    for co in 0..c {
        let out_ch: Vec<f64> = (0..t).map(|ti| y[ti * c + co]).collect();
        let matched = (0..c).any(|ci| {
            let in_ch: Vec<f64> = (0..t).map(|ti| x[ti * c + ci]).collect();
            out_ch.iter().zip(&in_ch).all(|(a, b)| a == b)
                || out_ch.iter().zip(&in_ch).all(|(a, b)| *a == -b)
        });
        assert!(matched, "channel {co} is not a signed copy of any input channel");
    }
}

#[test]
fn augment_unknown_method_errors() {
    assert!(matches!(
        AugmentMethod::parse("rotate"),
        Err(DataError::UnknownMethod(_))
    ));
}

#[test]
fn label_subsample_counts_and_determinism() {
    let ds = class_ds(10, 2, 2);
    let mut samples = make_windows(&ds, 2, 0, 1).unwrap();

    label_subsample(&mut samples, 1.0, 3).unwrap();
    assert!(samples.iter().all(|s| s.label_available));

    label_subsample(&mut samples, 0.5, 3).unwrap();
    let flags: Vec<bool> = samples.iter().map(|s| s.label_available).collect();
    assert_eq!(flags.iter().filter(|&&f| f).count(), 5);

    let mut samples2 = make_windows(&ds, 2, 0, 1).unwrap();
    label_subsample(&mut samples2, 0.5, 3).unwrap();
    let flags2: Vec<bool> = samples2.iter().map(|s| s.label_available).collect();
    assert_eq!(flags, flags2);

    assert!(matches!(
        label_subsample(&mut samples, 0.0, 3),
        Err(DataError::InvalidFraction(_))
    ));
}

#[test]
fn label_subsample_covers_every_class_when_feasible() {
    let ds = class_ds(30, 2, 3);
    let mut samples = make_windows(&ds, 2, 0, 1).unwrap();
    label_subsample(&mut samples, 0.1, 11).unwrap(); // 3 available, 3 classes
    for k in 0..3 {
        assert!(
            samples
                .iter()
                .any(|s| s.label_available && s.target == Target::Class(k)),
            "class {k} lost all labels"
        );
    }
}

proptest! {
    #[test]
    fn augmentations_preserve_shape(
        seed in 0u64..1000,
        t in 4usize..40,
        c in 1usize..4,
        method_idx in 0usize..6,
    ) {
        let x: Vec<f64> = (0..t * c).map(|i| (i as f64).sin()).collect();
        let mut rng = RngStream::new(seed);
        let y = augment(&x, t, c, AugmentMethod::ALL[method_idx], &AugmentParams::default(), &mut rng).unwrap();
        prop_assert_eq!(y.len(), x.len());
    }

    #[test]
    fn patch_reconstruction_non_overlapping(
        t_blocks in 1usize..8,
        p in 1usize..6,
        c in 1usize..3,
    ) {
        // S = P and P | T: the first T/P tokens tile the series exactly
        let t = t_blocks * p;
        let x: Vec<f64> = (0..t * c).map(|i| (i as f64 * 0.13).cos()).collect();
        let cfg = PatchConfig { patch_len: p, stride: p };
        let tokens = patch(&x, t, c, &cfg).unwrap();
        for block in 0..t_blocks {
            for ci in 0..c {
                for j in 0..p {
                    let from_token = tokens[block * c * p + ci * p + j];
                    let from_series = x[(block * p + j) * c + ci];
                    prop_assert_eq!(from_token, from_series);
                }
            }
        }
    }

    #[test]
    fn splits_partition_rows(rows in 10usize..200) {
        let ds = forecast_ds(rows, 1);
        let (tr, va, te) = split_train_val_test(&ds, (0.6, 0.2, 0.2), 0).unwrap();
        prop_assert_eq!(tr.rows + va.rows + te.rows, rows);
        let mut all = tr.values.clone();
        all.extend(&va.values);
        all.extend(&te.values);
        prop_assert_eq!(all, ds.values); // order preserved, no overlap
    }
}
