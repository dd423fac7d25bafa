use super::*;
use crate::data::PatchConfig;
use crate::encoder::init_encoder;
use crate::trainer::Model;
use approx::assert_abs_diff_eq;

fn config() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        blocks: 1,
        heads: 2,
        d_ff: 16,
        dropout_embed: 0.1,
        dropout_attn: 0.0,
        dropout_ff: 0.0,
        patch: PatchConfig { patch_len: 4, stride: 4 },
        channels: 1,
        window: 16,
    }
}

fn class_window(label: usize, phase: f64, t: usize) -> WindowSample {
    let period = if label == 0 { 16.0 } else { 4.0 };
    let x: Vec<f64> = (0..t)
        .map(|i| (2.0 * std::f64::consts::PI * i as f64 / period + phase).sin())
        .collect();
    WindowSample {
        x,
        t,
        channels: 1,
        target: Target::Class(label),
        label_available: true,
        source_range: (0, t),
    }
}

fn class_windows(n: usize, t: usize) -> Vec<WindowSample> {
    (0..n).map(|i| class_window(i % 2, i as f64 * 0.7, t)).collect()
}

fn forecast_window(start: usize, t: usize, h: usize) -> WindowSample {
    let series = |i: usize| (2.0 * std::f64::consts::PI * i as f64 / 8.0).sin() + 3.0;
    WindowSample {
        x: (start..start + t).map(series).collect(),
        t,
        channels: 1,
        target: Target::Forecast((start + t..start + t + h).map(series).collect()),
        label_available: true,
        source_range: (start, start + t),
    }
}

#[test]
fn denormalize_identity_and_roundtrip() {
    let stats = NormStats { mean: vec![0.0], std: vec![1.0] };
    let pred = vec![1.0, -2.0, 3.0];
    assert_eq!(denormalize(&pred, 1, &stats).unwrap(), pred);

    // normalize then denormalize on a random window
    let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() * 5.0 + 2.0).collect();
    let (normed, stats) = crate::data::instance_normalize(&x, 20, 1, 1e-5);
    let back = denormalize(&normed, 1, &stats).unwrap();
    for (a, b) in x.iter().zip(&back) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-6);
    }

    // constant channel: std clamped to eps, prediction scales by eps
    let (_, stats) = crate::data::instance_normalize(&[5.0, 5.0], 2, 1, 1e-5);
    let out = denormalize(&[2.0], 1, &stats).unwrap();
    assert_abs_diff_eq!(out[0], 2.0 * 1e-5 + 5.0, epsilon = 1e-15);

    assert!(matches!(
        denormalize(&[1.0], 2, &stats),
        Err(EvalError::StatsMismatch { .. })
    ));
}

#[test]
fn forecast_probe_reports_metrics_and_freezes_encoder() {
    let cfg = config();
    let encoder = init_encoder::<f64>(&cfg, 3).unwrap();
    let before: Vec<u8> = {
        let model = Model { encoder: encoder.clone(), heads: dummy_heads(&cfg) };
        model.param_bytes()
    };
    let train: Vec<WindowSample> = (0..24).map(|i| forecast_window(i, 16, 4)).collect();
    let val: Vec<WindowSample> = (24..32).map(|i| forecast_window(i, 16, 4)).collect();
    let test: Vec<WindowSample> = (32..40).map(|i| forecast_window(i, 16, 4)).collect();
    let probe = ProbeConfig { epochs: 40, ..Default::default() };
    let (m, warning) = linear_eval_forecast(&encoder, &cfg, &train, &val, &test, &probe).unwrap();
    assert!(warning.is_none());
    assert!(m.contains_key("mse") && m.contains_key("mae"));
    assert!(m["mse"].is_finite() && m["mse"] >= 0.0);

    let after: Vec<u8> = {
        let model = Model { encoder: encoder.clone(), heads: dummy_heads(&cfg) };
        model.param_bytes()
    };
    assert_eq!(before, after);

    // a clean periodic series is very predictable from frozen embeddings
    let naive: f64 = {
        let mut y = Vec::new();
        let mut p = Vec::new();
        for w in &test {
            let Target::Forecast(t) = &w.target else { unreachable!() };
            let last = w.x[w.x.len() - 1];
            y.extend(t.iter().copied());
            p.extend(std::iter::repeat_n(last, t.len()));
        }
        compute_forecast_metrics(&y, &p).unwrap().0
    };
    assert!(m["mse"] < naive, "probe mse {} vs naive {naive}", m["mse"]);
}

fn dummy_heads(cfg: &EncoderConfig) -> crate::pretext::PretextHeads<f64> {
    crate::pretext::PretextHeads::init(
        cfg.token_width(),
        cfg.d_model,
        cfg.d_model,
        &mut RngStream::new(0),
    )
    .unwrap()
}

#[test]
fn classify_probe_separates_frequency_classes() {
    let cfg = config();
    let encoder = init_encoder::<f64>(&cfg, 3).unwrap();
    let train = class_windows(40, 16);
    let val = class_windows(10, 16);
    let test = class_windows(16, 16);
    let probe = ProbeConfig { epochs: 60, ..Default::default() };
    let (m, _) = linear_eval_classify(
        &encoder,
        &cfg,
        &train,
        &val,
        &test,
        2,
        EmbeddingMode::Cls,
        &probe,
    )
    .unwrap();
    assert!(m["acc"] >= 0.0 && m["acc"] <= 1.0);
    assert!(m["mf1"] >= 0.0 && m["mf1"] <= 1.0);
    assert!(m["kappa"] >= -1.0 && m["kappa"] <= 1.0);
}

#[test]
fn single_class_test_set_reports_kappa_zero_with_warning() {
    let cfg = config();
    let encoder = init_encoder::<f64>(&cfg, 3).unwrap();
    let train = class_windows(20, 16);
    let test: Vec<WindowSample> = (0..6).map(|i| class_window(0, i as f64, 16)).collect();
    let probe = ProbeConfig { epochs: 5, ..Default::default() };
    let (m, warning) = linear_eval_classify(
        &encoder,
        &cfg,
        &train,
        &[],
        &test,
        2,
        EmbeddingMode::Cls,
        &probe,
    )
    .unwrap();
    assert_eq!(m["kappa"], 0.0);
    assert!(warning.unwrap().contains("single-class"));
}

#[test]
fn fine_tune_runs_and_respects_label_flags() {
    let cfg = config();
    let pretrained = Model::<f64>::init(&cfg, cfg.d_model, 1).unwrap();
    let mut train = class_windows(20, 16);
    crate::data::label_subsample(&mut train, 0.5, 9).unwrap();
    let test = class_windows(8, 16);
    let probe = ProbeConfig { epochs: 8, batch_size: 8, ..Default::default() };
    let (m, _) = fine_tune(
        Some(&pretrained),
        &cfg,
        &TaskSpec::Classify { classes: 2 },
        &train,
        &[],
        &test,
        EmbeddingMode::Cls,
        &probe,
    )
    .unwrap();
    assert!(m.contains_key("acc"));

    // all labels withheld -> error
    for s in train.iter_mut() {
        s.label_available = false;
    }
    assert!(matches!(
        fine_tune(
            Some(&pretrained),
            &cfg,
            &TaskSpec::Classify { classes: 2 },
            &train,
            &[],
            &test,
            EmbeddingMode::Cls,
            &probe,
        ),
        Err(EvalError::NoLabeledSamples)
    ));
}

#[test]
fn fine_tune_forecast_task_reports_mse() {
    let cfg = config();
    let train: Vec<WindowSample> = (0..16).map(|i| forecast_window(i, 16, 4)).collect();
    let test: Vec<WindowSample> = (16..22).map(|i| forecast_window(i, 16, 4)).collect();
    let probe = ProbeConfig { epochs: 5, batch_size: 8, ..Default::default() };
    let (m, _) = fine_tune::<f64>(
        None,
        &cfg,
        &TaskSpec::Forecast { horizon: 4 },
        &train,
        &[],
        &test,
        EmbeddingMode::Cls,
        &probe,
    )
    .unwrap();
    assert!(m["mse"].is_finite());
    assert!(m["mae"].is_finite());
}

#[test]
fn eval_mode_embeddings_are_deterministic() {
    let cfg = config();
    let encoder = init_encoder::<f64>(&cfg, 3).unwrap();
    let samples = class_windows(4, 16);
    let a = instance_embeddings(&encoder, &cfg, &samples, EmbeddingMode::Cls).unwrap();
    let b = instance_embeddings(&encoder, &cfg, &samples, EmbeddingMode::Cls).unwrap();
    assert_eq!(a, b);
    // duplicated samples embed identically
    let dup = vec![samples[0].clone(), samples[0].clone()];
    let e = instance_embeddings(&encoder, &cfg, &dup, EmbeddingMode::Cls).unwrap();
    assert_eq!(e[0], e[1]);
}
