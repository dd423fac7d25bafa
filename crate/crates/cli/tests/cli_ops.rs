//! Command-level behavior: artifacts, error classes, determinism, and the
//! evaluation/finetune/export surfaces, all at tiny scale.

use timedrl_cli::commands;
use timedrl_cli::config::{parse_config, Overrides};
use timedrl_cli::CliError;

const TINY_CLASSIFY: &str = r#"
seed = 11
precision = "f64"
synthetic.generator = "class-frequency"
synthetic.t_total = 2560
synthetic.instance_length = 64
synthetic.channels = 1
synthetic.classes = 2
synthetic.noise_sigma = 0.3
task.kind = "classify"
patch.length = 16
patch.stride = 8
encoder.d_model = 16
encoder.d_ff = 32
encoder.heads = 2
encoder.blocks = 1
train.epochs = 2
train.batch_size = 8
probe.epochs = 10
finetune.fractions = [0.25, 1.0]
finetune.epochs = 5
"#;

const TINY_FORECAST: &str = r#"
seed = 11
precision = "f64"
synthetic.generator = "ar-process"
synthetic.t_total = 512
synthetic.channels = 2
synthetic.noise_sigma = 0.1
task.kind = "forecast"
task.horizon = 8
window.length = 32
window.stride = 4
patch.length = 8
patch.stride = 4
encoder.d_model = 16
encoder.d_ff = 32
encoder.heads = 2
encoder.blocks = 1
train.epochs = 2
train.batch_size = 8
probe.epochs = 10
"#;

fn cfg(text: &str) -> timedrl_cli::config::RunConfig {
    parse_config(text, &Overrides::default()).unwrap()
}

#[test]
fn pretrain_writes_checkpoint_and_loss_curves() {
    let config = cfg(TINY_CLASSIFY);
    let dir = tempfile::tempdir().unwrap();
    let artifacts = commands::cmd_pretrain(&config, dir.path()).unwrap();
    assert!(artifacts.checkpoint.exists());

    let csv = std::fs::read_to_string(&artifacts.losses).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,L_P1,L_P2,L_P,L_C1,L_C2,L_C,total,split"
    );
    // one train and one val row per epoch
    assert_eq!(lines.count(), 2 * config.train.epochs);
    assert!(dir.path().join("run_meta.json").exists());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let err = parse_config("train.lamda = 0.5", &Overrides::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("train.lamda"));
}

#[test]
fn eval_task_mismatch_is_rejected() {
    let forecast_cfg = cfg(TINY_FORECAST);
    let dir = tempfile::tempdir().unwrap();
    let artifacts = commands::cmd_pretrain(&forecast_cfg, dir.path()).unwrap();

    // same checkpoint, classification config
    let classify_cfg = cfg(TINY_CLASSIFY);
    let err = commands::cmd_eval(&classify_cfg, &artifacts.checkpoint, dir.path()).unwrap_err();
    assert!(matches!(err, CliError::TaskMismatch(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn eval_reports_task_metrics_and_is_repeatable() {
    let config = cfg(TINY_FORECAST);
    let dir = tempfile::tempdir().unwrap();
    let artifacts = commands::cmd_pretrain(&config, dir.path()).unwrap();

    let r1 = commands::cmd_eval(&config, &artifacts.checkpoint, dir.path()).unwrap();
    assert!(r1.metrics.contains_key("mse") && r1.metrics.contains_key("mae"));

    let r2 = commands::cmd_eval(&config, &artifacts.checkpoint, dir.path()).unwrap();
    assert_eq!(r1.metrics, r2.metrics);

    // artifacts exist: metrics document + ledger with the eval row
    let ledger = std::fs::read_to_string(dir.path().join("ledger.csv")).unwrap();
    assert!(ledger.lines().count() >= 3); // header + two eval rows
    assert!(dir.path().join("metrics.json").exists());
}

#[test]
fn finetune_grid_covers_fractions_and_inits() {
    let config = cfg(TINY_CLASSIFY);
    let dir = tempfile::tempdir().unwrap();
    let artifacts = commands::cmd_pretrain(&config, dir.path()).unwrap();

    let reports =
        commands::cmd_finetune(&config, Some(artifacts.checkpoint.as_path()), dir.path()).unwrap();
    assert_eq!(reports.len(), 4); // 2 fractions x {pretrained, random}
    for fraction in [0.25, 1.0] {
        for init in ["pretrained", "random"] {
            assert!(
                reports
                    .iter()
                    .any(|r| r.label_fraction == fraction && r.init_mode == init),
                "missing arm ({fraction}, {init})"
            );
        }
    }
    let grid = std::fs::read_to_string(dir.path().join("finetune_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 5); // header + 4 arms
    assert!(grid.contains("pretrained") && grid.contains("random"));

    // without a checkpoint only the supervised baseline arms run
    let dir2 = tempfile::tempdir().unwrap();
    let baseline = commands::cmd_finetune(&config, None, dir2.path()).unwrap();
    assert_eq!(baseline.len(), 2);
    assert!(baseline.iter().all(|r| r.init_mode == "random"));
}

#[test]
fn finetune_rejects_zero_fraction() {
    let text = format!("{TINY_CLASSIFY}\n");
    let text = text.replace("finetune.fractions = [0.25, 1.0]", "finetune.fractions = [0.0, 1.0]");
    let config = cfg(&text);
    let dir = tempfile::tempdir().unwrap();
    let err = commands::cmd_finetune(&config, None, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn export_embeddings_shapes_and_anisotropy_ranges() {
    let config = cfg(TINY_CLASSIFY);
    let dir = tempfile::tempdir().unwrap();
    let artifacts = commands::cmd_pretrain(&config, dir.path()).unwrap();
    let exported = commands::cmd_export_embeddings(&config, &artifacts.checkpoint, dir.path()).unwrap();

    let csv = std::fs::read_to_string(&exported.embeddings).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert_eq!(header.split(',').count(), 1 + 16); // sample + d_model dims
    assert_eq!(lines.count(), 40); // all 40 instances

    let summary: std::collections::BTreeMap<String, f64> =
        serde_json::from_str(&std::fs::read_to_string(&exported.anisotropy).unwrap()).unwrap();
    for mode in ["cls", "last", "gap", "all"] {
        let v = summary[mode];
        assert!((-1.0..=1.0).contains(&v), "{mode} anisotropy {v}");
    }
}

#[test]
fn gen_data_roundtrips_through_the_csv_loader() {
    let config = cfg(TINY_CLASSIFY);
    let dir = tempfile::tempdir().unwrap();
    let csv_path = commands::cmd_gen_data(&config, dir.path()).unwrap();

    // point a csv-sourced config at the generated file and pretrain from it
    let csv_text = format!(
        r#"
seed = 11
precision = "f64"
data.source = "csv"
data.csv_path = "{}"
data.label_column = "label"
data.instance_length = 64
task.kind = "classify"
patch.length = 16
patch.stride = 8
encoder.d_model = 16
encoder.d_ff = 32
encoder.heads = 2
encoder.blocks = 1
train.epochs = 1
train.batch_size = 8
probe.epochs = 5
"#,
        csv_path.display()
    );
    let csv_cfg = cfg(&csv_text);
    let out = tempfile::tempdir().unwrap();
    let artifacts = commands::cmd_pretrain(&csv_cfg, out.path()).unwrap();
    assert!(artifacts.checkpoint.exists());
}

#[test]
fn binary_exit_codes_are_documented_classes() {
    use std::process::Command;
    let bin = env!("CARGO_BIN_EXE_timedrl");
    let dir = tempfile::tempdir().unwrap();

    // config error -> 2
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "train.lamda = 0.5\n").unwrap();
    let status = Command::new(bin)
        .args(["pretrain", "--config"])
        .arg(&bad_cfg)
        .args(["--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // data error (CSV missing a label column for classification) -> 3
    let csv = dir.path().join("data.csv");
    std::fs::write(&csv, "a\nnot_a_number\n").unwrap();
    let data_cfg = dir.path().join("data.toml");
    std::fs::write(
        &data_cfg,
        format!(
            "data.source = \"csv\"\ndata.csv_path = \"{}\"\ntask.kind = \"forecast\"\n",
            csv.display()
        ),
    )
    .unwrap();
    let status = Command::new(bin)
        .args(["pretrain", "--config"])
        .arg(&data_cfg)
        .args(["--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    // success -> 0 (smallest viable pretrain)
    let ok_cfg = dir.path().join("ok.toml");
    std::fs::write(
        &ok_cfg,
        r#"
synthetic.generator = "ar-process"
synthetic.t_total = 256
task.kind = "forecast"
task.horizon = 4
window.length = 32
window.stride = 8
patch.length = 8
patch.stride = 4
encoder.d_model = 16
encoder.d_ff = 16
encoder.heads = 2
encoder.blocks = 1
train.epochs = 1
train.batch_size = 4
"#,
    )
    .unwrap();
    let status = Command::new(bin)
        .args(["pretrain", "--config"])
        .arg(&ok_cfg)
        .args(["--out"])
        .arg(dir.path().join("run").as_os_str())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
}

#[test]
fn pooled_pretraining_changes_probe_embedding_mode() {
    let text = format!("{TINY_CLASSIFY}\npretext.pooling = \"gap\"\n");
    let config = cfg(&text);
    let dir = tempfile::tempdir().unwrap();
    let artifacts = commands::cmd_pretrain(&config, dir.path()).unwrap();
    let report = commands::cmd_eval(&config, &artifacts.checkpoint, dir.path()).unwrap();
    assert_eq!(report.embedding_mode, "gap");
}
