//! End-to-end checks of the command-line surface: file formats on disk,
//! exit codes, and report/CSV consistency.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tverseg::data::read_volume;
use tverseg::harness::EvalReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tverseg"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn tverseg");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_tiny_train_config(dir: &Path) -> PathBuf {
    let path = dir.join("train.json");
    let config = serde_json::json!({
        "epochs": 2,
        "tversky": { "alpha": 0.3, "beta": 0.7 },
        "net": {
            "input_shape": [8, 8, 8],
            "in_channels": 2,
            "levels": 1,
            "base_features": 2,
            "seed": 5
        },
        "synth": {
            "volume_shape": [8, 8, 8],
            "channels": 2,
            "foreground_fraction_target": 0.05,
            "lesion_count_range": [1, 1],
            "lesion_radius_range": [1.0, 2.0],
            "noise_sigma": 0.3,
            "channel_contrasts": [
                { "background_mean": 0.0, "lesion_mean": 1.0 },
                { "background_mean": 0.0, "lesion_mean": 0.6 }
            ],
            "seed": 3
        },
        "threshold": 0.5,
        "seeds": [1],
        "subjects": 4
    });
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn gen_writes_readable_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("synth.json");
    let config = serde_json::json!({
        "volume_shape": [16, 16, 16],
        "foreground_fraction_target": 0.01,
        "lesion_count_range": [1, 2],
        "lesion_radius_range": [1.5, 2.5],
        "noise_sigma": 0.4,
        "channel_contrasts": [
            { "background_mean": 0.0, "lesion_mean": 1.0 },
            { "background_mean": 0.0, "lesion_mean": 0.7 },
            { "background_mean": 0.0, "lesion_mean": 1.4 }
        ],
        "seed": 9
    });
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();
    let out_dir = dir.path().join("vols");
    run_ok(bin()
        .arg("gen")
        .arg("--config")
        .arg(&config_path)
        .arg("--out")
        .arg(&out_dir)
        .arg("--subjects")
        .arg("3"));
    let mut names: Vec<_> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        vec![
            "subject_000.tvol".to_string(),
            "subject_001.tvol".to_string(),
            "subject_002.tvol".to_string()
        ]
    );
    let vol = read_volume(&out_dir.join("subject_001.tvol")).unwrap();
    assert_eq!(vol.subject_id, "subject_001");
    assert_eq!(vol.image.shape(), &[16, 16, 16, 3]);
    assert!(vol.labels.sum() > 0.0);
}

#[test]
fn shapes_paper_verifies_reference_table() {
    let out = run_ok(bin().arg("shapes").arg("--paper"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("C1"));
    assert!(stdout.contains("E12"));
    assert!(stdout.contains("128,224,256,3"));
    assert!(stdout.contains("all 26 rows match"));
}

#[test]
fn shapes_requires_exactly_one_source() {
    let out = bin().arg("shapes").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("eval")
        .arg("--ckpt")
        .arg(dir.path().join("nope.tvnet"))
        .arg("--data")
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path().join("report.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_magic_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.tvnet");
    std::fs::write(&ckpt, b"GARBAGEGARBAGEGARBAGE").unwrap();
    let out = bin()
        .arg("eval")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--data")
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path().join("report.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("TVNET1"), "stderr: {stderr}");
}

#[test]
fn train_then_eval_report_is_consistent_with_pr_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_tiny_train_config(dir.path());
    let ckpt = dir.path().join("fold_a.tvnet");
    run_ok(bin()
        .arg("train")
        .arg("--config")
        .arg(&config_path)
        .arg("--fold")
        .arg("a")
        .arg("--out")
        .arg(&ckpt));
    assert!(ckpt.exists());

    // evaluate on freshly generated volumes from the same generator family
    let synth = serde_json::json!({
        "volume_shape": [8, 8, 8],
        "channels": 2,
        "foreground_fraction_target": 0.05,
        "lesion_count_range": [1, 1],
        "lesion_radius_range": [1.0, 2.0],
        "noise_sigma": 0.3,
        "channel_contrasts": [
            { "background_mean": 0.0, "lesion_mean": 1.0 },
            { "background_mean": 0.0, "lesion_mean": 0.6 }
        ],
        "seed": 77
    });
    let synth_path = dir.path().join("synth.json");
    std::fs::write(&synth_path, serde_json::to_string(&synth).unwrap()).unwrap();
    let vol_dir = dir.path().join("vols");
    run_ok(bin()
        .arg("gen")
        .arg("--config")
        .arg(&synth_path)
        .arg("--out")
        .arg(&vol_dir)
        .arg("--subjects")
        .arg("2"));

    let report_path = dir.path().join("out/report.json");
    run_ok(bin()
        .arg("eval")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--data")
        .arg(&vol_dir)
        .arg("--threshold")
        .arg("0.5")
        .arg("--out")
        .arg(&report_path));
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.per_subject.len(), 2);
    assert_eq!(report.threshold, 0.5);
    assert!(!report.conventions.is_empty());

    // the PR CSV row at the 0.5 operating point must reproduce the report's
    // precision/recall for that subject
    for subject in &report.per_subject {
        let csv_path = dir.path().join(format!("out/pr_{}.csv", subject.subject_id));
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("threshold,precision,recall"));
        let mut operating: Option<(f64, f64)> = None;
        for line in lines {
            let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
            if fields[0] >= 0.5 {
                operating = Some((fields[1], fields[2]));
            } else {
                break;
            }
        }
        let tp = subject.counts.true_pos as f64;
        let fp = subject.counts.false_pos as f64;
        let fneg = subject.counts.false_neg as f64;
        match operating {
            Some((precision, recall)) => {
                assert!(
                    (precision - tp / (tp + fp)).abs() < 5e-6,
                    "subject {}: csv precision {precision} vs counts {}",
                    subject.subject_id,
                    tp / (tp + fp)
                );
                assert!((recall - tp / (tp + fneg)).abs() < 5e-6);
            }
            // no score reached the threshold: the report must show an empty
            // prediction
            None => assert_eq!(tp + fp, 0.0),
        }
    }
}

#[test]
fn sweep_writes_stable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_tiny_train_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        run_ok(bin()
            .arg("sweep")
            .arg("--config")
            .arg(&config_path)
            .arg("--pairs")
            .arg("0.5:0.5,0.3:0.7")
            .arg("--seeds")
            .arg("1")
            .arg("--out")
            .arg(out)
            .arg("--svg"));
    }
    for name in ["table.csv", "report.json", "pr_0.5_0.5.csv", "pr_0.3_0.7.csv", "pr.svg"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    let table = std::fs::read_to_string(out_a.join("table.csv")).unwrap();
    assert!(table.starts_with("alpha,beta,dsc,sensitivity,specificity,f2,apr\n"));
    assert_eq!(table.lines().count(), 3);
    // per-run checkpoints for 2 pairs x 1 seed x 2 folds
    let ckpts = std::fs::read_dir(&out_a)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "tvnet")
        })
        .count();
    assert_eq!(ckpts, 4);
}

#[test]
fn gradcheck_smoke_run_passes() {
    let out = run_ok(bin()
        .arg("gradcheck")
        .arg("--instances")
        .arg("4")
        .arg("--seed")
        .arg("11"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS]"));
    assert!(!stdout.contains("[FAIL]"));
}
