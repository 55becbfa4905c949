//! End-to-end tests spawning the real binary: artifact creation, stdout
//! schemas, exit codes, and cross-command consistency.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn p2be(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2be"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout should be utf-8")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr should be utf-8")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

/// Two-epoch run on 32 synthetic samples with the consistency term turned
/// off: fast enough for every test here.
const TINY_CONFIG: &str = r#"{
  "train": {"epochs": 2, "batch_size": 16, "m": 8, "alpha": 0.0, "encoder": "p2be", "seed": 7},
  "data": {"classes": 4, "samples": 32, "size": 8}
}"#;

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, TINY_CONFIG).unwrap();
    path
}

fn train_tiny(dir: &Path) -> (PathBuf, PathBuf) {
    let config = write_tiny_config(dir);
    let out_dir = dir.join("run");
    let out = p2be(
        dir,
        &["train", "--config", config.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()],
    );
    assert_exit(&out, 0);
    (config, out_dir.join("checkpoint.bin"))
}

fn write_gray_ppm(path: &Path, level: u8) {
    let mut bytes = b"P6\n8 8\n255\n".to_vec();
    bytes.extend(std::iter::repeat(level).take(3 * 64));
    fs::write(path, bytes).unwrap();
}

#[test]
fn defaults_writes_complete_config() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("defaults.json");
    let out = p2be(dir.path(), &["defaults", "--output", path.to_str().unwrap()]);
    assert_exit(&out, 0);
    assert_eq!(stdout(&out), format!("artifact,path\ndefaults,{}\n", path.display()));

    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(doc["train"]["epochs"], 10);
    assert_eq!(doc["train"]["encoder"], "p2be");
    assert_eq!(doc["attack"]["steps"], 7);
    assert_eq!(doc["data"]["samples"], 512);
    assert_eq!(doc["corruptions"]["brightness"].as_array().unwrap().len(), 5);
}

#[test]
fn defaults_document_is_a_valid_train_config() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("defaults.json");
    assert_exit(&p2be(dir.path(), &["defaults", "--output", path.to_str().unwrap()]), 0);

    // Shrink the run so the test stays fast; every other field is stock.
    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    doc["train"]["epochs"] = 1.into();
    doc["train"]["m"] = 8.into();
    doc["data"]["samples"] = 32.into();
    doc["out_dir"] = dir.path().join("run").to_str().unwrap().into();
    fs::write(&path, doc.to_string()).unwrap();

    let out = p2be(dir.path(), &["train", "--config", path.to_str().unwrap()]);
    assert_exit(&out, 0);
    assert!(dir.path().join("run/checkpoint.bin").is_file());
}

#[test]
fn train_writes_artifacts_and_reports_clean_error() {
    let dir = TempDir::new().unwrap();
    let config = write_tiny_config(dir.path());
    let run_dir = dir.path().join("run");
    let out = p2be(
        dir.path(),
        &["train", "--config", config.to_str().unwrap(), "--out-dir", run_dir.to_str().unwrap()],
    );
    assert_exit(&out, 0);
    assert!(run_dir.join("checkpoint.bin").is_file());

    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,value"));
    let clean = lines.next().unwrap();
    assert!(clean.starts_with("clean_error,0."), "{clean}");

    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let mut rows = metrics.lines();
    assert_eq!(
        rows.next(),
        Some("epoch,lr,L_ce,L_consistency,L_smooth,train_acc,clean_test_err")
    );
    assert_eq!(rows.count(), 2, "one row per epoch");
}

#[test]
fn train_missing_config_exits_2_naming_path() {
    let dir = TempDir::new().unwrap();
    let out = p2be(dir.path(), &["train", "--config", "/nonexistent/cfg.json"]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("/nonexistent/cfg.json"), "{}", stderr(&out));
}

#[test]
fn train_unknown_config_key_exits_2_naming_field() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"train": {"learninng_rate": 0.1}}"#).unwrap();
    let out = p2be(dir.path(), &["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("learninng_rate"), "{}", stderr(&out));
}

#[test]
fn train_invalid_field_value_exits_2() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"train": {"net_momentum": 1.5}}"#).unwrap();
    let out = p2be(dir.path(), &["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("net_momentum"), "{}", stderr(&out));
}

#[test]
fn seed_override_changes_metrics_and_same_seed_repeats_bytes() {
    let dir = TempDir::new().unwrap();
    let config = write_tiny_config(dir.path());
    let mut metrics = Vec::new();
    for (name, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let run_dir = dir.path().join(name);
        let out = p2be(
            dir.path(),
            &[
                "train",
                "--config",
                config.to_str().unwrap(),
                "--seed",
                seed,
                "--out-dir",
                run_dir.to_str().unwrap(),
            ],
        );
        assert_exit(&out, 0);
        metrics.push(fs::read(run_dir.join("metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1], "same seed must reproduce byte-identical metrics");
    assert_ne!(metrics[0], metrics[2], "different seed must change metrics");
}

#[test]
fn eval_reports_the_trained_clean_error() {
    let dir = TempDir::new().unwrap();
    let (config, checkpoint) = train_tiny(dir.path());
    let out = p2be(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ],
    );
    assert_exit(&out, 0);
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,value"));
    assert!(lines.next().unwrap().starts_with("clean_error,"));
    assert_eq!(lines.next(), None);
}

#[test]
fn eval_missing_checkpoint_exits_2_naming_path() {
    let dir = TempDir::new().unwrap();
    let out = p2be(dir.path(), &["eval", "--checkpoint", "/nonexistent/model.bin"]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("/nonexistent/model.bin"), "{}", stderr(&out));
}

#[test]
fn eval_corruption_table_feeds_back_as_baseline_with_unit_mce() {
    let dir = TempDir::new().unwrap();
    let (config, checkpoint) = train_tiny(dir.path());
    let out = p2be(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--corruptions",
        ],
    );
    assert_exit(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("\nmean_corrupted_error,"), "{text}");
    assert!(!text.contains("\nmce,"), "mCE requires a baseline:\n{text}");
    assert!(!text.contains("kind,ce"), "CE table requires a baseline:\n{text}");

    let table = text
        .split("\n\n")
        .nth(1)
        .expect("corruption table section");
    assert!(table.starts_with("kind,severity,error\n"), "{table}");
    assert_eq!(table.trim_end().lines().count(), 36, "header plus 7 kinds x 5 severities");

    // The table is schema-compatible with the baseline reader, so a model
    // normalized by itself must score exactly 1.
    let baseline = dir.path().join("baseline.csv");
    fs::write(&baseline, table).unwrap();
    let out = p2be(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--corruptions",
            "--baseline-csv",
            baseline.to_str().unwrap(),
        ],
    );
    assert_exit(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("\nmce,1.000\n"), "{text}");
    let ce = text.split("\n\n").nth(2).expect("ce table section");
    assert!(ce.starts_with("kind,ce\n"), "{ce}");
    for line in ce.trim_end().lines().skip(1) {
        assert!(line.ends_with(",1.000000"), "{line}");
    }
}

#[test]
fn eval_baseline_without_corruptions_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = p2be(
        dir.path(),
        &["eval", "--checkpoint", "x.bin", "--baseline-csv", "b.csv"],
    );
    assert_exit(&out, 2);
}

#[test]
fn eval_attack_with_zero_epsilon_matches_clean_error() {
    let dir = TempDir::new().unwrap();
    let (config, checkpoint) = train_tiny(dir.path());
    let out = p2be(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--attack",
            "--epsilon",
            "0",
        ],
    );
    assert_exit(&out, 0);
    let text = stdout(&out);
    let clean = text
        .lines()
        .find_map(|l| l.strip_prefix("clean_error,"))
        .expect("clean row");
    let attacked = text
        .lines()
        .find_map(|l| l.strip_prefix("attacked_error,"))
        .expect("attacked row");
    assert_eq!(clean, attacked, "{text}");
}

#[test]
fn export_sim_one_hot_256_is_the_identity_pattern() {
    let dir = TempDir::new().unwrap();
    let prefix = dir.path().join("sim");
    let out = p2be(
        dir.path(),
        &["export-sim", "--encoder", "one-hot", "--m", "256", "--out", prefix.to_str().unwrap()],
    );
    assert_exit(&out, 0);
    assert_eq!(
        stdout(&out),
        format!("artifact,path\npgm,{0}.pgm\ncsv,{0}.csv\n", prefix.display())
    );

    let pgm = fs::read(prefix.with_extension("pgm")).unwrap();
    let header = b"P5\n256 256\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    let pixels = &pgm[header.len()..];
    assert_eq!(pixels.len(), 256 * 256);
    for i in 0..256 {
        for j in 0..256 {
            let expected = if i == j { 255 } else { 0 };
            assert_eq!(pixels[i * 256 + j], expected, "cell ({i},{j})");
        }
    }
}

#[test]
fn export_sim_thermometer_is_banded_with_unit_diagonal() {
    let dir = TempDir::new().unwrap();
    let prefix = dir.path().join("sim");
    let out = p2be(
        dir.path(),
        &["export-sim", "--encoder", "thermometer", "--m", "64", "--out", prefix.to_str().unwrap()],
    );
    assert_exit(&out, 0);

    let pgm = fs::read(prefix.with_extension("pgm")).unwrap();
    let pixels = &pgm[b"P5\n256 256\n255\n".len()..];
    for i in 0..256 {
        assert_eq!(pixels[i * 256 + i], 255, "diagonal cell {i}");
    }
    // Similarity must fall monotonically with magnitude distance.
    let row = &pixels[..256];
    for j in 1..256 {
        assert!(row[j] <= row[j - 1], "row 0 must be non-increasing at {j}");
    }
    assert!(row[255] < row[0], "distant magnitudes must be less similar");
}

#[test]
fn export_sim_from_checkpoint_is_symmetric() {
    let dir = TempDir::new().unwrap();
    let (_, checkpoint) = train_tiny(dir.path());
    let prefix = dir.path().join("sim");
    let out = p2be(
        dir.path(),
        &[
            "export-sim",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--out",
            prefix.to_str().unwrap(),
        ],
    );
    assert_exit(&out, 0);

    let csv = fs::read_to_string(prefix.with_extension("csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("magnitude,cos0,"), "header row");
    // Rows carry a leading magnitude index; drop it before comparing cells.
    let cells: Vec<Vec<&str>> = lines.map(|l| l.split(',').skip(1).collect()).collect();
    assert_eq!(cells.len(), 256);
    for row in &cells {
        assert_eq!(row.len(), 256);
    }
    for i in 0..256 {
        assert_eq!(cells[i][i], "1.000000", "diagonal cell {i}");
        for j in (i + 1)..256 {
            assert_eq!(cells[i][j], cells[j][i], "cell ({i},{j}) vs ({j},{i})");
        }
    }
}

#[test]
fn export_sim_rejects_encoders_without_codebooks() {
    let dir = TempDir::new().unwrap();
    let out = p2be(dir.path(), &["export-sim", "--encoder", "rgb", "--out", "sim"]);
    assert_exit(&out, 2);
    let out = p2be(dir.path(), &["export-sim", "--encoder", "p2be", "--out", "sim"]);
    assert_exit(&out, 2);
    let out = p2be(dir.path(), &["export-sim", "--out", "sim"]);
    assert_exit(&out, 2);
}

#[test]
fn corrupt_same_seed_writes_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.ppm");
    write_gray_ppm(&input, 128);
    let mut outputs = Vec::new();
    for name in ["a.ppm", "b.ppm"] {
        let output = dir.path().join(name);
        let out = p2be(
            dir.path(),
            &[
                "corrupt",
                "--input",
                input.to_str().unwrap(),
                "--kind",
                "gaussian-noise",
                "--severity",
                "3",
                "--seed",
                "5",
                "--output",
                output.to_str().unwrap(),
            ],
        );
        assert_exit(&out, 0);
        assert_eq!(stdout(&out), "kind,severity,parameter\ngaussian-noise,3,0.120000\n");
        outputs.push(fs::read(output).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn corrupt_brightness_ladder_strictly_raises_mean_pixel() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.ppm");
    write_gray_ppm(&input, 64);
    let mut means = Vec::new();
    for severity in 1..=5u8 {
        let output = dir.path().join(format!("s{severity}.ppm"));
        let out = p2be(
            dir.path(),
            &[
                "corrupt",
                "--input",
                input.to_str().unwrap(),
                "--kind",
                "brightness",
                "--severity",
                &severity.to_string(),
                "--output",
                output.to_str().unwrap(),
            ],
        );
        assert_exit(&out, 0);
        let bytes = fs::read(output).unwrap();
        let pixels = &bytes[b"P6\n8 8\n255\n".len()..];
        means.push(pixels.iter().map(|&b| b as f64).sum::<f64>() / pixels.len() as f64);
    }
    for pair in means.windows(2) {
        assert!(pair[1] > pair[0], "means must increase: {means:?}");
    }
}

#[test]
fn corrupt_unknown_kind_exits_2_listing_valid_kinds() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.ppm");
    write_gray_ppm(&input, 128);
    let out = p2be(
        dir.path(),
        &[
            "corrupt",
            "--input",
            input.to_str().unwrap(),
            "--kind",
            "fog",
            "--severity",
            "1",
            "--output",
            "out.ppm",
        ],
    );
    assert_exit(&out, 2);
    let err = stderr(&out);
    assert!(err.contains("gaussian-noise") && err.contains("pixelate"), "{err}");
}

#[test]
fn corrupt_severity_out_of_range_exits_2() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.ppm");
    write_gray_ppm(&input, 128);
    for severity in ["0", "9"] {
        let out = p2be(
            dir.path(),
            &[
                "corrupt",
                "--input",
                input.to_str().unwrap(),
                "--kind",
                "brightness",
                "--severity",
                severity,
                "--output",
                "out.ppm",
            ],
        );
        assert_exit(&out, 2);
    }
}

#[test]
fn zero_threads_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = p2be(dir.path(), &["--threads", "0", "defaults"]);
    assert_exit(&out, 2);
}
