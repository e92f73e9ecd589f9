//! End-to-end checks of the command-line surface.

use std::path::Path;
use std::process::Command;

fn catseg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_catseg"))
}

fn dir_snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_data_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let status = catseg()
            .args(["gen-data", "--seed", "7", "--patients", "6", "--slices", "8", "--size", "32"])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(dir_snapshot(&a), dir_snapshot(&b));
}

#[test]
fn train_with_missing_config_exits_2() {
    let output = catseg()
        .args(["train", "--config", "definitely-missing.json"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("definitely-missing.json"), "stderr: {stderr}");
}

#[test]
fn invalid_config_value_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.json");
    std::fs::write(&config, r#"{"epochs": 0}"#).unwrap();
    let output = catseg().args(["train", "--config"]).arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let output = catseg().args(["train", "--no-such-flag"]).output().unwrap();
    assert_ne!(output.status.code(), Some(0));
    assert!(!String::from_utf8_lossy(&output.stderr).is_empty());
}

#[test]
fn gradcheck_exits_zero() {
    let output = catseg().arg("gradcheck").output().unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stdout));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("ok")).count() >= 20);
}

#[test]
fn full_pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let status = catseg()
        .args(["gen-data", "--seed", "3", "--patients", "6", "--slices", "8", "--size", "32"])
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());

    let config = tmp.path().join("config.json");
    std::fs::write(
        &config,
        format!(
            r#"{{
              "network": {{
                "scales": 2, "filters": [4, 6, 8], "slices": 8,
                "in_channels": 1, "classes": 3,
                "transformer_blocks": 1, "heads": 2, "pool_k": 2,
                "cat_layers": [1, 2], "pe_enabled": true, "transformer_enabled": true
              }},
              "epochs": 1,
              "manifest": {:?},
              "out_dir": {:?}
            }}"#,
            data.join("manifest.json"),
            tmp.path().join("run")
        ),
    )
    .unwrap();
    let status = catseg().args(["train", "--config"]).arg(&config).status().unwrap();
    assert!(status.success());

    let ckpt = tmp.path().join("run").join("best.catc");
    let report = tmp.path().join("report.json");
    let status = catseg()
        .args(["eval", "--split", "test", "--checkpoint"])
        .arg(&ckpt)
        .arg("--out")
        .arg(&report)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(report.exists());

    // export attention for one of the test volumes
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let volume_rel = manifest["patients"][0]["volume"].as_str().unwrap();
    let att_dir = tmp.path().join("attention");
    let status = catseg()
        .args(["export-attention", "--checkpoint"])
        .arg(&ckpt)
        .arg("--volume")
        .arg(data.join(volume_rel))
        .arg("--out")
        .arg(&att_dir)
        .status()
        .unwrap();
    assert!(status.success());
    // 2 scales x 1 block x 2 heads, csv + pgm each
    assert_eq!(std::fs::read_dir(&att_dir).unwrap().count(), 8);

    let status = catseg()
        .args(["compare", "--a"])
        .arg(&report)
        .arg("--b")
        .arg(&report)
        .status()
        .unwrap();
    assert!(status.success());
}
