//! End-to-end checks of the `fedbeam` binary: subcommand flow, determinism,
//! resume behavior and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedbeam"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fedbeam-cli-{tag}-{}", std::process::id()));
    fs::remove_dir_all(&dir).ok();
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, rounds: usize) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(
        &path,
        format!(
            r#"
seeds = [3]
protocols = ["GFL4BS", "FedAvg"]

[scenario]
vehicles = 3
samples_per_vehicle = 30
beams = 14

[partition]
kind = "label"
level = "L"

[rounds]
rounds = {rounds}
local_epochs = 1
batch_size = 16
lr = 1e-3
gamma = 0.02
gen_epochs = 10
gen_lr = 0.05
sequential = true
"#
        ),
    )
    .unwrap();
    path
}

#[test]
fn gen_is_deterministic_and_prints_summary() {
    let dir = temp_dir("gen");
    let cfg = write_config(&dir, 1);
    let out1 = dir.join("d1.json");
    let out2 = dir.join("d2.json");
    for out in [&out1, &out2] {
        let status = bin()
            .args(["gen", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let stdout = String::from_utf8_lossy(&status.stdout);
        assert!(stdout.contains("vehicles 3"), "summary line: {stdout}");
        assert!(stdout.contains("zeta"));
    }
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap());
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn partition_reports_imbalance() {
    let dir = temp_dir("part");
    let cfg = write_config(&dir, 1);
    let dataset = dir.join("dataset.json");
    assert!(bin().args(["gen", "--config"]).arg(&cfg).arg("--out").arg(&dataset).status().unwrap().success());
    let out = bin()
        .args(["partition", "--config"])
        .arg(&cfg)
        .arg("--dataset")
        .arg(&dataset)
        .arg("--out")
        .arg(dir.join("part"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("zeta"));
    assert!(stdout.contains("kappa"));
    assert!(dir.join("part/partition.json").exists());
    assert!(dir.join("part/imbalance.json").exists());
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_emits_grid_and_resumes_identically() {
    let dir = temp_dir("train");
    let cfg_full = write_config(&dir, 4);
    let out_full = dir.join("full");
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg_full)
        .arg("--out")
        .arg(&out_full)
        .arg("--sequential")
        .status()
        .unwrap();
    assert!(status.success());

    // Interrupted run: kill the process once the first checkpoint exists,
    // then rerun the same config; resume must reproduce the uninterrupted
    // outputs byte for byte.
    let dir2 = temp_dir("train-resume");
    let cfg_same = write_config(&dir2, 4);
    let out_resume = dir2.join("run");
    let mut child = bin()
        .args(["train", "--config"])
        .arg(&cfg_same)
        .arg("--out")
        .arg(&out_resume)
        .arg("--sequential")
        .spawn()
        .unwrap();
    let ckpt = out_resume.join("seed_3/FedAvg/checkpoint_last.json");
    for _ in 0..600 {
        if ckpt.exists() || child.try_wait().unwrap().is_some() {
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(10));
    }
    child.kill().ok();
    child.wait().ok();
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg_same)
        .arg("--out")
        .arg(&out_resume)
        .arg("--sequential")
        .status()
        .unwrap()
        .success());

    for rel in ["seed_3/GFL4BS/metrics.csv", "seed_3/FedAvg/metrics.csv", "summary.csv"] {
        let full = fs::read(out_full.join(rel)).unwrap();
        let resumed = fs::read(out_resume.join(rel)).unwrap();
        assert_eq!(full, resumed, "resumed {rel} differs");
    }

    // Report over the finished run.
    let out = bin()
        .args(["report"])
        .arg(&out_full)
        .arg("--out")
        .arg(dir.join("report"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("report/report.csv").exists());
    assert!(dir.join("report/series.csv").exists());

    fs::remove_dir_all(&dir).ok();
    fs::remove_dir_all(&dir2).ok();
}

#[test]
fn config_errors_exit_one() {
    let dir = temp_dir("badcfg");
    let cfg = dir.join("bad.toml");
    fs::write(&cfg, "protocols = [\"NOPE\"]\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let out = bin()
        .args(["report", "/nonexistent-fedbeam-run-dir"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    fs::remove_dir_all(&dir).ok();
}
