//! Black-box CLI tests: exit codes, file outputs, provenance, and the
//! dataset/checkpoint formats as seen from the command line.

use std::path::Path;
use std::process::Command;

fn macl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_macl"))
}

/// Tiny experiment so CLI round trips stay fast.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "seed": 5,
        "data": {"volumes": 4, "depth": 6, "height": 16, "classes": 2,
                 "noise_sigma": 0.1, "train_fraction": 0.75},
        "model": {"levels": 2, "base_channels": 4, "channel_cap": 32,
                  "decoder_blocks": 1, "pixel_channels": 4, "embed_dim": 8},
        "pretrain": {"epochs": 1, "batch_size": 4},
        "finetune": {"epochs": 2, "batch_size": 4, "eval_every": 1}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn selftest_passes_on_fresh_build() {
    let out = macl().arg("selftest").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("9/9 checks passed"), "{text}");
}

#[test]
fn gen_writes_manifest_and_is_idempotent_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_a = tmp.path().join("data_a");
    let out_b = tmp.path().join("data_b");
    for out in [&out_a, &out_b] {
        let st = macl()
            .args(["gen", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
    }
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_a.join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["volumes"].as_array().unwrap().len(), 4);
    assert!(out_a.join("config_snapshot.json").exists());
    assert!(out_a.join("provenance.json").exists());
    // Same seed, same bytes.
    assert_eq!(
        std::fs::read(out_a.join("vol_0000.voxels.f32")).unwrap(),
        std::fs::read(out_b.join("vol_0000.voxels.f32")).unwrap()
    );
}

#[test]
fn bad_config_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"data": {"classes": 0}}"#).unwrap();
    let out = macl()
        .args(["gen", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pretrain_then_finetune_produces_reports_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let pre_dir = tmp.path().join("pre");
    let st = macl()
        .args(["pretrain", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&pre_dir)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(pre_dir.join("checkpoint/manifest.json").exists());
    assert!(pre_dir.join("checkpoint/params.bin").exists());
    let loss = std::fs::read_to_string(pre_dir.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,lg,ld,ler,total,lr\n"));
    assert!(loss.lines().count() > 1);

    let ft_dir = tmp.path().join("ft");
    let st = macl()
        .args(["finetune", "--config"])
        .arg(&cfg)
        .arg("--init")
        .arg(&pre_dir)
        .arg("--out")
        .arg(&ft_dir)
        .status()
        .unwrap();
    assert!(st.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ft_dir.join("report.json")).unwrap())
            .unwrap();
    assert!(report["mean"]["dsc"].is_number());
    assert_eq!(report["aggregation"], "per_slice_mean");
    assert!(ft_dir.join("report.csv").exists());
    assert!(ft_dir.join("transfer_provenance.json").exists());
    assert!(ft_dir.join("model/manifest.json").exists());

    // Scratch mode skips transfer.
    let sc_dir = tmp.path().join("scratch");
    let st = macl()
        .args(["finetune", "--config"])
        .arg(&cfg)
        .args(["--init", "scratch", "--out"])
        .arg(&sc_dir)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(!sc_dir.join("transfer_provenance.json").exists());

    // Comparison table across the two reports.
    let out = macl()
        .arg("report")
        .arg(ft_dir.join("report.json"))
        .arg(sc_dir.join("report.json"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("DSC") && table.contains("ft") && table.contains("scratch"));
}

#[test]
fn env_overrides_reach_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("env_data");
    let st = macl()
        .args(["gen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .env("MACL_DATA__VOLUMES", "3")
        .status()
        .unwrap();
    assert!(st.success());
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["volumes"].as_array().unwrap().len(), 3);

    // Flags beat the environment: --seed overrides MACL_SEED.
    let a = tmp.path().join("flag_a");
    let st = macl()
        .args(["gen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&a)
        .env("MACL_SEED", "99")
        .args(["--seed", "5"])
        .status()
        .unwrap();
    assert!(st.success());
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("config_snapshot.json")).unwrap())
            .unwrap();
    assert_eq!(snap["seed"], 5);
}

#[test]
fn finetune_from_missing_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = macl()
        .args(["finetune", "--config"])
        .arg(&cfg)
        .args(["--init"])
        .arg(tmp.path().join("nonexistent"))
        .arg("--out")
        .arg(tmp.path().join("ft"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}
