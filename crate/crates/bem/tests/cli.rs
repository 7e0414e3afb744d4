//! End-to-end checks of the `bem` binary: dataset synthesis, both
//! training stages, inference in both modes, evaluation, benchmarking,
//! and the documented exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bem"))
        .args(args)
        .output()
        .expect("spawn bem")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("bem.conf");
    let base = format!(
        "out_dir = {out}\n\
         manifest = {out}/data/manifest.jsonl\n\
         count = 3\n\
         size = 16\n\
         targets = 2\n\
         spread = 0.3\n\
         r = 1/4\n\
         base_channels = 4\n\
         batch_size = 2\n\
         iters_stage1 = 4\n\
         iters_stage2 = 4\n\
         seed = 11\n\
         {extra}\n",
        out = dir.join("out").display()
    );
    fs::write(&path, base).unwrap();
    path.display().to_string()
}

#[test]
fn full_workflow_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out_dir = dir.path().join("out");

    // synth: prints the manifest path and writes PPMs.
    let out = bem(&["--config", &cfg, "synth"]);
    assert!(out.status.success(), "synth failed: {out:?}");
    let manifest = out_dir.join("data/manifest.jsonl");
    assert!(manifest.exists());

    // train both stages; stage 2 must not need stage 1's checkpoint,
    // so it runs first here on purpose.
    let out = bem(&["--config", &cfg, "train", "--stage", "2"]);
    assert!(out.status.success(), "stage-2 training failed: {out:?}");
    let out = bem(&["--config", &cfg, "train", "--stage", "1"]);
    assert!(out.status.success(), "stage-1 training failed: {out:?}");
    for stage in [1, 2] {
        assert!(out_dir.join(format!("stage{stage}.ckpt")).exists());
        let csv = fs::read_to_string(out_dir.join(format!("train_stage{stage}.csv"))).unwrap();
        // Header plus exactly iters rows.
        assert_eq!(csv.lines().count(), 1 + 4, "stage {stage} log rows");
    }

    // infer with K=1: MC and Rank outputs are byte-identical.
    let x = out_dir.join("data/x_000000.ppm");
    let y_mc = dir.path().join("pred_mc.ppm");
    let y_rk = dir.path().join("pred_rank.ppm");
    let out = bem(&[
        "--config", &cfg, "infer",
        "--in", x.to_str().unwrap(),
        "--out", y_mc.to_str().unwrap(),
        "--mode", "mc", "--k", "1",
    ]);
    assert!(out.status.success(), "mc inference failed: {out:?}");
    let out = bem(&[
        "--config", &cfg, "infer",
        "--in", x.to_str().unwrap(),
        "--out", y_rk.to_str().unwrap(),
        "--mode", "rank", "--k", "1",
    ]);
    assert!(out.status.success(), "rank inference failed: {out:?}");
    assert_eq!(fs::read(&y_mc).unwrap(), fs::read(&y_rk).unwrap());

    // candidate dump emits exactly K images plus a scores CSV.
    let dump = dir.path().join("cands");
    let y3 = dir.path().join("pred_k3.ppm");
    let out = bem(&[
        "--config", &cfg, "infer",
        "--in", x.to_str().unwrap(),
        "--out", y3.to_str().unwrap(),
        "--mode", "rank", "--k", "3",
        "--dump-candidates", dump.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "dump inference failed: {out:?}");
    let images = fs::read_dir(&dump)
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().map(|x| x == "ppm") == Some(true)
        })
        .count();
    assert_eq!(images, 3);
    let scores = fs::read_to_string(dump.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 3);
    assert_eq!(scores.lines().filter(|l| l.ends_with(",1")).count(), 1);

    // eval against predictions that equal a reference: PSNR "inf",
    // SSIM 1 on the matching target. Build a pred dir mapping every
    // scene to its own first target image.
    let pred_dir = dir.path().join("preds");
    fs::create_dir_all(&pred_dir).unwrap();
    for line in fs::read_to_string(&manifest).unwrap().lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let id = rec["scene_id"].as_u64().unwrap();
        let target = rec["target_paths"][0].as_str().unwrap();
        fs::copy(
            out_dir.join("data").join(target),
            pred_dir.join(format!("pred_{id:06}.ppm")),
        )
        .unwrap();
    }
    let out = bem(&[
        "--config", &cfg, "eval",
        "--pred", pred_dir.to_str().unwrap(),
        "--ref", manifest.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "eval failed: {out:?}");
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains(",inf,"), "self-match PSNR sentinel missing:\n{report}");
    assert!(report.contains("1.000000"), "self-match SSIM missing:\n{report}");
    assert!(out_dir.join("metrics.csv").exists());

    // bench: header plus exactly 3 rows.
    let out = bem(&["--config", &cfg, "bench", "--k", "2", "--size", "16"]);
    assert!(out.status.success(), "bench failed: {out:?}");
    let report = String::from_utf8(out.stdout).unwrap();
    assert_eq!(report.lines().count(), 4, "bench rows:\n{report}");
}

#[test]
fn determinism_same_config_same_bytes() {
    let mk = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "");
        assert!(bem(&["--config", &cfg, "synth"]).status.success());
        assert!(bem(&["--config", &cfg, "train", "--stage", "1"]).status.success());
        assert!(bem(&["--config", &cfg, "train", "--stage", "2"]).status.success());
        let out_dir = dir.path().join("out");
        let x = out_dir.join("data/x_000000.ppm");
        let y = dir.path().join("pred.ppm");
        assert!(bem(&[
            "--config", &cfg, "infer",
            "--in", x.to_str().unwrap(),
            "--out", y.to_str().unwrap(),
            "--k", "3",
        ])
        .status
        .success());
        (
            dir,
            fs::read(out_dir.join("stage1.ckpt")).unwrap(),
            fs::read(out_dir.join("stage2.ckpt")).unwrap(),
            fs::read(out_dir.join("data/x_000000.ppm")).unwrap(),
            fs::read(&y).unwrap(),
        )
    };
    let (_d1, c1a, c1b, x1, y1) = mk();
    let (_d2, c2a, c2b, x2, y2) = mk();
    assert_eq!(c1a, c2a, "stage-1 checkpoints differ");
    assert_eq!(c1b, c2b, "stage-2 checkpoints differ");
    assert_eq!(x1, x2, "dataset bytes differ");
    assert_eq!(y1, y2, "inference outputs differ");
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown config key: exit 2 naming the key, before any work.
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "sead = 3\n").unwrap();
    let out = bem(&["--config", bad.to_str().unwrap(), "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sead"));

    // Missing checkpoints: exit 4.
    let cfg = write_config(dir.path(), "");
    assert!(bem(&["--config", &cfg, "synth"]).status.success());
    let x = dir.path().join("out/data/x_000000.ppm");
    let out = bem(&[
        "--config", &cfg, "infer",
        "--in", x.to_str().unwrap(),
        "--out", dir.path().join("y.ppm").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));

    // Empty manifest for eval: exit 2 with a message.
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = bem(&[
        "--config", &cfg, "eval",
        "--pred", dir.path().to_str().unwrap(),
        "--ref", empty.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}
