//! End-to-end command tests against the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn stmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stmd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

/// Overrides that keep every pipeline tiny enough for a test run.
fn tiny(args: &mut Vec<String>) {
    for kv in [
        "benchmark.train_sequences=4",
        "benchmark.eval_sequences=2",
        "benchmark.scenario.frames=3",
        "benchmark.scenario.points_per_frame=48",
        "tracker.frames=3",
        "tracker.points=32",
        "tracker.centers=8",
        "tracker.knn=3",
        "tracker.feat_c=6",
        "tracker.feat_cm=8",
        "tracker.feat_cp=8",
        "tracker.heads=2",
        "tracker.k_top=4",
        "train.epochs=1",
        "train.batch_size=2",
    ] {
        args.push("--set".into());
        args.push(kv.into());
    }
}

fn run_tiny(subcmd: &[&str], extra: &[&str]) -> Output {
    let mut args: Vec<String> = subcmd.iter().map(|s| s.to_string()).collect();
    tiny(&mut args);
    args.extend(extra.iter().map(|s| s.to_string()));
    let strs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    stmd(&strs)
}

#[test]
fn gen_data_writes_sequences_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let r = run_tiny(
        &["gen-data", "--out", out.to_str().unwrap(), "--seed", "5"],
        &[],
    );
    assert_eq!(code(&r), 0, "stderr: {}", String::from_utf8_lossy(&r.stderr));

    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().collect();
    assert_eq!(rows[0], "split,name,seed");
    assert_eq!(rows.len(), 1 + 4 + 2, "4 train + 2 eval rows");
    assert!(out.join("train/seq_0000/meta.json").exists());
    assert!(out.join("eval/seq_0001/boxes.csv").exists());

    // Existing non-empty dir without --force is a usage error.
    let r2 = run_tiny(
        &["gen-data", "--out", out.to_str().unwrap(), "--seed", "5"],
        &[],
    );
    assert_eq!(code(&r2), 2);

    // With --force the rerun is byte-identical.
    let before = std::fs::read(out.join("train/seq_0000/frame_000.xyz")).unwrap();
    let r3 = run_tiny(
        &["gen-data", "--out", out.to_str().unwrap(), "--seed", "5", "--force"],
        &[],
    );
    assert_eq!(code(&r3), 0);
    let after = std::fs::read(out.join("train/seq_0000/frame_000.xyz")).unwrap();
    assert_eq!(before, after);
    let manifest2 = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest, manifest2);
}

#[test]
fn gen_data_unwritable_path_exits_2() {
    let r = run_tiny(&["gen-data", "--out", "/proc/definitely/not/writable"], &[]);
    assert_eq!(code(&r), 2);
    assert!(!String::from_utf8_lossy(&r.stderr).is_empty());
}

#[test]
fn unknown_set_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let r = stmd(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "tracker.not_a_key=3",
    ]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("not_a_key"));
}

fn train_eval_pipeline(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    let r = run_tiny(
        &["gen-data", "--out", data.to_str().unwrap(), "--seed", "7"],
        &[],
    );
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));

    let run = dir.join("run");
    let data_set = format!("data_dir=\"{}\"", data.display());
    let r = run_tiny(
        &[
            "train",
            "--out",
            run.to_str().unwrap(),
            "--seed",
            "7",
            "--set",
            &data_set,
        ],
        &[],
    );
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    (data, run)
}

#[test]
fn train_eval_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = train_eval_pipeline(dir.path());

    let ckpt = run.join("checkpoint.stmd");
    assert!(ckpt.exists());
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["kind"] == "step" || v["kind"] == "eval");
    }

    let eval_out = dir.path().join("eval");
    let data_set = format!("data_dir=\"{}\"", data.display());
    let r = run_tiny(
        &[
            "eval",
            "--out",
            eval_out.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--workers",
            "2",
            "--seed",
            "7",
            "--set",
            &data_set,
        ],
        &[],
    );
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(stdout.contains("mean"), "summary table printed: {stdout}");
    assert!(stdout.contains("baseline"));
    let results: Vec<_> = std::fs::read_dir(eval_out.join("results"))
        .unwrap()
        .collect();
    assert_eq!(results.len(), 2);

    // Plot from the emitted results: three figures per result.
    let plots = dir.path().join("plots");
    let r = stmd(&[
        "plot",
        "--results",
        eval_out.join("results").to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let figs: Vec<_> = std::fs::read_dir(plots.join("figures")).unwrap().collect();
    assert_eq!(figs.len(), 6, "two results x three figures");
}

#[test]
fn eval_with_wrong_config_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = train_eval_pipeline(dir.path());
    let ckpt = run.join("checkpoint.stmd");
    let eval_out = dir.path().join("eval2");
    // Corrupt the checkpoint tail: checksum failure is a config-class error.
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0x55;
    std::fs::write(&ckpt, &bytes).unwrap();
    let data_set = format!("data_dir=\"{}\"", data.display());
    let r = run_tiny(
        &[
            "eval",
            "--out",
            eval_out.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--set",
            &data_set,
        ],
        &[],
    );
    assert_ne!(code(&r), 0);
}

#[test]
fn ablate_padding_writes_three_variant_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    // Padding "none" with kernel 3 consumes two frames, so the window must
    // be longer than the tiny default.
    let r = run_tiny(
        &[
            "ablate",
            "--axis",
            "padding",
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "3",
            "--set",
            "tracker.frames=5",
            "--set",
            "benchmark.scenario.frames=5",
        ],
        &[],
    );
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "variant,success,precision");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("none,"));
    assert!(rows[2].starts_with("zero,"));
    assert!(rows[3].starts_with("replicate,"));
}

#[test]
fn ablate_unknown_axis_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let r = stmd(&["ablate", "--axis", "bogus", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 2);
}

#[test]
fn plot_rejects_empty_and_corrupt_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = dir.path().join("figs");
    let r = stmd(&[
        "plot",
        "--results",
        empty.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 2);

    let bad = dir.path().join("bad");
    std::fs::create_dir_all(&bad).unwrap();
    std::fs::write(bad.join("seq_0000.json"), "{not json").unwrap();
    let r = stmd(&[
        "plot",
        "--results",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("seq_0000.json"));
}
