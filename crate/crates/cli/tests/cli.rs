use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bqe_core::metrics::{psnr, PEAK};
use bqe_core::ply::load_ply;
use bqe_core::training::{read_manifest, TrainingConfig};

fn bqe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bqe"))
        .args(args)
        .current_dir(dir)
        .env_remove("BQE_NUM_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bqe(dir, args);
    assert!(
        out.status.success(),
        "bqe {args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn failing(dir: &Path, args: &[&str]) -> String {
    let out = bqe(dir, args);
    assert!(!out.status.success(), "bqe {args:?} unexpectedly succeeded");
    assert_eq!(out.status.code(), Some(1));
    String::from_utf8(out.stderr).unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

/// Toy widths with a short schedule, written next to the data.
fn quick_config(dir: &Path, epochs: usize, learning_rate: f64) -> PathBuf {
    let config = TrainingConfig {
        epochs,
        qe_epochs: Some(epochs),
        learning_rate,
        qe_learning_rate: Some(learning_rate),
        patch_size: 256,
        ..TrainingConfig::toy()
    };
    let path = dir.join("quick.toml");
    std::fs::write(&path, config.to_toml_string()).unwrap();
    path
}

fn toy_data(dir: &Path, seed: &str) {
    ok(
        dir,
        &[
            "--seed",
            seed,
            "make-toy-data",
            "--out",
            "data",
            "--frames",
            "5",
            "--points",
            "256",
            "--qps",
            "51,40,22",
        ],
    );
}

#[test]
fn make_toy_data_writes_every_frame() {
    let tmp = tempfile::tempdir().unwrap();
    toy_data(tmp.path(), "3");
    let data = tmp.path().join("data");
    assert_eq!(files(&data.join("clean")).len(), 5);
    for qp in [51, 40, 22] {
        assert_eq!(files(&data.join(format!("qp{qp}"))).len(), 5);
    }
    let entries = read_manifest(&data.join("pairs.csv")).unwrap();
    assert_eq!(entries.len(), 15);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "make-toy-data");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 21);
    for t in 0..5 {
        let name = format!("frame_{t:04}.ply");
        let clean = load_ply(data.join("clean").join(&name)).unwrap();
        let at = |qp: i32| {
            psnr(
                load_ply(data.join(format!("qp{qp}")).join(&name)).unwrap().attributes(),
                clean.attributes(),
                PEAK,
            )
            .unwrap()
        };
        assert!(at(51) < at(22), "frame {t}");
    }
}

#[test]
fn toy_data_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    toy_data(a.path(), "11");
    toy_data(b.path(), "11");
    toy_data(c.path(), "12");
    for sub in ["clean", "qp51", "qp40", "qp22"] {
        for (fa, fb) in files(&a.path().join("data").join(sub))
            .iter()
            .zip(files(&b.path().join("data").join(sub)))
        {
            assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap(), "{}", fa.display());
        }
    }
    let first = |d: &Path| std::fs::read(d.join("data/clean/frame_0000.ply")).unwrap();
    assert_ne!(first(a.path()), first(c.path()));
}

#[test]
fn recolor_onto_the_same_geometry_is_the_identity() {
    let tmp = tempfile::tempdir().unwrap();
    toy_data(tmp.path(), "1");
    ok(
        tmp.path(),
        &[
            "recolor",
            "--reference",
            "data/clean/frame_0002.ply",
            "--target",
            "data/clean/frame_0002.ply",
            "--out",
            "rc.ply",
        ],
    );
    assert_eq!(
        load_ply(tmp.path().join("rc.ply")).unwrap(),
        load_ply(tmp.path().join("data/clean/frame_0002.ply")).unwrap()
    );
    ok(
        tmp.path(),
        &[
            "recolor",
            "--reference",
            "data/clean/frame_0000.ply",
            "--target",
            "data/clean/frame_0001.ply",
            "--out",
            "moved.ply",
        ],
    );
    let moved = load_ply(tmp.path().join("moved.ply")).unwrap();
    assert_eq!(
        moved.geometry(),
        load_ply(tmp.path().join("data/clean/frame_0001.ply")).unwrap().geometry()
    );
    assert!(tmp.path().join("moved.run.json").exists());
}

#[test]
fn patches_cover_the_frame() {
    let tmp = tempfile::tempdir().unwrap();
    toy_data(tmp.path(), "2");
    let stdout = ok(
        tmp.path(),
        &[
            "patch",
            "--input",
            "data/clean/frame_0000.ply",
            "--out-dir",
            "p",
            "--size",
            "100",
            "--stride",
            "0.5",
        ],
    );
    assert!(stdout.contains("over 256 points"));
    let index: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("p/patches.json")).unwrap()).unwrap();
    let patches = index["patches"].as_array().unwrap();
    let mut seen = vec![false; 256];
    for p in patches {
        let p = p.as_array().unwrap();
        assert!(p.len() <= 100);
        for i in p {
            seen[i.as_u64().unwrap() as usize] = true;
        }
    }
    assert!(seen.iter().all(|&s| s));
    let plys = files(&tmp.path().join("p"))
        .into_iter()
        .filter(|p| p.extension().unwrap() == "ply")
        .count();
    assert_eq!(plys, patches.len());
}

#[test]
fn stage_two_requires_a_qe_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    toy_data(tmp.path(), "4");
    quick_config(tmp.path(), 1, 1e-3);
    let err = failing(
        tmp.path(),
        &["--config", "quick.toml", "train", "--pairs", "data/pairs.csv", "--out", "m.ckpt"],
    );
    assert!(err.contains("needs a QE checkpoint"), "{err}");
    assert!(!tmp.path().join("m.ckpt").exists());
    ok(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "train",
            "--pairs",
            "data/pairs.csv",
            "--out",
            "m.ckpt",
            "--no-qe",
        ],
    );
    assert!(tmp.path().join("m.ckpt").exists() && tmp.path().join("m.log.csv").exists());
    ok(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "train-qe",
            "--pairs",
            "data/pairs.csv",
            "--out",
            "qe.ckpt",
        ],
    );
    let err = failing(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "train",
            "--pairs",
            "data/pairs.csv",
            "--out",
            "m2.ckpt",
            "--no-qe",
            "--qe",
            "qe.ckpt",
        ],
    );
    assert!(err.contains("conflicts"), "{err}");
}

#[test]
fn zero_residual_checkpoint_reproduces_the_input() {
    let tmp = tempfile::tempdir().unwrap();
    toy_data(tmp.path(), "5");
    quick_config(tmp.path(), 1, 0.0);
    ok(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "train-qe",
            "--pairs",
            "data/pairs.csv",
            "--out",
            "qe.ckpt",
        ],
    );
    ok(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "train",
            "--pairs",
            "data/pairs.csv",
            "--qe",
            "qe.ckpt",
            "--out",
            "m.ckpt",
        ],
    );
    let stdout = ok(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "enhance",
            "--checkpoint",
            "m.ckpt",
            "--input",
            "data/qp51",
            "--out",
            "enh",
            "--originals",
            "data/clean",
        ],
    );
    assert!(stdout.contains("ΔPSNR(y) +0.000 dB"), "{stdout}");
    for name in ["frame_0000.ply", "frame_0004.ply"] {
        let input = load_ply(tmp.path().join("data/qp51").join(name)).unwrap();
        let output = load_ply(tmp.path().join("enh").join(name)).unwrap();
        assert_eq!(output, input, "{name}");
    }
}

#[test]
fn trained_pipeline_runs_end_to_end_and_replays() {
    let tmp = tempfile::tempdir().unwrap();
    toy_data(tmp.path(), "6");
    quick_config(tmp.path(), 30, 3e-3);
    let qe_out = ok(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "--deterministic",
            "train-qe",
            "--pairs",
            "data/pairs.csv",
            "--out",
            "qe.ckpt",
        ],
    );
    assert!(qe_out.contains("held-out level accuracy"));
    ok(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "--deterministic",
            "train",
            "--pairs",
            "data/pairs.csv",
            "--qe",
            "qe.ckpt",
            "--out",
            "m.ckpt",
        ],
    );
    let stdout = ok(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "enhance",
            "--checkpoint",
            "m.ckpt",
            "--input",
            "data/qp51",
            "--out",
            "enh",
            "--frames",
            "1..=3",
            "--originals",
            "data/clean",
        ],
    );
    assert_eq!(stdout.lines().filter(|l| l.contains("ΔPSNR(y)")).count(), 3);
    let outputs: Vec<_> = files(&tmp.path().join("enh"))
        .into_iter()
        .filter(|p| p.extension().unwrap() == "ply")
        .collect();
    assert_eq!(outputs.len(), 3);
    for p in &outputs {
        let input = load_ply(tmp.path().join("data/qp51").join(p.file_name().unwrap())).unwrap();
        let output = load_ply(p).unwrap();
        assert_eq!(output.geometry(), input.geometry());
    }

    let whole = ok(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "enhance",
            "--checkpoint",
            "m.ckpt",
            "--input",
            "data/qp40",
            "--out",
            "enh40",
            "--originals",
            "data/clean",
        ],
    );
    let mean: f64 = whole
        .lines()
        .find_map(|l| l.strip_prefix("sequence mean ΔPSNR "))
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no mean in {whole}"));
    assert!(mean > 0.0, "{whole}");

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("m.run.json")).unwrap()).unwrap();
    assert_eq!(manifest["threads"], 1);
    assert_eq!(manifest["deterministic"], true);
    let replay = ok(tmp.path(), &["replay", "m.run.json"]);
    assert!(replay.contains("reproduced bit for bit"), "{replay}");
    ok(tmp.path(), &["replay", "enh/run.json"]);

    std::fs::write(tmp.path().join("enh/frame_0002.ply"), b"tampered").unwrap();
    let mut recorded: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("enh/run.json")).unwrap()).unwrap();
    recorded["outputs"][0]["sha256"] = "0".repeat(64).into();
    std::fs::write(tmp.path().join("tampered.json"), recorded.to_string()).unwrap();
    let err = failing(tmp.path(), &["replay", "tampered.json"]);
    assert!(err.contains("different bytes"), "{err}");
}

#[test]
fn ablation_variant_trains_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    toy_data(tmp.path(), "7");
    quick_config(tmp.path(), 2, 1e-3);
    ok(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "train-qe",
            "--pairs",
            "data/pairs.csv",
            "--out",
            "qe.ckpt",
        ],
    );
    ok(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "train",
            "--pairs",
            "data/pairs.csv",
            "--qe",
            "qe.ckpt",
            "--out",
            "m.ckpt",
            "--ablation",
            "no-tcca",
        ],
    );
    ok(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "enhance",
            "--checkpoint",
            "m.ckpt",
            "--input",
            "data/qp40",
            "--out",
            "enh",
            "--frames",
            "0",
        ],
    );
    let err = failing(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "train",
            "--pairs",
            "data/pairs.csv",
            "--qe",
            "qe.ckpt",
            "--out",
            "x.ckpt",
            "--ablation",
            "no-tcca,no-qe",
        ],
    );
    assert!(err.contains("conflicts"), "{err}");
    let out = bqe(
        tmp.path(),
        &["train", "--pairs", "data/pairs.csv", "--out", "x.ckpt", "--ablation", "no-magic"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn enhance_rejects_component_mismatch_and_missing_frames() {
    let tmp = tempfile::tempdir().unwrap();
    toy_data(tmp.path(), "8");
    quick_config(tmp.path(), 1, 0.0);
    ok(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "train",
            "--pairs",
            "data/pairs.csv",
            "--out",
            "m.ckpt",
            "--no-qe",
        ],
    );
    let err = failing(
        tmp.path(),
        &[
            "--config",
            "quick.toml",
            "--component",
            "cb",
            "enhance",
            "--checkpoint",
            "m.ckpt",
            "--input",
            "data/qp51",
            "--out",
            "enh",
        ],
    );
    assert!(err.contains("trained on component y"), "{err}");
    std::fs::create_dir(tmp.path().join("empty")).unwrap();
    let err = failing(
        tmp.path(),
        &["enhance", "--checkpoint", "m.ckpt", "--input", "empty", "--out", "enh"],
    );
    assert!(err.contains("no .ply files"), "{err}");
    let err = failing(
        tmp.path(),
        &[
            "enhance",
            "--checkpoint",
            "m.ckpt",
            "--input",
            "data/qp51",
            "--out",
            "enh",
            "--frames",
            "3..9",
        ],
    );
    assert!(err.contains("exceeds"), "{err}");
    let err = failing(
        tmp.path(),
        &["enhance", "--checkpoint", "data/pairs.csv", "--input", "data/qp51", "--out", "enh"],
    );
    assert!(err.contains("checkpoint"), "{err}");
}

fn write_rd(path: &Path, rows: &[(f64, [f64; 3])]) {
    let mut text = String::from("bpip,psnr_y,psnr_cb,psnr_cr\n");
    for (r, p) in rows {
        text.push_str(&format!("{r},{},{},{}\n", p[0], p[1], p[2]));
    }
    std::fs::write(path, text).unwrap();
}

fn anchor_rows() -> Vec<(f64, [f64; 3])> {
    vec![
        (0.5, [35.0, 40.0, 41.0]),
        (1.0, [38.0, 43.0, 44.0]),
        (2.0, [41.0, 46.0, 47.0]),
        (4.0, [44.0, 49.0, 50.0]),
    ]
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("ev/report.json")).unwrap()).unwrap()
}

#[test]
fn evaluate_identity_scaling_and_aggregation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_rd(&dir.join("a.csv"), &anchor_rows());
    ok(dir, &["evaluate", "--anchor", "a.csv", "--test", "a.csv", "--out-dir", "ev"]);
    let r = report(dir);
    assert!(r["bd_rate"].as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.0)));
    assert!(r["rows"]
        .as_array()
        .unwrap()
        .iter()
        .all(|row| row["delta_ycbcr"].as_f64() == Some(0.0)));
    for name in ["rd_y.svg", "rd_cb.svg", "rd_cr.svg", "anchor.csv", "test.csv", "run.json"] {
        assert!(dir.join("ev").join(name).exists(), "{name}");
    }

    let scaled: Vec<_> = anchor_rows().into_iter().map(|(r, p)| (r * 1.1, p)).collect();
    write_rd(&dir.join("b.csv"), &scaled);
    let stdout = ok(dir, &["evaluate", "--anchor", "a.csv", "--test", "b.csv", "--out-dir", "ev"]);
    assert!(stdout.contains("BD-rate: y +10.000%"), "{stdout}");
    for v in report(dir)["bd_rate"].as_array().unwrap() {
        assert!((v.as_f64().unwrap() - 10.0).abs() < 1e-6);
    }

    let gains = [0.461, 0.153, 0.254];
    let improved: Vec<_> = anchor_rows()
        .into_iter()
        .map(|(r, p)| (r, std::array::from_fn(|c| p[c] + gains[c])))
        .collect();
    write_rd(&dir.join("c.csv"), &improved);
    ok(dir, &["evaluate", "--anchor", "a.csv", "--test", "c.csv", "--out-dir", "ev"]);
    let mean = report(dir)["mean_delta_ycbcr"].as_f64().unwrap();
    assert!((mean - 0.396).abs() < 1e-3, "{mean}");
}

#[test]
fn evaluate_reports_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_rd(&dir.join("a.csv"), &anchor_rows());
    std::fs::write(dir.join("bad.csv"), "rate,psnr\n1,2\n").unwrap();
    let err = failing(dir, &["evaluate", "--anchor", "a.csv", "--test", "bad.csv"]);
    assert!(err.contains("bad.csv"), "{err}");
    let far: Vec<_> = anchor_rows().into_iter().map(|(r, p)| (r, p.map(|v| v + 30.0))).collect();
    write_rd(&dir.join("far.csv"), &far);
    let stdout = ok(dir, &["evaluate", "--anchor", "a.csv", "--test", "far.csv"]);
    assert!(stdout.contains("BD-rate: y n/a"), "{stdout}");
    failing(dir, &["evaluate", "--anchor", "a.csv", "--test", "missing.csv"]);
}

#[test]
fn thread_cap_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bqe"))
        .args(["make-toy-data", "--out", "d", "--frames", "2", "--points", "32", "--qps", "51"])
        .current_dir(tmp.path())
        .env("BQE_NUM_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("d/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["threads"], 1);
    assert_eq!(manifest["deterministic"], false);
}
