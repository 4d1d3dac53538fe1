use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use graformer::data::Dataset;
use graformer::training::read_log;
use graformer::{DenseMatrix, GraFormer, SkeletonGraph};
use graformer_cli::viz::decode_pgm;
use graformer_cli::{run, CliError};
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn cli(args: &[&str]) -> Result<String, CliError> {
    let mut out = Vec::new();
    let mut full = vec!["graformer"];
    full.extend_from_slice(args);
    run(full, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &TempDir, name: &str, skeleton: &str, count: usize, seed: u64) -> PathBuf {
    let path = dir.path().join(name);
    cli(&[
        "gen",
        "--skeleton",
        skeleton,
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        p(&path),
    ])
    .unwrap();
    path
}

#[test]
fn gen_writes_requested_records_deterministically() {
    let dir = TempDir::new().unwrap();
    let a = gen(&dir, "a.grfd", "human16", 64, 7);
    let b = gen(&dir, "b.grfd", "human16", 64, 7);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 65);
    assert!(text.starts_with("GRFD v1 j=16 skeleton=human16"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = gen(&dir, "c.grfd", "human16", 64, 8);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d.grfd");
    let r = bin(&["gen", "--count", "0", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let r = bin(&["gen", "--count", "3", "--out", "/nonexistent-dir/x/d.grfd"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("cannot write"));
    let r = bin(&["frobnicate"]);
    assert_eq!(r.status.code(), Some(2));
    let r = bin(&["inspect", "--preset", "huge"]);
    assert_eq!(r.status.code(), Some(2));
    let r = bin(&["--help"]);
    assert_eq!(r.status.code(), Some(0));
}

#[test]
fn train_writes_checkpoints_log_and_effective_config() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "d.grfd", "human16", 64, 7);
    let out = dir.path().join("run");
    let text = cli(&[
        "train",
        "--data",
        p(&data),
        "--preset",
        "small",
        "--epochs",
        "3",
        "--batch-size",
        "16",
        "--seed",
        "3",
        "--out",
        p(&out),
    ])
    .unwrap();
    assert!(text.contains("epoch 3/3"));
    for f in [
        "final.grfk",
        "best.grfk",
        "final.grfk.json",
        "train.log",
        "run_config.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let log = read_log(&out.join("train.log")).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log
        .iter()
        .all(|r| r.train_loss.is_finite() && r.train_loss > 0.0));
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_config.json")).unwrap())
            .unwrap();
    assert_eq!(run["model"]["blocks"], 2);
    assert_eq!(run["model"]["dim"], 64);
    assert_eq!(run["model"]["dropout"], 0.1);
    assert_eq!(run["train"]["batch_size"], 16);
    assert_eq!(run["train"]["seed"], 3);
    let model = GraFormer::load(&out.join("final.grfk")).unwrap();
    assert_eq!(model.config().dim, 64);
}

#[test]
fn default_flags_match_documented_defaults() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "d.grfd", "human16", 8, 1);
    let out = dir.path().join("run");
    cli(&[
        "train",
        "--data",
        p(&data),
        "--epochs",
        "0",
        "--out",
        p(&out),
    ])
    .unwrap();
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_config.json")).unwrap())
            .unwrap();
    assert_eq!(run["train"]["learning_rate"], 0.001);
    assert_eq!(run["train"]["batch_size"], 64);
    assert_eq!(run["model"]["dropout"], 0.25);
    assert_eq!(run["model"]["blocks"], 5);
    assert_eq!(run["model"]["dim"], 96);
    assert_eq!(run["model"]["heads"], 4);
    assert_eq!(run["model"]["cheb_order"], 2);
}

#[test]
fn flags_override_config_file_which_overrides_preset() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "d.grfd", "human16", 8, 1);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"preset": "small", "blocks": 1, "dim": 32, "lr": 0.01, "epochs": 1, "seed": 9}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    cli(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--dim",
        "16",
        "--out",
        p(&out),
    ])
    .unwrap();
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_config.json")).unwrap())
            .unwrap();
    assert_eq!(run["model"]["dim"], 16);
    assert_eq!(run["model"]["blocks"], 1);
    assert_eq!(run["model"]["dropout"], 0.1);
    assert_eq!(run["train"]["learning_rate"], 0.01);
    assert_eq!(run["train"]["seed"], 9);

    std::fs::write(&cfg, r#"{"dimension": 32}"#).unwrap();
    let err = cli(&["train", "--config", p(&cfg), "--data", p(&data)]).unwrap_err();
    assert_eq!(err.code, 2);
    assert!(err.message.contains("dimension"));
}

#[test]
fn skeleton_mismatch_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let hand = gen(&dir, "hand.grfd", "hand21", 4, 1);
    let err = cli(&["train", "--data", p(&hand), "--skeleton", "human16"]).unwrap_err();
    assert_eq!(err.code, 2);
    assert!(err.message.contains("21 joints"));

    let body = gen(&dir, "body.grfd", "human16", 4, 1);
    let out = dir.path().join("run");
    cli(&[
        "train",
        "--data",
        p(&body),
        "--preset",
        "small",
        "--epochs",
        "0",
        "--out",
        p(&out),
    ])
    .unwrap();
    let ckpt = out.join("final.grfk");
    let r = bin(&["eval", "--checkpoint", p(&ckpt), "--data", p(&hand)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_code_three() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "d.grfd", "human16", 16, 1);
    let out = dir.path().join("run");
    let r = bin(&[
        "train",
        "--data",
        p(&data),
        "--preset",
        "small",
        "--lr",
        "1e300",
        "--epochs",
        "3",
        "--batch-size",
        "4",
        "--out",
        p(&out),
    ]);
    assert_eq!(
        r.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
    assert!(String::from_utf8_lossy(&r.stderr).contains("step"));
}

#[test]
fn eval_reports_two_decimals_and_per_action_rows() {
    let dir = TempDir::new().unwrap();
    let data_path = gen(&dir, "d.grfd", "human16", 12, 2);
    let mut data = Dataset::load(&data_path, &SkeletonGraph::human16()).unwrap();
    for (i, s) in data.samples.iter_mut().enumerate() {
        s.action = Some(if i % 3 == 0 { "Walking" } else { "Sitting" }.into());
        s.subject = Some("S9".into());
    }
    let tagged = dir.path().join("tagged.grfd");
    data.save(&tagged).unwrap();
    let out = dir.path().join("run");
    cli(&[
        "train",
        "--data",
        p(&tagged),
        "--preset",
        "small",
        "--epochs",
        "0",
        "--out",
        p(&out),
    ])
    .unwrap();
    let ckpt = out.join("final.grfk");

    let text = cli(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&tagged),
        "--identity-check",
    ])
    .unwrap();
    assert!(text.contains("MPJPE 0.00 mm over 12 samples"), "{text}");

    let report_path = dir.path().join("report.json");
    let text = cli(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&tagged),
        "--out",
        p(&report_path),
    ])
    .unwrap();
    let last = text.lines().last().unwrap();
    let value: &str = last.split_whitespace().nth(1).unwrap();
    assert_eq!(value.split('.').nth(1).unwrap().len(), 2, "{last}");
    assert!(text.contains("Walking"));
    assert!(text.contains("Sitting"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_path).unwrap()).unwrap();
    assert_eq!(report["per_action"]["Walking"][0], 4);
    assert_eq!(report["per_action"]["Sitting"][0], 8);
}

#[test]
fn inspect_counts_match_targets_and_add_up() {
    let dir = TempDir::new().unwrap();
    for (preset, lo, hi) in [("default", 520_000, 780_000), ("small", 96_000, 144_000)] {
        let path = dir.path().join(format!("{preset}.json"));
        cli(&["inspect", "--preset", preset, "--out", p(&path)]).unwrap();
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let total = report["total"].as_u64().unwrap();
        assert!((lo..=hi).contains(&total), "{preset}: {total}");
        let sum: u64 = report["breakdown"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e[1].as_u64().unwrap())
            .sum();
        assert_eq!(sum, total);
    }
    let text = cli(&["inspect", "--preset", "default", "--cheb-order", "3"]).unwrap();
    assert!(
        text.contains("total trainable parameters: 656419"),
        "{text}"
    );
}

fn read_matrix(path: &Path) -> DenseMatrix {
    DenseMatrix::from_csv(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

#[test]
fn export_viz_matches_initialization_and_encodings_agree() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("viz");
    cli(&[
        "export-viz",
        "--preset",
        "small",
        "--seed",
        "4",
        "--cell-size",
        "3",
        "--out",
        p(&out),
    ])
    .unwrap();
    let g = SkeletonGraph::human16();
    let adj = g.adjacency();
    let mut stems = Vec::new();
    for i in 0..2 {
        for l in ["gcn1", "gcn2"] {
            stems.push(format!("adjacency_blocks_{i}_graatt_{l}"));
        }
    }
    for stem in &stems {
        let a = read_matrix(&out.join(format!("{stem}.csv")));
        for r in 0..16 {
            let row = a.row(r);
            let mask: f64 = (0..16)
                .filter(|&c| c == r || adj.get(r, c) != 0.0)
                .map(|c| row[c])
                .sum();
            assert!(mask > 0.5, "{stem} row {r}: {mask}");
            let c = argmax(row);
            assert!(c == r || adj.get(r, c) != 0.0);
        }
    }
    let t0 = read_matrix(&out.join("chebyshev_T0.csv"));
    assert_eq!(t0, DenseMatrix::identity(16));
    let (w, h, px) = decode_pgm(&std::fs::read(out.join("chebyshev_T0.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (48, 48));
    for r in 0..16 {
        for c in 0..16 {
            let v = px[(r * 3 + 1) * w + c * 3 + 1];
            assert_eq!(v, if r == c { 255 } else { 0 });
        }
    }

    stems.extend(["normalized_adjacency", "chebyshev_T1", "chebyshev_T2"].map(String::from));
    for stem in &stems {
        let m = read_matrix(&out.join(format!("{stem}.csv")));
        let (w, _, px) =
            decode_pgm(&std::fs::read(out.join(format!("{stem}.pgm"))).unwrap()).unwrap();
        for r in 0..16 {
            let pix_row: Vec<u8> = (0..16).map(|c| px[(r * 3) * w + c * 3]).collect();
            let best = argmax(m.row(r));
            assert_eq!(
                pix_row[best],
                *pix_row.iter().max().unwrap(),
                "{stem} row {r}"
            );
        }
    }
}

#[test]
fn training_is_reproducible_and_independent_of_prefetch() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "d.grfd", "human16", 32, 5);
    let run_once = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let r = Command::new(env!("CARGO_BIN_EXE_graformer"))
            .env("GRFK_THREADS", threads)
            .args([
                "train",
                "--data",
                p(&data),
                "--preset",
                "small",
                "--epochs",
                "2",
                "--batch-size",
                "8",
                "--seed",
                "11",
                "--holdout",
                "8",
                "--out",
                p(&out),
            ])
            .output()
            .unwrap();
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        out
    };
    let a = run_once("a", "1");
    let b = run_once("b", "1");
    let c = run_once("c", "4");
    for f in ["final.grfk", "best.grfk"] {
        let bytes = std::fs::read(a.join(f)).unwrap();
        assert_eq!(bytes, std::fs::read(b.join(f)).unwrap());
        assert_eq!(bytes, std::fs::read(c.join(f)).unwrap());
    }
    let losses = |d: &Path| -> Vec<f64> {
        read_log(&d.join("train.log"))
            .unwrap()
            .iter()
            .map(|r| r.train_loss)
            .collect()
    };
    assert_eq!(losses(&a), losses(&b));
}
