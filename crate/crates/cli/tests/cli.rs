use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn spec_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/specs/synthetic2.json")
}

fn tpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tpp(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// A small dataset plus a tiny trained model.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        let gen = f.p("gen");
        ok(&["generate", "--spec", s(&spec_path()), "--n", "12", "--horizon", "20", "--seed", "3", "--out", s(&gen)]);
        f
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        self.p("gen/synthetic2.jsonl")
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let dir = self.p(out);
        let data = self.data();
        let mut args = vec![
            "train", "--train-data", s(&data), "--val-data", s(&data), "--d-model", "8",
            "--latent-dim", "3", "--batch-size", "4", "--mc-samples", "4", "--out", s(&dir),
        ];
        args.extend_from_slice(extra);
        if !extra.contains(&"--epochs") {
            args.extend_from_slice(&["--epochs", "2"]);
        }
        ok(&args);
        dir
    }
}

#[test]
fn generate_is_deterministic_and_manifested() {
    let f = Fixture::new();
    let again = f.p("gen2");
    ok(&["generate", "--spec", s(&spec_path()), "--n", "12", "--horizon", "20", "--seed", "3", "--out", s(&again)]);
    let a = std::fs::read(f.data()).unwrap();
    let b = std::fs::read(again.join("synthetic2.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 12);

    let manifest = read_json(&f.p("gen/manifest.json"));
    let arts = manifest["artifacts"].as_array().unwrap();
    assert!(arts.iter().any(|x| x["path"] == "resolved_config.json"));
    for art in arts {
        let bytes = std::fs::read(f.p("gen").join(art["path"].as_str().unwrap())).unwrap();
        assert_eq!(art["sha256"], hex::encode(Sha256::digest(&bytes)));
    }
    let cfg = read_json(&f.p("gen/resolved_config.json"));
    assert_eq!(cfg["n_sequences"], 12);
    assert_eq!(cfg["seed"], 3);
}

#[test]
fn usage_errors_exit_one() {
    let f = Fixture::new();
    assert_eq!(tpp(&["generate", "--spec", s(&spec_path()), "--n", "0", "--out", s(&f.p("x"))]).status.code(), Some(1));
    assert_eq!(tpp(&["train", "--out", s(&f.p("y"))]).status.code(), Some(1));
    assert_eq!(tpp(&["train", "--train-data", "/nonexistent.jsonl", "--out", s(&f.p("y"))]).status.code(), Some(1));
    assert_eq!(tpp(&["bogus"]).status.code(), Some(1));
    assert_eq!(tpp(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_with_flag_override() {
    let f = Fixture::new();
    let cfg = f.p("run.json");
    let data = f.data();
    std::fs::write(
        &cfg,
        serde_json::json!({
            "train_data": data,
            "method": "linear",
            "J": 2,
            "encoder": {"D": 8, "H": 2, "d_k": 4, "n_layers": 1, "dropout": 0.0},
            "train": {"epochs": 5, "batch_size": 4, "mc_samples": 3},
            "seed": 9
        })
        .to_string(),
    )
    .unwrap();
    let out = f.p("cfgrun");
    ok(&["train", "--config", s(&cfg), "--epochs", "1", "--out", s(&out)]);
    let resolved = read_json(&out.join("resolved_config.json"));
    assert_eq!(resolved["train"]["epochs"], 1);
    assert_eq!(resolved["train"]["seed"], 9);
    assert_eq!(resolved["method"], "linear");
    let model = read_json(&out.join("model.json"));
    assert_eq!(model["config"]["variant"], "linear");
    assert_eq!(model["config"]["J"], 2);

    std::fs::write(&cfg, r#"{"unknown_field": 1}"#).unwrap();
    assert_eq!(tpp(&["train", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn resume_continues_exactly() {
    let f = Fixture::new();
    let full = f.train("full", &["--epochs", "3"]);
    let part = f.train("part", &["--epochs", "2"]);
    let state = part.join("train_state.json");
    let resumed = f.train("resumed", &["--epochs", "3", "--resume", s(&state)]);
    let losses = |dir: &Path| -> Vec<f64> {
        std::fs::read_to_string(dir.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["train"]["total"].as_f64().unwrap())
            .collect()
    };
    let a = losses(&full);
    let b = losses(&resumed);
    assert_eq!(b.len(), 1);
    assert!((a[2] - b[0]).abs() <= 1e-9 * a[2].abs());
    assert_eq!(std::fs::read(full.join("model.json")).unwrap(), std::fs::read(resumed.join("model.json")).unwrap());
}

#[test]
fn evaluate_predict_and_analyze() {
    let f = Fixture::new();
    let model = f.train("m", &["--method", "exponential"]);
    let ckpt = model.join("model.json");
    let data = f.data();
    let spec = spec_path();

    let ev1 = f.p("ev1");
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--truth-spec", s(&spec), "--out", s(&ev1)]);
    let m1 = read_json(&ev1.join("metrics.json"));
    for key in ["f1", "time_rmse", "diversity", "intensity_rmse", "intensity_mae"] {
        assert!(m1.get(key).is_some(), "missing {key}");
    }
    let ev2 = f.p("ev2");
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ev2)]);
    let m2 = read_json(&ev2.join("metrics.json"));
    assert!(m2.get("intensity_rmse").is_none());
    assert_eq!(m1["f1"], m2["f1"]);
    assert_eq!(m1["time_rmse"], m2["time_rmse"]);

    let pr = f.p("pr");
    ok(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--scheme", "trapezoid", "--out", s(&pr)]);
    let text = std::fs::read_to_string(pr.join("predictions.jsonl")).unwrap();
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["seq_id", "pos", "t_true", "t_hat", "k_true", "k_hat", "type_probs", "pdf_mass"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(text.lines().count(), m1["n_events"].as_u64().unwrap() as usize);

    let svd = f.p("svd");
    ok(&["analyze", "--mode", "svd", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&svd)]);
    let csv = std::fs::read_to_string(svd.join("projections.csv")).unwrap();
    assert!(csv.starts_with("x,y,z,label\n"));
    assert!(read_json(&svd.join("svd.json"))["singular_values"].as_array().unwrap().len() == 3);

    let tr = f.p("trace");
    ok(&["analyze", "--mode", "trace", "--checkpoint", s(&ckpt), "--data", s(&data), "--truth-spec", s(&spec), "--resolution", "50", "--out", s(&tr)]);
    let csv = std::fs::read_to_string(tr.join("trace.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "t,lambda_hat_0,lambda_hat_1,lambda_hat_2,lambda_true_0,lambda_true_1,lambda_true_2");
    assert_eq!(csv.lines().count(), 51);

    let gof = f.p("gof");
    ok(&["analyze", "--mode", "gof", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&gof)]);
    let g = read_json(&gof.join("gof.json"));
    let ks = g["ks"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ks));
    assert!(g["p"].is_f64());
}

#[test]
fn baseline_training_and_evaluation() {
    let f = Fixture::new();
    let data = f.data();
    let out = f.p("hp");
    ok(&["train", "--method", "hp-ek", "--train-data", s(&data), "--iterations", "50", "--out", s(&out)]);
    let fit = read_json(&out.join("hawkes_fit.json"));
    assert_eq!(fit["K"], 3);
    assert_eq!(fit["fit_meta"]["kernel"], "exponential");
    let ev = f.p("hpev");
    ok(&["evaluate", "--checkpoint", s(&out.join("hawkes_fit.json")), "--data", s(&data), "--truth-spec", s(&spec_path()), "--out", s(&ev)]);
    assert!(read_json(&ev.join("metrics.json"))["intensity_rmse"].is_f64());
    let gof = f.p("hpgof");
    ok(&["analyze", "--mode", "gof", "--checkpoint", s(&out.join("hawkes_fit.json")), "--data", s(&data), "--out", s(&gof)]);
    // SVD needs latents.
    let code = tpp(&["analyze", "--mode", "svd", "--checkpoint", s(&out.join("hawkes_fit.json")), "--data", s(&data), "--out", s(&gof)]);
    assert_eq!(code.status.code(), Some(1));
}

#[test]
fn type_mismatch_exits_one() {
    let f = Fixture::new();
    let model = f.train("m", &[]);
    let wide = f.p("wide.jsonl");
    std::fs::write(&wide, "{\"seq\":[{\"k\":0,\"t\":0.5},{\"k\":5,\"t\":1.0}]}\n").unwrap();
    let out = tpp(&["evaluate", "--checkpoint", s(&model.join("model.json")), "--data", s(&wide), "--out", s(&f.p("e"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn numeric_failure_exits_two() {
    let f = Fixture::new();
    let bad = f.p("huge.jsonl");
    let line = "{\"seq\":[{\"k\":0,\"t\":1e200},{\"k\":1,\"t\":3e200},{\"k\":0,\"t\":9e200}]}\n";
    std::fs::write(&bad, line.repeat(4)).unwrap();
    let out = tpp(&["train", "--train-data", s(&bad), "--epochs", "1", "--d-model", "8", "--latent-dim", "2", "--out", s(&f.p("n"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
