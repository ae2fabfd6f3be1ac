use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tsummary::vbgmm::{MixtureModel, Standardizer};

const TINY: &str = "seed = 5\n\n[synthetic]\nsubjects = 2\nbouts_per_class = 1\nmin_minutes = 1\nmax_minutes = 1\n\n[mlp]\nepochs = 5\n";

fn tsummary(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsummary"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn tsummary")
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_deterministic() {
    let dir = tiny_dir();
    for out in ["a", "b"] {
        let o = tsummary(dir.path(), &["generate", "--config", "tiny.toml", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("bouts=10"));
    }
    let a = read_tree(&dir.path().join("a"));
    assert!(a.len() > 1);
    assert_eq!(a, read_tree(&dir.path().join("b")));

    let o = tsummary(dir.path(), &["generate", "--config", "tiny.toml", "--seed", "6", "--out", "c"]);
    assert!(o.status.success());
    assert_ne!(a, read_tree(&dir.path().join("c")));
}

#[test]
fn invalid_value_exits_2_and_names_key() {
    let dir = tiny_dir();
    fs::write(dir.path().join("bad.toml"), "[mlp]\nlearning_rate = -1.0\n").unwrap();
    let o = tsummary(dir.path(), &["run", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mlp.learning_rate"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_key_exits_2_with_line() {
    let dir = tiny_dir();
    fs::write(dir.path().join("bad.toml"), "seed = 1\n[gmm]\nkmax = 3\n").unwrap();
    let o = tsummary(dir.path(), &["run", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("kmax") && err.contains("line 3"), "{err}");
}

#[test]
fn unknown_method_is_rejected() {
    let dir = tiny_dir();
    let o = tsummary(dir.path(), &["evaluate", "--methods", "cluster_summary,bogus", "--corpus", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn missing_corpus_is_a_stage_error() {
    let dir = tiny_dir();
    let o = tsummary(dir.path(), &["featurize", "--corpus", "nowhere"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("load"), "{}", stderr(&o));
}

#[test]
fn fit_then_summarize_shapes() {
    let dir = tiny_dir();
    let p = dir.path();
    assert!(tsummary(p, &["generate", "--config", "tiny.toml", "--out", "corpus"]).status.success());

    let o = tsummary(p, &["featurize", "--config", "tiny.toml", "--corpus", "corpus", "--out", "feat"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let features = fs::read_to_string(p.join("feat/features.csv")).unwrap();
    let width = features.lines().next().unwrap().split(',').count();
    assert!(features.lines().skip(1).all(|l| l.split(',').count() == width));

    let o = tsummary(p, &["fit", "--config", "tiny.toml", "--corpus", "corpus", "--out", "model"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model_gmm.json", "model_mlp.json", "model_regression.json", "summaries.csv"] {
        assert!(p.join("model").join(f).exists(), "{f}");
    }

    let o = tsummary(
        p,
        &["summarize", "--config", "tiny.toml", "--corpus", "corpus", "--model", "model/model_gmm.json", "--out", "sum"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let model: MixtureModel = serde_json::from_str(&fs::read_to_string(p.join("model/model_gmm.json")).unwrap()).unwrap();
    let text = fs::read_to_string(p.join("sum/summaries.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 2 + model.k_effective());
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    for row in rows {
        let ratios: f64 = row.split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((ratios - 1.0).abs() < 1e-12, "{row}");
    }
    // the full-corpus fit and a later summarize agree
    assert_eq!(text, fs::read_to_string(p.join("model/summaries.csv")).unwrap());
}

#[test]
fn summarize_rejects_wrong_dimension() {
    let dir = tiny_dir();
    let p = dir.path();
    assert!(tsummary(p, &["generate", "--config", "tiny.toml", "--out", "corpus"]).status.success());
    let model = MixtureModel::from_parts(
        vec![1.0],
        vec![vec![0.0, 0.0]],
        vec![vec![1.0, 0.0, 0.0, 1.0]],
        Standardizer::identity(2),
    )
    .unwrap();
    fs::write(p.join("small.json"), serde_json::to_string(&model).unwrap()).unwrap();
    let o = tsummary(p, &["summarize", "--config", "tiny.toml", "--corpus", "corpus", "--model", "small.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("summarize"), "{}", stderr(&o));
}

#[test]
fn run_writes_every_artifact() {
    let dir = tiny_dir();
    let p = dir.path();
    let o = tsummary(p, &["run", "--config", "tiny.toml", "--methods", "cluster_summary,linreg_local", "--out", "r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("config fingerprint:"));
    for f in [
        "report.json",
        "confusion_cluster_summary.csv",
        "rmse_cluster_summary.csv",
        "rmse_linreg_local.csv",
        "summaries.csv",
        "model_gmm.json",
        "corpus/manifest.csv",
    ] {
        assert!(p.join("r").join(f).exists(), "{f}");
    }
    assert!(!p.join("r/confusion_linreg_local.csv").exists());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("r/report.json")).unwrap()).unwrap();
    assert_eq!(report["methods"].as_array().unwrap().len(), 2);
    assert!(report["config"].get("io").is_none());
}
