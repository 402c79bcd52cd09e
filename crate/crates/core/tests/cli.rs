mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use common::{synthetic_texts, write_tsv};

const QUICK: &str = "hidden_dim = 8\nembedding_dim = 6\nepochs = 3\nbatch_size = 16\n";

fn mpad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpad"))
        .args(args)
        .env_remove("MPAD_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        write_tsv(
            &dir.path().join("train.tsv"),
            &synthetic_texts(60, 2, (1, 3), 1),
        );
        write_tsv(
            &dir.path().join("test.tsv"),
            &synthetic_texts(20, 2, (1, 3), 2),
        );
        std::fs::write(dir.path().join("quick.cfg"), QUICK).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (train, test, cfg, out) = (
            self.s("train.tsv"),
            self.s("test.tsv"),
            self.s("quick.cfg"),
            self.s(out),
        );
        let mut args = vec![
            "train", "--train", &train, "--test", &test, "--config", &cfg, "--out", &out,
        ];
        args.extend_from_slice(extra);
        mpad(&args)
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn build_graph_json() {
    let o = mpad(&["build-graph", "--input", "a b a"]);
    assert_eq!(o.status.code(), Some(0));
    let g: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(g["nodes"], serde_json::json!(["a", "b", "⊙"]));
    let edges = g["edges"].as_array().unwrap();
    let weight = |s: u64, t: u64| {
        edges
            .iter()
            .find(|e| e["source"] == s && e["target"] == t)
            .map(|e| e["weight"].as_f64().unwrap())
    };
    assert_eq!(weight(0, 1), Some(1.0));
    assert_eq!(weight(1, 0), Some(1.0));
    for n in 0..2 {
        assert_eq!(weight(n, 2), Some(1.0));
        assert_eq!(weight(2, n), Some(1.0));
    }
    assert_eq!(edges.len(), 6);
}

#[test]
fn build_graph_edge_list_without_master() {
    let o = mpad(&[
        "build-graph",
        "--input",
        "a b",
        "--no-master",
        "--format",
        "edgelist",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "a b 1\n");
    let o = mpad(&["--json", "build-graph", "--input", "a b", "--no-master"]);
    let g: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(g["nodes"].as_array().unwrap().len(), 2);
    assert_eq!(g["edges"].as_array().unwrap().len(), 1);
}

#[test]
fn build_graph_from_file_and_empty_input() {
    let f = Fixture::new();
    std::fs::write(f.path("doc.txt"), "x y z").unwrap();
    let o = mpad(&["build-graph", "--input", &f.s("doc.txt"), "--undirected"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("\"directed\": false"));
    let o = mpad(&["build-graph", "--input", "   "]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty document"));
}

#[test]
fn train_writes_artifacts_and_evaluates_consistently() {
    let f = Fixture::new();
    let o = f.train("run", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("best validation accuracy"));
    assert!(text.contains("test accuracy"));
    for name in [
        "model.ckpt",
        "vocab.txt",
        "train_log.jsonl",
        "manifest.json",
        "summary.json",
        "split/train.tsv",
        "split/val.tsv",
    ] {
        assert!(f.path("run").join(name).is_file(), "{name} missing");
    }
    let log = std::fs::read_to_string(f.path("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "train_loss", "train_acc", "val_acc", "seconds"] {
            assert!(r.get(key).is_some(), "{key} missing from log");
        }
    }
    let manifest = read_json(&f.path("run/manifest.json"));
    assert_eq!(manifest["settings"]["model"]["hidden_dim"], 8);
    assert_eq!(
        manifest["inputs"]["train"]["sha256"]
            .as_str()
            .unwrap()
            .len(),
        64
    );
    let summary = read_json(&f.path("run/summary.json"));

    // Checkpoint + its own training split reproduces the logged accuracy.
    let o = mpad(&[
        "--json",
        "evaluate",
        "--checkpoint",
        &f.s("run/model.ckpt"),
        "--input",
        &f.s("run/split/train.tsv"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let logged = summary["train_acc"].as_f64().unwrap();
    assert!((m["accuracy"].as_f64().unwrap() - logged).abs() < 1e-9);

    let o = mpad(&[
        "evaluate",
        "--checkpoint",
        &f.s("run/model.ckpt"),
        "--input",
        &f.s("test.tsv"),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("accuracy: "));
}

#[test]
fn predict_and_export_attention() {
    let f = Fixture::new();
    assert_eq!(f.train("run", &[]).status.code(), Some(0));
    std::fs::write(f.path("one.txt"), "the k0w1 of k0w2 .\n").unwrap();
    let o = mpad(&[
        "predict",
        "--checkpoint",
        &f.s("run/model.ckpt"),
        "--input",
        &f.s("one.txt"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    let (label, conf) = out.trim_end().split_once('\t').unwrap();
    assert!(label.starts_with("class"));
    let conf: f64 = conf.parse().unwrap();
    assert!((0.5..=1.0).contains(&conf));

    let o = mpad(&[
        "export-attention",
        "--checkpoint",
        &f.s("run/model.ckpt"),
        "--input",
        &f.s("one.txt"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rec: Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    let tokens = rec["tokens"].as_array().unwrap();
    let steps = rec["per_step_alpha"].as_array().unwrap();
    assert_eq!(steps.len(), 2);
    for step in steps {
        let alpha: Vec<f64> = step
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(alpha.len(), tokens.len());
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn same_seed_reproduces_checkpoint() {
    let f = Fixture::new();
    assert_eq!(f.train("a", &["--seed", "5"]).status.code(), Some(0));
    assert_eq!(f.train("b", &["--seed", "5"]).status.code(), Some(0));
    let digest = |run: &str| {
        read_json(&f.path(run).join("manifest.json"))["outputs"]["checkpoint"]["sha256"].clone()
    };
    assert_eq!(digest("a"), digest("b"));
    let losses = |run: &str| -> Vec<f64> {
        std::fs::read_to_string(f.path(run).join("train_log.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                serde_json::from_str::<Value>(l).unwrap()["train_loss"]
                    .as_f64()
                    .unwrap()
            })
            .collect()
    };
    assert_eq!(losses("a"), losses("b"));
}

#[test]
fn output_directory_from_environment() {
    let f = Fixture::new();
    let out = f.path("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_mpad"))
        .args([
            "train",
            "--train",
            &f.s("train.tsv"),
            "--config",
            &f.s("quick.cfg"),
            "--epochs",
            "1",
        ])
        .env("MPAD_OUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("model.ckpt").is_file());
}

#[test]
fn input_errors_exit_with_2() {
    let f = Fixture::new();
    let o = mpad(&["train", "--train", &f.s("missing.tsv"), "--out", &f.s("x")]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(f.path("bad.cfg"), "epochs = 2\nwindow = wide\n").unwrap();
    let o = mpad(&[
        "train",
        "--train",
        &f.s("train.tsv"),
        "--config",
        &f.s("bad.cfg"),
        "--out",
        &f.s("x"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.cfg:2:"), "{}", stderr(&o));

    std::fs::write(f.path("bad.tsv"), "pos\tfine text\nno tab here\n").unwrap();
    let o = mpad(&["train", "--train", &f.s("bad.tsv"), "--out", &f.s("x")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.tsv:2:"), "{}", stderr(&o));
}

#[test]
fn corrupted_checkpoint_and_foreign_vocabulary_exit_with_2() {
    let f = Fixture::new();
    assert_eq!(f.train("run", &[]).status.code(), Some(0));
    let mut bytes = std::fs::read(f.path("run/model.ckpt")).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0xFF;
    std::fs::write(f.path("broken.ckpt"), &bytes).unwrap();
    let o = mpad(&[
        "evaluate",
        "--checkpoint",
        &f.s("broken.ckpt"),
        "--vocab",
        &f.s("run/vocab.txt"),
        "--input",
        &f.s("test.tsv"),
    ]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(f.path("other_vocab.txt"), "<unk>\t0\nzzz\t4\n").unwrap();
    let o = mpad(&[
        "predict",
        "--checkpoint",
        &f.s("run/model.ckpt"),
        "--vocab",
        &f.s("other_vocab.txt"),
        "--input",
        &f.s("test.tsv"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("digest"), "{}", stderr(&o));
}

#[test]
fn numerical_failure_exits_with_3() {
    let f = Fixture::new();
    let o = f.train("run", &["--learning-rate", "1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn path_variant_on_single_sentence_corpus() {
    let f = Fixture::new();
    write_tsv(&f.path("single.tsv"), &synthetic_texts(40, 2, (1, 1), 4));
    let o = mpad(&[
        "train",
        "--train",
        &f.s("single.tsv"),
        "--config",
        &f.s("quick.cfg"),
        "--variant",
        "path",
        "--out",
        &f.s("p"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    std::fs::write(f.path("two.txt"), "the k1w0 of a . k1w2 is k1w3 .\n").unwrap();
    let o = mpad(&[
        "export-attention",
        "--checkpoint",
        &f.s("p/model.ckpt"),
        "--input",
        &f.s("two.txt"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rec: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let sentences = rec["sentences"].as_array().unwrap();
    assert_eq!(sentences.len(), 2);
    assert_eq!(
        sentences[1]["tokens"],
        serde_json::json!(["k1w2", "is", "k1w3", "."])
    );
    let level2 = rec["sentence_alpha"].as_array().unwrap();
    assert_eq!(level2.len(), 2);
    for alpha in level2 {
        let alpha: Vec<f64> = alpha
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(alpha.len(), 2);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn ablation_grid() {
    let f = Fixture::new();
    let (train, cfg) = (f.s("train.tsv"), f.s("quick.cfg"));
    let base = [
        "ablate", "--train", &train, "--config", &cfg, "--epochs", "1",
    ];
    let with = |grid: &str, json: bool| {
        let mut args: Vec<&str> = Vec::new();
        if json {
            args.push("--json");
        }
        args.extend_from_slice(&base);
        args.extend_from_slice(&["--grid", grid]);
        mpad(&args)
    };
    let o = with("T=1..2", true);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["vanilla"], true);
    assert_eq!(rows[0]["vanilla"], false);

    let o = with("no-skip", false);
    assert_eq!(o.status.code(), Some(0));
    let table = stdout(&o);
    assert!(table.lines().any(|l| l.starts_with("*vanilla")));
    assert!(table.lines().any(|l| l.starts_with(" no-skip")));

    assert_eq!(with("sideways", false).status.code(), Some(2));
    assert_eq!(with(" ; ", false).status.code(), Some(2));
}

#[test]
fn cross_validation_reports_mean_and_std() {
    let f = Fixture::new();
    let o = mpad(&[
        "--json",
        "cross-validate",
        "--train",
        &f.s("train.tsv"),
        "--config",
        &f.s("quick.cfg"),
        "--epochs",
        "1",
        "--folds",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cv: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cv["fold_accuracies"].as_array().unwrap().len(), 3);
    assert!(cv["std"].as_f64().unwrap() >= 0.0);
    let o = mpad(&[
        "cross-validate",
        "--train",
        &f.s("train.tsv"),
        "--folds",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
}
