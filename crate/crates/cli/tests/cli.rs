use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn emo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emo")).args(args).output().expect("run emo")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["gen-synth", "--out", out, "--min-frames", "5", "--max-frames", "15"];
    args.extend_from_slice(extra);
    let o = emo(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    o
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL_TRAIN: &str = r#"
[train.dims]
d_in = 8
d_enc = 16
mlp_hidden = 16
embedding = 8
d_att = 8
"#;

#[test]
fn gen_synth_writes_corpus_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    let o = gen(&dir, &["--n", "10", "--din", "4", "--split-ratios", "0.8,0.1,0.1"]);
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["splits"]["train"], 8);
    assert_eq!(summary["splits"]["valid"], 1);
    assert_eq!(summary["splits"]["test"], 1);

    let manifest = fs::read_to_string(dir.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    assert_eq!(fs::read_dir(dir.join("features")).unwrap().count(), 10);
    let first: Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    for key in ["id", "path", "vad", "disc", "split", "corpus"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    let snapshot = |d: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = fs::read_dir(d.join("features"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files.push(d.join("manifest.jsonl"));
        files
            .into_iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect()
    };
    let before = snapshot(&dir);
    gen(&dir, &["--n", "10", "--din", "4", "--split-ratios", "0.8,0.1,0.1"]);
    assert_eq!(before, snapshot(&dir));
}

#[test]
fn gen_synth_rejects_bad_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(emo(&["gen-synth", "--out", out, "--n", "0"]).status.code(), Some(1));
    assert_eq!(emo(&["gen-synth", "--out", out, "--split-ratios", "0.5,0.5"]).status.code(), Some(1));
    assert_eq!(emo(&["gen-synth"]).status.code(), Some(1));
}

#[test]
fn train_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    gen(&corpus, &["--n", "60", "--din", "8"]);
    let cfg = write_config(
        tmp.path(),
        &format!(
            "output_dir = \"run\"\n[data]\nmanifests = [\"c/manifest.jsonl\"]\n[train]\nvariant = \"hier-dc\"\nmax_epochs = 3\nbatch_size = 16\n{SMALL_TRAIN}"
        ),
    );
    let o = emo(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run");
    for f in ["best.emop", "trainlog.csv", "summary.json", "config.resolved.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["variant"], "hier-dc");
    let csv = fs::read_to_string(run.join("trainlog.csv")).unwrap();
    assert!(csv.starts_with("epoch,loss_total,"));
    assert_eq!(csv.lines().count(), 4);

    // the stored best report is reproduced by evaluating the checkpoint
    let json_out = tmp.path().join("valid.json");
    let model = run.join("best.emop");
    let manifest = corpus.join("manifest.jsonl");
    let o = emo(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--split",
        "valid",
        "--json-out",
        json_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = stdout(&o);
    assert_eq!(fs::read_to_string(&json_out).unwrap(), printed);
    let report: Value = serde_json::from_str(&printed).unwrap();
    assert_eq!(report, summary["best_valid"]);

    // a split without discrete labels yields absent discrete fields
    let stripped: String = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v["disc"] = Value::Null;
            format!("{v}\n")
        })
        .collect();
    let cont_only = corpus.join("cont_only.jsonl");
    fs::write(&cont_only, stripped).unwrap();
    let o = emo(&["eval", "--model", model.to_str().unwrap(), "--manifest", cont_only.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["accuracy"].is_null());
    assert!(report["macro_f1"].is_null());
    assert!(report["confusion"].is_null());
    assert!(report["ccc_mean"].is_f64());
}

#[test]
fn eval_reports_dimension_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen(&a, &["--n", "30", "--din", "8"]);
    gen(&b, &["--n", "10", "--din", "5"]);
    let cfg = write_config(
        tmp.path(),
        &format!("output_dir = \"run\"\n[data]\nmanifests = [\"a/manifest.jsonl\"]\n[train]\nmax_epochs = 1\n{SMALL_TRAIN}"),
    );
    assert!(emo(&["train", "--config", &cfg]).status.success());
    let model = tmp.path().join("run/best.emop");
    let o = emo(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--manifest",
        b.join("manifest.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("5 features") && err.contains("d_in = 8"), "{err}");
}

#[test]
fn train_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "output_dir = \"o\"\n[data]\nmanifests = [\"m.jsonl\"]\n[train]\nvariant = \"hierarchical\"\n");
    let o = emo(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for name in ["baseline-c", "baseline-d", "mtl", "hier-dc", "hier-cd"] {
        assert!(err.contains(name), "{err}");
    }

    let cfg = write_config(
        tmp.path(),
        "output_dir = \"o\"\n[data]\nmanifests = []\n[train]\nbatch_size = 0\nmax_epochs = 0\n",
    );
    let o = emo(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("3 configuration error(s)"), "{err}");

    let cfg = write_config(tmp.path(), "output_dir = \"o\"\n[data]\nmanifests = [\"missing.jsonl\"]\n");
    assert_eq!(emo(&["train", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn mismatched_label_recipe_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    gen(&tmp.path().join("a"), &["--n", "60", "--din", "8", "--corpus", "corpusA", "--seed", "1", "--projection-seed", "9"]);
    gen(&tmp.path().join("b"), &["--n", "60", "--din", "8", "--corpus", "corpusB", "--seed", "2", "--projection-seed", "9"]);
    let cfg = write_config(
        tmp.path(),
        &format!(
            r#"output_dir = "run"
[data]
manifests = ["a/manifest.jsonl", "b/manifest.jsonl"]
equalize = true

[[data.recipe]]
corpus = "corpusA"
use_cont = true
use_disc = false

[[data.recipe]]
corpus = "corpusB"
use_cont = false
use_disc = true

[train]
variant = "hier-dc"
max_epochs = 2
{SMALL_TRAIN}"#
        ),
    );
    let o = emo(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["n_train"], 96);
    let resolved = fs::read_to_string(tmp.path().join("run/config.resolved.toml")).unwrap();
    assert!(resolved.contains("corpusB"));

    let bad = write_config(
        tmp.path(),
        "output_dir = \"run\"\n[data]\nmanifests = [\"a/manifest.jsonl\"]\n[[data.recipe]]\ncorpus = \"nope\"\nuse_cont = true\nuse_disc = true\n[train.dims]\nd_in = 8\n",
    );
    let o = emo(&["train", "--config", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn gradcheck_table_and_corruption_hook() {
    let o = emo(&["gradcheck", "--seed", "1", "--variant", "mtl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(table.lines().next().unwrap(), "component\tkind\tmax_rel_error\ttolerance\tstatus");
    assert!(rows.iter().all(|r| r.len() == 5 && r[4] == "pass"));
    // one row per parameter tensor of the model
    let model_rows = rows.iter().filter(|r| r[1] == "model").count();
    assert_eq!(model_rows, 2 + 2 * 7 + 4);
    for c in ["cross_entropy", "ccc_loss", "continuous_loss", "sap.input", "linear.weight"] {
        assert!(rows.iter().any(|r| r[0] == c), "{c}");
    }

    let o = emo(&["gradcheck", "--seed", "1", "--variant", "mtl", "--corrupt", "mtl/cont.fc1.weight"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("mtl/cont.fc1.weight"));
}
