//! End-to-end behaviour of the `ccfrec` binary on a tiny synthetic corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = "\
# small enough for a debug build
workdir = work
synth_topics = 3
synth_items_per_topic = 12
synth_users = 60
dim = 8
heads = 2
ffn_hidden = 16
encoder_dim = 8
codebook_size = 4
levels = 2
max_epochs = 2
finetune_epochs = 1
batch_size = 32
";

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    work: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.conf");
        fs::write(&config, CONFIG).unwrap();
        let work = dir.path().join("work");
        Self { _dir: dir, config, work }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ccfrec"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .output()
            .unwrap()
    }

    /// Runs a stage that must succeed and returns its stdout.
    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn prepare(&self) {
        for stage in ["synth", "ingest", "embed", "quantize"] {
            self.ok(&[stage]);
        }
    }

    fn only_run_dir(&self) -> PathBuf {
        let runs: Vec<PathBuf> = fs::read_dir(self.work.join("runs"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        assert_eq!(runs.len(), 1, "{runs:?}");
        runs.into_iter().next().unwrap()
    }
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn missing_prerequisites_exit_2_and_name_what_is_missing() {
    let ws = Workspace::new();
    let out = ws.run(&["ingest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("raw input"), "{}", stderr(&out));

    ws.ok(&["synth"]);
    ws.ok(&["ingest"]);
    let out = ws.run(&["quantize"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("embedding cache embed/") && msg.contains(".emb"), "{msg}");
    assert!(msg.contains("ccfrec embed"), "{msg}");

    ws.ok(&["embed"]);
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("codes quantize/"), "{}", stderr(&out));

    let out = ws.run(&["eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("checkpoint"), "{}", stderr(&out));
}

#[test]
fn repeated_embed_is_a_no_op() {
    let ws = Workspace::new();
    ws.ok(&["synth"]);
    ws.ok(&["ingest"]);
    ws.ok(&["embed"]);
    let embed_dir = ws.work.join("embed");
    let before: Vec<(PathBuf, Vec<u8>, std::time::SystemTime)> = files_in(&embed_dir)
        .into_iter()
        .map(|p| {
            let modified = fs::metadata(&p).unwrap().modified().unwrap();
            (p.clone(), fs::read(&p).unwrap(), modified)
        })
        .collect();
    assert_eq!(before.len(), 2);

    let out = ws.run(&["embed"]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("up to date"), "{}", stderr(&out));
    for (p, bytes, modified) in before {
        assert_eq!(fs::read(&p).unwrap(), bytes);
        assert_eq!(fs::metadata(&p).unwrap().modified().unwrap(), modified);
    }
}

#[test]
fn artifacts_carry_version_and_config_hash() {
    let ws = Workspace::new();
    ws.prepare();
    for p in [ws.work.join("data/items.jsonl"), ws.work.join("data/interactions.tsv")] {
        let text = fs::read_to_string(&p).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("# ccfrec-data version=1 config_hash="), "{first}");
    }
    let codes = files_in(&ws.work.join("quantize"))
        .into_iter()
        .find(|p| p.extension().is_some_and(|e| e == "codes"))
        .unwrap();
    let stem = codes.file_stem().unwrap().to_str().unwrap().to_string();
    let text = fs::read_to_string(&codes).unwrap();
    assert!(text.contains("version") && text.contains(&stem), "{}", text.lines().next().unwrap());

    // A different codebook size is a different artifact.
    ws.ok(&["quantize", "--codebook-size", "3"]);
    assert_eq!(files_in(&ws.work.join("quantize")).len(), 4);
}

#[test]
fn ablation_tag_reaches_the_metrics() {
    let ws = Workspace::new();
    ws.prepare();
    ws.ok(&["train", "--ablation", "random_code"]);
    let stdout = ws.ok(&["eval", "--ablation", "random_code"]);
    let records = json_lines(&stdout);
    assert_eq!(records.len(), 4);
    for r in &records {
        assert_eq!(r["ablation"], "random_code", "{r}");
        for key in ["split", "K", "recall", "ndcg", "users"] {
            assert!(r.get(key).is_some(), "{key} missing from {r}");
        }
    }
    let run = ws.only_run_dir();
    for line in json_lines(&fs::read_to_string(run.join("metrics.jsonl")).unwrap()) {
        assert_eq!(line["ablation"], "random_code");
    }
    let run_id = run.file_name().unwrap().to_str().unwrap();
    let stored: Vec<Value> = json_lines(&fs::read_to_string(run.join("eval.jsonl")).unwrap())
        .into_iter()
        .map(|mut v| {
            let obj = v.as_object_mut().unwrap();
            assert_eq!(obj.remove("version"), Some(Value::from(1)));
            assert_eq!(obj.remove("run_id"), Some(Value::from(run_id)));
            v
        })
        .collect();
    assert_eq!(stored, records);
}

#[test]
fn run_layout_and_id_finetuning() {
    let ws = Workspace::new();
    ws.prepare();
    ws.ok(&["train"]);
    let run = ws.only_run_dir();
    let run_id = run.file_name().unwrap().to_str().unwrap().to_string();
    for f in ["best.ckpt", "last.ckpt", "metrics.jsonl", "settings.json", "summary.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let metrics = json_lines(&fs::read_to_string(run.join("metrics.jsonl")).unwrap());
    assert_eq!(metrics.len(), 2, "one line per epoch");
    for (i, m) in metrics.iter().enumerate() {
        assert_eq!(m["epoch"], i + 1);
        assert_eq!(m["run_id"], run_id.as_str());
        assert_eq!(m["version"], 1);
        assert!(m["valid_ndcg10"].is_f64());
    }
    for f in ["settings.json", "summary.json"] {
        let v: Value = serde_json::from_str(&fs::read_to_string(run.join(f)).unwrap()).unwrap();
        assert_eq!((v["version"].as_u64(), v["run_id"].as_str()), (Some(1), Some(run_id.as_str())), "{f}");
    }
    assert!(ws.run(&["train"]).status.success());
    assert!(stderr(&ws.run(&["train"])).contains("up to date"));

    ws.ok(&["finetune-ids"]);
    assert!(run.join("finetune/best.ckpt").is_file());
    let tuned = json_lines(&ws.ok(&["eval", "--finetuned"]));
    assert!(tuned.iter().all(|r| r["ablation"] == "add_item_id"));

    ws.ok(&["export-reps", "--run", &run_id]);
    assert!(run.join("reps.bin").is_file());
}

#[test]
fn identical_settings_give_identical_runs() {
    let strip_time = |text: String| -> Vec<Value> {
        json_lines(&text)
            .into_iter()
            .map(|mut v| {
                v.as_object_mut().unwrap().remove("seconds");
                v
            })
            .collect()
    };
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let ws = Workspace::new();
        ws.prepare();
        ws.ok(&["train", "--seed", "7"]);
        let run = ws.only_run_dir();
        let metrics = strip_time(fs::read_to_string(run.join("metrics.jsonl")).unwrap());
        let eval = ws.ok(&["eval", "--seed", "7"]);
        outputs.push((run.file_name().unwrap().to_owned(), metrics, eval, fs::read(run.join("best.ckpt")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn bad_flags_are_rejected() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["train", "--pq", "--rq"]).status.code(), Some(2));
    let out = ws.run(&["train", "--ablation", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nonsense"));
    let out = ws.run(&["train", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no_such_key"));
}
