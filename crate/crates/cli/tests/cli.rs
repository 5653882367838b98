use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use repo_attn::model::checkpoint;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_repo-attn"));
    c.env("RUST_LOG", "warn");
    c
}

fn run<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const CONFIG: &str = r#"{
  "model": {"vocab_size": 32, "d_model": 16, "n_layers": 2, "n_heads": 2, "d_p": 4,
            "d_ff": 32, "schedule": "repo", "max_seq_len": 80},
  "train": {"steps": 10, "batch_size": 4, "learning_rate": 0.003, "weight_decay": 0.01,
            "warmup_steps": 2, "clip_norm": 1.0, "eval_every": EVAL, "seed": 11},
  "task": {"kind": "reversal", "train_max_len": 6}
}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let train = f.path("train.jsonl");
        let out = run(&["gen", "reversal", "--seed", "1", "--count", "40", "--min-len", "2", "--max-len", "6", "--out", p(&train)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let test = f.path("test.jsonl");
        let out = run(&["gen", "reversal", "--seed", "2", "--per-length", "2", "--min-len", "2", "--max-len", "9", "--out", p(&test)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        f.config("config.json", 0);
        f.config("config_eval5.json", 5);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, eval_every: usize) -> PathBuf {
        let path = self.path(name);
        fs::write(&path, CONFIG.replace("EVAL", &eval_every.to_string())).unwrap();
        path
    }

    fn train(&self, config: &str, out: &str, extra: &[&str]) -> Output {
        let mut args: Vec<PathBuf> = vec![
            "train".into(),
            "--config".into(),
            self.path(config),
            "--data".into(),
            self.path("train.jsonl"),
            "--out".into(),
            self.path(out),
        ];
        args.extend(extra.iter().map(PathBuf::from));
        run(&args)
    }
}

fn manifest_without_timestamps(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("started_at").unwrap();
    obj.remove("finished_at").unwrap();
    v
}

#[test]
fn gen_is_deterministic_and_counts_lines() {
    let f = Fixture::new();
    let again = f.path("again.jsonl");
    let out = run(&["gen", "reversal", "--seed", "1", "--count", "40", "--min-len", "2", "--max-len", "6", "--out", p(&again)]);
    assert_eq!(code(&out), 0);
    let a = fs::read(f.path("train.jsonl")).unwrap();
    let b = fs::read(&again).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 40);
    assert!(f.path("train.jsonl.manifest.json").exists());
}

#[test]
fn gen_rejects_infeasible_and_unwritable_requests() {
    let f = Fixture::new();
    let out = run(&["gen", "niah", "--count", "3", "--context-len", "8", "--payload-len", "9", "--out", p(&f.path("n.jsonl"))]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("payload"), "{}", stderr(&out));

    let out = run(&["gen", "reversal", "--count", "3", "--out", "/nonexistent-dir/sub/x.jsonl"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let out = run(&["gen", "reversal", "--out", p(&f.path("x.jsonl"))]);
    assert_eq!(code(&out), 2, "missing --count is a usage error");
}

#[test]
fn dry_run_validates_without_writing() {
    let f = Fixture::new();
    let out = f.train("config.json", "dry", &["--dry-run"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(!f.path("dry").exists());
}

#[test]
fn schema_violations_name_the_field() {
    let f = Fixture::new();
    fs::write(f.path("bad.json"), CONFIG.replace("EVAL", "0").replace("\"seed\": 11", "\"seed\": 11, \"momentum\": 0.9")).unwrap();
    let out = f.train("bad.json", "bad", &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("momentum"), "{}", stderr(&out));

    fs::write(f.path("bad2.json"), CONFIG.replace("EVAL", "0").replace("\"n_heads\": 2", "\"n_heads\": 3")).unwrap();
    let out = f.train("bad2.json", "bad2", &["--dry-run"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("n_heads"), "{}", stderr(&out));
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let f = Fixture::new();
    let out = f.train("config_eval5.json", "full", &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mid = f.path("full/checkpoints/step_000005.ckpt");
    assert!(mid.exists());

    let out = f.train("config_eval5.json", "resumed", &["--resume", p(&mid)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let full = checkpoint::load(&f.path("full/final.ckpt")).unwrap();
    let resumed = checkpoint::load(&f.path("resumed/final.ckpt")).unwrap();
    assert_eq!(full.model.params(), resumed.model.params());
    assert_eq!(full.meta["step"], 10);
    assert_eq!(resumed.meta["step"], 10);

    let full_rows: Vec<String> = fs::read_to_string(f.path("full/metrics.csv")).unwrap().lines().map(String::from).collect();
    let resumed_rows: Vec<String> = fs::read_to_string(f.path("resumed/metrics.csv")).unwrap().lines().map(String::from).collect();
    assert_eq!(full_rows.len(), 11);
    assert_eq!(full_rows[0], "step,loss,lr,grad_norm");
    assert_eq!(resumed_rows[1..], full_rows[6..]);
    assert!(resumed_rows[1].starts_with("5,"));
}

#[test]
fn training_is_deterministic_up_to_timestamps() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("config.json", "a", &[])), 0);
    assert_eq!(code(&f.train("config.json", "b", &[])), 0);
    assert_eq!(fs::read(f.path("a/metrics.csv")).unwrap(), fs::read(f.path("b/metrics.csv")).unwrap());
    let (ma, mb) = (manifest_without_timestamps(&f.path("a/manifest.json")), manifest_without_timestamps(&f.path("b/manifest.json")));
    assert_eq!(ma["config_sha256"], mb["config_sha256"]);
    assert_eq!(ma["seed"], 11);
    let arts = ma["artifacts"].as_array().unwrap();
    assert!(arts.iter().any(|a| a.as_str().unwrap().ends_with("final.ckpt")));
    assert!(arts.iter().any(|a| a.as_str().unwrap().ends_with("metrics.csv")));
}

#[test]
fn eval_reports_are_deterministic_and_validate_inputs() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("config.json", "run", &[])), 0);
    let ckpt = f.path("run/final.ckpt");
    let data = f.path("test.jsonl");
    let eval = |name: &str| run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&f.path(name)), "--csv", p(&f.path(&format!("{name}.csv")))]);
    assert_eq!(code(&eval("r1.json")), 0);
    assert_eq!(code(&eval("r2.json")), 0);
    assert_eq!(fs::read(f.path("r1.json")).unwrap(), fs::read(f.path("r2.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(f.path("r1.json")).unwrap()).unwrap();
    assert_eq!(report["train_max_len"], 6);
    assert_eq!(report["buckets"].as_array().unwrap().len(), 8);
    assert_eq!(fs::read_to_string(f.path("r1.json.csv")).unwrap().lines().count(), 9);

    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let broken = f.path("broken.ckpt");
    fs::write(&broken, bytes).unwrap();
    let out = run(&["eval", "--checkpoint", p(&broken), "--data", p(&data), "--out", p(&f.path("x.json"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    fs::write(f.path("other.json"), CONFIG.replace("EVAL", "0").replace("\"d_ff\": 32", "\"d_ff\": 48")).unwrap();
    let out = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&f.path("y.json")), "--config", p(&f.path("other.json"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn analysis_outputs() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("config.json", "run", &[])), 0);
    let ckpt = f.path("run/final.ckpt");
    let long = f.path("long.jsonl");
    assert_eq!(code(&run(&["gen", "reversal", "--seed", "5", "--count", "3", "--min-len", "12", "--max-len", "16", "--out", p(&long)])), 0);

    let pos = f.path("pos");
    let out = run(&["analyze", "--checkpoint", p(&ckpt), "--data", p(&long), "--which", "positions", "--out", p(&pos), "--trace"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let svg = fs::read_to_string(pos.join("positions_0.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="series""#).count(), 2 * 2);
    assert!(pos.join("traces.json").exists());
    assert!(pos.join("ranges.svg").exists());

    let pat = f.path("pat");
    let out = run(&["analyze", "--checkpoint", p(&ckpt), "--data", p(&long), "--which", "patterns", "--out", p(&pat)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(pat.join("patterns.json")).unwrap()).unwrap();
    assert_eq!(report["delta"], 16);
    assert_eq!(report["epsilon"], 0.2);
    let fr = &report["overall"]["fractions"];
    let total = fr["constant"].as_f64().unwrap() + fr["mono"].as_f64().unwrap() + fr["hybrid"].as_f64().unwrap();
    assert!((total - 1.0).abs() < 1e-12);

    let out = run(&["analyze", "--checkpoint", p(&ckpt), "--data", p(&long), "--which", "mass", "--out", p(&f.path("m1"))]);
    assert_eq!(code(&out), 2, "mass needs span annotations");

    let niah = f.path("niah.jsonl");
    assert_eq!(code(&run(&["gen", "niah", "--count", "4", "--context-len", "40", "--payload-len", "3", "--out", p(&niah)])), 0);
    let mass = f.path("mass");
    let out = run(&["analyze", "--checkpoint", p(&ckpt), "--data", p(&niah), "--which", "mass", "--out", p(&mass)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(mass.join("mass.json")).unwrap()).unwrap();
    assert!(report["max_reconstruction_error"].as_f64().unwrap() < 1e-4);
    assert!(report["needle"].as_f64().unwrap() >= 0.0);
    assert!(mass.join("manifest.json").exists());
}

#[test]
fn thread_cap_is_validated() {
    let f = Fixture::new();
    let out = bin()
        .env("REPO_ATTN_THREADS", "zero")
        .args(["gen", "reversal", "--count", "2", "--out", p(&f.path("t.jsonl"))])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = bin()
        .env("REPO_ATTN_THREADS", "1")
        .args(["gen", "reversal", "--count", "2", "--out", p(&f.path("t.jsonl"))])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}
