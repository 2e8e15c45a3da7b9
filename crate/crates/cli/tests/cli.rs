use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_shefu");

const TINY: &str = r#"{
  "data.n_scenes": 60, "data.train_size": 120, "data.val_size": 30, "data.test_size": 30,
  "data.context_slots": 3, "data.d_f": 32,
  "model.d_model": 8, "model.heads": 2, "model.max_tokens": 6, "model.dropout": 0.0,
  "train.steps": 40, "train.eval_every": 20, "train.lr": 0.001
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).display().to_string()
    }

    fn data(&self) -> String {
        let o = run(&["gen-data", "--config", &self.s("tiny.json"), "--seed", "3", "--out", &self.s("data")]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        self.s("data")
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (cfg, data, out) = (self.s("tiny.json"), self.s("data"), self.s(out));
        let mut args = vec!["train", "--config", &cfg, "--data", &data, "--out", &out];
        args.extend_from_slice(extra);
        run(&args)
    }
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let w = Work::new();
    w.data();
    let again = ["gen-data", "--config", &w.s("tiny.json"), "--seed", "3", "--out", &w.s("data")];
    assert_eq!(code(&run(&again)), 2);
    let mut forced = again.to_vec();
    forced.push("--force");
    assert_eq!(code(&run(&forced)), 0);
}

#[test]
fn bad_vocab_path_is_a_config_error() {
    let w = Work::new();
    let o = run(&["gen-data", "--config", &w.s("tiny.json"), "--vocab", &w.s("missing.txt"), "--out", &w.s("d")]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.txt"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let w = Work::new();
    let o = run(&["gen-data", "--set", "data.colour=3", "--out", &w.s("d")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn metrics_have_one_row_per_validation() {
    let w = Work::new();
    w.data();
    let o = w.train("t", &["--steps", "200", "--eval-every", "100"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(w.p("t/metrics.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",val,")).count(), 2);
    let hash = read_json(&w.p("t/report.json"))["config_hash"].as_str().unwrap().to_string();
    assert!(csv.starts_with(&format!("# config_hash {hash}")));
}

#[test]
fn variants_get_distinct_config_hashes() {
    let w = Work::new();
    w.data();
    assert_eq!(code(&w.train("a", &["--variant", "shefu"])), 0);
    assert_eq!(code(&w.train("b", &["--variant", "paired_baseline"])), 0);
    let h = |d: &str| read_json(&w.p(&format!("{d}/report.json")))["config_hash"].clone();
    assert_ne!(h("a"), h("b"));
    assert_eq!(code(&w.train("c", &["--variant", "nonsense"])), 2);
}

#[test]
fn several_seeds_are_aggregated() {
    let w = Work::new();
    w.data();
    let o = w.train("s", &["--seeds", "3"]);
    assert_eq!(code(&o), 0);
    let agg = read_json(&w.p("s/aggregate.json"));
    assert_eq!(agg["runs"].as_array().unwrap().len(), 3);
    for s in 0..3 {
        assert!(w.p(&format!("s/seed_{s}/checkpoint.bin")).exists());
    }
    assert!(stdout(&o).contains("±"));
}

#[test]
fn eval_prints_a_row_per_split_and_rejects_bad_inputs() {
    let w = Work::new();
    w.data();
    assert_eq!(code(&w.train("t", &[])), 0);
    let ck = w.s("t/checkpoint.bin");
    let o = run(&["eval", "--checkpoint", &ck, "--data", &w.s("data"), "--split", "val", "--split", "test"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("val") && rows[1].starts_with("test"));

    // data generated with another D_f
    let other = ["gen-data", "--config", &w.s("tiny.json"), "--set", "data.d_f=40", "--out", &w.s("wide")];
    assert_eq!(code(&run(&other)), 0);
    assert_eq!(code(&run(&["eval", "--checkpoint", &ck, "--data", &w.s("wide")])), 4);

    // corrupt checkpoint
    let bytes = fs::read(&ck).unwrap();
    fs::write(w.p("bad.bin"), &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&run(&["eval", "--checkpoint", &w.s("bad.bin"), "--data", &w.s("data")])), 4);

    // empty test split
    fs::write(w.p("data/test.jsonl"), "").unwrap();
    assert_eq!(code(&run(&["eval", "--checkpoint", &ck, "--data", &w.s("data")])), 4);
}

#[test]
fn runaway_learning_rate_exits_with_divergence() {
    let w = Work::new();
    w.data();
    let o = w.train("t", &["--set", "train.lr=1e30", "--steps", "40"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bench_and_score_report_measured_counts() {
    let w = Work::new();
    w.data();
    assert_eq!(code(&w.train("t", &[])), 0);
    let ck = w.s("t/checkpoint.bin");
    let o = run(&["bench", "--checkpoint", &ck, "--M", "73", "--N", "89", "--repeats", "1", "--out", &w.s("b")]);
    assert_eq!(code(&o), 0);
    let b = read_json(&w.p("b/bench.json"));
    assert_eq!((b["factorized_passes"].as_u64(), b["brute_pairs"].as_u64()), (Some(162), Some(6497)));
    assert_eq!(b["repeats"].as_u64(), Some(1));
    assert!(b["config_hash"].is_string());

    let o = run(&["score", "--checkpoint", &ck, "--data", &w.s("data"), "--brute"]);
    assert_eq!(code(&o), 0);
    let s: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(s["decision"]["pair"], s["brute_force"]["pair"]);
    let (m, n) = (s["target_regions"].as_array().unwrap().len(), s["dest_regions"].as_array().unwrap().len());
    assert_eq!(s["decision"]["forward_passes"].as_u64(), Some((m + n) as u64));
    assert_eq!(s["brute_force"]["pair_evaluations"].as_u64(), Some((m * n) as u64));
}

// tests/fixtures/tiny.ckpt was trained on tests/fixtures/data with
// tiny.json at seed 5; its test accuracy was recorded when it was built
#[test]
fn shipped_fixture_reproduces_its_recorded_accuracy() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let (ck, data) = (dir.join("tiny.ckpt"), dir.join("data"));
    let o = run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("test  accuracy 0.350000 (7/20)"), "{}", stdout(&o));
}
