use std::path::Path;
use std::process::{Command, Output};

fn fedlora(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedlora"));
    cmd.args(args).env_remove("FEDLORA_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
seed = 3
[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
[train]
epochs = 1
[fed]
rounds = 2
rank = 2
[corpus]
sizes = [20, 12, 10]
[eval]
generate_limit = 1
"#;

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gen_corpus_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = fedlora(&["gen-corpus", "--seed", "1", "--sizes", "30,20,10", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{o:?}");
    for f in ["client1_train.jsonl", "client3_test.jsonl", "mixed_test.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let train = std::fs::read_to_string(out.join("client1_train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 27);
    assert!(stdout(&o).contains("client1"));
}

#[test]
fn gen_corpus_rejects_tiny_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedlora(&["gen-corpus", "--seed", "1", "--sizes", "30,2,10", "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&fedlora(&["train"], &[])), 2);
    assert_eq!(code(&fedlora(&["frobnicate"], &[])), 2);
    assert_eq!(code(&fedlora(&["--help"], &[])), 0);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bogus = 1\n");
    assert_eq!(code(&fedlora(&["train", "--config", &cfg], &[])), 2);
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(code(&fedlora(&["train", "--config", &cfg, "--mode", "nope"], &[])), 2);
    assert_eq!(code(&fedlora(&["train", "--config", &cfg, "--mode", "center_client"], &[])), 2);
    let o = fedlora(&["train", "--config", &cfg], &[("FEDLORA_THREADS", "zero")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn io_errors_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&fedlora(&["train", "--config", missing.to_str().unwrap()], &[])), 4);
    let o = fedlora(&["eval", "--model", "nowhere.fjla", "--test", "nowhere.jsonl"], &[]);
    assert_eq!(code(&o), 4);
}

#[test]
fn numeric_failure_exits_three() {
    // Two same-sign Adam steps of ~1.5e308 overflow a weight to infinity.
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("epochs = 1", "epochs = 1\nlr = 1.5e308");
    let cfg = write_config(dir.path(), &body);
    let out = dir.path().join("run");
    let o = fedlora(&["train", "--config", &cfg, "--mode", "fed_base", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = fedlora(
        &["train", "--config", &cfg, "--mode", "fed_cl", "--seed", "5", "--out", out.to_str().unwrap()],
        &[("FEDLORA_THREADS", "2")],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("seed=5 mode=fed_cl"));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.contains("model,corpus,R-1,R-2,R-L,B-4,B-N,PPL"));
    assert!(csv.contains("seed=5"));

    let data = dir.path().join("data");
    let g = fedlora(&["gen-corpus", "--seed", "3", "--sizes", "20,12,10", "--out", data.to_str().unwrap()], &[]);
    assert_eq!(code(&g), 0);
    let ckpt = out.join("global_round2.fjla");
    let test = data.join("mixed_test.jsonl");
    let e = fedlora(&["eval", "--model", ckpt.to_str().unwrap(), "--test", test.to_str().unwrap()], &[]);
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    let text = stdout(&e);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,corpus,R-1,R-2,R-L,B-4,B-N,PPL");
    assert_eq!(lines.len(), 2);

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = out.join("bad.fjla");
    std::fs::write(&bad, bytes).unwrap();
    let e = fedlora(&["eval", "--model", bad.to_str().unwrap(), "--test", test.to_str().unwrap()], &[]);
    assert_eq!(code(&e), 4);
}
