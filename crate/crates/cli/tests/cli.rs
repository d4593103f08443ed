use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn intrus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intrus"))
        .args(args)
        .output()
        .expect("spawn intrus")
}

fn ok(args: &[&str]) -> String {
    let out = intrus(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, task: &str) {
    ok(&[
        "gen-data",
        "--task",
        task,
        "--n",
        "40",
        "--valid",
        "8",
        "--test",
        "8",
        "--max-len",
        "5",
        "--vocab-size",
        "6",
        "--seed",
        "3",
        "--out",
        p(dir),
    ]);
}

const SMALL: &[&str] = &[
    "--d-model",
    "16",
    "--num-heads",
    "2",
    "--ffn-dim",
    "32",
    "--num-encoder-layers",
    "1",
    "--num-decoder-layers",
    "1",
    "--max-len",
    "10",
    "--batch-tokens",
    "40",
    "--eval-every",
    "3",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    for (flag, value) in [("--steps", "6"), ("--pretrain-steps", "3")] {
        if !extra.contains(&flag) {
            args.extend([flag, value]);
        }
    }
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn gen_data_is_deterministic_and_parallel_safe() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, "sort");
    ok(&[
        "gen-data",
        "--task",
        "sort",
        "--n",
        "40",
        "--valid",
        "8",
        "--test",
        "8",
        "--max-len",
        "5",
        "--vocab-size",
        "6",
        "--seed",
        "3",
        "--workers",
        "3",
        "--out",
        p(&b),
    ]);
    for f in ["train.tsv", "valid.tsv", "test.tsv", "vocab.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let train = fs::read_to_string(a.join("train.tsv")).unwrap();
    assert_eq!(train.lines().count(), 40);
    for line in train.lines() {
        let (src, tgt) = line.split_once('\t').unwrap();
        let mut sorted: Vec<&str> = src.split(' ').collect();
        sorted.sort_by_key(|t| t.parse::<u32>().unwrap());
        assert_eq!(sorted.join(" "), tgt);
    }
}

#[test]
fn train_decode_eval_analyze() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "copy");
    let (r1, r2) = (t.path().join("r1"), t.path().join("r2"));
    train(&data, &r1, &["--seed", "5"]);
    train(&data, &r2, &["--seed", "5"]);
    for f in ["metrics.jsonl", "config.json", "vocab.txt"] {
        assert!(r1.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read(r1.join("metrics.jsonl")).unwrap(),
        fs::read(r2.join("metrics.jsonl")).unwrap()
    );
    let metrics = fs::read_to_string(r1.join("metrics.jsonl")).unwrap();
    let steps = metrics.lines().filter(|l| !l.contains("\"valid\"")).count();
    assert_eq!(steps, 6);
    assert!(metrics.lines().any(|l| l.contains("\"valid\"")));

    let ckpt = r1.join("model.ckpt");
    let (greedy, beam1) = (t.path().join("g.txt"), t.path().join("b1.txt"));
    ok(&[
        "decode",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data.join("test.tsv")),
        "--beam",
        "1",
        "--out",
        p(&beam1),
    ]);
    ok(&[
        "decode",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data.join("test.tsv")),
        "--beam",
        "1",
        "--workers",
        "2",
        "--out",
        p(&greedy),
    ]);
    assert_eq!(fs::read(&greedy).unwrap(), fs::read(&beam1).unwrap());
    let decodes = fs::read_to_string(&beam1).unwrap();
    assert_eq!(decodes.lines().count(), 8);
    assert!(decodes.lines().all(|l| l.split('\t').count() == 3));

    let test = data.join("test.tsv");
    let out = ok(&["eval", "--hyp", p(&test), "--ref", p(&test)]);
    assert!(out.contains("sequence_accuracy 1.000000"), "{out}");
    assert!(out.contains("bleu 100.0000"), "{out}");
    ok(&["eval", "--hyp", p(&beam1), "--ref", p(&test)]);

    let an = t.path().join("an");
    ok(&[
        "analyze",
        "--decodes",
        p(&beam1),
        "--vocab",
        p(&data.join("vocab.txt")),
        "--out",
        p(&an),
    ]);
    let hist = fs::read_to_string(an.join("order_histogram.csv")).unwrap();
    assert!(hist.starts_with("class,bin,count\n"));
    assert!(fs::read_to_string(an.join("directions.csv")).unwrap().lines().count() > 1);
}

#[test]
fn config_file_and_flags() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "copy");
    let cfg = t.path().join("c.json");
    fs::write(&cfg, r#"{"mode": "baseline_l2r", "seed": 9, "steps": 100}"#).unwrap();
    let out = t.path().join("run");
    train(&data, &out, &["--config", p(&cfg)]);
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["mode"], "baseline_l2r");
    assert_eq!(echoed["seed"], 9);
    assert_eq!(echoed["steps"], 6);
    assert_eq!(echoed["d_model"], 16);

    fs::write(&cfg, r#"{"learning_rate": 1}"#).unwrap();
    let bad = intrus(&["train", "--data", p(&data), "--out", p(&out), "--config", p(&cfg)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn invalid_mode_lists_valid_modes() {
    let out = intrus(&["train", "--data", ".", "--out", ".", "--mode", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for m in [
        "default",
        "argmax",
        "pretrain_l2r_then_default",
        "no_pretrain",
        "only_pretrain_uniform",
        "only_pretrain_l2r",
        "baseline_l2r",
    ] {
        assert!(err.contains(m), "{m} missing from: {err}");
    }
}

#[test]
fn exit_codes() {
    assert_eq!(intrus(&["--help"]).status.code(), Some(0));
    assert_eq!(intrus(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(intrus(&["verify", "--suite", "nothing"]).status.code(), Some(1));
    let out = intrus(&["decode", "--ckpt", "/nonexistent.ckpt", "--data", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(1));
    let out = ok(&["verify", "--suite", "gradients"]);
    assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
}

#[test]
fn bench_reports_both_decoders() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "copy");
    let (ins, base) = (t.path().join("ins"), t.path().join("base"));
    train(
        &data,
        &ins,
        &["--steps", "1", "--pretrain-steps", "0", "--mode", "no_pretrain"],
    );
    train(
        &data,
        &base,
        &["--steps", "1", "--pretrain-steps", "0", "--mode", "baseline_l2r"],
    );
    let csv = t.path().join("bench.csv");
    ok(&[
        "bench",
        "--ckpt-intrus",
        p(&ins.join("model.ckpt")),
        "--ckpt-baseline",
        p(&base.join("model.ckpt")),
        "--data",
        p(&data.join("test.tsv")),
        "--lengths",
        "2,4",
        "--n",
        "2",
        "--beam",
        "2",
        "--out",
        p(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.lines().count() > 1);
    let swapped = intrus(&[
        "bench",
        "--ckpt-intrus",
        p(&base.join("model.ckpt")),
        "--ckpt-baseline",
        p(&ins.join("model.ckpt")),
        "--data",
        p(&data.join("test.tsv")),
    ]);
    assert_eq!(swapped.status.code(), Some(1));
}
