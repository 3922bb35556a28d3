use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use wfe_core::checkpoint::Checkpoint;

fn wfe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wfe"))
        .args(args)
        .current_dir(cwd)
        .env_remove("WFE_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run wfe")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_MODEL: [&str; 8] = ["--embed-dim", "6", "--hidden-dim", "8", "--batch-size", "8", "--no-timing", "--patience=0"];

fn small_data(dir: &Path) {
    ok(&wfe(&["data-gen", "--out", "d", "--pairs", "60", "--seed", "3"], dir));
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "d", "--out", out, "--epochs", "1"];
    args.extend_from_slice(&SMALL_MODEL);
    args.extend_from_slice(extra);
    wfe(&args, dir)
}

#[test]
fn data_gen_is_deterministic_and_split() {
    let dir = tempfile::tempdir().unwrap();
    ok(&wfe(&["data-gen", "--out", "a", "--pairs", "500", "--seed", "7"], dir.path()));
    ok(&wfe(&["data-gen", "--out", "b", "--pairs", "500", "--seed", "7"], dir.path()));
    for f in ["train.tsv", "val.tsv", "test.tsv", "vocab.src", "vocab.tgt"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
        assert!(!a.is_empty());
    }
    let lines = |f: &str| fs::read_to_string(dir.path().join("a").join(f)).unwrap().lines().count();
    assert_eq!((lines("train.tsv"), lines("val.tsv"), lines("test.tsv")), (400, 50, 50));
}

#[test]
fn default_data_gen_splits() {
    let dir = tempfile::tempdir().unwrap();
    ok(&wfe(&["data-gen", "--out", "d"], dir.path()));
    let lines = |f: &str| fs::read_to_string(dir.path().join("d").join(f)).unwrap().lines().count();
    let (tr, va, te) = (lines("train.tsv"), lines("val.tsv"), lines("test.tsv"));
    assert!(tr > 0 && va > 0 && te > 0);
    assert_eq!(tr, 8 * va);
    assert_eq!(va, te);
}

#[test]
fn zero_pairs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = wfe(&["data-gen", "--out", "d", "--pairs", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn seed_from_environment_and_config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let run_env = |out: &str, seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_wfe"))
            .args(["data-gen", "--out", out, "--pairs", "30"])
            .current_dir(p)
            .env("WFE_SEED", seed)
            .output()
            .unwrap();
        ok(&o);
    };
    run_env("env5", "5");
    ok(&wfe(&["data-gen", "--out", "flag5", "--pairs", "30", "--seed", "5"], p));
    fs::write(p.join("run.cfg"), "seed = 5\npairs = 30\n").unwrap();
    ok(&wfe(&["--config", "run.cfg", "data-gen", "--out", "file5"], p));
    ok(&wfe(&["--config", "run.cfg", "data-gen", "--out", "flag6", "--seed", "6"], p));
    let read = |d: &str| fs::read(p.join(d).join("train.tsv")).unwrap();
    assert_eq!(read("env5"), read("flag5"));
    assert_eq!(read("file5"), read("flag5"));
    assert_ne!(read("flag6"), read("flag5"));

    fs::write(p.join("bad.cfg"), "colour = blue\n").unwrap();
    let out = wfe(&["--config", "bad.cfg", "data-gen", "--out", "x"], p);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("colour"));
}

#[test]
fn train_is_reproducible_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_data(p);
    ok(&train(p, "a.ckpt", &["--seed", "4"]));
    ok(&train(p, "b.ckpt", &["--seed", "4"]));
    assert_eq!(fs::read(p.join("a.ckpt")).unwrap(), fs::read(p.join("b.ckpt")).unwrap());
    assert_eq!(
        fs::read(p.join("a.log.tsv")).unwrap(),
        fs::read(p.join("b.log.tsv")).unwrap()
    );
    let log = fs::read_to_string(p.join("a.log.tsv")).unwrap();
    let fields: Vec<&str> = log.trim_end().split('\t').collect();
    assert_eq!(fields.len(), 7);
    assert_eq!(&fields[..2], &["1", "adam"]);
    let (model, _) = Checkpoint::load(&p.join("a.ckpt")).unwrap().into_model().unwrap();
    assert!(model.has_wfe());
}

#[test]
fn baseline_checkpoint_refuses_wfe_operations() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_data(p);
    ok(&train(p, "base.ckpt", &["--no-wfe"]));
    let out = wfe(&["wfe-eval", "--data", "d", "--checkpoint", "base.ckpt"], p);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("baseline"));
    let out = wfe(
        &["decode", "--data", "d", "--checkpoint", "base.ckpt", "--input", "d/test.tsv", "--mode", "wfe"],
        p,
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("baseline"));
    assert!(out.stdout.is_empty());

    let out = train(p, "x.ckpt", &["--no-wfe", "--wfe-weight", "0.5"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--no-wfe"));
}

#[test]
fn decode_keeps_alignment_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_data(p);
    ok(&train(p, "m.ckpt", &[]));
    fs::write(p.join("in.txt"), "f01 w02 w03\n\nw04 f02 w05\n").unwrap();
    let out = wfe(
        &[
            "decode", "--data", "d", "--checkpoint", "m.ckpt", "--input", "in.txt", "--mode", "wfe", "--beam", "3",
            "--trace", "trace.jsonl",
        ],
        p,
    );
    ok(&out);
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<&str> = text.split('\n').collect();
    assert_eq!(lines.len(), 4, "{text:?}");
    assert_eq!(lines[1], "");
    assert!(stderr(&out).contains("line 2"));
    let trace = fs::read_to_string(p.join("trace.jsonl")).unwrap();
    assert!(!trace.is_empty());
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["line"] == 1 || v["line"] == 3);
        assert!(v["budget"].is_array());
    }

    let out = wfe(
        &["decode", "--data", "d", "--checkpoint", "m.ckpt", "--input", "in.txt", "--beam", "0"],
        p,
    );
    assert!(!out.status.success());
}

#[test]
fn eval_identity_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("ref.txt"), "a b c\nx y y\n").unwrap();
    let out = wfe(&["eval", "--candidates", "ref.txt", "--references", "ref.txt"], p);
    ok(&out);
    let report = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<(&str, f64)> = report
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('\t').unwrap();
            (k, v.parse().unwrap())
        })
        .collect();
    assert_eq!(lines.len(), 4);
    for (k, v) in &lines[..3] {
        assert!(k.ends_with("(F)"));
        assert_eq!(*v, 1.0);
    }
    assert_eq!(lines[3].0, "repeat_rate");
    assert!((lines[3].1 - 1.0 / 6.0).abs() < 1e-6);

    let out = wfe(
        &["eval", "--candidates", "ref.txt", "--references", "ref.txt", "--basis", "recall", "--byte-limit", "3"],
        p,
    );
    ok(&out);
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("ROUGE-1(R)\t0.666667"));

    fs::write(p.join("one.txt"), "a b c\n").unwrap();
    let out = wfe(&["eval", "--candidates", "one.txt", "--references", "ref.txt"], p);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("1 lines"));
    assert!(stderr(&out).contains("2"));
}

#[test]
fn wfe_eval_prints_grid() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_data(p);
    ok(&train(p, "m.ckpt", &[]));
    let out = wfe(&["wfe-eval", "--data", "d", "--checkpoint", "m.ckpt"], p);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "true\\est\t0\t1\t2\t3\t>=4");
    assert!(lines[1].starts_with("1\t"));
    assert!(lines[3].starts_with(">=3\t"));
    let total: u64 = lines[1..4]
        .iter()
        .flat_map(|l| l.split('\t').skip(1))
        .map(|v| v.parse::<u64>().unwrap())
        .sum();
    assert_eq!(lines[4], format!("total\t{total}"));
}
