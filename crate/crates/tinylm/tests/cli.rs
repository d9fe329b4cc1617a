use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tinylm"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn params_match_reported_sizes() {
    for (preset, target) in [("bebeshka", 16e6), ("zlata", 66e6)] {
        let o = run(&["params", "--config", preset]);
        assert!(o.status.success(), "{}", stderr(&o));
        let n: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
        assert!((n / target - 1.0).abs() <= 0.10, "{preset}: {n}");
    }
}

#[test]
fn tokenizer_then_stats_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let tok = dir.path().join("tok");
    let corpus = fixture("mini");
    let o = run(&["tokenizer", "train", "--corpus", corpus.to_str().unwrap(), "--vocab-size", "300", "--out", tok.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tok.join("run_manifest.json").is_file());
    let o = run(&["stats", "--corpus", corpus.to_str().unwrap(), "--tokenizer", tok.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let golden = std::fs::read_to_string(fixture("mini_stats.tsv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&o.stdout), golden);
    // the manifest line on stderr carries input digests
    let line = stderr(&o);
    let m: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn too_small_vocab_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "tokenizer",
        "train",
        "--corpus",
        fixture("mini").to_str().unwrap(),
        "--vocab-size",
        "10",
        "--out",
        dir.path().join("t").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[config]:"), "{}", stderr(&o));
}

#[test]
fn usage_errors_and_help() {
    let o = run(&["search"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]:"));
    assert!(run(&["--help"]).status.success());
    assert!(run(&["--version"]).status.success());
    let o = run(&["search", "--trials", "3", "--out", "/nonexistent-dir/x"]);
    assert!(stderr(&o).starts_with("error[usage]:"), "{}", stderr(&o));
}

#[test]
fn missing_files_are_io_errors() {
    let o = run(&["stats", "--corpus", "/no/such/corpus", "--tokenizer", "/no/such/tok"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[io]:"), "{}", stderr(&o));
    let o = run(&["params", "--config", "nope"]);
    assert!(stderr(&o).starts_with("error[io]:"), "{}", stderr(&o));
}

fn search(out: &Path, trials: usize, extra: &[&str]) -> Output {
    let t = trials.to_string();
    let mut args = vec!["search", "--objective", "quadratic", "--trials", &t, "--seed", "7", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn search_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b] {
        let o = search(d, 16, &["--workers", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let log = |d: &Path| std::fs::read_to_string(d.join("trials.jsonl")).unwrap();
    assert_eq!(log(&a), log(&b));
    assert!(a.join("summary.tsv").is_file() && a.join("best.json").is_file());

    assert!(search(&c, 7, &["--workers", "2"]).status.success());
    // simulate a crash halfway through writing a line
    let text = log(&c);
    std::fs::write(c.join("trials.jsonl"), &text[..text.len() - 25]).unwrap();
    let o = search(&c, 16, &["--workers", "2", "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(log(&a), log(&c));

    // a resume must use the same settings
    let o = search(&c, 20, &["--workers", "3", "--resume"]);
    assert!(stderr(&o).starts_with("error[config]:"), "{}", stderr(&o));
}

#[test]
fn space_files_are_parsed() {
    let dir = tempfile::tempdir().unwrap();
    let space = dir.path().join("space.txt");
    std::fs::write(&space, "x = float 0 1\nn = int 1 3\n").unwrap();
    let out = dir.path().join("s");
    let o = search(&out, 4, &["--space", space.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::write(&space, "x = float 1 0\n").unwrap();
    let o = search(&dir.path().join("t"), 4, &["--space", space.to_str().unwrap()]);
    assert!(stderr(&o).starts_with("error[config]:"), "{}", stderr(&o));

    std::fs::write(&space, "num_layers = int 1 2
warmup = float 0 1
").unwrap();
    let corpus = fixture("mini");
    let o = run(&[
        "search", "--space", space.to_str().unwrap(), "--objective", "pretrain", "--corpus", corpus.to_str().unwrap(),
        "--val", corpus.to_str().unwrap(), "--trials", "1", "--out", dir.path().join("u").to_str().unwrap(),
    ]);
    assert!(stderr(&o).contains("`warmup` cannot be searched"), "{}", stderr(&o));
}

#[test]
fn pretrain_then_score_eval_and_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let text = std::fs::read_to_string(fixture("shakespeare.txt")).unwrap();
    std::fs::write(p("train.txt"), &text[..20_000]).unwrap();
    std::fs::write(p("valid.txt"), &text[text.len() - 5_000..]).unwrap();
    std::fs::write(
        p("tiny.cfg"),
        "objective = clm\nvocab_size = 300\npos_type = absolute\nmax_seq_len = 32\nnum_layers = 1\n\
         num_heads = 2\nhead_size = 8\nffn_size = 32\nepochs = 2\nbatch_size = 8\n",
    )
    .unwrap();
    let o = run(&["pretrain", "--config", &p("tiny.cfg"), "--corpus", &p("train.txt"), "--val", &p("valid.txt"), "--out", &p("run")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for sub in ["epoch-1", "epoch-2", "model", "tokenizer", "run_manifest.json"] {
        assert!(dir.path().join("run").join(sub).exists(), "{sub}");
    }
    let model = p("run/model");

    let o = run(&["score", "--model", &model, "--text", "To be or not to be"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    let lp: f64 = out.lines().next().unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!(lp < 0.0 && lp.is_finite());

    std::fs::write(
        p("pairs.jsonl"),
        "{\"sentence_good\":\"The king is here.\",\"sentence_bad\":\"The king are here.\",\"phenomenon\":\"agreement\"}\n\
         {\"sentence_good\":\"They were here.\",\"sentence_bad\":\"They was here.\",\"phenomenon\":\"agreement\"}\n",
    )
    .unwrap();
    let o = run(&["eval", "pairs", "--model", &model, "--pairs", &p("pairs.jsonl")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("agreement"));

    std::fs::write(p("task.tsv"), "text\tlabel\ngood day sir\t1\nfoul wretch\t0\nsweet love\t1\nvile knave\t0\n").unwrap();
    let o = run(&["finetune", "--model", &model, "--task", &p("task.tsv"), "--valid", &p("task.tsv"), "--epochs", "1", "--out", &p("ft")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"mcc\""));

    std::fs::write(p("bad.tsv"), "good day sir\tyes\n").unwrap();
    let o = run(&["finetune", "--model", &model, "--task", &p("bad.tsv"), "--valid", &p("task.tsv")]);
    assert!(stderr(&o).starts_with("error[format]"), "{}", stderr(&o));
}
