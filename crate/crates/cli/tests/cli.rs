use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_unitcraft"));
    c.env_remove("UNITCRAFT_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen(dir: &Path, seed: &str, n: &str) {
    ok(&["gen", "--seed", seed, "--n", n, "--out", s(dir)]);
}

#[test]
fn gen_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, "7", "20");
    gen(&b, "7", "20");
    assert_eq!(tree(&a), tree(&b));
    assert!(a.join("MANIFEST.json").exists());
    let c = t.path().join("c");
    gen(&c, "8", "20");
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn segment_then_replay_passes_and_tampering_fails() {
    let t = tempfile::tempdir().unwrap();
    let (corpus, units) = (t.path().join("corpus"), t.path().join("units"));
    gen(&corpus, "7", "20");
    let first = ok(&["segment", "--corpus", s(&corpus), "--out", s(&units)]);
    let snap = tree(&units);
    assert_eq!(ok(&["segment", "--corpus", s(&corpus), "--out", s(&units)]), first);
    assert_eq!(tree(&units), snap);
    assert!(units.join("chains.json").exists());
    let out = ok(&["replay", "--corpus", s(&corpus), "--units", s(&units)]);
    assert!(out.contains("0 failed"), "{out}");

    let train = corpus.join("train.jsonl");
    let text = std::fs::read_to_string(&train).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    let steps = v["demo_actions"].as_array_mut().unwrap();
    steps.remove(0);
    lines[0] = v.to_string();
    std::fs::write(&train, lines.join("\n") + "\n").unwrap();
    let o = run(&["replay", "--corpus", s(&corpus)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["gen", "--n", "5"]).status.code(), Some(2), "missing --out");
    assert_eq!(run(&["gen", "--n", "notanumber", "--out", "/tmp/x"]).status.code(), Some(2));
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nope");
    assert_eq!(run(&["replay", "--corpus", s(&missing)]).status.code(), Some(3));
    assert_eq!(run(&["model-info", "--checkpoint", s(&missing)]).status.code(), Some(3));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_overrides_flags_and_env_overrides_config() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.cfg");
    std::fs::write(&cfg, "# run\nseed = 8\n").unwrap();
    let (a, b, c, d) = (t.path().join("a"), t.path().join("b"), t.path().join("c"), t.path().join("d"));
    ok(&["gen", "--seed", "7", "--n", "10", "--out", s(&a), "--config", s(&cfg)]);
    gen(&b, "8", "10");
    assert_eq!(tree(&a), tree(&b));
    let o = bin()
        .args(["gen", "--seed", "7", "--n", "10", "--out", s(&c), "--config", s(&cfg)])
        .env("UNITCRAFT_SEED", "9")
        .output()
        .unwrap();
    assert!(o.status.success());
    gen(&d, "9", "10");
    assert_eq!(tree(&c), tree(&d));

    std::fs::write(&cfg, "bogus_key = 1\n").unwrap();
    let o = run(&["gen", "--n", "10", "--out", s(&a), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_reports_unit_columns() {
    let t = tempfile::tempdir().unwrap();
    let (corpus, units) = (t.path().join("corpus"), t.path().join("units"));
    gen(&corpus, "7", "20");
    ok(&["segment", "--corpus", s(&corpus), "--out", s(&units)]);
    let text = ok(&["stats", "--units", s(&units), "--level", "unit"]);
    for row in ["#", "Action Length", "# of Dialogue Turns", "Dialogue Lengths", "train"] {
        assert!(text.contains(row), "{row} missing from\n{text}");
    }
    let csv = ok(&["stats", "--units", s(&units), "--level", "edh", "--csv"]);
    assert!(csv.starts_with("level,split,count,action_length,dialogue_turns,dialogue_length\n"));
}

#[test]
fn snapshot_train_eval_roundtrip() {
    let t = tempfile::tempdir().unwrap();
    let p = |n: &str| t.path().join(n);
    gen(&p("corpus"), "7", "10");
    ok(&["segment", "--corpus", s(&p("corpus")), "--out", s(&p("units"))]);
    ok(&["snapshot", "--units", s(&p("units")), "--out", s(&p("stores1")), "--jobs", "1"]);
    ok(&["snapshot", "--units", s(&p("units")), "--out", s(&p("stores2")), "--jobs", "2"]);
    assert_eq!(tree(&p("stores1")), tree(&p("stores2")));
    assert!(tree(&p("stores1")).iter().all(|(f, _)| f.extension().unwrap() == "ucps"));

    let train = |out: &str| {
        ok(&[
            "train", "--units", s(&p("units")), "--stores", s(&p("stores1")), "--out", s(&p(out)),
            "--epochs", "2", "--d-model", "16",
        ])
    };
    let log = train("ckpt1");
    assert!(log.contains("epoch   2"), "{log}");
    train("ckpt2");
    assert_eq!(tree(&p("ckpt1")), tree(&p("ckpt2")));
    let loss = std::fs::read_to_string(p("ckpt1").join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);

    let ckpt = p("ckpt1").join("model.uckp");
    let info = ok(&["model-info", "--checkpoint", s(&ckpt)]);
    assert!(info.contains("total") && info.contains("layer0"), "{info}");

    let eval = |jobs: &str, out: &str| {
        ok(&[
            "eval", "--checkpoint", s(&ckpt), "--corpus", s(&p("corpus")), "--split", "train", "--jobs", jobs,
            "--out", s(&p(out)),
        ])
    };
    let table = eval("1", "eval1");
    assert!(table.contains("SR(PSR)") && table.contains("GC(PGC)"), "{table}");
    assert_eq!(eval("2", "eval2"), table);
    assert_eq!(tree(&p("eval1")), tree(&p("eval2")));
    let csv = std::fs::read_to_string(p("eval1").join("metrics.csv")).unwrap();
    assert!(csv.starts_with("split,instances,sr,psr,gc,pgc\n"));
}

#[test]
fn path_verb_prints_arrows() {
    let t = tempfile::tempdir().unwrap();
    let grid = t.path().join("grid.txt");
    std::fs::write(&grid, "...\n.#.\n...\n").unwrap();
    let out = ok(&["path", "--grid", s(&grid), "--from", "0,0,0,0", "--to", "2,2,0,0"]);
    assert!(out.starts_with("cost "), "{out}");
    assert!(out.contains("-->"), "{out}");
    let o = run(&["path", "--grid", s(&grid), "--from", "0,0", "--to", "2,2,0,0"]);
    assert_eq!(o.status.code(), Some(2));
}
