use std::path::Path;
use std::process::{Command, Output};

use anchornet::config::RunConfig;
use anchornet::synth::DatasetCounts;

fn anchornet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchornet"))
        .args(args)
        .env("ANCHOR_MATCH_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = anchornet(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let mut c = RunConfig::default();
    c.synth.size = 32;
    c.data = DatasetCounts {
        train_pos_per_class: 12,
        train_neg: 24,
        test_pos_per_class: 4,
        test_neg: 8,
        intra_pairs: 3,
        cross_pairs: 2,
    };
    c.model.pca_samples = 500;
    c.warmup.samples = 32;
    c.stage1.samples_per_class = 32;
    c.stage2.samples = 32;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, c.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--config", &cfg, "--seed", "7", "--out", s(d)]);
    }
    for f in [
        "manifest.toml",
        "images/000000.tns",
        "masks/000003.tns",
        "annotations/000001.toml",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = tmp.path().join("c");
    ok(&["gen-data", "--config", &cfg, "--seed", "8", "--out", s(&c)]);
    assert_ne!(
        std::fs::read(a.join("images/000000.tns")).unwrap(),
        std::fs::read(c.join("images/000000.tns")).unwrap()
    );
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(anchornet(&["gen-data", "--bogus"]).status.code(), Some(1));
    assert_eq!(anchornet(&["gen-data"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nfilters = 1\n").unwrap();
    let o = anchornet(&["gen-data", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.filters"));
    assert_eq!(anchornet(&["--workers", "0", "gradcheck"]).status.code(), Some(1));
    assert_eq!(anchornet(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", s(tmp.path())]);
    assert!(out.lines().count() > 10);
    assert!(!out.contains("FAIL"));
    assert!(tmp.path().join("gradcheck.txt").exists());
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let p = |n: &str| tmp.path().join(n);
    ok(&["gen-data", "--config", &cfg, "--out", s(&p("data"))]);
    ok(&[
        "train",
        "--config",
        &cfg,
        "--data",
        s(&p("data")),
        "--out",
        s(&p("run")),
    ]);
    for f in ["model.ckpt", "stage1.ckpt", "losses.csv", "warmup.csv", "config.toml"] {
        assert!(p("run").join(f).exists(), "{f}");
    }
    let header = std::fs::read_to_string(p("run/losses.csv")).unwrap();
    assert!(header.starts_with("step,stage,class,label,discr,aux,divA,divB,rec,total"));

    let ckpt = p("run/model.ckpt");
    ok(&[
        "extract",
        "--config",
        &cfg,
        "--data",
        s(&p("data")),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&p("desc")),
    ]);
    ok(&[
        "match",
        "--config",
        &cfg,
        "--data",
        s(&p("data")),
        "--descriptors",
        s(&p("desc")),
        "--out",
        s(&p("flows")),
    ]);
    let meta = std::fs::read_to_string(p("flows/flows.toml")).unwrap();
    assert_eq!(meta.matches("[[flows]]").count(), 3);
    assert!(meta.contains("energy"));
    let table = ok(&[
        "eval",
        "--config",
        &cfg,
        "--data",
        s(&p("data")),
        "--flows",
        s(&p("flows")),
        "--out",
        s(&p("eval")),
    ]);
    assert!(table.contains("pck"));
    let csv = std::fs::read_to_string(p("eval/eval.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("dsp-intra,anet-agnostic,pck,0.1,")));

    // noflow needs no descriptors; evaluating it twice is byte-identical
    ok(&[
        "match",
        "--config",
        &cfg,
        "--data",
        s(&p("data")),
        "--method",
        "noflow",
        "--pairs",
        "cross",
        "--out",
        s(&p("nf")),
    ]);
    for d in ["e1", "e2"] {
        ok(&[
            "eval",
            "--config",
            &cfg,
            "--data",
            s(&p("data")),
            "--flows",
            s(&p("nf")),
            "--out",
            s(&p(d)),
        ]);
    }
    assert_eq!(
        std::fs::read(p("e1/eval.csv")).unwrap(),
        std::fs::read(p("e2/eval.csv")).unwrap()
    );

    let o = anchornet(&["match", "--config", &cfg, "--data", s(&p("data")), "--out", s(&p("x"))]);
    assert_eq!(o.status.code(), Some(1), "dsp without descriptors");
}
