use std::path::Path;
use std::process::{Command, Output};

use fedsilo::commands;
use fedsilo::param::ParamVector;
use fedsilo::RunConfig;

const CONFIG: &str = r#"{
    "max_iterations": 6,
    "checkpoint_every": 3,
    "model": { "vocab_size": 30, "embed_dim": 4 },
    "data": { "shared_vocab": 6, "corpus_dir": "corpus" },
    "silos": [
        { "silo_id": 0, "language_id": 0, "n_train": 300, "n_test": 40 },
        { "silo_id": 1, "language_id": 1, "n_train": 60, "n_test": 40 }
    ],
    "client": { "learning_rate": 0.5, "batch_size": 16 },
    "central": { "sample_budget": 500, "batch_size": 16, "eval_every_batches": 8 },
    "personalization": { "local_rounds": 2 },
    "output": { "checkpoint_dir": "ckpt" }
}"#;

fn fedsilo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsilo"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn train_fl_writes_log_and_checkpoints() {
    let dir = workspace();
    stdout(&fedsilo(
        dir.path(),
        &["train-fl", "cfg.json", "--out", "fl.csv"],
    ));
    let log = std::fs::read_to_string(dir.path().join("fl.csv")).unwrap();
    let mut lines = log.lines();
    assert!(lines.next().unwrap().starts_with("# seed: 7"));
    assert!(lines.next().unwrap().starts_with("# config: {"));
    assert_eq!(
        lines.next().unwrap(),
        "round,phase,silo_id,metric,value,seed"
    );
    assert!(log.contains(",final_eval,all,perplexity,"));
    for r in [0, 3, 6] {
        let p = ParamVector::load(&dir.path().join(format!("ckpt/round_{r:05}.pv"))).unwrap();
        assert_eq!(p.dim(), 2 * 30 * 4 + 30);
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = workspace();
    stdout(&fedsilo(
        dir.path(),
        &["train-fl", "cfg.json", "--out", "a.csv", "--seed", "1"],
    ));
    stdout(&fedsilo(
        dir.path(),
        &["train-fl", "cfg.json", "--out", "b.csv", "--seed", "2"],
    ));
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn zero_checkpoint_evaluates_to_vocab_size() {
    let dir = workspace();
    std::fs::write(
        dir.path().join("zero.pv"),
        ParamVector::zeros(2 * 30 * 4 + 30).to_bytes(),
    )
    .unwrap();
    let table = stdout(&fedsilo(
        dir.path(),
        &[
            "evaluate", "--ckpt", "zero.pv", "--config", "cfg.json", "--split", "train",
        ],
    ));
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("silo_id,perplexity"));
    let rows: Vec<(&str, f64)> = lines
        .map(|l| {
            let (id, v) = l.split_once(',').unwrap();
            (id, v.parse().unwrap())
        })
        .collect();
    assert_eq!(
        rows.iter().map(|r| r.0).collect::<Vec<_>>(),
        ["0", "1", "all"]
    );
    for (_, ppl) in rows {
        assert!((ppl - 30.0).abs() < 1e-9, "{ppl}");
    }
}

#[test]
fn generated_corpus_round_trips_through_config() {
    let dir = workspace();
    let listed = stdout(&fedsilo(dir.path(), &["gen-data", "cfg.json"]));
    assert_eq!(listed.lines().count(), 4);
    let generated = RunConfig::from_json(CONFIG).unwrap().load_silos().unwrap();

    let mut cfg = RunConfig::from_json(CONFIG).unwrap();
    for s in &mut cfg.silos {
        s.train_path = Some(
            dir.path()
                .join(format!("corpus/silo{}_train.tok", s.silo_id)),
        );
        s.test_path = Some(
            dir.path()
                .join(format!("corpus/silo{}_test.tok", s.silo_id)),
        );
    }
    let read = cfg.load_silos().unwrap();
    for (g, r) in generated.iter().zip(&read) {
        assert_eq!(g.train, r.train);
        assert_eq!(g.test, r.test);
    }
}

#[test]
fn personalize_needs_checkpoints() {
    let dir = workspace();
    let o = fedsilo(dir.path(), &["personalize", "cfg.json", "--out", "p.csv"]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
    assert!(!dir.path().join("p.csv").exists());

    stdout(&fedsilo(
        dir.path(),
        &["train-fl", "cfg.json", "--out", "fl.csv"],
    ));
    let report = stdout(&fedsilo(
        dir.path(),
        &[
            "personalize",
            "cfg.json",
            "--ckpt-round",
            "3",
            "--out",
            "p.csv",
        ],
    ));
    assert!(report.starts_with("silo_id,alpha_star,global_ppl,personal_ppl,interp_ppl\n"));
    assert_eq!(report.lines().count(), 3);
}

#[test]
fn failures_are_one_line_and_leave_no_output() {
    let dir = workspace();
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{ "max_iterations": 3, "typo": 1 }"#,
    )
    .unwrap();
    for args in [
        &["train-fl", "bad.json", "--out", "x.csv"][..],
        &["train-silo", "cfg.json", "--silo", "9", "--out", "x.csv"],
        &["train-central", "missing.json", "--out", "x.csv"],
        &["evaluate", "--ckpt", "nope.pv", "--config", "cfg.json"],
    ] {
        let o = fedsilo(dir.path(), args);
        assert!(!o.status.success(), "{args:?}");
        let err = String::from_utf8(o.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{args:?}: {err}");
        assert!(!dir.path().join("x.csv").exists());
    }
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 2);
}

#[test]
fn library_commands_match_the_binary() {
    let dir = workspace();
    let cfg = commands::load_config(&dir.path().join("cfg.json"), None).unwrap();
    let out = dir.path().join("central.csv");
    let lib = commands::train_central(&cfg, &out).unwrap();
    let via_lib = std::fs::read(&out).unwrap();
    stdout(&fedsilo(
        dir.path(),
        &["train-central", "cfg.json", "--out", "central2.csv"],
    ));
    assert_eq!(
        via_lib,
        std::fs::read(dir.path().join("central2.csv")).unwrap()
    );
    assert_eq!(lib.batches, 500usize.div_ceil(16));
}
