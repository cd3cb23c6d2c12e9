use std::path::Path;
use std::process::{Command, Output};

fn mlq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlq"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("mlq runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

const TINY: &str = "embedding_dim = 16\nhidden_dim = 16\nencoder_layers = 1\nattention_heads = 2\ngnn_layers = 1\nepochs = 2\n";

#[test]
fn augment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        let out = mlq(
            dir.path(),
            &[
                "augment",
                "--per-question",
                "2",
                "--seed",
                "5",
                "--out",
                name,
            ],
        );
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 28 * 5 * 2);
}

#[test]
fn train_solve_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    assert!(
        mlq(d, &["augment", "--per-question", "1", "--out", "d.jsonl"])
            .status
            .success()
    );
    let out = mlq(
        d,
        &[
            "train",
            "--data",
            "d.jsonl",
            "--config",
            "tiny.toml",
            "--out",
            "m.ckpt",
            "--log",
            "log.csv",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let log = std::fs::read_to_string(d.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,loss,held_out_accuracy\n"));

    let one = stdout_json(&mlq(
        d,
        &[
            "solve",
            "--ckpt",
            "m.ckpt",
            "--question",
            "What is 3 times 4?",
        ],
    ));
    assert!(one["tree"].is_string());
    let many = stdout_json(&mlq(
        d,
        &[
            "solve",
            "--ckpt",
            "m.ckpt",
            "--question",
            "What is 3 times 4?",
            "--samples",
            "3",
        ],
    ));
    assert_eq!(many.as_array().unwrap().len(), 3);
    let beam = stdout_json(&mlq(
        d,
        &[
            "solve",
            "--ckpt",
            "m.ckpt",
            "--question",
            "What is 3 times 4?",
            "--beam",
            "2",
        ],
    ));
    assert!(!beam.as_array().unwrap().is_empty());

    let out = mlq(
        d,
        &[
            "eval", "--data", "d.jsonl", "--ckpt", "m.ckpt", "--report", "r",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("Overall,")));
    assert!(d.join("r.txt").exists());
    assert!(mlq(
        d,
        &[
            "eval",
            "--data",
            "d.jsonl",
            "--ckpt",
            "m.ckpt",
            "--ablate-gnn",
            "--report",
            "r2"
        ]
    )
    .status
    .success());
}

#[test]
fn hint_steps_come_from_the_question() {
    let dir = tempfile::tempdir().unwrap();
    let first = stdout_json(&mlq(
        dir.path(),
        &[
            "hint",
            "--question-id",
            "basics_magnitude-p0-000",
            "--step",
            "1",
        ],
    ));
    assert_eq!(first["index"], 1);
    assert!(first["expression_hint"].is_string());
    let out = mlq(
        dir.path(),
        &[
            "hint",
            "--question-id",
            "basics_magnitude-p0-000",
            "--step",
            "99",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = mlq(
        dir.path(),
        &["hint", "--question-id", "nope", "--step", "1"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn distract_keeps_the_answer() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&mlq(
        dir.path(),
        &[
            "distract",
            "--tree",
            "(add q0 (mul q1 q2))",
            "--bindings",
            "1,2,3",
            "--n",
            "4",
        ],
    ));
    let options = v["options"].as_array().unwrap();
    assert_eq!(options.len(), 4);
    let answer = options[v["answer_index"].as_u64().unwrap() as usize]
        .as_f64()
        .unwrap();
    assert_eq!(answer, 7.0);
    let out = mlq(
        dir.path(),
        &["distract", "--tree", "(add q0 q3)", "--bindings", "1,2"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(
        mlq(d, &["augment", "--per-question", "1", "--out", "d.jsonl"])
            .status
            .success()
    );
    std::fs::write(d.join("bad.toml"), "hidden_dim = 0\n").unwrap();
    let out = mlq(
        d,
        &[
            "train", "--data", "d.jsonl", "--config", "bad.toml", "--out", "m.ckpt",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(d.join("typo.toml"), "hiden_dim = 8\n").unwrap();
    let out = mlq(
        d,
        &[
            "train",
            "--data",
            "d.jsonl",
            "--config",
            "typo.toml",
            "--out",
            "m.ckpt",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = mlq(
        d,
        &[
            "eval",
            "--data",
            "missing.jsonl",
            "--ckpt",
            "m.ckpt",
            "--report",
            "r",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_success() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&mlq(dir.path(), &["gradcheck"]));
    assert!(v["checked"].as_u64().unwrap() >= 100);
    assert!(v["failures"].as_array().unwrap().is_empty());
}
