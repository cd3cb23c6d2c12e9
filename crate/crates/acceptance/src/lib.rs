//! Acceptance criteria A1 to A11. Each check returns an [`Outcome`]; the
//! `acceptance` test target runs them in order and prints one line each.
//!
//! The learning criteria train real models. Finished cells are cached under
//! `target/acceptance-cache` (or `$MLQ_ACCEPTANCE_CACHE`), keyed by
//! configuration, dataset and seed, so only the first run pays for training.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use mlq_core::bank::{
    augment, instantiate, write_dataset, SlotAssignment, SlotValue, TemplateBank,
};
use mlq_core::eval::{
    emit_report, run_experiment, split, EvalReport, ExperimentKind, ExperimentOptions, TRAIN_RATIO,
};
use mlq_core::expr::parse_tree;
use mlq_core::hints::{hints_with_examples, HintStep};
use mlq_core::mcq::{grade_mcq, grade_orq};
use mlq_core::nn::checkpoint::{load_checkpoint, save_checkpoint, with_smoke_test};
use mlq_core::nn::gradcheck::{tiny_config, DEFAULT_TOLERANCE};
use mlq_core::nn::tape::BackwardFault;
use mlq_core::nn::{gradient_check, train, GradCheckError, Metadata, ModelConfig, Solver};

#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(id: &'static str, name: &'static str, passed: bool, detail: String) -> Outcome {
        Outcome {
            id,
            name,
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

pub fn cache_dir() -> PathBuf {
    std::env::var_os("MLQ_ACCEPTANCE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-cache")
        })
}

/// Model settings for the learning criteria: the default hyperparameters
/// with the hidden width reduced to 128.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 128,
        ..ModelConfig::default()
    }
}

fn slots(scalars: &[(&str, f64)], seqs: &[(&str, &[f64])]) -> SlotAssignment {
    let mut a: SlotAssignment = scalars
        .iter()
        .map(|(k, v)| (k.to_string(), SlotValue::Scalar(*v)))
        .collect();
    a.extend(
        seqs.iter()
            .map(|(k, v)| (k.to_string(), SlotValue::Seq(v.to_vec()))),
    );
    a
}

fn two_dp(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Evaluates `template` at `values` and compares with `printed` at 2 dp.
fn check_printed(
    bank: &TemplateBank,
    template: &str,
    values: &SlotAssignment,
    printed: f64,
) -> Result<(), String> {
    let t = bank
        .template(template)
        .ok_or_else(|| format!("no template {template}"))?;
    let inst =
        instantiate(t, 0, values, template.to_string()).map_err(|e| format!("{template}: {e}"))?;
    let v = inst
        .gold_tree
        .evaluate(&inst.quantities)
        .map_err(|e| format!("{template}: {e}"))?;
    if two_dp(v) == two_dp(printed) {
        Ok(())
    } else {
        Err(format!(
            "{template}: got {} expected {}",
            two_dp(v),
            two_dp(printed)
        ))
    }
}

pub fn a1_symbolic_oracle() -> Outcome {
    let started = Instant::now();
    let bank = TemplateBank::default_bank();
    let cases: Vec<(&str, SlotAssignment, f64)> = vec![
        (
            "basics_magnitude",
            slots(&[], &[("v", &[10.0, 10.0, 1.0])]),
            14.18,
        ),
        (
            "perc_classify",
            slots(&[], &[("theta", &[4.0, 1.0]), ("p", &[2.0, -4.0])]),
            4.0,
        ),
        (
            "feat_margin",
            slots(
                &[("x", 1.0), ("y", 1.0), ("theta", -1.0), ("theta0", -1.0)],
                &[],
            ),
            2.0,
        ),
        (
            "lr_linear",
            slots(
                &[("theta0", -3.0)],
                &[("x", &[0.0, -1.0]), ("theta", &[1.0, -2.0])],
            ),
            -1.0,
        ),
        (
            "reg_mse_ridge",
            slots(
                &[
                    ("theta", 1.0),
                    ("lambda", 0.5),
                    ("x1", 2.0),
                    ("y1", 0.0),
                    ("x2", 1.0),
                    ("y2", 1.0),
                ],
                &[],
            ),
            2.25,
        ),
        (
            "nn1_two_neuron",
            slots(
                &[
                    ("xA", 4.0),
                    ("xB", 2.0),
                    ("wA", 2.0),
                    ("wB", 1.0),
                    ("oA", 0.5),
                    ("oB", 1.0),
                    ("wAC", 1.0),
                    ("wBC", 3.0),
                    ("oC", 3.0),
                ],
                &[],
            ),
            20.5,
        ),
        (
            "nn2_relu",
            slots(
                &[
                    ("xA", -1.0),
                    ("wA", 2.0),
                    ("oA", 0.5),
                    ("xB", 0.0),
                    ("oB", 1.0),
                    ("wAC", 1.0),
                    ("wBC", 2.0),
                    ("oC", 1.0),
                ],
                &[],
            ),
            1.5,
        ),
        ("cnn_padding", slots(&[("n", 50.0), ("f", 17.0)], &[]), 8.0),
        (
            "sm_max_chain",
            slots(
                &[("s0", 2.0), ("g", 4.0)],
                &[("x", &[7.0, 14.0, 13.0, 10.0])],
            ),
            56.0,
        ),
        (
            "rl_q_update",
            slots(&[("q", 2.0), ("a", 0.3), ("t", 8.0)], &[]),
            3.8,
        ),
        (
            "rnn_unroll",
            slots(&[("s0", 1.5), ("w", 1.5)], &[("x", &[1.0, 0.0, 2.0])]),
            9.31,
        ),
        (
            "dt_entropy_split",
            slots(&[("a", 5.0), ("b", 46.0), ("c", 30.0)], &[]),
            0.90,
        ),
    ];
    let failures: Vec<String> = cases
        .iter()
        .filter_map(|(t, v, printed)| check_printed(&bank, t, v, *printed).err())
        .collect();
    let secs = started.elapsed().as_secs_f64();
    let passed = failures.is_empty() && secs < 1.0 && cases.len() == 12;
    let detail = if failures.is_empty() {
        format!("12/12 printed answers reproduced in {secs:.3}s")
    } else {
        format!("{} mismatches: {}", failures.len(), failures.join("; "))
    };
    Outcome::new("A1", "symbolic oracle", passed, detail)
}

pub fn a2_spot_checks() -> Outcome {
    let bank = TemplateBank::default_bank();
    let magnitudes: [(&[f64], f64); 5] = [
        (&[3.0, 12.0], 12.37),
        (&[16.0, 4.0, 9.0], 18.79),
        (&[7.0, 0.0, 1.0], 7.07),
        (&[10.0, 10.0, 1.0], 14.18),
        (&[0.0, 7.0], 7.0),
    ];
    let mut failures: Vec<String> = magnitudes
        .iter()
        .filter_map(|(v, printed)| {
            check_printed(
                &bank,
                "basics_magnitude",
                &slots(&[], &[("v", v)]),
                *printed,
            )
            .err()
        })
        .collect();
    let tree = parse_tree("(add c:9 (mul c:0.1 (sub c:4 c:5)))").expect("valid tree");
    let direct = 9.0 + 0.1 * (4.0 - 5.0);
    match tree.evaluate(&[]) {
        Ok(v) if two_dp(v) == "8.90" && two_dp(v) == two_dp(direct) && tree.node_count() == 7 => {}
        other => failures.push(format!("Q-update tree: {other:?}")),
    }
    Outcome::new(
        "A2",
        "spot-checks",
        failures.is_empty(),
        if failures.is_empty() {
            "5 magnitudes and the Q-update tree (8.90) reproduced".into()
        } else {
            failures.join("; ")
        },
    )
}

pub fn a3_hint_fidelity() -> Outcome {
    let bank = TemplateBank::default_bank();
    let question = slots(
        &[
            ("x1", 2.0),
            ("w1", 1.0),
            ("OA", 0.5),
            ("wOA", 2.0),
            ("wAC", 1.0),
            ("OC", 1.0),
            ("wOC", 3.0),
        ],
        &[],
    );
    let example = slots(
        &[
            ("OA", 8.0),
            ("wOA", 9.0),
            ("wAC", 3.0),
            ("OC", 2.0),
            ("wOC", 4.0),
        ],
        &[],
    );
    let expected: [[&str; 3]; 3] = [
        ["(OA*wOA)", "(OA*wOA)*wAC", "OC*wOC"],
        ["0.5*2=1", "(0.5*2)*1=1", "1*3=3"],
        ["8*9=72", "(8*9)*3=216", "2*4=8"],
    ];
    let steps = bank
        .template("nn1_chain")
        .ok_or("no nn1_chain template".to_string())
        .and_then(|t| instantiate(t, 0, &question, "table".into()).map_err(|e| e.to_string()))
        .and_then(|inst| hints_with_examples(&inst, &example).map_err(|e| e.to_string()));
    let steps = match steps {
        Ok(s) => s,
        Err(e) => return Outcome::new("A3", "hint fidelity", false, e),
    };
    let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
    let columns: [fn(&HintStep) -> &str; 3] = [
        |s| &s.expression_hint,
        |s| &s.value_hint,
        |s| &s.example_hint,
    ];
    let mut matched = 0;
    let mut failures = Vec::new();
    for (col, want) in columns.iter().zip(&expected) {
        for (i, w) in want.iter().enumerate() {
            match steps.get(i).map(|s| strip(col(s))) {
                Some(got) if got == *w => matched += 1,
                got => failures.push(format!("step {}: {got:?} != {w}", i + 1)),
            }
        }
    }
    Outcome::new(
        "A3",
        "hint fidelity",
        matched == 9,
        if matched == 9 {
            "9/9 hint strings match".into()
        } else {
            failures.join("; ")
        },
    )
}

pub fn a4_grading_law() -> Outcome {
    let mut failures = Vec::new();
    let mut checked = 0;
    for n in 2..=6usize {
        for t in 1..=n {
            checked += 1;
            match grade_mcq(n, t) {
                // exact: g * (n - 1) must equal the integer n - t
                Ok(g)
                    if g * (n - 1) as f64 == (n - t) as f64
                        && g == (n - t) as f64 / (n - 1) as f64 => {}
                other => failures.push(format!("n={n} t={t}: {other:?}")),
            }
        }
    }
    let gold = 200.0;
    let orq = [
        (Some(gold), 1.0),
        (Some(gold + 0.99), 1.0),
        (Some(gold - 1.0), 1.0),
        (Some(gold + 1.01), 0.0),
        (Some(0.0049), 0.0),
        (None, 0.0),
    ];
    for (p, want) in orq {
        if grade_orq(p, gold) != want {
            failures.push(format!("orq {p:?}"));
        }
    }
    if grade_orq(Some(0.004), 0.0) != 1.0 || grade_orq(Some(0.006), 0.0) != 0.0 {
        failures.push("orq tolerance near zero".into());
    }
    Outcome::new(
        "A4",
        "grading law",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{checked} (n, t) pairs exact; open-response grades in {{0, 1}}")
        } else {
            failures.join("; ")
        },
    )
}

fn experiment(
    kind: ExperimentKind,
    configure: impl FnOnce(&mut ExperimentOptions),
) -> Result<Vec<(String, EvalReport)>, String> {
    let mut opts = ExperimentOptions::new(kind, desk_config());
    opts.cache_dir = Some(cache_dir());
    configure(&mut opts);
    let bank = TemplateBank::default_bank();
    let mut log = |line: &str| eprintln!("    {line}");
    run_experiment(&bank, &opts, &mut log)
        .map(|r| r.reports)
        .map_err(|e| e.to_string())
}

pub fn a5_end_to_end() -> Outcome {
    let reports = match experiment(ExperimentKind::Main, |_| {}) {
        Ok(r) => r,
        Err(e) => return Outcome::new("A5", "end-to-end learning", false, e),
    };
    let r = &reports[0].1;
    let (exp, val) = (r.overall.expression_accuracy, r.overall.value_accuracy);
    let inverted: Vec<String> = r
        .rows
        .iter()
        .filter(|row| row.expression_accuracy > row.value_accuracy)
        .map(|row| row.topic.name().to_string())
        .collect();
    let passed =
        val >= 0.85 && val - exp <= 0.03 && exp <= val && inverted.is_empty() && r.rows.len() == 12;
    Outcome::new(
        "A5",
        "end-to-end learning",
        passed,
        format!(
            "value {val:.4} (>= 0.85), expression {exp:.4} (gap {:.4} <= 0.03), topics with expression > value: {}",
            val - exp,
            if inverted.is_empty() { "none".into() } else { inverted.join(", ") }
        ),
    )
}

pub fn a6_scaling() -> Outcome {
    let reports = match experiment(ExperimentKind::Scaling, |o| {
        o.scaling_counts = vec![100, 25, 3];
        o.retrains = 2;
    }) {
        Ok(r) => r,
        Err(e) => return Outcome::new("A6", "augmentation scaling", false, e),
    };
    let acc: Vec<f64> = reports
        .iter()
        .map(|(_, r)| r.overall.value_accuracy)
        .collect();
    let passed = acc[0] > acc[1] && acc[1] > acc[2] && acc[2] <= 0.30 && acc[0] >= 0.85;
    Outcome::new(
        "A6",
        "augmentation scaling",
        passed,
        format!(
            "value accuracy K=100 {:.4} > K=25 {:.4} > K=3 {:.4}; K=3 <= 0.30, K=100 >= 0.85",
            acc[0], acc[1], acc[2]
        ),
    )
}

pub fn a7_ablation() -> Outcome {
    let reports = match experiment(ExperimentKind::Ablation, |o| o.retrains = 2) {
        Ok(r) => r,
        Err(e) => return Outcome::new("A7", "GNN ablation", false, e),
    };
    let (full, reduced) = (
        reports[0].1.overall.value_accuracy,
        reports[1].1.overall.value_accuracy,
    );
    Outcome::new(
        "A7",
        "GNN ablation",
        full >= reduced,
        format!("full {full:.4} >= no-GNN {reduced:.4}, 2 retrains each"),
    )
}

pub fn a8_mcq_uplift() -> Outcome {
    let reports = match experiment(ExperimentKind::Mcq, |_| {}) {
        Ok(r) => r,
        Err(e) => return Outcome::new("A8", "MCQ uplift", false, e),
    };
    let o = &reports[0].1.overall;
    let Some(mcq) = o.mcq_accuracy else {
        return Outcome::new(
            "A8",
            "MCQ uplift",
            false,
            "no multiple-choice accuracy in the report".into(),
        );
    };
    Outcome::new(
        "A8",
        "MCQ uplift",
        mcq >= o.value_accuracy,
        format!(
            "multiple-choice {mcq:.4} >= open-response value {:.4} (4 options, 100 samples)",
            o.value_accuracy
        ),
    )
}

pub fn a9_numerical_stack() -> Outcome {
    let config = tiny_config(0);
    let ok = gradient_check(&config, DEFAULT_TOLERANCE, None);
    let control = gradient_check(&config, DEFAULT_TOLERANCE, Some(BackwardFault::Tanh));
    match (ok, control) {
        (Ok(report), Err(GradCheckError::GradientMismatch(bad))) if report.checked >= 100 => Outcome::new(
            "A9",
            "numerical stack",
            true,
            format!(
                "{} parameters, max error {:.2e} <= 1e-4; corrupted backward caught ({} mismatches)",
                report.checked,
                report.max_error,
                bad.failures.len()
            ),
        ),
        (ok, control) => Outcome::new("A9", "numerical stack", false, format!("check {ok:?}, control {control:?}")),
    }
}

fn tiny_run(dir: &std::path::Path) -> Result<(), String> {
    let bank = TemplateBank::default_bank();
    let data = augment(&bank, 3, 11).map_err(|e| e.to_string())?;
    write_dataset(&dir.join("data.jsonl"), &data).map_err(|e| e.to_string())?;
    let config = ModelConfig {
        embedding_dim: 16,
        hidden_dim: 16,
        encoder_layers: 1,
        attention_heads: 2,
        gnn_layers: 1,
        epochs: 2,
        ..ModelConfig::default()
    };
    let mut opts = ExperimentOptions::new(ExperimentKind::Mcq, config);
    opts.per_question = 1;
    opts.eval.mcq_samples = 10;
    let result = run_experiment(&bank, &opts, &mut |_| {}).map_err(|e| e.to_string())?;
    emit_report(&result.table, &dir.join("report")).map_err(|e| e.to_string())?;
    Ok(())
}

pub fn a10_determinism() -> Outcome {
    let runs: Result<Vec<tempfile::TempDir>, String> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            tiny_run(dir.path())?;
            Ok(dir)
        })
        .collect();
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return Outcome::new("A10", "determinism", false, e),
    };
    let mut differing = Vec::new();
    for name in ["data.jsonl", "report.txt", "report.csv"] {
        let a = std::fs::read(runs[0].path().join(name));
        let b = std::fs::read(runs[1].path().join(name));
        match (a, b) {
            (Ok(a), Ok(b)) if a == b && !a.is_empty() => {}
            _ => differing.push(name),
        }
    }
    Outcome::new(
        "A10",
        "determinism",
        differing.is_empty(),
        if differing.is_empty() {
            "dataset, text report and CSV report byte-identical across two runs".into()
        } else {
            format!("differing files: {}", differing.join(", "))
        },
    )
}

/// A default-size model trained on a small augmentation, cached.
fn latency_solver() -> Result<Solver, String> {
    let config = ModelConfig::default();
    let path = cache_dir().join(format!("latency-{}.ckpt", config.digest()));
    if let Ok((model, _)) = load_checkpoint(&path) {
        return Ok(Solver::new(model));
    }
    let bank = TemplateBank::default_bank();
    let data = augment(&bank, 25, 0).map_err(|e| e.to_string())?;
    let (train_set, test) = split(&data.instances, TRAIN_RATIO, 0).map_err(|e| e.to_string())?;
    eprintln!(
        "    training a default-size model for the latency check ({} questions)",
        train_set.len()
    );
    let (model, log) = train(&train_set, &test, &config, &mut |row, secs| {
        eprintln!(
            "    epoch {} loss {:.4} held-out {:.4} ({secs:.0}s)",
            row.epoch,
            row.loss,
            row.held_out_accuracy.unwrap_or(0.0)
        )
    })
    .map_err(|e| e.to_string())?;
    let meta = Metadata {
        epochs: config.epochs,
        loss_curve: log.losses(),
        held_out_accuracy: log.epochs.iter().map(|e| e.held_out_accuracy).collect(),
        dataset_seed: Some(0),
        smoke_test: None,
    };
    let meta = with_smoke_test(&model, meta, &test[0].text);
    std::fs::create_dir_all(cache_dir()).map_err(|e| e.to_string())?;
    save_checkpoint(&path, &model, &meta).map_err(|e| e.to_string())?;
    Ok(Solver::new(model))
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn a11_latency() -> Outcome {
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    let solver = match latency_solver() {
        Ok(s) => s,
        Err(e) => return Outcome::new("A11", "latency", false, e),
    };
    let bank = TemplateBank::default_bank();
    let questions: Vec<String> = match augment(&bank, 2, 99) {
        Ok(d) => d.instances.into_iter().map(|i| i.text).take(200).collect(),
        Err(e) => return Outcome::new("A11", "latency", false, e.to_string()),
    };
    let app = mlq_tutor::router(Arc::new(mlq_tutor::Tutor::new(bank, Some(solver))));
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .expect("runtime");
    let timings: Result<Vec<f64>, String> = rt.block_on(async {
        let mut out = Vec::new();
        for (i, q) in questions.iter().enumerate() {
            let body = serde_json::json!({ "question": q }).to_string();
            let req = Request::post("/solve")
                .header("content-type", "application/json")
                .body(Body::from(body))
                .expect("request");
            let started = Instant::now();
            let res = app.clone().oneshot(req).await.map_err(|e| e.to_string())?;
            let status = res.status();
            let bytes = res
                .into_body()
                .collect()
                .await
                .map_err(|e| e.to_string())?
                .to_bytes();
            let ms = started.elapsed().as_secs_f64() * 1000.0;
            if !status.is_success() {
                return Err(format!(
                    "request {i}: {status} {}",
                    String::from_utf8_lossy(&bytes)
                ));
            }
            // the first request warms caches and is not timed
            if i > 0 {
                out.push(ms);
            }
        }
        Ok(out)
    });
    let mut timings = match timings {
        Ok(t) => t,
        Err(e) => return Outcome::new("A11", "latency", false, e),
    };
    timings.sort_by(f64::total_cmp);
    let (p50, p99) = (percentile(&timings, 50.0), percentile(&timings, 99.0));
    Outcome::new(
        "A11",
        "latency",
        p50 <= 50.0 && p99 <= 250.0,
        format!("/solve at default size over {} requests: p50 {p50:.1} ms (<= 50), p99 {p99:.1} ms (<= 250)", timings.len()),
    )
}

const CHECKS: [(&str, fn() -> Outcome); 11] = [
    ("A1", a1_symbolic_oracle),
    ("A2", a2_spot_checks),
    ("A3", a3_hint_fidelity),
    ("A4", a4_grading_law),
    ("A5", a5_end_to_end),
    ("A6", a6_scaling),
    ("A7", a7_ablation),
    ("A8", a8_mcq_uplift),
    ("A9", a9_numerical_stack),
    ("A10", a10_determinism),
    ("A11", a11_latency),
];

/// All criteria in order.
pub fn run_all(report: &mut dyn FnMut(&Outcome)) -> Vec<Outcome> {
    run_all_matching(&[], report)
}

/// The criteria whose ids are listed, in order; all of them for an empty list.
pub fn run_all_matching(ids: &[String], report: &mut dyn FnMut(&Outcome)) -> Vec<Outcome> {
    CHECKS
        .iter()
        .filter(|(id, _)| ids.is_empty() || ids.iter().any(|x| x == id))
        .map(|(_, check)| {
            let o = check();
            report(&o);
            o
        })
        .collect()
}
