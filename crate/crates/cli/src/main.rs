use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlq_core::bank::{
    augment, load_bank, read_dataset, stream_rng, write_dataset, Dataset, TemplateBank,
};
use mlq_core::eval::{
    emit_report, evaluate, run_experiment, split, EvalOptions, ExperimentKind, ExperimentOptions,
    TRAIN_RATIO,
};
use mlq_core::expr::parse_tree;
use mlq_core::hints::{hint_sequence, next_hint};
use mlq_core::mcq::distractors;
use mlq_core::nn::checkpoint::{load_checkpoint, save_checkpoint, with_smoke_test};
use mlq_core::nn::gradcheck::DEFAULT_TOLERANCE;
use mlq_core::nn::{gradient_check, train, Metadata, ModelConfig, Solver};

#[derive(Parser)]
#[command(
    name = "mlq",
    version,
    about = "Generate, solve, hint and grade machine-learning course questions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand every paraphrase of a template bank into concrete questions.
    Augment {
        /// Bank JSON; the built-in bank when omitted.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        per_question: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a solver on the training side of a dataset's split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML file with model settings; defaults for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test side of a dataset's split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Bypass the graph layers at inference.
        #[arg(long)]
        ablate_gnn: bool,
        /// Also grade four-option multiple-choice items.
        #[arg(long)]
        mcq: bool,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Output path stem; `.txt` and `.csv` are written.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a full experiment: main, scaling, ablation or mcq.
    Experiment {
        #[arg(long)]
        kind: ExperimentKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        per_question: Option<usize>,
        #[arg(long)]
        retrains: Option<usize>,
        /// Augmentation counts for the scaling experiment.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for finished cells; reused on the next run.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Output path stem for the report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer a free-form question with a trained checkpoint.
    Solve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        question: String,
        /// Draw this many dropout samples instead of one greedy decode.
        #[arg(long)]
        samples: Option<usize>,
        /// Beam width; overrides sampling.
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print hint step N (1-based) for a question of a dataset.
    Hint {
        #[arg(long)]
        question_id: String,
        #[arg(long)]
        step: usize,
        /// Dataset file; one augmentation of the built-in bank when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Multiple-choice options for an expression tree.
    Distract {
        /// Prefix s-expression, e.g. `(add q0 (mul q1 q2))`.
        #[arg(long)]
        tree: String,
        /// Quantity values, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        bindings: String,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic and numeric gradients on a small model.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    /// Bad input: arguments, files, configuration.
    Invalid(String),
    Training(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 2,
            Failure::Training(_) => 3,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig, Failure> {
    let config = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            toml::from_str::<ModelConfig>(&text)
                .map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => ModelConfig::default(),
    };
    config.validate().map_err(invalid)?;
    Ok(config)
}

fn bank_from(path: Option<&Path>) -> Result<TemplateBank, Failure> {
    match path {
        Some(p) => load_bank(p).map_err(invalid),
        None => Ok(TemplateBank::default_bank()),
    }
}

fn dataset(path: &Path) -> Result<Dataset, Failure> {
    read_dataset(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl serde::Serialize) {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Augment {
            bank,
            per_question,
            seed,
            out,
        } => {
            let bank = bank_from(bank.as_deref())?;
            let data = augment(&bank, per_question, seed).map_err(invalid)?;
            write_dataset(&out, &data).map_err(invalid)?;
            eprintln!("wrote {} questions to {}", data.len(), out.display());
        }
        Command::Train {
            data,
            config,
            out,
            log,
        } => {
            let config = load_config(config.as_deref())?;
            let data = dataset(&data)?;
            let (train_set, test) =
                split(&data.instances, TRAIN_RATIO, data.header.seed).map_err(invalid)?;
            let (model, train_log) = train(&train_set, &test, &config, &mut |row, secs| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  held-out value accuracy {:.4}  ({secs:.1}s)",
                    row.epoch,
                    row.loss,
                    row.held_out_accuracy.unwrap_or(0.0)
                )
            })
            .map_err(|e| match e {
                mlq_core::nn::TrainError::Empty | mlq_core::nn::TrainError::Config(_) => invalid(e),
                _ => Failure::Training(e.to_string()),
            })?;
            let meta = Metadata {
                epochs: config.epochs,
                loss_curve: train_log.losses(),
                held_out_accuracy: train_log
                    .epochs
                    .iter()
                    .map(|e| e.held_out_accuracy)
                    .collect(),
                dataset_seed: Some(data.header.seed),
                smoke_test: None,
            };
            let meta = with_smoke_test(&model, meta, &test[0].text);
            save_checkpoint(&out, &model, &meta).map_err(invalid)?;
            if let Some(log) = log {
                std::fs::write(&log, train_log.to_csv()).map_err(invalid)?;
            }
            eprintln!("saved {}", out.display());
        }
        Command::Eval {
            data,
            ckpt,
            ablate_gnn,
            mcq,
            samples,
            bank,
            report,
        } => {
            let bank = bank_from(bank.as_deref())?;
            let data = dataset(&data)?;
            let (mut model, _) = load_checkpoint(&ckpt).map_err(invalid)?;
            if ablate_gnn {
                if model.config.use_gnn {
                    eprintln!("warning: checkpoint was trained with graph layers; evaluating without them");
                }
                model.config.use_gnn = false;
            }
            let (_, test) =
                split(&data.instances, TRAIN_RATIO, data.header.seed).map_err(invalid)?;
            let options = EvalOptions {
                mcq,
                mcq_samples: samples,
                seed: data.header.seed,
                ..EvalOptions::default()
            };
            let result = evaluate(&Solver::new(model), &test, &bank, &options).map_err(invalid)?;
            let table = result.to_table(&format!(
                "Evaluation of {} on {} test questions",
                ckpt.display(),
                test.len()
            ));
            print!("{}", table.to_text());
            emit_report(&table, &report).map_err(invalid)?;
        }
        Command::Experiment {
            kind,
            config,
            bank,
            per_question,
            retrains,
            counts,
            seed,
            cache,
            out,
        } => {
            let bank = bank_from(bank.as_deref())?;
            let mut opts = ExperimentOptions::new(kind, load_config(config.as_deref())?);
            opts.seed = seed;
            opts.cache_dir = cache;
            if let Some(k) = per_question {
                opts.per_question = k;
            }
            if let Some(r) = retrains {
                opts.retrains = r;
            }
            if let Some(c) = counts {
                opts.scaling_counts = c;
            }
            let result = run_experiment(&bank, &opts, &mut |line| eprintln!("{line}")).map_err(
                |e| match e {
                    mlq_core::eval::EvalError::Train(t) => Failure::Training(t.to_string()),
                    other => invalid(other),
                },
            )?;
            print!("{}", result.table.to_text());
            emit_report(&result.table, &out).map_err(invalid)?;
        }
        Command::Solve {
            ckpt,
            question,
            samples,
            beam,
            seed,
        } => {
            let (model, _) = load_checkpoint(&ckpt).map_err(invalid)?;
            let solver = Solver::new(model);
            if let Some(width) = beam {
                print_json(&solver.beam(&question, width).map_err(invalid)?);
            } else if let Some(k) = samples {
                print_json(&solver.sample(&question, k, seed).map_err(invalid)?);
            } else {
                print_json(&solver.predict(&question).map_err(invalid)?);
            }
        }
        Command::Hint {
            question_id,
            step,
            data,
            bank,
            seed,
        } => {
            let bank = bank_from(bank.as_deref())?;
            let data = match data {
                Some(p) => dataset(&p)?,
                None => augment(&bank, 1, 0).map_err(invalid)?,
            };
            let inst = data
                .instances
                .iter()
                .find(|i| i.id == question_id)
                .ok_or_else(|| invalid(format!("no question with id `{question_id}`")))?;
            if step == 0 {
                return Err(invalid("hint steps start at 1"));
            }
            let steps =
                hint_sequence(inst, &bank, &mut stream_rng(seed, &inst.id, 0)).map_err(invalid)?;
            let (hint, _) = next_hint(&steps, step - 1).map_err(invalid)?;
            print_json(hint);
        }
        Command::Distract {
            tree,
            bindings,
            n,
            seed,
        } => {
            let tree = parse_tree(&tree).map_err(invalid)?;
            let values: Vec<f64> = bindings
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| invalid(format!("binding `{s}`: {e}")))
                })
                .collect::<Result<_, _>>()?;
            tree.check_quantities(values.len()).map_err(invalid)?;
            let options = distractors(&tree, &values, n, &mut stream_rng(seed, "distract", 0))
                .map_err(invalid)?;
            print_json(&serde_json::json!({
                "options": options.options,
                "answer_index": options.answer_index,
            }));
        }
        Command::Gradcheck { tolerance, seed } => {
            let config = mlq_core::nn::gradcheck::tiny_config(seed);
            match gradient_check(&config, tolerance, None) {
                Ok(report) => print_json(&report),
                Err(mlq_core::nn::GradCheckError::GradientMismatch(report)) => {
                    print_json(&report);
                    return Err(Failure::Training(format!(
                        "{} gradient mismatches",
                        report.failures.len()
                    )));
                }
                Err(e) => return Err(invalid(e)),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Invalid(m) | Failure::Training(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
