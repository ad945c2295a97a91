use crate::config::{file_digest, run_hash, RunConfig};
use crate::failure::Failure;
use derc::corpus::{
    generate_parallel, load_corpus, save_corpus, write_atomic, Corpus, Dialogue, Split, CORPUS_FORMAT, CORPUS_VERSION,
};
use derc::distributions::{EmotionDistribution, LossMode};
use derc::eval::{self, EvalReport};
use derc::gradcheck::{format_table, run_suite, CheckReport};
use derc::model::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use derc::numerics::OpKind;
use derc::train::{loss_log_csv, TrainOutcome};
use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CORPUS_FILE_GZ: &str = "corpus.jsonl.gz";
pub const CHECKPOINT_FILE: &str = "model.derc";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const PR_MAXP_FILE: &str = "pr_points_maxp.csv";
pub const PR_ENT_FILE: &str = "pr_points_ent.csv";
pub const TRACE_FILE: &str = "entropy_trace.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";

/// Distributions substituted for model output when checking the
/// evaluation pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Oracle {
    /// The generator's hidden distributions.
    Truth,
    /// The annotators' soft labels.
    Soft,
}

pub fn generate(config: &RunConfig, out: &Path, gzip: bool, workers: usize) -> Result<PathBuf, Failure> {
    let corpus = generate_parallel(&config.generator_config(), workers)?;
    let hash = run_hash("generate", &(config.seed, &config.generator, gzip), &[]);
    let dir = run_dir(out, &format!("generate-{hash}-seed{}", config.seed))?;
    let file = if gzip { CORPUS_FILE_GZ } else { CORPUS_FILE };
    save_corpus(&dir.join(file), &corpus).map_err(|e| at(&dir.join(file), e))?;
    let manifest = manifest(
        "generate",
        &hash,
        Some(config.seed),
        json!({ "seed": config.seed, "generator": config.generator }),
        json!({}),
        &[file],
        corpus_summary(&corpus),
    );
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(dir)
}

pub fn train(config: &RunConfig, corpus_path: &Path, out: &Path) -> Result<(PathBuf, TrainOutcome), Failure> {
    if config.loss.mode == LossMode::Dpn {
        return Err(Failure::config("loss.mode must be one of HARD, SOFT, DPN_KL"));
    }
    let digest = file_digest(corpus_path)?;
    let corpus = load_corpus(corpus_path).map_err(|e| at(corpus_path, e))?;
    let train_config = config.train_config();
    let outcome = derc::train::train(&corpus, &train_config)?;
    let hash = run_hash("train", &train_config, &[&digest]);
    let dir = run_dir(out, &format!("train-{hash}-seed{}", config.seed))?;
    let checkpoint = Checkpoint { params: outcome.params.clone(), loss_mode: config.loss.mode };
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &checkpoint).map_err(|e| at(&dir.join(CHECKPOINT_FILE), e))?;
    write_text(&dir.join(LOSS_LOG_FILE), &loss_log_csv(&outcome.log))?;
    let first = outcome.log.first();
    let last = outcome.log.last();
    let mut summary = corpus_summary(&corpus);
    summary["parameters"] = json!(outcome.params.parameter_count());
    summary["updates"] = json!(last.map_or(0, |r| r.updates));
    summary["first_epoch_loss"] = json!(first.map(|r| r.loss));
    summary["last_epoch_loss"] = json!(last.map(|r| r.loss));
    let manifest = manifest(
        "train",
        &hash,
        Some(config.seed),
        serde_json::to_value(&train_config).expect("config serializes"),
        json!({ "corpus": digest }),
        &[CHECKPOINT_FILE, LOSS_LOG_FILE],
        summary,
    );
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok((dir, outcome))
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub corpus: &'a Path,
    pub split: Split,
    pub out: &'a Path,
    pub workers: usize,
    pub oracle: Option<Oracle>,
}

pub fn evaluate(args: &EvaluateArgs<'_>) -> Result<(PathBuf, EvalReport), Failure> {
    let corpus_digest = file_digest(args.corpus)?;
    let corpus = load_corpus(args.corpus).map_err(|e| at(args.corpus, e))?;
    let checkpoint = match args.checkpoint {
        Some(path) => {
            let digest = file_digest(path)?;
            let ck = load_checkpoint(path).map_err(|e| at(path, e))?;
            check_compatible(&ck, &corpus)?;
            Some((digest, ck))
        }
        None => None,
    };
    let dialogues: Vec<&Dialogue> = corpus.split(args.split).collect();
    let predictions = match (args.oracle, &checkpoint) {
        (Some(oracle), _) => oracle_predictions(&dialogues, oracle)?,
        (None, Some((_, ck))) => eval::predict_all(&ck.params, &dialogues, ck.loss_mode.is_dirichlet(), args.workers)?,
        (None, None) => return Err(Failure::config("evaluate needs --checkpoint or --debug-oracle")),
    };
    let report = eval::evaluate_predictions(&dialogues, &predictions)?;

    let oracle_name = args.oracle.map(|o| format!("{o:?}").to_lowercase());
    let mut inputs = vec![corpus_digest.as_str()];
    if let Some((d, _)) = &checkpoint {
        inputs.push(d);
    }
    let hash = run_hash("evaluate", &(args.split.to_string(), &oracle_name), &inputs);
    let dir = run_dir(args.out, &format!("evaluate-{hash}"))?;
    write_text(&dir.join(REPORT_FILE), &eval::report_text(&report))?;
    write_json(&dir.join(REPORT_JSON_FILE), &serde_json::to_value(&report).expect("report serializes"))?;
    write_text(&dir.join(PR_MAXP_FILE), &eval::pr_points_csv(&report.pr_points_maxp))?;
    write_text(&dir.join(PR_ENT_FILE), &eval::pr_points_csv(&report.pr_points_ent))?;
    write_text(&dir.join(TRACE_FILE), &eval::entropy_trace_csv(&report.entropy_trace))?;
    let mut input_json = json!({ "corpus": corpus_digest });
    if let Some((d, ck)) = &checkpoint {
        input_json["checkpoint"] = json!(d);
        input_json["loss_mode"] = json!(ck.loss_mode);
    }
    let manifest = manifest(
        "evaluate",
        &hash,
        None,
        json!({ "split": args.split, "debug_oracle": oracle_name }),
        input_json,
        &[REPORT_FILE, REPORT_JSON_FILE, PR_MAXP_FILE, PR_ENT_FILE, TRACE_FILE],
        json!({
            "utterances": report.utterances,
            "positives": report.positives,
            "negatives": report.negatives,
            "wa": report.wa,
            "ua": report.ua,
            "aupr_maxp": report.aupr_maxp,
            "aupr_ent": report.aupr_ent,
            "mean_kl_to_truth": report.mean_kl_to_truth,
        }),
    );
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok((dir, report))
}

/// Runs the finite-difference suite, writing the table under `out` when
/// given.
pub fn gradcheck(seed: u64, fault: Option<&str>, out: Option<&Path>) -> Result<Vec<CheckReport>, Failure> {
    let fault = fault
        .map(|name| match OpKind::from_name(name) {
            Some(op) if !matches!(op, OpKind::Leaf | OpKind::Constant) => Ok(op),
            _ => Err(Failure::config(format!("--inject-fault: unknown differentiable op {name:?}"))),
        })
        .transpose()?;
    let reports = run_suite(seed, fault)?;
    if let Some(out) = out {
        let fault_name = fault.map(|op| op.name());
        let hash = run_hash("gradcheck", &fault_name, &[]);
        let dir = run_dir(out, &format!("gradcheck-{hash}-seed{seed}"))?;
        write_text(&dir.join(GRADCHECK_FILE), &format_table(&reports))?;
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        let manifest = manifest(
            "gradcheck",
            &hash,
            Some(seed),
            json!({ "inject_fault": fault_name }),
            json!({}),
            &[GRADCHECK_FILE],
            json!({ "checks": reports.len(), "failed": failed }),
        );
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    }
    Ok(reports)
}

fn check_compatible(ck: &Checkpoint, corpus: &Corpus) -> Result<(), Failure> {
    let model = ck.params.config();
    let header = &corpus.header;
    if model.feature_dim != header.feature_dim {
        return Err(Failure::config(format!(
            "feature dimension mismatch: checkpoint expects {} but corpus has {}",
            model.feature_dim, header.feature_dim
        )));
    }
    if model.classes != header.classes {
        return Err(Failure::config(format!(
            "class count mismatch: checkpoint predicts {} but corpus has {}",
            model.classes, header.classes
        )));
    }
    Ok(())
}

fn oracle_predictions(dialogues: &[&Dialogue], oracle: Oracle) -> Result<Vec<Vec<EmotionDistribution>>, Failure> {
    dialogues
        .iter()
        .map(|d| {
            d.utterances
                .iter()
                .map(|u| match oracle {
                    Oracle::Soft => Ok(u.soft_label.clone()),
                    Oracle::Truth => u
                        .true_distribution
                        .clone()
                        .ok_or_else(|| Failure::config(format!("utterance {} has no true distribution", u.id))),
                })
                .collect()
        })
        .collect()
}

fn corpus_summary(corpus: &Corpus) -> Value {
    json!({
        "dialogues": corpus.dialogues.len(),
        "utterances": corpus.utterance_count(),
        "no_majority_fraction": corpus.no_majority_fraction(),
        "classes": corpus.header.classes,
        "feature_dim": corpus.header.feature_dim,
        "annotators": corpus.header.annotators,
    })
}

fn manifest(
    command: &str,
    hash: &str,
    seed: Option<u64>,
    settings: Value,
    inputs: Value,
    outputs: &[&str],
    summary: Value,
) -> Value {
    json!({
        "command": command,
        "derc_version": env!("CARGO_PKG_VERSION"),
        "run_hash": hash,
        "seed": seed,
        "corpus_format": CORPUS_FORMAT,
        "corpus_version": CORPUS_VERSION,
        "checkpoint_format": String::from_utf8_lossy(CHECKPOINT_MAGIC),
        "checkpoint_version": CHECKPOINT_VERSION,
        "settings": settings,
        "inputs": inputs,
        "outputs": outputs,
        "summary": summary,
    })
}

fn run_dir(out: &Path, name: &str) -> Result<PathBuf, Failure> {
    let dir = out.join(name);
    fs::create_dir_all(&dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    write_atomic(path, |w| w.write_all(text.as_bytes())).map_err(|e| at(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    write_text(path, &text)
}

fn at(path: &Path, e: derc::Error) -> Failure {
    let mut f = Failure::from(e);
    f.message = format!("{}: {}", path.display(), f.message);
    f
}
