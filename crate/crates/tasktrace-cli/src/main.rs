//! Pipeline driver: raw event logs in, anomaly verdicts and metric
//! reports out.
//!
//! Each subcommand is one pipeline stage and writes its artifacts plus a
//! `manifest.json` into the output directory; `pipeline` chains every
//! stage. Exit codes: 0 success, 1 usage error, 2 data or processing
//! error.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use tasktrace::detector::{classify_corpus, write_verdicts_csv};
use tasktrace::encoder::{alphabet_size, encode_traces, encoded_unknown, EncodedTrace};
use tasktrace::evaluation::{
    format_reports_table, score_next_key, score_task_based, score_trace_based, write_reports_csv,
    ReportRow,
};
use tasktrace::ingest::{read_events, write_events_csv, write_events_jsonl, EventRecord,
    KeyVocabulary, Schema};
use tasktrace::predictor::{train_lstm, Hyperparams, LstmModel};
use tasktrace::sequencer::make_windows_corpus;
use tasktrace::synthgen::{generate_benign, plant_anomalies, AnomalyMode, TaskGrammar};
use tasktrace::tasktree::{create_task_tree, partition_by_user, NodeKey, Trace};

#[derive(Parser)]
#[command(name = "tasktrace", version, about = "Process-tree anomaly detection over host event logs")]
struct Cli {
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Optional key = value defaults file; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw log into the canonical event stream plus key vocabulary.
    Ingest(IngestArgs),
    /// Build per-user task trees and dump them for inspection.
    Tree(TreeArgs),
    /// Extract per-task traces and run-collapse them into the extended alphabet.
    Encode(EncodeArgs),
    /// Train the next-key model on benign traces.
    Train(TrainArgs),
    /// Classify traces against a trained model.
    Detect(DetectArgs),
    /// Score verdicts over a range of candidate counts.
    Evaluate(EvaluateArgs),
    /// Generate a labelled synthetic event log.
    Synth(SynthArgs),
    /// Run ingest, encode, train, detect and evaluate end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Raw log file (CSV or JSONL, optionally gzipped).
    #[arg(long)]
    input: PathBuf,
    /// Input schema: optc or lanl.
    #[arg(long)]
    schema: Option<String>,
    /// Keep only events of this principal.
    #[arg(long)]
    user: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TreeArgs {
    /// Canonical event stream (from `ingest`).
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    events: PathBuf,
    /// Key vocabulary (from `ingest`).
    #[arg(long)]
    vocab: PathBuf,
    /// Keep only the first N events of each trace.
    #[arg(long)]
    truncate: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Encoded traces (from `encode`); malicious traces are excluded.
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Context window length.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Hidden units per recurrent layer.
    #[arg(long)]
    alpha: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    /// Continue training from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Top-t candidate count.
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Score every candidate count 1..=t.
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Benign tasks to generate.
    #[arg(long)]
    tasks: Option<usize>,
    /// Tasks to mutate and label malicious.
    #[arg(long)]
    anomalies: Option<usize>,
    /// foreign-key, shuffled or burst.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    schema: Option<String>,
    #[arg(long)]
    user: Option<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    truncate: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Defaults file: `key = value` lines, `#` comments.
fn load_config(path: Option<&Path>) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let Some(path) = path else { return Ok(map) };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key = value", no + 1))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn cfg_parse<T: std::str::FromStr>(cfg: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    match cfg.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| anyhow!("config key '{key}': bad value '{raw}'")),
    }
}

/// Flag value, else config value, else default.
fn resolve<T: std::str::FromStr + Clone>(
    flag: &Option<T>,
    cfg: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v.clone());
    }
    Ok(cfg_parse(cfg, key)?.unwrap_or(default))
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let threads = match (cli.threads, cfg_parse::<usize>(&cfg, "threads")?) {
        (Some(n), _) | (None, Some(n)) => n,
        (None, None) => 0,
    };
    if threads > 0 {
        // the worker pool is created lazily on first parallel call
        std::env::set_var("RAYON_NUM_THREADS", threads.to_string());
    }
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a, &cfg),
        Command::Tree(a) => cmd_tree(&a),
        Command::Encode(a) => cmd_encode(&a, &cfg),
        Command::Train(a) => cmd_train(&a, &cfg),
        Command::Detect(a) => cmd_detect(&a, &cfg),
        Command::Evaluate(a) => cmd_evaluate(&a, &cfg),
        Command::Synth(a) => cmd_synth(&a, &cfg),
        Command::Pipeline(a) => cmd_pipeline(&a, &cfg),
    }
}

/// Write `manifest.json`: command, parameters, their digest, and artifacts.
fn write_manifest(
    out: &Path,
    command: &str,
    params: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&str],
) -> Result<()> {
    let digest = Sha256::digest(serde_json::to_vec(&params)?);
    let manifest = serde_json::json!({
        "tool": "tasktrace",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "params": params,
        "params_sha256": format!("{digest:x}"),
        "inputs": inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "outputs": outputs,
    });
    fs::create_dir_all(out)?;
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn parse_schema(flag: &Option<String>, cfg: &BTreeMap<String, String>) -> Result<Schema> {
    resolve(flag, cfg, "schema", "optc".to_string())?
        .parse::<Schema>()
        .map_err(|e| anyhow!("{e}"))
}

fn ingest_stage(
    input: &Path,
    schema: Schema,
    user: Option<&str>,
    out: &Path,
) -> Result<(Vec<EventRecord>, KeyVocabulary)> {
    let (mut events, stats) = read_events(input, schema)?;
    if let Some(user) = user {
        events.retain(|e| e.principal.as_deref() == Some(user));
    }
    if events.is_empty() {
        bail!("no events left after parsing{}", user.map(|u| format!(" and filtering to user '{u}'")).unwrap_or_default());
    }
    // model the benign behaviour only: the vocabulary is built from
    // unlabelled-benign events so attack keys map to the unknown sentinel
    let vocab = KeyVocabulary::build(events.iter().filter(|e| !e.malicious))
        .map_err(|_| anyhow!("no benign events to build a vocabulary from"))?;
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("events.jsonl"))?);
    write_events_jsonl(&mut w, &events)?;
    w.flush()?;
    fs::write(out.join("vocab.json"), serde_json::to_string_pretty(&vocab.to_json())? + "\n")?;
    eprintln!(
        "ingest: {} events ({} malformed, {} unsupported skipped), {} distinct keys",
        events.len(),
        stats.malformed,
        stats.unsupported,
        vocab.n()
    );
    Ok((events, vocab))
}

fn cmd_ingest(a: &IngestArgs, cfg: &BTreeMap<String, String>) -> Result<()> {
    let schema = parse_schema(&a.schema, cfg)?;
    let user = match &a.user {
        Some(u) => Some(u.clone()),
        None => cfg.get("user").cloned(),
    };
    ingest_stage(&a.input, schema, user.as_deref(), &a.out)?;
    write_manifest(
        &a.out,
        "ingest",
        serde_json::json!({"schema": format!("{schema:?}"), "user": user}),
        &[&a.input],
        &["events.jsonl", "vocab.json"],
    )
}

fn load_vocab(path: &Path) -> Result<KeyVocabulary> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading vocabulary {}", path.display()))?;
    Ok(KeyVocabulary::from_json(&serde_json::from_str(&text)?)?)
}

fn cmd_tree(a: &TreeArgs) -> Result<()> {
    let (events, _) = read_events(&a.events, Schema::Optc)?;
    fs::create_dir_all(&a.out)?;
    let mut w = BufWriter::new(File::create(a.out.join("tree.jsonl"))?);
    let mut n_tasks = 0;
    let mut n_flagged = 0;
    for (user, user_events) in partition_by_user(&events) {
        let tree = create_task_tree(&user_events);
        writeln!(
            w,
            "{}",
            serde_json::json!({"user": user, "nodes": tree.len(), "tasks": tree.tasks().len(),
                "flagged": tree.flag_count()})
        )?;
        tree.write_jsonl(&mut w, &user_events)?;
        n_tasks += tree.tasks().len();
        n_flagged += tree.flag_count();
    }
    w.flush()?;
    eprintln!("tree: {n_tasks} tasks, {n_flagged} nodes flagged");
    write_manifest(&a.out, "tree", serde_json::json!({}), &[&a.events], &["tree.jsonl"])
}

/// Per-user trees -> per-task traces, in deterministic user/task order.
fn traces_of_events(
    events: &[EventRecord],
    vocab: &KeyVocabulary,
    truncate: Option<usize>,
) -> Result<Vec<Trace>> {
    let mut traces = Vec::new();
    for (_, user_events) in partition_by_user(events) {
        let tree = create_task_tree(&user_events);
        for task in tree.tasks() {
            traces.push(tree.trace_of(task, &user_events, vocab, truncate)?);
        }
    }
    Ok(traces)
}

fn write_encoded(path: &Path, traces: &[EncodedTrace]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in traces {
        writeln!(
            w,
            "{}",
            serde_json::json!({
                "task": [t.source.pid_part, t.source.id_part, t.source.rename_suffix],
                "malicious": t.malicious,
                "keys": t.keys,
            })
        )?;
    }
    w.flush()?;
    Ok(())
}

fn read_encoded(path: &Path) -> Result<Vec<EncodedTrace>> {
    let reader = BufReader::new(
        File::open(path).with_context(|| format!("opening traces {}", path.display()))?,
    );
    let mut traces = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)
            .with_context(|| format!("traces line {}", no + 1))?;
        let task = v
            .get("task")
            .and_then(|t| t.as_array())
            .filter(|t| t.len() == 3)
            .ok_or_else(|| anyhow!("traces line {}: bad 'task'", no + 1))?;
        let keys = v
            .get("keys")
            .and_then(|k| k.as_array())
            .ok_or_else(|| anyhow!("traces line {}: bad 'keys'", no + 1))?
            .iter()
            .map(|k| k.as_u64().map(|k| k as u32))
            .collect::<Option<Vec<u32>>>()
            .ok_or_else(|| anyhow!("traces line {}: non-integer key", no + 1))?;
        traces.push(EncodedTrace {
            source: NodeKey {
                pid_part: task[0].as_i64().unwrap_or_default(),
                id_part: task[1].as_str().unwrap_or_default().to_string(),
                rename_suffix: task[2].as_u64().unwrap_or_default() as u32,
            },
            keys,
            malicious: v.get("malicious").and_then(|m| m.as_bool()).unwrap_or(false),
        });
    }
    Ok(traces)
}

fn encode_stage(
    events: &[EventRecord],
    vocab: &KeyVocabulary,
    truncate: Option<usize>,
    out: &Path,
) -> Result<Vec<EncodedTrace>> {
    let traces = traces_of_events(events, vocab, truncate)?;
    let encoded = encode_traces(&traces, vocab.n())?;
    fs::create_dir_all(out)?;
    write_encoded(&out.join("traces.jsonl"), &encoded)?;
    let raw: usize = traces.iter().map(|t| t.keys.len()).sum();
    let enc: usize = encoded.iter().map(|t| t.keys.len()).sum();
    eprintln!(
        "encode: {} traces, {} keys collapsed to {} (alphabet {} -> {})",
        encoded.len(),
        raw,
        enc,
        vocab.n(),
        alphabet_size(vocab.n())
    );
    Ok(encoded)
}

fn cmd_encode(a: &EncodeArgs, cfg: &BTreeMap<String, String>) -> Result<()> {
    let truncate = match a.truncate {
        Some(n) => Some(n),
        None => cfg_parse(cfg, "truncate")?,
    };
    let vocab = load_vocab(&a.vocab)?;
    let (events, _) = read_events(&a.events, Schema::Optc)?;
    encode_stage(&events, &vocab, truncate, &a.out)?;
    write_manifest(
        &a.out,
        "encode",
        serde_json::json!({"truncate": truncate}),
        &[&a.events, &a.vocab],
        &["traces.jsonl"],
    )
}

fn hyperparams(
    g: u32,
    window: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
    alpha: Option<usize>,
    batch: Option<usize>,
    cfg: &BTreeMap<String, String>,
) -> Result<Hyperparams> {
    let mut hp = Hyperparams::reference(g, resolve(&seed, cfg, "seed", 0)?);
    hp.w = resolve(&window, cfg, "window", hp.w)?;
    hp.epochs = resolve(&epochs, cfg, "epochs", hp.epochs)?;
    hp.alpha = resolve(&alpha, cfg, "alpha", hp.alpha)?;
    hp.batch = resolve(&batch, cfg, "batch", hp.batch)?;
    Ok(hp)
}

fn train_stage(traces: &[EncodedTrace], hp: &Hyperparams, resume: Option<&Path>, out: &Path) -> Result<LstmModel> {
    let benign: Vec<EncodedTrace> =
        traces.iter().filter(|t| !t.malicious).cloned().collect();
    let windows = make_windows_corpus(&benign, hp.w);
    if windows.is_empty() {
        bail!("no training windows: every benign trace is shorter than {}", hp.w + 1);
    }
    let model = match resume {
        Some(path) => {
            let mut model = LstmModel::load(BufReader::new(File::open(path)?))?;
            model.fine_tune(&windows, hp)?;
            model
        }
        None => train_lstm(&windows, hp)?,
    };
    fs::create_dir_all(out)?;
    model.save(BufWriter::new(File::create(out.join("model.ckpt"))?))?;
    let mut log = BufWriter::new(File::create(out.join("training_log.csv"))?);
    writeln!(log, "epoch,mean_loss,validation_loss,lr")?;
    for s in &model.training_log {
        writeln!(
            log,
            "{},{},{},{}",
            s.epoch,
            s.mean_loss,
            s.validation_loss.map(|v| v.to_string()).unwrap_or_default(),
            s.lr
        )?;
    }
    log.flush()?;
    if let Some(s) = model.training_log.last() {
        eprintln!(
            "train: {} windows, {} epochs, final loss {:.4}",
            windows.len(),
            model.training_log.len(),
            s.mean_loss
        );
    }
    Ok(model)
}

fn cmd_train(a: &TrainArgs, cfg: &BTreeMap<String, String>) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let traces = read_encoded(&a.traces)?;
    let mut hp = hyperparams(
        alphabet_size(vocab.n()),
        a.window,
        a.epochs,
        a.seed,
        a.alpha,
        a.batch,
        cfg,
    )?;
    if let Some(lr0) = a.lr0 {
        hp.lr0 = lr0;
    }
    if let Some(decay) = a.decay {
        hp.decay = decay;
    }
    train_stage(&traces, &hp, a.resume.as_deref(), &a.out)?;
    write_manifest(
        &a.out,
        "train",
        serde_json::json!({"window": hp.w, "epochs": hp.epochs, "seed": hp.seed,
            "alpha": hp.alpha, "batch": hp.batch, "lr0": hp.lr0, "decay": hp.decay,
            "alphabet": hp.g, "resume": a.resume.as_ref().map(|p| p.display().to_string())}),
        &[&a.traces, &a.vocab],
        &["model.ckpt", "training_log.csv"],
    )
}

fn check_model_vocab(model: &LstmModel, vocab: &KeyVocabulary) -> Result<()> {
    if model.hp.g != alphabet_size(vocab.n()) {
        bail!(
            "model alphabet {} does not match vocabulary alphabet {}",
            model.hp.g,
            alphabet_size(vocab.n())
        );
    }
    Ok(())
}

fn cmd_detect(a: &DetectArgs, cfg: &BTreeMap<String, String>) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let model = LstmModel::load(BufReader::new(File::open(&a.model)?))?;
    check_model_vocab(&model, &vocab)?;
    let traces = read_encoded(&a.traces)?;
    let t = resolve(&a.candidates, cfg, "candidates", 1usize)?;
    let verdicts = classify_corpus(&model, &traces, model.hp.w, t, encoded_unknown(vocab.n()))?;
    fs::create_dir_all(&a.out)?;
    let mut w = BufWriter::new(File::create(a.out.join("verdicts.csv"))?);
    write_verdicts_csv(&mut w, &verdicts)?;
    w.flush()?;
    let flagged = verdicts.iter().filter(|v| v.malicious_predicted).count();
    let skipped = verdicts.iter().filter(|v| v.unevaluated).count();
    eprintln!("detect: {} traces, {flagged} flagged anomalous, {skipped} too short", verdicts.len());
    write_manifest(
        &a.out,
        "detect",
        serde_json::json!({"candidates": t, "window": model.hp.w}),
        &[&a.traces, &a.model, &a.vocab],
        &["verdicts.csv"],
    )
}

fn evaluate_stage(
    model: &LstmModel,
    traces: &[EncodedTrace],
    vocab: &KeyVocabulary,
    max_t: usize,
    out: &Path,
) -> Result<()> {
    let unknown = encoded_unknown(vocab.n());
    let windows = make_windows_corpus(traces, model.hp.w);
    let mut rows = Vec::new();
    for t in 1..=max_t {
        let verdicts = classify_corpus(model, traces, model.hp.w, t, unknown)?;
        rows.push(ReportRow { candidate: t, report: score_task_based(&verdicts)? });
        let evaluated: Vec<_> = verdicts.iter().filter(|v| !v.unevaluated).collect();
        let predictions: Vec<bool> = evaluated.iter().map(|v| v.malicious_predicted).collect();
        let labels: Vec<bool> = evaluated.iter().map(|v| v.true_label).collect();
        rows.push(ReportRow { candidate: t, report: score_trace_based(&predictions, &labels)? });
    }
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("metrics.csv"))?);
    write_reports_csv(&mut w, &rows)?;
    w.flush()?;
    print!("{}", format_reports_table(&rows));
    for t in 1..=max_t {
        if let Some(acc) = score_next_key(model, &windows, t, unknown)? {
            println!("next-key accuracy (top-{t}): {acc:.4}");
        }
    }
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, cfg: &BTreeMap<String, String>) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let model = LstmModel::load(BufReader::new(File::open(&a.model)?))?;
    check_model_vocab(&model, &vocab)?;
    let traces = read_encoded(&a.traces)?;
    let max_t = resolve(&a.candidates, cfg, "candidates", 5usize)?;
    evaluate_stage(&model, &traces, &vocab, max_t, &a.out)?;
    write_manifest(
        &a.out,
        "evaluate",
        serde_json::json!({"candidates": max_t, "window": model.hp.w}),
        &[&a.traces, &a.model, &a.vocab],
        &["metrics.csv"],
    )
}

fn cmd_synth(a: &SynthArgs, cfg: &BTreeMap<String, String>) -> Result<()> {
    let tasks = resolve(&a.tasks, cfg, "tasks", 100usize)?;
    let anomalies = resolve(&a.anomalies, cfg, "anomalies", 0usize)?;
    let seed = resolve(&a.seed, cfg, "seed", 0u64)?;
    let mode = resolve(&a.mode, cfg, "mode", "foreign-key".to_string())?
        .parse::<AnomalyMode>()?;
    let grammar = TaskGrammar::default_grammar();
    let mut events = generate_benign(&grammar, tasks, seed)?;
    if anomalies > 0 {
        events = plant_anomalies(&events, anomalies, mode, seed.wrapping_add(1))?;
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(&a.out)?);
    write_events_csv(&mut w, &events)?;
    w.flush()?;
    eprintln!(
        "synth: {} events over {tasks} tasks ({anomalies} mutated) -> {}",
        events.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_pipeline(a: &PipelineArgs, cfg: &BTreeMap<String, String>) -> Result<()> {
    let schema = parse_schema(&a.schema, cfg)?;
    let user = match &a.user {
        Some(u) => Some(u.clone()),
        None => cfg.get("user").cloned(),
    };
    let truncate = match a.truncate {
        Some(n) => Some(n),
        None => cfg_parse(cfg, "truncate")?,
    };
    let (events, vocab) = ingest_stage(&a.input, schema, user.as_deref(), &a.out)?;
    let traces = encode_stage(&events, &vocab, truncate, &a.out)?;
    let hp = hyperparams(
        alphabet_size(vocab.n()),
        a.window,
        a.epochs,
        a.seed,
        a.alpha,
        a.batch,
        cfg,
    )?;
    let model = train_stage(&traces, &hp, None, &a.out)?;
    let max_t = resolve(&a.candidates, cfg, "candidates", 5usize)?;
    let verdicts =
        classify_corpus(&model, &traces, hp.w, max_t, encoded_unknown(vocab.n()))?;
    let mut w = BufWriter::new(File::create(a.out.join("verdicts.csv"))?);
    write_verdicts_csv(&mut w, &verdicts)?;
    w.flush()?;
    evaluate_stage(&model, &traces, &vocab, max_t, &a.out)?;
    write_manifest(
        &a.out,
        "pipeline",
        serde_json::json!({"schema": format!("{schema:?}"), "user": user,
            "truncate": truncate, "window": hp.w, "epochs": hp.epochs, "seed": hp.seed,
            "alpha": hp.alpha, "batch": hp.batch, "candidates": max_t}),
        &[&a.input],
        &["events.jsonl", "vocab.json", "traces.jsonl", "model.ckpt",
            "training_log.csv", "verdicts.csv", "metrics.csv"],
    )
}
