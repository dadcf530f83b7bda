//! `tamer`: tokenize, annotate, generate, train, decode and evaluate.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 check failure.

use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tamer_core::corpus::{corpus_vocab, generate, ingest_dir, read_jsonl, write_jsonl, CorpusRecord, GrammarConfig};
use tamer_core::decoding::BeamConfig;
use tamer_core::gradsuite::{model_checks, primitive_checks, CheckResult};
use tamer_core::latex::{split_raw, TokenSeq, Vocab};
use tamer_core::model::TamerModel;
use tamer_core::numerics::Checkpoint;
use tamer_core::train::{examples, log_csv, TrainConfig, Trainer};
use tamer_core::treebank::{complexity_of, treeify_tokens};
use tamer_core::workflow::{
    available_threads, compare, decode_records, evaluate_model, token_names, DecodeSettings, EvalRun,
};

#[derive(Parser)]
#[command(name = "tamer", version, about = "Tree-aware LaTeX decoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split an expression into vocabulary tokens.
    Tokenize(ExprArgs),
    /// Print the parent annotation of a space-separated expression.
    Treeify(ExprArgs),
    /// Print the structural complexity of an expression.
    Complexity(ExprArgs),
    /// Sample a synthetic corpus as JSONL.
    Gen(GenArgs),
    /// Convert a directory of InkML files to JSONL.
    Ingest(IngestArgs),
    /// Train a model on a JSONL corpus.
    Train(TrainArgs),
    /// Beam-search and rerank expressions with a trained model.
    Decode(DecodeArgs),
    /// Decode a corpus and write metric reports.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ExprArgs {
    /// Expression; read from stdin when omitted.
    expr: Option<String>,
    /// Input is unspaced LaTeX rather than space-separated tokens.
    #[arg(long)]
    raw: bool,
    /// Vocabulary file, one symbol per line (default: built-in CROHME set).
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    max_depth: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also emit bare `{ ... }` groups.
    #[arg(long)]
    bare_groups: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Held-out corpus for per-epoch accuracy.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_struct: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Train without the tree-aware branch.
    #[arg(long)]
    no_tam: bool,
    /// Stop once held-out parent accuracy reaches this fraction.
    #[arg(long, requires = "valid")]
    target_parent_accuracy: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BeamArgs {
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 40)]
    max_len: usize,
    /// Weight of the tree-structure score in reranking.
    #[arg(long, default_value_t = 1.0)]
    lambda_rerank: f64,
    /// Rank by summed log-probability instead of the per-step mean.
    #[arg(long)]
    no_length_norm: bool,
    /// Seed of the source noise.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

impl BeamArgs {
    fn settings(&self) -> DecodeSettings {
        DecodeSettings {
            beam: BeamConfig {
                width: self.beam,
                max_len: self.max_len,
                length_normalize: !self.no_length_norm,
                allow_unfinished: false,
            },
            lambda_rerank: self.lambda_rerank,
            seed: self.seed,
            threads: self.threads.unwrap_or_else(available_threads),
        }
    }
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["corpus", "expr"]))]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Space-separated expression; repeatable.
    #[arg(long)]
    expr: Vec<String>,
    #[command(flatten)]
    beam: BeamArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Also decode with tree scoring off and write per-bucket deltas.
    #[arg(long)]
    compare: bool,
    #[command(flatten)]
    beam: BeamArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

enum Failure {
    Data(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Tokenize(a) => tokenize(&a)?,
        Command::Treeify(a) => treeify(&a)?,
        Command::Complexity(a) => complexity(&a)?,
        Command::Gen(a) => gen(&a)?,
        Command::Ingest(a) => ingest(&a)?,
        Command::Train(a) => train(&a)?,
        Command::Decode(a) => decode(&a)?,
        Command::Eval(a) => eval(&a)?,
        Command::Gradcheck(a) => return gradcheck(&a),
    }
    Ok(())
}

fn load_vocab(path: Option<&Path>) -> Result<Arc<Vocab>> {
    Ok(Arc::new(match path {
        Some(p) => Vocab::load(p).with_context(|| format!("loading vocabulary {}", p.display()))?,
        None => Vocab::crohme(),
    }))
}

fn expr_text(a: &ExprArgs) -> Result<String> {
    match &a.expr {
        Some(e) => Ok(e.clone()),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
            Ok(s.trim().to_string())
        }
    }
}

fn expr_tokens(a: &ExprArgs) -> Result<Vec<String>> {
    let text = expr_text(a)?;
    Ok(if a.raw { split_raw(&text) } else { text.split_whitespace().map(String::from).collect() })
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn tokenize(a: &ExprArgs) -> Result<()> {
    let vocab = load_vocab(a.vocab.as_deref())?;
    let seq = TokenSeq::from_tokens(&expr_tokens(a)?, vocab)?;
    if a.json {
        print_json(&json!({ "tokens": seq.tokens(), "ids": seq.ids() }));
    } else {
        println!("{}", seq.tokens().join(" "));
    }
    Ok(())
}

fn treeify(a: &ExprArgs) -> Result<()> {
    let tokens = expr_tokens(a)?;
    if a.vocab.is_some() {
        TokenSeq::from_tokens(&tokens, load_vocab(a.vocab.as_deref())?)?;
    }
    let ann = treeify_tokens(&tokens)?;
    if a.json {
        print_json(&json!({ "tokens": tokens, "parents": ann.to_signed() }));
    } else {
        println!("{}", ann.to_tuple_string());
    }
    Ok(())
}

fn complexity(a: &ExprArgs) -> Result<()> {
    let tokens = expr_tokens(a)?;
    let c = complexity_of(&tokens)?;
    if a.json {
        print_json(&json!({ "tokens": tokens, "complexity": c }));
    } else {
        println!("{c}");
    }
    Ok(())
}

fn gen(a: &GenArgs) -> Result<()> {
    let cfg = GrammarConfig { seed: a.seed, max_depth: a.max_depth, bare_groups: a.bare_groups, ..Default::default() };
    let records = generate(&cfg, a.n)?;
    write_jsonl(&a.out, &records)?;
    summary(a.json, &a.out, &records);
    Ok(())
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let vocab = load_vocab(a.vocab.as_deref())?;
    let records = ingest_dir(&a.dir, &vocab)?;
    write_jsonl(&a.out, &records)?;
    summary(a.json, &a.out, &records);
    Ok(())
}

fn summary(as_json: bool, out: &Path, records: &[CorpusRecord]) {
    if as_json {
        print_json(&json!({ "out": out, "records": records.len() }));
    } else {
        println!("wrote {} records to {}", records.len(), out.display());
    }
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.lambda_struct {
        c.lambda_struct = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.adam.lr = v;
    }
    if let Some(v) = a.d_model {
        c.model.d_model = v;
        c.model.d_ff = 2 * v;
    }
    if let Some(v) = a.layers {
        c.model.decoder_layers = v;
    }
    if a.no_tam {
        c.model.tam = false;
    }
    if a.target_parent_accuracy.is_some() {
        c.target_parent_accuracy = a.target_parent_accuracy;
    }
    Ok(c)
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut config = train_config(a)?;
    let records = read_jsonl(&a.corpus)?;
    let valid = a.valid.as_deref().map(read_jsonl).transpose()?;
    let all: Vec<CorpusRecord> = records.iter().chain(valid.iter().flatten()).cloned().collect();
    let vocab = Arc::new(corpus_vocab(&all));
    // room for the longest sequence plus SOS/EOS
    let longest = all.iter().map(|r| r.tokens.len()).max().unwrap_or(0);
    config.model.max_len = config.model.max_len.max(longest + 2);
    let train_data = examples(&records, &vocab)?;
    let valid_data = valid.as_deref().map(|v| examples(v, &vocab)).transpose()?;
    let mut trainer = Trainer::new(config, Arc::clone(&vocab))?;
    let history = trainer.fit(&train_data, valid_data.as_deref())?.to_vec();
    trainer.model.to_checkpoint().save(&a.out)?;
    if let Some(log) = &a.log {
        fs::write(log, log_csv(&history)).with_context(|| format!("writing {}", log.display()))?;
    }
    if a.json {
        print_json(&json!({ "checkpoint": a.out, "history": history }));
    } else {
        print!("{}", log_csv(&history));
        println!("checkpoint: {}", a.out.display());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<TamerModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(TamerModel::from_checkpoint(&ck)?)
}

fn decode(a: &DecodeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let records = match &a.corpus {
        Some(p) => read_jsonl(p)?,
        None => a
            .expr
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let tokens = e.split_whitespace().map(String::from).collect();
                CorpusRecord::annotate(format!("expr-{k}"), tokens).map_err(|err| anyhow!("--expr {e:?}: {err}"))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let decoded = decode_records(&model, &records, &a.beam.settings())?;
    let items: Vec<serde_json::Value> = decoded
        .iter()
        .zip(&records)
        .map(|(d, r)| {
            let cands: Vec<serde_json::Value> = d
                .result
                .iter()
                .flat_map(|res| &res.candidates)
                .map(|c| {
                    json!({
                        "tokens": token_names(&model, &c.tokens).join(" "),
                        "s_seq": c.s_seq,
                        "s_struct": c.s_struct,
                        "composite": c.composite,
                    })
                })
                .collect();
            json!({
                "id": d.id,
                "reference": r.tokens.join(" "),
                "candidates": cands,
                "selected": d.result.as_ref().map(|res| res.selected),
                "prediction": token_names(&model, d.selected()).join(" "),
            })
        })
        .collect();
    if a.json {
        print_json(&serde_json::Value::Array(items));
        return Ok(());
    }
    for (d, item) in decoded.iter().zip(&items) {
        println!("{} reference: {}", d.id, item["reference"].as_str().unwrap_or(""));
        match &d.result {
            None => println!("  (no finished hypothesis)"),
            Some(res) => {
                for (k, c) in res.candidates.iter().enumerate() {
                    let mark = if k == res.selected { '*' } else { ' ' };
                    println!(
                        " {mark}{k} s_seq={:.4} s_struct={:.4} composite={:.4}  {}",
                        c.s_seq,
                        c.s_struct,
                        c.composite,
                        token_names(&model, &c.tokens).join(" ")
                    );
                }
            }
        }
        println!("  selected: {}", item["prediction"].as_str().unwrap_or(""));
    }
    Ok(())
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
}

fn write_report(dir: &Path, stem: &str, run: &EvalRun) -> Result<()> {
    write(dir, &format!("{stem}.json"), &run.report.to_json())?;
    write(dir, &format!("{stem}.csv"), &run.report.to_csv())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let records = read_jsonl(&a.corpus)?;
    let settings = a.beam.settings();
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    if a.compare {
        let c = compare(&model, &records, &settings)?;
        write_report(&a.out_dir, "report_off", &c.off)?;
        write_report(&a.out_dir, "report_on", &c.on)?;
        write(&a.out_dir, "delta.csv", &c.delta_csv)?;
        if a.json {
            print_json(&json!({ "off": c.off.report, "on": c.on.report }));
        } else {
            print!("{}", c.delta_csv);
        }
    } else {
        let run = evaluate_model(&model, &records, &settings)?;
        write_report(&a.out_dir, "report", &run)?;
        if a.json {
            println!("{}", run.report.to_json());
        } else {
            print!("{}", run.report.to_csv());
        }
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let mut results: Vec<CheckResult> = primitive_checks(a.seed).map_err(|e| Failure::Data(e.into()))?;
    results.extend(model_checks(a.seed).map_err(|e| Failure::Data(e.into()))?);
    if a.json {
        print_json(&json!(results));
    } else {
        for r in &results {
            let verdict = if r.passed { "ok" } else { "FAIL" };
            println!("{:<16} max_rel_err={:.3e} tol={:.0e} {verdict}", r.name, r.max_rel_error, r.tol);
        }
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}
