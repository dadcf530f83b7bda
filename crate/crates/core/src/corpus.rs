//! Annotated expression corpora: a seeded synthetic grammar, InkML label
//! and trace ingestion, and JSONL persistence.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latex::{tokenize_raw, LatexError, Vocab};
use crate::rng::{rng, Stream};
use crate::treebank::{build_tree, structural_complexity, treeify_tokens, TreeError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("{path}: malformed XML: {message}")]
    MalformedXml { path: String, message: String },
    #[error("{0}: no truth annotation")]
    MissingTruthAnnotation(String),
    #[error("{path}: {source}")]
    UnknownToken { path: String, source: LatexError },
    #[error("{path}: {source}")]
    Tree { path: String, source: TreeError },
    #[error("invalid grammar: {0}")]
    Grammar(String),
}

fn io_err(path: &Path, e: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// One expression with its derived annotation. `parents` uses -1 for "no
/// parent".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub parents: Vec<i64>,
    pub complexity: usize,
    /// Strokes, each a list of points; a point holds every channel the
    /// source recorded (x, y, and possibly time).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traces: Option<Vec<Vec<Vec<f64>>>>,
    /// Untokenized ground truth as found in the source file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

impl CorpusRecord {
    /// Derives annotation and complexity from the tokens.
    pub fn annotate(id: String, tokens: Vec<String>) -> Result<CorpusRecord, TreeError> {
        let ann = treeify_tokens(&tokens)?;
        let complexity = structural_complexity(&build_tree(&ann)?);
        Ok(CorpusRecord { id, tokens, parents: ann.to_signed(), complexity, traces: None, raw: None })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstructWeights {
    pub script: f64,
    pub frac: f64,
    pub sqrt: f64,
    pub sum: f64,
}

impl Default for ConstructWeights {
    fn default() -> Self {
        ConstructWeights { script: 2.0, frac: 1.0, sqrt: 1.0, sum: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub seed: u64,
    /// Nesting bound; 0 gives plain chains.
    pub max_depth: usize,
    /// Most operands in the top-level chain.
    pub max_baseline: usize,
    /// Most operands in a nested chain.
    pub max_inner: usize,
    /// Chance that an operand becomes a construct when depth allows.
    pub construct_prob: f64,
    pub weights: ConstructWeights,
    pub operands: Vec<String>,
    pub operators: Vec<String>,
    /// Lets operands be bare `{ … }` groups.
    pub bare_groups: bool,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|t| t.to_string()).collect();
        GrammarConfig {
            seed: 7,
            max_depth: 2,
            max_baseline: 3,
            max_inner: 2,
            construct_prob: 0.4,
            weights: ConstructWeights::default(),
            operands: s(&["a", "b", "c", "x", "y", "n", "1", "2", "3"]),
            operators: s(&["+", "-", "="]),
            bare_groups: false,
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let w = &self.weights;
        let all = [w.script, w.frac, w.sqrt, w.sum];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || all.iter().sum::<f64>() <= 0.0 {
            return Err(CorpusError::Grammar("construct weights must be non-negative and not all zero".into()));
        }
        if self.max_baseline == 0 || self.max_inner == 0 {
            return Err(CorpusError::Grammar("chain bounds must be at least 1".into()));
        }
        if self.operands.is_empty() || self.operators.is_empty() {
            return Err(CorpusError::Grammar("need at least one operand and one operator".into()));
        }
        if !(0.0..=1.0).contains(&self.construct_prob) {
            return Err(CorpusError::Grammar("construct_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Every token the grammar can emit.
    pub fn alphabet(&self) -> Vec<String> {
        let mut out: Vec<String> = self.operands.iter().chain(&self.operators).cloned().collect();
        out.extend(["^", "_", "{", "}", "\\frac", "\\sqrt", "\\sum"].map(String::from));
        out
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_corpus([self.alphabet().as_slice()])
    }
}

struct Sampler<'a, R> {
    config: &'a GrammarConfig,
    rng: R,
    out: Vec<String>,
}

impl<R: Rng> Sampler<'_, R> {
    fn pick<'s>(&mut self, from: &'s [String]) -> &'s str {
        &from[self.rng.random_range(0..from.len())]
    }

    fn push(&mut self, t: &str) {
        self.out.push(t.to_string());
    }

    fn group(&mut self, depth: usize) {
        self.push("{");
        self.chain(depth);
        self.push("}");
    }

    fn chain(&mut self, depth: usize) {
        let most = if depth == 0 { self.config.max_baseline } else { self.config.max_inner };
        let n = self.rng.random_range(1..=most);
        for k in 0..n {
            if k > 0 {
                let op = self.pick(&self.config.operators).to_string();
                self.push(&op);
            }
            self.operand(depth);
        }
    }

    fn symbol(&mut self) {
        let s = self.pick(&self.config.operands).to_string();
        self.push(&s);
    }

    fn operand(&mut self, depth: usize) {
        let c = self.config;
        if depth >= c.max_depth || !self.rng.random_bool(c.construct_prob) {
            self.symbol();
            return;
        }
        if c.bare_groups && self.rng.random_bool(0.2) {
            self.group(depth + 1);
            return;
        }
        let w = &c.weights;
        let mut roll = self.rng.random::<f64>() * (w.script + w.frac + w.sqrt + w.sum);
        roll -= w.script;
        if roll < 0.0 {
            self.symbol();
            match self.rng.random_range(0..3) {
                0 => {
                    self.push("^");
                    self.group(depth + 1);
                }
                1 => {
                    self.push("_");
                    self.group(depth + 1);
                }
                _ => {
                    self.push("_");
                    self.group(depth + 1);
                    self.push("^");
                    self.group(depth + 1);
                }
            }
            return;
        }
        roll -= w.frac;
        if roll < 0.0 {
            self.push("\\frac");
            self.group(depth + 1);
            self.group(depth + 1);
            return;
        }
        roll -= w.sqrt;
        if roll < 0.0 {
            self.push("\\sqrt");
            self.group(depth + 1);
            return;
        }
        self.push("\\sum");
        self.push("_");
        self.group(depth + 1);
        self.push("^");
        self.group(depth + 1);
        self.symbol();
    }
}

/// Samples record `index` of the corpus defined by `config`.
pub fn generate_one(config: &GrammarConfig, index: usize) -> CorpusRecord {
    let mut s = Sampler { config, rng: rng(config.seed, Stream::Corpus, index as u64), out: Vec::new() };
    s.chain(0);
    let id = format!("syn-{}-{index:06}", config.seed);
    CorpusRecord::annotate(id, s.out).expect("grammar output always parses")
}

/// `n` records; record `k` depends only on the config and `k`.
pub fn generate(config: &GrammarConfig, n: usize) -> Result<Vec<CorpusRecord>, CorpusError> {
    config.validate()?;
    Ok((0..n).map(|k| generate_one(config, k)).collect())
}

fn local<'a>(node: roxmltree::Node<'a, '_>) -> &'a str {
    node.tag_name().name()
}

fn parse_trace(text: &str) -> Vec<Vec<f64>> {
    text.split(',')
        .map(|p| p.split_whitespace().filter_map(|v| v.parse::<f64>().ok()).collect::<Vec<f64>>())
        .filter(|p| !p.is_empty())
        .collect()
}

/// Strips `$…$` delimiters from a truth string.
fn strip_math(raw: &str) -> &str {
    let t = raw.trim();
    let t = t.strip_prefix("$$").and_then(|s| s.strip_suffix("$$")).unwrap_or(t);
    let t = t.strip_prefix('$').and_then(|s| s.strip_suffix('$')).unwrap_or(t);
    t.trim()
}

/// Reads InkML text. The truth annotation is the root-level
/// `annotation type="truth"`; traces are every `trace` element in document
/// order. Element names match by local name, so namespace prefixes are
/// ignored.
pub fn parse_inkml(id: &str, text: &str, vocab: &Arc<Vocab>) -> Result<CorpusRecord, CorpusError> {
    let doc = roxmltree::Document::parse(text)
        .map_err(|e| CorpusError::MalformedXml { path: id.to_string(), message: e.to_string() })?;
    let root = doc.root_element();
    let truth = root
        .children()
        .filter(|n| n.is_element() && local(*n) == "annotation")
        .find(|n| n.attribute("type") == Some("truth"))
        .ok_or_else(|| CorpusError::MissingTruthAnnotation(id.to_string()))?;
    let raw = truth.text().unwrap_or("").to_string();
    let seq = tokenize_raw(strip_math(&raw), vocab)
        .map_err(|source| CorpusError::UnknownToken { path: id.to_string(), source })?;
    let traces: Vec<Vec<Vec<f64>>> = root
        .descendants()
        .filter(|n| n.is_element() && local(*n) == "trace")
        .map(|n| parse_trace(n.text().unwrap_or("")))
        .collect();
    let mut rec = CorpusRecord::annotate(id.to_string(), seq.owned_tokens())
        .map_err(|source| CorpusError::Tree { path: id.to_string(), source })?;
    rec.traces = Some(traces);
    rec.raw = Some(raw);
    Ok(rec)
}

pub fn ingest_inkml(path: &Path, vocab: &Arc<Vocab>) -> Result<CorpusRecord, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_inkml(&id, &text, vocab)
}

/// Every `*.inkml` file directly under `dir`, in file-name order.
pub fn ingest_dir(dir: &Path, vocab: &Arc<Vocab>) -> Result<Vec<CorpusRecord>, CorpusError> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "inkml"))
        .collect();
    paths.sort();
    paths.iter().map(|p| ingest_inkml(p, vocab)).collect()
}

pub fn to_jsonl(records: &[CorpusRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(records).as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

/// Parses JSONL text; blank lines are skipped. Line numbers are 1-based.
pub fn parse_jsonl(text: &str) -> Result<Vec<CorpusRecord>, CorpusError> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| CorpusError::Schema { line: k + 1, message };
        let rec: CorpusRecord = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        if rec.parents.len() != rec.tokens.len() {
            return Err(schema(format!("{} parents for {} tokens", rec.parents.len(), rec.tokens.len())));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRecord>, CorpusError> {
    parse_jsonl(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)
}

/// Vocabulary over the tokens of `records`.
pub fn corpus_vocab(records: &[CorpusRecord]) -> Vocab {
    Vocab::from_corpus(records.iter().map(|r| r.tokens.as_slice()))
}
