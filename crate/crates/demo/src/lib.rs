//! Browser bindings: expression trees, relation-score heatmaps from a seeded
//! model, and corpus metrics. Every export takes plain strings and returns
//! JSON text; errors come back as `{"error": "..."}`.

use std::sync::Arc;

use serde_json::{json, Value};
use tamer_core::decoding::struct_score_from_matrix;
use tamer_core::evalkit::evaluate;
use tamer_core::latex::{split_raw, TokenSeq, Vocab};
use tamer_core::model::{ModelConfig, Source, TamerModel};
use tamer_core::treebank::{build_tree, candidate_child_rows, structural_complexity, treeify_tokens};
use wasm_bindgen::prelude::wasm_bindgen;

fn tokens_of(text: &str, raw: bool) -> Vec<String> {
    if raw {
        split_raw(text)
    } else {
        text.split_whitespace().map(String::from).collect()
    }
}

fn respond(v: Result<Value, String>) -> String {
    match v {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

fn tree_json(tokens: &[String]) -> Result<Value, String> {
    let ann = treeify_tokens(tokens).map_err(|e| e.to_string())?;
    let tree = build_tree(&ann).map_err(|e| e.to_string())?;
    Ok(json!({
        "tokens": tokens,
        "parents": ann.to_signed(),
        "tuples": ann.to_tuple_string(),
        "nodes": ann.node_mask(),
        "complexity": structural_complexity(&tree),
    }))
}

/// Parent annotation, tuple text and structural complexity of an expression.
#[wasm_bindgen]
pub fn treeify(expr: &str, raw: bool) -> String {
    respond(tree_json(&tokens_of(expr, raw)))
}

fn heatmap_json(expr: &str, raw: bool, seed: u64) -> Result<Value, String> {
    let vocab = Arc::new(Vocab::crohme());
    let tokens = tokens_of(expr, raw);
    let seq = TokenSeq::from_tokens(&tokens, Arc::clone(&vocab)).map_err(|e| e.to_string())?;
    let config = ModelConfig { d_model: 16, heads: 2, d_ff: 32, decoder_layers: 1, seed, ..ModelConfig::toy(vocab.len()) };
    let model = TamerModel::new(config, vocab).map_err(|e| e.to_string())?;
    let src = Source::observe(seq.ids(), model.config.vocab_size, model.config.noise_sigma, seed);
    let enc = model.encode(&src).map_err(|e| e.to_string())?;
    let s = model.relation_matrix(&enc, seq.ids()).map_err(|e| e.to_string())?;
    let rows = candidate_child_rows(&tokens);
    let probs: Vec<Vec<f64>> = (0..s.len()).map(|i| s.row_probs(i)).collect();
    let argmax: Vec<Option<usize>> = probs
        .iter()
        .enumerate()
        .map(|(i, row)| (i > 0).then(|| (0..i).fold(0, |b, j| if row[j] > row[b] { j } else { b })))
        .collect();
    Ok(json!({
        "tokens": tokens,
        "probs": probs,
        "argmax": argmax,
        "rows": rows,
        "s_struct": struct_score_from_matrix(&s, &rows),
        "gold": treeify_tokens(&tokens).ok().map(|a| a.to_signed()),
    }))
}

/// Row-softmaxed relation scores of a freshly initialized model with the
/// given seed, over the built-in symbol set.
#[wasm_bindgen]
pub fn relation_heatmap(expr: &str, raw: bool, seed: u32) -> String {
    respond(heatmap_json(expr, raw, u64::from(seed)))
}

fn eval_json(preds: &str, refs: &str) -> Result<Value, String> {
    let lines = |s: &str| -> Vec<Vec<String>> {
        s.lines().filter(|l| !l.trim().is_empty()).map(|l| tokens_of(l, false)).collect()
    };
    let report = evaluate(&lines(preds), &lines(refs)).map_err(|e| e.to_string())?;
    let mut v = serde_json::to_value(&report).map_err(|e| e.to_string())?;
    v["csv"] = Value::String(report.to_csv());
    Ok(v)
}

/// Metrics of line-aligned predictions against references.
#[wasm_bindgen]
pub fn evaluate_lines(preds: &str, refs: &str) -> String {
    respond(eval_json(preds, refs))
}
