//! Corpus-level decoding and evaluation shared by the command line and the
//! acceptance tests.
//!
//! Every record's source noise comes from `noise_seed(seed, EVAL_EPOCH, k)`
//! where `k` is the record's position, so results do not depend on how the
//! work is split across threads.

use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusRecord;
use crate::decoding::{decode_and_rerank, BeamConfig, DecodeError, RerankResult};
use crate::evalkit::{delta_csv, evaluate, EvalError, EvalReport};
use crate::model::{Source, TamerModel};
use crate::train::{examples, noise_seed, teacher_forced_accuracy, TrainError, EVAL_EPOCH};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Data(#[from] TrainError),
    #[error("record {id}: {source}")]
    Decode { id: String, source: DecodeError },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// The noisy observation of record `index` at evaluation time.
pub fn eval_source(model: &TamerModel, ids: &[usize], seed: u64, index: usize) -> Source {
    Source::observe(ids, model.config.vocab_size, model.config.noise_sigma, noise_seed(seed, EVAL_EPOCH, index))
}

/// Decoding output of one record. `result` is `None` when the beam finished
/// no hypothesis; the prediction then counts as empty.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub id: String,
    pub result: Option<RerankResult>,
}

impl Decoded {
    pub fn selected(&self) -> &[usize] {
        self.result.as_ref().map_or(&[], |r| r.best().tokens.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeSettings {
    pub beam: BeamConfig,
    pub lambda_rerank: f64,
    pub seed: u64,
    /// Worker threads; results are merged in record order.
    pub threads: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings { beam: BeamConfig::default(), lambda_rerank: 1.0, seed: 7, threads: 1 }
    }
}

pub fn available_threads() -> usize {
    std::thread::available_parallelism().map_or(1, NonZeroUsize::get)
}

fn decode_one(model: &TamerModel, ids: &[usize], id: &str, k: usize, s: &DecodeSettings) -> Result<Decoded, WorkflowError> {
    let src = eval_source(model, ids, s.seed, k);
    match decode_and_rerank(model, &src, &s.beam, s.lambda_rerank) {
        Ok(r) => Ok(Decoded { id: id.to_string(), result: Some(r) }),
        Err(DecodeError::NoFinishedHypothesis(_)) => Ok(Decoded { id: id.to_string(), result: None }),
        Err(source) => Err(WorkflowError::Decode { id: id.to_string(), source }),
    }
}

/// Beam search and reranking over every record.
pub fn decode_records(
    model: &TamerModel,
    records: &[CorpusRecord],
    settings: &DecodeSettings,
) -> Result<Vec<Decoded>, WorkflowError> {
    let data = examples(records, &model.vocab)?;
    let threads = settings.threads.clamp(1, data.len().max(1));
    if threads == 1 {
        return data.iter().enumerate().map(|(k, e)| decode_one(model, &e.ids, &e.id, k, settings)).collect();
    }
    let chunk = data.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Decoded>, WorkflowError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(o, e)| decode_one(model, &e.ids, &e.id, c * chunk + o, settings))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Metrics of one decoding pass plus teacher-forced parent accuracy.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: EvalReport,
    pub decoded: Vec<Decoded>,
}

pub fn evaluate_model(
    model: &TamerModel,
    records: &[CorpusRecord],
    settings: &DecodeSettings,
) -> Result<EvalRun, WorkflowError> {
    let decoded = decode_records(model, records, settings)?;
    let preds: Vec<Vec<&str>> =
        decoded.iter().map(|d| d.selected().iter().map(|&i| model.vocab.token(i)).collect()).collect();
    let refs: Vec<Vec<&str>> = records.iter().map(|r| r.tokens.iter().map(String::as_str).collect()).collect();
    let mut report = evaluate(&preds, &refs)?;
    if model.has_tree_branch() {
        let data = examples(records, &model.vocab)?;
        let acc = teacher_forced_accuracy(model, &data, 32).map_err(TrainError::from)?;
        report.parent_accuracy = acc.parent_accuracy.map(|p| 100.0 * p);
    }
    Ok(EvalRun { report, decoded })
}

/// Tree scoring off (`λ = 0`) against on, with the per-bucket deltas.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub off: EvalRun,
    pub on: EvalRun,
    pub delta_csv: String,
}

pub fn compare(model: &TamerModel, records: &[CorpusRecord], settings: &DecodeSettings) -> Result<Comparison, WorkflowError> {
    let off = evaluate_model(model, records, &DecodeSettings { lambda_rerank: 0.0, ..*settings })?;
    let on = evaluate_model(model, records, settings)?;
    let delta_csv = delta_csv(&off.report, &on.report);
    Ok(Comparison { off, on, delta_csv })
}

/// Tokens of a decoded sequence.
pub fn token_names(model: &TamerModel, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| model.vocab.token(i).to_string()).collect()
}

