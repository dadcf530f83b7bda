//! Joint training of the decoder and tree-aware head on annotated corpora.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusRecord;
use crate::latex::{LatexError, TokenSeq, Vocab};
use crate::model::{Batch, BatchItem, ModelConfig, ModelError, TamerModel};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::rng::{derive, pair_index, rng, Stream};
use crate::treebank::{ParentAnnotation, TreeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("record {id}: {source}")]
    Token { id: String, source: LatexError },
    #[error("record {id}: {source}")]
    Annotation { id: String, source: TreeError },
    #[error("record {id}: {len} tokens exceed max_len {max}")]
    TooLong { id: String, len: usize, max: usize },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning rate ramps linearly over this many steps.
    pub warmup_steps: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub lambda_struct: f64,
    /// Overrides `model.seed`; drives init, noise and batch order.
    pub seed: u64,
    /// Stop once held-out parent accuracy reaches this fraction.
    pub target_parent_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::toy(0),
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            warmup_steps: 100,
            clip_norm: 1.0,
            lambda_struct: 1.0,
            seed: 7,
            target_parent_accuracy: None,
        }
    }
}

/// A record resolved against a vocabulary.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub ids: Vec<usize>,
    pub parents: ParentAnnotation,
}

pub fn examples(records: &[CorpusRecord], vocab: &Arc<Vocab>) -> Result<Vec<Example>, TrainError> {
    records
        .iter()
        .map(|r| {
            let seq = TokenSeq::from_tokens(&r.tokens, Arc::clone(vocab))
                .map_err(|source| TrainError::Token { id: r.id.clone(), source })?;
            let parents = ParentAnnotation::from_signed(&r.parents)
                .map_err(|source| TrainError::Annotation { id: r.id.clone(), source })?;
            Ok(Example { id: r.id.clone(), ids: seq.ids().to_vec(), parents })
        })
        .collect()
}

/// Per-epoch training statistics; accuracies are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub seq_loss: f64,
    pub struct_loss: Option<f64>,
    pub token_accuracy: f64,
    pub parent_accuracy: Option<f64>,
    pub heldout: Option<Accuracy>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub token_accuracy: f64,
    pub parent_accuracy: Option<f64>,
}

#[derive(Debug, Default, Clone, Copy)]
struct Counts {
    tokens: usize,
    tokens_ok: usize,
    parents: usize,
    parents_ok: usize,
}

impl Counts {
    fn add(&mut self, o: Counts) {
        self.tokens += o.tokens;
        self.tokens_ok += o.tokens_ok;
        self.parents += o.parents;
        self.parents_ok += o.parents_ok;
    }

    fn accuracy(&self) -> Accuracy {
        Accuracy {
            token_accuracy: if self.tokens == 0 { 0.0 } else { self.tokens_ok as f64 / self.tokens as f64 },
            parent_accuracy: (self.parents > 0).then(|| self.parents_ok as f64 / self.parents as f64),
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Teacher-forced hits of one batch.
fn count_hits(tape: &Tape, batch: &Batch, logits: Var, scores: Option<Var>) -> Result<Counts, ModelError> {
    let mut c = Counts::default();
    let targets = batch.decoder_targets();
    tape.with_value(logits, |t| {
        let v = batch.vocab_size;
        for (k, tgt) in targets.iter().enumerate() {
            if let Some(y) = tgt {
                c.tokens += 1;
                c.tokens_ok += usize::from(argmax(&t.data()[k * v..(k + 1) * v]) == *y);
            }
        }
    });
    if let Some(s) = scores {
        let gold = crate::model::struct_targets(batch)?;
        let l = batch.len;
        tape.with_value(s, |t| {
            for (k, g) in gold.iter().enumerate() {
                if let Some(p) = g {
                    let i = k % l;
                    let row = &t.data()[k * l..k * l + i];
                    c.parents += 1;
                    c.parents_ok += usize::from(argmax(row) == *p);
                }
            }
        });
    }
    Ok(c)
}

/// Seed of record `index`'s source noise in `epoch`.
pub fn noise_seed(seed: u64, epoch: u64, index: usize) -> u64 {
    derive(seed, Stream::SourceNoise, pair_index(epoch, index as u64))
}

/// Noise epoch used for held-out evaluation.
pub const EVAL_EPOCH: u64 = u64::MAX;

fn make_batch(model: &TamerModel, data: &[Example], idx: &[usize], seed: u64, epoch: u64) -> Result<Batch, ModelError> {
    let items: Vec<BatchItem<'_>> = idx
        .iter()
        .map(|&k| BatchItem { ids: &data[k].ids, parents: Some(&data[k].parents), noise_seed: noise_seed(seed, epoch, k) })
        .collect();
    Batch::new(&items, model.config.vocab_size, model.config.noise_sigma)
}

/// Batches of similar length; membership and order vary with the epoch.
fn epoch_batches(data: &[Example], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut r = rng(seed, Stream::Shuffle, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut r);
    order.sort_by_key(|&k| data[k].ids.len());
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(&mut r);
    batches
}

fn in_length_order(data: &[Example], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&k| (data[k].ids.len(), k));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Teacher-forced token and parent accuracy on `data`.
pub fn teacher_forced_accuracy(model: &TamerModel, data: &[Example], batch_size: usize) -> Result<Accuracy, ModelError> {
    let mut c = Counts::default();
    for idx in in_length_order(data, batch_size.max(1)) {
        let batch = make_batch(model, data, &idx, model.config.seed, EVAL_EPOCH)?;
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let weight = model.has_tree_branch().then_some(1.0);
        let losses = model.losses(&tape, &p, &batch, weight)?;
        c.add(count_hits(&tape, &batch, losses.forward.logits, losses.scores)?);
    }
    Ok(c.accuracy())
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: TamerModel,
    adam: Adam,
    pub history: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: Arc<Vocab>) -> Result<Trainer, TrainError> {
        if config.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(config.lambda_struct.is_finite() && config.lambda_struct >= 0.0) {
            return Err(TrainError::Config("lambda_struct must be a non-negative number".into()));
        }
        let mut mc = config.model.clone();
        mc.seed = config.seed;
        let model = TamerModel::new(mc, vocab)?;
        Ok(Trainer { adam: Adam::new(config.adam), config, model, history: Vec::new() })
    }

    fn check(&self, data: &[Example]) -> Result<(), TrainError> {
        let max = self.model.config.max_len;
        match data.iter().find(|e| e.ids.len() > max) {
            Some(e) => Err(TrainError::TooLong { id: e.id.clone(), len: e.ids.len(), max }),
            None => Ok(()),
        }
    }

    /// One pass over `data`; returns the epoch's averaged statistics.
    pub fn epoch(&mut self, data: &[Example]) -> Result<EpochStats, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        self.check(data)?;
        let epoch = self.history.len() as u64;
        let seed = self.config.seed;
        let weight = self.config.lambda_struct;
        let base_lr = self.config.adam.lr;
        let (mut seq_sum, mut struct_sum, mut seen) = (0.0, 0.0, 0usize);
        let mut counts = Counts::default();
        let mut has_struct = false;
        for idx in epoch_batches(data, self.config.batch_size, seed, epoch) {
            let batch = make_batch(&self.model, data, &idx, seed, epoch)?;
            let tape = Tape::new();
            let p = self.model.params.bind(&tape);
            let losses = self.model.losses(&tape, &p, &batch, Some(weight))?;
            tape.backward(losses.total).map_err(ModelError::from)?;
            let mut grads = p.grads(&tape);
            counts.add(count_hits(&tape, &batch, losses.forward.logits, losses.scores)?);
            seq_sum += tape.value(losses.seq).item() * idx.len() as f64;
            if let Some(s) = losses.structure {
                has_struct = true;
                struct_sum += tape.value(s).item() * idx.len() as f64;
            }
            seen += idx.len();
            drop(p);
            clip(&mut grads, self.config.clip_norm);
            let step = self.adam.steps() + 1;
            self.adam.config.lr = if self.config.warmup_steps > 0 && step < self.config.warmup_steps {
                base_lr * step as f64 / self.config.warmup_steps as f64
            } else {
                base_lr
            };
            self.adam.step(self.model.params.tensors_mut(), &grads);
        }
        self.adam.config.lr = base_lr;
        let acc = counts.accuracy();
        let stats = EpochStats {
            epoch: epoch as usize + 1,
            seq_loss: seq_sum / seen as f64,
            struct_loss: has_struct.then(|| struct_sum / seen as f64),
            token_accuracy: acc.token_accuracy,
            parent_accuracy: acc.parent_accuracy,
            heldout: None,
        };
        self.history.push(stats.clone());
        Ok(stats)
    }

    /// Trains for `config.epochs` epochs, measuring `heldout` after each one
    /// and stopping early once the parent-accuracy target is met.
    pub fn fit(&mut self, train: &[Example], heldout: Option<&[Example]>) -> Result<&[EpochStats], TrainError> {
        if let Some(h) = heldout {
            self.check(h)?;
        }
        for _ in 0..self.config.epochs {
            self.epoch(train)?;
            if let Some(h) = heldout.filter(|h| !h.is_empty()) {
                let acc = teacher_forced_accuracy(&self.model, h, self.config.batch_size)?;
                self.history.last_mut().expect("just pushed").heldout = Some(acc);
                let reached = match (self.config.target_parent_accuracy, acc.parent_accuracy) {
                    (Some(t), Some(a)) => a >= t,
                    _ => false,
                };
                if reached {
                    break;
                }
            }
        }
        Ok(&self.history)
    }
}

pub const LOG_HEADER: &str = "epoch,l_seq,l_struct,token_acc,parent_acc";

/// Training log, one row per epoch; missing values are left empty.
pub fn log_csv(history: &[EpochStats]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for s in history {
        let _ = writeln!(
            out,
            "{},{:.6},{},{:.6},{}",
            s.epoch,
            s.seq_loss,
            opt(s.struct_loss),
            s.token_accuracy,
            opt(s.parent_accuracy)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, GrammarConfig};

    fn tiny() -> (TrainConfig, Arc<Vocab>, Vec<Example>) {
        let g = GrammarConfig { max_depth: 1, ..Default::default() };
        let recs = generate(&g, 12).unwrap();
        let vocab = Arc::new(g.vocab());
        let data = examples(&recs, &vocab).unwrap();
        let mut cfg = TrainConfig { epochs: 2, batch_size: 4, ..Default::default() };
        cfg.model.d_model = 16;
        cfg.model.d_ff = 32;
        cfg.model.heads = 2;
        cfg.model.decoder_layers = 1;
        (cfg, vocab, data)
    }

    #[test]
    fn batches_cover_everything_once() {
        let (_, _, data) = tiny();
        let mut all: Vec<usize> = epoch_batches(&data, 5, 7, 0).concat();
        all.sort();
        assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
        assert_ne!(epoch_batches(&data, 5, 7, 0), epoch_batches(&data, 5, 7, 1));
    }

    #[test]
    fn runs_and_logs() {
        let (cfg, vocab, data) = tiny();
        let mut t = Trainer::new(cfg, vocab).unwrap();
        let h = t.fit(&data, Some(&data)).unwrap().to_vec();
        assert_eq!(h.len(), 2);
        assert!(h.iter().all(|s| s.seq_loss.is_finite() && s.struct_loss.is_some() && s.heldout.is_some()));
        let csv = log_csv(&h);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with(LOG_HEADER));
    }

    #[test]
    fn rejects_bad_config() {
        let (cfg, vocab, data) = tiny();
        assert!(Trainer::new(TrainConfig { batch_size: 0, ..cfg.clone() }, Arc::clone(&vocab)).is_err());
        let mut short = cfg;
        short.model.max_len = 2;
        let mut t = Trainer::new(short, vocab).unwrap();
        assert!(matches!(t.epoch(&data), Err(TrainError::TooLong { .. })));
        assert!(matches!(t.epoch(&[]), Err(TrainError::EmptyCorpus)));
    }
}
