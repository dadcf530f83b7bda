//! The toy encoder-decoder, the tree-aware head and the joint loss.
//!
//! The source side stands in for an image encoder: each sequence is observed
//! as a noisy one-hot matrix, projected to `d_model` and given sinusoidal
//! positions. The decoder is a stack of post-norm blocks with causal
//! self-attention, cross-attention to that memory, and a feed-forward layer.
//! The tree-aware head reads the decoder features of the token positions
//! (the SOS row is dropped, so row `i` is token `i`).

mod batch;
mod config;
mod incremental;
pub mod layers;
mod params;
mod tam;

use std::sync::Arc;

use thiserror::Error;

use crate::latex::{Vocab, EOS_ID, PAD_ID, SOS_ID};
use crate::numerics::{Checkpoint, NumError, Tape, Tensor, Var};
use crate::treebank::ParentAnnotation;

pub use batch::{source_rows, Batch, BatchItem, ParentTarget};
pub use config::ModelConfig;
pub use incremental::{CrossCache, StepState};
pub use params::{Bound, Params};
pub use tam::{predict_parents, relation_mask, relation_scores, tam_encode, RelationScoreMatrix};

use layers::{add_norm, attention, causal_mask, feed_forward, key_padding_mask, linear, positions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("no contributing positions in loss")]
    EmptyLoss,
    #[error("parent target {target} of row {row} is outside the candidate mask")]
    TargetOutOfMask { row: usize, target: usize },
    #[error("model does not have a tree-aware branch")]
    NoTreeBranch,
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("checkpoint metadata: {0}")]
    Checkpoint(String),
}

/// Decoder outputs: token features `[B, T+1, d]` and vocabulary logits
/// `[B, T+1, V]`.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub features: Var,
    pub logits: Var,
}

/// Observations of one sequence, `rows × vocab_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub rows: usize,
    pub vocab_size: usize,
    pub data: Vec<f64>,
}

impl Source {
    /// Noisy one-hot view of `ids` followed by EOS.
    pub fn observe(ids: &[usize], vocab_size: usize, sigma: f64, noise_seed: u64) -> Source {
        Source { rows: ids.len() + 1, vocab_size, data: source_rows(ids, vocab_size, sigma, noise_seed) }
    }
}

/// Projects sources `[B, S, V]` into memory `[B, S, d]`.
pub fn encode_source(tape: &Tape, p: &Bound<'_>, config: &ModelConfig, source: Tensor) -> Result<Var, NumError> {
    let s = source.shape()[1];
    let src = tape.constant(source);
    let mem = linear(tape, src, p.get("src.w"), Some(p.get("src.b")))?;
    tape.add(mem, tape.constant(positions(s, config.d_model)))
}

/// Runs the decoder stack over `inputs` (`B × T`, starting with SOS).
pub fn decode(
    tape: &Tape,
    p: &Bound<'_>,
    config: &ModelConfig,
    inputs: &[usize],
    batch: usize,
    memory: Var,
    source_padding: &[bool],
) -> Result<Forward, NumError> {
    let t = inputs.len() / batch;
    let s = tape.shape(memory)[1];
    let emb = tape.embedding(p.get("embed"), inputs, &[batch, t])?;
    let mut h = tape.add(emb, tape.constant(positions(t, config.d_model)))?;
    let causal = causal_mask(batch, t);
    let cross_mask = key_padding_mask(source_padding, batch, t, s);
    let eps = config.layer_norm_eps;
    for l in 0..config.decoder_layers {
        let a = attention(tape, p, &format!("dec{l}.self"), h, h, config.heads, Some(&causal))?;
        h = add_norm(tape, p, &format!("dec{l}.ln1"), h, a, eps)?;
        let c = attention(tape, p, &format!("dec{l}.cross"), h, memory, config.heads, Some(&cross_mask))?;
        h = add_norm(tape, p, &format!("dec{l}.ln2"), h, c, eps)?;
        let f = feed_forward(tape, p, &format!("dec{l}.ff"), h)?;
        h = add_norm(tape, p, &format!("dec{l}.ln3"), h, f, eps)?;
    }
    let logits = linear(tape, h, p.get("out.w"), Some(p.get("out.b")))?;
    Ok(Forward { features: h, logits })
}

/// Teacher-forced forward pass over a batch.
pub fn toy_forward(tape: &Tape, p: &Bound<'_>, config: &ModelConfig, batch: &Batch) -> Result<Forward, NumError> {
    let source = Tensor::new(vec![batch.size, batch.len + 1, batch.vocab_size], batch.source.clone())?;
    let memory = encode_source(tape, p, config, source)?;
    decode(tape, p, config, &batch.decoder_inputs(), batch.size, memory, &batch.source_padding())
}

/// Decoder features of the token positions, `[B, T, d]`.
pub fn token_features(tape: &Tape, forward: &Forward, len: usize) -> Result<Var, NumError> {
    tape.slice(forward.features, 1, 1, len)
}

/// Mean next-token cross-entropy over non-padded targets.
pub fn seq_loss(tape: &Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var, ModelError> {
    tape.cross_entropy(logits, targets).map_err(|e| match e {
        NumError::EmptyLoss => ModelError::EmptyLoss,
        e => e.into(),
    })
}

/// Row targets for the relation scores of a batch. Rows without a parent
/// and padded rows are ignored.
pub fn struct_targets(batch: &Batch) -> Result<Vec<Option<usize>>, ModelError> {
    let mut out = Vec::with_capacity(batch.size * batch.len);
    for b in 0..batch.size {
        let n = batch.lengths[b];
        for i in 0..batch.len {
            out.push(match batch.parents[b * batch.len + i] {
                ParentTarget::Parent(p) if p < i && i < n => Some(p),
                ParentTarget::Parent(p) => {
                    return Err(ModelError::TargetOutOfMask { row: i, target: p });
                }
                _ => None,
            });
        }
    }
    Ok(out)
}

/// Mean cross-entropy of the parent targets under the row-wise softmax of
/// the masked scores `[B, T, T]`.
pub fn struct_loss(tape: &Tape, scores: Var, targets: &[Option<usize>]) -> Result<Var, ModelError> {
    seq_loss(tape, scores, targets)
}

/// `seq + weight · structure`.
pub fn total_loss(tape: &Tape, seq: Var, structure: Option<Var>, weight: f64) -> Result<Var, ModelError> {
    match structure {
        Some(s) => Ok(tape.add(seq, tape.scale(s, weight))?),
        None => Ok(seq),
    }
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub seq: Var,
    pub structure: Option<Var>,
    pub total: Var,
    pub forward: Forward,
    pub scores: Option<Var>,
}

/// Cached source memory for decoding one input.
#[derive(Debug, Clone)]
pub struct Encoded {
    memory: Tensor,
}

/// Decoder plus tree-aware head with its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TamerModel {
    pub config: ModelConfig,
    pub vocab: Arc<Vocab>,
    pub params: Params,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: Vec<String>,
}

impl TamerModel {
    pub fn new(mut config: ModelConfig, vocab: Arc<Vocab>) -> Result<TamerModel, ModelError> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let params = Params::init(&config);
        Ok(TamerModel { config, vocab, params })
    }

    pub fn has_tree_branch(&self) -> bool {
        self.config.tam
    }

    /// Teacher-forced losses. The structure term is skipped when the model
    /// has no tree-aware branch, `structure_weight` is `None`, or no row of
    /// the batch has a parent.
    pub fn losses(
        &self,
        tape: &Tape,
        p: &Bound<'_>,
        batch: &Batch,
        structure_weight: Option<f64>,
    ) -> Result<Losses, ModelError> {
        let forward = toy_forward(tape, p, &self.config, batch)?;
        let seq = seq_loss(tape, forward.logits, &batch.decoder_targets())?;
        let (structure, scores) = match structure_weight {
            Some(_) if self.config.tam && struct_targets(batch)?.iter().any(Option::is_some) => {
                let targets = struct_targets(batch)?;
                let x = token_features(tape, &forward, batch.len)?;
                let xe = tam_encode(tape, p, &self.config, x, &batch.lengths)?;
                let s = relation_scores(tape, p, xe, &batch.lengths)?;
                (Some(struct_loss(tape, s, &targets)?), Some(s))
            }
            _ => (None, None),
        };
        let total = total_loss(tape, seq, structure, structure_weight.unwrap_or(0.0))?;
        Ok(Losses { seq, structure, total, forward, scores })
    }

    /// Relation scores for every sequence of a teacher-forced batch.
    pub fn batch_relations(&self, batch: &Batch) -> Result<Vec<RelationScoreMatrix>, ModelError> {
        if !self.config.tam {
            return Err(ModelError::NoTreeBranch);
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let forward = toy_forward(&tape, &p, &self.config, batch)?;
        let x = token_features(&tape, &forward, batch.len)?;
        let xe = tam_encode(&tape, &p, &self.config, x, &batch.lengths)?;
        let s = relation_scores(&tape, &p, xe, &batch.lengths)?;
        Ok((0..batch.size).map(|b| RelationScoreMatrix::from_batch(&tape, s, b, batch.lengths[b])).collect())
    }

    pub fn encode(&self, source: &Source) -> Result<Encoded, ModelError> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let src = Tensor::new(vec![1, source.rows, source.vocab_size], source.data.clone())?;
        let memory = encode_source(&tape, &p, &self.config, src)?;
        Ok(Encoded { memory: tape.value(memory) })
    }

    fn decode_prefix(&self, tape: &Tape, p: &Bound<'_>, enc: &Encoded, prefix: &[usize]) -> Result<Forward, NumError> {
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(SOS_ID);
        inputs.extend_from_slice(prefix);
        let memory = tape.constant(enc.memory.clone());
        let padding = vec![false; enc.memory.shape()[1]];
        decode(tape, p, &self.config, &inputs, 1, memory, &padding)
    }

    /// Log-probabilities of the token after `prefix`. SOS and PAD are never
    /// generated and get `-inf`.
    pub fn next_log_probs(&self, enc: &Encoded, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let forward = self.decode_prefix(&tape, &p, enc, prefix)?;
        let logp = tape.log_softmax(forward.logits);
        let v = self.config.vocab_size;
        let mut out = tape.with_value(logp, |t| t.data()[prefix.len() * v..].to_vec());
        out[SOS_ID] = f64::NEG_INFINITY;
        out[PAD_ID] = f64::NEG_INFINITY;
        Ok(out)
    }

    /// Relation scores of a complete candidate, teacher-forced against the
    /// encoded source.
    pub fn relation_matrix(&self, enc: &Encoded, ids: &[usize]) -> Result<RelationScoreMatrix, ModelError> {
        if !self.config.tam {
            return Err(ModelError::NoTreeBranch);
        }
        if ids.is_empty() {
            return Ok(RelationScoreMatrix::new(0, Vec::new()));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let forward = self.decode_prefix(&tape, &p, enc, ids)?;
        let x = token_features(&tape, &forward, ids.len())?;
        let xe = tam_encode(&tape, &p, &self.config, x, &[ids.len()])?;
        let s = relation_scores(&tape, &p, xe, &[ids.len()])?;
        Ok(RelationScoreMatrix::from_batch(&tape, s, 0, ids.len()))
    }

    /// Predicted annotation of a token sequence.
    pub fn parents_for(&self, enc: &Encoded, ids: &[usize], nodes: &[bool]) -> Result<ParentAnnotation, ModelError> {
        let s = self.relation_matrix(enc, ids)?;
        predict_parents(&s, nodes).map_err(|e| ModelError::Batch(e.to_string()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = Meta { config: self.config.clone(), vocab: self.vocab.symbols()[crate::latex::RESERVED..].to_vec() };
        Checkpoint {
            meta: serde_json::to_string(&meta).expect("serializable"),
            arrays: self
                .params
                .names()
                .iter()
                .cloned()
                .zip(self.params.tensors().iter().cloned())
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<TamerModel, ModelError> {
        let meta: Meta = serde_json::from_str(&ck.meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let vocab = Vocab::new(meta.vocab).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut model = TamerModel::new(meta.config, Arc::new(vocab))?;
        let (names, tensors): (Vec<String>, Vec<Tensor>) = ck.arrays.iter().cloned().unzip();
        let loaded = Params::from_parts(names, tensors);
        if !loaded.same_layout(&model.params) {
            return Err(ModelError::Checkpoint("parameter layout does not match config".into()));
        }
        model.params = loaded;
        Ok(model)
    }

    /// EOS id, for decoders.
    pub fn eos(&self) -> usize {
        EOS_ID
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TamerModel {
        let vocab = Arc::new(Vocab::new(["a", "b", "c", "+", "{", "}", "^"]).unwrap());
        let config = ModelConfig { d_model: 8, heads: 2, d_ff: 16, ..ModelConfig::toy(0) };
        TamerModel::new(config, vocab).unwrap()
    }

    #[test]
    fn forward_shapes() {
        let m = tiny();
        let items = [BatchItem { ids: &[3], parents: None, noise_seed: 0 }];
        let batch = Batch::new(&items, m.config.vocab_size, 0.1).unwrap();
        let tape = Tape::new();
        let p = m.params.bind(&tape);
        let f = toy_forward(&tape, &p, &m.config, &batch).unwrap();
        assert_eq!(tape.shape(f.features), [1, 2, 8]);
        assert_eq!(tape.shape(f.logits), [1, 2, 10]);
        let x = token_features(&tape, &f, 1).unwrap();
        assert_eq!(tape.shape(x), [1, 1, 8]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny();
        let ck = m.to_checkpoint();
        let back = TamerModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn next_log_probs_normalized_without_reserved() {
        let m = tiny();
        let enc = m.encode(&Source::observe(&[3, 4], m.config.vocab_size, 0.0, 0)).unwrap();
        let lp = m.next_log_probs(&enc, &[3]).unwrap();
        assert_eq!(lp[SOS_ID], f64::NEG_INFINITY);
        assert_eq!(lp[PAD_ID], f64::NEG_INFINITY);
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!(total < 1.0 && total > 0.0);
    }

    #[test]
    fn targets_out_of_mask_abort() {
        let m = tiny();
        let ann = ParentAnnotation::from_signed(&[-1, 0]).unwrap();
        let items = [BatchItem { ids: &[3, 4], parents: Some(&ann), noise_seed: 0 }];
        let mut batch = Batch::new(&items, m.config.vocab_size, 0.0).unwrap();
        assert_eq!(struct_targets(&batch).unwrap(), [None, Some(0)]);
        batch.parents[1] = ParentTarget::Parent(1);
        assert_eq!(struct_targets(&batch), Err(ModelError::TargetOutOfMask { row: 1, target: 1 }));
    }
}
