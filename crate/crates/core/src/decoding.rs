//! Beam search and tree-scored reranking of complete candidates.
//!
//! Candidates are ranked first by their length-normalized sequence score.
//! Each finished candidate is then run through the tree-aware head, and the
//! confidence of its best parent per row gives a structure score. The
//! reranked choice maximizes `S_seq + λ · S_struct`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latex::EOS_ID;
use crate::model::{CrossCache, Encoded, ModelError, RelationScoreMatrix, Source, StepState, TamerModel};
use crate::treebank::candidate_child_rows;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("beam width must be at least 1")]
    ZeroBeam,
    #[error("no hypothesis emitted EOS within {0} steps")]
    NoFinishedHypothesis(usize),
    #[error("no candidates to rerank")]
    EmptyCandidates,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that yields next-token log-probabilities for a prefix.
pub trait StepModel {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>, DecodeError>;

    fn eos(&self) -> usize {
        EOS_ID
    }
}

/// A model paired with the encoded input it decodes.
///
/// Step states are memoized by prefix, so a beam that extends a prefix it
/// scored on the previous step pays for one position only. States two or
/// more tokens shorter than the newest are dropped; a prefix whose parent
/// was dropped is rebuilt from SOS.
pub struct Conditioned<'a> {
    pub model: &'a TamerModel,
    pub encoded: Encoded,
    cross: CrossCache,
    states: RefCell<HashMap<Vec<usize>, Rc<StepState>>>,
}

impl<'a> Conditioned<'a> {
    pub fn new(model: &'a TamerModel, source: &Source) -> Result<Conditioned<'a>, DecodeError> {
        let encoded = model.encode(source)?;
        let cross = model.cross_cache(&encoded);
        let root = Rc::new(model.start_state(&cross));
        let states = RefCell::new(HashMap::from([(Vec::new(), root)]));
        Ok(Conditioned { model, encoded, cross, states })
    }

    fn state(&self, prefix: &[usize]) -> Rc<StepState> {
        if let Some(s) = self.states.borrow().get(prefix) {
            return Rc::clone(s);
        }
        let Some((&last, parent)) = prefix.split_last() else {
            return Rc::new(self.model.start_state(&self.cross));
        };
        let parent = self.state(parent);
        let s = Rc::new(self.model.advance(&self.cross, &parent, last));
        let mut states = self.states.borrow_mut();
        states.retain(|k, _| k.len() + 1 >= prefix.len());
        states.insert(prefix.to_vec(), Rc::clone(&s));
        s
    }
}

impl StepModel for Conditioned<'_> {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>, DecodeError> {
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.model.config.vocab_size) {
            return Err(ModelError::Batch(format!("token id {bad} outside the vocabulary")).into());
        }
        Ok(self.state(prefix).log_probs.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens, EOS excluded.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, EOS included.
    pub log_prob: f64,
    /// Number of scored steps (tokens plus EOS when finished).
    pub steps: usize,
    pub finished: bool,
}

impl Hypothesis {
    /// `log_prob / steps` when normalized, else `log_prob`.
    pub fn seq_score(&self, normalize: bool) -> f64 {
        if normalize {
            self.log_prob / self.steps.max(1) as f64
        } else {
            self.log_prob
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    pub length_normalize: bool,
    /// Return unfinished hypotheses instead of failing when none finish.
    pub allow_unfinished: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { width: 5, max_len: 40, length_normalize: true, allow_unfinished: false }
    }
}

fn by_score_then_tokens(a: &(f64, Hypothesis), b: &(f64, Hypothesis)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.tokens.cmp(&b.1.tokens))
}

/// Beam search over `max_len` steps (EOS counts as a step). Returns up to
/// `width` finished hypotheses, best sequence score first.
pub fn beam_search<M: StepModel + ?Sized>(model: &M, config: &BeamConfig) -> Result<Vec<Hypothesis>, DecodeError> {
    if config.width == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    let eos = model.eos();
    let mut alive = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, steps: 0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..config.max_len {
        let mut expanded: Vec<(f64, Hypothesis)> = Vec::new();
        for h in &alive {
            let lp = model.next_log_probs(&h.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut next = h.clone();
                next.log_prob += l;
                next.steps += 1;
                if tok == eos {
                    next.finished = true;
                } else {
                    next.tokens.push(tok);
                }
                // all live prefixes have equal length, so raw sums rank them
                expanded.push((next.log_prob, next));
            }
        }
        expanded.sort_by(by_score_then_tokens);
        expanded.truncate(config.width);
        alive.clear();
        for (_, h) in expanded {
            if h.finished {
                finished.push(h);
            } else {
                alive.push(h);
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    if finished.is_empty() {
        if config.allow_unfinished && !alive.is_empty() {
            finished = alive;
        } else {
            return Err(DecodeError::NoFinishedHypothesis(config.max_len));
        }
    }
    let mut ranked: Vec<(f64, Hypothesis)> =
        finished.into_iter().map(|h| (h.seq_score(config.length_normalize), h)).collect();
    ranked.sort_by(by_score_then_tokens);
    ranked.truncate(config.width);
    Ok(ranked.into_iter().map(|(_, h)| h).collect())
}

/// Mean over contributing rows of the best parent's log-probability.
/// `rows[i]` marks rows that take part; none gives 0.
pub fn struct_score_from_matrix(s: &RelationScoreMatrix, rows: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &use_row) in rows.iter().enumerate().take(s.len()) {
        if !use_row || i == 0 {
            continue;
        }
        if let Some(lp) = s.row_log_probs(i) {
            total += lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Produces a structure score for a complete candidate.
pub trait StructScorer {
    fn struct_score(&self, tokens: &[usize]) -> Result<f64, DecodeError>;
}

impl StructScorer for Conditioned<'_> {
    fn struct_score(&self, tokens: &[usize]) -> Result<f64, DecodeError> {
        struct_score(self.model, &self.encoded, tokens)
    }
}

/// Structure score of `tokens` under the model's tree-aware head. Rows are
/// the non-structural tokens after the first.
pub fn struct_score(model: &TamerModel, enc: &Encoded, tokens: &[usize]) -> Result<f64, DecodeError> {
    let names: Vec<&str> = tokens.iter().map(|&t| model.vocab.token(t)).collect();
    let rows = candidate_child_rows(&names);
    if !rows.iter().any(|&r| r) {
        return Ok(0.0);
    }
    let s = model.relation_matrix(enc, tokens)?;
    Ok(struct_score_from_matrix(&s, &rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub tokens: Vec<usize>,
    pub s_seq: f64,
    pub s_struct: f64,
    pub composite: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResult {
    pub candidates: Vec<ScoredCandidate>,
    pub selected: usize,
}

impl RerankResult {
    pub fn best(&self) -> &ScoredCandidate {
        &self.candidates[self.selected]
    }
}

/// Picks the candidate maximizing `s_seq + weight · s_struct`; ties go to
/// the earlier candidate.
pub fn rerank<S: StructScorer + ?Sized>(
    candidates: &[(Vec<usize>, f64)],
    scorer: &S,
    weight: f64,
) -> Result<RerankResult, DecodeError> {
    if candidates.is_empty() {
        return Err(DecodeError::EmptyCandidates);
    }
    let mut scored: Vec<ScoredCandidate> = Vec::with_capacity(candidates.len());
    let mut selected = 0;
    for (k, (tokens, s_seq)) in candidates.iter().enumerate() {
        let s_struct = scorer.struct_score(tokens)?;
        let composite = s_seq + weight * s_struct;
        if k > 0 && composite > scored[selected].composite {
            selected = k;
        }
        scored.push(ScoredCandidate { tokens: tokens.clone(), s_seq: *s_seq, s_struct, composite });
    }
    Ok(RerankResult { candidates: scored, selected })
}

/// Beam search followed by reranking, for one input.
pub fn decode_and_rerank(
    model: &TamerModel,
    source: &Source,
    beam: &BeamConfig,
    weight: f64,
) -> Result<RerankResult, DecodeError> {
    let cond = Conditioned::new(model, source)?;
    let hyps = beam_search(&cond, beam)?;
    let cands: Vec<(Vec<usize>, f64)> =
        hyps.iter().map(|h| (h.tokens.clone(), h.seq_score(beam.length_normalize))).collect();
    if model.has_tree_branch() {
        rerank(&cands, &cond, weight)
    } else {
        rerank(&cands, &ZeroScorer, weight)
    }
}

/// Scores every candidate 0; reranking then keeps beam order.
pub struct ZeroScorer;

impl StructScorer for ZeroScorer {
    fn struct_score(&self, _tokens: &[usize]) -> Result<f64, DecodeError> {
        Ok(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed per-step distributions keyed on prefix length.
    struct Table(Vec<Vec<f64>>);

    impl StepModel for Table {
        fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>, DecodeError> {
            Ok(self.0[prefix.len().min(self.0.len() - 1)].iter().map(|p| p.ln()).collect())
        }
    }

    #[test]
    fn certain_model_gives_zero_score() {
        // token ids: 0 sos, 1 eos, 2 pad, 3 a
        let m = Table(vec![
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0, 0.0],
        ]);
        let out = beam_search(&m, &BeamConfig { width: 3, max_len: 5, ..Default::default() }).unwrap();
        assert_eq!(out[0].tokens, [3, 3]);
        assert_eq!(out[0].seq_score(true), 0.0);
        assert!(out[0].finished);
    }

    #[test]
    fn no_eos_is_an_error_unless_allowed() {
        let m = Table(vec![vec![0.0, 0.0, 0.0, 1.0]]);
        let cfg = BeamConfig { width: 2, max_len: 3, ..Default::default() };
        assert_eq!(beam_search(&m, &cfg), Err(DecodeError::NoFinishedHypothesis(3)));
        let open = beam_search(&m, &BeamConfig { allow_unfinished: true, ..cfg }).unwrap();
        assert!(!open[0].finished);
        assert_eq!(open[0].tokens, [3, 3, 3]);
        assert_eq!(beam_search(&m, &BeamConfig { width: 0, ..cfg }), Err(DecodeError::ZeroBeam));
    }

    #[test]
    fn width_one_is_greedy() {
        let m = Table(vec![
            vec![0.0, 0.1, 0.0, 0.5, 0.4],
            vec![0.0, 0.2, 0.0, 0.3, 0.5],
            vec![0.0, 0.6, 0.0, 0.2, 0.2],
            vec![0.0, 1.0, 0.0, 0.0, 0.0],
        ]);
        let out = beam_search(&m, &BeamConfig { width: 1, max_len: 6, ..Default::default() }).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].tokens, [3, 4]);
        assert!((out[0].log_prob - (0.5f64.ln() + 0.5f64.ln() + 0.6f64.ln())).abs() < 1e-12);
    }

    struct Fixed(Vec<f64>);

    impl StructScorer for Fixed {
        fn struct_score(&self, tokens: &[usize]) -> Result<f64, DecodeError> {
            Ok(self.0[tokens[0]])
        }
    }

    #[test]
    fn rerank_rules() {
        let cands = vec![(vec![0], -0.5), (vec![1], -0.5)];
        let r = rerank(&cands, &Fixed(vec![-2.0, -1.0]), 1.0).unwrap();
        assert_eq!(r.selected, 1);
        assert_eq!(r.best().composite, -1.5);
        let r0 = rerank(&cands, &Fixed(vec![-2.0, -1.0]), 0.0).unwrap();
        assert_eq!(r0.selected, 0);
        let tie = rerank(&cands, &Fixed(vec![-1.0, -1.0]), 1.0).unwrap();
        assert_eq!(tie.selected, 0);
        assert_eq!(rerank(&[], &Fixed(vec![]), 1.0), Err(DecodeError::EmptyCandidates));
    }

    #[test]
    fn matrix_score_conventions() {
        let s = RelationScoreMatrix::new(2, vec![0.0, 0.0, 3.0, 0.0]);
        // only row 1, single candidate: log 1 = 0
        assert_eq!(struct_score_from_matrix(&s, &[false, true]), 0.0);
        assert_eq!(struct_score_from_matrix(&s, &[false, false]), 0.0);
        let s3 = RelationScoreMatrix::new(3, vec![0.0; 9]);
        let v = struct_score_from_matrix(&s3, &[false, true, true]);
        assert!((v - 0.5f64.ln() / 2.0).abs() < 1e-15);
    }
}
