//! The tree-aware head: a bidirectional encoder over decoder features,
//! child/parent projections, and the pairwise relation scores.

use crate::numerics::{NumError, Tape, Var, MASK_VALUE};
use crate::treebank::{ParentAnnotation, TreeError};

use super::layers::{add_norm, attention, feed_forward, key_padding_mask};
use super::params::Bound;
use super::ModelConfig;

/// Re-encodes token features `[B, L, d]` with full (non-causal) attention
/// over the first `lengths[b]` positions of each row.
pub fn tam_encode(
    tape: &Tape,
    p: &Bound<'_>,
    config: &ModelConfig,
    x: Var,
    lengths: &[usize],
) -> Result<Var, NumError> {
    let shape = tape.shape(x);
    if shape.len() != 3 || shape[0] != lengths.len() {
        return Err(NumError::ShapeMismatch(format!("tam_encode input {shape:?}")));
    }
    let (b, l) = (shape[0], shape[1]);
    let padded: Vec<bool> = lengths.iter().flat_map(|&n| (0..l).map(move |j| j >= n)).collect();
    let mask = key_padding_mask(&padded, b, l, l);
    let mut h = x;
    for layer in 0..config.tam_encoder_layers {
        let pre = format!("tam.enc{layer}");
        let a = attention(tape, p, &format!("{pre}.attn"), h, h, config.heads, Some(&mask))?;
        h = add_norm(tape, p, &format!("{pre}.ln1"), h, a, config.layer_norm_eps)?;
        let f = feed_forward(tape, p, &format!("{pre}.ff"), h)?;
        h = add_norm(tape, p, &format!("{pre}.ln2"), h, f, config.layer_norm_eps)?;
    }
    Ok(h)
}

/// `B × L × L` mask: true where column `j` is not a parent candidate for row
/// `i` (`j >= i`, or either position is padding).
pub fn relation_mask(lengths: &[usize], l: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(lengths.len() * l * l);
    for &n in lengths {
        for i in 0..l {
            m.extend((0..l).map(|j| j >= i || i >= n || j >= n));
        }
    }
    m
}

/// Scores `S[b, i, j] = relu(x'_i W_c + x'_j W_p) · v_s` with the candidate
/// mask applied.
pub fn relation_scores(tape: &Tape, p: &Bound<'_>, x: Var, lengths: &[usize]) -> Result<Var, NumError> {
    let shape = tape.shape(x);
    if shape.len() != 3 || shape[0] != lengths.len() {
        return Err(NumError::ShapeMismatch(format!("relation_scores input {shape:?}")));
    }
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let child = tape.matmul(x, p.get("tam.wc"))?;
    let parent = tape.matmul(x, p.get("tam.wp"))?;
    let pairs = tape.relu(tape.pair_add(child, parent)?);
    let vs = tape.reshape(p.get("tam.vs"), &[d, 1])?;
    let scores = tape.reshape(tape.matmul(pairs, vs)?, &[b, l, l])?;
    tape.masked_fill(scores, &relation_mask(lengths, l), MASK_VALUE)
}

/// Relation scores of one sequence, detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationScoreMatrix {
    len: usize,
    /// Row-major `len × len`; excluded entries hold [`MASK_VALUE`].
    scores: Vec<f64>,
    /// True where `j` is a parent candidate for `i`.
    candidates: Vec<bool>,
}

impl RelationScoreMatrix {
    /// Wraps raw scores, masking every `j >= i`.
    pub fn new(len: usize, mut scores: Vec<f64>) -> RelationScoreMatrix {
        assert_eq!(scores.len(), len * len);
        let candidates: Vec<bool> = (0..len * len).map(|k| k % len < k / len).collect();
        for (s, &c) in scores.iter_mut().zip(&candidates) {
            if !c {
                *s = MASK_VALUE;
            }
        }
        RelationScoreMatrix { len, scores, candidates }
    }

    /// Sequence `b` of a masked `[B, L, L]` score tensor.
    pub fn from_batch(tape: &Tape, scores: Var, b: usize, len: usize) -> RelationScoreMatrix {
        tape.with_value(scores, |t| {
            let l = t.shape()[1];
            let mut out = Vec::with_capacity(len * len);
            for i in 0..len {
                let row = (b * l + i) * l;
                out.extend_from_slice(&t.data()[row..row + len]);
            }
            RelationScoreMatrix::new(len, out)
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.len + j]
    }

    pub fn is_candidate(&self, i: usize, j: usize) -> bool {
        self.candidates[i * self.len + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.len..(i + 1) * self.len]
    }

    /// Adds `c` to every candidate entry of row `i`.
    pub fn shift_row(&mut self, i: usize, c: f64) {
        for j in 0..i {
            self.scores[i * self.len + j] += c;
        }
    }

    /// Softmax of row `i` over its candidates (zeros elsewhere).
    pub fn row_probs(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        if i == 0 {
            return out;
        }
        let cand = &self.row(i)[..i];
        let max = cand.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = cand.iter().map(|v| (v - max).exp()).sum();
        for j in 0..i {
            out[j] = (cand[j] - max).exp() / sum;
        }
        out
    }

    /// Log-softmax of row `i` over its candidates; `None` for row 0.
    pub fn row_log_probs(&self, i: usize) -> Option<Vec<f64>> {
        if i == 0 || i >= self.len {
            return None;
        }
        let cand = &self.row(i)[..i];
        let lse = crate::numerics::log_sum_exp(cand);
        Some(cand.iter().map(|v| v - lse).collect())
    }
}

/// Highest-scoring candidate parent per row; ties go to the smaller column.
/// Rows that are not tree nodes, and row 0, get no parent.
pub fn predict_parents(s: &RelationScoreMatrix, nodes: &[bool]) -> Result<ParentAnnotation, TreeError> {
    if nodes.len() != s.len() {
        return Err(TreeError::InvalidAnnotation(format!(
            "{} node flags for a {}-row score matrix",
            nodes.len(),
            s.len()
        )));
    }
    let parents: Vec<Option<usize>> = (0..s.len())
        .map(|i| {
            if i == 0 || !nodes[i] {
                return None;
            }
            let mut best = 0;
            for j in 1..i {
                if s.get(i, j) > s.get(i, best) {
                    best = j;
                }
            }
            Some(best)
        })
        .collect();
    // A predicted parent is a node even if the token class says otherwise.
    let mut nodes = nodes.to_vec();
    for p in parents.iter().flatten() {
        nodes[*p] = true;
    }
    ParentAnnotation::from_parts(parents, nodes)
}
