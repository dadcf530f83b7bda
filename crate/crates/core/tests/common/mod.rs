//! Independent scalar re-implementations used as test oracles.
#![allow(dead_code)]

use std::sync::Arc;

use tamer_core::decoding::StepModel;
use tamer_core::latex::{Vocab, EOS_ID};
use tamer_core::model::{ModelConfig, RelationScoreMatrix, TamerModel};
use tamer_core::numerics::MASK_VALUE;

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Pairwise scores `vs · relu(x_i Wc + x_j Wp)` by explicit loops over rows,
/// columns and hidden units; `j >= i` and padding are masked.
pub fn scores_by_loops(x: &[f64], t: usize, d: usize, wc: &[f64], wp: &[f64], vs: &[f64], len: usize) -> Vec<f64> {
    let mut s = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            if j >= i || i >= len || j >= len {
                s[i * t + j] = MASK_VALUE;
                continue;
            }
            let mut total = 0.0;
            for k in 0..d {
                let mut c = 0.0;
                let mut p = 0.0;
                for m in 0..d {
                    c += x[i * d + m] * wc[m * d + k];
                    p += x[j * d + m] * wp[m * d + k];
                }
                total += vs[k] * relu(c + p);
            }
            s[i * t + j] = total;
        }
    }
    s
}

/// Four generatable symbols plus EOS: five choices per step.
pub fn tiny_model(seed: u64) -> TamerModel {
    let vocab = Arc::new(Vocab::new(["a", "b", "^", "{"]).unwrap());
    let config = ModelConfig { d_model: 8, heads: 2, d_ff: 16, decoder_layers: 1, seed, ..ModelConfig::toy(vocab.len()) };
    TamerModel::new(config, vocab).unwrap()
}

/// Best finished sequence under the per-step mean log-probability, by
/// exhaustive enumeration of every prefix shorter than `max_len`.
pub fn brute_force<M: StepModel>(m: &M, max_len: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack = vec![(Vec::<usize>::new(), 0.0f64)];
    while let Some((prefix, lp)) = stack.pop() {
        let next = m.next_log_probs(&prefix).unwrap();
        for (tok, &l) in next.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            if tok == EOS_ID {
                let score = (lp + l) / (prefix.len() + 1) as f64;
                let better = match &best {
                    None => true,
                    Some((seq, s)) => score > *s || (score == *s && prefix < *seq),
                };
                if better {
                    best = Some((prefix.clone(), score));
                }
            } else if prefix.len() + 1 < max_len {
                let mut p = prefix.clone();
                p.push(tok);
                stack.push((p, lp + l));
            }
        }
    }
    best.unwrap()
}

/// Mean over flagged rows of the largest log-softmax entry, by explicit loops.
#[allow(clippy::needless_range_loop)]
pub fn struct_score_by_loops(s: &RelationScoreMatrix, rows: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for i in 1..s.len() {
        if !rows[i] {
            continue;
        }
        let mut max = f64::NEG_INFINITY;
        for j in 0..i {
            max = max.max(s.get(i, j));
        }
        let mut z = 0.0;
        for j in 0..i {
            z += (s.get(i, j) - max).exp();
        }
        // the top entry's log-probability is -ln z
        total += -z.ln();
        n += 1;
    }
    if n == 0 { 0.0 } else { total / n as f64 }
}
