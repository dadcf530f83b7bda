//! Transformer building blocks on the tape. All blocks are post-norm:
//! `x = LN(x + sublayer(x))`.

use crate::numerics::{NumError, Tape, Tensor, Var, MASK_VALUE};

use super::params::Bound;

/// Sinusoidal position table, `[len, d]`.
pub fn positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("sized")
}

pub fn linear(tape: &Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumError> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Multi-head attention from `query [B, Tq, d]` over `memory [B, Tk, d]`.
/// `mask` is `B × Tq × Tk`; true entries are excluded.
pub fn attention(
    tape: &Tape,
    p: &Bound<'_>,
    prefix: &str,
    query: Var,
    memory: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var, NumError> {
    let d = *tape.shape(query).last().expect("rank 3");
    let dh = d / heads;
    let q = tape.matmul(query, p.get(&format!("{prefix}.wq")))?;
    let k = tape.matmul(memory, p.get(&format!("{prefix}.wk")))?;
    let v = tape.matmul(memory, p.get(&format!("{prefix}.wv")))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 2, h * dh, dh)?;
        let kh = tape.slice(k, 2, h * dh, dh)?;
        let vh = tape.slice(v, 2, h * dh, dh)?;
        let mut scores = tape.scale(tape.matmul(qh, tape.transpose(kh)?)?, scale);
        if let Some(m) = mask {
            scores = tape.masked_fill(scores, m, MASK_VALUE)?;
        }
        let weights = tape.softmax(scores);
        outs.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat(&outs)? };
    linear(tape, joined, p.get(&format!("{prefix}.wo")), Some(p.get(&format!("{prefix}.bo"))))
}

pub fn feed_forward(tape: &Tape, p: &Bound<'_>, prefix: &str, x: Var) -> Result<Var, NumError> {
    let h = linear(tape, x, p.get(&format!("{prefix}.w1")), Some(p.get(&format!("{prefix}.b1"))))?;
    let h = tape.relu(h);
    linear(tape, h, p.get(&format!("{prefix}.w2")), Some(p.get(&format!("{prefix}.b2"))))
}

pub fn add_norm(tape: &Tape, p: &Bound<'_>, prefix: &str, x: Var, y: Var, eps: f64) -> Result<Var, NumError> {
    let s = tape.add(x, y)?;
    tape.layer_norm(s, p.get(&format!("{prefix}.g")), p.get(&format!("{prefix}.b")), eps)
}

/// `B × T × T` mask hiding future positions.
pub fn causal_mask(batch: usize, len: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(batch * len * len);
    for _ in 0..batch {
        for i in 0..len {
            m.extend((0..len).map(|j| j > i));
        }
    }
    m
}

/// `B × Tq × Tk` mask hiding padded keys.
pub fn key_padding_mask(padded: &[bool], batch: usize, tq: usize, tk: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(batch * tq * tk);
    for b in 0..batch {
        for _ in 0..tq {
            m.extend_from_slice(&padded[b * tk..(b + 1) * tk]);
        }
    }
    m
}
