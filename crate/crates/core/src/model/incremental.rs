//! Tape-free decoding one token at a time. Self-attention keys and values of
//! earlier positions are cached, so extending a prefix by one token costs one
//! position's worth of work instead of a pass over the whole prefix.
//!
//! Computes the same function as `decode`; agreement is checked in the tests
//! to rounding error.

use crate::latex::{PAD_ID, SOS_ID};
use crate::numerics::Tensor;

use super::layers::positions;
use super::{Encoded, ModelConfig, TamerModel};

/// Keys and values of the encoded source for every layer's cross-attention.
#[derive(Debug, Clone)]
pub struct CrossCache {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    rows: usize,
}

/// Decoder state after consuming SOS and a prefix.
#[derive(Debug, Clone)]
pub struct StepState {
    /// Per layer, self-attention keys and values, `len × d` each.
    kv: Vec<(Vec<f64>, Vec<f64>)>,
    len: usize,
    /// Log-probabilities of the next token.
    pub log_probs: Vec<f64>,
}

impl StepState {
    /// Consumed positions, SOS included.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn w<'a>(model: &'a TamerModel, name: &str) -> &'a [f64] {
    model.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).data()
}

/// `x [n, k] · m [k, c]`.
fn matmul(x: &[f64], m: &[f64], k: usize, c: usize) -> Vec<f64> {
    let n = x.len() / k;
    let mut out = vec![0.0; n * c];
    for r in 0..n {
        let o = &mut out[r * c..(r + 1) * c];
        for (i, &xv) in x[r * k..(r + 1) * k].iter().enumerate() {
            for (ov, &mv) in o.iter_mut().zip(&m[i * c..(i + 1) * c]) {
                *ov += xv * mv;
            }
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for (v, bv) in x.iter_mut().zip(b.iter().cycle()) {
        *v += bv;
    }
}

fn layer_norm(x: &mut [f64], g: &[f64], b: &[f64], eps: f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let is = 1.0 / (var + eps).sqrt();
    for (j, v) in x.iter_mut().enumerate() {
        *v = (*v - mean) * is * g[j] + b[j];
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// One query row attending over `rows` cached keys and values.
fn attend(model: &TamerModel, prefix: &str, q: &[f64], keys: &[f64], values: &[f64], rows: usize) -> Vec<f64> {
    let cfg = &model.config;
    let (d, heads) = (cfg.d_model, cfg.heads);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut joined = vec![0.0; d];
    let mut scores = vec![0.0; rows];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (r, s) in scores.iter_mut().enumerate() {
            let kh = &keys[r * d + h * dh..r * d + (h + 1) * dh];
            *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_in_place(&mut scores);
        for (r, &a) in scores.iter().enumerate() {
            let vh = &values[r * d + h * dh..r * d + (h + 1) * dh];
            for (o, v) in joined[h * dh..(h + 1) * dh].iter_mut().zip(vh) {
                *o += a * v;
            }
        }
    }
    let mut out = matmul(&joined, w(model, &format!("{prefix}.wo")), d, d);
    add_bias(&mut out, w(model, &format!("{prefix}.bo")));
    out
}

fn residual_norm(model: &TamerModel, prefix: &str, x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
    layer_norm(x, w(model, &format!("{prefix}.g")), w(model, &format!("{prefix}.b")), model.config.layer_norm_eps);
}

impl TamerModel {
    pub fn cross_cache(&self, enc: &Encoded) -> CrossCache {
        let d = self.config.d_model;
        let mem = enc.memory.data();
        let layers = (0..self.config.decoder_layers)
            .map(|l| {
                let k = matmul(mem, w(self, &format!("dec{l}.cross.wk")), d, d);
                let v = matmul(mem, w(self, &format!("dec{l}.cross.wv")), d, d);
                (k, v)
            })
            .collect();
        CrossCache { layers, rows: mem.len() / d }
    }

    /// State after SOS alone.
    pub fn start_state(&self, cross: &CrossCache) -> StepState {
        let empty = StepState {
            kv: vec![(Vec::new(), Vec::new()); self.config.decoder_layers],
            len: 0,
            log_probs: Vec::new(),
        };
        self.advance(cross, &empty, SOS_ID)
    }

    /// Consumes `token` at the next position.
    pub fn advance(&self, cross: &CrossCache, state: &StepState, token: usize) -> StepState {
        let cfg: &ModelConfig = &self.config;
        let d = cfg.d_model;
        let pos = state.len;
        let mut x = w(self, "embed")[token * d..(token + 1) * d].to_vec();
        let pe: Tensor = positions(pos + 1, d);
        for (a, b) in x.iter_mut().zip(&pe.data()[pos * d..]) {
            *a += b;
        }
        let mut kv = state.kv.clone();
        for (l, (keys, values)) in kv.iter_mut().enumerate() {
            let p = format!("dec{l}.self");
            let q = matmul(&x, w(self, &format!("{p}.wq")), d, d);
            keys.extend(matmul(&x, w(self, &format!("{p}.wk")), d, d));
            values.extend(matmul(&x, w(self, &format!("{p}.wv")), d, d));
            let a = attend(self, &p, &q, keys, values, pos + 1);
            residual_norm(self, &format!("dec{l}.ln1"), &mut x, &a);
            let p = format!("dec{l}.cross");
            let q = matmul(&x, w(self, &format!("{p}.wq")), d, d);
            let (ck, cv) = &cross.layers[l];
            let c = attend(self, &p, &q, ck, cv, cross.rows);
            residual_norm(self, &format!("dec{l}.ln2"), &mut x, &c);
            let p = format!("dec{l}.ff");
            let mut h = matmul(&x, w(self, &format!("{p}.w1")), d, cfg.d_ff);
            add_bias(&mut h, w(self, &format!("{p}.b1")));
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            let mut f = matmul(&h, w(self, &format!("{p}.w2")), cfg.d_ff, d);
            add_bias(&mut f, w(self, &format!("{p}.b2")));
            residual_norm(self, &format!("dec{l}.ln3"), &mut x, &f);
        }
        let mut logits = matmul(&x, w(self, "out.w"), d, cfg.vocab_size);
        add_bias(&mut logits, w(self, "out.b"));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mut log_probs: Vec<f64> = logits.iter().map(|v| v - lse).collect();
        log_probs[SOS_ID] = f64::NEG_INFINITY;
        log_probs[PAD_ID] = f64::NEG_INFINITY;
        StepState { kv, len: pos + 1, log_probs }
    }
}
