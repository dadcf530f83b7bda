//! The standing gradient checks: every tape op on seeded inputs, then the
//! decoder alone, the tree encoder, and the full joint loss.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::latex::{TokenSeq, Vocab};
use crate::model::{tam_encode, Batch, BatchItem, ModelConfig, Params, TamerModel};
use crate::numerics::{gradcheck, GradReport, NumError, Tape, Tensor, Var, MASK_VALUE};
use crate::rng::{rng, Stream};
use crate::treebank::treeify_tokens;

pub const EPS: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl CheckResult {
    fn from_report(name: &str, r: &GradReport) -> CheckResult {
        CheckResult { name: name.to_string(), max_rel_error: r.max_rel_error(), tol: r.tol, passed: r.passed() }
    }
}

type Loss = Box<dyn Fn(&Tape, &[Var]) -> Result<Var, NumError>>;

struct Case {
    name: &'static str,
    f: Loss,
    params: Vec<Tensor>,
}

fn randn(seed: u64, shape: &[usize], salt: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed, Stream::Check, salt))
}

fn away_from_zero(seed: u64, shape: &[usize], salt: u64) -> Tensor {
    let mut r = rng(seed, Stream::Check, salt);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = r.random_range(0.2..1.5);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// `sum(y ⊙ w)` for a fixed random `w` shaped like `y`.
fn project(seed: u64, salt: u64) -> impl Fn(&Tape, Var) -> Result<Var, NumError> {
    move |tape, y| {
        let w = tape.constant(randn(seed, &tape.shape(y), 1000 + salt));
        Ok(tape.sum(tape.mul(y, w)?))
    }
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let r = |shape: &[usize], salt| randn(seed, shape, salt);
    let mask = vec![false, true, false, false, false, true];
    let mask2 = mask.clone();
    let targets = [Some(1), None, Some(3)];
    macro_rules! case {
        ($name:expr, $salt:expr, $params:expr, |$t:ident, $v:ident| $body:expr) => {{
            let pr = project(seed, $salt);
            Case {
                name: $name,
                f: Box::new(move |$t: &Tape, $v: &[Var]| {
                    let y = $body;
                    pr($t, y)
                }),
                params: $params,
            }
        }};
    }
    vec![
        case!("matmul", 1, vec![r(&[2, 3, 4], 1), r(&[4, 5], 2)], |t, v| t.matmul(v[0], v[1])?),
        case!("matmul_batched", 2, vec![r(&[2, 3, 4], 3), r(&[2, 4, 2], 4)], |t, v| t.matmul(v[0], v[1])?),
        case!("add", 3, vec![r(&[2, 3], 5), r(&[3], 6)], |t, v| t.add(v[0], v[1])?),
        case!("mul", 4, vec![r(&[2, 3], 5), r(&[3], 6)], |t, v| t.mul(v[0], v[1])?),
        case!("scale", 5, vec![r(&[2, 3], 5)], |t, v| t.scale(v[0], -2.5)),
        case!("relu", 6, vec![away_from_zero(seed, &[3, 4], 7)], |t, v| t.relu(v[0])),
        case!("softmax", 7, vec![r(&[2, 3, 5], 8)], |t, v| t.softmax(v[0])),
        case!("log_softmax", 8, vec![r(&[2, 3, 5], 8)], |t, v| t.log_softmax(v[0])),
        case!("layer_norm", 9, vec![r(&[3, 6], 9), r(&[6], 10), r(&[6], 11)], |t, v| t
            .layer_norm(v[0], v[1], v[2], 1e-5)?),
        case!("transpose", 11, vec![r(&[2, 3, 4], 15)], |t, v| t.transpose(v[0])?),
        case!("reshape", 12, vec![r(&[2, 3, 4], 15)], |t, v| t.reshape(v[0], &[6, 4])?),
        case!("slice", 13, vec![r(&[2, 3, 4], 15)], |t, v| t.slice(v[0], 1, 1, 2)?),
        case!("concat", 14, vec![r(&[2, 3], 16), r(&[2, 2], 17)], |t, v| t.concat(&[v[0], v[1]])?),
        case!("pair_add", 15, vec![r(&[1, 3, 2], 18), r(&[1, 4, 2], 19)], |t, v| t.pair_add(v[0], v[1])?),
        case!("embedding", 16, vec![r(&[3, 4], 20)], |t, v| t.embedding(v[0], &[2, 0, 2, 1], &[2, 2])?),
        case!("masked_fill", 17, vec![r(&[2, 3], 21)], |t, v| t.masked_fill(v[0], &mask, -7.0)?),
        case!("masked_softmax", 18, vec![r(&[2, 3], 22)], |t, v| t
            .softmax(t.masked_fill(v[0], &mask2, MASK_VALUE)?)),
        Case { name: "sum", f: Box::new(|t, v| Ok(t.sum(v[0]))), params: vec![r(&[2, 3, 4], 15)] },
        Case { name: "mean", f: Box::new(|t, v| Ok(t.mean(v[0]))), params: vec![r(&[2, 3, 4], 15)] },
        Case {
            name: "cross_entropy",
            f: Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
            params: vec![r(&[3, 4], 23)],
        },
    ]
}

/// Runs every primitive check at the primitive tolerance.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>, NumError> {
    primitive_cases(seed)
        .into_iter()
        .map(|c| {
            let r = gradcheck(&c.f, &c.params, EPS, PRIMITIVE_TOL)?;
            Ok(CheckResult::from_report(c.name, &r))
        })
        .collect()
}

fn small_vocab() -> Arc<Vocab> {
    Arc::new(Vocab::new(["a", "b", "c", "^", "{", "}", "+", "-", "1"]).expect("distinct"))
}

/// `d = 8`, one layer each, over a 12-token vocabulary.
pub fn small_config(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig { d_model: 8, heads: 2, d_ff: 16, decoder_layers: 1, tam_encoder_layers: 1, seed, ..ModelConfig::toy(vocab_size) }
}

fn model_loss_check(name: &str, tokens: &[&str], tam: bool, seed: u64) -> Result<CheckResult, NumError> {
    let vocab = small_vocab();
    let seq = TokenSeq::from_tokens(tokens, Arc::clone(&vocab)).map_err(|e| NumError::ShapeMismatch(e.to_string()))?;
    let ann = treeify_tokens(tokens).map_err(|e| NumError::ShapeMismatch(e.to_string()))?;
    let config = ModelConfig { tam, ..small_config(vocab.len(), seed) };
    let model = TamerModel::new(config, Arc::clone(&vocab)).map_err(|e| NumError::ShapeMismatch(e.to_string()))?;
    let item = BatchItem { ids: seq.ids(), parents: tam.then_some(&ann), noise_seed: 5 };
    let batch = Batch::new(&[item], vocab.len(), 0.1).map_err(|e| NumError::ShapeMismatch(e.to_string()))?;
    let weight = tam.then_some(0.7);
    let r = gradcheck(
        |t, v| {
            let bound = model.params.bind_vars(v.to_vec());
            let l = model.losses(t, &bound, &batch, weight).map_err(|e| NumError::ShapeMismatch(e.to_string()))?;
            Ok(l.total)
        },
        model.params.tensors(),
        EPS,
        MODEL_TOL,
    )?;
    Ok(CheckResult::from_report(name, &r))
}

fn tree_encoder_check(seed: u64) -> Result<CheckResult, NumError> {
    let vocab = small_vocab();
    let config = small_config(vocab.len(), seed);
    let model = TamerModel::new(config.clone(), vocab).map_err(|e| NumError::ShapeMismatch(e.to_string()))?;
    let names: Vec<String> = model.params.names().iter().filter(|n| n.starts_with("tam.enc")).cloned().collect();
    let mut params: Vec<Tensor> = names.iter().filter_map(|n| model.params.get(n).cloned()).collect();
    params.push(randn(seed, &[2, 4, 8], 30));
    let k = names.len();
    let sub = Params::from_parts(names, params[..k].to_vec());
    let pr = project(seed, 19);
    let r = gradcheck(
        |t, v| {
            let bound = sub.bind_vars(v[..k].to_vec());
            let out = tam_encode(t, &bound, &config, v[k], &[4, 3])?;
            pr(t, out)
        },
        &params,
        EPS,
        MODEL_TOL,
    )?;
    Ok(CheckResult::from_report("tam_encode", &r))
}

/// Decoder-only loss, tree encoder, and the joint loss at `B = 1, T = 6,
/// d = 8, V = 12`.
pub fn model_checks(seed: u64) -> Result<Vec<CheckResult>, NumError> {
    Ok(vec![
        model_loss_check("toy_forward", &["a", "+", "b", "1"], false, seed)?,
        tree_encoder_check(seed)?,
        model_loss_check("joint_loss", &["a", "^", "b", "+", "c", "1"], true, seed)?,
    ])
}
