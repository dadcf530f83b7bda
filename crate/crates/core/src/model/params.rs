use std::collections::HashMap;

use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{self, Stream};

use super::ModelConfig;

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy)]
enum Init {
    /// Gaussian with std `1/sqrt(fan_in)`.
    Fan(usize),
    Normal(f64),
    Ones,
    Zeros,
}

/// Named model parameters in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

fn attention_specs(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    for w in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.{w}"), vec![d, d], Init::Fan(d)));
    }
    out.push((format!("{prefix}.bo"), vec![d], Init::Zeros));
}

fn norm_specs(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{prefix}.g"), vec![d], Init::Ones));
    out.push((format!("{prefix}.b"), vec![d], Init::Zeros));
}

fn ffn_specs(prefix: &str, d: usize, ff: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{prefix}.w1"), vec![d, ff], Init::Fan(d)));
    out.push((format!("{prefix}.b1"), vec![ff], Init::Zeros));
    out.push((format!("{prefix}.w2"), vec![ff, d], Init::Fan(ff)));
    out.push((format!("{prefix}.b2"), vec![d], Init::Zeros));
}

fn specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, v, ff) = (c.d_model, c.vocab_size, c.d_ff);
    let mut s = vec![
        ("src.w".to_string(), vec![v, d], Init::Normal(1.0)),
        ("src.b".to_string(), vec![d], Init::Zeros),
        ("embed".to_string(), vec![v, d], Init::Normal(1.0)),
    ];
    for l in 0..c.decoder_layers {
        attention_specs(&format!("dec{l}.self"), d, &mut s);
        norm_specs(&format!("dec{l}.ln1"), d, &mut s);
        attention_specs(&format!("dec{l}.cross"), d, &mut s);
        norm_specs(&format!("dec{l}.ln2"), d, &mut s);
        ffn_specs(&format!("dec{l}.ff"), d, ff, &mut s);
        norm_specs(&format!("dec{l}.ln3"), d, &mut s);
    }
    s.push(("out.w".into(), vec![d, v], Init::Fan(d)));
    s.push(("out.b".into(), vec![v], Init::Zeros));
    if c.tam {
        for l in 0..c.tam_encoder_layers {
            attention_specs(&format!("tam.enc{l}.attn"), d, &mut s);
            norm_specs(&format!("tam.enc{l}.ln1"), d, &mut s);
            ffn_specs(&format!("tam.enc{l}.ff"), d, ff, &mut s);
            norm_specs(&format!("tam.enc{l}.ln2"), d, &mut s);
        }
        s.push(("tam.wc".into(), vec![d, d], Init::Fan(d)));
        s.push(("tam.wp".into(), vec![d, d], Init::Fan(d)));
        s.push(("tam.vs".into(), vec![d], Init::Fan(d)));
    }
    s
}

impl Params {
    /// Fresh parameters. Each tensor draws from its own stream keyed by its
    /// name, so toggling the tree-aware branch leaves the shared weights
    /// unchanged.
    pub fn init(config: &ModelConfig) -> Params {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in specs(config) {
            let mut r = rng::rng(config.seed, Stream::Init, rng::name_index(&name));
            let t = match init {
                Init::Fan(fan_in) => Tensor::randn(&shape, 1.0 / (fan_in as f64).sqrt(), &mut r),
                Init::Normal(std) => Tensor::randn(&shape, std, &mut r),
                Init::Ones => Tensor::full(&shape, 1.0),
                Init::Zeros => Tensor::zeros(&shape),
            };
            names.push(name);
            tensors.push(t);
        }
        Params::from_parts(names, tensors)
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Params {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Params { names, tensors, index }
    }

    /// Whether `other` has the same names and shapes.
    pub fn same_layout(&self, other: &Params) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &Tape) -> Bound<'a> {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(), params: self }
    }

    /// Binds caller-provided leaves, in parameter order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound<'_> {
        assert_eq!(vars.len(), self.tensors.len());
        Bound { vars, params: self }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'a> {
    vars: Vec<Var>,
    params: &'a Params,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.position(name).is_some()
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter after `tape.backward`.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad(v).expect("backward has run")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_weights_independent_of_tam_branch() {
        let with = Params::init(&ModelConfig::toy(12));
        let without = Params::init(&ModelConfig { tam: false, ..ModelConfig::toy(12) });
        assert!(with.names().len() > without.names().len());
        for name in without.names() {
            assert_eq!(with.get(name), without.get(name), "{name}");
        }
        assert!(without.get("tam.wc").is_none());
    }

    #[test]
    fn seeded() {
        let a = Params::init(&ModelConfig::toy(12));
        let b = Params::init(&ModelConfig::toy(12));
        assert_eq!(a, b);
        let c = Params::init(&ModelConfig { seed: 8, ..ModelConfig::toy(12) });
        assert_ne!(a.get("embed"), c.get("embed"));
        assert_eq!(a.get("tam.vs").unwrap().shape(), [64]);
    }
}
