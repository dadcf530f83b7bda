use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::latex::{EOS_ID, PAD_ID, SOS_ID};
use crate::treebank::ParentAnnotation;

use super::ModelError;

/// Parent target of one token slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParentTarget {
    Parent(usize),
    NoParent,
    Pad,
}

/// One sequence going into a batch.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub ids: &'a [usize],
    pub parents: Option<&'a ParentAnnotation>,
    /// Seed of this item's source noise.
    pub noise_seed: u64,
}

/// Padded batch of `size` sequences of at most `len` tokens.
///
/// Decoder inputs are `[SOS, y_1 .. y_n]` and targets `[y_1 .. y_n, EOS]`,
/// both `len + 1` long. The source has `len + 1` observation rows per
/// sequence: a noisy one-hot of each target token, EOS included.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub len: usize,
    pub vocab_size: usize,
    pub lengths: Vec<usize>,
    /// `size × len`, PAD-filled.
    pub tokens: Vec<usize>,
    /// `size × len`.
    pub parents: Vec<ParentTarget>,
    /// `size × (len + 1) × vocab_size`.
    pub source: Vec<f64>,
}

/// Noisy one-hot observations of `ids` followed by EOS.
pub fn source_rows(ids: &[usize], vocab_size: usize, sigma: f64, noise_seed: u64) -> Vec<f64> {
    let rows = ids.len() + 1;
    let mut out = vec![0.0; rows * vocab_size];
    for (r, &id) in ids.iter().chain(std::iter::once(&EOS_ID)).enumerate() {
        out[r * vocab_size + id] = 1.0;
    }
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in out.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    out
}

impl Batch {
    pub fn new(items: &[BatchItem<'_>], vocab_size: usize, sigma: f64) -> Result<Batch, ModelError> {
        if items.is_empty() {
            return Err(ModelError::Batch("empty batch".into()));
        }
        let size = items.len();
        let len = items.iter().map(|it| it.ids.len()).max().unwrap_or(0);
        let mut tokens = vec![PAD_ID; size * len];
        let mut parents = vec![ParentTarget::Pad; size * len];
        let mut source = vec![0.0; size * (len + 1) * vocab_size];
        let mut lengths = Vec::with_capacity(size);
        for (b, it) in items.iter().enumerate() {
            let n = it.ids.len();
            if let Some(&bad) = it.ids.iter().find(|&&id| id >= vocab_size || id == PAD_ID || id == SOS_ID) {
                return Err(ModelError::Batch(format!("token id {bad} cannot appear in a sequence")));
            }
            tokens[b * len..b * len + n].copy_from_slice(it.ids);
            if let Some(ann) = it.parents {
                if ann.len() != n {
                    return Err(ModelError::Batch(format!(
                        "annotation length {} does not match {n} tokens",
                        ann.len()
                    )));
                }
                for i in 0..n {
                    parents[b * len + i] = match ann.parent(i) {
                        Some(p) => ParentTarget::Parent(p),
                        None => ParentTarget::NoParent,
                    };
                }
            } else {
                parents[b * len..b * len + n].fill(ParentTarget::NoParent);
            }
            let rows = source_rows(it.ids, vocab_size, sigma, it.noise_seed);
            let start = b * (len + 1) * vocab_size;
            source[start..start + rows.len()].copy_from_slice(&rows);
            lengths.push(n);
        }
        Ok(Batch { size, len, vocab_size, lengths, tokens, parents, source })
    }

    /// `[SOS, y..., PAD...]`, `size × (len + 1)`.
    pub fn decoder_inputs(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size * (self.len + 1));
        for b in 0..self.size {
            out.push(SOS_ID);
            out.extend_from_slice(&self.tokens[b * self.len..(b + 1) * self.len]);
        }
        out
    }

    /// `[y..., EOS, ignored...]`, `size × (len + 1)`.
    pub fn decoder_targets(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.size * (self.len + 1));
        for b in 0..self.size {
            let n = self.lengths[b];
            for t in 0..=self.len {
                out.push(match t.cmp(&n) {
                    std::cmp::Ordering::Less => Some(self.tokens[b * self.len + t]),
                    std::cmp::Ordering::Equal => Some(EOS_ID),
                    std::cmp::Ordering::Greater => None,
                });
            }
        }
        out
    }

    /// Source rows past the EOS observation, `size × (len + 1)`.
    pub fn source_padding(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.size * (self.len + 1));
        for b in 0..self.size {
            out.extend((0..=self.len).map(|s| s > self.lengths[b]));
        }
        out
    }
}
