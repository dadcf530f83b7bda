//! LaTeX math tokenization and the symbol vocabulary.
//!
//! Token ids are dense in `0..V`. Ids 0, 1 and 2 are always the reserved
//! `<sos>`, `<eos>` and `<pad>` markers; vocabulary files list the remaining
//! symbols one per line, so line `k` (0-based) receives id `k + 3`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

pub const SOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const PAD_ID: usize = 2;

/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED: usize = 3;

/// Default symbol set, one token per line.
pub const CROHME_SYMBOLS: &str = include_str!("../assets/crohme_symbols.txt");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LatexError {
    #[error("unknown token {token:?} at position {position}")]
    UnknownToken { token: String, position: usize },
    #[error("duplicate token {0:?} in vocabulary")]
    DuplicateToken(String),
    #[error("token id {0} out of range for vocabulary of size {1}")]
    IdOutOfRange(usize, usize),
    #[error("failed to read vocabulary: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenClass {
    /// `{`, `}`, `^`, `_`: layout control, never a tree node.
    Structural,
    /// Backslash command such as `\frac` or `\alpha`.
    Command,
    Symbol,
    /// `<sos>`, `<eos>`, `<pad>`.
    Reserved,
}

impl TokenClass {
    pub fn of(token: &str) -> TokenClass {
        match token {
            "{" | "}" | "^" | "_" => TokenClass::Structural,
            SOS | EOS | PAD => TokenClass::Reserved,
            t if t.starts_with('\\') && t.len() > 1 => TokenClass::Command,
            _ => TokenClass::Symbol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    classes: Vec<TokenClass>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from non-reserved symbols, prepending the reserved markers.
    pub fn new<I, S>(symbols: I) -> Result<Vocab, LatexError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = vec![SOS.into(), EOS.into(), PAD.into()];
        all.extend(symbols.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (id, s) in all.iter().enumerate() {
            if index.insert(s.clone(), id).is_some() {
                return Err(LatexError::DuplicateToken(s.clone()));
            }
        }
        let classes = all.iter().map(|s| TokenClass::of(s)).collect();
        Ok(Vocab { symbols: all, classes, index })
    }

    /// Parses the one-token-per-line vocabulary format. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Vocab, LatexError> {
        Vocab::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn load(path: &Path) -> Result<Vocab, LatexError> {
        let text = std::fs::read_to_string(path).map_err(|e| LatexError::Io(e.to_string()))?;
        Vocab::parse(&text)
    }

    /// The bundled CROHME-style symbol set.
    pub fn crohme() -> Vocab {
        Vocab::parse(CROHME_SYMBOLS).expect("bundled vocabulary is valid")
    }

    /// Vocabulary over the distinct tokens of a corpus, in sorted order.
    pub fn from_corpus<'a, I>(sequences: I) -> Vocab
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut seen: Vec<&str> = sequences
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
            .filter(|t| TokenClass::of(t) != TokenClass::Reserved)
            .collect();
        seen.sort_unstable();
        seen.dedup();
        Vocab::new(seen).expect("deduplicated")
    }

    /// Vocabulary file contents (reserved ids omitted).
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols[RESERVED..] {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn class(&self, id: usize) -> TokenClass {
        self.classes[id]
    }

    pub fn is_structural(&self, id: usize) -> bool {
        self.classes[id] == TokenClass::Structural
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

/// A validated token sequence bound to its vocabulary.
#[derive(Clone, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<usize>,
    vocab: Arc<Vocab>,
}

impl fmt::Debug for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.tokens()).finish()
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&detokenize(self))
    }
}

impl TokenSeq {
    pub fn from_ids(ids: Vec<usize>, vocab: Arc<Vocab>) -> Result<TokenSeq, LatexError> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab.len()) {
            return Err(LatexError::IdOutOfRange(bad, vocab.len()));
        }
        Ok(TokenSeq { ids, vocab })
    }

    pub fn from_tokens<S: AsRef<str>>(tokens: &[S], vocab: Arc<Vocab>) -> Result<TokenSeq, LatexError> {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(position, t)| {
                vocab.id(t.as_ref()).ok_or_else(|| LatexError::UnknownToken {
                    token: t.as_ref().to_string(),
                    position,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TokenSeq { ids, vocab })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn token(&self, i: usize) -> &str {
        self.vocab.token(self.ids[i])
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.ids.iter().map(|&id| self.vocab.token(id)).collect()
    }

    pub fn owned_tokens(&self) -> Vec<String> {
        self.ids.iter().map(|&id| self.vocab.token(id).to_string()).collect()
    }
}

/// Splits on whitespace; one token per chunk.
pub fn tokenize_spaced(text: &str, vocab: &Arc<Vocab>) -> Result<TokenSeq, LatexError> {
    let chunks: Vec<&str> = text.split_whitespace().collect();
    TokenSeq::from_tokens(&chunks, Arc::clone(vocab))
}

/// Splits unspaced LaTeX into raw chunks without vocabulary validation.
///
/// A backslash followed by letters is one chunk; a backslash followed by any
/// other character (`\{`, `\,`) pairs with that character; every other
/// non-space character is its own chunk.
pub fn split_raw(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '\\' {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_ascii_alphabetic() {
                j += 1;
            }
            if j == i + 1 && j < chars.len() && !chars[j].is_whitespace() {
                j += 1;
            }
            out.push(chars[i..j].iter().collect());
            i = j;
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

pub fn tokenize_raw(text: &str, vocab: &Arc<Vocab>) -> Result<TokenSeq, LatexError> {
    TokenSeq::from_tokens(&split_raw(text), Arc::clone(vocab))
}

pub fn detokenize(seq: &TokenSeq) -> String {
    seq.tokens().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Arc<Vocab> {
        Arc::new(Vocab::crohme())
    }

    #[test]
    fn reserved_ids_and_structural_flags() {
        let v = Vocab::crohme();
        assert_eq!(v.token(SOS_ID), SOS);
        assert_eq!(v.token(EOS_ID), EOS);
        assert_eq!(v.token(PAD_ID), PAD);
        let structural: Vec<&str> = (0..v.len())
            .filter(|&i| v.is_structural(i))
            .map(|i| v.token(i))
            .collect();
        assert_eq!(structural.len(), 4);
        for t in ["{", "}", "^", "_"] {
            assert!(structural.contains(&t));
        }
        assert!(v.len() > 100);
        assert_eq!(v.class(v.id("\\frac").unwrap()), TokenClass::Command);
        assert_eq!(v.class(v.id("x").unwrap()), TokenClass::Symbol);
    }

    #[test]
    fn file_ids_offset_by_reserved() {
        let v = Vocab::parse("a\nb\n\nc\n").unwrap();
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("c"), Some(5));
        assert_eq!(Vocab::parse(&v.to_file_string()).unwrap(), v);
    }

    #[test]
    fn duplicate_rejected() {
        assert_eq!(
            Vocab::parse("a\na\n"),
            Err(LatexError::DuplicateToken("a".into()))
        );
        assert!(Vocab::parse("<eos>\n").is_err());
    }

    #[test]
    fn spaced_golden() {
        let s = tokenize_spaced("3 ^ { 2 } - 1 = 8", &vocab()).unwrap();
        assert_eq!(s.tokens(), ["3", "^", "{", "2", "}", "-", "1", "=", "8"]);
        assert!(tokenize_spaced("", &vocab()).unwrap().is_empty());
        let f = tokenize_spaced("\\frac { a } { b }", &vocab()).unwrap();
        assert_eq!(f.tokens(), ["\\frac", "{", "a", "}", "{", "b", "}"]);
    }

    #[test]
    fn spaced_unknown_token() {
        let err = tokenize_spaced("a + \\foo", &vocab()).unwrap_err();
        assert_eq!(
            err,
            LatexError::UnknownToken { token: "\\foo".into(), position: 2 }
        );
    }

    #[test]
    fn raw_scan() {
        let v = vocab();
        assert_eq!(tokenize_raw("x^{2}", &v).unwrap().tokens(), ["x", "^", "{", "2", "}"]);
        assert_eq!(tokenize_raw("a", &v).unwrap().tokens(), ["a"]);
        assert_eq!(tokenize_raw("\\sqrt{b}", &v).unwrap().tokens(), ["\\sqrt", "{", "b", "}"]);
        assert_eq!(split_raw("\\{x\\}"), ["\\{", "x", "\\}"]);
        assert_eq!(split_raw("\\frac12"), ["\\frac", "1", "2"]);
    }

    #[test]
    fn detokenize_joins() {
        let v = vocab();
        assert_eq!(detokenize(&TokenSeq::from_ids(vec![], v.clone()).unwrap()), "");
        let s = tokenize_spaced("3 ^ { 2 }", &v).unwrap();
        assert_eq!(detokenize(&s), "3 ^ { 2 }");
    }

    #[test]
    fn ids_validated() {
        let v = vocab();
        assert!(TokenSeq::from_ids(vec![v.len()], v.clone()).is_err());
    }
}
