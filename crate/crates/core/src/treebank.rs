//! Parent annotations for LaTeX token sequences and the expression trees they
//! induce.
//!
//! Node identifiers are token positions. Every non-structural token is a tree
//! node; its parent is the attachment point in effect when it is read:
//!
//! * baseline chain: a symbol attaches to the previous attachment point and
//!   becomes the new one; the first symbol has no parent.
//! * `{`, `}`, `^`, `_` never have a parent and are never attachment points.
//! * scripts: the argument of `^`/`_` is read with the base as attachment
//!   point; once it closes the base is restored.
//! * commands: every argument of `\frac` (two groups), `\sqrt` (optional
//!   `[ ]` index, one group) or any other command (all immediately following
//!   brace groups) hangs off the command token, which is the attachment point
//!   afterwards. The brackets of a `\sqrt` index are structural there only.
//! * a bare brace group is transparent: the chain runs through it and the
//!   last node inside becomes the attachment point.

use std::fmt;

use thiserror::Error;

use crate::latex::{TokenClass, TokenSeq};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("unbalanced braces at position {0}")]
    UnbalancedBraces(usize),
    #[error("script token at position {0} has no argument")]
    DanglingScript(usize),
    #[error("parent annotation contains a cycle through position {0}")]
    CycleDetected(usize),
    #[error("invalid parent annotation: {0}")]
    InvalidAnnotation(String),
}

/// Per-token parent positions; `None` is the `-1` of the tuple format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParentAnnotation {
    parents: Vec<Option<usize>>,
    nodes: Vec<bool>,
}

impl ParentAnnotation {
    /// Annotation from bare parent indices. Without token identities, a
    /// position counts as a tree node when it takes part in an edge; position
    /// 0 always does, since the first token of a non-empty expression roots
    /// the baseline chain unless it is structural.
    pub fn from_parents(parents: Vec<Option<usize>>) -> Result<ParentAnnotation, TreeError> {
        let mut nodes = vec![false; parents.len()];
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= i {
                    return Err(TreeError::InvalidAnnotation(format!(
                        "parent {p} of position {i} does not precede it"
                    )));
                }
                nodes[i] = true;
                nodes[p] = true;
            }
        }
        if let Some(first) = nodes.first_mut() {
            *first = true;
        }
        Ok(ParentAnnotation { parents, nodes })
    }

    /// Annotation with an explicit tree-node mask. Every position with a
    /// parent, and every parent, must be marked as a node.
    pub fn from_parts(parents: Vec<Option<usize>>, nodes: Vec<bool>) -> Result<ParentAnnotation, TreeError> {
        if parents.len() != nodes.len() {
            return Err(TreeError::InvalidAnnotation("node mask length differs".into()));
        }
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= i {
                    return Err(TreeError::InvalidAnnotation(format!(
                        "parent {p} of position {i} does not precede it"
                    )));
                }
                if !nodes[i] || !nodes[p] {
                    return Err(TreeError::InvalidAnnotation(format!(
                        "edge ({i}, {p}) touches a non-node position"
                    )));
                }
            }
        }
        Ok(ParentAnnotation { parents, nodes })
    }

    /// From the tuple convention where `-1` marks a missing parent.
    pub fn from_signed(parents: &[i64]) -> Result<ParentAnnotation, TreeError> {
        let parents = parents
            .iter()
            .map(|&p| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                p => Err(TreeError::InvalidAnnotation(format!("negative parent {p}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        ParentAnnotation::from_parents(parents)
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parents[i]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// Whether position `i` is a tree node (a non-structural token).
    pub fn is_node(&self, i: usize) -> bool {
        self.nodes[i]
    }

    pub fn node_mask(&self) -> &[bool] {
        &self.nodes
    }

    pub fn to_signed(&self) -> Vec<i64> {
        self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect()
    }

    /// Number of positions carrying a parent.
    pub fn contributing(&self) -> usize {
        self.parents.iter().filter(|p| p.is_some()).count()
    }

    /// `(0, -1), (1, -1), ...`
    pub fn to_tuple_string(&self) -> String {
        self.to_signed()
            .iter()
            .enumerate()
            .map(|(c, p)| format!("({c}, {p})"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for ParentAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tuple_string())
    }
}

struct Treeifier<'a> {
    tokens: Vec<&'a str>,
    parents: Vec<Option<usize>>,
    nodes: Vec<bool>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Close {
    End,
    Brace,
    Bracket,
}

impl<'a> Treeifier<'a> {
    fn is_structural(&self, i: usize) -> bool {
        TokenClass::of(self.tokens[i]) == TokenClass::Structural
    }

    fn at(&self, pos: usize, tok: &str) -> bool {
        self.tokens.get(pos) == Some(&tok)
    }

    /// Reads items until `close`; returns the position of the closing token
    /// (or the sequence length) and the attachment point afterwards.
    fn sequence(
        &mut self,
        mut pos: usize,
        mut attach: Option<usize>,
        close: Close,
        open_pos: usize,
    ) -> Result<(usize, Option<usize>), TreeError> {
        loop {
            match (self.tokens.get(pos).copied(), close) {
                (None, Close::End) => return Ok((pos, attach)),
                (None, _) => return Err(TreeError::UnbalancedBraces(open_pos)),
                (Some("}"), Close::Brace) => return Ok((pos, attach)),
                (Some("}"), _) => return Err(TreeError::UnbalancedBraces(pos)),
                (Some("]"), Close::Bracket) => return Ok((pos, attach)),
                _ => {}
            }
            (pos, attach) = self.item(pos, attach)?;
        }
    }

    /// Parses a brace group starting at `pos` (which must be `{`) with the
    /// given attachment point. Returns the position after `}`.
    fn group(&mut self, pos: usize, attach: Option<usize>) -> Result<(usize, Option<usize>), TreeError> {
        let (close, after) = self.sequence(pos + 1, attach, Close::Brace, pos)?;
        Ok((close + 1, after))
    }

    fn item(&mut self, pos: usize, attach: Option<usize>) -> Result<(usize, Option<usize>), TreeError> {
        match self.tokens[pos] {
            "{" => self.group(pos, attach),
            "^" | "_" => {
                let base = attach;
                let next = pos + 1;
                match self.tokens.get(next).copied() {
                    None | Some("}") | Some("^") | Some("_") => Err(TreeError::DanglingScript(pos)),
                    Some("{") => {
                        let (after, _) = self.group(next, base)?;
                        Ok((after, base))
                    }
                    Some(_) => {
                        let (after, _) = self.item(next, base)?;
                        Ok((after, base))
                    }
                }
            }
            tok => {
                self.parents[pos] = attach;
                self.nodes[pos] = true;
                let mut next = pos + 1;
                if TokenClass::of(tok) == TokenClass::Command {
                    let owner = Some(pos);
                    let arity = match tok {
                        "\\frac" => Some(2),
                        "\\sqrt" => {
                            if self.at(next, "[") {
                                let (close, _) = self.sequence(next + 1, owner, Close::Bracket, next)?;
                                self.nodes[next] = false;
                                self.nodes[close] = false;
                                next = close + 1;
                            }
                            Some(1)
                        }
                        _ => None,
                    };
                    let mut taken = 0;
                    while self.at(next, "{") && arity.is_none_or(|n| taken < n) {
                        (next, _) = self.group(next, owner)?;
                        taken += 1;
                    }
                }
                Ok((next, Some(pos)))
            }
        }
    }
}

/// Derives the parent annotation of a token sequence.
pub fn treeify(seq: &TokenSeq) -> Result<ParentAnnotation, TreeError> {
    treeify_tokens(&seq.tokens())
}

pub fn treeify_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<ParentAnnotation, TreeError> {
    let tokens: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let n = tokens.len();
    let mut t = Treeifier { tokens, parents: vec![None; n], nodes: vec![false; n] };
    t.sequence(0, None, Close::End, 0)?;
    debug_assert!((0..n).all(|i| !t.is_structural(i) || t.parents[i].is_none()));
    Ok(ParentAnnotation { parents: t.parents, nodes: t.nodes })
}

/// Explicit forest over tree-node positions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExprTree {
    nodes: Vec<usize>,
    children: Vec<Vec<usize>>,
    parent: Vec<Option<usize>>,
    member: Vec<bool>,
    roots: Vec<usize>,
}

impl ExprTree {
    /// Node positions, ascending.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    /// Children of `node` ordered by position.
    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn contains(&self, node: usize) -> bool {
        self.member.get(node).copied().unwrap_or(false)
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    /// Attaches a copy of `other` below `at`. Positions of `other` are
    /// shifted past every position already in use.
    pub fn graft(&mut self, at: usize, other: &ExprTree) {
        let offset = self.member.len();
        let grow = other.member.len();
        self.children.resize(offset + grow, Vec::new());
        self.parent.resize(offset + grow, None);
        self.member.resize(offset + grow, false);
        for &n in &other.nodes {
            let id = n + offset;
            self.member[id] = true;
            self.nodes.push(id);
            self.children[id] = other.children[n].iter().map(|c| c + offset).collect();
            self.parent[id] = other.parent[n].map(|p| p + offset);
        }
        for &r in &other.roots {
            self.parent[r + offset] = Some(at);
            self.children[at].push(r + offset);
        }
    }
}

pub fn build_tree(ann: &ParentAnnotation) -> Result<ExprTree, TreeError> {
    let n = ann.len();
    let mut tree = ExprTree {
        nodes: Vec::new(),
        children: vec![Vec::new(); n],
        parent: ann.parents.clone(),
        member: ann.nodes.clone(),
        roots: Vec::new(),
    };
    for (i, p) in ann.parents.iter().enumerate() {
        if let Some(p) = *p {
            if p >= n {
                return Err(TreeError::InvalidAnnotation(format!("parent {p} out of range")));
            }
            tree.children[p].push(i);
            tree.member[i] = true;
            tree.member[p] = true;
        }
    }
    tree.nodes = (0..n).filter(|&i| tree.member[i]).collect();
    tree.roots = tree.nodes.iter().copied().filter(|&i| ann.parents[i].is_none()).collect();

    // Every node must reach a root.
    let mut state = vec![0u8; n];
    for &start in &tree.nodes {
        let mut path = Vec::new();
        let mut cur = start;
        loop {
            match state[cur] {
                2 => break,
                1 => return Err(TreeError::CycleDetected(cur)),
                _ => {}
            }
            state[cur] = 1;
            path.push(cur);
            match ann.parents[cur] {
                Some(p) => cur = p,
                None => break,
            }
        }
        for v in path {
            state[v] = 2;
        }
    }
    Ok(tree)
}

/// Maximum, over root-to-leaf paths, of the number of nodes with two or more
/// children.
pub fn structural_complexity(tree: &ExprTree) -> usize {
    let mut best = 0;
    let mut stack: Vec<(usize, usize)> = tree.roots.iter().map(|&r| (r, 0)).collect();
    while let Some((node, above)) = stack.pop() {
        let kids = &tree.children[node];
        let here = above + usize::from(kids.len() >= 2);
        if kids.is_empty() {
            best = best.max(here);
        }
        stack.extend(kids.iter().map(|&c| (c, here)));
    }
    best
}

/// Stack scan over `{` / `}`.
pub fn brackets_balanced(seq: &TokenSeq) -> bool {
    brackets_balanced_tokens(&seq.tokens())
}

pub fn brackets_balanced_tokens<S: AsRef<str>>(tokens: &[S]) -> bool {
    let mut depth = 0usize;
    for t in tokens {
        match t.as_ref() {
            "{" => depth += 1,
            "}" => {
                if depth == 0 {
                    return false;
                }
                depth -= 1;
            }
            _ => {}
        }
    }
    depth == 0
}

/// Complexity of a token sequence, via its annotation.
pub fn complexity_of<S: AsRef<str>>(tokens: &[S]) -> Result<usize, TreeError> {
    Ok(structural_complexity(&build_tree(&treeify_tokens(tokens)?)?))
}

/// Positions that can carry a parent: tree nodes after the first token.
/// Falls back to token classes when the sequence does not parse.
pub fn candidate_child_rows<S: AsRef<str>>(tokens: &[S]) -> Vec<bool> {
    match treeify_tokens(tokens) {
        Ok(ann) => (0..ann.len()).map(|i| i > 0 && ann.is_node(i)).collect(),
        Err(_) => tokens
            .iter()
            .enumerate()
            .map(|(i, t)| i > 0 && TokenClass::of(t.as_ref()) != TokenClass::Structural)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn signed(s: &str) -> Vec<i64> {
        treeify_tokens(&toks(s)).unwrap().to_signed()
    }

    #[test]
    fn golden_annotation() {
        let ann = treeify_tokens(&toks("3 ^ { 2 } - 1 = 8")).unwrap();
        assert_eq!(ann.to_signed(), [-1, -1, -1, 0, -1, 0, 5, 6, 7]);
        assert_eq!(
            ann.to_tuple_string(),
            "(0, -1), (1, -1), (2, -1), (3, 0), (4, -1), (5, 0), (6, 5), (7, 6), (8, 7)"
        );
    }

    #[test]
    fn chains() {
        assert_eq!(signed("x"), [-1]);
        assert_eq!(signed("a + b"), [-1, 0, 1]);
        assert!(treeify_tokens::<&str>(&[]).unwrap().is_empty());
    }

    #[test]
    fn frac_and_sqrt() {
        // \frac { a } { b } c
        assert_eq!(signed("\\frac { a } { b } c"), [-1, -1, 0, -1, -1, 0, -1, 0]);
        // \sqrt [ 3 ] { x } + 1
        let ann = treeify_tokens(&toks("\\sqrt [ 3 ] { x } + 1")).unwrap();
        assert_eq!(ann.to_signed(), [-1, -1, 0, -1, -1, 0, -1, 0, 7]);
        assert!(!ann.is_node(1) && !ann.is_node(3));
        // brackets outside \sqrt are ordinary symbols
        assert_eq!(signed("[ a ]"), [-1, 0, 1]);
    }

    #[test]
    fn sub_and_superscript_on_one_base() {
        // x _ { i } ^ { 2 } + y
        assert_eq!(signed("x _ { i } ^ { 2 } + y"), [-1, -1, -1, 0, -1, -1, -1, 0, -1, 0, 9]);
        // \sum _ { i = 1 } ^ { n } i
        let s = signed("\\sum _ { i = 1 } ^ { n } i");
        assert_eq!(s, [-1, -1, -1, 0, 3, 4, -1, -1, -1, 0, -1, 0]);
    }

    #[test]
    fn unbraced_script_argument() {
        assert_eq!(signed("x ^ 2 + 1"), [-1, -1, 0, 0, 3]);
    }

    #[test]
    fn bare_group_is_transparent() {
        // { a b } c  : c attaches to b
        assert_eq!(signed("{ a b } c"), [-1, -1, 1, -1, 2]);
        // { a b } ^ { 2 } : base is b
        assert_eq!(signed("{ a b } ^ { 2 }"), [-1, -1, 1, -1, -1, -1, 2, -1]);
        // empty group keeps prior attachment
        assert_eq!(signed("a { } b"), [-1, -1, -1, 0]);
    }

    #[test]
    fn errors() {
        assert_eq!(
            treeify_tokens(&toks("x ^ { 2")),
            Err(TreeError::UnbalancedBraces(2))
        );
        assert_eq!(treeify_tokens(&toks("a } b")), Err(TreeError::UnbalancedBraces(1)));
        assert_eq!(treeify_tokens(&toks("x ^")), Err(TreeError::DanglingScript(1)));
        assert_eq!(treeify_tokens(&toks("{ x ^ }")), Err(TreeError::DanglingScript(2)));
    }

    #[test]
    fn build_tree_golden() {
        let ann = ParentAnnotation::from_signed(&[-1, -1, -1, 0, -1, 0, 5, 6, 7]).unwrap();
        let tree = build_tree(&ann).unwrap();
        assert_eq!(tree.roots(), [0]);
        assert_eq!(tree.children(0), [3, 5]);
        assert_eq!(tree.children(5), [6]);
        assert_eq!(tree.children(6), [7]);
        assert_eq!(tree.children(7), [8]);
        assert_eq!(tree.nodes(), [0, 3, 5, 6, 7, 8]);
        assert_eq!(structural_complexity(&tree), 1);
    }

    #[test]
    fn build_tree_trivial() {
        let one = build_tree(&ParentAnnotation::from_signed(&[-1]).unwrap()).unwrap();
        assert_eq!(one.roots(), [0]);
        assert!(one.children(0).is_empty());
        let empty = build_tree(&ParentAnnotation::from_signed(&[]).unwrap()).unwrap();
        assert!(empty.roots().is_empty());
        assert_eq!(structural_complexity(&empty), 0);
    }

    #[test]
    fn treeify_roots_exclude_structural_tokens() {
        let tree = build_tree(&treeify_tokens(&toks("{ x }")).unwrap()).unwrap();
        assert_eq!(tree.roots(), [1]);
    }

    #[test]
    fn annotation_rejects_forward_parent() {
        assert!(ParentAnnotation::from_signed(&[1, -1]).is_err());
        assert!(ParentAnnotation::from_signed(&[-2]).is_err());
    }

    #[test]
    fn complexity_examples() {
        assert_eq!(complexity_of(&toks("a + 1 = b")).unwrap(), 0);
        assert_eq!(complexity_of(&toks("3 ^ { 2 } - 1 = 8")).unwrap(), 1);
        assert_eq!(complexity_of::<&str>(&[]).unwrap(), 0);
        assert_eq!(complexity_of(&toks("x ^ { 2 }")).unwrap(), 0);
        // nested fraction in a numerator: two branching nodes on one path
        assert_eq!(
            complexity_of(&toks("\\frac { \\frac { a } { b } } { c }")).unwrap(),
            2
        );
    }

    #[test]
    fn bracket_balance() {
        assert!(brackets_balanced_tokens(&["{", "x", "}"]));
        assert!(!brackets_balanced_tokens(&["x", "^", "{", "2"]));
        assert!(!brackets_balanced_tokens(&["}", "{"]));
        assert!(brackets_balanced_tokens::<&str>(&[]));
    }

    #[test]
    fn child_rows() {
        let rows = candidate_child_rows(&toks("3 ^ { 2 } - 1"));
        assert_eq!(rows, [false, false, false, true, false, true, true]);
        let fallback = candidate_child_rows(&toks("x ^ { 2"));
        assert_eq!(fallback, [false, false, false, true]);
    }

    #[test]
    fn graft_adds_children() {
        let mut a = build_tree(&treeify_tokens(&toks("a + b")).unwrap()).unwrap();
        let b = build_tree(&treeify_tokens(&toks("x ^ { 2 } + 1")).unwrap()).unwrap();
        a.graft(0, &b);
        assert_eq!(a.children(0).len(), 2);
        assert_eq!(structural_complexity(&a), 2);
    }
}
