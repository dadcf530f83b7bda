use proptest::prelude::*;
use tamer_core::evalkit::{
    delta_csv, evaluate, parent_accuracy, token_edit_distance, EvalError, CSV_HEADER,
};
use tamer_core::treebank::{treeify_tokens, ParentAnnotation};

fn t(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn planted_distances() {
    let refs = vec![t("a + b"), t("x ^ { 2 }"), t("1 - c"), t("\\frac { a } { b }")];
    let preds = vec![
        t("a + b"),
        t("x ^ { 2 }"),
        t("1 + c"),
        // three trailing insertions
        t("\\frac { a } { b } + c -"),
    ];
    assert_eq!(token_edit_distance(&preds[3], &refs[3]), 3);
    let r = evaluate(&preds, &refs).unwrap();
    assert_eq!((r.exprate, r.le1, r.le2), (50.0, 75.0, 75.0));
}

#[test]
fn three_of_ten_unbalanced() {
    let refs: Vec<Vec<String>> = (0..10).map(|_| t("x ^ { 2 }")).collect();
    let mut preds = refs.clone();
    preds[1] = t("x ^ { 2");
    preds[4] = t("x ^ 2 }");
    preds[8] = t("x ^ { { 2 }");
    let r = evaluate(&preds, &refs).unwrap();
    assert_eq!(r.bracket_accuracy, 70.0);
    assert_eq!(r.exprate, 70.0);
}

#[test]
fn parent_accuracy_cases() {
    let gold = treeify_tokens(&t("3 ^ { 2 } - 1 = 8")).unwrap();
    assert_eq!(parent_accuracy(&gold, &gold), Ok(1.0));
    let mut flipped = gold.to_signed();
    flipped[6] = 0;
    let pred = ParentAnnotation::from_signed(&flipped).unwrap();
    assert_eq!(parent_accuracy(&pred, &gold), Ok(0.8));
    let flat = ParentAnnotation::from_signed(&[-1, -1]).unwrap();
    assert_eq!(parent_accuracy(&flat, &flat), Err(EvalError::Undefined));
    assert!(matches!(parent_accuracy(&flat, &gold), Err(EvalError::LengthMismatch { .. })));
}

#[test]
fn bucketed_layout() {
    let refs = vec![
        t("a + b"),
        t("x ^ { 2 } + 1"),
        t("x ^ { 2 } + 1"),
        t("a _ { b ^ { c } + 1 } + 1"),
    ];
    let preds = vec![t("a + b"), t("x ^ { 2 } + 1"), t("x ^ 2 + 1"), t("a")];
    let r = evaluate(&preds, &refs).unwrap();
    let labels: Vec<&str> = r.buckets.iter().map(|b| b.complexity.as_str()).collect();
    assert_eq!(labels, ["0", "1", "2"]);
    assert_eq!(r.buckets[1].n, 2);
    assert_eq!(r.buckets[1].exprate, 50.0);
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 5);
    // two deletions in the third pair: within two errors, not within one
    assert_eq!(lines[4], "TOTAL,4,50.0000,50.0000,75.0000,100.0000");
    let same = delta_csv(&r, &r);
    assert!(same.lines().skip(1).all(|l| l.contains(",0.0000,") && l.ends_with(",0.0000")));
}

#[test]
fn json_round_trip() {
    let refs = vec![t("a + b"), t("x ^ { 2 } + 1")];
    let r = evaluate(&refs, &refs).unwrap();
    let back: tamer_core::evalkit::EvalReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
}

fn seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..8)
}

const ALPHABET: [&str; 6] = ["a", "b", "{", "}", "^", "+"];

fn expr() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(0usize..ALPHABET.len(), 1..10).prop_map(|v| v.into_iter().map(|i| ALPHABET[i].to_string()).collect())
}

proptest! {
    #[test]
    fn distance_is_a_metric(a in seq(), b in seq(), c in seq()) {
        let ab = token_edit_distance(&a, &b);
        prop_assert_eq!(ab, token_edit_distance(&b, &a));
        prop_assert_eq!(ab == 0, a == b);
        prop_assert!(token_edit_distance(&a, &c) <= ab + token_edit_distance(&b, &c));
        prop_assert!(ab <= a.len().max(b.len()));
    }

    #[test]
    fn report_invariants(pairs in prop::collection::vec((expr(), expr()), 1..20)) {
        let (preds, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let r = evaluate(&preds, &refs).unwrap();
        prop_assert!(r.exprate <= r.le1 && r.le1 <= r.le2);
        for v in [r.exprate, r.le1, r.le2, r.bracket_accuracy] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        prop_assert_eq!(r.buckets.iter().map(|b| b.n).sum::<usize>(), r.n);
        let weighted: f64 = r.buckets.iter().map(|b| b.exprate * b.n as f64).sum::<f64>() / r.n as f64;
        prop_assert!((weighted - r.exprate).abs() < 1e-9);
    }
}
